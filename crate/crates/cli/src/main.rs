use std::collections::HashMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use dialectid::audio::load_wav;
use dialectid::config::PipelineConfig;
use dialectid::corpus::{self, load_manifest, Manifest, SynthRequest};
use dialectid::evaluation::{self, run_experiment, train_mode, EvalReport, Mode};
use dialectid::hierarchy::{load_hierarchy, DialectTree, HadidModel};
use dialectid::neuralnet::MODEL_FORMAT_VERSION;
use dialectid::prosody::{analyze_utterance, Feature, FeatureVector, UnusableUtterance};
use dialectid::stats::{anova_table, dialect_means, write_anova_csv};
use dialectid::table::{load_table, save_table, FeatureRow};

#[derive(Parser)]
#[command(name = "dialectid", about = "Prosody-based spoken dialect identification")]
struct Cli {
    /// Pipeline configuration file (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with ground-truth sidecars.
    Synth(SynthArgs),
    /// Extract the 14 prosodic features for every utterance of a manifest.
    Extract(ExtractArgs),
    /// Per-dialect means, ANOVA table and %V/ΔC scatter data.
    Analyze(AnalyzeArgs),
    /// Train a hierarchical (or flat) classifier bundle.
    Train(TrainArgs),
    /// Speaker-independent k-fold evaluation.
    Evaluate(EvaluateArgs),
    /// Identify the dialect of one recording.
    Classify(ClassifyArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Profile file; the bundled five-dialect profiles when omitted.
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Speakers per dialect.
    #[arg(long, default_value_t = 8)]
    speakers: usize,
    /// Utterances per speaker.
    #[arg(long, default_value_t = 10)]
    utts: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Write each utterance's C/V segmentation to `segments/` next to the output.
    #[arg(long)]
    dump_segments: bool,
    /// Write each utterance's pitch track to `pitch/` next to the output.
    #[arg(long)]
    dump_pitch: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Hierarchical,
    Flat,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EvalMode {
    Hierarchical,
    Flat,
    Both,
}

#[derive(Args)]
struct TreeArgs {
    /// Hierarchy file; the bundled Algerian taxonomy when omitted.
    #[arg(long)]
    hierarchy: Option<PathBuf>,
    /// Keep tree levels up to this depth (the root is level 0).
    #[arg(long)]
    depth: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    features: PathBuf,
    #[command(flatten)]
    tree: TreeArgs,
    /// Restrict training to the utterances listed in this manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Hierarchical)]
    mode: TrainMode,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Corpus manifest; features are extracted first.
    #[arg(long, required_unless_present = "features", conflicts_with = "features")]
    manifest: Option<PathBuf>,
    /// Precomputed feature table.
    #[arg(long)]
    features: Option<PathBuf>,
    #[command(flatten)]
    tree: TreeArgs,
    #[arg(long)]
    kfold: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = EvalMode::Hierarchical)]
    mode: EvalMode,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    wav: PathBuf,
}

/// Marks errors that get exit code 3.
#[derive(Debug)]
struct Unusable(UnusableUtterance);

impl std::fmt::Display for Unusable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for Unusable {}

fn version_line() -> &'static str {
    Box::leak(format!("{} (model format {MODEL_FORMAT_VERSION})", env!("CARGO_PKG_VERSION")).into_boxed_str())
}

fn main() -> ExitCode {
    let matches = Cli::command().version(version_line()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();

    let jobs = cli.jobs;
    match dialectid::par::with_jobs(jobs, || run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Unusable>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    match cli.command {
        Command::Synth(a) => synth(a, &config),
        Command::Extract(a) => extract(a, &config),
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a, &config),
        Command::Evaluate(a) => evaluate(a, &config),
        Command::Classify(a) => classify(a, &config),
    }
}

fn require_seed(flag: Option<u64>, config: &PipelineConfig) -> Result<u64> {
    flag.or(config.seed)
        .context("a seed is required: pass --seed N or set `seed` in the config file")
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("IoError({})", parent.display()))?;
    }
    let file = fs::File::create(path).with_context(|| format!("IoError({})", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut out = create_file(path)?;
    f(&mut out).with_context(|| format!("IoError({})", path.display()))?;
    std::io::Write::flush(&mut out).with_context(|| format!("IoError({})", path.display()))
}

fn synth(a: SynthArgs, config: &PipelineConfig) -> Result<()> {
    let seed = require_seed(a.seed, config)?;
    let profiles = match &a.profiles {
        Some(p) => corpus::load_profiles(p)?,
        None => corpus::default_profiles(),
    };
    let req = SynthRequest {
        speakers_per_dialect: a.speakers,
        utterances_per_speaker: a.utts,
        seed,
    };
    let manifest = corpus::synth_corpus(&profiles, &req, &a.out)?;
    println!(
        "wrote {} utterances ({} dialects) to {}",
        manifest.len(),
        profiles.len(),
        a.out.display()
    );
    Ok(())
}

fn extract_rows(manifest: &Manifest, config: &PipelineConfig, dumps: Option<(&Path, bool, bool)>) -> Result<Vec<FeatureRow>> {
    let extractions = corpus::extract_manifest(manifest, &config.extract_config());
    if let Some((dir, segments, pitch)) = dumps {
        for (row, ex) in manifest.rows.iter().zip(&extractions) {
            let Ok(ex) = ex else { continue };
            if segments {
                let path = dir.join("segments").join(format!("{}.csv", row.utterance_id));
                write_with(&path, |out| ex.segments.write_csv(out))?;
            }
            if pitch {
                let path = dir.join("pitch").join(format!("{}.csv", row.utterance_id));
                write_with(&path, |out| ex.pitch.write_csv(out))?;
            }
        }
    }
    let (rows, skipped) = corpus::feature_rows(manifest, &extractions);
    for (id, reason) in &skipped {
        log::warn!("skipping `{id}`: {reason}");
    }
    log::info!("{} of {} utterances usable", rows.len(), manifest.len());
    Ok(rows)
}

fn extract(a: ExtractArgs, config: &PipelineConfig) -> Result<()> {
    let manifest = load_manifest(&a.manifest, None)?;
    let dump_dir = a.out.parent().unwrap_or(Path::new("")).to_path_buf();
    let dumps = (a.dump_segments || a.dump_pitch).then_some((dump_dir.as_path(), a.dump_segments, a.dump_pitch));
    let rows = extract_rows(&manifest, config, dumps)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("IoError({})", parent.display()))?;
    }
    save_table(&rows, &a.out)?;
    println!("wrote {} feature rows to {}", rows.len(), a.out.display());
    Ok(())
}

fn dialects_in_order(rows: &[FeatureRow]) -> Vec<String> {
    let mut seen: Vec<String> = Vec::new();
    for r in rows {
        if !seen.contains(&r.dialect) {
            seen.push(r.dialect.clone());
        }
    }
    seen
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let rows = load_table(&a.features)?;
    let dialects = dialects_in_order(&rows);
    if dialects.len() < 2 {
        bail!("analysis needs at least two dialects, found {}", dialects.len());
    }
    let vectors: Vec<FeatureVector> = rows.iter().map(|r| r.features).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r.dialect.as_str()).collect();
    let means = dialect_means(&vectors, &labels, &dialects)?;
    let anova = anova_table(&vectors, &labels, &dialects)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("IoError({})", a.out_dir.display()))?;
    write_with(&a.out_dir.join("means.csv"), |out| means.write_csv(out))?;
    write_with(&a.out_dir.join("anova.csv"), |out| write_anova_csv(&anova, out))?;
    write_with(&a.out_dir.join("scatter.csv"), |out| means.write_scatter_csv(out))?;
    for f in [Feature::PctV, Feature::DeltaC] {
        println!("highest {}: {}", f.name(), means.argmax(f).unwrap_or("-"));
    }
    println!("wrote means.csv, anova.csv and scatter.csv to {}", a.out_dir.display());
    Ok(())
}

fn load_tree(args: &TreeArgs, config: &PipelineConfig) -> Result<DialectTree> {
    let tree = match &args.hierarchy {
        Some(path) => load_hierarchy(path, None)?,
        None => DialectTree::default_tree(),
    };
    let mut config = config.clone();
    if args.depth.is_some() {
        config.model.depth_limit = args.depth;
    }
    Ok(config.shape_tree(tree)?)
}

fn train(a: TrainArgs, config: &PipelineConfig) -> Result<()> {
    let seed = require_seed(a.seed, config)?;
    let tree = load_tree(&a.tree, config)?;
    let mut rows = load_table(&a.features)?;
    if let Some(path) = &a.manifest {
        let manifest = load_manifest(path, None)?;
        let labels: HashMap<&str, &str> = manifest
            .rows
            .iter()
            .map(|r| (r.utterance_id.as_str(), r.dialect.as_str()))
            .collect();
        rows.retain(|r| labels.contains_key(r.utterance_id.as_str()));
        if let Some(r) = rows.iter().find(|r| labels[r.utterance_id.as_str()] != r.dialect) {
            bail!("`{}` is labelled `{}` in the features but `{}` in the manifest", r.utterance_id, r.dialect, labels[r.utterance_id.as_str()]);
        }
    }
    let mode = match a.mode {
        TrainMode::Hierarchical => Mode::Hierarchical,
        TrainMode::Flat => Mode::Flat,
    };
    let model = train_mode(&tree, &rows, mode, &config.experiment_config(seed), seed)?;
    model.save(&a.out)?;
    for id in model.tree.internal_nodes() {
        let label = model.tree.label(id);
        if let Some(c) = model.classifier(label) {
            let names: Vec<&str> = c.features.iter().map(|f| f.name()).collect();
            println!(
                "{label}: {} (training accuracy {:.3})",
                names.join(", "),
                c.training_accuracy
            );
        }
    }
    println!("saved {} classifier(s) to {}", model.classifier_count(), a.out.display());
    Ok(())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let name = report.mode.name();
    write_with(&dir.join(format!("{name}_folds.csv")), |out| report.write_folds_csv(out))?;
    write_with(&dir.join(format!("{name}_per_dialect.csv")), |out| report.write_per_dialect_csv(out))?;
    write_with(&dir.join(format!("{name}_confusion.csv")), |out| report.write_confusion_csv(out))?;
    write_with(&dir.join(format!("{name}_speakers.csv")), |out| report.write_speakers_csv(out))?;
    let text = report.render_text();
    fs::write(dir.join(format!("{name}_report.txt")), &text).with_context(|| format!("IoError({})", dir.display()))?;
    print!("{text}");
    Ok(())
}

fn evaluate(a: EvaluateArgs, config: &PipelineConfig) -> Result<()> {
    let seed = require_seed(a.seed, config)?;
    let tree = load_tree(&a.tree, config)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("IoError({})", a.out_dir.display()))?;
    let rows = match (&a.manifest, &a.features) {
        (Some(m), _) => {
            let manifest = load_manifest(m, None)?;
            let rows = extract_rows(&manifest, config, None)?;
            save_table(&rows, a.out_dir.join("features.csv"))?;
            rows
        }
        (None, Some(f)) => load_table(f)?,
        (None, None) => bail!("pass --manifest or --features"),
    };
    let mut cfg = config.experiment_config(seed);
    if let Some(k) = a.kfold {
        cfg.k_folds = k;
    }
    let modes: &[Mode] = match a.mode {
        EvalMode::Hierarchical => &[Mode::Hierarchical],
        EvalMode::Flat => &[Mode::Flat],
        EvalMode::Both => &[Mode::Hierarchical, Mode::Flat],
    };
    let mut reports = Vec::new();
    for &mode in modes {
        let report = run_experiment(&rows, &tree, mode, &cfg)?;
        write_report(&a.out_dir, &report)?;
        reports.push(report);
    }
    if let [hier, flat] = reports.as_slice() {
        write_with(&a.out_dir.join("comparison.csv"), |out| evaluation::write_comparison_csv(flat, hier, out))?;
    }
    Ok(())
}

fn classify(a: ClassifyArgs, config: &PipelineConfig) -> Result<()> {
    let model = HadidModel::load(&a.model).context("cannot load model")?;
    let buffer = load_wav(&a.wav)?;
    let extraction = analyze_utterance(&buffer, &config.extract_config()).map_err(Unusable)?;
    let result = model.classify(&extraction.features)?;
    println!("dialect: {}", result.leaf);
    println!("path: {}", result.path.join(" > "));
    for d in &result.decisions {
        let probs: Vec<String> = d.probabilities.iter().map(|(l, p)| format!("{l} {p:.3}")).collect();
        println!("  {}: {} -> {}", d.node, probs.join(", "), d.chosen);
    }
    Ok(())
}

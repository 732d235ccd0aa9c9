//! Hierarchical precision, micro-precision, speaker-independent folds and
//! cross-validated experiments.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{node_seed, train_lcpn, DialectTree, HadidModel, HierarchyError, LcpnConfig};
use crate::par;
use crate::table::FeatureRow;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("LengthMismatch: {0} predictions for {1} references")]
    LengthMismatch(usize, usize),
    #[error("PathNotInTree: {0}")]
    PathNotInTree(String),
    #[error("no examples to score")]
    Empty,
    #[error("InvalidK: need at least 2 folds, got {0}")]
    InvalidK(usize),
    #[error("TooFewSpeakers: dialect `{dialect}` has {count} speaker(s), need at least 2")]
    TooFewSpeakers { dialect: String, count: usize },
    #[error("speaker `{speaker}` appears under dialects `{first}` and `{second}`")]
    SpeakerInManyDialects { speaker: String, first: String, second: String },
    #[error("fold {fold}: no test speakers")]
    EmptyFold { fold: usize },
    #[error("fold {fold}: SingleClassData (training data holds one dialect)")]
    SingleClassData { fold: usize },
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: HierarchyError },
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

fn same_length(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    Ok(())
}

/// Labels below the root on a root-to-leaf path, after checking the path.
fn augmented_set<'a>(path: &'a [String], tree: &DialectTree) -> Result<HashSet<&'a str>> {
    let bad = || EvalError::PathNotInTree(path.join(" > "));
    let first = path.first().ok_or_else(bad)?;
    if first != tree.label(tree.root()) {
        return Err(bad());
    }
    let mut node = tree.root();
    for label in &path[1..] {
        node = *tree
            .children(node)
            .iter()
            .find(|&&c| tree.label(c) == label)
            .ok_or_else(bad)?;
    }
    if !tree.is_leaf(node) {
        return Err(bad());
    }
    Ok(path[1..].iter().map(String::as_str).collect())
}

/// hP = Σ|Ĉᵢ ∩ T̂ᵢ| / Σ|Ĉᵢ| with ancestor sets that exclude the root.
pub fn hierarchical_precision(predicted: &[Vec<String>], truth: &[Vec<String>], tree: &DialectTree) -> Result<f64> {
    same_length(predicted.len(), truth.len())?;
    let mut shared = 0usize;
    let mut total = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        let c = augmented_set(p, tree)?;
        let t = augmented_set(t, tree)?;
        shared += c.intersection(&t).count();
        total += c.len();
    }
    if total == 0 {
        return Err(EvalError::Empty);
    }
    Ok(shared as f64 / total as f64)
}

/// Fraction of exact matches.
pub fn micro_precision<S: AsRef<str>>(predicted: &[S], truth: &[S]) -> Result<f64> {
    same_length(predicted.len(), truth.len())?;
    if predicted.is_empty() {
        return Err(EvalError::Empty);
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p.as_ref() == t.as_ref()).count();
    Ok(correct as f64 / predicted.len() as f64)
}

/// Correct-as-c over predicted-as-c for each class; `None` when never predicted.
pub fn per_class_precision<S: AsRef<str>>(
    predicted: &[S],
    truth: &[S],
    classes: &[impl AsRef<str>],
) -> Result<Vec<(String, Option<f64>)>> {
    same_length(predicted.len(), truth.len())?;
    Ok(classes
        .iter()
        .map(|c| {
            let c = c.as_ref();
            let predicted_as: Vec<usize> = (0..predicted.len()).filter(|&i| predicted[i].as_ref() == c).collect();
            let precision = (!predicted_as.is_empty()).then(|| {
                predicted_as.iter().filter(|&&i| truth[i].as_ref() == c).count() as f64 / predicted_as.len() as f64
            });
            (c.to_string(), precision)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerFold {
    pub index: usize,
    pub train_speakers: BTreeSet<String>,
    pub test_speakers: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldPlan {
    pub folds: Vec<SpeakerFold>,
    /// Dialects missing from some test folds.
    pub warnings: Vec<String>,
}

/// Partitions speakers into `k` folds. Within each dialect speakers are
/// shuffled and dealt round-robin; the starting fold rotates from one dialect
/// to the next so small dialects do not all pile into the first folds.
pub fn speaker_independent_folds<S: AsRef<str>>(speaker_dialect: &[(S, S)], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(EvalError::InvalidK(k));
    }
    let mut dialect_of: BTreeMap<&str, &str> = BTreeMap::new();
    let mut by_dialect: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (s, d) in speaker_dialect {
        let (s, d) = (s.as_ref(), d.as_ref());
        if let Some(&prev) = dialect_of.get(s) {
            if prev != d {
                return Err(EvalError::SpeakerInManyDialects {
                    speaker: s.to_string(),
                    first: prev.to_string(),
                    second: d.to_string(),
                });
            }
        }
        dialect_of.insert(s, d);
        by_dialect.entry(d).or_default().insert(s);
    }
    if let Some((d, speakers)) = by_dialect.iter().find(|(_, s)| s.len() < 2) {
        return Err(EvalError::TooFewSpeakers {
            dialect: d.to_string(),
            count: speakers.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    let mut warnings = Vec::new();
    let mut offset = 0;
    for (dialect, speakers) in &by_dialect {
        let mut order: Vec<&str> = speakers.iter().copied().collect();
        order.shuffle(&mut rng);
        for (j, s) in order.iter().enumerate() {
            test[(offset + j) % k].insert(s.to_string());
        }
        if order.len() < k {
            let missing: Vec<String> = (0..k)
                .filter(|f| (0..order.len()).all(|j| (offset + j) % k != *f))
                .map(|f| f.to_string())
                .collect();
            warnings.push(format!(
                "dialect `{dialect}` has {} speakers for {k} folds; folds [{}] test without it",
                order.len(),
                missing.join(", ")
            ));
        }
        offset += order.len();
    }
    let all: BTreeSet<String> = dialect_of.keys().map(|s| s.to_string()).collect();
    let folds = test
        .into_iter()
        .enumerate()
        .map(|(index, test_speakers)| SpeakerFold {
            index,
            train_speakers: all.difference(&test_speakers).cloned().collect(),
            test_speakers,
        })
        .collect();
    Ok(FoldPlan { folds, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Hierarchical,
    Flat,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Hierarchical => "hierarchical",
            Mode::Flat => "flat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub k_folds: usize,
    pub seed: u64,
    /// Feature count of the single flat classifier.
    pub flat_k: usize,
    pub lcpn: LcpnConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            k_folds: 5,
            seed: 0,
            flat_k: 7,
            lcpn: LcpnConfig::default(),
        }
    }
}

/// Trains the model a mode calls for: the LCPN over `tree`, or one
/// classifier over all of its leaves.
pub fn train_mode(tree: &DialectTree, rows: &[FeatureRow], mode: Mode, cfg: &ExperimentConfig, seed: u64) -> std::result::Result<HadidModel, HierarchyError> {
    match mode {
        Mode::Hierarchical => train_lcpn(tree, rows, &cfg.lcpn, seed),
        Mode::Flat => train_lcpn(&tree.flattened(cfg.flat_k), rows, &cfg.lcpn, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub index: usize,
    pub level1_precision: f64,
    pub whole_system_hp: f64,
    pub train_speakers: usize,
    pub test_speakers: usize,
    pub test_utterances: usize,
    /// (true leaf, predicted leaf) per test utterance.
    pub predictions: Vec<(String, String)>,
    /// (node, selected features) for every trained node.
    pub selections: Vec<(String, Vec<String>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: Mode,
    pub seed: u64,
    pub k_folds: usize,
    pub folds: Vec<FoldResult>,
    pub mean_level1_precision: f64,
    pub mean_whole_system_hp: f64,
    /// Mean over folds of each leaf's precision; `None` if never predicted.
    pub per_dialect: Vec<(String, Option<f64>)>,
    pub leaves: Vec<String>,
    /// `confusion[t][p]` counts test utterances of leaf `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
    pub feature_ks: Vec<(String, usize)>,
    pub warnings: Vec<String>,
    /// The speaker partition the folds were run on.
    pub speaker_folds: Vec<SpeakerFold>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    node_seed(seed, &format!("fold-{fold}"))
}

/// k-fold speaker-independent evaluation of one mode.
pub fn run_experiment(rows: &[FeatureRow], tree: &DialectTree, mode: Mode, cfg: &ExperimentConfig) -> Result<EvalReport> {
    for r in rows {
        if tree.find_leaf(&r.dialect).is_none() {
            return Err(HierarchyError::UnknownLabel(r.dialect.clone()).into());
        }
    }
    let pairs: Vec<(&str, &str)> = rows.iter().map(|r| (r.speaker_id.as_str(), r.dialect.as_str())).collect();
    let plan = speaker_independent_folds(&pairs, cfg.k_folds, cfg.seed)?;
    for w in &plan.warnings {
        log::warn!("{w}");
    }

    let results = par::map(&plan.folds, |fold| run_fold(rows, tree, mode, cfg, fold));
    let folds = results.into_iter().collect::<Result<Vec<_>>>()?;

    let leaves = tree.leaf_labels();
    let mut confusion = vec![vec![0usize; leaves.len()]; leaves.len()];
    let mut sums: Vec<(f64, usize)> = vec![(0.0, 0); leaves.len()];
    for f in &folds {
        let (truth, pred): (Vec<&str>, Vec<&str>) = f.predictions.iter().map(|(t, p)| (t.as_str(), p.as_str())).unzip();
        for (t, p) in truth.iter().zip(&pred) {
            let ti = leaves.iter().position(|l| l == t).expect("known leaf");
            let pi = leaves.iter().position(|l| l == p).expect("known leaf");
            confusion[ti][pi] += 1;
        }
        for (i, (_, prec)) in per_class_precision(&pred, &truth, &leaves)?.into_iter().enumerate() {
            if let Some(v) = prec {
                sums[i].0 += v;
                sums[i].1 += 1;
            }
        }
    }
    let n = folds.len() as f64;
    let feature_tree = match mode {
        Mode::Hierarchical => tree.clone(),
        Mode::Flat => tree.flattened(cfg.flat_k),
    };
    Ok(EvalReport {
        mode,
        seed: cfg.seed,
        k_folds: cfg.k_folds,
        mean_level1_precision: folds.iter().map(|f| f.level1_precision).sum::<f64>() / n,
        mean_whole_system_hp: folds.iter().map(|f| f.whole_system_hp).sum::<f64>() / n,
        per_dialect: leaves
            .iter()
            .zip(&sums)
            .map(|(l, &(s, c))| (l.clone(), (c > 0).then(|| s / c as f64)))
            .collect(),
        leaves,
        confusion,
        feature_ks: feature_tree
            .internal_nodes()
            .into_iter()
            .map(|id| (feature_tree.label(id).to_string(), feature_tree.k(id)))
            .collect(),
        warnings: plan.warnings,
        speaker_folds: plan.folds,
        folds,
    })
}

fn run_fold(rows: &[FeatureRow], tree: &DialectTree, mode: Mode, cfg: &ExperimentConfig, fold: &SpeakerFold) -> Result<FoldResult> {
    let index = fold.index;
    if fold.test_speakers.is_empty() {
        return Err(EvalError::EmptyFold { fold: index });
    }
    // fold construction guarantees this; checked anyway because leakage would be silent
    assert!(fold.train_speakers.is_disjoint(&fold.test_speakers));
    let train: Vec<FeatureRow> = rows
        .iter()
        .filter(|r| fold.train_speakers.contains(&r.speaker_id))
        .cloned()
        .collect();
    let test: Vec<&FeatureRow> = rows.iter().filter(|r| fold.test_speakers.contains(&r.speaker_id)).collect();
    let dialects: BTreeSet<&str> = train.iter().map(|r| r.dialect.as_str()).collect();
    if dialects.len() < 2 {
        return Err(EvalError::SingleClassData { fold: index });
    }
    log::info!(
        "fold {index}: {} train / {} test speakers, disjoint",
        fold.train_speakers.len(),
        fold.test_speakers.len()
    );

    let model = train_mode(tree, &train, mode, cfg, fold_seed(cfg.seed, index)).map_err(|source| EvalError::Fold { fold: index, source })?;
    let scoring_tree = &model.tree;
    let mut predicted_paths = Vec::new();
    let mut true_paths = Vec::new();
    let mut level1_hits = 0usize;
    let mut predictions = Vec::new();
    for r in &test {
        let out = model
            .classify(&r.features)
            .map_err(|source| EvalError::Fold { fold: index, source })?;
        let true_leaf = tree.find_leaf(&r.dialect).expect("checked");
        let pred_leaf = tree.find_leaf(&out.leaf).expect("model leaves come from the tree");
        if tree.top_branch(true_leaf) == tree.top_branch(pred_leaf) {
            level1_hits += 1;
        }
        predicted_paths.push(out.path.clone());
        true_paths.push(scoring_tree.path_labels(scoring_tree.find_leaf(&r.dialect).expect("checked")));
        predictions.push((r.dialect.clone(), out.leaf));
    }
    let whole_system_hp = hierarchical_precision(&predicted_paths, &true_paths, scoring_tree)?;
    let selections = model
        .rules
        .keys()
        .filter_map(|&node| {
            let label = model.tree.label(node);
            model
                .classifier(label)
                .map(|c| (label.to_string(), c.features.iter().map(|f| f.name().to_string()).collect()))
        })
        .collect();
    Ok(FoldResult {
        index,
        level1_precision: level1_hits as f64 / test.len() as f64,
        whole_system_hp,
        train_speakers: fold.train_speakers.len(),
        test_speakers: fold.test_speakers.len(),
        test_utterances: test.len(),
        predictions,
        selections,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

impl EvalReport {
    pub fn write_folds_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "fold,level1_precision,whole_system_hp,train_speakers,test_speakers,test_utterances")?;
        for f in &self.folds {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                f.index + 1,
                f.level1_precision,
                f.whole_system_hp,
                f.train_speakers,
                f.test_speakers,
                f.test_utterances
            )?;
        }
        writeln!(out, "average,{},{},,,", self.mean_level1_precision, self.mean_whole_system_hp)
    }

    /// One `fold,speaker_id,role` row per speaker and fold, role `train` or `test`.
    pub fn write_speakers_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "fold,speaker_id,role")?;
        for f in &self.speaker_folds {
            for (role, speakers) in [("train", &f.train_speakers), ("test", &f.test_speakers)] {
                for s in speakers {
                    writeln!(out, "{},{s},{role}", f.index + 1)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_per_dialect_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "dialect,precision")?;
        for (d, p) in &self.per_dialect {
            writeln!(out, "{d},{}", fmt_opt(*p))?;
        }
        Ok(())
    }

    pub fn write_confusion_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "true\\predicted")?;
        for l in &self.leaves {
            write!(out, ",{l}")?;
        }
        writeln!(out)?;
        for (l, row) in self.leaves.iter().zip(&self.confusion) {
            write!(out, "{l}")?;
            for c in row {
                write!(out, ",{c}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode: {}", self.mode.name());
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "folds: {}", self.k_folds);
        for (node, k) in &self.feature_ks {
            let _ = writeln!(s, "features at `{node}`: k = {k}");
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<8} {:>12} {:>14}", "fold", "level-1 (%)", "whole sys (%)");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<8} {:>12.1} {:>14.1}",
                f.index + 1,
                100.0 * f.level1_precision,
                100.0 * f.whole_system_hp
            );
        }
        let _ = writeln!(
            s,
            "{:<8} {:>12.1} {:>14.1}",
            "average",
            100.0 * self.mean_level1_precision,
            100.0 * self.mean_whole_system_hp
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "per-dialect precision:");
        for (d, p) in &self.per_dialect {
            let shown = p.map_or_else(|| "N/A".to_string(), |v| format!("{:.1}%", 100.0 * v));
            let _ = writeln!(s, "  {d:<28} {shown}");
        }
        for f in &self.folds {
            for (node, feats) in &f.selections {
                let _ = writeln!(s, "fold {} `{node}` selected: {}", f.index + 1, feats.join(", "));
            }
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}

/// Flat vs hierarchical summary rows.
pub fn write_comparison_csv<W: Write>(flat: &EvalReport, hierarchical: &EvalReport, mut out: W) -> std::io::Result<()> {
    writeln!(out, "system,level1_precision,whole_system_hp")?;
    writeln!(out, "flat,{},{}", flat.mean_level1_precision, flat.mean_whole_system_hp)?;
    writeln!(
        out,
        "hierarchical,{},{}",
        hierarchical.mean_level1_precision, hierarchical.mean_whole_system_hp
    )
}

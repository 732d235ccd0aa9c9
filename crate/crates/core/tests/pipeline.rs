//! End-to-end checks of the library modules on small hand-built inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use dialectid::audio::{load_wav, write_wav, AudioBuffer};
use dialectid::corpus::{load_manifest, CorpusError};
use dialectid::evaluation::{run_experiment, speaker_independent_folds, write_comparison_csv, EvalError, ExperimentConfig, Mode};
use dialectid::hierarchy::{train_lcpn, DialectTree, HadidModel, LcpnConfig, NodeClassifier, NodeRule};
use dialectid::neuralnet::{init_mlp, train, Mlp, TrainConfig};
use dialectid::pitch::{estimate_pitch, PitchConfig};
use dialectid::prosody::{Feature, FeatureVector, FEATURE_COUNT};
use dialectid::stats::rank_features;
use dialectid::table::FeatureRow;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn write_i16_wav(path: &Path, channels: u16, frames: &[Vec<i16>]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for frame in frames {
        for &s in frame {
            w.write_sample(s).unwrap();
        }
    }
    w.finalize().unwrap();
}

#[test]
fn one_second_of_zeros_loads_as_16000_zeros() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("zeros.wav");
    write_i16_wav(&path, 1, &vec![vec![0]; 16_000]);
    let buf = load_wav(&path).unwrap();
    assert_eq!(buf.len(), 16_000);
    assert_eq!(buf.sample_rate_hz(), 16_000);
    assert!(buf.samples().iter().all(|&s| s == 0.0));
}

#[test]
fn opposite_stereo_channels_downmix_to_silence() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stereo.wav");
    write_i16_wav(&path, 2, &vec![vec![16_384, -16_384]; 1_600]);
    let buf = load_wav(&path).unwrap();
    assert_eq!(buf.len(), 1_600);
    assert!(buf.samples().iter().all(|&s| s.abs() < 1e-12));
}

#[test]
fn written_wavs_read_back_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ramp.wav");
    let samples: Vec<f64> = (0..800).map(|i| i as f64 / 800.0 - 0.5).collect();
    write_wav(&path, &AudioBuffer::new(samples.clone(), 16_000, "ramp").unwrap()).unwrap();
    let back = load_wav(&path).unwrap();
    for (a, b) in samples.iter().zip(back.samples()) {
        assert!((a - b).abs() <= 1.0 / 32_768.0);
    }
}

#[test]
fn pure_tones_are_tracked_within_two_percent() {
    for freq in [100.0, 150.0, 220.0, 300.0, 400.0] {
        let samples = (0..16_000)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin())
            .collect();
        let buf = AudioBuffer::new(samples, 16_000, "tone").unwrap();
        let track = estimate_pitch(&buf, &PitchConfig::default()).unwrap();
        let interior: Vec<f64> = track.voiced().filter(|(t, _)| (0.1..0.9).contains(t)).map(|(_, hz)| hz).collect();
        assert!(interior.len() >= 75, "{freq} Hz: {} voiced frames", interior.len());
        for hz in interior {
            assert!((hz / freq - 1.0).abs() <= 0.02, "{freq} Hz tracked as {hz}");
        }
    }
}

fn blobs(n_per_class: usize, separation: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for class in 0..2 {
        let centre = if class == 0 { -separation } else { separation };
        for _ in 0..n_per_class {
            xs.push((0..4).map(|_| centre + noise.sample(&mut rng)).collect());
            ys.push(class);
        }
    }
    (xs, ys)
}

#[test]
fn separable_blobs_are_learned() {
    let (xs, ys) = blobs(100, 5.0, 1);
    let cfg = TrainConfig { max_epochs: 50, ..Default::default() };
    let (model, history) = train(init_mlp(&[4, 16, 2], 0.0, 1).unwrap(), &xs, &ys, &cfg).unwrap();
    assert!(history.epochs_run() <= 50);
    assert!(model.accuracy(&xs, &ys).unwrap() >= 0.99);
}

#[test]
fn random_labels_give_chance_validation_accuracy() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let xs: Vec<Vec<f64>> = (0..400).map(|_| (0..4).map(|_| rng.random::<f64>()).collect()).collect();
        let ys: Vec<usize> = (0..400).map(|_| rng.random_range(0..2)).collect();
        let cfg = TrainConfig { max_epochs: 30, ..Default::default() };
        let (model, _) = train(init_mlp(&[4, 16, 2], 0.0, seed).unwrap(), &xs[..300], &ys[..300], &cfg).unwrap();
        let acc = model.accuracy(&xs[300..], &ys[300..]).unwrap();
        assert!((0.35..=0.65).contains(&acc), "seed {seed}: {acc}");
    }
}

/// Rows whose first feature encodes the dialect, for `n_speakers` per dialect.
fn planted_rows(dialects: &[&str], n_speakers: usize, utts: usize, seed: u64) -> Vec<FeatureRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut rows = Vec::new();
    for (d, dialect) in dialects.iter().enumerate() {
        for s in 0..n_speakers {
            for u in 0..utts {
                let mut v = [0.0; FEATURE_COUNT];
                for (j, slot) in v.iter_mut().enumerate() {
                    *slot = 10.0 + j as f64 + noise.sample(&mut rng);
                }
                v[0] += 4.0 * d as f64;
                v[1] -= 3.0 * d as f64;
                rows.push(FeatureRow {
                    utterance_id: format!("{dialect}_{s}_{u}"),
                    speaker_id: format!("{dialect}_s{s}"),
                    dialect: dialect.to_string(),
                    features: FeatureVector::from_array(v),
                });
            }
        }
    }
    rows
}

fn small_lcpn() -> LcpnConfig {
    LcpnConfig {
        hidden_layers: vec![16],
        dropout: 0.0,
        train: TrainConfig { learning_rate: 0.05, ..Default::default() },
    }
}

#[test]
fn bedouin_only_data_passes_through_the_root() {
    let tree = DialectTree::default_tree().limit_depth(2).unwrap();
    let rows = planted_rows(&["Hilali", "Sulaymite", "Maqilian", "UCB"], 3, 6, 2);
    let model = train_lcpn(&tree, &rows, &small_lcpn(), 2).unwrap();
    assert_eq!(model.classifier_count(), 1);
    let bedouin = tree.find("Bedouin").unwrap();
    assert_eq!(model.rules[&tree.root()], NodeRule::PassThrough(tree.children(tree.root()).iter().position(|&c| c == bedouin).unwrap()));
    assert_eq!(model.classifier("Bedouin").unwrap().mlp.output_size(), 4);

    let out = model.classify(&rows[0].features).unwrap();
    assert_eq!(out.path[..2], ["Algerian Arabic".to_string(), "Bedouin".to_string()]);
    assert_eq!(out.decisions.len(), 1);
    assert_eq!(out.decisions[0].node, "Bedouin");
}

#[test]
fn equal_probabilities_go_to_the_first_child() {
    let tree = DialectTree::default_tree().limit_depth(2).unwrap();
    let uniform = |n_out: usize| {
        let mlp = Mlp::from_parameters(&[2, n_out], vec![vec![0.0; 2 * n_out]], vec![vec![0.0; n_out]], 0.0).unwrap();
        NodeRule::Classifier(Box::new(NodeClassifier {
            features: vec![Feature::PctV, Feature::DeltaC],
            f_stats: vec![1.0, 1.0],
            mlp,
            training_accuracy: 0.5,
            epochs_run: 0,
            examples: 0,
        }))
    };
    let mut rules = BTreeMap::new();
    rules.insert(tree.root(), uniform(2));
    rules.insert(tree.find("Bedouin").unwrap(), uniform(4));
    let model = HadidModel { tree, rules, seed: 0, fold: None };
    let out = model.classify(&FeatureVector::from_array([1.0; FEATURE_COUNT])).unwrap();
    assert_eq!(out.leaf, "Pre-Hilali");
    assert_eq!(out.decisions[0].chosen, "Pre-Hilali");
}

#[test]
fn two_folds_from_two_speakers_per_dialect() {
    let pairs = [("a1", "A"), ("a2", "A"), ("b1", "B"), ("b2", "B")];
    let plan = speaker_independent_folds(&pairs, 2, 9).unwrap();
    assert_eq!(plan.folds.len(), 2);
    assert!(plan.warnings.is_empty());
    for f in &plan.folds {
        assert_eq!(f.test_speakers.len(), 2);
        assert!(f.train_speakers.is_disjoint(&f.test_speakers));
        let dialects: Vec<char> = f.test_speakers.iter().map(|s| s.chars().next().unwrap()).collect();
        assert_eq!(dialects, ['a', 'b']);
    }
}

fn small_experiment(seed: u64) -> ExperimentConfig {
    ExperimentConfig { k_folds: 5, seed, flat_k: 7, lcpn: small_lcpn() }
}

#[test]
fn experiment_reports_every_fold_and_the_mean() {
    let tree = DialectTree::default_tree().limit_depth(2).unwrap();
    let rows = planted_rows(&["Pre-Hilali", "Hilali", "Sulaymite", "Maqilian", "UCB"], 5, 4, 3);
    let cfg = small_experiment(3);
    let hier = run_experiment(&rows, &tree, Mode::Hierarchical, &cfg).unwrap();
    assert_eq!(hier.folds.len(), 5);
    let mut csv = Vec::new();
    hier.write_folds_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 5 + 1, "{text}");
    assert!(text.lines().last().unwrap().starts_with("average,"), "{text}");
    let mean = hier.folds.iter().map(|f| f.whole_system_hp).sum::<f64>() / 5.0;
    assert!((hier.mean_whole_system_hp - mean).abs() < 1e-12);
    assert!(hier.mean_whole_system_hp > 0.9, "{}", hier.mean_whole_system_hp);

    let flat = run_experiment(&rows, &tree, Mode::Flat, &cfg).unwrap();
    assert!(flat.folds.iter().all(|f| f.selections.len() == 1));
    let mut cmp = Vec::new();
    write_comparison_csv(&flat, &hier, &mut cmp).unwrap();
    let cmp = String::from_utf8(cmp).unwrap();
    assert!(cmp.lines().count() >= 2, "{cmp}");
}

#[test]
fn a_single_dialect_cannot_be_evaluated() {
    let tree = DialectTree::default_tree().limit_depth(2).unwrap();
    let rows = planted_rows(&["Hilali"], 4, 3, 4);
    let cfg = ExperimentConfig { k_folds: 2, ..small_experiment(4) };
    match run_experiment(&rows, &tree, Mode::Hierarchical, &cfg) {
        Err(EvalError::SingleClassData { fold }) => assert!(fold < 2),
        other => panic!("expected SingleClassData, got {other:?}"),
    }
}

#[test]
fn ranking_all_features_is_a_permutation() {
    let rows = planted_rows(&["A", "B", "C"], 2, 5, 5);
    let xs: Vec<FeatureVector> = rows.iter().map(|r| r.features).collect();
    let labels: Vec<&str> = rows.iter().map(|r| r.dialect.as_str()).collect();
    let ranked = rank_features(&xs, &labels, FEATURE_COUNT).unwrap();
    let mut seen: Vec<usize> = ranked.iter().map(|r| r.feature.index()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..FEATURE_COUNT).collect::<Vec<_>>());
    assert!(ranked.windows(2).all(|w| w[0].f_stat >= w[1].f_stat));
}

#[test]
fn manifests_resolve_paths_and_reject_duplicates() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.csv");
    fs::write(
        &path,
        "utterance_id,wav_path,speaker_id,dialect\n\
         u1,wav/u1.wav,s1,Hilali\nu2,wav/u2.wav,s1,Hilali\nu3,/abs/u3.wav,s2,UCB\n",
    )
    .unwrap();
    let m = load_manifest(&path, None).unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m.rows[0].wav_path, dir.path().join("wav/u1.wav"));
    assert_eq!(m.rows[2].wav_path, Path::new("/abs/u3.wav"));

    fs::write(&path, "utterance_id,wav_path,speaker_id,dialect\nu1,a.wav,s1,Hilali\nu1,b.wav,s2,UCB\n").unwrap();
    assert!(matches!(load_manifest(&path, None), Err(CorpusError::DuplicateUtteranceId(id)) if id == "u1"));

    let labels = vec!["Hilali".to_string()];
    fs::write(&path, "utterance_id,wav_path,speaker_id,dialect\nu1,a.wav,s1,Klingon\n").unwrap();
    assert!(matches!(load_manifest(&path, Some(&labels)), Err(CorpusError::UnknownDialect(_))));
    assert!(matches!(load_manifest(dir.path().join("nope.csv"), None), Err(CorpusError::MissingFile(_))));
}

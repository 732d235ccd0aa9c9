use dialectid::audio::{trim_silence, AudioBuffer, SilenceGate};
use dialectid::evaluation::{hierarchical_precision, speaker_independent_folds};
use dialectid::hierarchy::DialectTree;
use dialectid::neuralnet::{init_mlp, softmax, Mlp};
use dialectid::prosody::{percentile, rhythm_metrics, FeatureVector, FEATURE_COUNT};
use dialectid::segmentation::{Interval, Segment, SegmentKind, SegmentTrack};
use dialectid::stats::anova_oneway;
use dialectid::table::{read_table, write_table, FeatureRow};
use proptest::prelude::*;

/// Alternating C/V track from interval durations in ms, starting with C.
fn cv_track(durations_ms: &[f64]) -> SegmentTrack {
    let mut t = 0.0;
    let segments = durations_ms
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let start = t;
            t += d / 1000.0;
            Segment {
                interval: Interval::new(start, t),
                kind: if i % 2 == 0 { SegmentKind::Consonant } else { SegmentKind::Vowel },
            }
        })
        .collect();
    SegmentTrack { segments, utterance_duration_s: t }
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-9)
}

fn leaf_path(tree: &DialectTree, i: usize) -> Vec<String> {
    let leaves = tree.leaves();
    tree.path_labels(leaves[i % leaves.len()])
}

proptest! {
    #[test]
    fn normalized_rhythm_metrics_ignore_tempo(
        durations in prop::collection::vec(20.0f64..300.0, 4..20),
        scale in 0.5f64..2.0,
    ) {
        let a = rhythm_metrics(&cv_track(&durations)).unwrap();
        let scaled: Vec<f64> = durations.iter().map(|d| d * scale).collect();
        let b = rhythm_metrics(&cv_track(&scaled)).unwrap();
        prop_assert!(close(a.pct_v, b.pct_v, 1e-6));
        prop_assert!(close(a.varco_v, b.varco_v, 1e-6));
        prop_assert!(close(a.varco_c, b.varco_c, 1e-6));
        prop_assert!(close(a.npvi_v, b.npvi_v, 1e-6));
        prop_assert!(close(a.delta_c * scale, b.delta_c, 1e-6));
        prop_assert!(close(a.speech_rate / scale, b.speech_rate, 1e-6));
        prop_assert!((0.0..=100.0).contains(&a.pct_v));
        prop_assert!((0.0..=200.0).contains(&a.npvi_v));
    }

    #[test]
    fn anova_is_invariant_to_affine_rescaling(
        groups in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 2..8), 2..5),
        gain in prop_oneof![0.1f64..10.0, -10.0f64..-0.1],
        shift in -100.0f64..100.0,
    ) {
        let Ok(a) = anova_oneway(&groups) else { return Ok(()) };
        let moved: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|x| gain * x + shift).collect()).collect();
        let b = anova_oneway(&moved).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.p_value));
        prop_assert!(a.f_stat >= 0.0);
        if a.f_stat.is_finite() && a.f_stat < 1e6 {
            prop_assert!(close(a.f_stat, b.f_stat, 1e-6), "{} vs {}", a.f_stat, b.f_stat);
        }
        let mut reordered = groups.clone();
        reordered.reverse();
        let c = anova_oneway(&reordered).unwrap();
        prop_assert!(close(a.f_stat, c.f_stat, 1e-9) || a.f_stat == c.f_stat);
    }

    #[test]
    fn hierarchical_precision_is_bounded_and_exact_on_agreement(
        picks in prop::collection::vec((0usize..10, 0usize..10), 1..40),
    ) {
        let tree = DialectTree::default_tree();
        let pred: Vec<_> = picks.iter().map(|&(p, _)| leaf_path(&tree, p)).collect();
        let truth: Vec<_> = picks.iter().map(|&(_, t)| leaf_path(&tree, t)).collect();
        let hp = hierarchical_precision(&pred, &truth, &tree).unwrap();
        prop_assert!((0.0..=1.0).contains(&hp));
        prop_assert_eq!(hierarchical_precision(&truth, &truth, &tree).unwrap(), 1.0);
    }

    #[test]
    fn folds_partition_the_speakers(
        per_dialect in prop::collection::vec(2usize..9, 2..5),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let pairs: Vec<(String, String)> = per_dialect
            .iter()
            .enumerate()
            .flat_map(|(d, &n)| (0..n).map(move |s| (format!("d{d}s{s}"), format!("d{d}"))))
            .collect();
        let plan = speaker_independent_folds(&pairs, k, seed).unwrap();
        prop_assert_eq!(plan.folds.len(), k);
        let mut seen = std::collections::BTreeSet::new();
        for f in &plan.folds {
            prop_assert!(f.train_speakers.is_disjoint(&f.test_speakers));
            prop_assert_eq!(f.train_speakers.len() + f.test_speakers.len(), pairs.len());
            for s in &f.test_speakers {
                prop_assert!(seen.insert(s.clone()), "{} tested twice", s);
            }
        }
        prop_assert_eq!(seen.len(), pairs.len());
        prop_assert_eq!(&plan, &speaker_independent_folds(&pairs, k, seed).unwrap());
    }

    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        z in prop::collection::vec(-30.0f64..30.0, 2..10),
        shift in -100.0f64..100.0,
    ) {
        let p = softmax(&z);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let q = softmax(&z.iter().map(|v| v + shift).collect::<Vec<_>>());
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn networks_round_trip_through_json(
        hidden in prop::collection::vec(1usize..12, 1..4),
        seed in any::<u64>(),
        x in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let mut sizes = vec![3];
        sizes.extend(&hidden);
        sizes.push(4);
        let net = init_mlp(&sizes, 0.0, seed).unwrap();
        let back = Mlp::from_json(&net.to_json()).unwrap();
        prop_assert_eq!(&back, &net);
        let p = net.predict_proba(&[x]).unwrap();
        prop_assert!((p[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn feature_tables_round_trip_exactly(
        values in prop::collection::vec(prop::array::uniform14(-1e6f64..1e6), 1..10),
    ) {
        let rows: Vec<FeatureRow> = values
            .iter()
            .enumerate()
            .map(|(i, v)| FeatureRow {
                utterance_id: format!("u{i}"),
                speaker_id: format!("s{}", i / 3),
                dialect: "UCB".into(),
                features: FeatureVector::from_array(*v),
            })
            .collect();
        let mut buf = Vec::new();
        write_table(&rows, &mut buf).unwrap();
        prop_assert_eq!(read_table(buf.as_slice()).unwrap(), rows);
        prop_assert_eq!(FEATURE_COUNT, 14);
    }

    #[test]
    fn percentiles_are_monotone_and_bounded(
        mut xs in prop::collection::vec(-1e3f64..1e3, 1..50),
        p in 0.0f64..100.0,
        q in 0.0f64..100.0,
    ) {
        xs.sort_by(f64::total_cmp);
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(percentile(&xs, lo) <= percentile(&xs, hi) + 1e-9);
        prop_assert!(percentile(&xs, lo) >= xs[0] && percentile(&xs, hi) <= xs[xs.len() - 1]);
    }

    #[test]
    fn trimming_never_lengthens_and_keeps_loud_audio(
        gaps in prop::collection::vec((0usize..8000, 400usize..4000), 1..4),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        for &(silence, speech) in &gaps {
            samples.extend(std::iter::repeat_n(0.0, silence));
            samples.extend((0..speech).map(|_| rng.random_range(-0.5..0.5)));
        }
        let buf = AudioBuffer::new(samples, 16_000, "p").unwrap();
        let trimmed = trim_silence(&buf, &SilenceGate::default()).unwrap();
        let loud: usize = gaps.iter().map(|g| g.1).sum();
        prop_assert!(trimmed.len() <= buf.len());
        // every loud sample survives; removed runs are at least 200 ms minus window spill
        prop_assert!(trimmed.len() + 160 >= loud, "{} < {}", trimmed.len(), loud);
    }
}

use std::collections::BTreeSet;

use proptest::prelude::*;
use twinstage_core::augment::{AugmentationPolicy, Image};
use twinstage_core::datasets::{proportional_counts, CorpusSpec};
use twinstage_core::eval_stats::{
    average_probabilities, compare, metrics_csv, parse_metrics_csv, Null, RunMetrics, SampleStats, Side, Verdict,
};
use twinstage_core::model_zoo::{bottleneck_params, build_model, EncoderSpec, HeadSpec, ProjectorSpec, WeightArchive};
use twinstage_core::schedule::{one_cycle, Interpolation, ScheduleConfig};
use twinstage_core::ssl_core::{
    barlow_twins_loss, cross_correlation, l21_norm, normalize_batch, CrossCorrelation, EmbeddingBatch, LossConfig,
    Matrix,
};

fn batch(n: usize, d: usize, v: Vec<f64>) -> EmbeddingBatch<f64> {
    EmbeddingBatch::new(Matrix::from_vec(n, d, v).unwrap())
}

fn embeddings() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (2usize..12, 1usize..6).prop_flat_map(|(n, d)| {
        (Just(n), Just(d), prop::collection::vec(-5.0f64..5.0, n * d), prop::collection::vec(-5.0f64..5.0, n * d))
    })
}

fn column_stats(m: &Matrix<f64>, c: usize) -> (f64, f64) {
    let col = m.column(c);
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

proptest! {
    #[test]
    fn normalized_columns_are_standard((n, d, z, _) in embeddings()) {
        let raw = batch(n, d, z);
        let out = normalize_batch(&raw).unwrap();
        prop_assert!(out.normalized);
        for c in 0..d {
            let (_, sd_raw) = column_stats(&raw.values, c);
            let (mean, sd) = column_stats(&out.values, c);
            prop_assert!(mean.abs() < 1e-6);
            if sd_raw > 1e-3 {
                prop_assert!((sd - 1.0).abs() < 1e-5, "std {}", sd);
            }
        }
    }

    #[test]
    fn correlation_entries_are_bounded((n, d, z, zp) in embeddings()) {
        let a = normalize_batch(&batch(n, d, z)).unwrap();
        let b = normalize_batch(&batch(n, d, zp)).unwrap();
        let c = cross_correlation(&a, &b).unwrap();
        for &v in c.values.as_slice() {
            prop_assert!(v.abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn swapping_branches_transposes_correlation((n, d, z, zp) in embeddings(), lambda in 0.0f64..2.0) {
        let cfg = LossConfig { lambda, ..Default::default() };
        let a = normalize_batch(&batch(n, d, z)).unwrap();
        let b = normalize_batch(&batch(n, d, zp)).unwrap();
        let c = cross_correlation(&a, &b).unwrap();
        let ct = cross_correlation(&b, &a).unwrap();
        for (x, y) in ct.values.as_slice().iter().zip(c.transpose().values.as_slice()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let (l, lt) = (barlow_twins_loss(&c, &cfg), barlow_twins_loss(&ct, &cfg));
        prop_assert!((l - lt).abs() <= 1e-12 * l.abs().max(1.0));
    }

    #[test]
    fn positive_rescaling_is_removed((n, d, z, zp) in embeddings(), s in 0.01f64..100.0) {
        let cfg = LossConfig::default();
        let scaled: Vec<f64> = z.iter().map(|v| v * s).collect();
        let a = normalize_batch(&batch(n, d, z)).unwrap();
        let a2 = normalize_batch(&batch(n, d, scaled)).unwrap();
        let b = normalize_batch(&batch(n, d, zp)).unwrap();
        for c in 0..d {
            let (_, sd) = column_stats(&a.values, c);
            if sd < 0.5 {
                return Ok(()); // floored column; the scale is not removed
            }
        }
        for (x, y) in a.values.as_slice().iter().zip(a2.values.as_slice()) {
            prop_assert!((x - y).abs() < 1e-6);
        }
        let l1 = barlow_twins_loss(&cross_correlation(&a, &b).unwrap(), &cfg);
        let l2 = barlow_twins_loss(&cross_correlation(&a2, &b).unwrap(), &cfg);
        prop_assert!((l1 - l2).abs() < 1e-6);
    }

    #[test]
    fn loss_vanishes_only_at_identity(d in 1usize..6, i in 0usize..6, j in 0usize..6, eps in 1e-3f64..0.5) {
        let cfg = LossConfig { lambda: 0.5, ..Default::default() };
        let mut m = Matrix::<f64>::identity(d);
        prop_assert_eq!(barlow_twins_loss(&CrossCorrelation::from_matrix(m.clone()).unwrap(), &cfg), 0.0);
        let (i, j) = (i % d, j % d);
        m.set(i, j, m.get(i, j) + eps);
        prop_assert!(barlow_twins_loss(&CrossCorrelation::from_matrix(m).unwrap(), &cfg) > 0.0);
    }

    #[test]
    fn l21_is_absolutely_homogeneous(rows in 1usize..5, cols in 1usize..5, s in -4.0f64..4.0, seed in any::<u64>()) {
        let v: Vec<f64> = (0..rows * cols).map(|k| ((seed.wrapping_add(k as u64) % 997) as f64 / 97.0) - 5.0).collect();
        let w = Matrix::from_vec(rows, cols, v).unwrap();
        let base = l21_norm(&w);
        prop_assert!(base >= 0.0);
        let scaled = l21_norm(&w.map(|x| x * s));
        prop_assert!((scaled - s.abs() * base).abs() < 1e-9 * base.max(1.0));
    }

    #[test]
    fn schedule_stays_in_band(max_lr in 1e-5f64..1.0, total in 2usize..2000, linear in any::<bool>()) {
        let cfg = ScheduleConfig {
            interpolation: if linear { Interpolation::Linear } else { Interpolation::Cosine },
            ..ScheduleConfig::new(max_lr, total)
        };
        prop_assert!(cfg.final_lr() < cfg.start_lr() && cfg.start_lr() < cfg.max_lr);
        let ramp = cfg.ramp_steps();
        let mut prev = one_cycle(0, &cfg).unwrap();
        for s in 0..=total {
            let (lr, m) = one_cycle(s, &cfg).unwrap();
            prop_assert_eq!((lr, m), one_cycle(s, &cfg).unwrap());
            prop_assert!(lr >= cfg.final_lr() && lr <= cfg.max_lr);
            prop_assert!(m >= cfg.min_momentum && m <= cfg.max_momentum);
            // Rate and momentum never move in the same direction.
            prop_assert!((lr - prev.0) * (m - prev.1) <= 0.0);
            if s <= ramp { prop_assert!(lr >= prev.0) } else { prop_assert!(lr <= prev.0) }
            prev = (lr, m);
        }
    }

    #[test]
    fn augmentation_is_seeded_and_in_range(seed in any::<u64>(), prime in any::<bool>(), cutout in any::<bool>()) {
        let px: Vec<f32> = (0..24 * 24 * 3).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
        let img = Image::new(24, 24, px);
        let policy = AugmentationPolicy::twin_branch(prime, cutout);
        let (a, fa) = policy.apply(&img, seed);
        let (b, fb) = policy.apply(&img, seed);
        prop_assert_eq!(&a.pixels, &b.pixels);
        prop_assert_eq!(fa, fb);
        prop_assert_eq!((a.height, a.width), (24, 24));
        prop_assert!(a.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    }

    #[test]
    fn tta_mean_ignores_view_order(k in 1usize..6, c in 2usize..6, seed in any::<u64>(), rot in 0usize..6) {
        let views: Vec<Vec<f64>> = (0..k)
            .map(|v| {
                let raw: Vec<f64> = (0..c).map(|j| ((seed >> ((v * c + j) % 60)) & 0xff) as f64 + 1.0).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let mut rotated = views.clone();
        rotated.rotate_left(rot % k);
        let (m1, p1) = average_probabilities(&views);
        let (m2, p2) = average_probabilities(&rotated);
        prop_assert_eq!(p1, p2);
        for (a, b) in m1.iter().zip(&m2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn greater_verdict_is_antisymmetric(
        ma in 0.5f64..0.8, mb in 0.5f64..0.8, sa in 0.001f64..0.05, sb in 0.001f64..0.05,
        na in 2usize..50, nb in 2usize..50,
    ) {
        let a = Side::Summary { accuracy: Some(SampleStats { n: na, mean: ma, std: sa }), weighted_f1: None };
        let b = Side::Summary { accuracy: Some(SampleStats { n: nb, mean: mb, std: sb }), weighted_f1: None };
        let ab = compare("a", &a, "b", &b, Null::Le, 0.01).unwrap();
        let ba = compare("b", &b, "a", &a, Null::Le, 0.01).unwrap();
        prop_assert!(!(ab.verdict == Verdict::Greater && ba.verdict == Verdict::Greater));
    }

    #[test]
    fn corpus_total_is_linear(m1 in 1usize..5, m2 in 1usize..5, s1 in 0usize..100_000, s2 in 0usize..100_000) {
        let spec: CorpusSpec = format!("{m1}*I + {m2}*U").parse().unwrap();
        let sizes = [("I".to_string(), s1), ("U".to_string(), s2)].into_iter().collect();
        prop_assert_eq!(spec.total(&sizes).unwrap(), m1 * s1 + m2 * s2);
    }

    #[test]
    fn proportional_counts_sum_to_total(total in 0usize..10_000, w in prop::collection::vec(0.01f64..10.0, 1..10)) {
        let c = proportional_counts(total, &w);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        let sum: f64 = w.iter().sum();
        for (ci, wi) in c.iter().zip(&w) {
            prop_assert!((*ci as f64 - total as f64 * wi / sum).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn metrics_csv_round_trips(
        rows in prop::collection::vec((any::<u64>(), 0.0f64..1.0, 0.0f64..1.0, prop::collection::vec(0.0f64..1.0, 1..5)), 1..6)
    ) {
        let runs: Vec<RunMetrics> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (seed, a, f, pc))| RunMetrics {
                run_id: format!("seed-{i}"),
                seed,
                config_hash: "abc".into(),
                accuracy: a,
                weighted_f1: f,
                per_class_f1: pc,
            })
            .collect();
        let text = metrics_csv(&runs);
        let back = parse_metrics_csv(&text).unwrap();
        prop_assert_eq!(metrics_csv(&back), text);
        for (r, b) in runs.iter().zip(&back) {
            prop_assert!((r.accuracy - b.accuracy).abs() <= 5e-7);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameters_partition_and_names_are_stable(seed in any::<u64>(), classes in 2usize..6, projector in any::<bool>()) {
        let head = if projector {
            HeadSpec::Projector(ProjectorSpec { layers: 2, width: 16 })
        } else {
            HeadSpec::Linear { num_classes: classes }
        };
        let m = build_model(&EncoderSpec::tiny(16, seed), &head, seed).unwrap();
        let names: BTreeSet<String> = m.parameter_names().into_iter().collect();
        prop_assert_eq!(names.len(), m.parameter_names().len());
        let again = build_model(&EncoderSpec::tiny(16, seed ^ 1), &head, 0).unwrap();
        prop_assert_eq!(m.parameter_names(), again.parameter_names());
        let bottleneck = bottleneck_params(&m).unwrap();
        let head_params: BTreeSet<String> = names.iter().filter(|n| !n.starts_with("encoder.")).cloned().collect();
        let frozen: BTreeSet<String> =
            names.iter().filter(|n| !head_params.contains(*n) && !bottleneck.contains(*n)).cloned().collect();
        prop_assert!(!bottleneck.is_empty() && !head_params.is_empty() && !frozen.is_empty());
        prop_assert!(bottleneck.is_subset(&names) && bottleneck.is_disjoint(&head_params));
        prop_assert_eq!(bottleneck.len() + head_params.len() + frozen.len(), names.len());

        let a = WeightArchive::from_module(&m, "synthetic");
        let b = WeightArchive::from_bytes(&a.to_bytes()).unwrap();
        prop_assert_eq!(a.to_bytes(), b.to_bytes());
        prop_assert_eq!(b.provenance(), Some("synthetic"));
    }
}

//! Independent oracles for the statistics layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use twinstage_core::eval_stats::{accuracy, per_class_f1, weighted_f1, welch_test, Null, SampleStats};
use twinstage_core::rng::rng_from;

/// Lanczos approximation, g = 7, 9 terms.
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularised incomplete beta `I_x(a, b)`.
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// `P(T > t)` for Student's t with `df` degrees of freedom.
fn t_upper(t: f64, df: f64) -> f64 {
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 { tail } else { 1.0 - tail }
}

fn welch_oracle(a: &SampleStats, b: &SampleStats) -> (f64, f64) {
    let (va, vb) = (a.std * a.std / a.n as f64, b.std * b.std / b.n as f64);
    let t = (a.mean - b.mean) / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va * va / (a.n as f64 - 1.0) + vb * vb / (b.n as f64 - 1.0));
    (t, df)
}

#[test]
fn oracle_self_check() {
    // t with 1 df is Cauchy: P(T > 1) = 1/4.
    assert!((t_upper(1.0, 1.0) - 0.25).abs() < 1e-14);
    // t with 2 df: P(T > t) = (1 - t / sqrt(t² + 2)) / 2.
    for t in [0.3, 1.7, 4.0] {
        let exact = 0.5 * (1.0 - t / (t * t + 2.0f64).sqrt());
        assert!((t_upper(t, 2.0) - exact).abs() < 1e-13, "t={t}");
    }
    assert!((ln_gamma(5.0) - 24.0f64.ln()).abs() < 1e-13);
}

#[test]
fn welch_matches_incomplete_beta_oracle() {
    let mut rng = rng_from(&[2024]);
    for _ in 0..500 {
        let a = SampleStats {
            n: rng.random_range(2..60),
            mean: rng.random_range(0.4..0.9),
            std: rng.random_range(0.001..0.1),
        };
        let b = SampleStats {
            n: rng.random_range(2..60),
            mean: a.mean + rng.random_range(-0.05..0.05),
            std: rng.random_range(0.001..0.1),
        };
        let (t, df) = welch_oracle(&a, &b);
        let le = welch_test(&a, &b, Null::Le).unwrap();
        let eq = welch_test(&a, &b, Null::Eq).unwrap();
        assert!((le.t - t).abs() <= 1e-12 * t.abs().max(1.0));
        assert!((le.df - df).abs() <= 1e-9 * df);
        let p_le = t_upper(t, df);
        let p_eq = 2.0 * t_upper(t.abs(), df);
        assert!((le.p - p_le).abs() < 1e-10, "le {} vs {p_le} (t={t}, df={df})", le.p);
        assert!((eq.p - p_eq).abs() < 1e-10, "eq {} vs {p_eq} (t={t}, df={df})", eq.p);
    }
}

#[test]
fn one_sided_test_rejects_true_null_at_nominal_rate() {
    let mut rng = rng_from(&[99]);
    let normal = Normal::new(0.7, 0.02).unwrap();
    let trials = 10_000;
    let mut rejected = 0;
    for _ in 0..trials {
        let xs: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng)).collect();
        let ys: Vec<f64> = (0..10).map(|_| normal.sample(&mut rng)).collect();
        let r = welch_test(&SampleStats::from_values(&xs).unwrap(), &SampleStats::from_values(&ys).unwrap(), Null::Le)
            .unwrap();
        rejected += (r.p < 0.05) as usize;
    }
    let rate = rejected as f64 / trials as f64;
    assert!((rate - 0.05).abs() <= 0.01, "rejection rate {rate}");
}

/// Per-class precision and recall from explicit confusion counts.
fn brute_weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut cm = vec![vec![0usize; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        cm[l][p] += 1;
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let predicted: usize = (0..k).map(|r| cm[r][c]).sum();
        let support: usize = cm[c].iter().sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        total += f1 * support as f64 / n;
    }
    total
}

#[test]
fn weighted_f1_matches_brute_force() {
    let mut rng = rng_from(&[5]);
    for _ in 0..1000 {
        let k = rng.random_range(2..9);
        let n = rng.random_range(1..80);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&l| if rng.random_bool(0.6) { l } else { rng.random_range(0..k) })
            .collect();
        let got = weighted_f1(&preds, &labels, k).unwrap();
        let want = brute_weighted_f1(&preds, &labels, k);
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn hand_fixture() {
    let (labels, preds) = ([0, 0, 1, 1], [0, 1, 1, 1]);
    assert!((weighted_f1(&preds, &labels, 2).unwrap() - 11.0 / 15.0).abs() < 1e-9);
    assert_eq!(accuracy(&preds, &labels).unwrap(), 0.75);
    let pc = per_class_f1(&preds, &labels, 2).unwrap();
    assert!((pc[0] - 2.0 / 3.0).abs() < 1e-12 && (pc[1] - 0.8).abs() < 1e-12);
}

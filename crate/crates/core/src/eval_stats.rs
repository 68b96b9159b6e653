//! Test-time-augmented inference, classification metrics, multi-run
//! aggregation, Welch significance tests and report emission.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::augment::{self, to_tensor, AugmentationPolicy, Image};
use crate::datasets::DatasetError;
use crate::model_zoo::Model;
use crate::nn::{softmax, Mode};
use crate::plot;
use crate::protocols::ImageSource;
use crate::rng::derive_seed;
use crate::schedule::{one_cycle, LrFindResult, ScheduleConfig};

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} predictions vs {1} labels")]
    Length(usize, usize),
    #[error("class index {0} out of range for {1} classes")]
    ClassRange(usize, usize),
    #[error("at least 2 runs are required, got {0}")]
    TooFewRuns(usize),
    #[error("invalid summary: {0}")]
    Summary(String),
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Mean of `k` probability vectors and its argmax.
pub fn average_probabilities(views: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let k = views.len() as f64;
    let mut mean = vec![0.0; views[0].len()];
    for v in views {
        for (m, p) in mean.iter_mut().zip(v) {
            *m += p / k;
        }
    }
    let pred = argmax(&mean);
    (mean, pred)
}

fn argmax(v: &[f64]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

/// Class probabilities averaged over `k` augmented views of each image.
/// Image `i` draws its views from a seed derived from `(seed, indices[i])`.
pub fn predict_tta(
    model: &mut Model,
    images: &[Image],
    indices: &[usize],
    k: usize,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Vec<(Vec<f64>, usize)> {
    assert!(k >= 1, "at least one view");
    let views: Vec<Vec<Image>> = crate::exec::map_indexed(images.len(), |i| {
        augment::tta_views(&images[i], k, policy, derive_seed(&[seed, indices[i] as u64]))
    });
    let mut per_view: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
    for v in 0..k {
        let batch: Vec<Image> = views.iter().map(|vs| vs[v].clone()).collect();
        let probs = softmax(&model.forward(&to_tensor(&batch), Mode::Eval));
        let c = probs.shape[1];
        per_view.push(probs.data.chunks_exact(c).map(|r| r.iter().map(|&p| p as f64).collect()).collect());
    }
    (0..images.len())
        .map(|i| average_probabilities(&per_view.iter().map(|pv| pv[i].clone()).collect::<Vec<_>>()))
        .collect()
}

/// Predictions, labels and metrics on a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
}

pub fn evaluate(
    model: &mut Model,
    data: &dyn ImageSource,
    num_classes: usize,
    k: usize,
    seed: u64,
    batch_size: usize,
) -> Result<Evaluation, StatsError> {
    let policy = AugmentationPolicy::supervised();
    let mut predictions = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let images: Vec<Image> = chunk.iter().map(|&i| data.image(i)).collect::<Result<_, _>>()?;
        for (_, p) in predict_tta(model, &images, chunk, k, &policy, seed) {
            predictions.push(p);
        }
        for &i in chunk {
            labels.push(data.label(i).ok_or(StatsError::Unlabeled(i))?);
        }
    }
    let per_class_f1 = per_class_f1(&predictions, &labels, num_classes)?;
    Ok(Evaluation {
        accuracy: accuracy(&predictions, &labels)?,
        weighted_f1: weighted_f1(&predictions, &labels, num_classes)?,
        per_class_f1,
        predictions,
        labels,
    })
}

fn check(preds: &[usize], labels: &[usize], k: usize) -> Result<(), StatsError> {
    if preds.len() != labels.len() {
        return Err(StatsError::Length(preds.len(), labels.len()));
    }
    if preds.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(&c) = preds.iter().chain(labels).find(|&&c| c >= k) {
        return Err(StatsError::ClassRange(c, k));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64, StatsError> {
    let k = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    check(preds, labels, k)?;
    Ok(preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / preds.len() as f64)
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<Vec<u64>>, StatsError> {
    check(preds, labels, k)?;
    let mut m = vec![vec![0u64; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// F1 per class; 0 when precision and recall are both 0 or undefined.
pub fn per_class_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<Vec<f64>, StatsError> {
    let m = confusion_matrix(preds, labels, k)?;
    Ok((0..k)
        .map(|c| {
            let tp = m[c][c] as f64;
            let predicted: f64 = (0..k).map(|r| m[r][c] as f64).sum();
            let actual: f64 = m[c].iter().map(|&v| v as f64).sum();
            // 2PR/(P+R) = 2tp/(predicted + actual)
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (predicted + actual) }
        })
        .collect())
}

/// Per-class F1 weighted by class frequency in `labels`.
pub fn weighted_f1(preds: &[usize], labels: &[usize], k: usize) -> Result<f64, StatsError> {
    let f1 = per_class_f1(preds, labels, k)?;
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let n = labels.len() as f64;
    Ok(f1.iter().zip(&counts).map(|(f, &c)| f * c as f64 / n).sum())
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class_f1: Vec<f64>,
}

pub const METRICS_HEADER: &str = "run_id,seed,config_hash,accuracy,weighted_f1,per_class_f1";

pub fn metrics_csv(runs: &[RunMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in runs {
        let pc: Vec<String> = r.per_class_f1.iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            r.run_id,
            r.seed,
            r.config_hash,
            r.accuracy,
            r.weighted_f1,
            pc.join(";")
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<RunMetrics>, StatsError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(StatsError::Summary("metrics file lacks the expected header".into()));
    }
    let bad = |i: usize, what: &str| StatsError::Summary(format!("metrics line {}: bad {what}", i + 2));
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i, "field count"));
            }
            let per_class_f1 = if f[5].is_empty() {
                Vec::new()
            } else {
                f[5].split(';').map(|v| v.parse().map_err(|_| bad(i, "per_class_f1"))).collect::<Result<_, _>>()?
            };
            Ok(RunMetrics {
                run_id: f[0].to_string(),
                seed: f[1].parse().map_err(|_| bad(i, "seed"))?,
                config_hash: f[2].to_string(),
                accuracy: f[3].parse().map_err(|_| bad(i, "accuracy"))?,
                weighted_f1: f[4].parse().map_err(|_| bad(i, "weighted_f1"))?,
                per_class_f1,
            })
        })
        .collect()
}

/// Sample size, mean and sample (n − 1) standard deviation of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl SampleStats {
    pub fn from_values(v: &[f64]) -> Result<Self, StatsError> {
        if v.len() < 2 {
            return Err(StatsError::TooFewRuns(v.len()));
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { n: v.len(), mean, std: var.sqrt() })
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.n < 2 || !self.mean.is_finite() || !(self.std >= 0.0) {
            return Err(StatsError::Summary(format!("need n >= 2 and std >= 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub label: String,
    pub accuracy: SampleStats,
    pub weighted_f1: SampleStats,
}

pub fn aggregate(label: &str, runs: &[RunMetrics]) -> Result<MetricsSummary, StatsError> {
    let acc: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let f1: Vec<f64> = runs.iter().map(|r| r.weighted_f1).collect();
    Ok(MetricsSummary {
        label: label.to_string(),
        accuracy: SampleStats::from_values(&acc)?,
        weighted_f1: SampleStats::from_values(&f1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Null {
    /// H0: model A ≤ model B (one-sided).
    Le,
    /// H0: model A = model B (two-sided).
    Eq,
}

impl std::str::FromStr for Null {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "le" | "<=" => Ok(Null::Le),
            "eq" | "=" => Ok(Null::Eq),
            other => Err(format!("unknown null `{other}` (expected le or eq)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both sides had zero variance; `p` follows a convention.
    pub degenerate: bool,
}

/// Welch's unequal-variance t-test of `a` against `b`.
pub fn welch_test(a: &SampleStats, b: &SampleStats, null: Null) -> Result<TestResult, StatsError> {
    a.validate()?;
    b.validate()?;
    let (va, vb) = (a.std.powi(2) / a.n as f64, b.std.powi(2) / b.n as f64);
    let diff = a.mean - b.mean;
    if va + vb == 0.0 {
        let p = match (null, diff.partial_cmp(&0.0).unwrap()) {
            (_, std::cmp::Ordering::Equal) => 1.0,
            (Null::Le, std::cmp::Ordering::Less) => 1.0,
            _ => 0.0,
        };
        let t = if diff == 0.0 { 0.0 } else { diff.signum() * f64::INFINITY };
        return Ok(TestResult { t, df: f64::INFINITY, p, degenerate: true });
    }
    let t = diff / (va + vb).sqrt();
    let df = (va + vb).powi(2) / (va.powi(2) / (a.n as f64 - 1.0) + vb.powi(2) / (b.n as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::Summary(e.to_string()))?;
    // Lower tails keep precision for large |t|.
    let p = match null {
        Null::Le => dist.cdf(-t),
        Null::Eq => (2.0 * dist.cdf(-t.abs())).min(1.0),
    };
    Ok(TestResult { t, df, p, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Greater,
    EqualUndetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub model_a: String,
    pub model_b: String,
    pub null: Null,
    pub alpha: f64,
    pub accuracy: Option<TestResult>,
    pub weighted_f1: Option<TestResult>,
    pub verdict: Verdict,
}

/// One side of a comparison: raw runs or published summary statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum Side {
    Runs(Vec<RunMetrics>),
    Summary { accuracy: Option<SampleStats>, weighted_f1: Option<SampleStats> },
}

impl Side {
    fn stats(&self) -> Result<(Option<SampleStats>, Option<SampleStats>), StatsError> {
        match self {
            Side::Runs(r) => {
                let s = aggregate("", r)?;
                Ok((Some(s.accuracy), Some(s.weighted_f1)))
            }
            Side::Summary { accuracy, weighted_f1 } => Ok((*accuracy, *weighted_f1)),
        }
    }
}

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Compare A against B. A ≻ B ("greater") requires every available metric
/// to reject the null at `alpha` in A's favour.
pub fn compare(
    model_a: &str,
    a: &Side,
    model_b: &str,
    b: &Side,
    null: Null,
    alpha: f64,
) -> Result<ComparisonResult, StatsError> {
    let (aa, af) = a.stats()?;
    let (ba, bf) = b.stats()?;
    let test = |x: Option<SampleStats>, y: Option<SampleStats>| -> Result<Option<TestResult>, StatsError> {
        match (x, y) {
            (Some(x), Some(y)) => welch_test(&x, &y, null).map(Some),
            _ => Ok(None),
        }
    };
    let accuracy = test(aa, ba)?;
    let weighted_f1 = test(af, bf)?;
    let results: Vec<&TestResult> = accuracy.iter().chain(weighted_f1.iter()).collect();
    if results.is_empty() {
        return Err(StatsError::Summary("no metric is available on both sides".into()));
    }
    let greater = results.iter().all(|r| r.p < alpha && r.t > 0.0);
    Ok(ComparisonResult {
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        null,
        alpha,
        accuracy,
        weighted_f1,
        verdict: if greater { Verdict::Greater } else { Verdict::EqualUndetermined },
    })
}

/// Everything a report can contain.
#[derive(Debug, Clone, Default)]
pub struct ReportInput {
    pub summaries: Vec<MetricsSummary>,
    pub comparisons: Vec<ComparisonResult>,
    /// `(configuration label, runs)`.
    pub runs: Vec<(String, Vec<RunMetrics>)>,
    pub schedule: Option<ScheduleConfig>,
    pub lr_search: Option<LrFindResult>,
    pub class_names: Vec<String>,
}

fn fmt_p(p: f64) -> String {
    if p < 1e-10 { "<1e-10".to_string() } else { format!("{p:.5}") }
}

fn fmt_test(r: &Option<TestResult>) -> String {
    r.as_ref().map_or("-".into(), |r| fmt_p(r.p))
}

pub fn render_markdown(input: &ReportInput) -> String {
    let mut s = String::from("# Results\n");
    if !input.summaries.is_empty() {
        s.push_str("\n| Configuration | n | Accuracy mean | Accuracy std | Weighted F1 mean | Weighted F1 std |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for m in &input.summaries {
            let _ = writeln!(
                s,
                "| {} | {} | {:.5} | {:.5} | {:.5} | {:.5} |",
                m.label, m.accuracy.n, m.accuracy.mean, m.accuracy.std, m.weighted_f1.mean, m.weighted_f1.std
            );
        }
    }
    if !input.comparisons.is_empty() {
        s.push_str("\n| Model 1 | Model 2 | Null | p (accuracy) | p (weighted F1) | Verdict |\n");
        s.push_str("|---|---|---|---|---|---|\n");
        for c in &input.comparisons {
            let null = match c.null {
                Null::Le => "Model 1 <= Model 2",
                Null::Eq => "Model 1 = Model 2",
            };
            let verdict = match c.verdict {
                Verdict::Greater => "Model 1 > Model 2",
                Verdict::EqualUndetermined => "undetermined",
            };
            let _ = writeln!(
                s,
                "| {} | {} | {null} | {} | {} | {verdict} |",
                c.model_a,
                c.model_b,
                fmt_test(&c.accuracy),
                fmt_test(&c.weighted_f1)
            );
        }
    }
    s
}

pub fn runs_csv(runs: &[(String, Vec<RunMetrics>)]) -> String {
    let mut s = format!("configuration,{METRICS_HEADER}\n");
    for (label, rs) in runs {
        for line in metrics_csv(rs).lines().skip(1) {
            let _ = writeln!(s, "{label},{line}");
        }
    }
    s
}

/// Write `report.md`, `runs.csv` and the plots under `out_dir/plots`.
/// Nothing is written when there is nothing to report.
pub fn emit_report(input: &ReportInput, out_dir: &Path) -> Result<Vec<PathBuf>, StatsError> {
    if input.summaries.is_empty() && input.comparisons.is_empty() {
        return Err(StatsError::Empty);
    }
    let io = |p: &Path, source| StatsError::Io { path: p.display().to_string(), source };
    let plots = out_dir.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io(&plots, e))?;
    let mut files: Vec<(PathBuf, Vec<u8>)> = vec![
        (out_dir.join("report.md"), render_markdown(input).into_bytes()),
        (out_dir.join("runs.csv"), runs_csv(&input.runs).into_bytes()),
    ];
    if let Some(cfg) = &input.schedule {
        let pts: Vec<(f64, f64)> = (0..=cfg.total_steps)
            .map(|s| (s as f64, one_cycle(s, cfg).map(|v| v.0).unwrap_or(f64::NAN)))
            .collect();
        files.push((plots.join("schedule.png"), plot::line_png(&pts, false)));
    }
    if let Some(r) = &input.lr_search {
        let pts: Vec<(f64, f64)> = r.lrs.iter().copied().zip(r.smoothed_losses.iter().copied()).collect();
        files.push((plots.join("lr_find.png"), plot::line_png(&pts, true)));
    }
    if let Some((_, rs)) = input.runs.first() {
        if let Some(first) = rs.first() {
            let k = first.per_class_f1.len();
            let mean: Vec<f64> = (0..k)
                .map(|c| rs.iter().map(|r| r.per_class_f1.get(c).copied().unwrap_or(0.0)).sum::<f64>() / rs.len() as f64)
                .collect();
            if k > 0 {
                files.push((plots.join("per_class_f1.png"), plot::bar_png(&mean)));
            }
        }
    }
    for (path, bytes) in &files {
        fs::write(path, bytes).map_err(|e| io(path, e))?;
    }
    Ok(files.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_fixture() {
        let (labels, preds) = ([0, 0, 1, 1], [0, 1, 1, 1]);
        let f = per_class_f1(&preds, &labels, 2).unwrap();
        assert!((f[0] - 2.0 / 3.0).abs() < 1e-12 && (f[1] - 0.8).abs() < 1e-12);
        assert!((weighted_f1(&preds, &labels, 2).unwrap() - 0.733_333_333_333).abs() < 1e-9);
        assert_eq!(accuracy(&preds, &labels).unwrap(), 0.75);
        assert!((weighted_f1(&[0, 0, 0, 0], &labels, 2).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_f1(&labels, &labels, 2).unwrap(), 1.0);
        assert!(matches!(weighted_f1(&[], &[], 2), Err(StatsError::Empty)));
        // absent class: weight 0, F1 0
        assert_eq!(per_class_f1(&[0, 0], &[0, 0], 3).unwrap(), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn tta_average() {
        let (m, p) = average_probabilities(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        assert!((m[0] - 0.4).abs() < 1e-12 && (m[1] - 0.6).abs() < 1e-12);
        assert_eq!(p, 1);
    }

    #[test]
    fn aggregate_two_points() {
        let run = |a: f64| RunMetrics {
            run_id: "r".into(),
            seed: 0,
            config_hash: "h".into(),
            accuracy: a,
            weighted_f1: a,
            per_class_f1: vec![a],
        };
        let s = aggregate("x", &[run(0.6), run(0.8)]).unwrap();
        assert!((s.accuracy.mean - 0.7).abs() < 1e-12);
        assert!((s.accuracy.std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(aggregate("x", &[run(0.5), run(0.5)]).unwrap().accuracy.std, 0.0);
        assert!(matches!(aggregate("x", &[run(0.5)]), Err(StatsError::TooFewRuns(1))));
    }

    #[test]
    fn identical_batches_are_undetermined() {
        let s = SampleStats { n: 35, mean: 0.7, std: 0.01 };
        let side = Side::Summary { accuracy: Some(s), weighted_f1: Some(s) };
        let c = compare("a", &side, "b", &side, Null::Eq, DEFAULT_ALPHA).unwrap();
        assert!(c.accuracy.unwrap().p > 0.99);
        assert_eq!(c.verdict, Verdict::EqualUndetermined);
        let z = SampleStats { n: 5, mean: 0.7, std: 0.0 };
        let r = welch_test(&z, &z, Null::Le).unwrap();
        assert!(r.degenerate && r.p == 1.0);
    }

    #[test]
    fn metrics_csv_round_trip() {
        let r = RunMetrics {
            run_id: "seed-1".into(),
            seed: 1,
            config_hash: "abc".into(),
            accuracy: 0.5,
            weighted_f1: 0.25,
            per_class_f1: vec![0.5, 0.0],
        };
        let text = metrics_csv(std::slice::from_ref(&r));
        assert!(text.starts_with(METRICS_HEADER));
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![r]);
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        assert!(matches!(emit_report(&ReportInput::default(), &out), Err(StatsError::Empty)));
        assert!(!out.exists());
    }
}

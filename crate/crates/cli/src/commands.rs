//! Subcommand bodies. Each one resolves its settings, refuses to write into
//! a non-empty directory (except `report`, which only adds files), and
//! leaves a `config.snapshot` next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use twinstage_core::datasets::{
    check_no_leakage, compose_corpus, load_manifest, synth_generate, CorpusSpec, Dataset, ManifestOptions, Split,
    SynthConfig,
};
use twinstage_core::eval_stats::{
    self, aggregate, compare as compare_sides, emit_report, evaluate, metrics_csv, parse_metrics_csv, Null,
    ReportInput, RunMetrics, SampleStats, Side, Verdict,
};
use twinstage_core::exec;
use twinstage_core::model_zoo::{
    attach_head, build_model, EncoderInit, EncoderKind, EncoderSpec, EncoderView, HeadSpec, Model, ProjectorSpec,
    WeightArchive,
};
use twinstage_core::plot;
use twinstage_core::protocols::{
    further_pretrain, finetune, linear_probe, run_plan, search_lr, InMemory, PretrainConfig, PretrainMode,
    RunRecord, SupervisedConfig, TrainPlan,
};
use twinstage_core::schedule::{Interpolation, LrFindConfig, LrFindResult, ScheduleConfig};
use twinstage_core::ssl_core::{L21Grouping, LossConfig};

use crate::config::Settings;
use crate::error::{CliError, ErrorClass};
use crate::{CompareArgs, EvalArgs, LrFindArgs, PretrainArgs, ReportArgs, SupervisedArgs, SynthArgs};

const META_KIND: &str = "encoder_kind";
const META_DIM: &str = "encoder_dim";
const META_CLASSES: &str = "classes";

fn settings(command: &str, flags: &impl Serialize, config: Option<&Path>) -> Result<Settings> {
    let mut s = Settings::new(command, flags, config)?;
    s.hash_by_content("manifest");
    exec::set_sequential(s.flag("deterministic")?);
    Ok(s)
}

/// A fresh output directory.
struct RunDir(PathBuf);

impl RunDir {
    fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            let occupied = !path.is_dir()
                || fs::read_dir(path).with_context(|| format!("reading {}", path.display()))?.next().is_some();
            if occupied {
                return Err(CliError::new(
                    ErrorClass::RunDirExists,
                    format!("{} already exists and is not empty; choose a new --out", path.display()),
                )
                .into());
            }
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self(path.to_path_buf()))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    /// `weights/<name>`, with the directory created.
    fn archive_path(&self, name: &str) -> Result<PathBuf> {
        let dir = self.path("weights");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir.join(name))
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

/// `NAME=PATH` or a bare path (named `main`, `main2`, ...).
fn named_manifests(entries: &[String]) -> Result<Vec<(String, PathBuf)>> {
    if entries.is_empty() {
        return Err(CliError::config("missing required setting `manifest`").into());
    }
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let (name, path) = match e.split_once('=') {
            Some((n, p)) => (n.trim().to_string(), PathBuf::from(p.trim())),
            None if i == 0 => ("main".to_string(), PathBuf::from(e)),
            None => (format!("main{}", i + 1), PathBuf::from(e)),
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(CliError::config(format!("manifest name `{name}` given twice")).into());
        }
        out.push((name, path));
    }
    Ok(out)
}

fn load(path: &Path, image_size: usize) -> Result<Dataset> {
    load_manifest(path, &ManifestOptions::new(image_size)).with_context(|| format!("manifest {}", path.display()))
}

fn parse_with<T>(s: &mut Settings, key: &str, default: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
    let v: String = s.get(key, default)?;
    f(&v).ok_or_else(|| CliError::config(format!("invalid value `{v}` for `{key}`")).into())
}

fn schedule_template(s: &mut Settings) -> Result<(Option<f64>, ScheduleConfig, LrFindConfig)> {
    let base = ScheduleConfig::new(1e-3, 2);
    let interpolation = parse_with(s, "interpolation", "cosine", |v| match v {
        "cosine" => Some(Interpolation::Cosine),
        "linear" => Some(Interpolation::Linear),
        _ => None,
    })?;
    let cfg = ScheduleConfig {
        div: s.get("div", &base.div.to_string())?,
        final_div: s.get("final_div", &base.final_div.to_string())?,
        pct_ramp: s.get("pct_ramp", &base.pct_ramp.to_string())?,
        max_momentum: s.get("max_momentum", &base.max_momentum.to_string())?,
        min_momentum: s.get("min_momentum", &base.min_momentum.to_string())?,
        interpolation,
        ..base
    };
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    let d = LrFindConfig::default();
    let search = LrFindConfig {
        iterations: s.get("lr_find_iters", &d.iterations.to_string())?,
        start_lr: s.get("lr_find_start", &d.start_lr.to_string())?,
        end_lr: s.get("lr_find_end", &d.end_lr.to_string())?,
        ..d
    };
    Ok((s.opt("max_lr")?, cfg, search))
}

fn loss_config(s: &mut Settings) -> Result<(ProjectorSpec, LossConfig, bool)> {
    let d = LossConfig::default();
    let p = ProjectorSpec::default();
    let projector =
        ProjectorSpec { layers: s.get("projector_layers", &p.layers.to_string())?, width: s.get("projector_width", &p.width.to_string())? };
    let grouping = parse_with(s, "l21_grouping", "rows", |v| match v {
        "rows" => Some(L21Grouping::Rows),
        "columns" => Some(L21Grouping::Columns),
        _ => None,
    })?;
    let loss = LossConfig { lambda: s.get("lambda", &d.lambda.to_string())?, alpha: s.get("alpha", &d.alpha.to_string())?, grouping };
    Ok((projector, loss, s.flag("cutout")?))
}

/// Encoder spec from flags, with kind and width taken from the archive's
/// metadata when one is given.
fn encoder_spec(s: &mut Settings, archive_key: &str) -> Result<(EncoderSpec, String)> {
    let archive: Option<PathBuf> = s.opt(archive_key)?;
    let meta = match &archive {
        Some(p) => {
            s.hash_by_content(archive_key);
            let a = WeightArchive::read(p).with_context(|| format!("encoder archive {}", p.display()))?;
            Some((a.metadata().clone(), a.provenance().unwrap_or("unknown").to_string()))
        }
        None => None,
    };
    let get_meta = |k: &str| meta.as_ref().and_then(|(m, _)| m.get(k).cloned());
    let kind_default = get_meta(META_KIND).unwrap_or_else(|| EncoderKind::TinyConv.to_string());
    let kind: EncoderKind = s.get("encoder", &kind_default)?;
    let dim_default = get_meta(META_DIM).unwrap_or_else(|| match kind {
        EncoderKind::TinyConv => "64".into(),
        EncoderKind::Resnet50Shape => "2048".into(),
    });
    let output_dim: usize = s.get("encoder_dim", &dim_default)?;
    let (init, provenance) = match archive {
        Some(p) => (EncoderInit::FromArchive(p), meta.map(|m| m.1).unwrap_or_default()),
        None => (EncoderInit::Random(s.get("encoder_seed", "0")?), "random".to_string()),
    };
    Ok((EncoderSpec { kind, output_dim, init }, provenance))
}

fn encoder_only(spec: &EncoderSpec) -> Result<twinstage_core::model_zoo::Encoder> {
    Ok(build_model(spec, &HeadSpec::Linear { num_classes: 2 }, 0)?.encoder)
}

fn describe(a: &mut WeightArchive, spec: &EncoderSpec) {
    a.set_metadata(META_KIND, &spec.kind.to_string());
    a.set_metadata(META_DIM, &spec.output_dim.to_string());
}

fn lr_find_png(r: &LrFindResult) -> Vec<u8> {
    let pts: Vec<(f64, f64)> = r.lrs.iter().copied().zip(r.smoothed_losses.iter().copied()).collect();
    plot::line_png(&pts, true)
}

/// Non-test samples of every manifest combined per `corpus` (each manifest
/// once when absent), checked against every manifest's test split.
fn pretrain_corpus(s: &mut Settings, image_size: usize) -> Result<Dataset> {
    let manifests = named_manifests(&s.list("manifest"))?;
    let expr: Option<String> = s.opt("corpus")?;
    let mut parts = BTreeMap::new();
    let mut tests = Vec::new();
    for (name, path) in manifests {
        let mut d = load(&path, image_size)?;
        tests.push(d.split(Split::Test));
        d.samples.retain(|x| x.split != Split::Test);
        parts.insert(name, d);
    }
    let spec = match expr {
        Some(e) => e.parse::<CorpusSpec>().map_err(|e| CliError::config(e.to_string()))?,
        None => CorpusSpec { components: parts.keys().map(|k| (k.clone(), 1)).collect() },
    };
    let corpus = compose_corpus(&spec, &parts)?;
    for t in &tests {
        check_no_leakage(&corpus, t)?;
    }
    Ok(corpus)
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let mut s = settings("synth", a, a.common.config.as_deref())?;
    let out: PathBuf = s.required("out")?;
    let d = SynthConfig::default();
    let imbalance: String = s.get("imbalance", "none")?;
    let cfg = SynthConfig {
        num_classes: s.get("classes", &d.num_classes.to_string())?,
        n_train: s.get("train", &d.n_train.to_string())?,
        n_test: s.get("test", &d.n_test.to_string())?,
        image_size: s.get("size", &d.image_size.to_string())?,
        seed: s.get("seed", &d.seed.to_string())?,
        imbalance: match imbalance.as_str() {
            "none" => None,
            "lesion" => Some(SynthConfig::lesion_proportions()),
            w => Some(
                w.split(',')
                    .map(|x| x.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::config(format!("invalid value `{w}` for `imbalance`: {e}")))?,
            ),
        },
    };
    s.finish()?;
    RunDir::create(&out)?;
    let r = synth_generate(&cfg, &out)?;
    println!("manifest={}", r.manifest.display());
    println!(
        "train={} test={}",
        r.train_counts.iter().sum::<usize>(),
        r.test_counts.iter().sum::<usize>()
    );
    Ok(())
}

pub fn pretrain(a: &PretrainArgs) -> Result<()> {
    let mut s = settings("pretrain", a, a.common.config.as_deref())?;
    let out: PathBuf = s.required("out")?;
    let image_size: usize = s.get("image_size", "256")?;
    let mode: PretrainMode = s.get("mode", "ssl_p")?;
    let (enc, source) = encoder_spec(&mut s, "init_archive")?;
    let (projector, loss, cutout) = loss_config(&mut s)?;
    let (max_lr, schedule, search) = schedule_template(&mut s)?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        mode,
        projector,
        loss,
        head_epochs: s.get("head_epochs", &d.head_epochs.to_string())?,
        head_lr: s.get("head_lr", &d.head_lr.to_string())?,
        epochs: s.get("epochs", &d.epochs.to_string())?,
        batch_size: s.get("batch_size", &d.batch_size.to_string())?,
        max_lr,
        schedule,
        search,
        cutout,
        seed: s.get("seed", "0")?,
    };
    let mode_tag = if mode == PretrainMode::Ssl { "ssl" } else { "ssl_p" };
    let provenance: String = s.get("provenance", &format!("{source}+{mode_tag}"))?;
    let corpus = pretrain_corpus(&mut s, image_size)?;
    s.finish()?;

    let run = RunDir::create(&out)?;
    run.write("config.snapshot", s.snapshot())?;
    let data = InMemory::load(&corpus)?;
    let (encoder, mut record) = further_pretrain(encoder_only(&enc)?, &enc, &data, &cfg)?;
    let mut archive = WeightArchive::from_module(&EncoderView(&encoder), &provenance);
    describe(&mut archive, &enc);
    let path = run.archive_path("encoder.archive")?;
    archive.write(&path)?;
    record.archive_path = Some(path.clone());
    record.config_hash = Some(s.config_hash());
    run.write("losses.csv", record.losses_csv())?;
    if let Some(r) = record.final_phase().and_then(|p| p.lr_search.as_ref()) {
        run.write("lr_find.csv", r.to_csv())?;
    }
    run.write("run_record.json", serde_json::to_string_pretty(&record)?)?;
    let last = record.final_phase().and_then(|p| p.epoch_losses.last().copied());
    println!("encoder={}", path.display());
    println!(
        "corpus_size={} lr={} final_epoch_loss={}",
        data.images.len(),
        record.final_phase().map_or(f64::NAN, |p| p.lr),
        last.map_or("none".into(), |l| format!("{l:.6}"))
    );
    Ok(())
}

/// `1,2,5` or `0..5`.
fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    let bad = || CliError::config(format!("invalid value `{v}` for `seeds`"));
    let seeds: Vec<u64> = if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..b).collect()
    } else {
        v.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect::<Result<_, _>>()?
    };
    if seeds.is_empty() {
        return Err(bad().into());
    }
    Ok(seeds)
}

fn supervised_config(s: &mut Settings) -> Result<SupervisedConfig> {
    let (max_lr, schedule, search) = schedule_template(s)?;
    let d = SupervisedConfig::default();
    Ok(SupervisedConfig {
        head_epochs: s.get("head_epochs", &d.head_epochs.to_string())?,
        head_lr: s.get("head_lr", &d.head_lr.to_string())?,
        epochs: s.get("epochs", &d.epochs.to_string())?,
        batch_size: s.get("batch_size", &d.batch_size.to_string())?,
        max_lr,
        schedule,
        search,
        seed: 0,
    })
}

fn single_manifest(s: &mut Settings) -> Result<PathBuf> {
    let list = s.list("manifest");
    let m = named_manifests(&list)?;
    if m.len() != 1 {
        return Err(CliError::config("exactly one manifest is expected").into());
    }
    Ok(m.into_iter().next().expect("one manifest").1)
}

pub fn supervised(a: &SupervisedArgs, probe: bool) -> Result<()> {
    let name = if probe { "probe" } else { "finetune" };
    let mut s = settings(name, a, a.common.config.as_deref())?;
    let out: PathBuf = s.required("out")?;
    let manifest = single_manifest(&mut s)?;
    let image_size: usize = s.get("image_size", "256")?;
    let (enc, source) = encoder_spec(&mut s, "encoder_archive")?;
    let mut cfg = supervised_config(&mut s)?;
    let seeds = parse_seeds(&s.get::<String>("seeds", "0")?)?;
    let tta: usize = s.get("tta", "3")?;
    let eval_batch: usize = s.get("eval_batch", "256")?;
    if tta == 0 {
        return Err(CliError::config("`tta` must be at least 1").into());
    }
    s.finish()?;

    let ds = load(&manifest, image_size)?;
    let num_classes = ds.classes.len();
    let train = InMemory::load(&ds.split(Split::Train))?;
    let test = InMemory::load(&ds.split(Split::Test))?;
    if test.images.is_empty() {
        return Err(CliError::new(ErrorClass::Data, "manifest has no test split").into());
    }
    let run = RunDir::create(&out)?;
    run.write("config.snapshot", s.snapshot())?;
    let base = encoder_only(&enc)?;
    let hash = s.config_hash();
    let mut metrics = Vec::new();
    let mut records = Vec::new();
    let mut losses = String::from("seed,phase,epoch,loss\n");
    for &seed in &seeds {
        cfg.seed = seed;
        let train_fn = if probe { linear_probe } else { finetune };
        let (mut model, mut record) = train_fn(base.clone(), &enc, &train, num_classes, &cfg)?;
        let ev = evaluate(&mut model, &test, num_classes, tta, seed, eval_batch)?;
        let mut archive = WeightArchive::from_module(&model, &format!("{source}+{name}"));
        describe(&mut archive, &enc);
        archive.set_metadata(META_CLASSES, &serde_json::to_string(&ds.classes)?);
        let path = run.archive_path(&format!("seed-{seed}.archive"))?;
        archive.write(&path)?;
        record.archive_path = Some(path);
        record.config_hash = Some(hash.clone());
        for line in record.losses_csv().lines().skip(1) {
            losses.push_str(&format!("{seed},{line}\n"));
        }
        if let Some(r) = record.final_phase().and_then(|p| p.lr_search.as_ref()) {
            run.write(&format!("lr_find-seed-{seed}.csv"), r.to_csv())?;
        }
        println!("seed={seed} accuracy={:.6} weighted_f1={:.6}", ev.accuracy, ev.weighted_f1);
        metrics.push(RunMetrics {
            run_id: format!("seed-{seed}"),
            seed,
            config_hash: hash.clone(),
            accuracy: ev.accuracy,
            weighted_f1: ev.weighted_f1,
            per_class_f1: ev.per_class_f1,
        });
        records.push(record);
    }
    run.write("metrics.csv", metrics_csv(&metrics))?;
    run.write("losses.csv", losses)?;
    run.write("run_record.json", serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut s = settings("eval", a, a.common.config.as_deref())?;
    let out: PathBuf = s.required("out")?;
    let manifest = single_manifest(&mut s)?;
    let archive_path: PathBuf = s.required("archive")?;
    s.hash_by_content("archive");
    let image_size: usize = s.get("image_size", "256")?;
    let tta: usize = s.get("tta", "3")?;
    let seed: u64 = s.get("seed", "0")?;
    let eval_batch: usize = s.get("eval_batch", "256")?;
    s.finish()?;

    let archive = WeightArchive::read(&archive_path).with_context(|| format!("archive {}", archive_path.display()))?;
    let classes: Vec<String> = archive
        .metadata()
        .get(META_CLASSES)
        .and_then(|c| serde_json::from_str(c).ok())
        .ok_or_else(|| CliError::new(ErrorClass::Archive, "archive has no classifier metadata; use a finetune or probe archive"))?;
    let kind: EncoderKind = archive.metadata().get(META_KIND).map_or(Ok(EncoderKind::TinyConv), |k| k.parse())?;
    let dim: usize = archive.metadata().get(META_DIM).and_then(|d| d.parse().ok()).unwrap_or(64);
    let ds = load(&manifest, image_size)?;
    if ds.classes != classes {
        return Err(CliError::new(
            ErrorClass::Data,
            format!("manifest classes {:?} differ from the archive's {:?}", ds.classes, classes),
        )
        .into());
    }
    let spec = EncoderSpec { kind, output_dim: dim, init: EncoderInit::Random(0) };
    let mut model = build_model(&spec, &HeadSpec::Linear { num_classes: classes.len() }, 0)?;
    archive.apply(&mut model, "")?;
    let test_ds = ds.split(Split::Test);
    let test = InMemory::load(&test_ds)?;
    let run = RunDir::create(&out)?;
    run.write("config.snapshot", s.snapshot())?;
    let ev = evaluate(&mut model, &test, classes.len(), tta, seed, eval_batch)?;
    let m = RunMetrics {
        run_id: "eval".into(),
        seed,
        config_hash: s.config_hash(),
        accuracy: ev.accuracy,
        weighted_f1: ev.weighted_f1,
        per_class_f1: ev.per_class_f1.clone(),
    };
    run.write("metrics.csv", metrics_csv(&[m]))?;
    let mut preds = String::from("path,label,prediction\n");
    for ((sample, l), p) in test_ds.samples.iter().zip(&ev.labels).zip(&ev.predictions) {
        preds.push_str(&format!("{},{},{}\n", sample.path.display(), classes[*l], classes[*p]));
    }
    run.write("predictions.csv", preds)?;
    println!("accuracy={:.6} weighted_f1={:.6}", ev.accuracy, ev.weighted_f1);
    Ok(())
}

pub fn lrfind(a: &LrFindArgs) -> Result<()> {
    let mut s = settings("lrfind", a, a.common.config.as_deref())?;
    let out: PathBuf = s.required("out")?;
    let mode: String = s.get("mode", "probe")?;
    let image_size: usize = s.get("image_size", "256")?;
    let (enc, _) = encoder_spec(&mut s, "encoder_archive")?;
    let seed: u64 = s.get("seed", "0")?;
    let (plan, mut model, data): (TrainPlan, Model, InMemory) = match mode.as_str() {
        "probe" | "finetune" => {
            let mut cfg = supervised_config(&mut s)?;
            cfg.seed = seed;
            let manifest = single_manifest(&mut s)?;
            let ds = load(&manifest, image_size)?;
            let k = ds.classes.len();
            let model = attach_head(encoder_only(&enc)?, enc.clone(), &HeadSpec::Linear { num_classes: k }, seed)?;
            (cfg.plan(mode == "probe"), model, InMemory::load(&ds.split(Split::Train))?)
        }
        "ssl" | "ssl_p" => {
            let (projector, loss, cutout) = loss_config(&mut s)?;
            let (max_lr, schedule, search) = schedule_template(&mut s)?;
            let d = PretrainConfig::default();
            let cfg = PretrainConfig {
                mode: mode.parse().map_err(CliError::config)?,
                projector,
                loss,
                head_epochs: s.get("head_epochs", &d.head_epochs.to_string())?,
                head_lr: s.get("head_lr", &d.head_lr.to_string())?,
                batch_size: s.get("batch_size", &d.batch_size.to_string())?,
                max_lr,
                schedule,
                search,
                cutout,
                seed,
                ..d
            };
            let corpus = pretrain_corpus(&mut s, image_size)?;
            let model = attach_head(encoder_only(&enc)?, enc.clone(), &HeadSpec::Projector(projector), seed)?;
            (cfg.plan(), model, InMemory::load(&corpus)?)
        }
        other => {
            return Err(CliError::config(format!(
                "invalid value `{other}` for `mode` (expected probe, finetune, ssl or ssl_p)"
            ))
            .into())
        }
    };
    s.finish()?;
    let run = RunDir::create(&out)?;
    run.write("config.snapshot", s.snapshot())?;
    // The search starts where the real run would: after the warm-up phase.
    let mut warm = plan.clone();
    warm.phases.truncate(1);
    run_plan(&mut model, &data, &warm)?;
    let r = search_lr(&mut model, &data, &plan, 1)?;
    run.write("lr_find.csv", r.to_csv())?;
    run.write("plots/lr_find.png", lr_find_png(&r))?;
    match r.suggestion {
        Some(lr) => println!("suggestion={lr} status=ok"),
        None => println!("suggestion=none status=no_valley"),
    }
    Ok(())
}

/// `mean=..,std=..,n=..` with optional `f1_mean=..,f1_std=..`.
fn parse_summary(v: &str) -> Result<Side> {
    let mut kv = BTreeMap::new();
    for part in v.split(',') {
        let (k, x) = part
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("summary `{v}`: expected key=value pairs")))?;
        let x: f64 =
            x.trim().parse().map_err(|_| CliError::config(format!("summary `{v}`: `{}` is not a number", x.trim())))?;
        kv.insert(k.trim().to_string(), x);
    }
    let need = |k: &str| kv.get(k).copied().ok_or_else(|| CliError::config(format!("summary `{v}` lacks `{k}`")));
    let n = need("n")?;
    if n.fract() != 0.0 || n < 2.0 {
        return Err(CliError::config(format!("summary `{v}`: n must be an integer >= 2")).into());
    }
    let n = n as usize;
    let accuracy = SampleStats { n, mean: need("mean")?, std: need("std")? };
    accuracy.validate().map_err(|e| CliError::config(e.to_string()))?;
    let weighted_f1 = match (kv.get("f1_mean"), kv.get("f1_std")) {
        (Some(&mean), Some(&std)) => Some(SampleStats { n, mean, std }),
        (None, None) => None,
        _ => return Err(CliError::config(format!("summary `{v}`: f1_mean and f1_std go together")).into()),
    };
    Ok(Side::Summary { accuracy: Some(accuracy), weighted_f1 })
}

fn metrics_file(p: &Path) -> PathBuf {
    if p.is_dir() { p.join("metrics.csv") } else { p.to_path_buf() }
}

fn read_runs(p: &Path) -> Result<Vec<RunMetrics>> {
    let f = metrics_file(p);
    let text = fs::read_to_string(&f).with_context(|| format!("reading {}", f.display()))?;
    Ok(parse_metrics_csv(&text)?)
}

fn dir_label(p: &Path) -> String {
    let p = if p.is_dir() { p } else { p.parent().unwrap_or(p) };
    p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn side(s: &mut Settings, which: &str) -> Result<(String, Side)> {
    let run: Option<PathBuf> = s.opt(&format!("run_{which}"))?;
    let summary: Option<String> = s.opt(&format!("summary_{which}"))?;
    let (default_label, side) = match (run, summary) {
        (Some(p), None) => (dir_label(&p), Side::Runs(read_runs(&p)?)),
        (None, Some(v)) => (which.to_ascii_uppercase(), parse_summary(&v)?),
        _ => {
            return Err(CliError::config(format!("give exactly one of `run_{which}` and `summary_{which}`")).into())
        }
    };
    Ok((s.get(&format!("label_{which}"), &default_label)?, side))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::Greater => "greater",
        Verdict::EqualUndetermined => "equal_or_undetermined",
    }
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    let mut s = settings("compare", a, a.common.config.as_deref())?;
    let (la, sa) = side(&mut s, "a")?;
    let (lb, sb) = side(&mut s, "b")?;
    let null: Null = s.get("null", "le")?;
    let alpha: f64 = s.get("alpha", &eval_stats::DEFAULT_ALPHA.to_string())?;
    let out: Option<PathBuf> = s.opt("out")?;
    s.finish()?;
    let r = compare_sides(&la, &sa, &lb, &sb, null, alpha)?;
    for (metric, t) in [("accuracy", &r.accuracy), ("weighted_f1", &r.weighted_f1)] {
        if let Some(t) = t {
            println!("metric={metric} t={:.6} df={:.3} p={:e}{}", t.t, t.df, t.p, if t.degenerate { " degenerate=true" } else { "" });
        }
    }
    println!("a={la} b={lb} verdict={}", verdict_name(r.verdict));
    if let Some(out) = out {
        let run = RunDir::create(&out)?;
        run.write("config.snapshot", s.snapshot())?;
        run.write("comparison.json", serde_json::to_string_pretty(&r)?)?;
    }
    Ok(())
}

fn read_records(dir: &Path) -> Option<Vec<RunRecord>> {
    let text = fs::read_to_string(dir.join("run_record.json")).ok()?;
    serde_json::from_str::<Vec<RunRecord>>(&text)
        .ok()
        .or_else(|| serde_json::from_str::<RunRecord>(&text).ok().map(|r| vec![r]))
}

fn class_names(dir: &Path, seed: u64) -> Vec<String> {
    WeightArchive::read(&dir.join(format!("weights/seed-{seed}.archive")))
        .ok()
        .and_then(|a| a.metadata().get(META_CLASSES).and_then(|c| serde_json::from_str(c).ok()))
        .unwrap_or_default()
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let mut s = settings("report", a, a.common.config.as_deref())?;
    let dirs: Vec<PathBuf> = s.list("run").into_iter().map(PathBuf::from).collect();
    if dirs.is_empty() {
        return Err(CliError::config("missing required setting `run`").into());
    }
    let null: Null = s.get("null", "le")?;
    let alpha: f64 = s.get("alpha", &eval_stats::DEFAULT_ALPHA.to_string())?;
    let out: PathBuf = s.get("out", &dirs[0].display().to_string())?;
    s.finish()?;

    let mut runs = Vec::new();
    for d in &dirs {
        runs.push((dir_label(d), read_runs(d)?));
    }
    let summaries = runs
        .iter()
        .filter(|(_, r)| r.len() >= 2)
        .map(|(l, r)| aggregate(l, r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut comparisons = Vec::new();
    for (la, ra) in runs.iter().filter(|(_, r)| r.len() >= 2) {
        for (lb, rb) in runs.iter().filter(|(_, r)| r.len() >= 2) {
            if la != lb {
                comparisons.push(compare_sides(la, &Side::Runs(ra.clone()), lb, &Side::Runs(rb.clone()), null, alpha)?);
            }
        }
    }
    let phase = read_records(&dirs[0]).and_then(|r| r.into_iter().next()).and_then(|r| r.phases.last().cloned());
    let input = ReportInput {
        summaries,
        comparisons,
        class_names: runs.first().and_then(|(_, r)| r.first()).map_or_else(Vec::new, |m| class_names(&dirs[0], m.seed)),
        runs,
        schedule: phase.as_ref().and_then(|p| p.schedule),
        lr_search: phase.and_then(|p| p.lr_search),
    };
    if input.summaries.is_empty() {
        return Err(CliError::new(ErrorClass::Data, "a report needs at least one run directory with 2 or more runs").into());
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for f in emit_report(&input, &out)? {
        println!("wrote={}", f.display());
    }
    Ok(())
}

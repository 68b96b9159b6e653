//! Training procedures as declarative plans: further self-supervised
//! pre-training, supervised fine-tuning and linear probing.
//!
//! A [`TrainPlan`] is a list of phases. Each phase fixes which parameters
//! are trainable, how the learning rate evolves, the loss and the batch
//! size. Frozen tensors are never touched by the optimiser, and frozen
//! batch-norm layers keep their stored statistics, so a frozen tensor is
//! byte-identical before and after its phase.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{self, to_tensor, AugmentationPolicy, Image, SeedContext};
use crate::datasets::{Dataset, DatasetError};
use crate::exec;
use crate::model_zoo::archive::hex_string;
use crate::model_zoo::{
    attach_head, bottleneck_params, save_archive, ArchiveError, Encoder, EncoderSpec, HeadSpec, Model, ModelError,
    ProjectorSpec, WeightArchive,
};
use crate::nn::{cross_entropy, Mode, Tensor};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, rng_from, stream};
use crate::schedule::{lr_find, LrFindConfig, LrFindResult, LrProbe, ScheduleConfig, ScheduleError, ScheduleState};
use crate::ssl_core::{
    barlow_twins_forward_backward, l21_grad, l21_norm_grouped, EmbeddingBatch, LossConfig, Matrix, SslError,
};

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("supervised training needs at least 2 classes, found {0}")]
    SingleClass(usize),
    #[error("sample {0} has no label")]
    Unlabeled(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("learning-rate search in phase `{0}` found no valley; supply a learning rate")]
    NoValley(String),
    #[error("non-finite loss in phase `{phase}` at epoch {epoch}")]
    Diverged { phase: String, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Data(#[from] DatasetError),
}

/// Random-access images with optional labels.
pub trait ImageSource: Sync {
    fn len(&self) -> usize;
    fn image(&self, i: usize) -> Result<Image, DatasetError>;
    fn label(&self, i: usize) -> Option<usize>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoded images held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemory {
    pub images: Vec<Image>,
    pub labels: Vec<Option<usize>>,
}

impl InMemory {
    pub fn load(d: &Dataset) -> Result<Self, DatasetError> {
        Ok(Self { images: d.load_all()?, labels: d.samples.iter().map(|s| s.label).collect() })
    }

    pub fn labelled(images: Vec<Image>, labels: Vec<usize>) -> Self {
        Self { images, labels: labels.into_iter().map(Some).collect() }
    }
}

impl ImageSource for InMemory {
    fn len(&self) -> usize {
        self.images.len()
    }
    fn image(&self, i: usize) -> Result<Image, DatasetError> {
        Ok(self.images[i].clone())
    }
    fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }
}

impl ImageSource for Dataset {
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn image(&self, i: usize) -> Result<Image, DatasetError> {
        self.load(i)
    }
    fn label(&self, i: usize) -> Option<usize> {
        self.samples[i].label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMode {
    /// Whole encoder trainable.
    Ssl,
    /// Only the encoder's final bottleneck block trainable.
    SslP,
}

impl std::str::FromStr for PretrainMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ssl" => Ok(PretrainMode::Ssl),
            "ssl_p" | "ssl-p" => Ok(PretrainMode::SslP),
            other => Err(format!("unknown pretrain mode `{other}` (expected ssl or ssl_p)")),
        }
    }
}

/// Which parameters a phase may update. Everything else is frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    HeadOnly,
    BottleneckAndHead,
    All,
}

impl FreezePolicy {
    pub fn is_trainable(&self, name: &str, bottleneck: &BTreeSet<String>) -> bool {
        let head = !name.starts_with("encoder.");
        match self {
            FreezePolicy::HeadOnly => head,
            FreezePolicy::BottleneckAndHead => head || bottleneck.contains(name),
            FreezePolicy::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    Fixed { lr: f64, beta1: f64 },
    /// 1cycle with the peak taken from `max_lr` or, when absent, from a
    /// learning-rate search run at the start of the phase. The template's
    /// `max_lr` and `total_steps` are filled in at run time.
    OneCycle { max_lr: Option<f64>, template: ScheduleConfig, search: LrFindConfig },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLoss {
    /// Sparse Barlow Twins loss over two augmented views.
    BarlowTwins { loss: LossConfig, cutout: bool },
    /// Cross-entropy over supervised-policy augmentations.
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub freeze: FreezePolicy,
    pub lr: LrPolicy,
    pub epochs: usize,
    pub loss: PhaseLoss,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub phases: Vec<Phase>,
    pub seed: u64,
    pub adam: AdamConfigRecord,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigRecord {
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfigRecord {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { beta2: a.beta2, eps: a.eps, weight_decay: a.weight_decay }
    }
}

impl From<AdamConfigRecord> for AdamConfig {
    fn from(r: AdamConfigRecord) -> Self {
        AdamConfig { beta2: r.beta2, eps: r.eps, weight_decay: r.weight_decay }
    }
}

impl TrainPlan {
    /// SHA-256 of the plan's canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plan serializes");
        hex_string(&Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub name: String,
    pub epochs: usize,
    /// Peak (1cycle) or constant learning rate actually used.
    pub lr: f64,
    pub lr_search: Option<LrFindResult>,
    /// Resolved 1cycle schedule; `None` for constant-rate phases.
    pub schedule: Option<ScheduleConfig>,
    pub epoch_losses: Vec<f64>,
    /// First and last mini-batch losses of the phase.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    /// Digest of the encoder tensors at the end of the phase.
    pub encoder_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub plan_hash: String,
    /// Hash of the front end's resolved settings, when run through one.
    #[serde(default)]
    pub config_hash: Option<String>,
    pub initial_encoder_digest: String,
    pub phases: Vec<PhaseRecord>,
    pub wall_time_s: f64,
    pub archive_path: Option<PathBuf>,
}

impl RunRecord {
    /// `phase,epoch,loss` rows.
    pub fn losses_csv(&self) -> String {
        let mut s = String::from("phase,epoch,loss\n");
        for p in &self.phases {
            for (e, l) in p.epoch_losses.iter().enumerate() {
                s.push_str(&format!("{},{},{l}\n", p.name, e + 1));
            }
        }
        s
    }

    pub fn final_phase(&self) -> Option<&PhaseRecord> {
        self.phases.last()
    }
}

/// SHA-256 over the encoder's archive bytes.
pub fn encoder_digest(encoder: &Encoder) -> String {
    let bytes = WeightArchive::from_module(&crate::model_zoo::EncoderView(encoder), "digest").to_bytes();
    hex_string(&Sha256::digest(&bytes))
}

/// Save the encoder alone (`encoder.*` tensors).
pub fn save_encoder(encoder: &Encoder, path: &Path, provenance: &str) -> Result<(), ArchiveError> {
    save_archive(&crate::model_zoo::EncoderView(encoder), path, provenance)
}

fn batches(n: usize, batch: usize, order: &[usize]) -> Vec<Vec<usize>> {
    if n <= batch {
        return vec![order.to_vec()];
    }
    // Incomplete trailing batches are dropped.
    order.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

fn epoch_order(n: usize, seed: u64, phase: usize, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(&[seed, stream::SHUFFLE, phase as u64, epoch as u64]));
    order
}

fn fetch(data: &dyn ImageSource, idx: &[usize]) -> Result<Vec<Image>, DatasetError> {
    exec::map_indexed(idx.len(), |i| data.image(idx[i])).into_iter().collect()
}

/// Forward + backward for one mini-batch; gradients are left in the model.
fn batch_gradients(
    model: &mut Model,
    data: &dyn ImageSource,
    idx: &[usize],
    loss: &PhaseLoss,
    seed: u64,
    epoch_key: u64,
) -> Result<f64, ProtocolError> {
    model.zero_grad();
    let images = fetch(data, idx)?;
    let refs: Vec<&Image> = images.iter().collect();
    match *loss {
        PhaseLoss::CrossEntropy => {
            let labels: Vec<usize> =
                idx.iter().map(|&i| data.label(i).ok_or(ProtocolError::Unlabeled(i))).collect::<Result<_, _>>()?;
            let ctx = SeedContext { global_seed: seed, epoch: epoch_key, branch: augment::branch::SUPERVISED };
            let views = augment::augment_batch(&AugmentationPolicy::supervised(), &refs, idx, ctx);
            let logits = model.forward(&to_tensor(&views), Mode::Train);
            let (l, grad) = cross_entropy(&logits, &labels);
            model.backward(&grad);
            Ok(l as f64)
        }
        PhaseLoss::BarlowTwins { loss, cutout } => {
            let t = AugmentationPolicy::twin_branch(false, cutout);
            let tp = AugmentationPolicy::twin_branch(true, cutout);
            let (a, b) = augment::make_view_pair(&refs, idx, &t, &tp, seed, epoch_key);
            let n = idx.len();
            // Both views go through the network as one batch.
            let both: Vec<Image> = a.into_iter().chain(b).collect();
            let z = model.forward(&to_tensor(&both), Mode::Train);
            let d = z.shape[1];
            let to_f64 = |t: &[f32]| t.iter().map(|&v| v as f64).collect::<Vec<_>>();
            let za = EmbeddingBatch::new(Matrix::from_vec(n, d, to_f64(&z.data[..n * d]))?);
            let zb = EmbeddingBatch::new(Matrix::from_vec(n, d, to_f64(&z.data[n * d..]))?);
            let g = barlow_twins_forward_backward(&za, &zb, &loss)?;
            let mut grad = Vec::with_capacity(2 * n * d);
            grad.extend(g.grad_z.as_slice().iter().map(|&v| v as f32));
            grad.extend(g.grad_z_prime.as_slice().iter().map(|&v| v as f32));
            model.backward(&Tensor::new(vec![2 * n, d], grad));

            let proj = model.projector_mut().expect("Barlow Twins phases need a projector head");
            let w = proj.final_weight_mut();
            let wm = Matrix::from_vec(w.shape[0], w.shape[1], to_f64(&w.value))?;
            let penalty = loss.alpha * l21_norm_grouped(&wm, loss.grouping);
            if w.trainable && loss.alpha != 0.0 {
                let dw: Vec<f32> =
                    l21_grad(&wm, loss.grouping).as_slice().iter().map(|&v| (v * loss.alpha) as f32).collect();
                w.accumulate_grad(&dw);
            }
            Ok(g.loss + penalty)
        }
    }
}

struct SearchProbe<'a> {
    model: &'a mut Model,
    adam: Adam,
    data: &'a dyn ImageSource,
    loss: PhaseLoss,
    seed: u64,
    phase: usize,
    batch_size: usize,
    error: Option<ProtocolError>,
}

impl LrProbe for SearchProbe<'_> {
    type Snapshot = (Model, Adam);

    fn snapshot(&self) -> Self::Snapshot {
        (self.model.clone(), self.adam.clone())
    }

    fn restore(&mut self, snapshot: Self::Snapshot) {
        *self.model = snapshot.0;
        self.adam = snapshot.1;
    }

    fn train_step(&mut self, iteration: usize, lr: f64) -> f64 {
        let n = self.data.len();
        let per_epoch = batches(n, self.batch_size, &(0..n).collect::<Vec<_>>()).len();
        let (epoch, b) = (iteration / per_epoch, iteration % per_epoch);
        let order = epoch_order(n, derive_seed(&[self.seed, stream::LR_FIND]), self.phase, epoch);
        let idx = &batches(n, self.batch_size, &order)[b];
        let key = derive_seed(&[stream::LR_FIND, self.phase as u64, iteration as u64]);
        match batch_gradients(self.model, self.data, idx, &self.loss, self.seed, key) {
            Ok(l) => {
                self.adam.step(self.model, lr, 0.9);
                l
            }
            Err(e) => {
                self.error.get_or_insert(e);
                f64::NAN
            }
        }
    }
}

/// Learning-rate search for phase `phase` of `plan`, starting from the
/// model's current state. The phase's freeze policy is applied first; the
/// model's weights are unchanged on return.
pub fn search_lr(
    model: &mut Model,
    data: &dyn ImageSource,
    plan: &TrainPlan,
    phase: usize,
) -> Result<LrFindResult, ProtocolError> {
    if data.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let p = &plan.phases[phase];
    let search = match p.lr {
        LrPolicy::OneCycle { search, .. } => search,
        LrPolicy::Fixed { .. } => LrFindConfig::default(),
    };
    let bottleneck =
        if p.freeze == FreezePolicy::BottleneckAndHead { bottleneck_params(model)? } else { BTreeSet::new() };
    let policy = p.freeze;
    model.set_trainable(&|name| policy.is_trainable(name, &bottleneck));
    let mut probe = SearchProbe {
        model,
        adam: Adam::new(plan.adam.into()),
        data,
        loss: p.loss,
        seed: plan.seed,
        phase,
        batch_size: p.batch_size,
        error: None,
    };
    let r = lr_find(&mut probe, &search)?;
    if let Some(e) = probe.error {
        return Err(e);
    }
    probe.model.zero_grad();
    Ok(r)
}

/// Execute `plan` on `model` in order.
pub fn run_plan(model: &mut Model, data: &dyn ImageSource, plan: &TrainPlan) -> Result<RunRecord, ProtocolError> {
    let started = Instant::now();
    if data.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let bottleneck = if plan.phases.iter().any(|p| p.freeze == FreezePolicy::BottleneckAndHead) {
        bottleneck_params(model)?
    } else {
        BTreeSet::new()
    };
    let initial_encoder_digest = encoder_digest(&model.encoder);
    let mut records = Vec::with_capacity(plan.phases.len());
    for (pi, phase) in plan.phases.iter().enumerate() {
        let policy = phase.freeze;
        model.set_trainable(&|name| policy.is_trainable(name, &bottleneck));
        let n = data.len();
        let steps_per_epoch = batches(n, phase.batch_size, &(0..n).collect::<Vec<_>>()).len();
        let mut adam = Adam::new(plan.adam.into());

        type LrFn = Box<dyn FnMut() -> (f64, f64)>;
        let (mut lr_at, peak, search, schedule): (LrFn, f64, Option<LrFindResult>, Option<ScheduleConfig>) =
            match phase.lr {
                LrPolicy::Fixed { lr, beta1 } => (Box::new(move || (lr, beta1)), lr, None, None),
                LrPolicy::OneCycle { max_lr, template, .. } => {
                    let (peak, result) = match max_lr {
                        Some(lr) => (lr, None),
                        None if phase.epochs == 0 => (template.max_lr, None),
                        None => {
                            let r = search_lr(model, data, plan, pi)?;
                            let lr = r.suggestion.ok_or_else(|| ProtocolError::NoValley(phase.name.clone()))?;
                            (lr, Some(r))
                        }
                    };
                    let cfg = ScheduleConfig {
                        max_lr: peak,
                        total_steps: (phase.epochs * steps_per_epoch).max(2),
                        ..template
                    };
                    let mut state = ScheduleState::new(cfg)?;
                    let next = move || {
                        let v = state.current();
                        state.advance();
                        v
                    };
                    (Box::new(next), peak, result, Some(cfg))
                }
            };

        let mut epoch_losses = Vec::with_capacity(phase.epochs);
        let (mut first, mut last) = (None, None);
        for epoch in 0..phase.epochs {
            let order = epoch_order(n, plan.seed, pi, epoch);
            let mut sum = 0.0;
            let mut count = 0usize;
            for idx in batches(n, phase.batch_size, &order) {
                let key = ((pi as u64) << 32) | epoch as u64;
                let l = batch_gradients(model, data, &idx, &phase.loss, plan.seed, key)?;
                if !l.is_finite() {
                    return Err(ProtocolError::Diverged { phase: phase.name.clone(), epoch: epoch + 1 });
                }
                let (lr, beta1) = lr_at();
                adam.step(model, lr, beta1);
                first.get_or_insert(l);
                last = Some(l);
                sum += l;
                count += 1;
            }
            epoch_losses.push(sum / count as f64);
        }
        model.zero_grad();
        records.push(PhaseRecord {
            name: phase.name.clone(),
            epochs: phase.epochs,
            lr: peak,
            lr_search: search,
            schedule,
            epoch_losses,
            initial_loss: first,
            final_loss: last,
            encoder_digest: encoder_digest(&model.encoder),
        });
    }
    Ok(RunRecord {
        seed: plan.seed,
        plan_hash: plan.hash(),
        config_hash: None,
        initial_encoder_digest,
        phases: records,
        wall_time_s: started.elapsed().as_secs_f64(),
        archive_path: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub mode: PretrainMode,
    pub projector: ProjectorSpec,
    pub loss: LossConfig,
    pub head_epochs: usize,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Skips the learning-rate search when set.
    pub max_lr: Option<f64>,
    pub schedule: ScheduleConfig,
    pub search: LrFindConfig,
    /// Centre cutout in both branches.
    pub cutout: bool,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            mode: PretrainMode::SslP,
            projector: ProjectorSpec::default(),
            loss: LossConfig::default(),
            head_epochs: 1,
            head_lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            max_lr: None,
            schedule: ScheduleConfig::new(1e-3, 1),
            search: LrFindConfig::default(),
            cutout: false,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn plan(&self) -> TrainPlan {
        let loss = PhaseLoss::BarlowTwins { loss: self.loss, cutout: self.cutout };
        let freeze = match self.mode {
            PretrainMode::Ssl => FreezePolicy::All,
            PretrainMode::SslP => FreezePolicy::BottleneckAndHead,
        };
        TrainPlan {
            phases: vec![
                Phase {
                    name: "projector".into(),
                    freeze: FreezePolicy::HeadOnly,
                    lr: LrPolicy::Fixed { lr: self.head_lr, beta1: 0.9 },
                    epochs: self.head_epochs,
                    loss,
                    batch_size: self.batch_size,
                },
                Phase {
                    name: match self.mode {
                        PretrainMode::Ssl => "ssl".into(),
                        PretrainMode::SslP => "ssl_p".into(),
                    },
                    freeze,
                    lr: LrPolicy::OneCycle { max_lr: self.max_lr, template: self.schedule, search: self.search },
                    epochs: self.epochs,
                    loss,
                    batch_size: self.batch_size,
                },
            ],
            seed: self.seed,
            adam: AdamConfigRecord::default(),
        }
    }
}

/// Further self-supervised pre-training of `encoder` on unlabelled images.
/// A fresh projector is trained against the frozen encoder first; then the
/// encoder (or only its final bottleneck block) is unfrozen. The projector
/// is discarded.
pub fn further_pretrain(
    encoder: Encoder,
    encoder_spec: &EncoderSpec,
    data: &dyn ImageSource,
    cfg: &PretrainConfig,
) -> Result<(Encoder, RunRecord), ProtocolError> {
    if data.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    if cfg.mode == PretrainMode::SslP && encoder.tagged_block().is_none() {
        return Err(ModelError::NoTaggedBlock.into());
    }
    let mut model = attach_head(encoder, encoder_spec.clone(), &HeadSpec::Projector(cfg.projector), cfg.seed)?;
    let record = run_plan(&mut model, data, &cfg.plan())?;
    Ok((model.encoder, record))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedConfig {
    pub head_epochs: usize,
    pub head_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: Option<f64>,
    pub schedule: ScheduleConfig,
    pub search: LrFindConfig,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            head_epochs: 1,
            head_lr: 1e-3,
            epochs: 40,
            batch_size: 64,
            max_lr: None,
            schedule: ScheduleConfig::new(1e-3, 1),
            search: LrFindConfig::default(),
            seed: 0,
        }
    }
}

impl SupervisedConfig {
    /// Head warm-up then a 1cycle phase; `probe` keeps the encoder frozen
    /// in both.
    pub fn plan(&self, probe: bool) -> TrainPlan {
        TrainPlan {
            phases: vec![
                Phase {
                    name: "head".into(),
                    freeze: FreezePolicy::HeadOnly,
                    lr: LrPolicy::Fixed { lr: self.head_lr, beta1: 0.9 },
                    epochs: self.head_epochs,
                    loss: PhaseLoss::CrossEntropy,
                    batch_size: self.batch_size,
                },
                Phase {
                    name: if probe { "probe".into() } else { "finetune".into() },
                    freeze: if probe { FreezePolicy::HeadOnly } else { FreezePolicy::All },
                    lr: LrPolicy::OneCycle { max_lr: self.max_lr, template: self.schedule, search: self.search },
                    epochs: self.epochs,
                    loss: PhaseLoss::CrossEntropy,
                    batch_size: self.batch_size,
                },
            ],
            seed: self.seed,
            adam: AdamConfigRecord::default(),
        }
    }
}

fn check_labels(data: &dyn ImageSource, num_classes: usize) -> Result<(), ProtocolError> {
    if data.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let mut seen = BTreeSet::new();
    for i in 0..data.len() {
        let l = data.label(i).ok_or(ProtocolError::Unlabeled(i))?;
        if l >= num_classes {
            return Err(ProtocolError::LabelRange { label: l, classes: num_classes });
        }
        seen.insert(l);
    }
    if seen.len() < 2 {
        return Err(ProtocolError::SingleClass(seen.len()));
    }
    Ok(())
}

fn supervised(
    encoder: Encoder,
    encoder_spec: &EncoderSpec,
    data: &dyn ImageSource,
    num_classes: usize,
    cfg: &SupervisedConfig,
    probe: bool,
) -> Result<(Model, RunRecord), ProtocolError> {
    check_labels(data, num_classes)?;
    let mut model = attach_head(encoder, encoder_spec.clone(), &HeadSpec::Linear { num_classes }, cfg.seed)?;
    let record = run_plan(&mut model, data, &cfg.plan(probe))?;
    Ok((model, record))
}

/// Supervised fine-tuning: head warm-up on the frozen encoder, then the
/// whole network.
pub fn finetune(
    encoder: Encoder,
    encoder_spec: &EncoderSpec,
    data: &dyn ImageSource,
    num_classes: usize,
    cfg: &SupervisedConfig,
) -> Result<(Model, RunRecord), ProtocolError> {
    supervised(encoder, encoder_spec, data, num_classes, cfg, false)
}

/// The fine-tuning procedure with the encoder frozen throughout.
pub fn linear_probe(
    encoder: Encoder,
    encoder_spec: &EncoderSpec,
    data: &dyn ImageSource,
    num_classes: usize,
    cfg: &SupervisedConfig,
) -> Result<(Model, RunRecord), ProtocolError> {
    supervised(encoder, encoder_spec, data, num_classes, cfg, true)
}

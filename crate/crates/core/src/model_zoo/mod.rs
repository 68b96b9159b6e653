//! Model construction: encoders, the Barlow Twins projector, the linear
//! classification head, stable parameter naming and weight archives.

pub mod archive;
pub mod encoder;

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use archive::{load_archive, load_encoder, save_archive, ArchiveError, LoadReport, WeightArchive};
pub use encoder::Encoder;

use crate::nn::{join, relu_backward, relu_inplace, BatchNorm, Linear, Mode, Module, Param, ParamKind, Tensor};
use crate::rng::{rng_from, stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown encoder kind `{0}`")]
    UnknownKind(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("encoder has no tagged bottleneck block")]
    NoTaggedBlock,
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    TinyConv,
    Resnet50Shape,
}

impl std::str::FromStr for EncoderKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny-conv" => Ok(Self::TinyConv),
            "resnet50-shape" | "resnet50" => Ok(Self::Resnet50Shape),
            other => Err(ModelError::UnknownKind(other.to_string())),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TinyConv => "tiny-conv",
            Self::Resnet50Shape => "resnet50-shape",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderInit {
    /// Random initialisation from the given seed.
    Random(u64),
    FromArchive(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    pub output_dim: usize,
    pub init: EncoderInit,
}

impl EncoderSpec {
    pub fn tiny(output_dim: usize, seed: u64) -> Self {
        Self { kind: EncoderKind::TinyConv, output_dim, init: EncoderInit::Random(seed) }
    }

    pub fn resnet50(seed: u64) -> Self {
        Self { kind: EncoderKind::Resnet50Shape, output_dim: 2048, init: EncoderInit::Random(seed) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorSpec {
    pub layers: usize,
    pub width: usize,
}

impl Default for ProjectorSpec {
    fn default() -> Self {
        Self { layers: 3, width: 8192 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadSpec {
    Projector(ProjectorSpec),
    Linear { num_classes: usize },
}

/// `Linear → BN → ReLU` repeated, then a final bias-free `Linear`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub linears: Vec<Linear>,
    pub norms: Vec<BatchNorm>,
    masks: Vec<Vec<bool>>,
}

impl Projector {
    pub fn new<R: Rng>(in_dim: usize, spec: ProjectorSpec, rng: &mut R) -> Self {
        assert!(spec.layers >= 1);
        let mut linears = Vec::new();
        let mut norms = Vec::new();
        let mut d = in_dim;
        for i in 0..spec.layers {
            linears.push(Linear::new(d, spec.width, false, rng));
            if i + 1 < spec.layers {
                norms.push(BatchNorm::new(spec.width));
            }
            d = spec.width;
        }
        Self { linears, norms, masks: Vec::new() }
    }

    /// Weight of the last layer, the operand of the L2,1 penalty.
    pub fn final_weight(&self) -> &Param {
        &self.linears.last().expect("non-empty projector").weight
    }

    pub fn final_weight_mut(&mut self) -> &mut Param {
        &mut self.linears.last_mut().expect("non-empty projector").weight
    }

    pub fn out_dim(&self) -> usize {
        self.linears.last().map_or(0, |l| l.out_features)
    }

    fn forward(&mut self, x: &Tensor, train: bool, cache: bool) -> Tensor {
        self.masks.clear();
        let mut h = x.clone();
        for i in 0..self.linears.len() {
            h = self.linears[i].forward(&h, cache);
            if let Some(bn) = self.norms.get_mut(i) {
                h = bn.forward(&h, train, cache);
                let m = relu_inplace(&mut h);
                if cache {
                    self.masks.push(m);
                }
            }
        }
        h
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let mut g = grad.clone();
        for i in (0..self.linears.len()).rev() {
            if let Some(bn) = self.norms.get_mut(i) {
                relu_backward(&mut g, &self.masks[i]);
                g = bn.backward(&g, true)?;
            }
            let need = i > 0 || need_input_grad;
            match self.linears[i].backward(&g, need) {
                Some(next) => g = next,
                None => return None,
            }
        }
        Some(g)
    }
}

impl Module for Projector {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (i, l) in self.linears.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc{}", i + 1)), f);
            if let Some(bn) = self.norms.get(i) {
                bn.visit(&join(prefix, &format!("bn{}", i + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (i, l) in self.linears.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc{}", i + 1)), f);
            if let Some(bn) = self.norms.get_mut(i) {
                bn.visit_mut(&join(prefix, &format!("bn{}", i + 1)), f);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    Projector(Projector),
    Linear(Linear),
}

impl Head {
    pub fn prefix(&self) -> &'static str {
        match self {
            Head::Projector(_) => "projector",
            Head::Linear(_) => "head",
        }
    }
}

/// An encoder composed with either a projector or a linear classifier.
#[derive(Debug, Clone)]
pub struct Model {
    pub encoder: Encoder,
    pub head: Head,
    pub encoder_spec: EncoderSpec,
    pub head_spec: HeadSpec,
}

impl Model {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let feats = self.encoder.forward(x, mode);
        self.head_forward(&feats, mode)
    }

    pub fn head_forward(&mut self, feats: &Tensor, mode: Mode) -> Tensor {
        let train = mode == Mode::Train;
        let head_trainable = self.head_trainable();
        let encoder_trainable = self.encoder.any_trainable();
        let cache = train && (head_trainable || encoder_trainable);
        match &mut self.head {
            Head::Projector(p) => p.forward(feats, train, cache),
            Head::Linear(l) => l.forward(feats, cache),
        }
    }

    fn head_trainable(&self) -> bool {
        match &self.head {
            Head::Projector(p) => p.any_trainable(),
            Head::Linear(l) => l.any_trainable(),
        }
    }

    /// Back-propagate the gradient of the head output.
    pub fn backward(&mut self, grad: &Tensor) {
        let need = self.encoder.any_trainable();
        let g = match &mut self.head {
            Head::Projector(p) => p.backward(grad, need),
            Head::Linear(l) => l.backward(grad, need),
        };
        if let Some(g) = g {
            self.encoder.backward(&g);
        }
    }

    pub fn projector(&self) -> Option<&Projector> {
        match &self.head {
            Head::Projector(p) => Some(p),
            Head::Linear(_) => None,
        }
    }

    pub fn projector_mut(&mut self) -> Option<&mut Projector> {
        match &mut self.head {
            Head::Projector(p) => Some(p),
            Head::Linear(_) => None,
        }
    }

    /// Mark every weight tensor whose full name satisfies `pred` as trainable
    /// and every other weight as frozen. Buffers are never trainable.
    pub fn set_trainable(&mut self, pred: &dyn Fn(&str) -> bool) {
        self.visit_mut("", &mut |name, p| {
            p.trainable = p.kind == ParamKind::Weight && pred(&name);
        });
    }

    pub fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }

    /// Names of optimised tensors (no buffers), in visiting order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, p| {
            if p.kind == ParamKind::Weight {
                names.push(n);
            }
        });
        names
    }

    /// Every tensor, buffers included.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |n, _| names.push(n));
        names
    }

    pub fn encoder_view(&self) -> EncoderView<'_> {
        EncoderView(&self.encoder)
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        let hp = join(prefix, self.head.prefix());
        match &self.head {
            Head::Projector(p) => p.visit(&hp, f),
            Head::Linear(l) => l.visit(&hp, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        let hp = join(prefix, self.head.prefix());
        match &mut self.head {
            Head::Projector(p) => p.visit_mut(&hp, f),
            Head::Linear(l) => l.visit_mut(&hp, f),
        }
    }
}

/// The encoder alone, named under the `encoder.` prefix, for archiving.
pub struct EncoderView<'a>(pub &'a Encoder);

impl Module for EncoderView<'_> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.0.visit(&join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, _prefix: &str, _f: &mut dyn FnMut(String, &mut Param)) {
        unreachable!("encoder views are read-only")
    }
}

/// Build `head ∘ encoder`. The encoder comes from `enc.init`; the head is
/// always freshly initialised from `head_seed`.
pub fn build_model(enc: &EncoderSpec, head: &HeadSpec, head_seed: u64) -> Result<Model, ModelError> {
    let encoder = build_encoder(enc)?;
    let mut model = attach_head(encoder, enc.clone(), head, head_seed)?;
    if let EncoderInit::FromArchive(path) = &enc.init {
        load_encoder(path, &mut model)?;
    }
    Ok(model)
}

/// Compose an existing encoder with a freshly initialised head.
pub fn attach_head(
    encoder: Encoder,
    encoder_spec: EncoderSpec,
    head: &HeadSpec,
    head_seed: u64,
) -> Result<Model, ModelError> {
    let d = encoder.out_dim();
    let head_module = match *head {
        HeadSpec::Projector(spec) => {
            if spec.layers == 0 || spec.width == 0 {
                return Err(ModelError::InvalidSpec("projector needs layers and width".into()));
            }
            let mut rng = rng_from(&[head_seed, stream::PROJECTOR_INIT]);
            Head::Projector(Projector::new(d, spec, &mut rng))
        }
        HeadSpec::Linear { num_classes } => {
            if num_classes < 2 {
                return Err(ModelError::InvalidSpec("linear head needs at least 2 classes".into()));
            }
            let mut rng = rng_from(&[head_seed, stream::HEAD_INIT]);
            Head::Linear(Linear::new(d, num_classes, true, &mut rng))
        }
    };
    Ok(Model { encoder, head: head_module, encoder_spec, head_spec: *head })
}

pub fn build_encoder(spec: &EncoderSpec) -> Result<Encoder, ModelError> {
    let seed = match spec.init {
        EncoderInit::Random(s) => s,
        EncoderInit::FromArchive(_) => 0,
    };
    let mut rng = rng_from(&[seed, stream::ENCODER_INIT]);
    match spec.kind {
        EncoderKind::TinyConv => {
            if spec.output_dim < 8 || spec.output_dim % 4 != 0 {
                return Err(ModelError::InvalidSpec(format!(
                    "tiny-conv output_dim {} must be a multiple of 4 and >= 8",
                    spec.output_dim
                )));
            }
            Ok(Encoder::tiny_conv(spec.output_dim, &mut rng))
        }
        EncoderKind::Resnet50Shape => {
            if spec.output_dim != 2048 {
                return Err(ModelError::InvalidSpec("resnet50-shape output_dim is 2048".into()));
            }
            Ok(Encoder::resnet50(&mut rng))
        }
    }
}

/// Parameter names of the encoder's final bottleneck block.
pub fn bottleneck_params(model: &Model) -> Result<BTreeSet<String>, ModelError> {
    let block = model.encoder.tagged_block().ok_or(ModelError::NoTaggedBlock)?;
    let prefix = format!("encoder.{block}.");
    Ok(model.parameter_names().into_iter().filter(|n| n.starts_with(&prefix)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resnet50_linear_head_shape() {
        let m = build_model(&EncoderSpec::resnet50(0), &HeadSpec::Linear { num_classes: 8 }, 1).unwrap();
        match &m.head {
            Head::Linear(l) => assert_eq!(l.weight.shape, vec![8, 2048]),
            _ => unreachable!(),
        }
        let b = bottleneck_params(&m).unwrap();
        assert!(b.contains("encoder.layer4.2.conv1.weight"));
        assert!(b.contains("encoder.layer4.2.conv2.weight"));
        assert!(b.contains("encoder.layer4.2.conv3.weight"));
        assert!(b.contains("encoder.layer4.2.bn3.bias"));
        assert_eq!(b.len(), 9);
        assert!(b.iter().all(|n| !n.starts_with("head")));
    }

    #[test]
    fn tiny_projector_output_dim() {
        let spec = HeadSpec::Projector(ProjectorSpec { layers: 3, width: 32 });
        let mut m = build_model(&EncoderSpec::tiny(64, 0), &spec, 0).unwrap();
        let x = Tensor::zeros(vec![2, 3, 8, 8]);
        assert_eq!(m.forward(&x, Mode::Eval).shape, vec![2, 32]);
        assert_eq!(m.projector().unwrap().out_dim(), 32);
        assert_eq!(m.projector().unwrap().final_weight().shape, vec![32, 32]);
    }

    #[test]
    fn seeds_change_only_the_head() {
        let enc = EncoderSpec::tiny(16, 3);
        let head = HeadSpec::Linear { num_classes: 4 };
        let a = build_model(&enc, &head, 1).unwrap();
        let b = build_model(&enc, &head, 2).unwrap();
        let wa = WeightArchive::from_module(&a, "t");
        let wb = WeightArchive::from_module(&b, "t");
        for name in a.tensor_names() {
            let same = wa.tensor(&name).unwrap().1 == wb.tensor(&name).unwrap().1;
            assert_eq!(same, name.starts_with("encoder."), "{name}");
        }
        assert_eq!(a.tensor_names(), b.tensor_names());
    }

    #[test]
    fn partition_of_parameters() {
        let m = build_model(&EncoderSpec::tiny(16, 0), &HeadSpec::Linear { num_classes: 3 }, 0).unwrap();
        let bottleneck = bottleneck_params(&m).unwrap();
        let all: BTreeSet<String> = m.parameter_names().into_iter().collect();
        let head: BTreeSet<String> = all.iter().filter(|n| n.starts_with("head.")).cloned().collect();
        let rest: BTreeSet<String> =
            all.iter().filter(|n| !bottleneck.contains(*n) && !head.contains(*n)).cloned().collect();
        assert!(bottleneck.is_disjoint(&head) && bottleneck.is_disjoint(&rest) && head.is_disjoint(&rest));
        assert_eq!(bottleneck.len() + head.len() + rest.len(), all.len());
        assert!(rest.iter().all(|n| n.starts_with("encoder.stage") && !n.starts_with("encoder.stage4")));
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!("vit-b".parse::<EncoderKind>(), Err(ModelError::UnknownKind(_))));
    }
}

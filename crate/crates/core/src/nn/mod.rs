//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Tensors are dense `f32` in NCHW (or `[n, features]`) layout. Each layer
//! caches what its backward pass needs during a training forward pass; the
//! caller decides whether caching is required so frozen prefixes of a network
//! run as cheap feature extractors.

mod gemm;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

pub use conv::Conv2d;
pub use gemm::sgemm;
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{global_avg_pool, global_avg_pool_backward, MaxPool2d};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Samples processed together when accumulating weight gradients.
/// Fixed so that summation order never depends on thread count.
pub(crate) const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let l = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * l..end * l].to_vec())
    }

    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        let mut shape = parts[0].shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            assert_eq!(p.shape[1..], shape[1..]);
            data.extend_from_slice(&p.data);
        }
        Tensor::new(shape, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimised tensor.
    Weight,
    /// Persistent state that is not optimised (batch-norm running statistics).
    Buffer,
}

/// A named model tensor plus its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    /// Empty until the first backward pass that touches this parameter.
    pub grad: Vec<f32>,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl Param {
    pub fn weight(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self { shape, value, grad: Vec::new(), trainable: true, kind: ParamKind::Weight }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self { shape, value, grad: Vec::new(), trainable: false, kind: ParamKind::Buffer }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::weight(shape, vec![v; n])
    }

    pub fn kaiming_normal<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let v = (0..n).map(|_| dist.sample(rng) as f32).collect();
        Self::weight(shape, v)
    }

    pub fn uniform<R: Rng>(shape: Vec<usize>, bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let v = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::weight(shape, v)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut Vec<f32> {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn accumulate_grad(&mut self, g: &[f32]) {
        let grad = self.grad_mut();
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Trainable and optimised (buffers are never trainable).
    pub fn is_trainable_weight(&self) -> bool {
        self.trainable && self.kind == ParamKind::Weight
    }
}

/// Whether a forward pass is part of training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything that owns named parameters.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param));

    fn any_trainable(&self) -> bool {
        let mut any = false;
        self.visit("", &mut |_, p| any |= p.is_trainable_weight());
        any
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// In-place ReLU; returns the mask needed for the backward pass.
pub fn relu_inplace(t: &mut Tensor) -> Vec<bool> {
    t.data
        .iter_mut()
        .map(|v| {
            let on = *v > 0.0;
            if !on {
                *v = 0.0;
            }
            on
        })
        .collect()
}

pub fn relu_backward(grad: &mut Tensor, mask: &[bool]) {
    for (g, &m) in grad.data.iter_mut().zip(mask) {
        if !m {
            *g = 0.0;
        }
    }
}

/// Row-wise softmax of `[n, k]` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let k = logits.item_len();
    let mut out = logits.clone();
    for row in out.data.chunks_mut(k) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    let n = logits.batch();
    let k = logits.item_len();
    assert_eq!(labels.len(), n);
    let mut grad = softmax(logits);
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &mut grad.data[i * k..(i + 1) * k];
        loss -= (row[y].max(1e-30) as f64).ln();
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f32;
        }
    }
    ((loss / n as f64) as f32, grad)
}

use rand::Rng;

use super::{sgemm, Module, Param, Tensor};

/// Fully connected layer, `y = x Wᵀ + b` with `W` stored `out×in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Tensor>,
}

impl Linear {
    /// Uniform initialisation in `±1/sqrt(in_features)` for weight and bias.
    pub fn new<R: Rng>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        let weight = Param::uniform(vec![out_features, in_features], bound, rng);
        let bias = bias.then(|| Param::uniform(vec![out_features], bound, rng));
        Self { weight, bias, in_features, out_features, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let n = x.batch();
        assert_eq!(x.item_len(), self.in_features, "linear input width");
        let (i, o) = (self.in_features, self.out_features);
        let mut out = vec![0.0f32; n * o];
        if let Some(b) = &self.bias {
            for row in out.chunks_mut(o) {
                row.copy_from_slice(&b.value);
            }
        }
        // x (n×i) · Wᵀ (i×o)
        sgemm(n, i, o, &x.data, i, 1, &self.weight.value, 1, i, 1.0, &mut out);
        self.cache = cache.then(|| x.clone());
        Tensor::new(vec![n, o], out)
    }

    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("linear backward without cached forward");
        let n = x.batch();
        let (i, o) = (self.in_features, self.out_features);
        let g = &grad_out.data;
        if self.weight.trainable {
            // dW = dYᵀ (o×n) · X (n×i)
            let dw = self.weight.grad_mut();
            sgemm(o, n, i, g, 1, o, &x.data, i, 1, 1.0, dw);
        }
        if let Some(b) = self.bias.as_mut().filter(|b| b.trainable) {
            let mut db = vec![0.0f32; o];
            for row in g.chunks(o) {
                for (d, v) in db.iter_mut().zip(row) {
                    *d += v;
                }
            }
            b.accumulate_grad(&db);
        }
        need_input_grad.then(|| {
            let mut dx = vec![0.0f32; n * i];
            sgemm(n, o, i, g, o, 1, &self.weight.value, i, 1, 0.0, &mut dx);
            Tensor::new(x.shape.clone(), dx)
        })
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(super::join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(super::join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(super::join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(super::join(prefix, "bias"), b);
        }
    }
}

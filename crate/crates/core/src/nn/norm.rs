use super::{Module, Param, Tensor};
use crate::exec;

/// Batch normalisation over every axis except the channel axis (axis 1).
/// Works for `[n, c]` and `[n, c, h, w]` inputs.
///
/// A layer normalises with batch statistics (and updates its running
/// statistics) only when the forward pass is a training pass *and* its affine
/// weight is trainable; frozen layers always use the stored statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    channels: usize,
    cache: Option<NormCache>,
}

#[derive(Debug, Clone)]
struct NormCache {
    shape: Vec<usize>,
    /// Present in batch-statistics mode.
    xhat: Option<Vec<f32>>,
    inv_std: Vec<f32>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            weight: Param::filled(vec![channels], 1.0),
            bias: Param::filled(vec![channels], 0.0),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            eps: 1e-5,
            momentum: 0.1,
            channels,
            cache: None,
        }
    }

    pub fn uses_batch_stats(&self, train: bool) -> bool {
        train && (self.weight.trainable || self.bias.trainable)
    }

    pub fn forward(&mut self, x: &Tensor, train: bool, cache: bool) -> Tensor {
        let n = x.batch();
        let c = self.channels;
        assert_eq!(x.shape[1], c, "batch-norm channel count");
        let spatial: usize = x.shape[2..].iter().product();
        let per_item = c * spatial;
        let batch_stats = self.uses_batch_stats(train);

        let (mean, inv_std): (Vec<f32>, Vec<f32>) = if batch_stats {
            let count = (n * spatial) as f64;
            let stats: Vec<(f64, f64)> = exec::map_indexed(c, |ch| {
                let mut sum = 0.0f64;
                for i in 0..n {
                    let s = &x.data[i * per_item + ch * spatial..i * per_item + (ch + 1) * spatial];
                    sum += s.iter().map(|&v| v as f64).sum::<f64>();
                }
                let mean = sum / count;
                let mut sq = 0.0f64;
                for i in 0..n {
                    let s = &x.data[i * per_item + ch * spatial..i * per_item + (ch + 1) * spatial];
                    sq += s.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>();
                }
                (mean, sq / count)
            });
            let m = self.momentum;
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            for (ch, &(mu, var)) in stats.iter().enumerate() {
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - m) * *rm + m * mu as f32;
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - m) * *rv + m * (var * unbias) as f32;
            }
            stats
                .iter()
                .map(|&(mu, var)| (mu as f32, (1.0 / (var + self.eps as f64).sqrt()) as f32))
                .unzip()
        } else {
            (
                self.running_mean.value.clone(),
                self.running_var.value.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect(),
            )
        };

        let mut out = x.clone();
        let mut xhat = if batch_stats && cache { Some(vec![0.0f32; x.len()]) } else { None };
        for i in 0..n {
            for ch in 0..c {
                let off = i * per_item + ch * spatial;
                let (w, b) = (self.weight.value[ch], self.bias.value[ch]);
                for j in off..off + spatial {
                    let h = (x.data[j] - mean[ch]) * inv_std[ch];
                    if let Some(xh) = xhat.as_mut() {
                        xh[j] = h;
                    }
                    out.data[j] = h * w + b;
                }
            }
        }
        self.cache = cache.then(|| NormCache { shape: x.shape.clone(), xhat, inv_std });
        out
    }

    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let cache = self.cache.take().expect("batch-norm backward without cached forward");
        let n = cache.shape[0];
        let c = self.channels;
        let spatial: usize = cache.shape[2..].iter().product();
        let per_item = c * spatial;
        let count = (n * spatial) as f32;
        let g = &grad_out.data;

        let Some(xhat) = cache.xhat else {
            // Stored-statistics mode: an affine map per channel. Only frozen
            // layers run this way during training.
            debug_assert!(!self.uses_batch_stats(true));
            if !need_input_grad {
                return None;
            }
            let mut dx = grad_out.clone();
            for i in 0..n {
                for ch in 0..c {
                    let s = self.weight.value[ch] * cache.inv_std[ch];
                    let off = i * per_item + ch * spatial;
                    dx.data[off..off + spatial].iter_mut().for_each(|v| *v *= s);
                }
            }
            return Some(dx);
        };

        let sums: Vec<(f32, f32)> = exec::map_indexed(c, |ch| {
            let mut sg = 0.0f64;
            let mut sgx = 0.0f64;
            for i in 0..n {
                let off = i * per_item + ch * spatial;
                for j in off..off + spatial {
                    sg += g[j] as f64;
                    sgx += (g[j] * xhat[j]) as f64;
                }
            }
            (sg as f32, sgx as f32)
        });
        if self.weight.trainable {
            let dw: Vec<f32> = sums.iter().map(|s| s.1).collect();
            self.weight.accumulate_grad(&dw);
        }
        if self.bias.trainable {
            let db: Vec<f32> = sums.iter().map(|s| s.0).collect();
            self.bias.accumulate_grad(&db);
        }
        if !need_input_grad {
            return None;
        }
        let mut dx = vec![0.0f32; g.len()];
        for i in 0..n {
            for ch in 0..c {
                let (sg, sgx) = sums[ch];
                let k = self.weight.value[ch] * cache.inv_std[ch] / count;
                let off = i * per_item + ch * spatial;
                for j in off..off + spatial {
                    dx[j] = k * (count * g[j] - sg - xhat[j] * sgx);
                }
            }
        }
        Some(Tensor::new(cache.shape, dx))
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(super::join(prefix, "weight"), &self.weight);
        f(super::join(prefix, "bias"), &self.bias);
        f(super::join(prefix, "running_mean"), &self.running_mean);
        f(super::join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(super::join(prefix, "weight"), &mut self.weight);
        f(super::join(prefix, "bias"), &mut self.bias);
        f(super::join(prefix, "running_mean"), &mut self.running_mean);
        f(super::join(prefix, "running_var"), &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, seed: u32) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) % 1000) as f32) / 500.0 - 1.0)
            .collect();
        Tensor::new(shape, data)
    }

    #[test]
    fn batch_mode_normalises_channels() {
        let mut bn = BatchNorm::new(3);
        let x = tensor(vec![4, 3, 2, 2], 7);
        let y = bn.forward(&x, true, false);
        for ch in 0..3 {
            let vals: Vec<f32> =
                (0..4).flat_map(|i| y.data[i * 12 + ch * 4..i * 12 + ch * 4 + 4].to_vec()).collect();
            let mean: f32 = vals.iter().sum::<f32>() / 16.0;
            let var: f32 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 16.0;
            assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-3);
        }
        assert!(bn.running_mean.value.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn frozen_layer_keeps_statistics() {
        let mut bn = BatchNorm::new(2);
        bn.weight.trainable = false;
        bn.bias.trainable = false;
        let before = bn.running_mean.value.clone();
        bn.forward(&tensor(vec![3, 2, 2, 2], 1), true, false);
        assert_eq!(before, bn.running_mean.value);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = tensor(vec![5, 3], 3);
        let r = tensor(vec![5, 3], 11);
        let mut bn = BatchNorm::new(3);
        bn.weight.value = vec![0.5, 1.5, -1.0];
        bn.bias.value = vec![0.1, 0.0, 0.3];
        let f = |bn: &mut BatchNorm, x: &Tensor| -> f64 {
            let saved = (bn.running_mean.value.clone(), bn.running_var.value.clone());
            let y = bn.forward(x, true, false);
            bn.running_mean.value = saved.0;
            bn.running_var.value = saved.1;
            y.data.iter().zip(&r.data).map(|(a, b)| (a * b) as f64).sum()
        };
        bn.forward(&x, true, true);
        let dx = bn.backward(&r, true).unwrap();
        let h = 1e-2;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (f(&mut bn, &xp) - f(&mut bn, &xm)) / (2.0 * h as f64);
            assert!((fd - dx.data[idx] as f64).abs() < 2e-3, "{idx}: {fd} vs {}", dx.data[idx]);
        }
        for ch in 0..3 {
            let orig = bn.weight.value[ch];
            bn.weight.value[ch] = orig + h;
            let fp = f(&mut bn, &x);
            bn.weight.value[ch] = orig - h;
            let fm = f(&mut bn, &x);
            bn.weight.value[ch] = orig;
            assert!(((fp - fm) / (2.0 * h as f64) - bn.weight.grad[ch] as f64).abs() < 2e-3);
        }
    }
}

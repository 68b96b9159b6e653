use rand::Rng;

use super::{sgemm, Module, Param, Tensor, GRAD_CHUNK};
use crate::exec;

/// 2-D convolution without bias (every convolution in the encoders is
/// followed by batch normalisation).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f32], g: &Geometry, col: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], g: &Geometry, dx: &mut [f32]) {
    let cols = g.col_cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

impl Conv2d {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            weight: Param::kaiming_normal(
                vec![out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Geometry {
        assert_eq!(x.shape.len(), 4, "conv input must be NCHW");
        assert_eq!(x.shape[1], self.in_channels, "conv input channels");
        let (h, w) = (x.shape[2], x.shape[3]);
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        Geometry { c: self.in_channels, h, w, k: self.kernel, stride: self.stride, pad: self.padding, ho, wo }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let g = self.geometry(x);
        let n = x.batch();
        let co = self.out_channels;
        let weight = &self.weight.value;
        let outs: Vec<Vec<f32>> = exec::map_indexed(n, |i| {
            let xi = x.item(i);
            let mut out = vec![0.0f32; co * g.col_cols()];
            if g.is_pointwise() {
                sgemm(co, g.c, g.col_cols(), weight, g.c, 1, xi, g.col_cols(), 1, 0.0, &mut out);
            } else {
                let mut col = vec![0.0f32; g.col_rows() * g.col_cols()];
                im2col(xi, &g, &mut col);
                sgemm(co, g.col_rows(), g.col_cols(), weight, g.col_rows(), 1, &col, g.col_cols(), 1, 0.0, &mut out);
            }
            out
        });
        self.cache = cache.then(|| x.clone());
        Tensor::new(vec![n, co, g.ho, g.wo], outs.concat())
    }

    /// Accumulates the weight gradient when trainable; returns the input
    /// gradient only when requested.
    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without cached forward");
        let g = self.geometry(&x);
        let n = x.batch();
        let co = self.out_channels;
        let want_w = self.weight.trainable;
        if !want_w && !need_input_grad {
            return None;
        }
        let weight = &self.weight.value;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let chunks = n.div_ceil(GRAD_CHUNK);
        let parts: Vec<(Vec<f32>, Vec<f32>)> = exec::map_indexed(chunks, |ci| {
            let start = ci * GRAD_CHUNK;
            let end = (start + GRAD_CHUNK).min(n);
            let mut dw = if want_w { vec![0.0f32; co * rows] } else { Vec::new() };
            let mut dx = if need_input_grad { vec![0.0f32; (end - start) * x.item_len()] } else { Vec::new() };
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * cols] };
            let mut dcol = if need_input_grad && !g.is_pointwise() { vec![0.0f32; rows * cols] } else { Vec::new() };
            for i in start..end {
                let xi = x.item(i);
                let go = grad_out.item(i);
                let colref: &[f32] = if g.is_pointwise() {
                    xi
                } else {
                    im2col(xi, &g, &mut col);
                    &col
                };
                if want_w {
                    // dW += dOut · colᵀ
                    sgemm(co, cols, rows, go, cols, 1, colref, 1, cols, 1.0, &mut dw);
                }
                if need_input_grad {
                    let dxi = &mut dx[(i - start) * x.item_len()..(i - start + 1) * x.item_len()];
                    if g.is_pointwise() {
                        // dX = Wᵀ · dOut
                        sgemm(rows, co, cols, weight, 1, rows, go, cols, 1, 0.0, dxi);
                    } else {
                        sgemm(rows, co, cols, weight, 1, rows, go, cols, 1, 0.0, &mut dcol);
                        col2im(&dcol, &g, dxi);
                    }
                }
            }
            (dw, dx)
        });
        let mut dx_all = Vec::with_capacity(if need_input_grad { x.len() } else { 0 });
        for (dw, dx) in parts {
            if want_w {
                self.weight.accumulate_grad(&dw);
            }
            dx_all.extend(dx);
        }
        need_input_grad.then(|| Tensor::new(x.shape.clone(), dx_all))
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        f(super::join(prefix, "weight"), &self.weight);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        f(super::join(prefix, "weight"), &mut self.weight);
    }
}

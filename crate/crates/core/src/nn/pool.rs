use super::Tensor;

/// `[n, c, h, w]` → `[n, c]` by spatial averaging.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c) = (x.shape[0], x.shape[1]);
    let s: usize = x.shape[2..].iter().product();
    let data = x.data.chunks(s).map(|p| p.iter().sum::<f32>() / s as f32).collect();
    Tensor::new(vec![n, c], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, input_shape: &[usize]) -> Tensor {
    let s: usize = input_shape[2..].iter().product();
    let mut data = Vec::with_capacity(grad.len() * s);
    for &g in &grad.data {
        data.extend(std::iter::repeat_n(g / s as f32, s));
    }
    Tensor::new(input_shape.to_vec(), data)
}

/// Max pooling with square window; padding positions never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self { kernel, stride, padding, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, cache: bool) -> Tensor {
        let (n, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = vec![f32::NEG_INFINITY; n * c * ho * wo];
        let mut arg = vec![0usize; out.len()];
        for p in 0..n * c {
            let plane = &x.data[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (p * ho + oy) * wo + ox;
                    for ky in 0..self.kernel {
                        for kx in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > out[o] {
                                out[o] = plane[idx];
                                arg[o] = p * h * w + idx;
                            }
                        }
                    }
                }
            }
        }
        self.cache = cache.then(|| (x.shape.clone(), arg));
        Tensor::new(vec![n, c, ho, wo], out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (shape, arg) = self.cache.take().expect("max-pool backward without cached forward");
        let mut dx = Tensor::zeros(shape);
        for (&g, &a) in grad.data.iter().zip(&arg) {
            dx.data[a] += g;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn avg_pool_round_trip_shapes() {
        let x = Tensor::new(vec![1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 8.0]);
        let y = global_avg_pool(&x);
        assert_eq!(y.data, vec![2.5, 2.0]);
        let g = global_avg_pool_backward(&Tensor::new(vec![1, 2], vec![4.0, 8.0]), &x.shape);
        assert_eq!(g.data, vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let mut mp = MaxPool2d::new(3, 2, 1);
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32).collect());
        let y = mp.forward(&x, true);
        assert_eq!(y.shape, vec![1, 1, 2, 2]);
        assert_eq!(y.data, vec![5.0, 7.0, 13.0, 15.0]);
        let dx = mp.backward(&Tensor::new(vec![1, 1, 2, 2], vec![1.0; 4]));
        assert_eq!(dx.data[5] + dx.data[7] + dx.data[13] + dx.data[15], 4.0);
    }
}

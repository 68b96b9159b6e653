//! Convolutional encoders: a small four-stage network for desk-scale runs
//! and the ResNet-50 layout (torchvision parameter names) for ingesting
//! converted pretrained weights.

use rand::Rng;

use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu_backward, relu_inplace, BatchNorm,
    Conv2d, MaxPool2d, Mode, Module, Param, Tensor,
};

fn trainable_flags(m: &dyn Module) -> bool {
    m.any_trainable()
}

/// Layer `i` of a chain needs its input gradient when anything upstream of
/// it is trainable.
fn chain_needs(trainable: &[bool], need_input_grad: bool) -> Vec<bool> {
    let mut out = Vec::with_capacity(trainable.len());
    let mut upstream = need_input_grad;
    for &t in trainable {
        out.push(upstream);
        upstream |= t;
    }
    out
}

/// Convolution → batch norm → optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    conv_name: &'static str,
    bn_name: &'static str,
    relu: bool,
    mask: Option<Vec<bool>>,
}

impl ConvBnRelu {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        names: (&'static str, &'static str),
        relu: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, k, stride, pad, rng),
            bn: BatchNorm::new(cout),
            conv_name: names.0,
            bn_name: names.1,
            relu,
            mask: None,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool, cache: bool) -> Tensor {
        let h = self.conv.forward(x, cache);
        let mut h = self.bn.forward(&h, train, cache);
        if self.relu {
            let m = relu_inplace(&mut h);
            self.mask = cache.then_some(m);
        }
        h
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let mut g = grad.clone();
        if self.relu {
            relu_backward(&mut g, self.mask.as_ref().expect("cached relu mask"));
        }
        let needs = chain_needs(&[self.conv.any_trainable(), self.bn.any_trainable()], need_input_grad);
        let g = self.bn.backward(&g, needs[1])?;
        self.conv.backward(&g, needs[0])
    }
}

impl Module for ConvBnRelu {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv.visit(&join(prefix, self.conv_name), f);
        self.bn.visit(&join(prefix, self.bn_name), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv.visit_mut(&join(prefix, self.conv_name), f);
        self.bn.visit_mut(&join(prefix, self.bn_name), f);
    }
}

/// `1×1 → 3×3 → 1×1` residual block with an optional projection shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub conv3: Conv2d,
    pub bn3: BatchNorm,
    pub downsample: Option<(Conv2d, BatchNorm)>,
    masks: Option<[Vec<bool>; 3]>,
}

impl Bottleneck {
    pub fn new<R: Rng>(cin: usize, mid: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let downsample = (stride != 1 || cin != cout)
            .then(|| (Conv2d::new(cin, cout, 1, stride, 0, rng), BatchNorm::new(cout)));
        Self {
            conv1: Conv2d::new(cin, mid, 1, 1, 0, rng),
            bn1: BatchNorm::new(mid),
            conv2: Conv2d::new(mid, mid, 3, stride, 1, rng),
            bn2: BatchNorm::new(mid),
            conv3: Conv2d::new(mid, cout, 1, 1, 0, rng),
            bn3: BatchNorm::new(cout),
            downsample,
            masks: None,
        }
    }

    fn forward(&mut self, x: &Tensor, train: bool, cache: bool) -> Tensor {
        let h = self.conv1.forward(x, cache);
        let mut h = self.bn1.forward(&h, train, cache);
        let m1 = relu_inplace(&mut h);
        let h = self.conv2.forward(&h, cache);
        let mut h = self.bn2.forward(&h, train, cache);
        let m2 = relu_inplace(&mut h);
        let h = self.conv3.forward(&h, cache);
        let mut out = self.bn3.forward(&h, train, cache);
        match &mut self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(x, cache);
                let s = bn.forward(&s, train, cache);
                out.data.iter_mut().zip(&s.data).for_each(|(o, v)| *o += v);
            }
            None => out.data.iter_mut().zip(&x.data).for_each(|(o, v)| *o += v),
        }
        let m3 = relu_inplace(&mut out);
        self.masks = cache.then_some([m1, m2, m3]);
        out
    }

    fn backward(&mut self, grad: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let [m1, m2, m3] = self.masks.take().expect("bottleneck backward without cached forward");
        let mut g = grad.clone();
        relu_backward(&mut g, &m3);

        let tr = [
            self.conv1.any_trainable(),
            self.bn1.any_trainable(),
            self.conv2.any_trainable(),
            self.bn2.any_trainable(),
            self.conv3.any_trainable(),
            self.bn3.any_trainable(),
        ];
        let needs = chain_needs(&tr, need_input_grad);
        let main_needed = need_input_grad || tr.iter().any(|&t| t);
        let mut dx: Option<Tensor> = None;
        if main_needed {
            let h = self.bn3.backward(&g, needs[5]);
            let h = h.and_then(|h| self.conv3.backward(&h, needs[4]));
            let h = h.map(|mut h| {
                relu_backward(&mut h, &m2);
                h
            });
            let h = h.and_then(|h| self.bn2.backward(&h, needs[3]));
            let h = h.and_then(|h| self.conv2.backward(&h, needs[2]));
            let h = h.map(|mut h| {
                relu_backward(&mut h, &m1);
                h
            });
            let h = h.and_then(|h| self.bn1.backward(&h, needs[1]));
            dx = h.and_then(|h| self.conv1.backward(&h, needs[0]));
        }
        let short = match &mut self.downsample {
            Some((conv, bn)) => {
                let n2 = chain_needs(&[conv.any_trainable(), bn.any_trainable()], need_input_grad);
                if need_input_grad || conv.any_trainable() || bn.any_trainable() {
                    bn.backward(&g, n2[1]).and_then(|h| conv.backward(&h, n2[0]))
                } else {
                    None
                }
            }
            None => need_input_grad.then_some(g),
        };
        if !need_input_grad {
            return None;
        }
        match (dx, short) {
            (Some(mut a), Some(b)) => {
                a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
                Some(a)
            }
            (a, b) => a.or(b),
        }
    }
}

impl Module for Bottleneck {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        self.conv3.visit(&join(prefix, "conv3"), f);
        self.bn3.visit(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &self.downsample {
            c.visit(&join(prefix, "downsample.0"), f);
            b.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        self.conv3.visit_mut(&join(prefix, "conv3"), f);
        self.bn3.visit_mut(&join(prefix, "bn3"), f);
        if let Some((c, b)) = &mut self.downsample {
            c.visit_mut(&join(prefix, "downsample.0"), f);
            b.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Conv(ConvBnRelu),
    MaxPool(MaxPool2d),
    Bottleneck(Box<Bottleneck>),
}

impl Block {
    fn forward(&mut self, x: &Tensor, train: bool, cache: bool) -> Tensor {
        match self {
            Block::Conv(b) => b.forward(x, train, cache),
            Block::MaxPool(p) => p.forward(x, cache),
            Block::Bottleneck(b) => b.forward(x, train, cache),
        }
    }

    fn backward(&mut self, g: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        match self {
            Block::Conv(b) => b.backward(g, need_input_grad),
            Block::MaxPool(p) => need_input_grad.then(|| p.backward(g)),
            Block::Bottleneck(b) => b.backward(g, need_input_grad),
        }
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        match self {
            Block::Conv(b) => b.visit(prefix, f),
            Block::MaxPool(_) => {}
            Block::Bottleneck(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        match self {
            Block::Conv(b) => b.visit_mut(prefix, f),
            Block::MaxPool(_) => {}
            Block::Bottleneck(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Sequence of named blocks followed by global average pooling.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<(String, Block)>,
    out_dim: usize,
    /// Index of the block tagged as the final bottleneck.
    tagged: Option<usize>,
    /// Per-block: did the last forward cache for backward.
    cached: Vec<bool>,
    pooled_from: Option<Vec<usize>>,
}

impl Encoder {
    /// Four stages: three strided `3×3` conv stages and a final bottleneck
    /// block at width `out_dim` (tagged for partial unfreezing).
    pub fn tiny_conv<R: Rng>(out_dim: usize, rng: &mut R) -> Self {
        assert!(out_dim >= 8 && out_dim % 4 == 0, "tiny-conv width must be a multiple of 4");
        let (c1, c2, c3) = (out_dim / 4, out_dim / 2, out_dim);
        let blocks = vec![
            ("stage1".to_string(), Block::Conv(ConvBnRelu::new(3, c1, 3, 1, 1, ("conv", "bn"), true, rng))),
            ("stage2".to_string(), Block::Conv(ConvBnRelu::new(c1, c2, 3, 2, 1, ("conv", "bn"), true, rng))),
            ("stage3".to_string(), Block::Conv(ConvBnRelu::new(c2, c3, 3, 2, 1, ("conv", "bn"), true, rng))),
            ("stage4.0".to_string(), Block::Bottleneck(Box::new(Bottleneck::new(c3, c3 / 4, c3, 1, rng)))),
        ];
        Self::from_blocks(blocks, out_dim, Some(3))
    }

    /// ResNet-50 (bottleneck v1.5, stride on the `3×3` conv); 2048-d output.
    pub fn resnet50<R: Rng>(rng: &mut R) -> Self {
        let mut blocks = vec![
            ("".to_string(), Block::Conv(ConvBnRelu::new(3, 64, 7, 2, 3, ("conv1", "bn1"), true, rng))),
            ("maxpool".to_string(), Block::MaxPool(MaxPool2d::new(3, 2, 1))),
        ];
        let mut cin = 64;
        for (li, (&count, &mid)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
            for bi in 0..count {
                let stride = if bi == 0 && li > 0 { 2 } else { 1 };
                let cout = mid * 4;
                blocks.push((
                    format!("layer{}.{}", li + 1, bi),
                    Block::Bottleneck(Box::new(Bottleneck::new(cin, mid, cout, stride, rng))),
                ));
                cin = cout;
            }
        }
        let last = blocks.len() - 1;
        Self::from_blocks(blocks, 2048, Some(last))
    }

    fn from_blocks(blocks: Vec<(String, Block)>, out_dim: usize, tagged: Option<usize>) -> Self {
        let n = blocks.len();
        Self { blocks, out_dim, tagged, cached: vec![false; n], pooled_from: None }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Name (without the `encoder.` prefix) of the tagged final bottleneck block.
    pub fn tagged_block(&self) -> Option<&str> {
        self.tagged.map(|i| self.blocks[i].0.as_str())
    }

    pub fn tagged_module(&self) -> Option<&Block> {
        self.tagged.map(|i| &self.blocks[i].1)
    }

    /// `[n, 3, h, w]` images → `[n, out_dim]` features.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Tensor {
        let train = mode == Mode::Train;
        let trainable: Vec<bool> = self.blocks.iter().map(|(_, b)| trainable_flags(b)).collect();
        let mut upstream = false;
        let mut h = x.clone();
        for (i, (_, block)) in self.blocks.iter_mut().enumerate() {
            upstream |= trainable[i];
            let cache = train && upstream;
            h = block.forward(&h, train, cache);
            self.cached[i] = cache;
        }
        self.pooled_from = (train && upstream).then(|| h.shape.clone());
        global_avg_pool(&h)
    }

    /// Back-propagates a feature gradient through every cached block,
    /// accumulating parameter gradients. Stops at the first trainable block.
    pub fn backward(&mut self, grad: &Tensor) {
        let Some(shape) = self.pooled_from.take() else {
            return;
        };
        let trainable: Vec<bool> = self.blocks.iter().map(|(_, b)| trainable_flags(b)).collect();
        let Some(first) = trainable.iter().position(|&t| t) else {
            return;
        };
        let mut g = global_avg_pool_backward(grad, &shape);
        for i in (first..self.blocks.len()).rev() {
            assert!(self.cached[i], "block {i} was not cached");
            let need_input = i > first;
            match self.blocks[i].1.backward(&g, need_input) {
                Some(next) => g = next,
                None => break,
            }
        }
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param)) {
        for (name, b) in &self.blocks {
            b.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param)) {
        for (name, b) in &mut self.blocks {
            b.visit_mut(&join(prefix, name), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image_batch(n: usize, s: usize) -> Tensor {
        let len = n * 3 * s * s;
        Tensor::new(vec![n, 3, s, s], (0..len).map(|i| ((i * 7919) % 101) as f32 / 101.0).collect())
    }

    #[test]
    fn tiny_conv_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut enc = Encoder::tiny_conv(32, &mut rng);
        let y = enc.forward(&image_batch(2, 16), Mode::Eval);
        assert_eq!(y.shape, vec![2, 32]);
        assert_eq!(enc.tagged_block(), Some("stage4.0"));
    }

    #[test]
    fn resnet50_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::resnet50(&mut rng);
        let mut weights = 0usize;
        enc.visit("", &mut |_, p| {
            if p.kind == crate::nn::ParamKind::Weight {
                weights += p.numel();
            }
        });
        // torchvision resnet50 without the fc layer.
        assert_eq!(weights, 23_508_032);
        assert_eq!(enc.tagged_block(), Some("layer4.2"));
    }

    #[test]
    fn chain_needs_propagates() {
        assert_eq!(chain_needs(&[false, true, false], false), vec![false, false, true]);
        assert_eq!(chain_needs(&[false, false], true), vec![true, true]);
    }

    #[test]
    fn full_backward_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut enc = Encoder::tiny_conv(8, &mut rng);
        let x = image_batch(3, 8);
        let r: Vec<f32> = (0..24).map(|i| ((i as f32) * 0.7).sin()).collect();
        let r = Tensor::new(vec![3, 8], r);
        let objective = |enc: &mut Encoder| -> f64 {
            // batch statistics without disturbing running stats
            let snapshot = enc.clone();
            let y = enc.forward(&x, Mode::Train);
            *enc = snapshot;
            y.data.iter().zip(&r.data).map(|(a, b)| (a * b) as f64).sum()
        };
        let mut probe = enc.clone();
        probe.forward(&x, Mode::Train);
        probe.backward(&r);
        let mut grads = Vec::new();
        probe.visit("", &mut |n, p| {
            if p.kind == crate::nn::ParamKind::Weight {
                grads.push((n, p.grad.clone()));
            }
        });
        let h = 1e-2f32;
        for (name, grad) in grads.iter().filter(|(n, _)| n.contains("conv")) {
            for idx in [0usize, 3] {
                let set = |enc: &mut Encoder, delta: f32| {
                    enc.visit_mut("", &mut |n, p| {
                        if &n == name {
                            p.value[idx] += delta;
                        }
                    })
                };
                set(&mut enc, h);
                let fp = objective(&mut enc);
                set(&mut enc, -2.0 * h);
                let fm = objective(&mut enc);
                set(&mut enc, h);
                let fd = (fp - fm) / (2.0 * h as f64);
                let an = grad[idx] as f64;
                assert!((fd - an).abs() < 2e-2 * (1.0 + an.abs()), "{name}[{idx}]: fd {fd} analytic {an}");
            }
        }
    }
}

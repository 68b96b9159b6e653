//! Stochastic image transforms and the policies built from them.
//!
//! Every sample draws its transforms from its own generator, seeded from
//! `(global seed, epoch, sample index, branch)`, so outputs do not depend on
//! batch composition or on how work is split across threads.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec;
use crate::nn::Tensor;
use crate::rng::{rng_from, sample_seed, stream};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("probability {0} for `{1}` is outside [0, 1]")]
    Probability(f64, &'static str),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

/// An RGB image stored height × width × channel, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub id: String,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "image buffer size");
        Self { height, width, pixels, id: String::new() }
    }

    pub fn filled(height: usize, width: usize, v: f32) -> Self {
        Self::new(height, width, vec![v; height * width * 3])
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    fn blank_like(&self) -> Self {
        Self { height: self.height, width: self.width, pixels: vec![0.0; self.pixels.len()], id: self.id.clone() }
    }

    fn clamp(&mut self) {
        for v in &mut self.pixels {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    /// Channel-first copy for the network.
    pub fn to_chw(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * 3];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = px[c];
            }
        }
        out
    }
}

/// Stack equally sized images into an `[n, 3, h, w]` tensor.
pub fn to_tensor(images: &[Image]) -> Tensor {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        assert_eq!((img.height, img.width), (h, w), "batch images must share a size");
        data.extend(img.to_chw());
    }
    Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Sample `(x, y)` with bilinear interpolation; outside pixels read as 0.
fn bilinear(img: &Image, y: f32, x: f32, c: usize, clamp_edges: bool) -> f32 {
    let (h, w) = (img.height as isize, img.width as isize);
    let (y0, x0) = (y.floor(), x.floor());
    let (dy, dx) = (y - y0, x - x0);
    let fetch = |yy: isize, xx: isize| -> f32 {
        if clamp_edges {
            img.at(yy.clamp(0, h - 1) as usize, xx.clamp(0, w - 1) as usize, c)
        } else if yy < 0 || xx < 0 || yy >= h || xx >= w {
            0.0
        } else {
            img.at(yy as usize, xx as usize, c)
        }
    };
    let (y0, x0) = (y0 as isize, x0 as isize);
    let top = fetch(y0, x0) * (1.0 - dx) + fetch(y0, x0 + 1) * dx;
    let bottom = fetch(y0 + 1, x0) * (1.0 - dx) + fetch(y0 + 1, x0 + 1) * dx;
    top * (1.0 - dy) + bottom * dy
}

/// Bilinear resize of the window `(top, left, h, w)` to `out_h × out_w`
/// (half-pixel centres, edge clamping). Identity when the window is the
/// whole image and sizes agree.
pub fn resize_region(img: &Image, top: usize, left: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Image {
    if top == 0 && left == 0 && h == img.height && w == img.width && out_h == h && out_w == w {
        return img.clone();
    }
    let sy = h as f32 / out_h as f32;
    let sx = w as f32 / out_w as f32;
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let y = top as f32 + ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, h as f32 - 1.0);
        for ox in 0..out_w {
            let x = left as f32 + ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, w as f32 - 1.0);
            for c in 0..3 {
                out.push(bilinear(img, y, x, c, true));
            }
        }
    }
    Image { height: out_h, width: out_w, pixels: out, id: img.id.clone() }
}

pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    resize_region(img, 0, 0, img.height, img.width, out_h, out_w)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
}

impl Default for CropParams {
    fn default() -> Self {
        Self { scale: (0.7, 1.0), ratio: (0.75, 4.0 / 3.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self { brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurParams {
    /// Kernel side as a fraction of the shorter image side (forced odd, ≥ 3).
    pub kernel_frac: f32,
    pub sigma: (f32, f32),
}

impl Default for BlurParams {
    fn default() -> Self {
        Self { kernel_frac: 0.1, sigma: (0.1, 2.0) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolarizeParams {
    pub threshold: f32,
    pub addition: f32,
}

impl Default for SolarizeParams {
    fn default() -> Self {
        Self { threshold: 0.1, addition: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutoutParams {
    pub width: (usize, usize),
    pub height: (usize, usize),
}

impl Default for CutoutParams {
    fn default() -> Self {
        Self { width: (50, 100), height: (185, 190) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    ResizedCrop(CropParams),
    CenterCutout(CutoutParams),
    HorizontalFlip,
    /// Rotation by an angle drawn uniformly from the range, in degrees.
    Rotate { max_degrees: f32 },
    ColorJitter(JitterParams),
    Grayscale,
    GaussianBlur(BlurParams),
    Solarize(SolarizeParams),
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::ResizedCrop(_) => "crop",
            Transform::CenterCutout(_) => "cutout",
            Transform::HorizontalFlip => "flip",
            Transform::Rotate { .. } => "rotate",
            Transform::ColorJitter(_) => "jitter",
            Transform::Grayscale => "grayscale",
            Transform::GaussianBlur(_) => "blur",
            Transform::Solarize(_) => "solarize",
        }
    }

    fn apply(&self, img: &Image, rng: &mut ChaCha8Rng) -> Image {
        match *self {
            Transform::ResizedCrop(p) => random_resized_crop(img, p, rng),
            Transform::CenterCutout(p) => {
                let w = rng.random_range(p.width.0..=p.width.1);
                let h = rng.random_range(p.height.0..=p.height.1);
                center_cutout(img, w, h)
            }
            Transform::HorizontalFlip => hflip(img),
            Transform::Rotate { max_degrees } => rotate(img, rng.random_range(0.0..=max_degrees)),
            Transform::ColorJitter(p) => color_jitter(img, p, rng),
            Transform::Grayscale => grayscale(img),
            Transform::GaussianBlur(p) => {
                let sigma = rng.random_range(p.sigma.0..=p.sigma.1);
                let side = img.height.min(img.width) as f32 * p.kernel_frac;
                let mut k = (side as usize).max(3);
                if k % 2 == 0 {
                    k += 1;
                }
                gaussian_blur(img, k, sigma)
            }
            Transform::Solarize(p) => solarize(img, p),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStep {
    pub transform: Transform,
    pub probability: f64,
}

/// Ordered transforms, each applied independently with its probability.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AugmentationPolicy {
    pub steps: Vec<PolicyStep>,
}

impl AugmentationPolicy {
    pub fn new(steps: Vec<(Transform, f64)>) -> Result<Self, AugmentError> {
        let policy = Self {
            steps: steps.into_iter().map(|(transform, probability)| PolicyStep { transform, probability }).collect(),
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        for s in &self.steps {
            if !(0.0..=1.0).contains(&s.probability) {
                return Err(AugmentError::Probability(s.probability, s.transform.name()));
            }
        }
        Ok(())
    }

    /// Supervised fine-tuning and test-time policy: crop, flip, rotate.
    pub fn supervised() -> Self {
        Self::new(vec![
            (Transform::ResizedCrop(CropParams::default()), 1.0),
            (Transform::HorizontalFlip, 0.25),
            (Transform::Rotate { max_degrees: 45.0 }, 0.25),
        ])
        .expect("static policy")
    }

    /// Barlow Twins branch policy; `prime` selects the second branch, which
    /// blurs less often and sometimes solarizes.
    pub fn twin_branch(prime: bool, cutout: bool) -> Self {
        let mut steps = vec![(Transform::ResizedCrop(CropParams::default()), 1.0)];
        if cutout {
            steps.push((Transform::CenterCutout(CutoutParams::default()), 0.33));
        }
        steps.extend([
            (Transform::HorizontalFlip, 0.5),
            (Transform::ColorJitter(JitterParams::default()), 0.8),
            (Transform::Grayscale, 0.2),
            (Transform::GaussianBlur(BlurParams::default()), if prime { 0.1 } else { 1.0 }),
            (Transform::Solarize(SolarizeParams::default()), if prime { 0.2 } else { 0.0 }),
        ]);
        Self::new(steps).expect("static policy")
    }

    /// Same steps, every probability set to zero.
    pub fn disabled(&self) -> Self {
        let mut p = self.clone();
        p.steps.iter_mut().for_each(|s| s.probability = 0.0);
        p
    }

    pub fn probability_of(&self, name: &str) -> Option<f64> {
        self.steps.iter().find(|s| s.transform.name() == name).map(|s| s.probability)
    }

    /// Apply to one image with a sample-specific seed. Also returns which
    /// steps fired.
    pub fn apply(&self, img: &Image, seed: u64) -> (Image, Vec<bool>) {
        let mut rng = rng_from(&[seed, stream::AUGMENT]);
        let mut out = img.clone();
        let mut fired = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let on = rng.random::<f64>() < s.probability;
            if on {
                out = s.transform.apply(&out, &mut rng);
                out.clamp();
            }
            fired.push(on);
        }
        (out, fired)
    }
}

/// Identifies whose stream a draw comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedContext {
    pub global_seed: u64,
    pub epoch: u64,
    pub branch: u64,
}

pub mod branch {
    pub const SUPERVISED: u64 = 0;
    pub const VIEW_A: u64 = 1;
    pub const VIEW_B: u64 = 2;
    pub const TTA: u64 = 3;
}

/// Augment `images`, where `indices[i]` is the dataset index of `images[i]`.
pub fn augment_batch(policy: &AugmentationPolicy, images: &[&Image], indices: &[usize], ctx: SeedContext) -> Vec<Image> {
    assert_eq!(images.len(), indices.len());
    exec::map_indexed(images.len(), |i| {
        let seed = sample_seed(ctx.global_seed, ctx.epoch, indices[i] as u64, ctx.branch);
        policy.apply(images[i], seed).0
    })
}

/// Supervised-policy augmentation for one training batch.
pub fn train_augment(images: &[&Image], indices: &[usize], global_seed: u64, epoch: u64) -> Vec<Image> {
    let ctx = SeedContext { global_seed, epoch, branch: branch::SUPERVISED };
    augment_batch(&AugmentationPolicy::supervised(), images, indices, ctx)
}

/// Two independently augmented views of every sample.
pub fn make_view_pair(
    images: &[&Image],
    indices: &[usize],
    t: &AugmentationPolicy,
    t_prime: &AugmentationPolicy,
    global_seed: u64,
    epoch: u64,
) -> (Vec<Image>, Vec<Image>) {
    let a = augment_batch(t, images, indices, SeedContext { global_seed, epoch, branch: branch::VIEW_A });
    let b = augment_batch(t_prime, images, indices, SeedContext { global_seed, epoch, branch: branch::VIEW_B });
    (a, b)
}

/// `k` test-time views of one image.
pub fn tta_views(img: &Image, k: usize, policy: &AugmentationPolicy, seed: u64) -> Vec<Image> {
    (0..k as u64).map(|v| policy.apply(img, rng_from(&[seed, stream::TTA, v]).random()).0).collect()
}

fn random_resized_crop(img: &Image, p: CropParams, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (img.height, img.width);
    let area = (h * w) as f64;
    let (lr0, lr1) = (p.ratio.0.ln(), p.ratio.1.ln());
    for _ in 0..10 {
        let target = area * rng.random_range(p.scale.0..=p.scale.1);
        let aspect = if lr0 < lr1 { rng.random_range(lr0..lr1).exp() } else { p.ratio.0 };
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return resize_region(img, top, left, ch, cw, h, w);
        }
    }
    // Centre crop at the nearest admissible aspect ratio.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < p.ratio.0 {
        (w, ((w as f64 / p.ratio.0).round() as usize).min(h))
    } else if in_ratio > p.ratio.1 {
        (((h as f64 * p.ratio.1).round() as usize).min(w), h)
    } else {
        (w, h)
    };
    resize_region(img, (h - ch) / 2, (w - cw) / 2, ch, cw, h, w)
}

/// Zero a `w × h` rectangle centred in the image, clipped to its bounds.
pub fn center_cutout(img: &Image, w: usize, h: usize) -> Image {
    let (w, h) = (w.min(img.width), h.min(img.height));
    let top = (img.height - h) / 2;
    let left = (img.width - w) / 2;
    let mut out = img.clone();
    for y in top..top + h {
        let row = (y * img.width + left) * 3;
        out.pixels[row..row + w * 3].iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.blank_like();
    for y in 0..img.height {
        for x in 0..img.width {
            let src = (y * img.width + x) * 3;
            let dst = (y * img.width + img.width - 1 - x) * 3;
            out.pixels[dst..dst + 3].copy_from_slice(&img.pixels[src..src + 3]);
        }
    }
    out
}

/// Rotate counter-clockwise about the centre; uncovered corners become 0.
pub fn rotate(img: &Image, degrees: f32) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (img.height as f32 - 1.0) / 2.0;
    let cx = (img.width as f32 - 1.0) / 2.0;
    let mut out = img.blank_like();
    for y in 0..img.height {
        for x in 0..img.width {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            for ch in 0..3 {
                out.pixels[(y * img.width + x) * 3 + ch] = bilinear(img, sy, sx, ch, false);
            }
        }
    }
    out
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for px in out.pixels.chunks_exact_mut(3) {
        let l = luma(px);
        px.fill(l);
    }
    out
}

fn blend(img: &mut Image, other: impl Fn(&[f32]) -> [f32; 3], factor: f32) {
    for px in img.pixels.chunks_exact_mut(3) {
        let o = other(px);
        for c in 0..3 {
            px[c] = (factor * px[c] + (1.0 - factor) * o[c]).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue jitter in random order.
fn color_jitter(img: &Image, p: JitterParams, rng: &mut ChaCha8Rng) -> Image {
    let factor = |rng: &mut ChaCha8Rng, m: f32| rng.random_range((1.0 - m).max(0.0)..=1.0 + m);
    let b = factor(rng, p.brightness);
    let c = factor(rng, p.contrast);
    let s = factor(rng, p.saturation);
    let h = rng.random_range(-p.hue..=p.hue);
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        match op {
            0 => blend(&mut out, |_| [0.0; 3], b),
            1 => {
                let mean = out.pixels.chunks_exact(3).map(luma).sum::<f32>() / (out.height * out.width) as f32;
                blend(&mut out, |_| [mean; 3], c)
            }
            2 => blend(&mut out, |px| [luma(px); 3], s),
            _ => {
                for px in out.pixels.chunks_exact_mut(3) {
                    let (hh, ss, vv) = rgb_to_hsv(px[0], px[1], px[2]);
                    px.copy_from_slice(&hsv_to_rgb(hh + h, ss, vv));
                }
            }
        }
    }
    out
}

/// Separable Gaussian blur with reflected borders.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f32) -> Image {
    let r = (kernel / 2) as isize;
    let mut weights: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f32 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let (h, w) = (img.height, img.width);
    let mut tmp = img.blank_like();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    acc += wt * img.at(y, reflect(x as isize + k as isize - r, w), c);
                }
                tmp.pixels[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = img.blank_like();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, wt) in weights.iter().enumerate() {
                    acc += wt * tmp.at(reflect(y as isize + k as isize - r, h), x, c);
                }
                out.pixels[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    out
}

/// Values above the threshold are inverted, then shifted by the addition.
pub fn solarize(img: &Image, p: SolarizeParams) -> Image {
    let mut out = img.clone();
    for v in &mut out.pixels {
        if *v > p.threshold {
            *v = (1.0 - *v + p.addition).clamp(0.0, 1.0);
        }
    }
    out
}

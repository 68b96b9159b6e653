//! Manifest-driven datasets, corpus composition, and the synthetic corpus.
//!
//! A manifest is a CSV file with header `relative_path,label,split`; paths
//! are relative to the manifest's directory, `label` is a class name or
//! `unlabeled`, and `split` is one of `train`, `test`, `pretrain`. An
//! optional leading `# classes: a,b,c` line declares the class list;
//! without it the list is the sorted set of labels that appear.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::augment::{resize, Image};
use crate::exec;
use crate::rng::{rng_from, stream};

pub const UNLABELED: &str = "unlabeled";

/// Class names and per-class train/test counts of the labelled skin-lesion
/// benchmark the synthetic corpus can mimic.
pub const LESION_CLASSES: [&str; 8] = [
    "actinic_keratosis",
    "basal_cell_carcinoma",
    "benign_keratosis",
    "dermatofibroma",
    "melanoma",
    "nevus",
    "squamous_cell_carcinoma",
    "vascular_lesion",
];
pub const LESION_TRAIN_COUNTS: [usize; 8] = [306, 500, 467, 55, 500, 500, 171, 55];
pub const LESION_TEST_COUNTS: [usize; 8] = [498, 2549, 1663, 173, 3339, 10601, 414, 186];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: file not found: {path}")]
    MissingFile { line: usize, path: String },
    #[error("line {line}: unknown label `{label}`")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: duplicate entry for {path} in split {split}")]
    Duplicate { line: usize, path: String, split: Split },
    #[error("dataset is empty")]
    Empty,
    #[error("corpus component `{0}` not provided")]
    MissingComponent(String),
    #[error("invalid corpus expression `{0}`")]
    BadCorpus(String),
    #[error("cannot decode {path}: {msg}")]
    Decode { path: String, msg: String },
    #[error("{} pre-training samples also appear in the test split", .0.len())]
    Leakage(Vec<PathBuf>),
    #[error("invalid synthetic corpus request: {0}")]
    Synth(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
    Pretrain,
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "pretrain" => Ok(Split::Pretrain),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Pretrain => "pretrain",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub path: PathBuf,
    pub label: Option<usize>,
    pub split: Split,
}

/// A list of samples sharing a class list. Images are decoded on demand and
/// resized to `image_size × image_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
    pub image_size: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ManifestOptions {
    /// Overrides any class list declared in the file.
    pub classes: Option<Vec<String>>,
    pub image_size: usize,
    pub check_paths: bool,
}

impl ManifestOptions {
    pub fn new(image_size: usize) -> Self {
        Self { classes: None, image_size, check_paths: true }
    }
}

pub fn load_manifest(path: &Path, opts: &ManifestOptions) -> Result<Dataset, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, root, opts)
}

pub fn parse_manifest(text: &str, root: &Path, opts: &ManifestOptions) -> Result<Dataset, DatasetError> {
    let mut declared: Option<Vec<String>> = None;
    let mut header_seen = false;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(list) = rest.trim().strip_prefix("classes:") {
                declared = Some(list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
            }
            continue;
        }
        if !header_seen {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols != ["relative_path", "label", "split"] {
                return Err(DatasetError::Malformed {
                    line: lineno,
                    msg: "expected header `relative_path,label,split`".into(),
                });
            }
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [rel, label, split] = cols[..] else {
            return Err(DatasetError::Malformed { line: lineno, msg: format!("expected 3 fields, found {}", cols.len()) });
        };
        if rel.is_empty() {
            return Err(DatasetError::Malformed { line: lineno, msg: "empty path".into() });
        }
        let split: Split = split.parse().map_err(|msg| DatasetError::Malformed { line: lineno, msg })?;
        raw.push((lineno, rel.to_string(), label.to_string(), split));
    }
    if !header_seen {
        return Err(DatasetError::Empty);
    }
    let classes = match opts.classes.clone().or(declared) {
        Some(c) => c,
        None => {
            let set: BTreeSet<&str> = raw.iter().map(|r| r.2.as_str()).filter(|l| *l != UNLABELED).collect();
            set.into_iter().map(String::from).collect()
        }
    };
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut seen = BTreeSet::new();
    let mut samples = Vec::with_capacity(raw.len());
    for (line, rel, label, split) in raw {
        let label = if label == UNLABELED {
            None
        } else {
            Some(*index.get(label.as_str()).ok_or_else(|| DatasetError::UnknownLabel { line, label: label.clone() })?)
        };
        let path = root.join(&rel);
        if opts.check_paths && !path.is_file() {
            return Err(DatasetError::MissingFile { line, path: path.display().to_string() });
        }
        if !seen.insert((path.clone(), split)) {
            return Err(DatasetError::Duplicate { line, path: rel, split });
        }
        samples.push(Sample { path, label, split });
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset { classes, samples, image_size: opts.image_size })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            classes: self.classes.clone(),
            samples: self.samples.iter().filter(|s| s.split == split).cloned().collect(),
            image_size: self.image_size,
        }
    }

    /// Sample count per class index; unlabelled samples are not counted.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for s in &self.samples {
            if let Some(l) = s.label {
                counts[l] += 1;
            }
        }
        counts
    }

    pub fn labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn load(&self, i: usize) -> Result<Image, DatasetError> {
        decode_image(&self.samples[i].path, self.image_size)
    }

    /// Decode every image; order follows `samples`.
    pub fn load_all(&self) -> Result<Vec<Image>, DatasetError> {
        exec::map_indexed(self.len(), |i| self.load(i)).into_iter().collect()
    }
}

/// Decode a PNG or JPEG to RGB in [0, 1] and bilinearly resize it.
pub fn decode_image(path: &Path, size: usize) -> Result<Image, DatasetError> {
    let decoded = image::open(path)
        .map_err(|e| DatasetError::Decode { path: path.display().to_string(), msg: e.to_string() })?
        .to_rgb8();
    let (w, h) = decoded.dimensions();
    let pixels = decoded.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    let img = Image::new(h as usize, w as usize, pixels).with_id(path.display().to_string());
    Ok(if size == 0 || (h as usize == size && w as usize == size) { img } else { resize(&img, size, size) })
}

/// A weighted sum of named components, e.g. `2*IU + DermNet`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSpec {
    pub components: Vec<(String, usize)>,
}

impl CorpusSpec {
    pub fn new(components: &[(&str, usize)]) -> Self {
        Self { components: components.iter().map(|&(n, m)| (n.to_string(), m)).collect() }
    }

    /// Total size given component sizes.
    pub fn total(&self, sizes: &BTreeMap<String, usize>) -> Result<usize, DatasetError> {
        self.components
            .iter()
            .map(|(n, m)| sizes.get(n).map(|s| s * m).ok_or_else(|| DatasetError::MissingComponent(n.clone())))
            .sum()
    }
}

impl FromStr for CorpusSpec {
    type Err = DatasetError;
    fn from_str(s: &str) -> Result<Self, DatasetError> {
        let bad = || DatasetError::BadCorpus(s.to_string());
        let mut components = Vec::new();
        for term in s.split('+').map(str::trim) {
            let (m, name) = match term.split_once('*') {
                Some((m, n)) => {
                    (m.trim().parse().map_err(|_| bad())?, n.trim())
                }
                _ => (1, term),
            };
            if name.is_empty() || m == 0 {
                return Err(bad());
            }
            components.push((name.to_string(), m));
        }
        Ok(Self { components })
    }
}

/// Concatenate components with their multiplicities (literal repetition).
/// Every sample of the result is marked as a pre-training sample.
pub fn compose_corpus(spec: &CorpusSpec, parts: &BTreeMap<String, Dataset>) -> Result<Dataset, DatasetError> {
    let mut samples = Vec::new();
    let mut meta: Option<(&Vec<String>, usize)> = None;
    for (name, mult) in &spec.components {
        let d = parts.get(name).ok_or_else(|| DatasetError::MissingComponent(name.clone()))?;
        meta.get_or_insert((&d.classes, d.image_size));
        for _ in 0..*mult {
            samples.extend(d.samples.iter().map(|s| Sample { split: Split::Pretrain, ..s.clone() }));
        }
    }
    let (classes, image_size) = meta.ok_or(DatasetError::Empty)?;
    if samples.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(Dataset { classes: classes.clone(), samples, image_size })
}

/// Pre-training corpora may overlap the training split but never the test split.
pub fn check_no_leakage(pretrain: &Dataset, test: &Dataset) -> Result<(), DatasetError> {
    let test_paths: BTreeSet<&Path> = test.samples.iter().map(|s| s.path.as_path()).collect();
    let leaked: BTreeSet<PathBuf> =
        pretrain.samples.iter().filter(|s| test_paths.contains(s.path.as_path())).map(|s| s.path.clone()).collect();
    if leaked.is_empty() {
        Ok(())
    } else {
        Err(DatasetError::Leakage(leaked.into_iter().collect()))
    }
}

/// Split `total` into integer parts proportional to `weights`
/// (largest-remainder rounding).
pub fn proportional_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let short = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub image_size: usize,
    /// Relative class frequencies; uniform when `None`.
    pub imbalance: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { num_classes: 8, n_train: 512, n_test: 2048, image_size: 32, imbalance: None, seed: 7 }
    }
}

impl SynthConfig {
    /// Frequencies of the labelled skin-lesion training split.
    pub fn lesion_proportions() -> Vec<f64> {
        LESION_TRAIN_COUNTS.iter().map(|&c| c as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest: PathBuf,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
}

/// Render one procedural sample of class `class`.
///
/// A class fixes a hue and a foreground pattern; position, scale, rotation,
/// background colour and pixel noise vary per sample.
pub fn synth_image(class: usize, num_classes: usize, size: usize, seed: u64) -> Image {
    let mut rng = rng_from(&[seed, stream::SYNTH]);
    let noise = Normal::new(0.0f32, 0.03).unwrap();
    let hue = (class as f32 / num_classes as f32 + noise.sample(&mut rng) * 0.5).rem_euclid(1.0);
    let sat = rng.random_range(0.6..1.0f32);
    let val = rng.random_range(0.7..1.0f32);
    let fg = hsv(hue, sat, val);
    let bg_hue = rng.random::<f32>();
    let bg = hsv(bg_hue, rng.random_range(0.0..0.5), rng.random_range(0.1..0.4));
    let bg2 = hsv(bg_hue + 0.1, rng.random_range(0.0..0.5), rng.random_range(0.1..0.4));
    let s = size as f32;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let radius = rng.random_range(0.25..0.38) * s;
    let (sin, cos) = rng.random_range(0.0..std::f32::consts::TAU).sin_cos();
    let grad_dir = rng.random_range(0.0..std::f32::consts::TAU);
    let pattern = class % 8;
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = ((x as f32 + 0.5 - cx) / radius, (y as f32 + 0.5 - cy) / radius);
            let (u, v) = (cos * dx - sin * dy, sin * dx + cos * dy);
            let inside = pattern_mask(pattern, u, v);
            let t = ((x as f32 / s) * grad_dir.cos() + (y as f32 / s) * grad_dir.sin()).clamp(0.0, 1.0);
            for c in 0..3 {
                let base = if inside { fg[c] } else { bg[c] * (1.0 - t) + bg2[c] * t };
                px.push((base + noise.sample(&mut rng)).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, px)
}

fn pattern_mask(pattern: usize, u: f32, v: f32) -> bool {
    let r = (u * u + v * v).sqrt();
    let m = u.abs().max(v.abs());
    match pattern {
        0 => r < 1.0,
        1 => (0.55..1.0).contains(&r),
        2 => m < 0.85,
        3 => m < 1.0 && (u.abs() < 0.3 || v.abs() < 0.3),
        4 => v > -0.7 && v < 0.9 && u.abs() < (0.9 - v) * 0.6,
        5 => r < 1.0 && (v * 3.0).rem_euclid(1.0) < 0.5,
        6 => m < 0.9 && ((((u + 1.0) * 2.0).floor() + ((v + 1.0) * 2.0).floor()) as i32).rem_euclid(2) == 0,
        _ => ((u - 0.5).powi(2) + v * v).sqrt() < 0.45 || ((u + 0.5).powi(2) + v * v).sqrt() < 0.45,
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h6.floor() as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn synth_labels(counts: &[usize], seed: u64, split: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    labels.shuffle(&mut rng_from(&[seed, stream::SYNTH, split, u64::MAX]));
    labels
}

/// Write a synthetic labelled corpus (PNG files plus `manifest.csv`) under `out_dir`.
pub fn synth_generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput, DatasetError> {
    if cfg.num_classes < 2 {
        return Err(DatasetError::Synth("at least 2 classes are required".into()));
    }
    if cfg.image_size < 8 {
        return Err(DatasetError::Synth("image size must be at least 8".into()));
    }
    let weights = match &cfg.imbalance {
        Some(w) if w.len() != cfg.num_classes || w.iter().any(|&x| !(x > 0.0)) => {
            return Err(DatasetError::Synth("imbalance needs one positive weight per class".into()));
        }
        Some(w) => w.clone(),
        None => vec![1.0; cfg.num_classes],
    };
    let train_counts = proportional_counts(cfg.n_train, &weights);
    let test_counts = proportional_counts(cfg.n_test, &weights);
    let classes: Vec<String> = if cfg.num_classes == 8 && cfg.imbalance.is_some() {
        LESION_CLASSES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..cfg.num_classes).map(|c| format!("class_{c}")).collect()
    };
    let mut manifest = format!("# classes: {}\nrelative_path,label,split\n", classes.join(","));
    for (split_tag, split, counts) in [(0u64, Split::Train, &train_counts), (1, Split::Test, &test_counts)] {
        let dir = out_dir.join("images").join(split.to_string());
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let labels = synth_labels(counts, cfg.seed, split_tag);
        let encoded: Vec<Vec<u8>> = exec::map_indexed(labels.len(), |i| {
            let img = synth_image(labels[i], cfg.num_classes, cfg.image_size, crate::rng::derive_seed(&[cfg.seed, split_tag, i as u64]));
            encode_png(&img)
        });
        for (i, (bytes, &label)) in encoded.iter().zip(&labels).enumerate() {
            let name = format!("{split}_{i:05}.png");
            let path = dir.join(&name);
            fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
            manifest.push_str(&format!("images/{split}/{name},{},{split}\n", classes[label]));
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest).map_err(|e| io_err(&manifest_path, e))?;
    Ok(SynthOutput { manifest: manifest_path, train_counts, test_counts })
}

pub fn encode_png(img: &Image) -> Vec<u8> {
    let bytes: Vec<u8> = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, bytes).expect("buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).expect("png encoding to memory");
    out.into_inner()
}

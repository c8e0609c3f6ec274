//! Image datasets: IDX and CIFAR binary loaders plus a seeded synthetic
//! generator. Pixels are stored as `f32` in `[0, 1]`, row-major `H×W×C`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `len × height × width × channels`
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        shape: (usize, usize, usize),
        n_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let (height, width, channels) = shape;
        let pixels = height * width * channels;
        if pixels == 0 {
            return Err(Error::Data(format!("image shape {shape:?} has zero extent")));
        }
        if images.len() != labels.len() * pixels {
            return Err(Error::Data(format!(
                "{} pixel values for {} labels of {pixels} pixels each",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            height,
            width,
            channels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.pixels_per_image();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels_per_image());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: self.labels_of(indices),
            ..self.clone_meta()
        }
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Samples `lo..hi`.
    pub fn range(&self, lo: usize, hi: usize) -> Dataset {
        let idx: Vec<usize> = (lo.min(self.len())..hi.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn with_split(mut self, split: Split) -> Dataset {
        self.split = split;
        self
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            n_classes: self.n_classes,
            split: self.split,
        }
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let c = self.channels;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (k, &v) in self.images.iter().enumerate() {
            sum[k % c] += v as f64;
            sq[k % c] += (v as f64) * (v as f64);
        }
        let n = (self.images.len() / c).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        (mean, std)
    }

    /// In-place `(x − mean_c) / std_c`. Pass the training split's stats to
    /// the test split so both share one transform.
    pub fn standardize(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.channels || std.len() != self.channels {
            return Err(Error::Config(format!(
                "standardization needs {} channel statistics",
                self.channels
            )));
        }
        let c = self.channels;
        for (k, v) in self.images.iter_mut().enumerate() {
            *v = ((*v as f64 - mean[k % c]) / std[k % c]) as f32;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: header truncated")))
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file body: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "idx images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("idx images: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx images")? as usize;
    let rows = be_u32(bytes, 8, "idx images")? as usize;
    let cols = be_u32(bytes, 12, "idx images")? as usize;
    let body = &bytes[16..];
    let want = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("idx images: header overflows".into()))?;
    if body.len() != want {
        return Err(Error::Format(format!(
            "idx images: header promises {want} bytes, file has {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, body.iter().map(|&b| b as f32 / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("idx labels: bad magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "idx labels")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "idx labels: header promises {n} labels, file has {}",
            body.len()
        )));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label pair (single channel). `n_classes` is the
/// largest label plus one, but at least 10.
pub fn load_idx(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read(images_path)?)?;
    let labels = parse_idx_labels(&read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Data("idx files contain no samples".into()));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1).max(10);
    Dataset::new(pixels, labels, (rows, cols, 1), n_classes, split)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// Records carry a coarse and a fine label; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn files(self, split: Split) -> Vec<String> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin".into()],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin".into()],
        }
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

/// Parses CIFAR binary records, converting channel-planar pixels to `H×W×C`.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f32>, Vec<usize>)> {
    let rec = variant.record_size();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::Format(format!(
            "cifar: {} bytes is not a positive multiple of the {rec}-byte record",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for r in bytes.chunks_exact(rec) {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.n_classes() {
            return Err(Error::Data(format!(
                "cifar: label {label} outside 0..{}",
                variant.n_classes()
            )));
        }
        labels.push(label);
        let px = &r[variant.label_bytes()..];
        for p in 0..plane {
            for c in 0..3 {
                images.push(px[c * plane + p] as f32 / 255.0);
            }
        }
    }
    Ok((images, labels))
}

/// Loads the train or test batches found in `dir`.
pub fn load_cifar_binary(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let (im, lb) = parse_cifar_records(&read(&dir.join(name))?, variant)?;
        images.extend(im);
        labels.extend(lb);
    }
    Dataset::new(
        images,
        labels,
        (CIFAR_SIDE, CIFAR_SIDE, 3),
        variant.n_classes(),
        split,
    )
}

/// Class centers for [`synth_clusters`]: one uniform `[0, 1]` image per class.
fn synth_prototypes(seed: u64, n_classes: usize, shape: (usize, usize, usize)) -> Vec<Vec<f32>> {
    let n = shape.0 * shape.1 * shape.2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes)
        .map(|_| (0..n).map(|_| rng.random::<f32>()).collect())
        .collect()
}

/// Seeded Gaussian clusters rendered as images: each sample is its class center plus
/// i.i.d. Gaussian pixel noise of std `noise`, clamped to `[0, 1]`. Labels
/// cycle through the classes. `stream` selects an independent sample draw
/// over the same prototypes, so train and test sets come from one
/// distribution.
pub fn synth_clusters_stream(
    seed: u64,
    stream: u64,
    n_classes: usize,
    samples: usize,
    shape: (usize, usize, usize),
    noise: f64,
    split: Split,
) -> Result<Dataset> {
    if n_classes == 0 {
        return Err(Error::Config("synthetic data needs at least one class".into()));
    }
    let protos = synth_prototypes(seed, n_classes, shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream + 1);
    let mut images = Vec::with_capacity(samples * shape.0 * shape.1 * shape.2);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let class = i % n_classes;
        labels.push(class);
        for &p in &protos[class] {
            let z: f64 = if noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
            images.push((p as f64 + noise * z).clamp(0.0, 1.0) as f32);
        }
    }
    Dataset::new(images, labels, shape, n_classes, split)
}

pub fn synth_clusters(
    seed: u64,
    n_classes: usize,
    samples: usize,
    shape: (usize, usize, usize),
    noise: f64,
) -> Result<Dataset> {
    synth_clusters_stream(seed, 0, n_classes, samples, shape, noise, Split::Train)
}

//! Datasets: the CIFAR-10 binary format, a seeded synthetic generator,
//! train/validation splitting and seeded batching.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CLASSES: usize = 10;
/// One label byte, then the red, green and blue planes.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Images `(N, 3, H, W)` and their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let [n, c, _, _] = images.dims4("dataset")?;
        if c != 3 {
            return Err(Error::Data(format!("images need 3 channels, got {c}")));
        }
        if n != labels.len() {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if n < 2 {
            return Err(Error::Data(format!("a dataset needs at least 2 samples, got {n}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.images.shape()[2]
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.images.select_rows(indices), labels, self.n_classes)
    }

    /// The first `n` samples (all of them if `n` is larger).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        Batch {
            images: self.images.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-channel mean over every pixel of every image.
    pub fn channel_means(&self) -> [f64; 3] {
        let [n, _, h, w] = self.images.dims4("dataset").expect("validated on construction");
        let plane = h * w;
        let mut sums = [0.0; 3];
        for (i, chunk) in self.images.values().chunks(plane).enumerate() {
            sums[i % 3] += chunk.iter().sum::<f64>();
        }
        sums.map(|s| s / (n * plane) as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Parses CIFAR-10 binary records: one label byte (0..=9) followed by 3072
/// pixel bytes, channel planes in R, G, B order, each row-major 32 x 32.
/// Pixels map to `byte / 255` and are standardized per channel with the
/// fixed constants [`CIFAR_MEAN`] and [`CIFAR_STD`].
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<f64>, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Data(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    let mut pixels = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Data(format!("record {r} has label byte {label}, expected 0..=9")));
        }
        labels.push(label);
        for (i, &b) in record[1..].iter().enumerate() {
            let c = i / plane;
            pixels.push((b as f64 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (p, l) = parse_cifar10(&bytes).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n = labels.len();
    let images = Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

/// The five training batches `data_batch_{1..5}.bin` under `dir`.
pub fn load_cifar10_train(dir: impl AsRef<Path>) -> Result<Dataset> {
    let paths: Vec<_> = (1..=5).map(|i| dir.as_ref().join(format!("data_batch_{i}.bin"))).collect();
    load_cifar10_binary(&paths)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { samples: 2000, image_size: 16, n_classes: 4, noise: 0.1, seed: 0 }
    }
}

/// Class template: an oriented grating whose orientation and frequency depend
/// on the class, plus a bright blob at a class-specific position. Each colour
/// channel sees the grating at a different phase.
fn class_template(class: usize, n_classes: usize, size: usize) -> Vec<f64> {
    let theta = PI * class as f64 / n_classes as f64;
    let freq = 1.5 + (class % 3) as f64;
    let angle = 2.0 * PI * class as f64 / n_classes as f64;
    let (cy, cx) = (0.5 + 0.3 * angle.sin(), 0.5 + 0.3 * angle.cos());
    let s = size as f64;
    let mut t = Vec::with_capacity(3 * size * size);
    for ch in 0..3 {
        let phase = ch as f64 * PI / 3.0;
        for y in 0..size {
            for x in 0..size {
                let (u, v) = (x as f64 / s, y as f64 / s);
                let grating = (2.0 * PI * freq * (u * theta.cos() + v * theta.sin()) + phase).sin();
                let blob = (-((u - cx).powi(2) + (v - cy).powi(2)) / 0.02).exp();
                t.push(0.5 + 0.25 * grating + 0.25 * blob);
            }
        }
    }
    t
}

/// Balanced labels `i mod n_classes`; each image is its class template at a
/// random contrast in `[0.75, 1.25]` plus Gaussian pixel noise, then
/// standardized per channel.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.n_classes < 2 || spec.image_size < 2 || spec.samples < 2 {
        return Err(Error::Data(format!(
            "synthetic data needs >= 2 classes, side >= 2 and >= 2 samples, got {spec:?}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::Data(format!("noise must be finite and non-negative, got {}", spec.noise)));
    }
    let size = spec.image_size;
    let plane = size * size;
    let templates: Vec<Vec<f64>> = (0..spec.n_classes).map(|k| class_template(k, spec.n_classes, size)).collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Data(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels: Vec<usize> = (0..spec.samples).map(|i| i % spec.n_classes).collect();
    let mut pixels = Vec::with_capacity(spec.samples * 3 * plane);
    for &label in &labels {
        let contrast = rng.gen_range(0.75..1.25);
        for &t in &templates[label] {
            pixels.push(0.5 + contrast * (t - 0.5) + noise.sample(&mut rng));
        }
    }
    standardize(&mut pixels, plane);
    let images = Tensor::new(&[spec.samples, 3, size, size], pixels)?;
    Dataset::new(images, labels, spec.n_classes)
}

/// Zero mean, unit variance per channel over the whole set.
fn standardize(pixels: &mut [f64], plane: usize) {
    let count = (pixels.len() / 3) as f64;
    let mut mean = [0.0; 3];
    for (i, chunk) in pixels.chunks(plane).enumerate() {
        mean[i % 3] += chunk.iter().sum::<f64>() / count;
    }
    let mut var = [0.0; 3];
    for (i, chunk) in pixels.chunks(plane).enumerate() {
        var[i % 3] += chunk.iter().map(|v| (v - mean[i % 3]).powi(2)).sum::<f64>() / count;
    }
    let std = var.map(|v| v.sqrt().max(1e-12));
    for (i, chunk) in pixels.chunks_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = (*v - mean[i % 3]) / std[i % 3]);
    }
}

/// Seeded random partition into `(train, val)`, `train` holding
/// `round(fraction * N)` samples (at least one in each part).
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!("split fraction must lie in (0, 1), got {fraction}")));
    }
    let (train, val) = split_indices(data.len(), fraction, seed);
    Ok((data.subset(&train)?, data.subset(&val)?))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Sample order for one epoch: a permutation fixed by `(seed, epoch)`, cut
/// into full batches. The trailing partial batch is dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Data(format!("batch size {batch_size} invalid for {n} samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks_exact(batch_size).map(<[usize]>::to_vec).collect())
}

/// Shuffled full batches of one epoch.
pub fn batches(data: &Dataset, batch_size: usize, seed: u64, epoch: u64) -> Result<impl Iterator<Item = Batch> + '_> {
    let order = batch_indices(data.len(), batch_size, seed, epoch)?;
    Ok(order.into_iter().map(move |idx| data.batch(&idx)))
}

/// Every sample once, in order. A trailing batch of one joins the previous
/// batch so batch statistics stay defined.
pub fn eval_indices(n: usize, batch_size: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 || n < 2 {
        return Err(Error::Data(format!("evaluation needs batch size and sample count >= 2, got {batch_size}, {n}")));
    }
    let mut out: Vec<Vec<usize>> = (0..n).collect::<Vec<_>>().chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    Ok(out)
}

//! Labeled image batches and the procedural "textured blobs" toy task.
//!
//! Each sample is generated from its own construction key (split offset plus
//! index), so train and validation images never share a key and the whole set
//! is a pure function of the seed.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sadag_autodiff::Array;

use crate::error::{invalid, Result};
use crate::rng::sample_rng;

/// `N x C x H x W` images with one class label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Array,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(invalid("dataset", format!("images must be rank 4, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(invalid("dataset", format!("{} images but {} labels", images.shape()[0], labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(invalid("dataset", format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: gather_rows(&self.images, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Rows `indices` of a batch-major array, in the given order.
pub fn gather_rows(a: &Array, indices: &[usize]) -> Array {
    let mut shape = a.shape().to_vec();
    let row = a.numel() / shape[0].max(1);
    shape[0] = indices.len();
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        data.extend_from_slice(&a.data()[i * row..(i + 1) * row]);
    }
    Array::new(shape, data).expect("gathered rows keep the row size")
}

/// Contiguous rows `start..start + len`.
pub fn row_range(a: &Array, start: usize, len: usize) -> Array {
    let idx: Vec<usize> = (start..start + len).collect();
    gather_rows(a, &idx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyParams {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self { classes: 4, channels: 3, height: 16, width: 16, train_size: 2048, val_size: 1024 }
    }
}

impl ToyParams {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("toy dataset", "need at least 2 classes"));
        }
        if self.channels == 0 || self.height < 4 || self.width < 4 {
            return Err(invalid(
                "toy dataset",
                format!("image shape {}x{}x{} too small", self.channels, self.height, self.width),
            ));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(invalid("toy dataset", "train and validation splits must be non-empty"));
        }
        Ok(())
    }
}

/// Deterministic `(train, validation)` pair. Labels cycle through the classes,
/// so each split's histogram is balanced within one sample.
pub fn make_textured_blobs(params: &ToyParams, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    params.validate()?;
    let split = |offset: u64, n: usize| -> Result<LabeledDataset> {
        let per = params.channels * params.height * params.width;
        let mut data = Vec::with_capacity(n * per);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % params.classes;
            data.extend(render_sample(params, seed, offset + i as u64, label));
            labels.push(label);
        }
        let images = Array::new(vec![n, params.channels, params.height, params.width], data)?;
        LabeledDataset::new(images, labels, params.classes)
    };
    let train = split(0, params.train_size)?;
    let val = split(params.train_size as u64, params.val_size)?;
    Ok((train, val))
}

fn render_sample(p: &ToyParams, seed: u64, key: u64, label: usize) -> Vec<f64> {
    let mut rng = sample_rng(seed, key);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let k = label as f64;
    let classes = p.classes as f64;

    // Class cues: blob hue, texture frequency and orientation. Each is jittered
    // enough that no single cue separates the classes perfectly.
    let hue = 2.0 * PI * k / classes + 0.45 * gauss();
    let freq = 1.5 + 1.2 * k + 0.5 * gauss();
    let theta = PI * k / classes + 0.35 * gauss();
    let blob_amp = 0.9 + 0.25 * gauss();
    let tex_amp = 0.35 + 0.1 * gauss();
    let phase = 2.0 * PI * gauss();
    let noise = 0.25;

    let mut rng = sample_rng(seed, key ^ (1 << 40));
    let cx = rng.random_range(0.25..0.75) * p.width as f64;
    let cy = rng.random_range(0.25..0.75) * p.height as f64;
    let radius = rng.random_range(0.15..0.3) * p.height as f64;
    let background: Vec<f64> = (0..p.channels).map(|_| rng.random_range(-0.4..0.4)).collect();

    let color: Vec<f64> = (0..p.channels).map(|c| (hue + 2.0 * PI * c as f64 / p.channels as f64).cos()).collect();
    let (st, ct) = theta.sin_cos();
    let mut out = Vec::with_capacity(p.channels * p.height * p.width);
    for c in 0..p.channels {
        for y in 0..p.height {
            for x in 0..p.width {
                let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
                let d2 = (xf - cx).powi(2) + (yf - cy).powi(2);
                let blob = blob_amp * (-d2 / (2.0 * radius * radius)).exp();
                let u = (xf * ct + yf * st) / p.width as f64;
                let tex = tex_amp * (2.0 * PI * freq * u + phase).sin();
                let n: f64 = StandardNormal.sample(&mut rng);
                let v = background[c] + blob * color[c] + tex * (0.5 + 0.5 * color[c]) + noise * n;
                out.push(v.tanh());
            }
        }
    }
    out
}

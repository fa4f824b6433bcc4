//! Synthetic calibration data: BN-statistics warm-up of a generator and its
//! embeddings, then joint descent on the full generation objective.
//!
//! Embeddings are split once into contiguous mini-batches that stay fixed for
//! the whole run, including the final emission (the generator normalizes
//! with batch statistics, so the partition is part of the output).

use std::collections::VecDeque;

use sadag_autodiff::{grad, Array, Graph, Tensor};
use sha2::{Digest, Sha256};

use crate::data::row_range;
use crate::error::{invalid, Result, SadagError};
use crate::losses::{bn_loss_of_batch, final_loss, neighbor_perturbation, FrozenPair, LossWeights};
use crate::nets::{GeneratorArch, GeneratorNet, TeacherNet};
use crate::optim::{Adam, AdamParams, ExponentialLr, PlateauLr, RowAdam};
use crate::quant::QuantNet;
use crate::rng::{normal_array, stream_rng, Stream};

const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 50;
const TRACE_LEN: usize = 8;
const G_DECAY: f64 = 0.95;
const Z_PLATEAU_FACTOR: f64 = 0.5;
const Z_PLATEAU_PATIENCE: usize = 3;
/// Share of perturbations that may fall back to a random direction in one
/// epoch before the dataset is flagged.
const FALLBACK_WARNING_RATE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    /// Number of images `T`.
    pub images: usize,
    /// Warm-up steps `N_w`, one mini-batch each.
    pub warmup_steps: usize,
    /// Generation epochs `N_g` over all mini-batches.
    pub epochs: usize,
    pub nu: f64,
    pub zeta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_g: f64,
    pub lr_z: f64,
    pub batch: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            images: 1024,
            warmup_steps: 200,
            epochs: 50,
            nu: 2.0,
            zeta: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lr_g: 0.1,
            lr_z: 0.01,
            batch: 128,
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be positive and finite, got {v}")))
    }
}

fn non_negative(name: &'static str, v: f64) -> Result<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(name, format!("must be non-negative and finite, got {v}")))
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images < 2 || self.batch < 2 {
            return Err(invalid("generation sizes", "need at least 2 images per batch"));
        }
        if self.images % self.batch == 1 {
            return Err(invalid(
                "generation sizes",
                format!("{} images in batches of {} leave a single-image batch", self.images, self.batch),
            ));
        }
        positive("nu", self.nu)?;
        positive("lr_g", self.lr_g)?;
        positive("lr_z", self.lr_z)?;
        non_negative("zeta", self.zeta)?;
        non_negative("lambda1", self.lambda1)?;
        non_negative("lambda2", self.lambda2)
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda1: self.lambda1, lambda2: self.lambda2, zeta: self.zeta }
    }

    /// Contiguous `(start, len)` mini-batches over the embeddings.
    pub fn partition(&self) -> Vec<(usize, usize)> {
        (0..self.images).step_by(self.batch).map(|s| (s, self.batch.min(self.images - s))).collect()
    }

    /// Stable digest of every field.
    pub fn fingerprint(&self) -> u64 {
        let text = format!(
            "T={};Nw={};Ng={};nu={:e};zeta={:e};l1={:e};l2={:e};lrg={:e};lrz={:e};b={}",
            self.images,
            self.warmup_steps,
            self.epochs,
            self.nu,
            self.zeta,
            self.lambda1,
            self.lambda2,
            self.lr_g,
            self.lr_z,
            self.batch
        );
        digest_u64(text.as_bytes())
    }
}

/// First eight bytes of SHA-256, little-endian.
pub fn digest_u64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// The generator and its embedding matrix `Z` (`T x z_dim`).
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    pub generator: GeneratorNet,
    pub z: Array,
}

impl Latents {
    /// Fresh generator and `Z ~ N(0, I)`.
    pub fn init(arch: &GeneratorArch, images: usize, seed: u64) -> Result<Self> {
        let generator = GeneratorNet::init(arch, seed)?;
        let z = normal_array(&mut stream_rng(seed, Stream::Latent), &[images, arch.z_dim], 1.0);
        Ok(Self { generator, z })
    }

    fn check(&self, cfg: &GenerationConfig) -> Result<()> {
        if self.z.shape() != [cfg.images, self.generator.arch.z_dim] {
            return Err(invalid("embeddings", format!("shape {:?} for {} images", self.z.shape(), cfg.images)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: u64,
    /// Emitted straight after warm-up, with no generation epochs.
    pub warmup_only: bool,
    /// More than half of the perturbations in some epoch fell back to a
    /// random direction.
    pub fallback_warning: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    /// `T x C x H x W`, values in `[-1, 1]`.
    pub images: Array,
    pub provenance: Provenance,
}

impl SynthDataset {
    pub fn new(images: Array, provenance: Provenance) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] == 0 {
            return Err(invalid("synthetic images", format!("shape {:?}", images.shape())));
        }
        if let Some(v) = images.data().iter().find(|v| !(v.abs() <= 1.0)) {
            return Err(invalid("synthetic images", format!("pixel {v} outside [-1, 1]")));
        }
        Ok(Self { images, provenance })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Aborts a stage on non-finite losses or after a long run of losses far above
/// the first one.
struct DivergenceGuard {
    stage: &'static str,
    initial: Option<f64>,
    over: usize,
    recent: VecDeque<f64>,
}

impl DivergenceGuard {
    fn new(stage: &'static str) -> Self {
        Self { stage, initial: None, over: 0, recent: VecDeque::with_capacity(TRACE_LEN) }
    }

    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(SadagError::NonFinite { stage: self.stage, iteration: step });
        }
        if self.recent.len() == TRACE_LEN {
            self.recent.pop_front();
        }
        self.recent.push_back(loss);
        let initial = *self.initial.get_or_insert(loss);
        if loss > DIVERGENCE_FACTOR * initial {
            self.over += 1;
            if self.over >= DIVERGENCE_PATIENCE {
                return Err(SadagError::Diverged {
                    stage: self.stage,
                    step,
                    loss,
                    initial,
                    trace: self.recent.iter().copied().collect(),
                });
            }
        } else {
            self.over = 0;
        }
        Ok(())
    }
}

/// Gradients of `loss` with respect to the generator leaves and the
/// embedding-rows leaf.
fn descent_grads(loss: &Tensor, gen_leaves: &[Tensor], z_leaf: &Tensor) -> Result<(Vec<Array>, Array)> {
    let mut wrt: Vec<&Tensor> = gen_leaves.iter().collect();
    wrt.push(z_leaf);
    let mut grads: Vec<Array> = grad(loss, &wrt, false)?.into_iter().map(|t| t.to_array()).collect();
    let gz = grads.pop().expect("embedding gradient");
    Ok((grads, gz))
}

/// Optimizer state for one stage: Adam on the generator, per-row Adam on `Z`.
struct Descent {
    gen_opt: Adam,
    z_opt: RowAdam,
}

impl Descent {
    fn new(lat: &Latents) -> Self {
        Self {
            gen_opt: Adam::new(AdamParams::default()),
            z_opt: RowAdam::new(AdamParams::default(), lat.z.shape()[0], lat.z.shape()[1]),
        }
    }

    fn step(
        &mut self,
        lat: &mut Latents,
        start: usize,
        g_gen: &[Array],
        g_z: &Array,
        lr_g: f64,
        lr_z: f64,
    ) -> Result<()> {
        let mut params: Vec<&mut Array> = lat.generator.params.iter_mut().collect();
        self.gen_opt.step(&mut params, g_gen, lr_g)?;
        self.z_opt.step_rows(&mut lat.z, start, g_z, lr_z)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WarmupReport {
    /// BN loss of every step, before that step's update.
    pub losses: Vec<f64>,
}

/// `N_w` Adam steps on the BN loss, cycling through the mini-batches.
pub fn warmup(lat: &mut Latents, teacher: &TeacherNet, cfg: &GenerationConfig) -> Result<WarmupReport> {
    cfg.validate()?;
    lat.check(cfg)?;
    let batches = cfg.partition();
    let mut descent = Descent::new(lat);
    let mut guard = DivergenceGuard::new("warm-up");
    let mut losses = Vec::with_capacity(cfg.warmup_steps);
    for step in 0..cfg.warmup_steps {
        let (start, len) = batches[step % batches.len()];
        let g = Graph::new();
        let gp = lat.generator.bind(Some(&g));
        let zl = g.leaf(row_range(&lat.z, start, len));
        let x = lat.generator.forward_tensors(&gp, &zl)?;
        let loss = bn_loss_of_batch(teacher, &x)?;
        let value = loss.item()?;
        guard.check(step, value)?;
        losses.push(value);
        let (g_gen, g_z) = descent_grads(&loss, &gp, &zl)?;
        descent.step(lat, start, &g_gen, &g_z, cfg.lr_g, cfg.lr_z)?;
    }
    Ok(WarmupReport { losses })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationReport {
    /// Mean objective over the mini-batches of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Objective of the first mini-batch, before any generation update.
    pub first_loss: Option<f64>,
    pub perturbation_calls: usize,
    /// Largest `| ||eps_i|| - nu |` seen over the run.
    pub max_norm_error: f64,
    pub fallbacks_per_epoch: Vec<usize>,
    /// Gradient-matching pairs skipped because a gradient was exactly zero.
    pub zero_pairs: usize,
}

/// Emits `G(Z)` batch by batch over the fixed partition.
pub fn emit_images(lat: &Latents, cfg: &GenerationConfig) -> Result<Array> {
    lat.check(cfg)?;
    let params = lat.generator.bind(None);
    let parts: Vec<Tensor> = cfg
        .partition()
        .into_iter()
        .map(|(s, n)| lat.generator.forward_tensors(&params, &Tensor::constant(row_range(&lat.z, s, n))))
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0)?.to_array())
}

/// `N_g` epochs of descent on the full objective for `Z` and the generator,
/// with both nets of `pair` frozen. Each mini-batch first draws its
/// neighbor perturbations from the current generator.
pub fn generate(
    lat: &mut Latents,
    teacher: &TeacherNet,
    quant: &QuantNet,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<(SynthDataset, GenerationReport)> {
    cfg.validate()?;
    lat.check(cfg)?;
    let pair = FrozenPair::new(teacher, quant)?;
    let weights = cfg.weights();
    let batches = cfg.partition();
    let mut perturb_rng = stream_rng(seed, Stream::Perturbation);
    let mut descent = Descent::new(lat);
    let mut lr_g = ExponentialLr { lr: cfg.lr_g, gamma: G_DECAY };
    let mut lr_z = PlateauLr::new(cfg.lr_z, Z_PLATEAU_FACTOR, Z_PLATEAU_PATIENCE);
    let mut guard = DivergenceGuard::new("generation");
    let mut report = GenerationReport::default();
    let mut warning = false;
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut epoch_total = 0.0;
        let mut fallbacks = 0;
        for &(start, len) in &batches {
            let z_rows = row_range(&lat.z, start, len);
            let eps = if cfg.lambda2 != 0.0 {
                let p = neighbor_perturbation(
                    &lat.generator,
                    &lat.generator.bind(None),
                    &z_rows,
                    &pair,
                    cfg.nu,
                    &mut perturb_rng,
                )?;
                report.perturbation_calls += 1;
                report.max_norm_error = report.max_norm_error.max(p.max_norm_error);
                fallbacks += p.fallbacks;
                Some(p.eps)
            } else {
                None
            };
            let g = Graph::new();
            let gp = lat.generator.bind(Some(&g));
            let zl = g.leaf(z_rows);
            let out = final_loss(&lat.generator, &gp, &zl, eps.as_ref(), &pair, &weights)?;
            let value = out.total.item()?;
            guard.check(step, value)?;
            report.first_loss.get_or_insert(value);
            report.zero_pairs += out.zero_pairs;
            epoch_total += value;
            let (g_gen, g_z) = descent_grads(&out.total, &gp, &zl)?;
            descent.step(lat, start, &g_gen, &g_z, lr_g.lr, lr_z.lr)?;
            step += 1;
        }
        let mean = epoch_total / batches.len() as f64;
        report.epoch_losses.push(mean);
        report.fallbacks_per_epoch.push(fallbacks);
        if cfg.lambda2 != 0.0 && fallbacks as f64 > FALLBACK_WARNING_RATE * cfg.images as f64 {
            warning = true;
        }
        lr_g.step();
        lr_z.step(mean);
    }
    let images = emit_images(lat, cfg)?;
    let ds = SynthDataset::new(
        images,
        Provenance { seed, config_hash: cfg.fingerprint(), warmup_only: cfg.epochs == 0, fallback_warning: warning },
    )?;
    Ok((ds, report))
}

/// The BN-loss-only generation loop, written independently of [`generate`]
/// (no quantized net, no perturbations). With zero gradient-term weights the
/// two produce identical datasets.
pub fn generate_bn_only(
    lat: &mut Latents,
    teacher: &TeacherNet,
    cfg: &GenerationConfig,
    seed: u64,
) -> Result<(SynthDataset, GenerationReport)> {
    cfg.validate()?;
    lat.check(cfg)?;
    let batches = cfg.partition();
    let mut descent = Descent::new(lat);
    let mut lr_g = cfg.lr_g;
    let mut lr_z = PlateauLr::new(cfg.lr_z, Z_PLATEAU_FACTOR, Z_PLATEAU_PATIENCE);
    let mut guard = DivergenceGuard::new("generation");
    let mut report = GenerationReport::default();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for &(start, len) in &batches {
            let g = Graph::new();
            let gp = lat.generator.bind(Some(&g));
            let zl = g.leaf(row_range(&lat.z, start, len));
            let x = lat.generator.forward_tensors(&gp, &zl)?;
            let loss = bn_loss_of_batch(teacher, &x)?;
            let value = loss.item()?;
            guard.check(step, value)?;
            report.first_loss.get_or_insert(value);
            total += value;
            let (g_gen, g_z) = descent_grads(&loss, &gp, &zl)?;
            descent.step(lat, start, &g_gen, &g_z, lr_g, lr_z.lr)?;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        report.epoch_losses.push(mean);
        report.fallbacks_per_epoch.push(0);
        lr_g *= G_DECAY;
        lr_z.step(mean);
    }
    let ds = SynthDataset::new(
        emit_images(lat, cfg)?,
        Provenance { seed, config_hash: cfg.fingerprint(), warmup_only: cfg.epochs == 0, fallback_warning: false },
    )?;
    Ok((ds, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::default().validate().is_ok());
        let bad = |f: fn(&mut GenerationConfig)| {
            let mut c = GenerationConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.nu = -1.0));
        assert!(bad(|c| c.lr_g = 0.0));
        assert!(bad(|c| c.lambda1 = f64::NAN));
        assert!(bad(|c| c.images = 129));
        assert!(bad(|c| c.batch = 1));
    }

    #[test]
    fn partition_covers_all_rows() {
        let c = GenerationConfig { images: 300, ..Default::default() };
        assert_eq!(c.partition(), vec![(0, 128), (128, 128), (256, 44)]);
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = GenerationConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.zeta = 0.1;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn guard_aborts_on_sustained_blowup() {
        let mut g = DivergenceGuard::new("test");
        g.check(0, 1.0).unwrap();
        for s in 1..DIVERGENCE_PATIENCE {
            g.check(s, 11.0).unwrap();
        }
        g.check(60, 5.0).unwrap();
        for s in 0..DIVERGENCE_PATIENCE - 1 {
            g.check(s, 11.0).unwrap();
        }
        assert!(matches!(g.check(99, 11.0), Err(SadagError::Diverged { .. })));
        assert!(matches!(g.check(100, f64::NAN), Err(SadagError::NonFinite { .. })));
    }

    #[test]
    fn synth_dataset_bounds() {
        let p = Provenance { seed: 0, config_hash: 0, warmup_only: false, fallback_warning: false };
        assert!(SynthDataset::new(Array::full([1, 1, 2, 2], 1.5), p.clone()).is_err());
        assert!(SynthDataset::new(Array::full([1, 1, 2, 2], -1.0), p).is_ok());
    }
}

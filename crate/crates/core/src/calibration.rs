//! Calibration of a quantized net on a set of (unlabeled) images, evaluation,
//! sharpness curves, and gradient-matched subset selection.

use rand::seq::{index, SliceRandom};
use sadag_autodiff::{grad, Array, Graph, Tensor};

use crate::data::{gather_rows, row_range, LabeledDataset};
use crate::error::{invalid, Result, SadagError};
use crate::losses::{
    cosine_of_sums, reconstruction_loss, reconstruction_loss_value, sam_loss, sample_fc_gradients, GradVector,
    SharpnessProbe,
};
use crate::nets::{BnMode, TeacherNet};
use crate::optim::{Adam, AdamParams};
use crate::quant::{annealed_beta, init_quantnet, round_regularizer, BitWidths, QuantNet};
use crate::rng::{stream_rng, Stream};
use crate::SadagError::Degenerate;

const CHUNK: usize = 256;
/// Largest pool the exhaustive selection oracle accepts.
pub const EXHAUSTIVE_MAX_POOL: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibConfig {
    /// Iterations `N_q`.
    pub iterations: usize,
    /// Step size `alpha`.
    pub lr: f64,
    pub batch: usize,
    pub rho_eval: f64,
    pub reg_weight: f64,
    /// Also descend on the continuous weights (plain gradient steps).
    pub fine_tune: bool,
}

impl Default for CalibConfig {
    fn default() -> Self {
        Self { iterations: 500, lr: 0.05, batch: 32, rho_eval: 0.05, reg_weight: 0.01, fine_tune: false }
    }
}

impl CalibConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(invalid("calibration config", "iterations and batch must be at least 1"));
        }
        for (name, v) in [("alpha", self.lr), ("rho_eval", self.rho_eval), ("reg_weight", self.reg_weight)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(invalid("calibration config", format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibReport {
    /// Mini-batch objective (element-mean reconstruction plus weighted
    /// regularizer).
    pub losses: Vec<f64>,
    /// Unweighted rounding regularizer at each iteration.
    pub regularizer: Vec<f64>,
    /// Per-sample mean reconstruction loss on the whole set with hard
    /// rounding, before and after.
    pub recon_before: f64,
    pub recon_after: f64,
}

/// Mini-batch index order: a fresh shuffle per pass over the set.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: 0, rng: stream_rng(seed, Stream::Calibration) };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, batch: usize) -> Vec<usize> {
        let n = self.order.len();
        let mut out = Vec::with_capacity(batch.min(n));
        while out.len() < batch.min(n) {
            if self.pos == n {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Teacher layer outputs for every image, computed once.
struct TeacherCache {
    layers: Vec<Array>,
}

impl TeacherCache {
    fn new(t: &TeacherNet, x: &Array) -> Result<Self> {
        let n = x.shape()[0];
        let p = t.bind(None);
        let mut parts: Vec<Vec<Tensor>> = Vec::new();
        for start in (0..n).step_by(CHUNK) {
            let xc = Tensor::constant(row_range(x, start, CHUNK.min(n - start)));
            let out = t.forward_tensors(&p, &xc, BnMode::Stored, false)?;
            parts.push(out.layer_outputs().into_iter().cloned().collect());
        }
        let layers = (0..parts[0].len())
            .map(|l| {
                let refs: Vec<&Tensor> = parts.iter().map(|p| &p[l]).collect();
                Ok(Tensor::concat(&refs, 0)?.to_array())
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn gather(&self, idx: &[usize]) -> Vec<Tensor> {
        self.layers.iter().map(|a| Tensor::constant(gather_rows(a, idx))).collect()
    }
}

fn check_images(q: &QuantNet, x: &Array) -> Result<()> {
    let want = q.arch().input_shape();
    if x.rank() != 4 || x.shape()[0] == 0 || x.shape()[1..] != want {
        return Err(invalid(
            "calibration images",
            format!("shape {:?}, expected (N, {}, {}, {})", x.shape(), want[0], want[1], want[2]),
        ));
    }
    Ok(())
}

/// `N_q` Adam steps on the rounding logits (and, with `fine_tune`, plain
/// gradient steps on the continuous weights) against the reconstruction
/// loss, averaged over every output element of the mini-batch, plus the
/// weighted, annealed rounding regularizer. Unset activation ranges are
/// frozen from the first mini-batch.
pub fn calibrate(q: &mut QuantNet, t: &TeacherNet, x: &Array, cfg: &CalibConfig, seed: u64) -> Result<CalibReport> {
    cfg.validate()?;
    check_images(q, x)?;
    if q.arch() != &t.arch {
        return Err(invalid("network pair", "quantized and teacher architectures differ"));
    }
    let n = x.shape()[0];
    let mut sampler = BatchSampler::new(n, seed);
    let first = sampler.next(cfg.batch);
    q.observe_activation_ranges(&gather_rows(x, &first))?;
    let recon_before = reconstruction_loss_value(q, t, x)? / n as f64;
    let cache = TeacherCache::new(t, x)?;

    let mut adam = Adam::new(AdamParams::default());
    let mut report = CalibReport {
        losses: Vec::with_capacity(cfg.iterations),
        regularizer: Vec::with_capacity(cfg.iterations),
        recon_before,
        recon_after: recon_before,
    };
    let quantized: Vec<usize> = (0..q.weight_layers()).filter(|&i| q.weight_q[i].is_some()).collect();
    if quantized.is_empty() && !cfg.fine_tune {
        return Ok(report);
    }
    let mut idx = first;
    for it in 0..cfg.iterations {
        if it > 0 {
            idx = sampler.next(cfg.batch);
        }
        let beta = annealed_beta(it, cfg.iterations);
        let g = Graph::new();
        let bind = q.bind_soft(&g, cfg.fine_tune)?;
        let xb = Tensor::constant(gather_rows(x, &idx));
        let out = q.forward_tensors(&bind.tensors, &xb, false)?;
        let targets = cache.gather(&idx);
        let t_refs: Vec<&Tensor> = targets.iter().collect();
        let elements: usize = targets.iter().map(Tensor::numel).sum();
        let recon = reconstruction_loss(&out.layer_outputs(), &t_refs)?.scale(1.0 / elements as f64);
        let mut loss = recon;
        let mut reg_total = 0.0;
        for &i in &quantized {
            let v = bind.v[i].as_ref().expect("quantized layer has logits");
            let r = round_regularizer(v, beta)?;
            reg_total += r.item()?;
            loss = loss.add(&r.scale(cfg.reg_weight))?;
        }
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(SadagError::NonFinite { stage: "calibration", iteration: it });
        }
        report.losses.push(value);
        report.regularizer.push(reg_total);

        let v_leaves: Vec<&Tensor> = quantized.iter().map(|&i| bind.v[i].as_ref().expect("logits")).collect();
        let w_leaves: Vec<&Tensor> = bind.w.iter().flatten().collect();
        let mut wrt = v_leaves.clone();
        wrt.extend(&w_leaves);
        let grads: Vec<Array> = grad(&loss, &wrt, false)?.into_iter().map(|t| t.to_array()).collect();
        let (gv, gw) = grads.split_at(v_leaves.len());
        {
            let mut vs: Vec<&mut Array> = q.weight_q.iter_mut().flatten().map(|wq| &mut wq.v).collect();
            adam.step(&mut vs, gv, cfg.lr)?;
        }
        for (k, g) in gw.iter().enumerate() {
            let w = q.weight_mut(k);
            *w = w.zip_map(g, "weight step", |a, b| a - cfg.lr * b)?;
        }
        for wq in q.weight_q.iter_mut().flatten() {
            wq.beta = beta;
        }
    }
    report.recon_after = reconstruction_loss_value(q, t, x)? / n as f64;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub top1: f64,
    /// Per-sample mean reconstruction loss against the teacher.
    pub recon: f64,
    /// Per-sample mean sharpness at `rho`; `None` when the loss gradient
    /// vanishes (e.g. the teacher evaluated against itself).
    pub sharpness: Option<f64>,
    pub probe: Option<SharpnessProbe>,
    pub rho: f64,
    pub samples: usize,
}

/// Top-1 accuracy, reconstruction loss and sharpness of `q` on `ds`.
pub fn evaluate(q: &QuantNet, t: &TeacherNet, ds: &LabeledDataset, rho: f64) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(invalid("evaluation set", "empty"));
    }
    check_images(q, &ds.images)?;
    let n = ds.len() as f64;
    let probe = match sam_loss(q, t, &ds.images, rho) {
        Ok(p) => Some(p),
        Err(Degenerate { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        top1: q.accuracy(ds)?,
        recon: probe.map(|p| p.base).unwrap_or(reconstruction_loss_value(q, t, &ds.images)?) / n,
        sharpness: probe.map(|p| p.sharpness() / n),
        probe,
        rho,
        samples: ds.len(),
    })
}

/// [`evaluate`] for the full-precision teacher itself.
pub fn evaluate_teacher(t: &TeacherNet, ds: &LabeledDataset, rho: f64) -> Result<EvalReport> {
    let fp = init_quantnet(t, &BitWidths::full_precision(&t.arch))?;
    evaluate(&fp, t, ds, rho)
}

/// One sharpness probe of the reconstruction loss on `x` per radius.
pub fn measure_sharpness_curve(q: &QuantNet, t: &TeacherNet, x: &Array, radii: &[f64]) -> Result<Vec<SharpnessProbe>> {
    if radii.is_empty() || radii.windows(2).any(|w| !(w[0] <= w[1])) || radii.iter().any(|&r| !(r >= 0.0)) {
        return Err(invalid("sharpness radii", format!("{radii:?} (need non-negative, ascending)")));
    }
    radii.iter().map(|&rho| sam_loss(q, t, x, rho)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Pool indices in the order they were picked.
    pub indices: Vec<usize>,
    /// `cos(sum of selected gradients, sum of pool gradients)`.
    pub cosine: f64,
}

fn add_into(acc: &mut [f64], g: &GradVector) {
    for (a, v) in acc.iter_mut().zip(&g.values) {
        *a += v;
    }
}

/// Greedy forward selection of `k` gradients whose sum best aligns with the
/// pool's sum. Ties go to the lowest index.
pub fn greedy_select(grads: &[GradVector], k: usize) -> Result<Selection> {
    if k == 0 || k > grads.len() {
        return Err(invalid("subset size", format!("k = {k} for a pool of {}", grads.len())));
    }
    let dim = grads[0].values.len();
    let mut target = vec![0.0; dim];
    grads.iter().for_each(|g| add_into(&mut target, g));
    let mut current = vec![0.0; dim];
    let mut taken = vec![false; grads.len()];
    let mut indices = Vec::with_capacity(k);
    let mut cosine = f64::NEG_INFINITY;
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in grads.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let mut cand = current.clone();
            add_into(&mut cand, g);
            let c = match cosine_of_sums(&cand, &target) {
                Ok(c) => c,
                Err(Degenerate { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((j, c));
            }
        }
        let (j, c) = best.expect("k <= pool size");
        taken[j] = true;
        add_into(&mut current, &grads[j]);
        indices.push(j);
        cosine = c;
    }
    if !cosine.is_finite() {
        return Err(SadagError::Degenerate { what: "aggregate gradient", detail: "pool gradients sum to zero".into() });
    }
    Ok(Selection { indices, cosine })
}

/// Best `k`-subset by exhaustive search; only for pools of at most
/// [`EXHAUSTIVE_MAX_POOL`].
pub fn exhaustive_select(grads: &[GradVector], k: usize) -> Result<Selection> {
    if grads.len() > EXHAUSTIVE_MAX_POOL || k == 0 || k > grads.len() {
        return Err(invalid("exhaustive selection", format!("k = {k}, pool {}", grads.len())));
    }
    let dim = grads[0].values.len();
    let mut target = vec![0.0; dim];
    grads.iter().for_each(|g| add_into(&mut target, g));
    let mut best: Option<Selection> = None;
    for mask in 0u32..(1 << grads.len()) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let idx: Vec<usize> = (0..grads.len()).filter(|&i| mask & (1 << i) != 0).collect();
        let mut s = vec![0.0; dim];
        idx.iter().for_each(|&i| add_into(&mut s, &grads[i]));
        let Ok(c) = cosine_of_sums(&s, &target) else { continue };
        if best.as_ref().is_none_or(|b| c > b.cosine) {
            best = Some(Selection { indices: idx, cosine: c });
        }
    }
    best.ok_or_else(|| SadagError::Degenerate {
        what: "aggregate gradient",
        detail: "every subset sums to zero".into(),
    })
}

/// Greedy gradient-matched subset of `pool`, using the per-sample fc
/// gradients of `q` against `t`.
pub fn select_subset(pool: &Array, k: usize, q: &QuantNet, t: &TeacherNet) -> Result<Selection> {
    if k == 0 {
        return Err(invalid("subset size", "k = 0"));
    }
    check_images(q, pool)?;
    greedy_select(&sample_fc_gradients(q, t, pool, 0)?, k)
}

/// Indices of a `pool_size` pool drawn from `n` images, and the remaining
/// held-out indices, both ascending.
pub fn split_pool(n: usize, pool_size: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if pool_size == 0 || pool_size >= n {
        return Err(invalid("pool size", format!("{pool_size} of {n} images leaves nothing held out")));
    }
    let mut pool = index::sample(&mut stream_rng(seed, Stream::Pool), n, pool_size).into_vec();
    pool.sort_unstable();
    let mut in_pool = vec![false; n];
    pool.iter().for_each(|&i| in_pool[i] = true);
    let rest = (0..n).filter(|&i| !in_pool[i]).collect();
    Ok((pool, rest))
}

/// `k` distinct pool indices drawn uniformly.
pub fn random_subset(pool_len: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 || k > pool_len {
        return Err(invalid("subset size", format!("k = {k} for a pool of {pool_len}")));
    }
    Ok(index::sample(&mut stream_rng(seed, Stream::Selection), pool_len, k).into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(i: usize, v: &[f64]) -> GradVector {
        GradVector { values: v.to_vec(), normalized: false, source: i }
    }

    #[test]
    fn greedy_full_pool_has_unit_cosine() {
        let g = vec![gv(0, &[1.0, 0.0]), gv(1, &[0.0, 2.0]), gv(2, &[-1.0, 1.0])];
        let s = greedy_select(&g, 3).unwrap();
        assert!((s.cosine - 1.0).abs() < 1e-12);
        let mut idx = s.indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2]);
        assert!(greedy_select(&g, 0).is_err());
        assert!(greedy_select(&g, 4).is_err());
    }

    #[test]
    fn greedy_ties_take_lowest_index() {
        let g = vec![gv(0, &[1.0, 0.0]), gv(1, &[1.0, 0.0]), gv(2, &[0.0, 1.0])];
        // Target (2, 1): the first two candidates tie.
        assert_eq!(greedy_select(&g, 1).unwrap().indices, vec![0]);
    }

    #[test]
    fn zero_pool_is_degenerate() {
        let g = vec![gv(0, &[0.0, 0.0]), gv(1, &[0.0, 0.0])];
        assert!(greedy_select(&g, 1).is_err());
        assert!(exhaustive_select(&g, 1).is_err());
    }

    #[test]
    fn random_subset_is_distinct_and_seeded() {
        let a = random_subset(256, 32, 3).unwrap();
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 32);
        assert_eq!(a, random_subset(256, 32, 3).unwrap());
        assert_ne!(a, random_subset(256, 32, 4).unwrap());
        assert!(random_subset(4, 5, 0).is_err());
    }

    #[test]
    fn pool_split_is_a_partition() {
        let (pool, rest) = split_pool(20, 8, 1).unwrap();
        assert_eq!(pool.len(), 8);
        let mut all: Vec<usize> = pool.iter().chain(&rest).copied().collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_ne!(pool, split_pool(20, 8, 2).unwrap().0);
        assert!(split_pool(8, 8, 0).is_err());
    }

    #[test]
    fn sampler_visits_every_index_once_per_pass() {
        let mut s = BatchSampler::new(10, 1);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next(2)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(s.next(32).len(), 10);
    }

    #[test]
    fn config_validation() {
        assert!(CalibConfig::default().validate().is_ok());
        assert!(CalibConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(CalibConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(CalibConfig { lr: 0.0, ..Default::default() }.validate().is_ok());
    }
}

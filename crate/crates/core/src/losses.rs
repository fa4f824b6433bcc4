//! Reconstruction, sharpness, BN-statistics, gradient-matching and diversity
//! objectives, plus the analytic fc-layer gradient and Hessian they rest on.
//!
//! For one sample with fc input `a` (length `d`, taken from the quantized net)
//! and logit residual `r = q_logits - t_logits` (length `C`), the gradient of
//! the reconstruction loss with respect to the `d x C` fc weight is the outer
//! product `a r^T`, flattened row-major. Over a batch `A` the fc-only Hessian
//! is block diagonal: `C` copies of `A^T A`, one per class, when parameters
//! are ordered class-major (`k * d + i` for weight `(i, k)`).

use rand_chacha::ChaCha8Rng;
use sadag_autodiff::{grad, Array, Graph, Tensor};

use crate::data::row_range;
use crate::error::{degenerate, invalid, Result};
use crate::nets::{BnMode, ClassifierTensors, ConvBlock, ForwardOut, GeneratorNet, TeacherNet};
use crate::quant::QuantNet;
use crate::rng::normal_array;

const CHUNK: usize = 256;
/// Keeps row norms differentiable at zero; far below any real squared norm.
const TINY: f64 = 1e-300;
/// Ascent directions shorter than this fall back to the random offset.
const MIN_ASCENT_NORM: f64 = 1e-20;
/// Relative size of the random offset at which the perturbation is
/// linearized.
pub const OFFSET_FRACTION: f64 = 1e-3;

/// `1/2 sum_l ||t_l - q_l||^2`, summed over the batch.
pub fn reconstruction_loss(q_out: &[&Tensor], t_out: &[&Tensor]) -> Result<Tensor> {
    if q_out.len() != t_out.len() || q_out.is_empty() {
        return Err(invalid(
            "reconstruction layers",
            format!("{} quantized vs {} teacher outputs", q_out.len(), t_out.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (l, (q, t)) in q_out.iter().zip(t_out).enumerate() {
        if q.shape() != t.shape() {
            return Err(invalid("reconstruction layers", format!("layer {l}: {:?} vs {:?}", q.shape(), t.shape())));
        }
        let term = t.sub(q)?.square()?.sum()?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("non-empty").scale(0.5))
}

fn check_pair(q: &QuantNet, t: &TeacherNet) -> Result<()> {
    if q.arch() != &t.arch {
        return Err(invalid("network pair", "quantized and teacher architectures differ"));
    }
    Ok(())
}

/// Reconstruction loss of `x` as a number, evaluated in chunks.
pub fn reconstruction_loss_value(q: &QuantNet, t: &TeacherNet, x: &Array) -> Result<f64> {
    check_pair(q, t)?;
    let (qp, tp) = (q.bind_effective(None)?, t.bind(None));
    let n = x.shape()[0];
    let mut total = 0.0;
    for start in (0..n).step_by(CHUNK) {
        let xc = Tensor::constant(row_range(x, start, CHUNK.min(n - start)));
        let qo = q.forward_tensors(&qp, &xc, false)?;
        let to = t.forward_tensors(&tp, &xc, BnMode::Stored, false)?;
        total += reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs())?.item()?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SharpnessProbe {
    pub rho: f64,
    pub base: f64,
    pub perturbed: f64,
    /// Norm of the perturbation actually applied.
    pub epsilon_norm: f64,
}

impl SharpnessProbe {
    /// `perturbed - base`; may be negative on non-convex landscapes.
    pub fn sharpness(&self) -> f64 {
        self.perturbed - self.base
    }
}

/// `rho * g / ||g||` over the concatenation of all gradient arrays.
pub fn sam_epsilon(grads: &[Array], rho: f64) -> Result<Vec<Array>> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(invalid("perturbation radius", format!("{rho}")));
    }
    if rho == 0.0 {
        return Ok(grads.iter().map(|g| Array::zeros(g.shape())).collect());
    }
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(degenerate("sharpness direction", format!("gradient norm {norm}")));
    }
    Ok(grads.iter().map(|g| g.map(|v| rho * v / norm)).collect())
}

/// Probes `loss` at `params` and at `params + eps`, with `eps` from
/// [`sam_epsilon`].
pub fn sharpness_probe(
    params: &[Array],
    rho: f64,
    loss: &dyn Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<SharpnessProbe> {
    let g = Graph::new();
    let leaves: Vec<Tensor> = params.iter().map(|a| g.leaf(a.clone())).collect();
    let base = loss(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads: Vec<Array> = grad(&base, &refs, false)?.into_iter().map(|t| t.to_array()).collect();
    let eps = sam_epsilon(&grads, rho)?;
    let moved: Vec<Tensor> = params
        .iter()
        .zip(&eps)
        .map(|(p, e)| Ok(Tensor::constant(p.zip_map(e, "sam", |a, b| a + b)?)))
        .collect::<Result<_>>()?;
    Ok(SharpnessProbe {
        rho,
        base: base.item()?,
        perturbed: loss(&moved)?.item()?,
        epsilon_norm: eps.iter().map(|e| e.dot(e)).sum::<f64>().sqrt(),
    })
}

/// Sharpness of the reconstruction loss on `x` with respect to the quantized
/// net's effective (dequantized) conv and fc weights and fc bias.
pub fn sam_loss(q: &QuantNet, t: &TeacherNet, x: &Array, rho: f64) -> Result<SharpnessProbe> {
    check_pair(q, t)?;
    let n = x.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(invalid("sharpness batch", "empty"));
    }
    let effective = q.bind_effective(None)?;
    let mut params: Vec<Array> = effective.convs.iter().map(|c| c.to_array()).collect();
    params.push(effective.fc_w.to_array());
    params.push(effective.fc_b.to_array());
    let tp = t.bind(None);
    let chunks: Vec<(Tensor, ForwardOut)> = (0..n)
        .step_by(CHUNK)
        .map(|start| {
            let xc = Tensor::constant(row_range(x, start, CHUNK.min(n - start)));
            let to = t.forward_tensors(&tp, &xc, BnMode::Stored, false)?;
            Ok((xc, to))
        })
        .collect::<Result<_>>()?;
    let layers = params.len() - 1;
    let loss = |p: &[Tensor]| -> Result<Tensor> {
        let tensors = q.assemble(p[..layers].to_vec(), p[layers].clone());
        let mut total: Option<Tensor> = None;
        for (xc, to) in &chunks {
            let qo = q.forward_tensors(&tensors, xc, false)?;
            let l = reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs())?;
            total = Some(match total {
                None => l,
                Some(acc) => acc.add(&l)?,
            });
        }
        Ok(total.expect("non-empty"))
    };
    sharpness_probe(&params, rho, &loss)
}

/// Per-sample fc-layer gradient of the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    pub normalized: bool,
    pub source: usize,
}

impl GradVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalize(&self) -> Result<GradVector> {
        let n = self.norm();
        if !(n > 0.0) {
            return Err(degenerate("gradient vector", format!("sample {} has zero norm", self.source)));
        }
        Ok(GradVector { values: self.values.iter().map(|v| v / n).collect(), normalized: true, source: self.source })
    }
}

/// `flatten(a r^T)` for fc input `a` and logit residual `r`.
pub fn per_sample_fc_gradient(a: &[f64], residual: &[f64], source: usize) -> GradVector {
    let mut values = Vec::with_capacity(a.len() * residual.len());
    for &ai in a {
        values.extend(residual.iter().map(|&r| ai * r));
    }
    GradVector { values, normalized: false, source }
}

/// Batched, differentiable `flatten(a_i r_i^T)`: `B x d` and `B x C` to
/// `B x (d*C)`.
pub fn fc_gradients(fc_input: &Tensor, residual: &Tensor) -> Result<Tensor> {
    let (b, d) = (fc_input.shape()[0], fc_input.shape()[1]);
    let c = residual.shape()[1];
    let outer = fc_input.reshape(&[b, d, 1])?.mul(&residual.reshape(&[b, 1, c])?)?;
    Ok(outer.reshape(&[b, d * c])?)
}

/// Per-sample fc gradients of every row of `x`, numbered from `first_source`.
pub fn sample_fc_gradients(q: &QuantNet, t: &TeacherNet, x: &Array, first_source: usize) -> Result<Vec<GradVector>> {
    check_pair(q, t)?;
    let pair = FrozenPair::new(t, q)?;
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(CHUNK) {
        let xc = Tensor::constant(row_range(x, start, CHUNK.min(n - start)));
        let (_, g) = pair.probe(&xc, false)?;
        let width = g.shape()[1];
        for (r, row) in g.data().chunks(width).enumerate() {
            out.push(GradVector { values: row.to_vec(), normalized: false, source: first_source + start + r });
        }
    }
    Ok(out)
}

/// The fc-only Hessian of the reconstruction loss: `C` diagonal copies of
/// `A^T A` in class-major parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct FcHessian {
    /// `A^T A`, `d x d`.
    pub gram: Array,
    pub classes: usize,
}

pub fn fc_hessian_reference(a: &Array, classes: usize) -> Result<FcHessian> {
    if a.rank() != 2 || a.shape()[0] == 0 || classes == 0 {
        return Err(invalid("fc input batch", format!("shape {:?}, {classes} classes", a.shape())));
    }
    let at = sadag_autodiff::array::transpose(a)?;
    Ok(FcHessian { gram: sadag_autodiff::array::matmul(&at, a)?, classes })
}

impl FcHessian {
    pub fn dim(&self) -> usize {
        self.gram.shape()[0]
    }

    /// Position of fc weight `(i, k)` in class-major order.
    pub fn class_major_index(&self, i: usize, k: usize) -> usize {
        k * self.dim() + i
    }

    /// The full `(d*C) x (d*C)` block-diagonal matrix.
    pub fn block_diagonal(&self) -> Array {
        let d = self.dim();
        let n = d * self.classes;
        let mut out = Array::zeros([n, n]);
        for k in 0..self.classes {
            for i in 0..d {
                for j in 0..d {
                    out.data_mut()[(k * d + i) * n + k * d + j] = self.gram.data()[i * d + j];
                }
            }
        }
        out
    }
}

/// `1 - cos(u, v)`.
pub fn cosine_distance(u: &GradVector, v: &GradVector) -> Result<f64> {
    if u.values.len() != v.values.len() {
        return Err(invalid("cosine distance", "vectors differ in length"));
    }
    let (nu, nv) = (u.norm(), v.norm());
    if !(nu > 0.0) || !(nv > 0.0) {
        return Err(degenerate("cosine distance", "zero vector"));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok(1.0 - dot / (nu * nv))
}

/// Row-wise `1 - cos(u_i, v_i)` for `B x n` tensors. Rows where either side
/// is exactly zero contribute 0; their indices are returned.
///
/// The cosine is `u.v / sqrt(|u|^2 |v|^2)`, which is exactly 1 when `u == v`.
pub fn row_cosine_distance(u: &Tensor, v: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if u.shape() != v.shape() || u.shape().len() != 2 {
        return Err(invalid("row cosine distance", format!("{:?} vs {:?}", u.shape(), v.shape())));
    }
    let b = u.shape()[0];
    let nu2 = u.square()?.sum_axes(&[1], false)?;
    let nv2 = v.square()?.sum_axes(&[1], false)?;
    let dot = u.mul(v)?.sum_axes(&[1], false)?;
    let mut zero_rows = Vec::new();
    let mask: Vec<f64> = (0..b)
        .map(|i| {
            if nu2.data()[i] > 0.0 && nv2.data()[i] > 0.0 {
                1.0
            } else {
                zero_rows.push(i);
                0.0
            }
        })
        .collect();
    let denom = nu2.mul(&nv2)?.add_scalar(TINY).sqrt()?;
    let cos = dot.div(&denom)?;
    let d = cos.neg().add_scalar(1.0).mul(&Tensor::constant(Array::new([b], mask)?))?;
    Ok((d, zero_rows))
}

/// Rows scaled to unit length (zero rows stay zero).
pub fn normalize_rows(u: &Tensor) -> Result<Tensor> {
    let norms = u.square()?.sum_axes(&[1], true)?.add_scalar(TINY).sqrt()?;
    Ok(u.div(&norms)?)
}

/// `sum_{i != j} max(0, |g_i . g_j| - zeta)` over unit rows of `B x n`.
/// Callers normalize first ([`normalize_rows`]).
pub fn diversity_loss(unit: &Tensor, zeta: f64) -> Result<Tensor> {
    if !(zeta >= 0.0) {
        return Err(invalid("diversity threshold", format!("{zeta}")));
    }
    let b = unit.shape()[0];
    let gram = unit.matmul(&unit.transpose()?)?;
    let mut off = Array::ones([b, b]);
    for i in 0..b {
        off.data_mut()[i * b + i] = 0.0;
    }
    Ok(gram.abs().add_scalar(-zeta).relu().mul(&Tensor::constant(off))?.sum()?)
}

/// [`diversity_loss`] over explicit vectors; every vector must be unit
/// normalized.
pub fn diversity_loss_vectors(grads: &[GradVector], zeta: f64) -> Result<f64> {
    if grads.is_empty() {
        return Ok(0.0);
    }
    for g in grads {
        if !g.normalized || (g.norm() - 1.0).abs() > 1e-9 {
            return Err(invalid("diversity input", format!("sample {} is not unit normalized", g.source)));
        }
    }
    let n = grads[0].values.len();
    let mut data = Vec::with_capacity(grads.len() * n);
    for g in grads {
        if g.values.len() != n {
            return Err(invalid("diversity input", "vectors differ in length"));
        }
        data.extend_from_slice(&g.values);
    }
    let t = Tensor::constant(Array::new(vec![grads.len(), n], data)?);
    Ok(diversity_loss(&t, zeta)?.item()?)
}

/// `sum_j ||mu_j^s - mu_j||^2 + ||sigma_j^s - sigma_j||^2`.
pub fn bn_loss(batch_stats: &[(Tensor, Tensor)], stored: &[ConvBlock]) -> Result<Tensor> {
    if batch_stats.len() != stored.len() || stored.is_empty() {
        return Err(invalid(
            "BN statistics",
            format!("{} captured layers for {} stored", batch_stats.len(), stored.len()),
        ));
    }
    let mut total: Option<Tensor> = None;
    for ((m, s), b) in batch_stats.iter().zip(stored) {
        let term = m
            .sub(&Tensor::constant(b.mean.clone()))?
            .square()?
            .sum()?
            .add(&s.sub(&Tensor::constant(b.std.clone()))?.square()?.sum()?)?;
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// BN loss of a batch through the teacher (eval-mode normalization, captured
/// batch statistics).
pub fn bn_loss_of_batch(t: &TeacherNet, x: &Tensor) -> Result<Tensor> {
    if x.shape().first().copied().unwrap_or(0) < 2 {
        return Err(invalid("BN loss batch", "need at least 2 samples"));
    }
    let out = t.forward_tensors(&t.bind(None), x, BnMode::Stored, true)?;
    bn_loss(&out.batch_stats, &t.blocks)
}

/// Teacher and quantized net bound once as constants, for the generation
/// losses (both nets are frozen there).
pub struct FrozenPair<'a> {
    pub teacher: &'a TeacherNet,
    pub quant: &'a QuantNet,
    t_params: ClassifierTensors,
    q_params: ClassifierTensors,
}

impl<'a> FrozenPair<'a> {
    pub fn new(teacher: &'a TeacherNet, quant: &'a QuantNet) -> Result<Self> {
        check_pair(quant, teacher)?;
        Ok(Self { teacher, quant, t_params: teacher.bind(None), q_params: quant.bind_effective(None)? })
    }

    /// Teacher forward (stored-statistics normalization, batch statistics
    /// captured when asked) and the per-sample fc gradients `B x (d*C)`.
    pub fn probe(&self, x: &Tensor, capture_stats: bool) -> Result<(ForwardOut, Tensor)> {
        let to = self.teacher.forward_tensors(&self.t_params, x, BnMode::Stored, capture_stats)?;
        let g = self.fc_gradients_with(x, &to)?;
        Ok((to, g))
    }

    fn fc_gradients_with(&self, x: &Tensor, to: &ForwardOut) -> Result<Tensor> {
        let qo = self.quant.forward_tensors(&self.q_params, x, false)?;
        fc_gradients(&qo.fc_input, &qo.logits.sub(&to.logits)?)
    }

    pub fn teacher_forward(&self, x: &Tensor, capture_stats: bool) -> Result<ForwardOut> {
        self.teacher.forward_tensors(&self.t_params, x, BnMode::Stored, capture_stats)
    }

    /// Per-sample fc gradients obtained by differentiating each sample's full
    /// reconstruction loss with respect to an fc-weight leaf, keeping the
    /// result differentiable (double backpropagation). `x` must live on
    /// `graph` or be constant.
    pub fn fc_gradients_autodiff(&self, graph: &Graph, x: &Tensor) -> Result<Tensor> {
        let fc = graph.leaf(self.q_params.fc_w.to_array());
        let mut p = self.q_params.clone();
        p.fc_w = fc.clone();
        let mut rows = Vec::with_capacity(x.shape()[0]);
        for i in 0..x.shape()[0] {
            let xi = x.rows(i, 1)?;
            let qo = self.quant.forward_tensors(&p, &xi, false)?;
            let to = self.teacher_forward(&xi, false)?;
            let l = reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs())?;
            let g = grad(&l, &[&fc], true)?.remove(0);
            rows.push(g.reshape(&[1, g.numel()])?);
        }
        let refs: Vec<&Tensor> = rows.iter().collect();
        Ok(Tensor::concat(&refs, 0)?)
    }
}

/// Embedding-space perturbations for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborPerturbation {
    /// `B x z_dim`, every row of norm `nu`.
    pub eps: Array,
    /// Rows that fell back to the random offset direction.
    pub fallbacks: usize,
    /// `max_i | ||eps_i|| - nu |`.
    pub max_norm_error: f64,
}

/// Scales each row of `a` to norm `target`; rows whose norm is below `floor`
/// or non-finite take the matching row of `fallback` instead. Returns the
/// scaled rows and the number of fallbacks.
fn rescale_rows(a: &Array, fallback: &Array, target: f64, floor: f64) -> (Array, usize) {
    let cols = a.shape()[1];
    let mut out = a.clone();
    let mut fallbacks = 0;
    for r in 0..a.shape()[0] {
        let row = a.row(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (src, n) = if norm.is_finite() && norm >= floor {
            (row, norm)
        } else {
            fallbacks += 1;
            let f = fallback.row(r);
            (f, f.iter().map(|v| v * v).sum::<f64>().sqrt())
        };
        for c in 0..cols {
            out.data_mut()[r * cols + c] = target * src[c] / n;
        }
    }
    (out, fallbacks)
}

fn max_row_norm_error(a: &Array, target: f64) -> f64 {
    (0..a.shape()[0]).map(|r| (a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt() - target).abs()).fold(0.0, f64::max)
}

/// Neighbor perturbation of radius `nu` for each embedding row of `z`: the
/// normalized ascent direction of `D(g(G(z)), g(G(z + eps)))` at a small
/// random offset `eps0` (norm `OFFSET_FRACTION * nu`), where the first
/// gradient is held fixed. At `eps = 0` itself that objective is stationary,
/// so the offset is what makes the direction informative.
pub fn neighbor_perturbation(
    gen: &GeneratorNet,
    gen_params: &[Tensor],
    z: &Array,
    pair: &FrozenPair,
    nu: f64,
    rng: &mut ChaCha8Rng,
) -> Result<NeighborPerturbation> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(invalid("neighbor radius", format!("{nu}")));
    }
    let gen_params: Vec<Tensor> = gen_params.iter().map(Tensor::detach).collect();
    let raw = normal_array(rng, z.shape(), 1.0);
    let (eps0, _) = rescale_rows(&raw, &Array::ones(z.shape()), OFFSET_FRACTION * nu, 0.0);

    let x0 = gen.forward_tensors(&gen_params, &Tensor::constant(z.clone()))?;
    let (_, g0) = pair.probe(&x0, false)?;

    let graph = Graph::new();
    let e = graph.leaf(eps0.clone());
    let x1 = gen.forward_tensors(&gen_params, &Tensor::constant(z.clone()).add(&e)?)?;
    let (_, g1) = pair.probe(&x1, false)?;
    let (d, _) = row_cosine_distance(&g0.detach(), &g1)?;
    let ascent = grad(&d.sum()?, &[&e], false)?.remove(0).to_array();

    let (eps, fallbacks) = rescale_rows(&ascent, &eps0, nu, MIN_ASCENT_NORM);
    let max_norm_error = max_row_norm_error(&eps, nu);
    Ok(NeighborPerturbation { eps, fallbacks, max_norm_error })
}

/// Gradient with respect to `eps` at `eps = 0` of
/// `sum_i D(g_i(z + eps), g_i(z + eps))`, with both gradients produced by
/// double backpropagation through one graph. Analytically zero.
pub fn literal_perturbation_gradient(gen: &GeneratorNet, z: &Array, pair: &FrozenPair) -> Result<Array> {
    let graph = Graph::new();
    let e = graph.leaf(Array::zeros(z.shape()));
    let gp: Vec<Tensor> = gen.bind(None);
    let x = gen.forward_tensors(&gp, &Tensor::constant(z.clone()).add(&e)?)?;
    let g = pair.fc_gradients_autodiff(&graph, &x)?;
    let (d, _) = row_cosine_distance(&g, &g)?;
    Ok(grad(&d.sum()?, &[&e], false)?.remove(0).to_array())
}

#[derive(Clone, Debug)]
pub struct GradMatch {
    pub loss: Tensor,
    /// Rows with a zero gradient on either side (they contribute 0).
    pub zero_pairs: Vec<usize>,
}

/// `sum_i D(g(G(z_i)), g(G(z_i + eps_i)))`, differentiable in `z` and the
/// generator parameters.
pub fn grad_match_loss(
    gen: &GeneratorNet,
    gen_params: &[Tensor],
    z: &Tensor,
    eps: &Array,
    pair: &FrozenPair,
) -> Result<GradMatch> {
    let x = gen.forward_tensors(gen_params, z)?;
    let (_, g) = pair.probe(&x, false)?;
    grad_match_from(gen, gen_params, z, eps, pair, &g)
}

fn grad_match_from(
    gen: &GeneratorNet,
    gen_params: &[Tensor],
    z: &Tensor,
    eps: &Array,
    pair: &FrozenPair,
    g: &Tensor,
) -> Result<GradMatch> {
    if eps.shape() != z.shape() {
        return Err(invalid("perturbations", format!("{:?} for embeddings {:?}", eps.shape(), z.shape())));
    }
    let x1 = gen.forward_tensors(gen_params, &z.add(&Tensor::constant(eps.clone()))?)?;
    let (_, g1) = pair.probe(&x1, false)?;
    let (d, zero_pairs) = row_cosine_distance(g, &g1)?;
    Ok(GradMatch { loss: d.sum()?, zero_pairs })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub zeta: f64,
}

#[derive(Clone, Debug)]
pub struct FinalLoss {
    pub total: Tensor,
    pub bn: f64,
    pub diversity: f64,
    pub grad_match: f64,
    pub zero_pairs: usize,
}

/// `L_BN + lambda1 L_DIVERSE + lambda2 L_GRAD` for one mini-batch of
/// embeddings. Terms with a zero weight are not evaluated, so with both
/// weights zero this is exactly the BN loss.
pub fn final_loss(
    gen: &GeneratorNet,
    gen_params: &[Tensor],
    z: &Tensor,
    eps: Option<&Array>,
    pair: &FrozenPair,
    w: &LossWeights,
) -> Result<FinalLoss> {
    let x = gen.forward_tensors(gen_params, z)?;
    let to = pair.teacher_forward(&x, true)?;
    let bn = bn_loss(&to.batch_stats, &pair.teacher.blocks)?;
    let mut out = FinalLoss { bn: bn.item()?, total: bn, diversity: 0.0, grad_match: 0.0, zero_pairs: 0 };
    if w.lambda1 == 0.0 && w.lambda2 == 0.0 {
        return Ok(out);
    }
    let g = pair.fc_gradients_with(&x, &to)?;
    if w.lambda1 != 0.0 {
        let div = diversity_loss(&normalize_rows(&g)?, w.zeta)?;
        out.diversity = div.item()?;
        out.total = out.total.add(&div.scale(w.lambda1))?;
    }
    if w.lambda2 != 0.0 {
        let eps = eps.ok_or_else(|| invalid("perturbations", "gradient matching needs one per embedding"))?;
        let gm = grad_match_from(gen, gen_params, z, eps, pair, &g)?;
        out.grad_match = gm.loss.item()?;
        out.zero_pairs = gm.zero_pairs.len();
        out.total = out.total.add(&gm.loss.scale(w.lambda2))?;
    }
    Ok(out)
}

/// `cos(sum_subset g, sum_pool g)`.
pub fn pool_gradient_cosine(subset: &[&GradVector], pool: &[&GradVector]) -> Result<f64> {
    if subset.is_empty() || pool.is_empty() {
        return Err(invalid("gradient cosine", "subset and pool must be non-empty"));
    }
    let s = sum_vectors(subset)?;
    let p = sum_vectors(pool)?;
    cosine_of_sums(&s, &p)
}

pub fn sum_vectors(v: &[&GradVector]) -> Result<Vec<f64>> {
    let n = v[0].values.len();
    let mut out = vec![0.0; n];
    for g in v {
        if g.values.len() != n {
            return Err(invalid("gradient sum", "vectors differ in length"));
        }
        for (o, x) in out.iter_mut().zip(&g.values) {
            *o += x;
        }
    }
    Ok(out)
}

pub fn cosine_of_sums(a: &[f64], b: &[f64]) -> Result<f64> {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(degenerate("aggregate gradient", "zero vector"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gv(v: &[f64]) -> GradVector {
        GradVector { values: v.to_vec(), normalized: false, source: 0 }
    }

    #[test]
    fn reconstruction_hand_example() {
        let q = Tensor::constant(Array::new([1, 2], vec![1.0, 2.0]).unwrap());
        let t = Tensor::constant(Array::new([1, 2], vec![1.0, 0.0]).unwrap());
        assert_eq!(reconstruction_loss(&[&q], &[&t]).unwrap().item().unwrap(), 2.0);
        let q2 = Tensor::concat(&[&q, &q], 0).unwrap();
        let t2 = Tensor::concat(&[&t, &t], 0).unwrap();
        assert_eq!(reconstruction_loss(&[&q2], &[&t2]).unwrap().item().unwrap(), 4.0);
        assert!(reconstruction_loss(&[&q], &[&q2]).is_err());
    }

    #[test]
    fn sam_epsilon_examples() {
        let e = sam_epsilon(&[Array::from_vec(vec![3.0, 4.0])], 1.0).unwrap();
        assert!((e[0].data()[0] - 0.6).abs() < 1e-15 && (e[0].data()[1] - 0.8).abs() < 1e-15);
        let z = sam_epsilon(&[Array::from_vec(vec![3.0, 4.0])], 0.0).unwrap();
        assert_eq!(z[0].data(), &[0.0, 0.0]);
        assert!(sam_epsilon(&[Array::zeros([2])], 0.5).is_err());
    }

    #[test]
    fn quadratic_sharpness_closed_form() {
        // L = 1/2 (theta - 3)^2 at theta = 1: rho |theta - theta*| + rho^2 / 2.
        let loss = |p: &[Tensor]| -> Result<Tensor> { Ok(p[0].add_scalar(-3.0).square()?.sum()?.scale(0.5)) };
        for rho in [0.0, 0.1, 0.7, 2.5] {
            let probe = sharpness_probe(&[Array::from_vec(vec![1.0])], rho, &loss).unwrap();
            let expected = rho * 2.0 + rho * rho / 2.0;
            assert!((probe.sharpness() - expected).abs() < 1e-12, "{rho}: {probe:?}");
            assert!((probe.epsilon_norm - rho).abs() < 1e-12);
        }
    }

    #[test]
    fn fc_gradient_hand_example() {
        let g = per_sample_fc_gradient(&[1.0, 2.0], &[3.0, -1.0], 0);
        assert_eq!(g.values, vec![3.0, -1.0, 6.0, -2.0]);
        let z = per_sample_fc_gradient(&[1.0, 2.0], &[0.0, 0.0], 0);
        assert!(z.values.iter().all(|&v| v == 0.0));
        let a = Tensor::constant(Array::new([1, 2], vec![1.0, 2.0]).unwrap());
        let r = Tensor::constant(Array::new([1, 2], vec![3.0, -1.0]).unwrap());
        assert_eq!(fc_gradients(&a, &r).unwrap().data(), &[3.0, -1.0, 6.0, -2.0]);
    }

    #[test]
    fn hessian_reference_identity() {
        let h = fc_hessian_reference(&Array::new([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), 3).unwrap();
        assert_eq!(h.gram.data(), &[1.0, 0.0, 0.0, 1.0]);
        let full = h.block_diagonal();
        assert_eq!(full.shape(), &[6, 6]);
        for i in 0..6 {
            assert_eq!(full.data()[i * 6 + i], 1.0);
        }
        assert_eq!(full.sum(), 6.0);
    }

    #[test]
    fn cosine_examples() {
        let g = gv(&[0.3, -1.2, 2.0]);
        assert!(cosine_distance(&g, &g).unwrap().abs() < 1e-15);
        let neg = gv(&[-0.3, 1.2, -2.0]);
        assert!((cosine_distance(&g, &neg).unwrap() - 2.0).abs() < 1e-15);
        let d = cosine_distance(&gv(&[1.0, 0.0]), &gv(&[1.0, 1.0])).unwrap();
        assert!((d - (1.0 - 1.0 / 2f64.sqrt())).abs() < 1e-15);
        assert!(cosine_distance(&g, &gv(&[0.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn row_cosine_of_identical_rows_is_exactly_zero() {
        let u = Tensor::constant(Array::new([2, 3], vec![0.1, 0.7, -3.3, 1e-3, 2.0, 9.0]).unwrap());
        let (d, zero) = row_cosine_distance(&u, &u).unwrap();
        assert_eq!(d.data(), &[0.0, 0.0]);
        assert!(zero.is_empty());
        let z = Tensor::constant(Array::new([2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let (d, zero) = row_cosine_distance(&u, &z).unwrap();
        assert_eq!(zero, vec![0]);
        assert_eq!(d.data()[0], 0.0);
    }

    #[test]
    fn diversity_examples() {
        let e = |v: &[f64]| gv(v).normalize().unwrap();
        assert_eq!(diversity_loss_vectors(&[e(&[1.0, 0.0]), e(&[0.0, 1.0])], 0.0).unwrap(), 0.0);
        assert!((diversity_loss_vectors(&[e(&[1.0, 2.0]), e(&[1.0, 2.0])], 0.0).unwrap() - 2.0).abs() < 1e-12);
        // |cos| = 0.05 < zeta = 0.1
        let a = e(&[1.0, 0.0]);
        let b = e(&[0.05, (1.0f64 - 0.0025).sqrt()]);
        assert_eq!(diversity_loss_vectors(&[a.clone(), b], 0.1).unwrap(), 0.0);
        assert!(diversity_loss_vectors(&[gv(&[2.0, 0.0])], 0.0).is_err());
    }

    #[test]
    fn bn_loss_hand_example() {
        let block = ConvBlock {
            weight: Array::zeros([1, 1, 3, 3]),
            gamma: Array::ones([1]),
            beta: Array::zeros([1]),
            mean: Array::zeros([1]),
            std: Array::ones([1]),
        };
        let stats = [(Tensor::constant(Array::from_vec(vec![1.0])), Tensor::constant(Array::from_vec(vec![2.0])))];
        assert_eq!(bn_loss(&stats, &[block]).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn pool_cosine_examples() {
        let a = gv(&[1.0, 0.0]);
        let b = gv(&[0.0, 1.0]);
        let pool = [&a, &b];
        assert!((pool_gradient_cosine(&pool, &pool).unwrap() - 1.0).abs() < 1e-15);
        let c = gv(&[1.0, -1.0]);
        let pool2 = [&a, &b];
        assert!(pool_gradient_cosine(&[&c], &pool2).unwrap().abs() < 1e-15);
        let zero = gv(&[0.0, 0.0]);
        assert!(pool_gradient_cosine(&[&zero], &pool).is_err());
    }
}

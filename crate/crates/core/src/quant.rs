//! Uniform fake quantization: affine per-tensor weight quantizers with
//! learnable rounding, min-max activation quantizers, and the quantized
//! mirror of a teacher.
//!
//! A weight quantizer with scale `s`, integer zero point `z` and integer
//! bounds `[n, p]` maps `w` to `s * (clip(round(w / s) + z, n, p) - z)`. The
//! grid is therefore `{s * (k - z) : n <= k <= p}`; with `z = 0` it reduces to
//! `{s * k}`.

use sadag_autodiff::{round_half_up, Array, Graph, Tensor};

use crate::data::{row_range, LabeledDataset};
use crate::error::{degenerate, invalid, Result, SadagError};
use crate::nets::{
    accuracy, argmax_rows, classifier_forward, BnMode, ClassifierTensors, ForwardOut, TeacherArch, TeacherNet,
};

/// Bit-widths at or above this leave a layer in full precision.
pub const IDENTITY_BITS: u32 = 32;
pub const BETA_START: f64 = 20.0;
pub const BETA_END: f64 = 2.0;
const EVAL_CHUNK: usize = 256;

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(invalid("bit-width", format!("{bits} (expected 2..=16, or >= 32 for full precision)")));
    }
    Ok(())
}

/// `(s, n, p)` for a `bits`-bit grid spanning the range of `w`:
/// `s = (max - min) / (2^b - 1)`, `n = 0`, `p = 2^b - 1`.
pub fn compute_scale(w: &Array, bits: u32) -> Result<(f64, i64, i64)> {
    check_bits(bits)?;
    let (lo, hi) = min_max(w.data());
    if !(hi > lo) || !(hi - lo).is_finite() {
        return Err(degenerate("weight range", format!("min {lo}, max {hi}")));
    }
    let p = (1i64 << bits) - 1;
    Ok(((hi - lo) / p as f64, 0, p))
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Rectified sigmoid `clip(1.2 * sigmoid(v) - 0.1, 0, 1)`.
pub fn rectified_sigmoid(v: &Tensor) -> Tensor {
    v.sigmoid().scale(1.2).add_scalar(-0.1).clip(0.0, 1.0)
}

pub fn rectified_sigmoid_value(v: f64) -> f64 {
    (1.2 / (1.0 + (-v).exp()) - 0.1).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightQuantizer {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: f64,
    pub n: f64,
    pub p: f64,
    /// Rounding logits, shaped like the weight.
    pub v: Array,
    pub beta: f64,
}

impl WeightQuantizer {
    /// Data-free construction from the weight's own range. The zero point puts
    /// `min(w)` on the grid and the rounding logits start at nearest rounding.
    pub fn new(w: &Array, bits: u32) -> Result<Self> {
        let (scale, n, p) = compute_scale(w, bits)?;
        let (lo, _) = min_max(w.data());
        let mut q = Self {
            bits,
            scale,
            zero_point: round_half_up(-lo / scale),
            n: n as f64,
            p: p as f64,
            v: Array::zeros(w.shape()),
            beta: BETA_START,
        };
        q.init_rounding(w);
        Ok(q)
    }

    /// Explicit grid, for hand-built quantizers. Rounding logits start at 0.
    pub fn with_grid(bits: u32, scale: f64, zero_point: i64, shape: &[usize]) -> Result<Self> {
        check_bits(bits)?;
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(invalid("quantizer scale", format!("{scale}")));
        }
        Ok(Self {
            bits,
            scale,
            zero_point: zero_point as f64,
            n: 0.0,
            p: ((1i64 << bits) - 1) as f64,
            v: Array::zeros(shape.to_vec()),
            beta: BETA_START,
        })
    }

    /// Sets `V` so that `h(V)` equals the fractional part of `w / s`; the hard
    /// decision `V >= 0` then reproduces nearest rounding exactly.
    pub fn init_rounding(&mut self, w: &Array) {
        self.v = w.map(|x| {
            let r = x / self.scale;
            let frac = r - r.floor();
            let sig = (frac + 0.1) / 1.2;
            let v = (sig / (1.0 - sig)).ln();
            let up = round_half_up(r) > r.floor();
            match (up, v >= 0.0) {
                (true, false) => 0.0,
                (false, true) => -1e-12,
                _ => v,
            }
        });
    }

    /// Integer grid coordinate `w / s + z` (before rounding).
    pub fn grid_coordinate(&self, w: f64) -> f64 {
        w / self.scale + self.zero_point
    }

    pub fn on_grid(&self, value: f64, tol: f64) -> bool {
        let k = self.grid_coordinate(value);
        (k - k.round()).abs() <= tol && k >= self.n - tol && k <= self.p + tol
    }

    fn dequant(&self, k: f64) -> f64 {
        self.scale * (k.clamp(self.n, self.p) - self.zero_point)
    }
}

/// `s * (clip(round(w / s) + z, n, p) - z)`.
pub fn quantize_nearest(w: &Array, q: &WeightQuantizer) -> Array {
    w.map(|x| q.dequant(round_half_up(x / q.scale) + q.zero_point))
}

/// Hard adaptive rounding: round up exactly where `V >= 0`.
pub fn quantize_hard(w: &Array, q: &WeightQuantizer) -> Result<Array> {
    Ok(w.zip_map(&q.v, "quantize_hard", |x, v| {
        let up = if v >= 0.0 { 1.0 } else { 0.0 };
        q.dequant((x / q.scale).floor() + q.zero_point + up)
    })?)
}

/// Soft adaptive rounding `s * (clip(floor(w / s) + z + h(V), n, p) - z)`,
/// differentiable in `V` and (straight through the floor) in `w`.
pub fn quantize_adaround(w: &Tensor, v: &Tensor, q: &WeightQuantizer) -> Result<Tensor> {
    let base = w.scale(1.0 / q.scale).floor_ste().add_scalar(q.zero_point);
    Ok(base.add(&rectified_sigmoid(v))?.clip(q.n, q.p).add_scalar(-q.zero_point).scale(q.scale))
}

/// `sum(1 - |2 h(V) - 1|^beta)`; zero iff every `h` is exactly 0 or 1.
pub fn round_regularizer(v: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta >= 2.0) {
        return Err(invalid("rounding regularizer exponent", format!("{beta} (must be >= 2)")));
    }
    let dev = rectified_sigmoid(v).scale(2.0).add_scalar(-1.0).abs();
    Ok(dev.powf(beta)?.neg().add_scalar(1.0).sum()?)
}

/// Linear anneal from [`BETA_START`] to [`BETA_END`] over `total` iterations.
pub fn annealed_beta(iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        return BETA_END;
    }
    let t = (iteration as f64 / (total - 1) as f64).min(1.0);
    BETA_START + (BETA_END - BETA_START) * t
}

/// Affine min-max activation quantizer. The range stays unset (the quantizer
/// passes values through) until it observes a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationQuantizer {
    pub bits: u32,
    pub range: Option<(f64, f64)>,
}

impl ActivationQuantizer {
    pub fn new(bits: u32) -> Result<Self> {
        check_bits(bits)?;
        Ok(Self { bits, range: None })
    }

    /// Freezes the range to the batch's min and max if it is not set yet.
    pub fn observe(&mut self, x: &Array) {
        if self.range.is_some() {
            return;
        }
        let (lo, hi) = min_max(x.data());
        // A dead (constant) layer still needs lo < hi.
        let hi = if hi > lo { hi } else { lo + 1e-12_f64.max(lo.abs() * 1e-12) };
        self.range = Some((lo, hi));
    }

    pub fn step(&self) -> Option<f64> {
        self.range.map(|(lo, hi)| (hi - lo) / ((1u64 << self.bits) - 1) as f64)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let Some((lo, _)) = self.range else { return x.clone() };
        let step = self.step().expect("range is set");
        let levels = ((1u64 << self.bits) - 1) as f64;
        x.add_scalar(-lo).scale(1.0 / step).clip(0.0, levels).round_ste().scale(step).add_scalar(lo)
    }
}

/// Per-layer bit-widths: one weight entry per conv block plus the fc layer,
/// one activation entry per block output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitWidths {
    pub weights: Vec<u32>,
    pub activations: Vec<u32>,
}

impl BitWidths {
    /// The usual low-bit layout: first conv and fc weights at 8 bits, the
    /// first block's output and the fc input at 8 bits, everything else at
    /// the requested width. Widths >= 32 keep the whole side in full
    /// precision.
    pub fn standard(arch: &TeacherArch, bits_w: u32, bits_a: u32) -> Self {
        let blocks = arch.channels.len();
        let weights = (0..=blocks)
            .map(|i| {
                if bits_w >= IDENTITY_BITS {
                    IDENTITY_BITS
                } else if i == 0 || i == blocks {
                    8
                } else {
                    bits_w
                }
            })
            .collect();
        let activations = (0..blocks)
            .map(|j| {
                if bits_a >= IDENTITY_BITS {
                    IDENTITY_BITS
                } else if j == 0 || j + 1 == blocks {
                    8
                } else {
                    bits_a
                }
            })
            .collect();
        Self { weights, activations }
    }

    pub fn full_precision(arch: &TeacherArch) -> Self {
        Self::standard(arch, IDENTITY_BITS, IDENTITY_BITS)
    }

    pub fn validate(&self, arch: &TeacherArch) -> Result<()> {
        let blocks = arch.channels.len();
        if self.weights.len() != blocks + 1 || self.activations.len() != blocks {
            return Err(invalid(
                "bit-width map",
                format!(
                    "{} weight and {} activation entries for {blocks} blocks",
                    self.weights.len(),
                    self.activations.len()
                ),
            ));
        }
        for &b in self.weights.iter().chain(&self.activations) {
            if b < IDENTITY_BITS {
                check_bits(b)?;
            }
        }
        Ok(())
    }
}

pub fn layer_name(arch: &TeacherArch, i: usize) -> String {
    if i == arch.channels.len() {
        "fc".to_string()
    } else {
        format!("block{}", i + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantNet {
    /// Continuous weights and the (unquantized) BN parameters and statistics.
    pub base: TeacherNet,
    /// One per conv block, then the fc layer; `None` keeps full precision.
    pub weight_q: Vec<Option<WeightQuantizer>>,
    pub act_q: Vec<Option<ActivationQuantizer>>,
    pub bits: BitWidths,
}

/// Tensors of a soft-rounding binding: the classifier tensors plus the leaves
/// being optimized.
#[derive(Clone, Debug)]
pub struct SoftBinding {
    pub tensors: ClassifierTensors,
    /// Rounding-logit leaves per weight layer (`None` where unquantized).
    pub v: Vec<Option<Tensor>>,
    /// Continuous-weight leaves per weight layer, when fine-tuning.
    pub w: Vec<Option<Tensor>>,
}

pub fn init_quantnet(teacher: &TeacherNet, bits: &BitWidths) -> Result<QuantNet> {
    teacher.validate()?;
    bits.validate(&teacher.arch)?;
    let mut weight_q = Vec::new();
    for (i, &b) in bits.weights.iter().enumerate() {
        weight_q.push(if b >= IDENTITY_BITS {
            None
        } else {
            let w = layer_weight(teacher, i);
            Some(WeightQuantizer::new(w, b).map_err(|e| match e {
                SadagError::Degenerate { detail, .. } => {
                    degenerate("weight range", format!("layer {}: {detail}", layer_name(&teacher.arch, i)))
                }
                other => other,
            })?)
        });
    }
    let act_q = bits
        .activations
        .iter()
        .map(|&b| if b >= IDENTITY_BITS { Ok(None) } else { ActivationQuantizer::new(b).map(Some) })
        .collect::<Result<_>>()?;
    Ok(QuantNet { base: teacher.clone(), weight_q, act_q, bits: bits.clone() })
}

fn layer_weight(t: &TeacherNet, i: usize) -> &Array {
    if i == t.blocks.len() {
        &t.fc_w
    } else {
        &t.blocks[i].weight
    }
}

impl QuantNet {
    pub fn arch(&self) -> &TeacherArch {
        &self.base.arch
    }

    pub fn weight_layers(&self) -> usize {
        self.weight_q.len()
    }

    pub fn weight(&self, i: usize) -> &Array {
        layer_weight(&self.base, i)
    }

    pub fn weight_mut(&mut self, i: usize) -> &mut Array {
        if i == self.base.blocks.len() {
            &mut self.base.fc_w
        } else {
            &mut self.base.blocks[i].weight
        }
    }

    /// Weights as used in evaluation: hard adaptive rounding where quantized.
    pub fn hard_weights(&self) -> Result<Vec<Array>> {
        (0..self.weight_layers())
            .map(|i| match &self.weight_q[i] {
                Some(q) => quantize_hard(self.weight(i), q),
                None => Ok(self.weight(i).clone()),
            })
            .collect()
    }

    /// Classifier tensors from per-layer weights (convs then fc) and an fc
    /// bias; BN parameters come from the base net as constants.
    pub fn assemble(&self, weights: Vec<Tensor>, fc_b: Tensor) -> ClassifierTensors {
        let mut convs = weights;
        let fc_w = convs.pop().expect("fc layer present");
        ClassifierTensors {
            convs,
            gammas: self.base.blocks.iter().map(|b| Tensor::constant(b.gamma.clone())).collect(),
            betas: self.base.blocks.iter().map(|b| Tensor::constant(b.beta.clone())).collect(),
            fc_w,
            fc_b,
        }
    }

    /// Hard-quantized weights; with a graph, the effective conv/fc weights and
    /// the fc bias become leaves (the parameters probed by sharpness).
    pub fn bind_effective(&self, graph: Option<&Graph>) -> Result<ClassifierTensors> {
        let leaf = |a: Array| match graph {
            Some(g) => g.leaf(a),
            None => Tensor::constant(a),
        };
        let weights = self.hard_weights()?.into_iter().map(leaf).collect();
        Ok(self.assemble(weights, leaf(self.base.fc_b.clone())))
    }

    /// Soft rounding with `V` as leaves; with `fine_tune` the continuous
    /// weights are leaves too.
    pub fn bind_soft(&self, graph: &Graph, fine_tune: bool) -> Result<SoftBinding> {
        let mut v_leaves = Vec::new();
        let mut w_leaves = Vec::new();
        let mut weights = Vec::new();
        for i in 0..self.weight_layers() {
            let w = if fine_tune {
                let t = graph.leaf(self.weight(i).clone());
                w_leaves.push(Some(t.clone()));
                t
            } else {
                w_leaves.push(None);
                Tensor::constant(self.weight(i).clone())
            };
            match &self.weight_q[i] {
                Some(q) => {
                    let v = graph.leaf(q.v.clone());
                    weights.push(quantize_adaround(&w, &v, q)?);
                    v_leaves.push(Some(v));
                }
                None => {
                    weights.push(w);
                    v_leaves.push(None);
                }
            }
        }
        Ok(SoftBinding {
            tensors: self.assemble(weights, Tensor::constant(self.base.fc_b.clone())),
            v: v_leaves,
            w: w_leaves,
        })
    }

    /// Forward with stored BN statistics and activation quantization.
    pub fn forward_tensors(&self, p: &ClassifierTensors, x: &Tensor, capture_stats: bool) -> Result<ForwardOut> {
        let post = |j: usize, h: Tensor| -> Result<Tensor> {
            Ok(match &self.act_q[j] {
                Some(a) => a.apply(&h),
                None => h,
            })
        };
        classifier_forward(&self.base.arch, p, &self.base.blocks, x, BnMode::Stored, capture_stats, &post)
    }

    pub fn forward(&self, x: &Array) -> Result<ForwardOut> {
        self.forward_tensors(&self.bind_effective(None)?, &Tensor::constant(x.clone()), false)
    }

    /// Sets every unset activation range from `x`, layer by layer, so each
    /// range sees the already-quantized outputs of earlier layers.
    pub fn observe_activation_ranges(&mut self, x: &Array) -> Result<()> {
        for j in 0..self.act_q.len() {
            if matches!(&self.act_q[j], Some(a) if a.range.is_none()) {
                let out = self.forward(x)?;
                if let Some(a) = &mut self.act_q[j] {
                    a.observe(out.blocks[j].value());
                }
            }
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array) -> Result<Array> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(invalid("classifier input", "empty batch"));
        }
        let p = self.bind_effective(None)?;
        let mut rows = Vec::with_capacity(n * self.arch().classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = row_range(x, start, EVAL_CHUNK.min(n - start));
            rows.extend_from_slice(self.forward_tensors(&p, &Tensor::constant(chunk), false)?.logits.data());
        }
        Ok(Array::new(vec![n, self.arch().classes], rows)?)
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        Ok(accuracy(&argmax_rows(&self.logits(&ds.images)?), &ds.labels))
    }

    /// Number of evaluation weights that fall off their layer's grid.
    pub fn grid_violations(&self, tol: f64) -> Result<usize> {
        let hard = self.hard_weights()?;
        let mut bad = 0;
        for (w, q) in hard.iter().zip(&self.weight_q) {
            if let Some(q) = q {
                bad += w.data().iter().filter(|&&v| !q.on_grid(v, tol)).count();
            }
        }
        Ok(bad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sadag_autodiff::{finite_diff, grad};

    fn arr(v: &[f64]) -> Array {
        Array::from_vec(v.to_vec())
    }

    #[test]
    fn scale_examples() {
        assert_eq!(compute_scale(&arr(&[-1.0, 0.5, 2.0]), 2).unwrap(), (1.0, 0, 3));
        assert_eq!(compute_scale(&arr(&[0.0, 1.0]), 8).unwrap().0, 1.0 / 255.0);
        let a = 0.7;
        let (s, _, _) = compute_scale(&arr(&[-a, a]), 2).unwrap();
        assert!((s - 2.0 * a / 3.0).abs() < 1e-15);
        assert!(compute_scale(&arr(&[0.3, 0.3]), 4).is_err());
        assert!(compute_scale(&arr(&[0.0, 1.0]), 1).is_err());
    }

    #[test]
    fn nearest_examples() {
        let q = WeightQuantizer::with_grid(2, 0.5, 0, &[1]).unwrap();
        assert_eq!(quantize_nearest(&arr(&[0.6]), &q).data(), &[0.5]);
        assert_eq!(quantize_nearest(&arr(&[0.0]), &q).data(), &[0.0]);
        assert_eq!(quantize_nearest(&arr(&[2.0]), &q).data(), &[1.5]);
    }

    #[test]
    fn adaround_branches() {
        let q = WeightQuantizer::with_grid(2, 0.5, 0, &[3]).unwrap();
        let w = Tensor::constant(arr(&[0.6, 0.2, 1.4]));
        let up = quantize_adaround(&w, &Tensor::constant(Array::full([3], 50.0)), &q).unwrap();
        assert_eq!(up.data(), &[1.0, 0.5, 1.5]);
        let down = quantize_adaround(&w, &Tensor::constant(Array::full([3], -50.0)), &q).unwrap();
        assert_eq!(down.data(), &[0.5, 0.0, 1.0]);
    }

    #[test]
    fn regularizer_examples() {
        let all_hard = Tensor::constant(arr(&[50.0, -50.0, 30.0]));
        assert_eq!(round_regularizer(&all_hard, 2.0).unwrap().item().unwrap(), 0.0);
        // h = 0.5 exactly at V = 0.
        let half = Tensor::constant(arr(&[0.0]));
        assert!((round_regularizer(&half, 2.0).unwrap().item().unwrap() - 1.0).abs() < 1e-15);
        assert!(round_regularizer(&half, 1.5).is_err());
        assert_eq!(annealed_beta(0, 11), 20.0);
        assert_eq!(annealed_beta(10, 11), 2.0);
    }

    #[test]
    fn init_reproduces_nearest_rounding() {
        let w = arr(&[-0.93, -0.5, -0.21, 0.0, 0.13, 0.49, 0.5, 0.77, 1.2]);
        let q = WeightQuantizer::new(&w, 3).unwrap();
        assert_eq!(quantize_hard(&w, &q).unwrap(), quantize_nearest(&w, &q));
        for &v in quantize_nearest(&w, &q).data() {
            assert!(q.on_grid(v, 1e-9));
        }
    }

    #[test]
    fn v_gradient_is_scaled_h_prime() {
        let q = WeightQuantizer::with_grid(4, 0.25, 0, &[4]).unwrap();
        let w0 = arr(&[0.6, 1.1, 2.3, 0.9]);
        let v0 = arr(&[0.3, -0.7, 1.1, -0.2]);
        let g = Graph::new();
        let v = g.leaf(v0.clone());
        let out = quantize_adaround(&Tensor::constant(w0.clone()), &v, &q).unwrap();
        let dv = grad(&out.sum().unwrap(), &[&v], false).unwrap().remove(0);
        // Rounding frozen: floor(w / s) is a constant offset.
        let smooth = |vv: &Array| -> f64 {
            vv.data()
                .iter()
                .zip(w0.data())
                .map(|(&vi, &wi)| q.scale * ((wi / q.scale).floor() + rectified_sigmoid_value(vi)))
                .sum()
        };
        let fd = finite_diff(smooth, &v0, 1e-6).unwrap();
        for (a, b) in dv.data().iter().zip(fd.data()) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn activation_quantizer_grid() {
        let mut a = ActivationQuantizer::new(2).unwrap();
        let x = Tensor::constant(arr(&[0.0, 0.4, 1.1, 3.0]));
        assert_eq!(a.apply(&x).data(), x.data());
        a.observe(x.value());
        assert_eq!(a.range, Some((0.0, 3.0)));
        assert_eq!(a.apply(&x).data(), &[0.0, 0.0, 1.0, 3.0]);
        assert_eq!(a.apply(&Tensor::constant(arr(&[7.0]))).data(), &[3.0]);
    }

    #[test]
    fn standard_bit_layout() {
        let arch = TeacherArch::default();
        let b = BitWidths::standard(&arch, 2, 2);
        assert_eq!(b.weights, vec![8, 2, 2, 8]);
        assert_eq!(b.activations, vec![8, 2, 8]);
        assert_eq!(BitWidths::full_precision(&arch).weights, vec![32; 4]);
    }

    #[test]
    fn identity_configuration_matches_teacher() {
        let t = TeacherNet::init(&TeacherArch::default(), 1).unwrap();
        let q = init_quantnet(&t, &BitWidths::full_precision(&t.arch)).unwrap();
        let x =
            crate::rng::normal_array(&mut crate::rng::stream_rng(0, crate::rng::Stream::Probe), &[3, 3, 16, 16], 1.0);
        assert_eq!(q.forward(&x).unwrap().logits.data(), t.forward(&x, BnMode::Stored).unwrap().logits.data());
    }

    #[test]
    fn two_bit_layer_has_at_most_four_values() {
        let t = TeacherNet::init(&TeacherArch::default(), 2).unwrap();
        let q = init_quantnet(&t, &BitWidths::standard(&t.arch, 2, 2)).unwrap();
        let hard = q.hard_weights().unwrap();
        let mut vals: Vec<f64> = hard[1].data().to_vec();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        assert!(vals.len() <= 4, "{vals:?}");
        assert_eq!(q.grid_violations(1e-9).unwrap(), 0);
    }

    #[test]
    fn degenerate_layer_is_named() {
        let mut t = TeacherNet::init(&TeacherArch::default(), 2).unwrap();
        t.blocks[1].weight = Array::full(t.blocks[1].weight.shape(), 0.1);
        let err = init_quantnet(&t, &BitWidths::standard(&t.arch, 2, 2)).unwrap_err();
        assert!(err.to_string().contains("block2"), "{err}");
    }
}

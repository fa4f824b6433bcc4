//! The full-precision teacher classifier, its trainer, and the image
//! generator.
//!
//! Parameters live in plain [`Array`]s. A forward pass first *binds* them as
//! tensors, either as graph leaves (to differentiate) or as constants, so the
//! same forward code serves training, frozen evaluation and the quantized
//! mirror in [`crate::quant`].

use rand::seq::SliceRandom;
use rand::Rng;
use sadag_autodiff::{grad, Array, ConvGeom, Graph, Tensor};

use crate::data::{gather_rows, row_range, LabeledDataset};
use crate::error::{degenerate, invalid, Result};
use crate::optim::{cosine_lr, MomentumSgd};
use crate::rng::{normal_array, stream_rng, Stream};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const EVAL_CHUNK: usize = 256;

fn block_geom() -> ConvGeom {
    ConvGeom::new(2, 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherArch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv+BN+relu block.
    pub channels: Vec<usize>,
    pub classes: usize,
}

impl Default for TeacherArch {
    fn default() -> Self {
        Self { in_channels: 3, height: 16, width: 16, channels: vec![8, 16, 32], classes: 4 }
    }
}

impl TeacherArch {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid("teacher architecture", "need at least one non-empty block"));
        }
        if self.classes < 2 || self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(invalid("teacher architecture", format!("{self:?}")));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    /// Width `d` of the fully-connected layer's input.
    pub fn fc_in(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Number of reconstruction layers: every block output plus the logits.
    pub fn layers(&self) -> usize {
        self.channels.len() + 1
    }
}

/// One conv + batch-norm + relu block. `mean` and `std` are the stored
/// statistics used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Array,
    pub gamma: Array,
    pub beta: Array,
    pub mean: Array,
    pub std: Array,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherNet {
    pub arch: TeacherArch,
    pub blocks: Vec<ConvBlock>,
    /// `d x C`.
    pub fc_w: Array,
    pub fc_b: Array,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the stored statistics.
    Stored,
    /// Normalize with the batch's own statistics.
    Batch,
}

/// Classifier parameters bound as tensors.
#[derive(Clone, Debug)]
pub struct ClassifierTensors {
    pub convs: Vec<Tensor>,
    pub gammas: Vec<Tensor>,
    pub betas: Vec<Tensor>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl ClassifierTensors {
    /// Trainable tensors in [`TeacherNet::params_mut`] order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for j in 0..self.convs.len() {
            out.extend([&self.convs[j], &self.gammas[j], &self.betas[j]]);
        }
        out.extend([&self.fc_w, &self.fc_b]);
        out
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// Block outputs (after relu and any activation quantizer).
    pub blocks: Vec<Tensor>,
    /// Globally pooled last block, `B x d`.
    pub fc_input: Tensor,
    pub logits: Tensor,
    /// Per block `(mean, std)` of the pre-normalization features, when
    /// captured.
    pub batch_stats: Vec<(Tensor, Tensor)>,
}

impl ForwardOut {
    /// Outputs of every reconstruction layer: the blocks, then the logits.
    pub fn layer_outputs(&self) -> Vec<&Tensor> {
        self.blocks.iter().chain(std::iter::once(&self.logits)).collect()
    }
}

fn check_input(arch: &TeacherArch, x: &Tensor) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != arch.input_shape() {
        return Err(invalid("classifier input", format!("expected (B, {:?}), got {:?}", arch.input_shape(), s)));
    }
    if s[0] == 0 {
        return Err(invalid("classifier input", "empty batch"));
    }
    Ok(())
}

/// Per-channel biased mean and `sqrt(var + eps)` over batch and space.
fn channel_stats(y: &Tensor) -> Result<(Tensor, Tensor, f64)> {
    let mean = y.mean_axes(&[0, 2, 3], false)?;
    let var = y.variance_axes(&[0, 2, 3], false)?;
    let min_var = var.data().iter().copied().fold(f64::INFINITY, f64::min);
    let std = var.add_scalar(BN_EPS).sqrt()?;
    Ok((mean, std, min_var))
}

/// Shared conv/BN/relu/pool/fc forward. `post_block` sees each block output
/// (used for activation quantization).
pub fn classifier_forward(
    arch: &TeacherArch,
    p: &ClassifierTensors,
    stored: &[ConvBlock],
    x: &Tensor,
    mode: BnMode,
    capture_stats: bool,
    post_block: &dyn Fn(usize, Tensor) -> Result<Tensor>,
) -> Result<ForwardOut> {
    check_input(arch, x)?;
    let mut h = x.clone();
    let mut blocks = Vec::with_capacity(p.convs.len());
    let mut batch_stats = Vec::new();
    for j in 0..p.convs.len() {
        let y = h.conv2d(&p.convs[j], block_geom())?;
        let normed = match mode {
            BnMode::Batch => {
                let (mean, std, min_var) = channel_stats(&y)?;
                if min_var == 0.0 {
                    return Err(degenerate("batch", format!("zero feature variance in block {j}")));
                }
                let out = y.batchnorm_apply(&mean, &std, &p.gammas[j], &p.betas[j])?;
                if capture_stats {
                    batch_stats.push((mean, std));
                }
                out
            }
            BnMode::Stored => {
                if capture_stats {
                    let (mean, std, _) = channel_stats(&y)?;
                    batch_stats.push((mean, std));
                }
                let mean = Tensor::constant(stored[j].mean.clone());
                let std = Tensor::constant(stored[j].std.clone());
                y.batchnorm_apply(&mean, &std, &p.gammas[j], &p.betas[j])?
            }
        };
        h = post_block(j, normed.relu())?;
        blocks.push(h.clone());
    }
    let fc_input = h.mean_axes(&[2, 3], false)?;
    let logits = fc_input.matmul(&p.fc_w)?.add(&p.fc_b)?;
    Ok(ForwardOut { blocks, fc_input, logits, batch_stats })
}

fn bind_array(a: &Array, graph: Option<&Graph>) -> Tensor {
    match graph {
        Some(g) => g.leaf(a.clone()),
        None => Tensor::constant(a.clone()),
    }
}

pub fn argmax_rows(logits: &Array) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

impl TeacherNet {
    /// He-normal conv weights, unit BN scale, uniform fc.
    pub fn init(arch: &TeacherArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream_rng(seed, Stream::TeacherInit);
        let mut blocks = Vec::new();
        let mut cin = arch.in_channels;
        for &cout in &arch.channels {
            let fan_in = (cin * 9) as f64;
            blocks.push(ConvBlock {
                weight: normal_array(&mut rng, &[cout, cin, 3, 3], (2.0 / fan_in).sqrt()),
                gamma: Array::ones([cout]),
                beta: Array::zeros([cout]),
                mean: Array::zeros([cout]),
                std: Array::ones([cout]),
            });
            cin = cout;
        }
        let d = arch.fc_in();
        let bound = 1.0 / (d as f64).sqrt();
        let fc: Vec<f64> = (0..d * arch.classes).map(|_| rng.random_range(-bound..bound)).collect();
        Ok(Self {
            arch: arch.clone(),
            blocks,
            fc_w: Array::new(vec![d, arch.classes], fc)?,
            fc_b: Array::zeros([arch.classes]),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.blocks.len() != self.arch.channels.len() {
            return Err(invalid("teacher", "block count does not match the architecture"));
        }
        let mut cin = self.arch.in_channels;
        for (j, (b, &cout)) in self.blocks.iter().zip(&self.arch.channels).enumerate() {
            if b.weight.shape() != [cout, cin, 3, 3]
                || [&b.gamma, &b.beta, &b.mean, &b.std].iter().any(|a| a.shape() != [cout])
            {
                return Err(invalid("teacher", format!("block {j} has mismatched shapes")));
            }
            if b.std.data().iter().any(|&s| !(s > 0.0)) {
                return Err(invalid("teacher", format!("block {j} stores a non-positive std")));
            }
            cin = cout;
        }
        if self.fc_w.shape() != [self.arch.fc_in(), self.arch.classes] || self.fc_b.shape() != [self.arch.classes] {
            return Err(invalid("teacher", "fully-connected layer has mismatched shapes"));
        }
        Ok(())
    }

    pub fn bind(&self, graph: Option<&Graph>) -> ClassifierTensors {
        ClassifierTensors {
            convs: self.blocks.iter().map(|b| bind_array(&b.weight, graph)).collect(),
            gammas: self.blocks.iter().map(|b| bind_array(&b.gamma, graph)).collect(),
            betas: self.blocks.iter().map(|b| bind_array(&b.beta, graph)).collect(),
            fc_w: bind_array(&self.fc_w, graph),
            fc_b: bind_array(&self.fc_b, graph),
        }
    }

    /// Trainable arrays: per block weight, gamma, beta; then fc weight, bias.
    pub fn params_mut(&mut self) -> Vec<&mut Array> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.gamma);
            out.push(&mut b.beta);
        }
        out.push(&mut self.fc_w);
        out.push(&mut self.fc_b);
        out
    }

    pub fn forward_tensors(
        &self,
        p: &ClassifierTensors,
        x: &Tensor,
        mode: BnMode,
        capture_stats: bool,
    ) -> Result<ForwardOut> {
        classifier_forward(&self.arch, p, &self.blocks, x, mode, capture_stats, &|_, h| Ok(h))
    }

    /// Constant forward pass; batch statistics are always captured.
    /// `Batch` mode does not touch the stored statistics, see
    /// [`TeacherNet::update_running_stats`].
    pub fn forward(&self, x: &Array, mode: BnMode) -> Result<ForwardOut> {
        self.forward_tensors(&self.bind(None), &Tensor::constant(x.clone()), mode, true)
    }

    /// Exponential moving average of the stored statistics toward `stats`.
    pub fn update_running_stats(&mut self, stats: &[(Array, Array)]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(invalid("batch statistics", format!("{} layers, expected {}", stats.len(), self.blocks.len())));
        }
        for (b, (m, s)) in self.blocks.iter_mut().zip(stats) {
            b.mean = b.mean.zip_map(m, "ema", |old, new| (1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * new)?;
            b.std = b.std.zip_map(s, "ema", |old, new| (1.0 - BN_MOMENTUM) * old + BN_MOMENTUM * new)?;
        }
        Ok(())
    }

    pub fn logits(&self, x: &Array) -> Result<Array> {
        let n = x.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(invalid("classifier input", "empty batch"));
        }
        let p = self.bind(None);
        let mut rows = Vec::with_capacity(n * self.arch.classes);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let chunk = row_range(x, start, EVAL_CHUNK.min(n - start));
            let out = self.forward_tensors(&p, &Tensor::constant(chunk), BnMode::Stored, false)?;
            rows.extend_from_slice(out.logits.data());
        }
        Ok(Array::new(vec![n, self.arch.classes], rows)?)
    }

    pub fn predict(&self, x: &Array) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn accuracy(&self, ds: &LabeledDataset) -> Result<f64> {
        Ok(accuracy(&self.predict(&ds.images)?, &ds.labels))
    }

    /// Rounds every parameter and statistic to binary32 so that a checkpoint
    /// round-trip reproduces the net exactly.
    pub fn snap_to_f32(&mut self) {
        let snap = |a: &mut Array| {
            for v in a.data_mut() {
                *v = *v as f32 as f64;
            }
        };
        for b in &mut self.blocks {
            for a in [&mut b.weight, &mut b.gamma, &mut b.beta, &mut b.mean, &mut b.std] {
                snap(a);
            }
        }
        snap(&mut self.fc_w);
        snap(&mut self.fc_b);
    }

    /// Every array with a stable name, for serialization.
    pub fn named_arrays(&self) -> Vec<(String, Array)> {
        let a = &self.arch;
        let shape = vec![a.in_channels as f64, a.height as f64, a.width as f64];
        let mut out = vec![("meta.input_shape".to_string(), Array::from_vec(shape))];
        for (j, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{j}.weight"), b.weight.clone()));
            out.push((format!("block{j}.gamma"), b.gamma.clone()));
            out.push((format!("block{j}.beta"), b.beta.clone()));
            out.push((format!("block{j}.mean"), b.mean.clone()));
            out.push((format!("block{j}.std"), b.std.clone()));
        }
        out.push(("fc.weight".into(), self.fc_w.clone()));
        out.push(("fc.bias".into(), self.fc_b.clone()));
        out
    }

    /// Inverse of [`TeacherNet::named_arrays`]; the architecture is inferred
    /// from the shapes and the stored input shape.
    pub fn from_named(named: &[(String, Array)]) -> Result<Self> {
        let get = |name: &str| -> Result<Array> {
            named
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| invalid("teacher checkpoint", format!("missing tensor {name}")))
        };
        let mut blocks = Vec::new();
        while named.iter().any(|(n, _)| n == &format!("block{}.weight", blocks.len())) {
            let j = blocks.len();
            blocks.push(ConvBlock {
                weight: get(&format!("block{j}.weight"))?,
                gamma: get(&format!("block{j}.gamma"))?,
                beta: get(&format!("block{j}.beta"))?,
                mean: get(&format!("block{j}.mean"))?,
                std: get(&format!("block{j}.std"))?,
            });
        }
        let fc_w = get("fc.weight")?;
        if blocks.is_empty() || blocks[0].weight.rank() != 4 || fc_w.rank() != 2 {
            return Err(invalid("teacher checkpoint", "unexpected tensor layout"));
        }
        let input = get("meta.input_shape")?;
        let dims: Vec<usize> = input.data().iter().map(|&v| v as usize).collect();
        if dims.len() != 3 || input.data().iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
            return Err(invalid("teacher checkpoint", format!("bad input shape {:?}", input.data())));
        }
        let arch = TeacherArch {
            in_channels: dims[0],
            height: dims[1],
            width: dims[2],
            channels: blocks.iter().map(|b| b.weight.shape()[0]).collect(),
            classes: fc_w.shape()[1],
        };
        let net = Self { arch, blocks, fc_w, fc_b: get("fc.bias")? };
        net.validate()?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, seed: 0, lr: 0.05, momentum: 0.9, batch_size: 64, weight_decay: 5e-4 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Cross-entropy training with momentum SGD and a cosine-decayed rate. BN
/// statistics follow the batch statistics by EMA. The returned net is snapped
/// to binary32.
pub fn train_teacher(ds: &LabeledDataset, arch: &TeacherArch, cfg: &TrainConfig) -> Result<(TeacherNet, TrainReport)> {
    if ds.is_empty() {
        return Err(invalid("training set", "empty"));
    }
    if ds.classes < 2 || ds.classes != arch.classes {
        return Err(invalid(
            "training set",
            format!("{} classes for a {}-class architecture", ds.classes, arch.classes),
        ));
    }
    if cfg.batch_size < 2 {
        return Err(invalid("batch size", "need at least 2 samples for batch statistics"));
    }
    let mut net = TeacherNet::init(arch, cfg.seed)?;
    let mut shuffle = stream_rng(cfg.seed, Stream::TeacherShuffle);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let steps_per_epoch = ds.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let mut opt = MomentumSgd::new(cfg.momentum, cfg.weight_decay);
    let mut step = 0;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let x = Tensor::constant(gather_rows(&ds.images, chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| ds.labels[i]).collect();
            let g = Graph::new();
            let p = net.bind(Some(&g));
            let out = net.forward_tensors(&p, &x, BnMode::Batch, true)?;
            let loss = out.logits.softmax_crossentropy(&labels)?;
            final_loss = loss.item()?;
            if !final_loss.is_finite() {
                return Err(crate::error::SadagError::NonFinite { stage: "teacher training", iteration: step });
            }
            let grads: Vec<Array> = grad(&loss, &p.params(), false)?.into_iter().map(|t| t.to_array()).collect();
            let stats: Vec<(Array, Array)> =
                out.batch_stats.iter().map(|(m, s)| (m.to_array(), s.to_array())).collect();
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut net.params_mut(), &grads, lr)?;
            net.update_running_stats(&stats)?;
            step += 1;
        }
    }
    net.snap_to_f32();
    let train_accuracy = net.accuracy(ds)?;
    Ok((net, TrainReport { epochs: cfg.epochs, final_loss, train_accuracy }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorArch {
    pub z_dim: usize,
    /// Channels of the dense layer's reshaped output.
    pub base_channels: usize,
    pub base_size: usize,
    /// Output channels of each upsample+conv+BN+relu block.
    pub channels: Vec<usize>,
    pub out_channels: usize,
}

impl Default for GeneratorArch {
    fn default() -> Self {
        Self { z_dim: 256, base_channels: 16, base_size: 4, channels: vec![16, 8], out_channels: 3 }
    }
}

impl GeneratorArch {
    pub fn out_size(&self) -> usize {
        self.base_size << self.channels.len()
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.out_channels, self.out_size(), self.out_size()]
    }

    pub fn matching(teacher: &TeacherArch) -> Result<Self> {
        let d = Self::default();
        let up = 1 << d.channels.len();
        let arch = Self { out_channels: teacher.in_channels, base_size: teacher.height / up, ..d };
        if arch.base_size == 0 || arch.out_size() != teacher.height || teacher.height != teacher.width {
            return Err(invalid(
                "generator architecture",
                format!("cannot produce {}x{} images", teacher.height, teacher.width),
            ));
        }
        Ok(arch)
    }
}

/// Parameters, in order: dense weight `z x (c0*s*s)`, dense bias, then per
/// block conv weight, BN gamma, BN beta; then output conv weight and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    pub arch: GeneratorArch,
    pub params: Vec<Array>,
}

impl GeneratorNet {
    pub fn init(arch: &GeneratorArch, seed: u64) -> Result<Self> {
        if arch.z_dim == 0 || arch.base_channels == 0 || arch.base_size == 0 || arch.channels.contains(&0) {
            return Err(invalid("generator architecture", format!("{arch:?}")));
        }
        let mut rng = stream_rng(seed, Stream::GeneratorInit);
        let dense_out = arch.base_channels * arch.base_size * arch.base_size;
        let mut params = vec![
            normal_array(&mut rng, &[arch.z_dim, dense_out], 1.0 / (arch.z_dim as f64).sqrt()),
            Array::zeros([dense_out]),
        ];
        let mut cin = arch.base_channels;
        for &cout in &arch.channels {
            params.push(normal_array(&mut rng, &[cout, cin, 3, 3], (2.0 / (cin * 9) as f64).sqrt()));
            params.push(Array::ones([cout]));
            params.push(Array::zeros([cout]));
            cin = cout;
        }
        params.push(normal_array(&mut rng, &[arch.out_channels, cin, 3, 3], (1.0 / (cin * 9) as f64).sqrt()));
        params.push(Array::zeros([arch.out_channels]));
        Ok(Self { arch: arch.clone(), params })
    }

    pub fn bind(&self, graph: Option<&Graph>) -> Vec<Tensor> {
        self.params.iter().map(|a| bind_array(a, graph)).collect()
    }

    /// Images in `[-1, 1]` for a `B x z_dim` batch of embeddings. The BN
    /// layers always normalize with the batch's own statistics.
    pub fn forward_tensors(&self, p: &[Tensor], z: &Tensor) -> Result<Tensor> {
        let a = &self.arch;
        if z.shape().len() != 2 || z.shape()[1] != a.z_dim {
            return Err(invalid("embedding batch", format!("expected (B, {}), got {:?}", a.z_dim, z.shape())));
        }
        let b = z.shape()[0];
        if b == 0 {
            return Err(invalid("embedding batch", "empty batch"));
        }
        let same = ConvGeom::new(1, 1);
        let mut h = z.matmul(&p[0])?.add(&p[1])?.reshape(&[b, a.base_channels, a.base_size, a.base_size])?;
        for j in 0..a.channels.len() {
            let (w, gamma, beta) = (&p[2 + 3 * j], &p[3 + 3 * j], &p[4 + 3 * j]);
            let y = h.upsample_nearest(2)?.conv2d(w, same)?;
            let (mean, std, _) = channel_stats(&y)?;
            h = y.batchnorm_apply(&mean, &std, gamma, beta)?.relu();
        }
        let k = 2 + 3 * a.channels.len();
        let bias = p[k + 1].reshape(&[1, a.out_channels, 1, 1])?;
        Ok(h.conv2d(&p[k], same)?.add(&bias)?.tanh())
    }

    pub fn forward(&self, z: &Array) -> Result<Array> {
        Ok(self.forward_tensors(&self.bind(None), &Tensor::constant(z.clone()))?.to_array())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_textured_blobs, ToyParams};

    fn toy_batch(n: usize, seed: u64) -> Array {
        let mut rng = stream_rng(seed, Stream::Probe);
        normal_array(&mut rng, &[n, 3, 16, 16], 0.5)
    }

    #[test]
    fn zero_network_outputs_fc_bias() {
        let mut net = TeacherNet::init(&TeacherArch::default(), 0).unwrap();
        for b in &mut net.blocks {
            b.weight = Array::zeros(b.weight.shape());
        }
        net.fc_b = Array::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let out = net.forward(&Array::zeros([2, 3, 16, 16]), BnMode::Stored).unwrap();
        for a in &out.blocks {
            assert!(a.data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(out.logits.data(), &[0.5, -1.0, 2.0, 0.0, 0.5, -1.0, 2.0, 0.0]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = TeacherNet::init(&TeacherArch::default(), 3).unwrap();
        let x = toy_batch(1, 1);
        let a = net.forward(&x, BnMode::Stored).unwrap();
        let b = net.forward(&x, BnMode::Stored).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        for (u, v) in a.blocks.iter().zip(&b.blocks) {
            assert_eq!(u.data(), v.data());
        }
        assert_eq!(a.layer_outputs().len(), net.arch.layers());
    }

    #[test]
    fn batch_mode_rejects_constant_batch() {
        let net = TeacherNet::init(&TeacherArch::default(), 3).unwrap();
        let err = net.forward(&Array::zeros([2, 3, 16, 16]), BnMode::Batch);
        assert!(err.is_err());
        assert!(net.forward(&Array::zeros([0, 3, 16, 16]), BnMode::Stored).is_err());
    }

    #[test]
    fn ema_fixpoint_on_one_batch_matches_batch_statistics() {
        let mut net = TeacherNet::init(&TeacherArch::default(), 4).unwrap();
        let x = toy_batch(16, 2);
        // Stored statistics only matter for later layers through the
        // normalization, so iterate until every layer has settled.
        for _ in 0..400 {
            let out = net.forward(&x, BnMode::Stored).unwrap();
            let stats: Vec<(Array, Array)> =
                out.batch_stats.iter().map(|(m, s)| (m.to_array(), s.to_array())).collect();
            net.update_running_stats(&stats).unwrap();
        }
        let out = net.forward(&x, BnMode::Stored).unwrap();
        let mut residual = 0.0;
        for ((m, s), b) in out.batch_stats.iter().zip(&net.blocks) {
            for (u, v) in m.data().iter().zip(b.mean.data()) {
                residual += (u - v).powi(2);
            }
            for (u, v) in s.data().iter().zip(b.std.data()) {
                residual += (u - v).powi(2);
            }
        }
        assert!(residual < 1e-6, "{residual:e}");
    }

    /// Two classes told apart by the sign of a bright blob on channel 0.
    fn separable(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = stream_rng(seed, Stream::Probe);
        let mut x = normal_array(&mut rng, &[n, 3, 16, 16], 0.2);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        for (i, &l) in labels.iter().enumerate() {
            let sign = if l == 0 { -1.0 } else { 1.0 };
            for y in 4..12 {
                for c in 4..12 {
                    x.data_mut()[i * 768 + y * 16 + c] += 0.8 * sign;
                }
            }
        }
        LabeledDataset::new(x, labels, 2).unwrap()
    }

    #[test]
    fn training_separable_blobs_and_determinism() {
        let (train, val) = (separable(256, 1), separable(128, 2));
        let arch = TeacherArch { classes: 2, ..TeacherArch::default() };
        let cfg = TrainConfig { epochs: 5, seed: 1, ..TrainConfig::default() };
        let (a, report) = train_teacher(&train, &arch, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0, "{report:?}");
        assert_eq!(a.accuracy(&val).unwrap(), 1.0);
        let (b, _) = train_teacher(&train, &arch, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn untrained_net_is_near_chance() {
        let params = ToyParams { train_size: 8, val_size: 512, ..ToyParams::default() };
        let (train, val) = make_textured_blobs(&params, 3).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (net, _) = train_teacher(&train, &TeacherArch::default(), &cfg).unwrap();
        let acc = net.accuracy(&val).unwrap();
        assert!((acc - 0.25).abs() < 0.15, "{acc}");
    }

    #[test]
    fn named_round_trip() {
        let net = TeacherNet::init(&TeacherArch::default(), 9).unwrap();
        assert_eq!(TeacherNet::from_named(&net.named_arrays()).unwrap(), net);
    }

    #[test]
    fn generator_shapes_bounds_and_determinism() {
        let g = GeneratorNet::init(&GeneratorArch::default(), 0).unwrap();
        let mut rng = stream_rng(1, Stream::Latent);
        let z = normal_array(&mut rng, &[1, 256], 1.0);
        let x = g.forward(&z).unwrap();
        assert_eq!(x.shape(), &[1, 3, 16, 16]);
        let z = normal_array(&mut rng, &[6, 256], 3.0);
        let a = g.forward(&z).unwrap();
        assert!(a.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(a, g.forward(&z).unwrap());
        assert!(g.forward(&Array::zeros([2, 10])).is_err());
    }
}

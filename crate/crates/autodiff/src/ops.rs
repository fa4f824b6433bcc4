//! Primitive operations: forward kernels plus backward rules.
//!
//! Backward rules are written in terms of [`Tensor`] operations, so when the
//! graph is recording during `grad` the gradients are themselves nodes and can
//! be differentiated again.

use crate::array::{self, Array, ConvGeom};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddScalar(f64),
    Matmul,
    Transpose,
    Conv2d(ConvGeom),
    Conv2dInputGrad(ConvGeom, Vec<usize>),
    Conv2dWeightGrad(ConvGeom, Vec<usize>),
    Relu,
    Abs,
    Clip(f64, f64),
    Sqrt,
    Exp,
    Ln,
    Tanh,
    Sigmoid,
    Pow(f64),
    RoundSte,
    FloorSte,
    Reshape(Vec<usize>),
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    PadSlice { axis: usize, start: usize, total: usize },
    Upsample(usize),
    SumPool(usize),
}

fn domain(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Domain { op, detail: detail.into() }
}

fn finite(op: &'static str, a: Array) -> Result<Array> {
    if a.is_finite() {
        Ok(a)
    } else {
        Err(domain(op, "result is not finite"))
    }
}

/// Nearest rounding with ties toward +inf.
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Matmul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dInputGrad(..) => "conv2d_input_grad",
            Op::Conv2dWeightGrad(..) => "conv2d_weight_grad",
            Op::Relu => "relu",
            Op::Abs => "abs",
            Op::Clip(..) => "clip",
            Op::Sqrt => "sqrt",
            Op::Exp => "exp",
            Op::Ln => "ln",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Pow(_) => "pow",
            Op::RoundSte => "round_ste",
            Op::FloorSte => "floor_ste",
            Op::Reshape(_) => "reshape",
            Op::BroadcastTo(_) => "broadcast_to",
            Op::SumTo(_) => "sum_to",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::PadSlice { .. } => "pad_slice",
            Op::Upsample(_) => "upsample_nearest",
            Op::SumPool(_) => "sum_pool",
        }
    }

    pub(crate) fn forward(&self, x: &[&Array]) -> Result<Array> {
        let op = self.name();
        match self {
            Op::Leaf => Err(domain(op, "leaves have no forward rule")),
            Op::Add => x[0].zip_map(x[1], op, |a, b| a + b),
            Op::Sub => x[0].zip_map(x[1], op, |a, b| a - b),
            Op::Mul => x[0].zip_map(x[1], op, |a, b| a * b),
            Op::Div => {
                if x[1].data().iter().any(|&d| d == 0.0) {
                    return Err(domain(op, "division by zero"));
                }
                x[0].zip_map(x[1], op, |a, b| a / b)
            }
            Op::Neg => Ok(x[0].map(|v| -v)),
            Op::Scale(c) => Ok(x[0].map(|v| v * c)),
            Op::AddScalar(c) => Ok(x[0].map(|v| v + c)),
            Op::Matmul => array::matmul(x[0], x[1]),
            Op::Transpose => array::transpose(x[0]),
            Op::Conv2d(g) => array::conv2d(x[0], x[1], *g),
            Op::Conv2dInputGrad(g, shape) => array::conv2d_input_grad(x[0], x[1], shape, *g),
            Op::Conv2dWeightGrad(g, shape) => array::conv2d_weight_grad(x[0], x[1], shape, *g),
            Op::Relu => Ok(x[0].map(|v| v.max(0.0))),
            Op::Abs => Ok(x[0].map(f64::abs)),
            Op::Clip(lo, hi) => Ok(x[0].map(|v| v.clamp(*lo, *hi))),
            Op::Sqrt => {
                if x[0].data().iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                    return Err(domain(op, "negative or non-finite input"));
                }
                Ok(x[0].map(f64::sqrt))
            }
            Op::Exp => finite(op, x[0].map(f64::exp)),
            Op::Ln => {
                if x[0].data().iter().any(|&v| !(v > 0.0)) {
                    return Err(domain(op, "non-positive input"));
                }
                finite(op, x[0].map(f64::ln))
            }
            Op::Tanh => Ok(x[0].map(f64::tanh)),
            Op::Sigmoid => Ok(x[0].map(sigmoid)),
            Op::Pow(p) => finite(op, x[0].map(|v| v.powf(*p))),
            Op::RoundSte => Ok(x[0].map(round_half_up)),
            Op::FloorSte => Ok(x[0].map(f64::floor)),
            Op::Reshape(shape) => x[0].reshape(shape.clone()),
            Op::BroadcastTo(shape) => array::broadcast_to(x[0], shape),
            Op::SumTo(shape) => array::sum_to(x[0], shape),
            Op::Concat(axis) => array::concat(x, *axis),
            Op::Slice { axis, start, len } => array::slice(x[0], *axis, *start, *len),
            Op::PadSlice { axis, start, total } => array::pad_slice(x[0], *axis, *start, *total),
            Op::Upsample(f) => array::upsample_nearest(x[0], *f),
            Op::SumPool(f) => array::sum_pool(x[0], *f),
        }
    }

    /// Vector-Jacobian products for each input. `needs[i]` is false when the
    /// caller will discard input `i`'s gradient.
    pub(crate) fn backward(
        &self,
        x: &[Tensor],
        out: &Tensor,
        g: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let mask = |f: &dyn Fn(f64) -> f64| -> Result<Tensor> { g.mul(&Tensor::constant(x[0].value().map(f))) };
        let grads = match self {
            Op::Leaf => vec![],
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.neg())],
            Op::Mul => {
                vec![if want(0) { Some(g.mul(&x[1])?) } else { None }, if want(1) { Some(g.mul(&x[0])?) } else { None }]
            }
            Op::Div => vec![
                if want(0) { Some(g.div(&x[1])?) } else { None },
                if want(1) { Some(g.mul(out)?.div(&x[1])?.neg()) } else { None },
            ],
            Op::Neg => vec![Some(g.neg())],
            Op::Scale(c) => vec![Some(g.scale(*c))],
            Op::AddScalar(_) => vec![Some(g.clone())],
            Op::Matmul => vec![
                if want(0) { Some(g.matmul(&x[1].transpose()?)?) } else { None },
                if want(1) { Some(x[0].transpose()?.matmul(g)?) } else { None },
            ],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::Conv2d(geom) => vec![
                if want(0) { Some(Tensor::conv2d_input_grad(g, &x[1], x[0].shape(), *geom)?) } else { None },
                if want(1) { Some(Tensor::conv2d_weight_grad(&x[0], g, x[1].shape(), *geom)?) } else { None },
            ],
            // out = CIG(gy, w)
            Op::Conv2dInputGrad(geom, _) => vec![
                if want(0) { Some(g.conv2d(&x[1], *geom)?) } else { None },
                if want(1) { Some(Tensor::conv2d_weight_grad(g, &x[0], x[1].shape(), *geom)?) } else { None },
            ],
            // out = CWG(x, gy)
            Op::Conv2dWeightGrad(geom, _) => vec![
                if want(0) { Some(Tensor::conv2d_input_grad(&x[1], g, x[0].shape(), *geom)?) } else { None },
                if want(1) { Some(x[0].conv2d(g, *geom)?) } else { None },
            ],
            // Subgradient 0 at the kink.
            Op::Relu => vec![Some(mask(&|v| if v > 0.0 { 1.0 } else { 0.0 })?)],
            Op::Abs => vec![Some(mask(&|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })?)],
            Op::Clip(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![Some(mask(&|v| if v > lo && v < hi { 1.0 } else { 0.0 })?)]
            }
            Op::Sqrt => vec![Some(g.div(out)?.scale(0.5))],
            Op::Exp => vec![Some(g.mul(out)?)],
            Op::Ln => vec![Some(g.div(&x[0])?)],
            Op::Tanh => vec![Some(g.mul(&out.mul(out)?.neg().add_scalar(1.0))?)],
            Op::Sigmoid => vec![Some(g.mul(&out.mul(&out.neg().add_scalar(1.0))?)?)],
            Op::Pow(p) => vec![Some(g.mul(&x[0].powf(p - 1.0)?.scale(*p))?)],
            // Straight-through: rounding is the identity in the backward pass.
            Op::RoundSte | Op::FloorSte => vec![Some(g.clone())],
            Op::Reshape(_) => vec![Some(g.reshape(x[0].shape())?)],
            Op::BroadcastTo(_) => vec![Some(g.sum_to(x[0].shape())?)],
            Op::SumTo(_) => vec![Some(g.broadcast_to(x[0].shape())?)],
            Op::Concat(axis) => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(x.len());
                for (i, xi) in x.iter().enumerate() {
                    let len = xi.shape()[*axis];
                    grads.push(if want(i) { Some(g.slice(*axis, start, len)?) } else { None });
                    start += len;
                }
                grads
            }
            Op::Slice { axis, start, .. } => vec![Some(g.pad_slice(*axis, *start, x[0].shape()[*axis])?)],
            Op::PadSlice { axis, start, .. } => vec![Some(g.slice(*axis, *start, x[0].shape()[*axis])?)],
            Op::Upsample(f) => vec![Some(g.sum_pool(*f)?)],
            Op::SumPool(f) => vec![Some(g.upsample_nearest(*f)?)],
        };
        Ok(grads)
    }
}

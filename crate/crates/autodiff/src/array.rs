//! Plain row-major `f64` arrays and the numeric kernels the graph ops are
//! built from. Nothing in here knows about differentiation.

use crate::error::{Result, TensorError};

/// Owned dense array. `shape == []` is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Stride and zero padding for a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    fn out_dim(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if self.stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Array {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != data.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(TensorError::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ShapeMismatch { op: "reshape", lhs: self.shape.clone(), rhs: shape });
        }
        Ok(Self { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Array, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op, lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Array) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self + alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &Array) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch { op: "axpy", lhs: self.shape.clone(), rhs: other.shape.clone() });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }
}

fn expect_rank(op: &'static str, a: &Array, rank: usize) -> Result<()> {
    if a.rank() != rank {
        return Err(TensorError::InvalidShape { op, shape: a.shape.clone(), reason: format!("expected rank {rank}") });
    }
    Ok(())
}

pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    expect_rank("matmul", a, 2)?;
    expect_rank("matmul", b, 2)?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Array::new([m, n], out)
}

pub fn transpose(a: &Array) -> Result<Array> {
    expect_rank("transpose", a, 2)?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Array::new([n, m], out)
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(op: &'static str, x: &[usize], w: &[usize], geom: ConvGeom) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(TensorError::ShapeMismatch { op, lhs: x.to_vec(), rhs: w.to_vec() });
        }
        let (ho, wo) = match (geom.out_dim(x[2], w[2]), geom.out_dim(x[3], w[3])) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::InvalidShape {
                    op,
                    shape: x.to_vec(),
                    reason: format!("kernel {:?} does not fit with {geom:?}", w),
                })
            }
        };
        Ok(Self { n: x[0], ci: x[1], h: x[2], w: x[3], co: w[0], kh: w[2], kw: w[3], ho, wo })
    }

    fn k(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, geom: ConvGeom, x: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            cols[row + oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[(c * self.h + iy as usize) * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, geom: ConvGeom, cols: &[f64], x: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ci {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = ((c * self.kh + ky) * self.kw + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            x[(c * self.h + iy as usize) * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Direct convolution, `x: (N, Ci, H, W)`, `w: (Co, Ci, Kh, Kw)`.
pub fn conv2d(x: &Array, w: &Array, geom: ConvGeom) -> Result<Array> {
    let d = ConvDims::new("conv2d", &x.shape, &w.shape, geom)?;
    let (k, p) = (d.k(), d.p());
    let in_sz = d.ci * d.h * d.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; d.n * d.co * p];
    for s in 0..d.n {
        d.im2col(geom, &x.data[s * in_sz..(s + 1) * in_sz], &mut cols);
        let o = &mut out[s * d.co * p..(s + 1) * d.co * p];
        for co in 0..d.co {
            let orow = &mut o[co * p..(co + 1) * p];
            for kk in 0..k {
                let wv = w.data[co * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (ov, &cv) in orow.iter_mut().zip(&cols[kk * p..(kk + 1) * p]) {
                    *ov += wv * cv;
                }
            }
        }
    }
    Array::new([d.n, d.co, d.ho, d.wo], out)
}

/// Adjoint of [`conv2d`] in its input: maps `gy: (N, Co, Ho, Wo)` back to
/// `input_shape`.
pub fn conv2d_input_grad(gy: &Array, w: &Array, input_shape: &[usize], geom: ConvGeom) -> Result<Array> {
    let d = ConvDims::new("conv2d_input_grad", input_shape, &w.shape, geom)?;
    if gy.shape != [d.n, d.co, d.ho, d.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_input_grad",
            lhs: gy.shape.clone(),
            rhs: vec![d.n, d.co, d.ho, d.wo],
        });
    }
    let (k, p) = (d.k(), d.p());
    let in_sz = d.ci * d.h * d.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; d.n * in_sz];
    for s in 0..d.n {
        cols.iter_mut().for_each(|c| *c = 0.0);
        let g = &gy.data[s * d.co * p..(s + 1) * d.co * p];
        for co in 0..d.co {
            let grow = &g[co * p..(co + 1) * p];
            for kk in 0..k {
                let wv = w.data[co * k + kk];
                if wv == 0.0 {
                    continue;
                }
                for (cv, &gv) in cols[kk * p..(kk + 1) * p].iter_mut().zip(grow) {
                    *cv += wv * gv;
                }
            }
        }
        d.col2im(geom, &cols, &mut out[s * in_sz..(s + 1) * in_sz]);
    }
    Array::new(input_shape.to_vec(), out)
}

/// Adjoint of [`conv2d`] in its weight.
pub fn conv2d_weight_grad(x: &Array, gy: &Array, weight_shape: &[usize], geom: ConvGeom) -> Result<Array> {
    let d = ConvDims::new("conv2d_weight_grad", &x.shape, weight_shape, geom)?;
    if gy.shape != [d.n, d.co, d.ho, d.wo] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_weight_grad",
            lhs: gy.shape.clone(),
            rhs: vec![d.n, d.co, d.ho, d.wo],
        });
    }
    let (k, p) = (d.k(), d.p());
    let in_sz = d.ci * d.h * d.w;
    let mut cols = vec![0.0; k * p];
    let mut out = vec![0.0; d.co * k];
    for s in 0..d.n {
        d.im2col(geom, &x.data[s * in_sz..(s + 1) * in_sz], &mut cols);
        let g = &gy.data[s * d.co * p..(s + 1) * d.co * p];
        for co in 0..d.co {
            let grow = &g[co * p..(co + 1) * p];
            for kk in 0..k {
                let crow = &cols[kk * p..(kk + 1) * p];
                out[co * k + kk] += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    Array::new(weight_shape.to_vec(), out)
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }),
        };
    }
    Ok(out)
}

/// Strides of `src` viewed inside `target` (0 on broadcast axes).
fn broadcast_strides(op: &'static str, src: &[usize], target: &[usize]) -> Result<Vec<usize>> {
    if src.len() > target.len() {
        return Err(TensorError::ShapeMismatch { op, lhs: src.to_vec(), rhs: target.to_vec() });
    }
    let offset = target.len() - src.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let t = target[i + offset];
        if src[i] == t {
            strides[i + offset] = if t == 1 { 0 } else { acc };
        } else if src[i] != 1 {
            return Err(TensorError::ShapeMismatch { op, lhs: src.to_vec(), rhs: target.to_vec() });
        }
        acc *= src[i];
    }
    Ok(strides)
}

/// Visit every index of `target`, yielding (flat target index, flat source index).
fn for_each_broadcast(target: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total = numel(target);
    if total == 0 {
        return;
    }
    let rank = target.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for t in 0..total {
        f(t, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < target[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn broadcast_to(a: &Array, target: &[usize]) -> Result<Array> {
    if a.shape == target {
        return Ok(a.clone());
    }
    let strides = broadcast_strides("broadcast_to", &a.shape, target)?;
    let mut out = vec![0.0; numel(target)];
    for_each_broadcast(target, &strides, |t, s| out[t] = a.data[s]);
    Array::new(target.to_vec(), out)
}

/// Sum `a` down to `target`, the inverse of [`broadcast_to`].
pub fn sum_to(a: &Array, target: &[usize]) -> Result<Array> {
    if a.shape == target {
        return Ok(a.clone());
    }
    let strides = broadcast_strides("sum_to", target, &a.shape)?;
    let mut out = vec![0.0; numel(target)];
    for_each_broadcast(&a.shape, &strides, |t, s| out[s] += a.data[t]);
    Array::new(target.to_vec(), out)
}

/// (outer, axis, inner) extents for slicing along `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub fn concat(parts: &[&Array], axis: usize) -> Result<Array> {
    let first = parts.first().ok_or_else(|| TensorError::InvalidShape {
        op: "concat",
        shape: Vec::new(),
        reason: "no inputs".into(),
    })?;
    if axis >= first.rank() {
        return Err(TensorError::InvalidShape {
            op: "concat",
            shape: first.shape.clone(),
            reason: format!("axis {axis} out of range"),
        });
    }
    let mut shape = first.shape.clone();
    shape[axis] = 0;
    for p in parts {
        let same_rest = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !same_rest {
            return Err(TensorError::ShapeMismatch { op: "concat", lhs: first.shape.clone(), rhs: p.shape.clone() });
        }
        shape[axis] += p.shape[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    Array::new(shape, out)
}

pub fn slice(a: &Array, axis: usize, start: usize, len: usize) -> Result<Array> {
    if axis >= a.rank() || start + len > a.shape[axis] {
        return Err(TensorError::InvalidShape {
            op: "slice",
            shape: a.shape.clone(),
            reason: format!("axis {axis} range {start}..{}", start + len),
        });
    }
    let (outer, extent, inner) = split_axis(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape[axis] = len;
    let mut out = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        let base = (o * extent + start) * inner;
        out.extend_from_slice(&a.data[base..base + len * inner]);
    }
    Array::new(shape, out)
}

/// Embed `a` at `start` along `axis` in a zero array of extent `total`.
pub fn pad_slice(a: &Array, axis: usize, start: usize, total: usize) -> Result<Array> {
    if axis >= a.rank() || start + a.shape[axis] > total {
        return Err(TensorError::InvalidShape {
            op: "pad_slice",
            shape: a.shape.clone(),
            reason: format!("cannot place at {start} in extent {total}"),
        });
    }
    let (outer, len, inner) = split_axis(&a.shape, axis);
    let mut shape = a.shape.clone();
    shape[axis] = total;
    let mut out = vec![0.0; numel(&shape)];
    for o in 0..outer {
        let dst = (o * total + start) * inner;
        out[dst..dst + len * inner].copy_from_slice(&a.data[o * len * inner..(o + 1) * len * inner]);
    }
    Array::new(shape, out)
}

/// Nearest-neighbour upsampling of the two trailing axes by `factor`.
pub fn upsample_nearest(a: &Array, factor: usize) -> Result<Array> {
    if a.rank() < 2 || factor == 0 {
        return Err(TensorError::InvalidShape {
            op: "upsample_nearest",
            shape: a.shape.clone(),
            reason: "need rank >= 2 and factor >= 1".into(),
        });
    }
    let r = a.rank();
    let (h, w) = (a.shape[r - 2], a.shape[r - 1]);
    let planes = numel(&a.shape[..r - 2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        for y in 0..oh {
            for x in 0..ow {
                out[(pl * oh + y) * ow + x] = a.data[(pl * h + y / factor) * w + x / factor];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Array::new(shape, out)
}

/// Sum over non-overlapping `factor x factor` windows of the two trailing
/// axes; the adjoint of [`upsample_nearest`].
pub fn sum_pool(a: &Array, factor: usize) -> Result<Array> {
    let r = a.rank();
    if r < 2 || factor == 0 || a.shape[r - 2] % factor != 0 || a.shape[r - 1] % factor != 0 {
        return Err(TensorError::InvalidShape {
            op: "sum_pool",
            shape: a.shape.clone(),
            reason: format!("trailing axes not divisible by {factor}"),
        });
    }
    let (h, w) = (a.shape[r - 2], a.shape[r - 1]);
    let (oh, ow) = (h / factor, w / factor);
    let planes = numel(&a.shape[..r - 2]);
    let mut out = vec![0.0; planes * oh * ow];
    for pl in 0..planes {
        for y in 0..h {
            for x in 0..w {
                out[(pl * oh + y / factor) * ow + x / factor] += a.data[(pl * h + y) * w + x];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Array::new(shape, out)
}

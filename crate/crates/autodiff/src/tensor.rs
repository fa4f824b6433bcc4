//! Graph-aware tensors.
//!
//! A [`Tensor`] is an immutable array value plus an optional handle into a
//! [`Graph`]. Only tensors that (transitively) depend on a graph leaf carry a
//! handle; everything else is a detached constant and costs nothing to
//! differentiate through.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::array::{self, Array, ConvGeom};
use crate::error::{Result, TensorError};
use crate::ops::Op;

struct Input {
    value: Rc<Array>,
    node: Option<usize>,
}

struct Node {
    op: Op,
    inputs: Vec<Input>,
    value: Rc<Array>,
}

struct GraphInner {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
}

/// Append-only differentiation tape. Cheap to clone (shared handle); confined
/// to one thread.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<GraphInner>,
}

#[derive(Clone)]
struct NodeRef {
    graph: Graph,
    id: usize,
}

#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    node: Option<NodeRef>,
}

/// Result of [`Graph::replay`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub nodes: usize,
    pub mismatched: Vec<usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.len()).finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { inner: Rc::new(GraphInner { nodes: RefCell::new(Vec::new()), recording: Cell::new(true) }) }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register a differentiable leaf.
    pub fn leaf(&self, value: Array) -> Tensor {
        self.push(Op::Leaf, Vec::new(), Rc::new(value))
    }

    fn push(&self, op: Op, inputs: Vec<Input>, value: Rc<Array>) -> Tensor {
        let mut nodes = self.inner.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, inputs, value: value.clone() });
        Tensor { value, node: Some(NodeRef { graph: self.clone(), id }) }
    }

    /// Recompute every non-leaf node from its inputs, in order, and compare
    /// bit patterns with the cached values.
    pub fn replay(&self) -> Result<ReplayReport> {
        let nodes = self.inner.nodes.borrow();
        let mut fresh: Vec<Option<Rc<Array>>> = Vec::with_capacity(nodes.len());
        let mut mismatched = Vec::new();
        for (id, node) in nodes.iter().enumerate() {
            if node.op == Op::Leaf {
                fresh.push(Some(node.value.clone()));
                continue;
            }
            let inputs: Vec<Rc<Array>> = node
                .inputs
                .iter()
                .map(|inp| match inp.node {
                    Some(p) => fresh[p].clone().expect("parents precede children"),
                    None => inp.value.clone(),
                })
                .collect();
            let refs: Vec<&Array> = inputs.iter().map(|a| a.as_ref()).collect();
            let value = node.op.forward(&refs)?;
            let same = value.shape() == node.value.shape()
                && value.data().iter().zip(node.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                mismatched.push(id);
            }
            fresh.push(Some(Rc::new(value)));
        }
        Ok(ReplayReport { nodes: nodes.len(), mismatched })
    }
}

struct RecordingGuard {
    graph: Graph,
    previous: bool,
}

impl RecordingGuard {
    fn set(graph: &Graph, on: bool) -> Self {
        let previous = graph.inner.recording.replace(on);
        Self { graph: graph.clone(), previous }
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        self.graph.inner.recording.set(self.previous);
    }
}

/// Gradients of a single-element `output` with respect to each of `wrt`.
///
/// Tensors outside the output's ancestry get a zero gradient. With
/// `create_graph` the returned gradients are recorded on the graph and can be
/// differentiated again.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    let zeros = |t: &Tensor| Tensor::constant(Array::zeros(t.shape()));
    let Some(out_ref) = &output.node else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };
    let graph = out_ref.graph.clone();
    let n = out_ref.id + 1;

    let mut targets: HashMap<usize, usize> = HashMap::new();
    for t in wrt {
        if let Some(r) = &t.node {
            if r.graph.same(&graph) && r.id < n {
                targets.insert(r.id, 0);
            }
        }
    }

    // Only walk nodes that sit between a target and the output.
    let mut reaches = vec![false; n];
    {
        let nodes = graph.inner.nodes.borrow();
        for id in 0..n {
            reaches[id] =
                targets.contains_key(&id) || nodes[id].inputs.iter().any(|inp| inp.node.is_some_and(|p| reaches[p]));
        }
    }

    let _guard = RecordingGuard::set(&graph, create_graph);
    let mut adjoint: Vec<Option<Tensor>> = vec![None; n];
    adjoint[out_ref.id] = Some(Tensor::constant(Array::ones(output.shape())));
    let mut found: HashMap<usize, Tensor> = HashMap::new();

    for id in (0..n).rev() {
        if !reaches[id] {
            continue;
        }
        let Some(g) = adjoint[id].take() else { continue };
        if targets.contains_key(&id) {
            found.insert(id, g.clone());
        }
        let (op, inputs, value) = {
            let nodes = graph.inner.nodes.borrow();
            let node = &nodes[id];
            if node.op == Op::Leaf {
                continue;
            }
            let inputs: Vec<(Tensor, Option<usize>)> = node
                .inputs
                .iter()
                .map(|inp| {
                    let t = Tensor {
                        value: inp.value.clone(),
                        node: inp.node.map(|p| NodeRef { graph: graph.clone(), id: p }),
                    };
                    (t, inp.node)
                })
                .collect();
            (node.op.clone(), inputs, node.value.clone())
        };
        let needs: Vec<bool> = inputs.iter().map(|(_, p)| p.is_some_and(|p| reaches[p])).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let out = Tensor { value, node: Some(NodeRef { graph: graph.clone(), id }) };
        let xs: Vec<Tensor> = inputs.iter().map(|(t, _)| t.clone()).collect();
        let grads = op.backward(&xs, &out, &g, &needs)?;
        for ((_, parent), gi) in inputs.iter().zip(grads) {
            let (Some(p), Some(gi)) = (parent, gi) else { continue };
            if !reaches[*p] {
                continue;
            }
            adjoint[*p] = Some(match adjoint[*p].take() {
                None => gi,
                Some(acc) => acc.add(&gi)?,
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|t| {
            t.node
                .as_ref()
                .filter(|r| r.graph.same(&graph))
                .and_then(|r| found.get(&r.id).cloned())
                .unwrap_or_else(|| zeros(t))
        })
        .collect())
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape()).field("node", &self.node.as_ref().map(|n| n.id)).finish()
    }
}

impl From<Array> for Tensor {
    fn from(a: Array) -> Self {
        Tensor::constant(a)
    }
}

impl Tensor {
    /// A detached constant.
    pub fn constant(value: Array) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn to_array(&self) -> Array {
        (*self.value).clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> Result<f64> {
        self.value.item()
    }

    /// True when the tensor is a node on a graph (depends on some leaf).
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    pub fn detach(&self) -> Tensor {
        Tensor { value: self.value.clone(), node: None }
    }

    fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
        let value = {
            let vals: Vec<&Array> = inputs.iter().map(|t| t.value.as_ref()).collect();
            op.forward(&vals)?
        };
        let mut graph: Option<&Graph> = None;
        for t in inputs {
            if let Some(r) = &t.node {
                match graph {
                    None => graph = Some(&r.graph),
                    Some(g) if !g.same(&r.graph) => {
                        return Err(TensorError::InvalidShape {
                            op: op.name(),
                            shape: t.shape().to_vec(),
                            reason: "inputs belong to different graphs".into(),
                        })
                    }
                    _ => {}
                }
            }
        }
        let value = Rc::new(value);
        match graph {
            Some(g) if g.inner.recording.get() => {
                let inputs = inputs
                    .iter()
                    .map(|t| Input { value: t.value.clone(), node: t.node.as_ref().map(|r| r.id) })
                    .collect();
                Ok(g.push(op, inputs, value))
            }
            _ => Ok(Tensor { value, node: None }),
        }
    }

    fn unary(&self, op: Op) -> Tensor {
        Self::apply(op, &[self]).expect("elementwise op on a single input cannot fail")
    }

    fn binary(&self, other: &Tensor, op: Op) -> Result<Tensor> {
        if self.shape() == other.shape() {
            return Self::apply(op, &[self, other]);
        }
        let target = array::broadcast_shape(op.name(), self.shape(), other.shape())?;
        let a = self.broadcast_to(&target)?;
        let b = other.broadcast_to(&target)?;
        Self::apply(op, &[&a, &b])
    }

    // ---- elementwise -------------------------------------------------------

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Mul)
    }

    /// Rejects any zero in the denominator.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, Op::Div)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar(c))
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside.
    pub fn clip(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clip(lo, hi))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        Self::apply(Op::Sqrt, &[self])
    }

    pub fn exp(&self) -> Result<Tensor> {
        Self::apply(Op::Exp, &[self])
    }

    pub fn ln(&self) -> Result<Tensor> {
        Self::apply(Op::Ln, &[self])
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid)
    }

    pub fn powf(&self, p: f64) -> Result<Tensor> {
        Self::apply(Op::Pow(p), &[self])
    }

    pub fn square(&self) -> Result<Tensor> {
        self.mul(self)
    }

    /// Round to nearest (ties up); identity gradient.
    pub fn round_ste(&self) -> Tensor {
        self.unary(Op::RoundSte)
    }

    /// Floor; identity gradient.
    pub fn floor_ste(&self) -> Tensor {
        self.unary(Op::FloorSte)
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        Self::apply(Op::Matmul, &[self, other])
    }

    pub fn transpose(&self) -> Result<Tensor> {
        Self::apply(Op::Transpose, &[self])
    }

    /// `self: (N, Ci, H, W)`, `weight: (Co, Ci, Kh, Kw)`.
    pub fn conv2d(&self, weight: &Tensor, geom: ConvGeom) -> Result<Tensor> {
        Self::apply(Op::Conv2d(geom), &[self, weight])
    }

    pub fn conv2d_input_grad(gy: &Tensor, weight: &Tensor, input_shape: &[usize], geom: ConvGeom) -> Result<Tensor> {
        Self::apply(Op::Conv2dInputGrad(geom, input_shape.to_vec()), &[gy, weight])
    }

    pub fn conv2d_weight_grad(x: &Tensor, gy: &Tensor, weight_shape: &[usize], geom: ConvGeom) -> Result<Tensor> {
        Self::apply(Op::Conv2dWeightGrad(geom, weight_shape.to_vec()), &[x, gy])
    }

    // ---- shape -------------------------------------------------------------

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::apply(Op::Reshape(shape.to_vec()), &[self])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::apply(Op::BroadcastTo(shape.to_vec()), &[self])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if shape == self.shape() {
            return Ok(self.clone());
        }
        Self::apply(Op::SumTo(shape.to_vec()), &[self])
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        Self::apply(Op::Concat(axis), parts)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        Self::apply(Op::Slice { axis, start, len }, &[self])
    }

    pub fn pad_slice(&self, axis: usize, start: usize, total: usize) -> Result<Tensor> {
        Self::apply(Op::PadSlice { axis, start, total }, &[self])
    }

    /// Rows `start..start + len` along the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Tensor> {
        self.slice(0, start, len)
    }

    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        Self::apply(Op::Upsample(factor), &[self])
    }

    pub fn sum_pool(&self, factor: usize) -> Result<Tensor> {
        Self::apply(Op::SumPool(factor), &[self])
    }

    // ---- reductions (composites) ---------------------------------------------

    /// Sum of all elements, shape `[]`.
    pub fn sum(&self) -> Result<Tensor> {
        self.sum_to(&[])
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let mut kept = self.shape().to_vec();
        for &ax in axes {
            if ax >= kept.len() {
                return Err(TensorError::InvalidShape {
                    op: "sum_axes",
                    shape: self.shape().to_vec(),
                    reason: format!("axis {ax} out of range"),
                });
            }
            kept[ax] = 1;
        }
        let s = self.sum_to(&kept)?;
        if keepdim {
            return Ok(s);
        }
        let squeezed: Vec<usize> =
            self.shape().iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect();
        s.reshape(&squeezed)
    }

    pub fn mean(&self) -> Result<Tensor> {
        Ok(self.sum()?.scale(1.0 / self.numel() as f64))
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes, keepdim)?.scale(1.0 / count as f64))
    }

    /// Biased (population) variance over `axes`.
    pub fn variance_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let mu = self.mean_axes(axes, true)?;
        self.sub(&mu)?.square()?.mean_axes(axes, keepdim)
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dot",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        self.mul(other)?.sum()
    }

    /// Euclidean norm of all elements. Rejects the zero tensor only when
    /// differentiated (the gradient is undefined there).
    pub fn l2norm(&self) -> Result<Tensor> {
        self.square()?.sum()?.sqrt()
    }

    /// `(x - mean) / std * gamma + beta` with per-channel parameters on axis 1.
    pub fn batchnorm_apply(&self, mean: &Tensor, std: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if self.shape().len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "batchnorm_apply",
                shape: self.shape().to_vec(),
                reason: "need a channel axis".into(),
            });
        }
        let c = self.shape()[1];
        let mut pshape = vec![1; self.shape().len()];
        pshape[1] = c;
        let per_channel = |t: &Tensor| -> Result<Tensor> {
            if t.numel() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm_apply",
                    lhs: self.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            t.reshape(&pshape)
        };
        self.sub(&per_channel(mean)?)?.div(&per_channel(std)?)?.mul(&per_channel(gamma)?)?.add(&per_channel(beta)?)
    }

    /// Mean cross-entropy of `(N, C)` logits against class indices.
    pub fn softmax_crossentropy(&self, labels: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(TensorError::InvalidShape {
                op: "softmax_crossentropy",
                shape,
                reason: format!("{} labels", labels.len()),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let mut row_max = vec![0.0; n];
        let mut onehot = vec![0.0; n * c];
        for i in 0..n {
            row_max[i] = self.value.row(i).iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            onehot[i * c + labels[i]] = 1.0;
        }
        let shifted = self.sub(&Tensor::constant(Array::new([n, 1], row_max)?))?;
        let lse = shifted.exp()?.sum_axes(&[1], true)?.ln()?;
        let log_p = shifted.sub(&lse)?;
        let picked = log_p.mul(&Tensor::constant(Array::new([n, c], onehot)?))?.sum()?;
        Ok(picked.scale(-1.0 / n as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_and_norm_examples() {
        let x = Tensor::constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
        let v = Tensor::constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(v.l2norm().unwrap().item().unwrap(), 5.0);
    }

    #[test]
    fn grad_of_dot_self() {
        let g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = w.dot(&w).unwrap();
        let gw = grad(&y, &[&w], false).unwrap();
        assert_eq!(gw[0].data(), &[2.0, 4.0]);
        assert!(!gw[0].requires_grad());
    }

    #[test]
    fn hessian_vector_of_dot_self() {
        let g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let v = Tensor::constant(t(&[2], &[1.0, 0.0]));
        let y = w.dot(&w).unwrap();
        let gw = grad(&y, &[&w], true).unwrap().remove(0);
        assert!(gw.requires_grad());
        let hv = grad(&gw.dot(&v).unwrap(), &[&w], false).unwrap();
        assert_eq!(hv[0].data(), &[2.0, 0.0]);
    }

    #[test]
    fn unrelated_leaf_gets_zero_gradient() {
        let g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        let b = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
        let y = a.sum().unwrap();
        let gs = grad(&y, &[&a, &b], false).unwrap();
        assert_eq!(gs[1].data(), &[0.0; 3]);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let g = Graph::new();
        let a = g.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(grad(&a, &[&a], false), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let a = Tensor::constant(Array::zeros([2, 3]));
        let b = Tensor::constant(Array::zeros([4]));
        match a.add(&b) {
            Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn domain_errors() {
        let a = Tensor::constant(t(&[2], &[1.0, -1.0]));
        assert!(matches!(a.sqrt(), Err(TensorError::Domain { .. })));
        let z = Tensor::constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.div(&z), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn detached_ops_do_not_grow_graph() {
        let g = Graph::new();
        let w = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = Tensor::constant(t(&[2], &[3.0, 4.0]));
        let _ = c.mul(&c).unwrap();
        assert_eq!(g.len(), 1);
        let _ = w.mul(&c).unwrap();
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn replay_reproduces_cache() {
        let g = Graph::new();
        let x = g.leaf(t(&[1, 1, 4, 4], &(0..16).map(|i| (i as f64).sin()).collect::<Vec<_>>()));
        let w = g.leaf(t(&[2, 1, 3, 3], &(0..18).map(|i| (i as f64).cos()).collect::<Vec<_>>()));
        let y = x.conv2d(&w, ConvGeom::new(1, 1)).unwrap().relu().tanh().sum().unwrap();
        let _ = grad(&y, &[&x, &w], true).unwrap();
        let report = g.replay().unwrap();
        assert!(report.nodes > 5);
        assert!(report.mismatched.is_empty());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::constant(Array::zeros([3, 4]));
        let ce = logits.softmax_crossentropy(&[0, 1, 3]).unwrap().item().unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }
}

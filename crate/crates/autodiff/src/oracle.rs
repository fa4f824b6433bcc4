//! Finite-difference checks of every differentiable op, first and second
//! order, on seeded random inputs. Used by the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::{Array, ConvGeom};
use crate::error::{Result, TensorError};
use crate::finite_diff::{finite_diff, relative_error};
use crate::tensor::{grad, Graph, Tensor};

pub const STEP: f64 = 1e-5;

type OpFn = dyn Fn(&[Tensor]) -> Result<Tensor>;

/// Random values with magnitude in `[0.1, 1.5)`, which keeps relu, abs and
/// clip off their kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape and length agree")
}

pub fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    away_from_zero(rng, shape).map(|v| v.abs() + 0.2)
}

/// Scalar objective `sum(op(inputs) * weights)`.
fn objective(op: &OpFn, inputs: &[Tensor], weights: &Array) -> Result<Tensor> {
    let out = op(inputs)?;
    out.mul(&Tensor::constant(weights.reshape(out.shape().to_vec())?))?.sum()
}

fn output_weights(op: &OpFn, inputs: &[Array], rng: &mut ChaCha8Rng) -> Result<Array> {
    let consts: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
    Ok(away_from_zero(rng, op(&consts)?.shape()))
}

fn first_order(op: &OpFn, inputs: &[Array], weights: &Array) -> Result<f64> {
    let g = Graph::new();
    let leaves: Vec<Tensor> = inputs.iter().cloned().map(|a| g.leaf(a)).collect();
    let loss = objective(op, &leaves, weights)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let grads = grad(&loss, &refs, false)?;
    let mut worst: f64 = 0.0;
    for (i, gi) in grads.iter().enumerate() {
        let fd = finite_diff(
            |x| {
                let mut vals: Vec<Tensor> = inputs.iter().cloned().map(Tensor::constant).collect();
                vals[i] = Tensor::constant(x.clone());
                objective(op, &vals, weights).and_then(|t| t.item()).unwrap_or(f64::NAN)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(relative_error(gi.value(), &fd, 1e-8));
    }
    Ok(worst)
}

/// Differentiates `<grad_i(loss), v>` with respect to every input and
/// compares with finite differences of the first-order gradient.
fn second_order(op: &OpFn, inputs: &[Array], weights: &Array, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..inputs.len() {
        let v = away_from_zero(rng, inputs[i].shape());
        let first = |vals: &[Array]| -> Result<Array> {
            let g = Graph::new();
            let ls: Vec<Tensor> = vals.iter().cloned().map(|a| g.leaf(a)).collect();
            let loss = objective(op, &ls, weights)?;
            Ok(grad(&loss, &[&ls[i]], false)?.remove(0).to_array())
        };
        let g = Graph::new();
        let leaves: Vec<Tensor> = inputs.iter().cloned().map(|a| g.leaf(a)).collect();
        let loss = objective(op, &leaves, weights)?;
        let gi = grad(&loss, &[&leaves[i]], true)?.remove(0);
        let hv = gi.dot(&Tensor::constant(v.clone()))?;
        let refs: Vec<&Tensor> = leaves.iter().collect();
        let second = grad(&hv, &refs, false)?;
        for (j, sj) in second.iter().enumerate() {
            let fd = finite_diff(
                |x| {
                    let mut vals = inputs.to_vec();
                    vals[j] = x.clone();
                    first(&vals).map(|g| g.dot(&v)).unwrap_or(f64::NAN)
                },
                &inputs[j],
                STEP,
            )?;
            worst = worst.max(relative_error(sj.value(), &fd, 1e-6));
        }
    }
    Ok(worst)
}

struct Case {
    name: &'static str,
    op: Box<OpFn>,
    make: Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Array>>,
}

fn case(
    name: &'static str,
    make: impl Fn(&mut ChaCha8Rng) -> Vec<Array> + 'static,
    op: impl Fn(&[Tensor]) -> Result<Tensor> + 'static,
) -> Case {
    Case { name, op: Box::new(op), make: Box::new(make) }
}

fn cases() -> Vec<Case> {
    let geom = ConvGeom::new(2, 1);
    vec![
        case("add", |r| vec![away_from_zero(r, &[2, 3]), away_from_zero(r, &[2, 3])], |x| x[0].add(&x[1])),
        case(
            "add_broadcast",
            |r| vec![away_from_zero(r, &[2, 3, 2]), away_from_zero(r, &[1, 3, 1])],
            |x| x[0].add(&x[1]),
        ),
        case("sub", |r| vec![away_from_zero(r, &[4]), away_from_zero(r, &[4])], |x| x[0].sub(&x[1])),
        case("mul", |r| vec![away_from_zero(r, &[3, 2]), away_from_zero(r, &[3, 2])], |x| x[0].mul(&x[1])),
        case("div", |r| vec![away_from_zero(r, &[5]), positive(r, &[5])], |x| x[0].div(&x[1])),
        case("neg_scale_shift", |r| vec![away_from_zero(r, &[4])], |x| Ok(x[0].neg().scale(1.7).add_scalar(0.3))),
        case("matmul", |r| vec![away_from_zero(r, &[3, 4]), away_from_zero(r, &[4, 2])], |x| x[0].matmul(&x[1])),
        case("transpose", |r| vec![away_from_zero(r, &[3, 2])], |x| x[0].transpose()),
        case(
            "conv2d",
            |r| vec![away_from_zero(r, &[2, 2, 5, 5]), away_from_zero(r, &[3, 2, 3, 3])],
            move |x| x[0].conv2d(&x[1], geom),
        ),
        case(
            "conv2d_input_grad",
            |r| vec![away_from_zero(r, &[2, 3, 3, 3]), away_from_zero(r, &[3, 2, 3, 3])],
            move |x| Tensor::conv2d_input_grad(&x[0], &x[1], &[2, 2, 5, 5], geom),
        ),
        case(
            "conv2d_weight_grad",
            |r| vec![away_from_zero(r, &[2, 2, 5, 5]), away_from_zero(r, &[2, 3, 3, 3])],
            move |x| Tensor::conv2d_weight_grad(&x[0], &x[1], &[3, 2, 3, 3], geom),
        ),
        case("relu", |r| vec![away_from_zero(r, &[6])], |x| Ok(x[0].relu())),
        case("abs", |r| vec![away_from_zero(r, &[6])], |x| Ok(x[0].abs())),
        case("clip", |r| vec![away_from_zero(r, &[8])], |x| Ok(x[0].clip(-0.05, 0.05).add(&x[0].clip(-0.8, 0.9))?)),
        case("sqrt", |r| vec![positive(r, &[5])], |x| x[0].sqrt()),
        case("exp", |r| vec![away_from_zero(r, &[5])], |x| x[0].exp()),
        case("ln", |r| vec![positive(r, &[5])], |x| x[0].ln()),
        case("tanh", |r| vec![away_from_zero(r, &[5])], |x| Ok(x[0].tanh())),
        case("sigmoid", |r| vec![away_from_zero(r, &[5])], |x| Ok(x[0].sigmoid())),
        case("powf", |r| vec![positive(r, &[5])], |x| x[0].powf(2.7)),
        case("reshape", |r| vec![away_from_zero(r, &[2, 3])], |x| x[0].reshape(&[3, 2])),
        case("sum_to", |r| vec![away_from_zero(r, &[2, 3, 2])], |x| x[0].sum_to(&[3, 1])),
        case(
            "concat",
            |r| vec![away_from_zero(r, &[2, 2]), away_from_zero(r, &[2, 3])],
            |x| Tensor::concat(&[&x[0], &x[1]], 1),
        ),
        case("slice", |r| vec![away_from_zero(r, &[4, 3])], |x| x[0].slice(0, 1, 2)),
        case("pad_slice", |r| vec![away_from_zero(r, &[2, 3])], |x| x[0].pad_slice(1, 1, 5)),
        case("upsample_nearest", |r| vec![away_from_zero(r, &[1, 2, 2, 3])], |x| x[0].upsample_nearest(2)),
        case("sum_pool", |r| vec![away_from_zero(r, &[1, 2, 4, 4])], |x| x[0].sum_pool(2)),
        case("sum", |r| vec![away_from_zero(r, &[3, 3])], |x| x[0].sum()),
        case("mean_axes", |r| vec![away_from_zero(r, &[2, 3, 4])], |x| x[0].mean_axes(&[0, 2], false)),
        case("variance", |r| vec![away_from_zero(r, &[3, 2, 2, 2])], |x| x[0].variance_axes(&[0, 2, 3], false)),
        case("dot", |r| vec![away_from_zero(r, &[6]), away_from_zero(r, &[6])], |x| x[0].dot(&x[1])),
        case("l2norm", |r| vec![away_from_zero(r, &[6])], |x| x[0].l2norm()),
        case(
            "batchnorm_apply",
            |r| {
                vec![
                    away_from_zero(r, &[2, 3, 2, 2]),
                    away_from_zero(r, &[3]),
                    positive(r, &[3]),
                    away_from_zero(r, &[3]),
                    away_from_zero(r, &[3]),
                ]
            },
            |x| x[0].batchnorm_apply(&x[1], &x[2], &x[3], &x[4]),
        ),
        case(
            "softmax_crossentropy",
            |r| vec![away_from_zero(r, &[4, 3])],
            |x| x[0].softmax_crossentropy(&[0, 2, 1, 2]),
        ),
    ]
}

/// Worst relative errors of one op over all instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: u64,
    pub first_order: f64,
    pub second_order: f64,
}

pub fn op_names() -> Vec<&'static str> {
    cases().iter().map(|c| c.name).collect()
}

/// Runs every op on `instances` seeded random inputs.
pub fn check_ops(instances: u64) -> Result<Vec<OpReport>> {
    if instances == 0 {
        return Err(TensorError::FiniteDiff("need at least one instance".into()));
    }
    let mut out = Vec::new();
    for c in cases() {
        let mut report = OpReport { name: c.name, instances, first_order: 0.0, second_order: 0.0 };
        for seed in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + c.name.len() as u64);
            let inputs = (c.make)(&mut rng);
            let weights = output_weights(&*c.op, &inputs, &mut rng)?;
            report.first_order = report.first_order.max(first_order(&*c.op, &inputs, &weights)?);
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 104_729 + c.name.len() as u64);
            let inputs = (c.make)(&mut rng);
            let weights = output_weights(&*c.op, &inputs, &mut rng)?;
            report.second_order = report.second_order.max(second_order(&*c.op, &inputs, &weights, &mut rng)?);
        }
        out.push(report);
    }
    Ok(out)
}

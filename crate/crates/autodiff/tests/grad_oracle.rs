//! Every differentiable op against central finite differences: first order on
//! 20 random instances (relative error < 1e-4), second order (< 1e-3).

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sadag_autodiff::oracle::{away_from_zero, check_ops, op_names, STEP};
use sadag_autodiff::{finite_diff, grad, relative_error, Array, ConvGeom, Graph, Result, Tensor};

const INSTANCES: u64 = 20;

#[test]
fn every_op_matches_finite_differences() {
    let reports = check_ops(INSTANCES).unwrap();
    assert_eq!(reports.len(), op_names().len());
    assert!(reports.len() >= 30);
    for r in &reports {
        assert!(r.first_order < 1e-4, "{}: first order {:e}", r.name, r.first_order);
        assert!(r.second_order < 1e-3, "{}: second order {:e}", r.name, r.second_order);
    }
}

#[test]
fn random_five_parameter_function() {
    // tanh(w0 w1) + exp(w2 / 3) * w3 + ||w||
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = away_from_zero(&mut rng, &[5]);
        let f = |t: &Tensor| -> Result<Tensor> {
            let p: Vec<Tensor> = (0..5).map(|i| t.slice(0, i, 1)).collect::<Result<_>>()?;
            p[0].mul(&p[1])?
                .tanh()
                .add(&p[2].scale(1.0 / 3.0).exp()?.mul(&p[3])?)?
                .add(&t.l2norm()?.reshape(&[1])?)?
                .add(&p[4].powf(2.0)?)?
                .sum()
        };
        let g = Graph::new();
        let w = g.leaf(w0.clone());
        let y = f(&w).unwrap();
        let gw = grad(&y, &[&w], false).unwrap().remove(0);
        let fd = finite_diff(|x| f(&Tensor::constant(x.clone())).unwrap().item().unwrap(), &w0, STEP).unwrap();
        let err = relative_error(gw.value(), &fd, 1e-12);
        assert!(err < 1e-6, "instance {seed}: {err:e}");
    }
}

#[test]
fn straight_through_rounding_passes_gradient_unchanged() {
    let g = Graph::new();
    let x = g.leaf(Array::from_vec(vec![0.2, 1.7, -2.5, 3.49]));
    let y = x.round_ste().add(&x.floor_ste()).unwrap();
    assert_eq!(y.data(), &[0.0, 3.0, -5.0, 6.0]);
    let gx = grad(&y.sum().unwrap(), &[&x], false).unwrap();
    assert_eq!(gx[0].data(), &[2.0; 4]);
}

#[test]
fn linearity_of_grad_with_power_of_two_constants_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w0 = away_from_zero(&mut rng, &[2, 3]);
    let m0 = away_from_zero(&mut rng, &[3, 2]);
    let f = |w: &Tensor| w.matmul(&Tensor::constant(m0.clone())).unwrap().tanh().sum().unwrap();
    let h = |w: &Tensor| w.exp().unwrap().mul(w).unwrap().sum().unwrap();
    let (a, b) = (2.0, -0.5);

    let g = Graph::new();
    let w = g.leaf(w0.clone());
    let combined = f(&w).scale(a).add(&h(&w).scale(b)).unwrap();
    let gc = grad(&combined, &[&w], false).unwrap().remove(0);

    let g2 = Graph::new();
    let w2 = g2.leaf(w0.clone());
    let gf = grad(&f(&w2), &[&w2], false).unwrap().remove(0);
    let gh = grad(&h(&w2), &[&w2], false).unwrap().remove(0);
    let expected = gf.scale(a).add(&gh.scale(b)).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&gc), bits(&expected));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn linearity_of_grad(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w0 = away_from_zero(&mut rng, &[4]);
        let f = |w: &Tensor| w.sigmoid().dot(w).unwrap();
        let h = |w: &Tensor| w.square().unwrap().sum().unwrap().sqrt().unwrap();
        let g = Graph::new();
        let w = g.leaf(w0.clone());
        let combined = f(&w).scale(a).add(&h(&w).scale(b)).unwrap();
        let gc = grad(&combined, &[&w], false).unwrap().remove(0);
        let gf = grad(&f(&w), &[&w], false).unwrap().remove(0);
        let gh = grad(&h(&w), &[&w], false).unwrap().remove(0);
        let expected = gf.scale(a).add(&gh.scale(b)).unwrap();
        prop_assert!(relative_error(gc.value(), expected.value(), 1e-12) < 1e-12);
    }

    #[test]
    fn replay_is_bit_identical(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = away_from_zero(&mut rng, &[2, 2, 4, 4]);
        let w0 = away_from_zero(&mut rng, &[3, 2, 3, 3]);
        let run = || {
            let g = Graph::new();
            let x = g.leaf(x0.clone());
            let w = g.leaf(w0.clone());
            let y = x.conv2d(&w, ConvGeom::new(1, 1)).unwrap();
            let m = y.mean_axes(&[0, 2, 3], true).unwrap();
            let s = y.variance_axes(&[0, 2, 3], true).unwrap().add_scalar(1e-5).sqrt().unwrap();
            let z = y.sub(&m).unwrap().div(&s).unwrap().relu().sum().unwrap();
            let gs = grad(&z, &[&x, &w], true).unwrap();
            let report = g.replay().unwrap();
            (z.item().unwrap().to_bits(), gs[1].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), report)
        };
        let (a, ga, ra) = run();
        let (b, gb, rb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(ga, gb);
        prop_assert!(ra.mismatched.is_empty());
        prop_assert!(rb.mismatched.is_empty());
    }
}

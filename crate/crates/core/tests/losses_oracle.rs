//! Loss gradients checked against finite differences and closed forms.

use sadag_autodiff::{finite_diff, finite_diff_jacobian, grad, relative_error, Array, Graph, Tensor};
use sadag_core::losses::{
    self, fc_hessian_reference, literal_perturbation_gradient, neighbor_perturbation, reconstruction_loss,
    sample_fc_gradients, FrozenPair, LossWeights,
};
use sadag_core::nets::{BnMode, GeneratorArch, GeneratorNet, TeacherArch, TeacherNet};
use sadag_core::quant::{init_quantnet, BitWidths, QuantNet};
use sadag_core::rng::{normal_array, stream_rng, Stream};

fn small_teacher() -> TeacherNet {
    let arch = TeacherArch { in_channels: 2, height: 8, width: 8, channels: vec![3, 4], classes: 3 };
    let mut t = TeacherNet::init(&arch, 11).unwrap();
    // Non-trivial stored statistics so the BN loss has a real target.
    let mut rng = stream_rng(5, Stream::Probe);
    for b in &mut t.blocks {
        let c = b.mean.numel();
        b.mean = normal_array(&mut rng, &[c], 0.3);
        b.std = normal_array(&mut rng, &[c], 0.2).map(|v| 1.0 + v.abs());
    }
    t
}

fn small_generator() -> GeneratorNet {
    let arch = GeneratorArch { z_dim: 6, base_channels: 4, base_size: 2, channels: vec![4, 3], out_channels: 2 };
    GeneratorNet::init(&arch, 3).unwrap()
}

fn quant(t: &TeacherNet, bits: u32) -> QuantNet {
    init_quantnet(t, &BitWidths::standard(&t.arch, bits, bits)).unwrap()
}

fn embeddings(n: usize, dim: usize, seed: u64) -> Array {
    normal_array(&mut stream_rng(seed, Stream::Latent), &[n, dim], 1.0)
}

#[test]
fn per_sample_fc_gradient_matches_autodiff() {
    let t = TeacherNet::init(&TeacherArch::default(), 2).unwrap();
    let q = quant(&t, 4);
    let x = normal_array(&mut stream_rng(1, Stream::Probe), &[4, 3, 16, 16], 0.5);
    let analytic = sample_fc_gradients(&q, &t, &x, 10).unwrap();
    let pair = FrozenPair::new(&t, &q).unwrap();
    let g = Graph::new();
    let auto = pair.fc_gradients_autodiff(&g, &Tensor::constant(x.clone())).unwrap();
    let width = auto.shape()[1];
    assert_eq!(width, 32 * 4);
    for (i, gv) in analytic.iter().enumerate() {
        assert_eq!(gv.source, 10 + i);
        let row = &auto.data()[i * width..(i + 1) * width];
        let err = gv.values.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "sample {i}: {err}");
    }
    // Same thing from explicit fc inputs and residuals.
    let qo = q.forward(&x).unwrap();
    let to = t.forward(&x, BnMode::Stored).unwrap();
    let a = qo.fc_input.to_array();
    let r = qo.logits.to_array().zip_map(&to.logits.to_array(), "r", |p, q| p - q).unwrap();
    let explicit = losses::per_sample_fc_gradient(a.row(1), r.row(1), 1);
    assert_eq!(explicit.values, analytic[1].values);
}

#[test]
fn fc_hessian_is_block_diagonal_gram() {
    let t = TeacherNet::init(&TeacherArch::default(), 4).unwrap();
    let q = quant(&t, 4);
    let x = normal_array(&mut stream_rng(2, Stream::Probe), &[6, 3, 16, 16], 0.5);
    let xc = Tensor::constant(x.clone());
    let to = t.forward(&x, BnMode::Stored).unwrap();
    let base = q.bind_effective(None).unwrap();
    let fc0 = base.fc_w.to_array();
    let (d, c) = (fc0.shape()[0], fc0.shape()[1]);
    assert_eq!(d * c, 128);
    let gradient = |w: &Array| -> Array {
        let g = Graph::new();
        let leaf = g.leaf(w.clone());
        let mut p = base.clone();
        p.fc_w = leaf.clone();
        let qo = q.forward_tensors(&p, &xc, false).unwrap();
        let l = reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs()).unwrap();
        grad(&l, &[&leaf], false).unwrap().remove(0).to_array()
    };
    let rows = finite_diff_jacobian(gradient, &fc0, 1e-3).unwrap();
    let h = fc_hessian_reference(&q.forward(&x).unwrap().fc_input.to_array(), c).unwrap();
    let reference = h.block_diagonal();
    let n = d * c;
    let mut worst = 0.0f64;
    for i in 0..d {
        for k in 0..c {
            for j in 0..d {
                for l in 0..c {
                    let fd = rows[i * c + k].data()[j * c + l];
                    let r = reference.data()[h.class_major_index(i, k) * n + h.class_major_index(j, l)];
                    worst = worst.max((fd - r).abs() / (1.0 + r.abs()));
                    if k != l {
                        assert!(fd.abs() < 1e-6, "cross-class entry ({i},{k})x({j},{l}) = {fd}");
                    }
                }
            }
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn literal_self_distance_gradient_is_zero() {
    let t = small_teacher();
    let q = quant(&t, 4);
    let gen = small_generator();
    let pair = FrozenPair::new(&t, &q).unwrap();
    for seed in 0..3 {
        let z = embeddings(3, 6, seed);
        let g = literal_perturbation_gradient(&gen, &z, &pair).unwrap();
        assert!(g.is_finite());
        let worst = g.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-8, "seed {seed}: {worst}");
    }
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let t = small_teacher();
    let q = quant(&t, 3);
    let x = normal_array(&mut stream_rng(7, Stream::Probe), &[3, 2, 8, 8], 0.7);
    let xc = Tensor::constant(x.clone());
    let to = t.forward(&x, BnMode::Stored).unwrap();
    let hard = q.hard_weights().unwrap();
    let eval = |layer: usize, w: &Array| -> f64 {
        let mut ws: Vec<Tensor> = hard.iter().map(|a| Tensor::constant(a.clone())).collect();
        ws[layer] = Tensor::constant(w.clone());
        let p = q.assemble(ws, Tensor::constant(t.fc_b.clone()));
        let qo = q.forward_tensors(&p, &xc, false).unwrap();
        reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs()).unwrap().item().unwrap()
    };
    let g = Graph::new();
    let p = q.bind_effective(Some(&g)).unwrap();
    let qo = q.forward_tensors(&p, &xc, false).unwrap();
    let l = reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs()).unwrap();
    let mut leaves: Vec<&Tensor> = p.convs.iter().collect();
    leaves.push(&p.fc_w);
    let grads = grad(&l, &leaves, false).unwrap();
    for (layer, ga) in grads.iter().enumerate() {
        let fd = finite_diff(|w| eval(layer, w), &hard[layer], 1e-6).unwrap();
        let err = relative_error(&ga.to_array(), &fd, 1e-8);
        assert!(err < 1e-5, "layer {layer}: {err}");
    }
}

fn loss_at(gen: &GeneratorNet, pair: &FrozenPair, z: &Array, eps: &Array, w: &LossWeights) -> f64 {
    losses::final_loss(gen, &gen.bind(None), &Tensor::constant(z.clone()), Some(eps), pair, w)
        .unwrap()
        .total
        .item()
        .unwrap()
}

fn check_embedding_gradient(w: LossWeights, tol: f64) {
    let t = small_teacher();
    let q = quant(&t, 4);
    let gen = small_generator();
    let pair = FrozenPair::new(&t, &q).unwrap();
    let z = embeddings(4, 6, 9);
    let eps = normal_array(&mut stream_rng(9, Stream::Perturbation), &[4, 6], 0.3);
    let g = Graph::new();
    let zl = g.leaf(z.clone());
    let out = losses::final_loss(&gen, &gen.bind(None), &zl, Some(&eps), &pair, &w).unwrap();
    let auto = grad(&out.total, &[&zl], false).unwrap().remove(0).to_array();
    let fd = finite_diff(|zz| loss_at(&gen, &pair, zz, &eps, &w), &z, 1e-6).unwrap();
    let err = relative_error(&auto, &fd, 1e-8);
    assert!(err < tol, "{w:?}: relative error {err}");
    assert!(auto.norm() > 0.0);

    let gp = gen.bind(Some(&g));
    let out = losses::final_loss(&gen, &gp, &Tensor::constant(z.clone()), Some(&eps), &pair, &w).unwrap();
    let refs: Vec<&Tensor> = gp.iter().collect();
    let grads = grad(&out.total, &refs, false).unwrap();
    // Dense weight and the first BN gamma.
    for k in [0usize, 3] {
        let fd = finite_diff(
            |a| {
                let mut g2 = gen.clone();
                g2.params[k] = a.clone();
                loss_at(&g2, &pair, &z, &eps, &w)
            },
            &gen.params[k],
            1e-6,
        )
        .unwrap();
        let err = relative_error(&grads[k].to_array(), &fd, 1e-8);
        assert!(err < tol, "{w:?} param {k}: relative error {err}");
    }
}

#[test]
fn bn_loss_gradient_matches_finite_differences() {
    check_embedding_gradient(LossWeights { lambda1: 0.0, lambda2: 0.0, zeta: 0.0 }, 1e-5);
}

#[test]
fn diversity_gradient_matches_finite_differences() {
    check_embedding_gradient(LossWeights { lambda1: 1.0, lambda2: 0.0, zeta: 0.0 }, 1e-5);
}

#[test]
fn grad_match_gradient_matches_finite_differences() {
    check_embedding_gradient(LossWeights { lambda1: 0.0, lambda2: 1.0, zeta: 0.0 }, 1e-5);
    check_embedding_gradient(LossWeights { lambda1: 0.5, lambda2: 2.0, zeta: 0.05 }, 1e-5);
}

#[test]
fn bn_only_objective_skips_gradient_terms() {
    let t = small_teacher();
    let q = quant(&t, 4);
    let gen = small_generator();
    let pair = FrozenPair::new(&t, &q).unwrap();
    let z = embeddings(4, 6, 1);
    let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, zeta: 0.0 };
    let a = losses::final_loss(&gen, &gen.bind(None), &Tensor::constant(z.clone()), None, &pair, &zero).unwrap();
    let x = gen.forward(&z).unwrap();
    let b = losses::bn_loss_of_batch(&t, &Tensor::constant(x)).unwrap();
    assert_eq!(a.total.item().unwrap(), b.item().unwrap());
    assert_eq!((a.diversity, a.grad_match), (0.0, 0.0));
}

#[test]
fn neighbor_perturbation_has_requested_norm() {
    let t = small_teacher();
    let q = quant(&t, 4);
    let gen = small_generator();
    let pair = FrozenPair::new(&t, &q).unwrap();
    let z = embeddings(5, 6, 2);
    for nu in [0.1, 2.0, 7.5] {
        let mut rng = stream_rng(4, Stream::Perturbation);
        let p = neighbor_perturbation(&gen, &gen.bind(None), &z, &pair, nu, &mut rng).unwrap();
        assert_eq!(p.eps.shape(), &[5, 6]);
        assert!(p.max_norm_error < 1e-12, "{nu}: {}", p.max_norm_error);
        assert_eq!(p.fallbacks, 0);
        let mut rng = stream_rng(4, Stream::Perturbation);
        let again = neighbor_perturbation(&gen, &gen.bind(None), &z, &pair, nu, &mut rng).unwrap();
        assert_eq!(p, again);
    }
    let mut rng = stream_rng(4, Stream::Perturbation);
    assert!(neighbor_perturbation(&gen, &gen.bind(None), &z, &pair, 0.0, &mut rng).is_err());
}

#[test]
fn neighbor_direction_increases_distance_to_first_order() {
    // Moving a tiny step along the returned direction from the offset point
    // raises the summed distance more than the same step along a random one.
    let t = small_teacher();
    let q = quant(&t, 4);
    let gen = small_generator();
    let pair = FrozenPair::new(&t, &q).unwrap();
    let z = embeddings(3, 6, 8);
    let nu = 1.0;
    let mut rng = stream_rng(6, Stream::Perturbation);
    let p = neighbor_perturbation(&gen, &gen.bind(None), &z, &pair, nu, &mut rng).unwrap();
    let dist = |e: &Array| -> f64 {
        let w = LossWeights { lambda1: 0.0, lambda2: 1.0, zeta: 0.0 };
        losses::final_loss(&gen, &gen.bind(None), &Tensor::constant(z.clone()), Some(e), &pair, &w).unwrap().grad_match
    };
    let small = p.eps.map(|v| v * 1e-2);
    let random = normal_array(&mut stream_rng(1, Stream::Probe), &[3, 6], 1.0);
    let rn = random.norm() / (3f64).sqrt();
    let random_small = random.map(|v| v * 1e-2 / rn);
    assert!(dist(&small) > dist(&random_small));
}

#[test]
fn sharpness_matches_first_order_prediction() {
    let t = small_teacher();
    let mut q = quant(&t, 3);
    // Make the quantized net differ noticeably from the teacher.
    q.base.fc_b = q.base.fc_b.map(|v| v + 0.3);
    let x = normal_array(&mut stream_rng(3, Stream::Probe), &[4, 2, 8, 8], 0.7);
    let zero = losses::sam_loss(&q, &t, &x, 0.0).unwrap();
    assert_eq!(zero.sharpness(), 0.0);
    let g = Graph::new();
    let p = q.bind_effective(Some(&g)).unwrap();
    let to = t.forward(&x, BnMode::Stored).unwrap();
    let qo = q.forward_tensors(&p, &Tensor::constant(x.clone()), false).unwrap();
    let l = reconstruction_loss(&qo.layer_outputs(), &to.layer_outputs()).unwrap();
    let mut leaves: Vec<&Tensor> = p.convs.iter().collect();
    leaves.push(&p.fc_w);
    leaves.push(&p.fc_b);
    let norm = grad(&l, &leaves, false).unwrap().iter().map(|g| g.to_array().norm().powi(2)).sum::<f64>().sqrt();
    let rho = 1e-5;
    let probe = losses::sam_loss(&q, &t, &x, rho).unwrap();
    assert!((probe.base - l.item().unwrap()).abs() < 1e-12);
    let predicted = rho * norm;
    assert!(probe.sharpness() > 0.0);
    assert!((probe.sharpness() - predicted).abs() / predicted < 1e-3, "{probe:?} vs {predicted}");
    assert!(losses::sam_loss(&q, &t, &x, -1.0).is_err());
}

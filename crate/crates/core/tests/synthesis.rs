//! Warm-up and generation on a trained toy teacher.

use std::sync::OnceLock;

use sadag_core::data::{make_textured_blobs, ToyParams};
use sadag_core::nets::{train_teacher, GeneratorArch, TeacherArch, TeacherNet, TrainConfig};
use sadag_core::quant::{init_quantnet, BitWidths, QuantNet};
use sadag_core::synthesis::{generate, generate_bn_only, warmup, GenerationConfig, Latents};

fn teacher() -> &'static TeacherNet {
    static T: OnceLock<TeacherNet> = OnceLock::new();
    T.get_or_init(|| {
        let params = ToyParams { train_size: 512, val_size: 64, ..ToyParams::default() };
        let (train, _) = make_textured_blobs(&params, 0).unwrap();
        let cfg = TrainConfig { epochs: 8, ..TrainConfig::default() };
        train_teacher(&train, &TeacherArch::default(), &cfg).unwrap().0
    })
}

fn quant(t: &TeacherNet) -> QuantNet {
    init_quantnet(t, &BitWidths::standard(&t.arch, 2, 4)).unwrap()
}

fn small() -> GenerationConfig {
    GenerationConfig { images: 48, warmup_steps: 10, epochs: 4, batch: 16, ..GenerationConfig::default() }
}

fn latents(cfg: &GenerationConfig, seed: u64) -> Latents {
    let arch = GeneratorArch::matching(&teacher().arch).unwrap();
    Latents::init(&arch, cfg.images, seed).unwrap()
}

#[test]
fn defaults() {
    let c = GenerationConfig::default();
    assert_eq!(c.images, 1024);
    assert_eq!(c.batch, 128);
    assert_eq!((c.lr_g, c.lr_z), (0.1, 0.01));
    assert_eq!((c.nu, c.zeta, c.lambda1, c.lambda2), (2.0, 0.0, 1.0, 1.0));
}

#[test]
fn zero_warmup_is_a_no_op_and_warmup_is_deterministic() {
    let cfg = GenerationConfig { warmup_steps: 0, ..small() };
    let mut lat = latents(&cfg, 1);
    let before = lat.clone();
    warmup(&mut lat, teacher(), &cfg).unwrap();
    assert_eq!(lat, before);

    let cfg = small();
    let mut a = latents(&cfg, 2);
    let mut b = latents(&cfg, 2);
    let ra = warmup(&mut a, teacher(), &cfg).unwrap();
    let rb = warmup(&mut b, teacher(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn warmup_bn_loss_falls_over_first_ten_steps() {
    // A single batch, so consecutive steps see the same images. Eleven
    // recorded losses give the first ten step-to-step transitions.
    let cfg = GenerationConfig { images: 32, batch: 32, warmup_steps: 11, ..small() };
    let mut short = Vec::new();
    for seed in 0..5 {
        let mut lat = latents(&cfg, seed);
        let r = warmup(&mut lat, teacher(), &cfg).unwrap();
        let falls = r.losses.windows(2).filter(|w| w[1] < w[0]).count();
        if falls < 8 {
            short.push(format!("seed {seed}: {falls} falls in {:?}", r.losses));
        }
    }
    assert!(short.is_empty(), "{short:#?}");
}

#[test]
fn warmup_ends_below_its_start() {
    let cfg = GenerationConfig { images: 32, batch: 32, warmup_steps: 100, ..small() };
    for seed in 0..3 {
        let mut lat = latents(&cfg, seed);
        let r = warmup(&mut lat, teacher(), &cfg).unwrap();
        assert!(r.losses.last() <= r.losses.first(), "seed {seed}: {:?}", r.losses);
    }
}

#[test]
fn zero_weights_match_the_bn_only_loop_bit_for_bit() {
    let cfg = GenerationConfig { lambda1: 0.0, lambda2: 0.0, ..small() };
    let mut a = latents(&cfg, 4);
    warmup(&mut a, teacher(), &cfg).unwrap();
    let mut b = a.clone();
    let (da, ra) = generate(&mut a, teacher(), &quant(teacher()), &cfg, 4).unwrap();
    let (db, rb) = generate_bn_only(&mut b, teacher(), &cfg, 4).unwrap();
    assert_eq!(da, db);
    assert_eq!(a, b);
    assert_eq!(ra.epoch_losses, rb.epoch_losses);
}

#[test]
fn generation_is_deterministic_bounded_and_mostly_descends() {
    let cfg = small();
    let mut descended = 0;
    for seed in 0..5 {
        let mut lat = latents(&cfg, seed);
        warmup(&mut lat, teacher(), &cfg).unwrap();
        let mut again = lat.clone();
        let (ds, r) = generate(&mut lat, teacher(), &quant(teacher()), &cfg, seed).unwrap();
        assert_eq!(ds.len(), cfg.images);
        assert!(ds.images.data().iter().all(|v| v.abs() <= 1.0));
        assert!(r.max_norm_error < 1e-9);
        assert_eq!(r.perturbation_calls, cfg.epochs * cfg.images / cfg.batch);
        assert_eq!(ds.provenance.seed, seed);
        assert!(!ds.provenance.warmup_only);
        if r.epoch_losses.last().unwrap() < r.epoch_losses.first().unwrap() {
            descended += 1;
        }
        let (ds2, r2) = generate(&mut again, teacher(), &quant(teacher()), &cfg, seed).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(r, r2);
    }
    assert!(descended >= 3, "{descended} of 5");
}

#[test]
fn zero_epochs_emit_the_warmed_up_images() {
    let cfg = GenerationConfig { epochs: 0, ..small() };
    let mut lat = latents(&cfg, 6);
    warmup(&mut lat, teacher(), &cfg).unwrap();
    let (ds, _) = generate(&mut lat.clone(), teacher(), &quant(teacher()), &cfg, 6).unwrap();
    assert!(ds.provenance.warmup_only);
    assert_eq!(ds.images, sadag_core::synthesis::emit_images(&lat, &cfg).unwrap());
}

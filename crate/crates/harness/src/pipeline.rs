//! Experiment orchestration: artifact layout, stage functions and the
//! end-to-end runner.
//!
//! Layout under the output root:
//!
//! ```text
//! train.sadd  val.sadd  teacher.sadg  metrics.csv
//! runs/<run_id>/generator.sadg  synthetic.sadd  quant.sadg  [selection.csv | sharpness.csv]
//! ```
//!
//! Every in-memory artifact is snapped to binary32 before use, so a run that
//! loads its inputs from disk computes exactly what the run that wrote them did.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sadag_autodiff::Array;
use sadag_core::calibration::{
    calibrate, evaluate, measure_sharpness_curve, random_subset, select_subset, split_pool, CalibReport, EvalReport,
};
use sadag_core::data::{gather_rows, make_textured_blobs, LabeledDataset};
use sadag_core::losses::SharpnessProbe;
use sadag_core::nets::{train_teacher, GeneratorArch, TeacherNet};
use sadag_core::quant::{init_quantnet, QuantNet};
use sadag_core::synthesis::{generate, generate_bn_only, warmup, GenerationReport, Latents, Provenance, SynthDataset};

use crate::artifacts::{latents_to_named, quant_from_named, quant_to_named, snap_quant};
use crate::config::{ExperimentConfig, Mode, Selection};
use crate::error::{HarnessError, Result};
use crate::format::{
    load_checkpoint, load_dataset, save_checkpoint, save_dataset, snap_f32, write_atomic, DatasetFile,
};
use crate::metrics::{append_row, MetricsRow};

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train.sadd")
    }

    pub fn val(&self) -> PathBuf {
        self.root.join("val.sadd")
    }

    pub fn teacher(&self) -> PathBuf {
        self.root.join("teacher.sadg")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }
}

/// `{mode}-s{seed}-{config hash}`.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}-{:016x}", cfg.mode.as_str(), cfg.seed, cfg.config_hash())
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ HarnessError::Stage { .. } => e,
        e => HarnessError::Stage { stage: name, source: Box::new(e) },
    })
}

fn check_provenance(path: &Path, prov: &Provenance, seed: u64, hash: u64, force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if prov.config_hash != hash {
        return Err(HarnessError::Mismatch { path: path.to_path_buf(), expected: hash, found: prov.config_hash });
    }
    if prov.seed != seed {
        return Err(HarnessError::Invalid(format!(
            "{} was produced with seed {}, expected {seed} (pass --force to use it anyway)",
            path.display(),
            prov.seed
        )));
    }
    Ok(())
}

pub fn data_provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { seed: cfg.data_seed, config_hash: cfg.teacher_hash(), warmup_only: false, fallback_warning: false }
}

fn teacher_provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { seed: cfg.teacher_seed, ..data_provenance(cfg) }
}

/// Provenance of every per-run artifact.
pub fn run_provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance { seed: cfg.seed, config_hash: cfg.config_hash(), warmup_only: false, fallback_warning: false }
}

fn snap_dataset(ds: &LabeledDataset) -> Result<LabeledDataset> {
    Ok(LabeledDataset::new(snap_f32(&ds.images), ds.labels.clone(), ds.classes)?)
}

/// The toy train/val split, snapped to binary32.
pub fn make_toy_dataset(cfg: &ExperimentConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    let (train, val) = make_textured_blobs(&cfg.toy_params(), cfg.data_seed)?;
    Ok((snap_dataset(&train)?, snap_dataset(&val)?))
}

pub fn save_labeled(path: &Path, ds: &LabeledDataset, prov: Provenance) -> Result<()> {
    save_dataset(path, &DatasetFile { images: ds.images.clone(), labels: Some(ds.labels.clone()), provenance: prov })?;
    Ok(())
}

pub fn load_labeled(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<LabeledDataset> {
    let file = load_dataset(path)?;
    let prov = data_provenance(cfg);
    check_provenance(path, &file.provenance, prov.seed, prov.config_hash, force)?;
    let labels = file.labels.ok_or_else(|| HarnessError::Invalid(format!("{} has no labels", path.display())))?;
    Ok(LabeledDataset::new(file.images, labels, cfg.classes)?)
}

/// Loads the train/val files, creating them first if absent.
pub fn prepare_data(cfg: &ExperimentConfig, layout: &Layout, force: bool) -> Result<(LabeledDataset, LabeledDataset)> {
    if !layout.train().exists() || !layout.val().exists() {
        let (train, val) = make_toy_dataset(cfg)?;
        save_labeled(&layout.train(), &train, data_provenance(cfg))?;
        save_labeled(&layout.val(), &val, data_provenance(cfg))?;
    }
    Ok((load_labeled(&layout.train(), cfg, force)?, load_labeled(&layout.val(), cfg, force)?))
}

/// Trains the teacher on `train` and snaps it to binary32.
pub fn fit_teacher(cfg: &ExperimentConfig, train: &LabeledDataset) -> Result<TeacherNet> {
    let (mut teacher, _) = train_teacher(train, &cfg.teacher_arch(), &cfg.train_config())?;
    teacher.snap_to_f32();
    Ok(teacher)
}

pub fn save_teacher(path: &Path, cfg: &ExperimentConfig, teacher: &TeacherNet) -> Result<()> {
    save_checkpoint(path, &teacher.named_arrays(), &teacher_provenance(cfg))?;
    Ok(())
}

pub fn load_teacher(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<TeacherNet> {
    let (named, prov) = load_checkpoint(path)?;
    let expected = teacher_provenance(cfg);
    check_provenance(path, &prov, expected.seed, expected.config_hash, force)?;
    let teacher = TeacherNet::from_named(&named)?;
    if !force && teacher.arch != cfg.teacher_arch() {
        return Err(HarnessError::Invalid(format!("{}: architecture differs from the config", path.display())));
    }
    Ok(teacher)
}

/// Loads the teacher checkpoint, training and saving it first if absent.
pub fn prepare_teacher(
    cfg: &ExperimentConfig,
    layout: &Layout,
    train: &LabeledDataset,
    force: bool,
) -> Result<TeacherNet> {
    if !layout.teacher().exists() {
        save_teacher(&layout.teacher(), cfg, &fit_teacher(cfg, train)?)?;
    }
    load_teacher(&layout.teacher(), cfg, force)
}

/// Initial latents, warm-up, then generation (or the BN-only loop for
/// `bn-only` mode). Images are snapped to binary32.
pub fn synthesize(cfg: &ExperimentConfig, teacher: &TeacherNet) -> Result<(Latents, SynthDataset, GenerationReport)> {
    let gcfg = cfg.generation();
    gcfg.validate()?;
    let arch = GeneratorArch::matching(&teacher.arch)?;
    let mut lat = Latents::init(&arch, gcfg.images, cfg.seed)?;
    warmup(&mut lat, teacher, &gcfg)?;
    let (ds, report) = if cfg.mode == Mode::BnOnly {
        generate_bn_only(&mut lat, teacher, &gcfg, cfg.seed)?
    } else {
        let quant = init_quantnet(teacher, &cfg.bit_widths().map_err(HarnessError::Invalid)?)?;
        generate(&mut lat, teacher, &quant, &gcfg, cfg.seed)?
    };
    let ds = SynthDataset::new(snap_f32(&ds.images), Provenance { config_hash: cfg.config_hash(), ..ds.provenance })?;
    Ok((lat, ds, report))
}

pub fn save_synthetic(path: &Path, ds: &SynthDataset) -> Result<()> {
    save_dataset(path, &DatasetFile { images: ds.images.clone(), labels: None, provenance: ds.provenance.clone() })?;
    Ok(())
}

pub fn load_synthetic(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<SynthDataset> {
    let file = load_dataset(path)?;
    check_provenance(path, &file.provenance, cfg.seed, cfg.config_hash(), force)?;
    Ok(SynthDataset::new(file.images, file.provenance)?)
}

/// Calibrates a fresh quantized copy of `teacher` on `images`; the result
/// is snapped to binary32.
pub fn calibrate_on(cfg: &ExperimentConfig, teacher: &TeacherNet, images: &Array) -> Result<(QuantNet, CalibReport)> {
    let bits = cfg.bit_widths().map_err(HarnessError::Invalid)?;
    let mut q = init_quantnet(teacher, &bits)?;
    let report = calibrate(&mut q, teacher, &snap_f32(images), &cfg.calibration(), cfg.seed)?;
    Ok((snap_quant(&q)?, report))
}

pub fn save_quant(path: &Path, cfg: &ExperimentConfig, q: &QuantNet) -> Result<()> {
    save_checkpoint(path, &quant_to_named(q), &run_provenance(cfg))?;
    Ok(())
}

pub fn load_quant(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<QuantNet> {
    let (named, prov) = load_checkpoint(path)?;
    check_provenance(path, &prov, cfg.seed, cfg.config_hash(), force)?;
    quant_from_named(&named)
}

/// Pool subset picked in `select` mode.
#[derive(Clone, Debug, PartialEq)]
pub struct PickedSubset {
    /// Indices into the validation set.
    pub pool: Vec<usize>,
    /// Positions within `pool`, in pick order.
    pub picked: Vec<usize>,
    /// Validation indices outside the pool.
    pub held_out: Vec<usize>,
}

/// Splits the validation set into a pool and a held-out part, then picks
/// `select_k` pool images by gradient matching or uniformly.
pub fn pick_subset(cfg: &ExperimentConfig, teacher: &TeacherNet, val: &LabeledDataset) -> Result<PickedSubset> {
    let (pool, held_out) = split_pool(val.len(), cfg.pool_size, cfg.seed)?;
    let picked = match cfg.selection {
        Selection::Greedy => {
            let q = init_quantnet(teacher, &cfg.bit_widths().map_err(HarnessError::Invalid)?)?;
            select_subset(&gather_rows(&val.images, &pool), cfg.select_k, &q, teacher)?.indices
        }
        Selection::Random => random_subset(pool.len(), cfg.select_k, cfg.seed)?,
    };
    Ok(PickedSubset { pool, picked, held_out })
}

pub fn write_sharpness_csv(path: &Path, probes: &[SharpnessProbe], samples: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rho", "base", "perturbed", "sharpness", "epsilon_norm"])?;
    let n = samples as f64;
    for p in probes {
        w.write_record([p.rho, p.base / n, p.perturbed / n, p.sharpness() / n, p.epsilon_norm].map(|v| v.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(format!("buffering sharpness curve: {e}")))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

fn write_selection_csv(path: &Path, subset: &PickedSubset) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["order", "val_index"])?;
    for (order, &p) in subset.picked.iter().enumerate() {
        w.write_record([order.to_string(), subset.pool[p].to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(format!("buffering selection: {e}")))?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn metrics_row(cfg: &ExperimentConfig, eval: &EvalReport, wall_s: f64) -> MetricsRow {
    MetricsRow {
        run_id: run_id(cfg),
        mode: cfg.mode.as_str().to_string(),
        seed: cfg.seed,
        bits_w: cfg.bits_w.render(),
        bits_a: cfg.bits_a.render(),
        top1: Some(eval.top1),
        recon: Some(eval.recon),
        sharpness: eval.sharpness,
        rho: eval.rho,
        wall_s,
    }
}

pub fn failure_row(cfg: &ExperimentConfig, stage: &str, wall_s: f64) -> MetricsRow {
    MetricsRow {
        run_id: run_id(cfg),
        mode: format!("failed:{stage}"),
        seed: cfg.seed,
        bits_w: cfg.bits_w.render(),
        bits_a: cfg.bits_a.render(),
        top1: None,
        recon: None,
        sharpness: None,
        rho: cfg.rho_eval,
        wall_s,
    }
}

/// Everything a completed run produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub row: MetricsRow,
    pub dir: PathBuf,
    pub eval: EvalReport,
    pub calibration: CalibReport,
    /// Absent in `select` mode.
    pub generation: Option<GenerationReport>,
    pub subset: Option<PickedSubset>,
    pub curve: Option<Vec<SharpnessProbe>>,
}

/// Runs the configured mode end to end and appends its metrics row. A failing
/// stage appends a `failed:<stage>` row instead and returns the error.
pub fn run(cfg: &ExperimentConfig, root: &Path, force: bool) -> Result<RunOutcome> {
    let layout = Layout::new(root);
    let start = Instant::now();
    match run_stages(cfg, &layout, force, start) {
        Ok(outcome) => {
            append_row(&layout.metrics(), &outcome.row)?;
            Ok(outcome)
        }
        Err(e) => {
            let tag = e.stage().unwrap_or("setup");
            // The run's own error is the one worth reporting.
            let _ = append_row(&layout.metrics(), &failure_row(cfg, tag, start.elapsed().as_secs_f64()));
            Err(e)
        }
    }
}

fn run_stages(cfg: &ExperimentConfig, layout: &Layout, force: bool, start: Instant) -> Result<RunOutcome> {
    stage("config", cfg.validate().map_err(|(k, d)| HarnessError::Invalid(format!("{k}: {d}"))))?;
    let (train, val) = stage("data", prepare_data(cfg, layout, force))?;
    let teacher = stage("teacher", prepare_teacher(cfg, layout, &train, force))?;
    let dir = layout.run_dir(&run_id(cfg));

    let (calib_images, eval_set, generation, subset) = if cfg.mode == Mode::Select {
        let subset = stage("select", pick_subset(cfg, &teacher, &val))?;
        stage("select", write_selection_csv(&dir.join("selection.csv"), &subset))?;
        let chosen: Vec<usize> = subset.picked.iter().map(|&p| subset.pool[p]).collect();
        let images = gather_rows(&val.images, &chosen);
        let held_out = val.subset(&subset.held_out);
        (images, held_out, None, Some(subset))
    } else {
        let (lat, ds, report) = stage("generate", synthesize(cfg, &teacher))?;
        stage(
            "generate",
            save_checkpoint(&dir.join("generator.sadg"), &latents_to_named(&lat), &run_provenance(cfg))
                .map_err(Into::into),
        )?;
        stage("generate", save_synthetic(&dir.join("synthetic.sadd"), &ds))?;
        (ds.images, val, Some(report), None)
    };

    let (q, calibration) = stage("calibrate", calibrate_on(cfg, &teacher, &calib_images))?;
    stage("calibrate", save_quant(&dir.join("quant.sadg"), cfg, &q))?;
    let eval = stage("evaluate", evaluate(&q, &teacher, &eval_set, cfg.rho_eval).map_err(Into::into))?;

    let curve = if cfg.mode == Mode::Sharpness {
        let curve = stage(
            "sharpness",
            measure_sharpness_curve(&q, &teacher, &eval_set.images, &cfg.radii).map_err(Into::into),
        )?;
        stage("sharpness", write_sharpness_csv(&dir.join("sharpness.csv"), &curve, eval_set.len()))?;
        Some(curve)
    } else {
        None
    };

    Ok(RunOutcome {
        row: metrics_row(cfg, &eval, start.elapsed().as_secs_f64()),
        dir,
        eval,
        calibration,
        generation,
        subset,
        curve,
    })
}

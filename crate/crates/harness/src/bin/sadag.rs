//! `sadag` command-line tool.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sadag_core::calibration::{evaluate, measure_sharpness_curve};
use sadag_core::data::gather_rows;
use sadag_harness::artifacts::latents_to_named;
use sadag_harness::config::{ExperimentConfig, Mode};
use sadag_harness::format::{load_dataset, save_checkpoint};
use sadag_harness::metrics::append_row;
use sadag_harness::pipeline::{
    calibrate_on, data_provenance, fit_teacher, load_labeled, load_quant, load_teacher, make_toy_dataset, metrics_row,
    pick_subset, run, run_id, run_provenance, save_labeled, save_quant, save_synthetic, save_teacher, synthesize,
    write_sharpness_csv, Layout,
};

#[derive(Parser)]
#[command(name = "sadag", version, about = "Synthetic calibration data for zero-shot quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Use artifacts even if their config hash or seed differs.
    #[arg(long)]
    force: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.out)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy train/val sets and train the full-precision teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Warm up and train the generator, then emit the synthetic set.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Output dataset path.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Calibrate a quantized copy of the teacher on a dataset file.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        quant: Option<PathBuf>,
    },
    /// Evaluate a calibrated checkpoint and append a metrics row.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Calibrate on a gradient-matched (or random) subset of real images.
    Select {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Write the sharpness curve of a calibrated checkpoint.
    Sharpness {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        quant: PathBuf,
        #[arg(long)]
        val: Option<PathBuf>,
    },
    /// Full pipeline for the configured mode.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Full pipeline over several seeds and modes.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated modes; defaults to the config's.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<String>,
    },
}

fn or_default(p: &Option<PathBuf>, d: PathBuf) -> PathBuf {
    p.clone().unwrap_or(d)
}

fn train_teacher_cmd(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let layout = common.layout();
    if layout.teacher().exists() && !common.force {
        load_teacher(&layout.teacher(), &cfg, false).context("existing teacher")?;
        println!("{} is up to date", layout.teacher().display());
        return Ok(());
    }
    let (train, val) = make_toy_dataset(&cfg)?;
    let data_prov = data_provenance(&cfg);
    save_labeled(&layout.train(), &train, data_prov.clone())?;
    save_labeled(&layout.val(), &val, data_prov)?;
    let teacher = fit_teacher(&cfg, &train)?;
    save_teacher(&layout.teacher(), &cfg, &teacher)?;
    println!("teacher val top-1 {:.4} -> {}", teacher.accuracy(&val)?, layout.teacher().display());
    Ok(())
}

fn generate_cmd(common: &Common, teacher: &Option<PathBuf>, dataset: &Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let layout = common.layout();
    let t = load_teacher(&or_default(teacher, layout.teacher()), &cfg, common.force)?;
    let dir = layout.run_dir(&run_id(&cfg));
    let path = or_default(dataset, dir.join("synthetic.sadd"));
    let (lat, ds, report) = synthesize(&cfg, &t)?;
    let gen_path = path.with_file_name("generator.sadg");
    save_checkpoint(&gen_path, &latents_to_named(&lat), &run_provenance(&cfg))?;
    save_synthetic(&path, &ds)?;
    if ds.provenance.fallback_warning {
        eprintln!("warning: more than half of the perturbations in some epoch used a random direction");
    }
    println!(
        "{} images -> {} (loss {:?} -> {:?})",
        ds.len(),
        path.display(),
        report.epoch_losses.first(),
        report.epoch_losses.last()
    );
    Ok(())
}

fn calibrate_cmd(common: &Common, teacher: &Option<PathBuf>, dataset: &Path, quant: &Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let layout = common.layout();
    let t = load_teacher(&or_default(teacher, layout.teacher()), &cfg, common.force)?;
    let file = load_dataset(dataset)?;
    if !common.force
        && file.labels.is_none()
        && (file.provenance.config_hash, file.provenance.seed) != (cfg.config_hash(), cfg.seed)
    {
        bail!(
            "{} was produced by config {:016x} seed {}, expected {:016x} seed {} (pass --force to use it anyway)",
            dataset.display(),
            file.provenance.config_hash,
            file.provenance.seed,
            cfg.config_hash(),
            cfg.seed
        );
    }
    let (q, report) = calibrate_on(&cfg, &t, &file.images)?;
    let path = or_default(quant, layout.run_dir(&run_id(&cfg)).join("quant.sadg"));
    save_quant(&path, &cfg, &q)?;
    println!("reconstruction {:.6} -> {:.6} per sample -> {}", report.recon_before, report.recon_after, path.display());
    Ok(())
}

fn evaluate_cmd(common: &Common, teacher: &Option<PathBuf>, quant: &Path, val: &Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let cfg = common.load()?;
    let layout = common.layout();
    let t = load_teacher(&or_default(teacher, layout.teacher()), &cfg, common.force)?;
    let q = load_quant(quant, &cfg, common.force)?;
    let v = load_labeled(&or_default(val, layout.val()), &cfg, common.force)?;
    let eval = evaluate(&q, &t, &v, cfg.rho_eval)?;
    let row = metrics_row(&cfg, &eval, start.elapsed().as_secs_f64());
    append_row(&layout.metrics(), &row)?;
    println!("top-1 {:.4} recon {:.6} sharpness {:?}", eval.top1, eval.recon, eval.sharpness);
    Ok(())
}

fn select_cmd(common: &Common, teacher: &Option<PathBuf>, val: &Option<PathBuf>) -> Result<()> {
    let start = Instant::now();
    let mut cfg = common.load()?;
    cfg.mode = Mode::Select;
    let layout = common.layout();
    let t = load_teacher(&or_default(teacher, layout.teacher()), &cfg, common.force)?;
    let v = load_labeled(&or_default(val, layout.val()), &cfg, common.force)?;
    let subset = pick_subset(&cfg, &t, &v)?;
    let chosen: Vec<usize> = subset.picked.iter().map(|&p| subset.pool[p]).collect();
    let (q, _) = calibrate_on(&cfg, &t, &gather_rows(&v.images, &chosen))?;
    save_quant(&layout.run_dir(&run_id(&cfg)).join("quant.sadg"), &cfg, &q)?;
    let eval = evaluate(&q, &t, &v.subset(&subset.held_out), cfg.rho_eval)?;
    append_row(&layout.metrics(), &metrics_row(&cfg, &eval, start.elapsed().as_secs_f64()))?;
    println!("{} selection of {}: held-out top-1 {:.4}", cfg.selection.as_str(), chosen.len(), eval.top1);
    Ok(())
}

fn sharpness_cmd(common: &Common, teacher: &Option<PathBuf>, quant: &Path, val: &Option<PathBuf>) -> Result<()> {
    let cfg = common.load()?;
    let layout = common.layout();
    let t = load_teacher(&or_default(teacher, layout.teacher()), &cfg, common.force)?;
    let q = load_quant(quant, &cfg, common.force)?;
    let v = load_labeled(&or_default(val, layout.val()), &cfg, common.force)?;
    let curve = measure_sharpness_curve(&q, &t, &v.images, &cfg.radii)?;
    let path = quant.with_file_name("sharpness.csv");
    write_sharpness_csv(&path, &curve, v.len())?;
    println!("{} radii -> {}", curve.len(), path.display());
    Ok(())
}

fn run_cmd(cfg: &ExperimentConfig, common: &Common) -> Result<()> {
    let out = run(cfg, &common.out, common.force)?;
    println!(
        "{}: top-1 {:.4} recon {:.6} sharpness {:?} ({:.1}s)",
        out.row.run_id, out.eval.top1, out.eval.recon, out.eval.sharpness, out.row.wall_s
    );
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::TrainTeacher { common } => train_teacher_cmd(common),
        Command::Generate { common, teacher, dataset } => generate_cmd(common, teacher, dataset),
        Command::Calibrate { common, teacher, dataset, quant } => calibrate_cmd(common, teacher, dataset, quant),
        Command::Evaluate { common, teacher, quant, val } => evaluate_cmd(common, teacher, quant, val),
        Command::Select { common, teacher, val } => select_cmd(common, teacher, val),
        Command::Sharpness { common, teacher, quant, val } => sharpness_cmd(common, teacher, quant, val),
        Command::Run { common } => run_cmd(&common.load()?, common),
        Command::Sweep { common, seeds, modes } => {
            let base = common.load()?;
            let modes: Vec<Mode> = if modes.is_empty() {
                vec![base.mode]
            } else {
                modes.iter().map(|m| m.parse().map_err(anyhow::Error::msg)).collect::<Result<_>>()?
            };
            let mut failed = 0;
            for &mode in &modes {
                for &seed in seeds {
                    let cfg = ExperimentConfig { seed, mode, ..base.clone() };
                    if let Err(e) = run_cmd(&cfg, common) {
                        eprintln!("{}: {e:#}", run_id(&cfg));
                        failed += 1;
                    }
                }
            }
            if failed > 0 {
                bail!("{failed} of {} runs failed", modes.len() * seeds.len());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

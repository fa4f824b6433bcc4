//! Line-oriented `key = value` experiment configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sadag_core::calibration::CalibConfig;
use sadag_core::data::ToyParams;
use sadag_core::nets::{TeacherArch, TrainConfig};
use sadag_core::quant::BitWidths;
use sadag_core::synthesis::{digest_u64, GenerationConfig};

use crate::error::ConfigError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Sadag,
    BnOnly,
    Select,
    Sharpness,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Sadag => "sadag",
            Mode::BnOnly => "bn-only",
            Mode::Select => "select",
            Mode::Sharpness => "sharpness",
        }
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sadag" => Ok(Mode::Sadag),
            "bn-only" => Ok(Mode::BnOnly),
            "select" => Ok(Mode::Select),
            "sharpness" => Ok(Mode::Sharpness),
            _ => Err(format!("unknown mode {s:?} (sadag, bn-only, select, sharpness)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Greedy,
    Random,
}

impl Selection {
    pub fn as_str(self) -> &'static str {
        match self {
            Selection::Greedy => "greedy",
            Selection::Random => "random",
        }
    }
}

impl FromStr for Selection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Selection::Greedy),
            "random" => Ok(Selection::Random),
            _ => Err(format!("unknown selection {s:?} (greedy, random)")),
        }
    }
}

/// A single width (expanded with the usual first/last-layer layout) or an
/// explicit per-layer list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BitSpec {
    Uniform(u32),
    PerLayer(Vec<u32>),
}

impl BitSpec {
    pub fn render(&self) -> String {
        match self {
            BitSpec::Uniform(b) => b.to_string(),
            BitSpec::PerLayer(v) => v.iter().map(u32::to_string).collect::<Vec<_>>().join(","),
        }
    }
}

impl FromStr for BitSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
            .collect::<Result<_, _>>()?;
        Ok(if parts.len() == 1 { BitSpec::Uniform(parts[0]) } else { BitSpec::PerLayer(parts) })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub bits_w: BitSpec,
    pub bits_a: BitSpec,
    pub images: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub calib_iters: usize,
    pub nu: f64,
    pub zeta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lr_g: f64,
    pub lr_z: f64,
    pub alpha: f64,
    pub batch_gen: usize,
    pub batch_cal: usize,
    pub rho_eval: f64,
    pub reg_weight: f64,
    pub fine_tune: bool,
    pub classes: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub data_seed: u64,
    pub teacher_epochs: usize,
    pub teacher_seed: u64,
    pub pool_size: usize,
    pub select_k: usize,
    pub selection: Selection,
    pub radii: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let g = GenerationConfig::default();
        let c = CalibConfig::default();
        let d = ToyParams::default();
        Self {
            seed: 0,
            mode: Mode::Sadag,
            bits_w: BitSpec::Uniform(2),
            bits_a: BitSpec::Uniform(4),
            images: g.images,
            warmup_steps: g.warmup_steps,
            epochs: g.epochs,
            calib_iters: c.iterations,
            nu: g.nu,
            zeta: g.zeta,
            lambda1: g.lambda1,
            lambda2: g.lambda2,
            lr_g: g.lr_g,
            lr_z: g.lr_z,
            alpha: c.lr,
            batch_gen: g.batch,
            batch_cal: c.batch,
            rho_eval: c.rho_eval,
            reg_weight: c.reg_weight,
            fine_tune: c.fine_tune,
            classes: d.classes,
            image_size: d.height,
            train_size: d.train_size,
            val_size: d.val_size,
            data_seed: 0,
            teacher_epochs: TrainConfig::default().epochs,
            teacher_seed: 0,
            pool_size: 256,
            select_k: 32,
            selection: Selection::Greedy,
            radii: vec![0.0, 0.01, 0.02, 0.05, 0.1],
        }
    }
}

/// Every accepted key, in canonical order.
pub const KEYS: &[&str] = &[
    "seed",
    "mode",
    "bits_w",
    "bits_a",
    "T",
    "N_w",
    "N_g",
    "N_q",
    "nu",
    "zeta",
    "lambda1",
    "lambda2",
    "lr_g",
    "lr_z",
    "alpha",
    "batch_gen",
    "batch_cal",
    "rho_eval",
    "reg_weight",
    "fine_tune",
    "classes",
    "image_size",
    "train_size",
    "val_size",
    "data_seed",
    "teacher_epochs",
    "teacher_seed",
    "pool_size",
    "select_k",
    "selection",
    "radii",
];

const TEACHER_KEYS: &[&str] =
    &["classes", "image_size", "train_size", "val_size", "data_seed", "teacher_epochs", "teacher_seed"];

fn parse_value<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        match key {
            "seed" => self.seed = parse_value(v)?,
            "mode" => self.mode = v.parse()?,
            "bits_w" => self.bits_w = v.parse()?,
            "bits_a" => self.bits_a = v.parse()?,
            "T" => self.images = parse_value(v)?,
            "N_w" => self.warmup_steps = parse_value(v)?,
            "N_g" => self.epochs = parse_value(v)?,
            "N_q" => self.calib_iters = parse_value(v)?,
            "nu" => self.nu = parse_value(v)?,
            "zeta" => self.zeta = parse_value(v)?,
            "lambda1" => self.lambda1 = parse_value(v)?,
            "lambda2" => self.lambda2 = parse_value(v)?,
            "lr_g" => self.lr_g = parse_value(v)?,
            "lr_z" => self.lr_z = parse_value(v)?,
            "alpha" => self.alpha = parse_value(v)?,
            "batch_gen" => self.batch_gen = parse_value(v)?,
            "batch_cal" => self.batch_cal = parse_value(v)?,
            "rho_eval" => self.rho_eval = parse_value(v)?,
            "reg_weight" => self.reg_weight = parse_value(v)?,
            "fine_tune" => self.fine_tune = parse_value(v)?,
            "classes" => self.classes = parse_value(v)?,
            "image_size" => self.image_size = parse_value(v)?,
            "train_size" => self.train_size = parse_value(v)?,
            "val_size" => self.val_size = parse_value(v)?,
            "data_seed" => self.data_seed = parse_value(v)?,
            "teacher_epochs" => self.teacher_epochs = parse_value(v)?,
            "teacher_seed" => self.teacher_seed = parse_value(v)?,
            "pool_size" => self.pool_size = parse_value(v)?,
            "select_k" => self.select_k = parse_value(v)?,
            "selection" => self.selection = v.parse()?,
            "radii" => {
                self.radii = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|r| parse_value(r.trim())).collect::<Result<_, _>>()?
                }
            }
            _ => unreachable!("key checked against KEYS"),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "seed" => self.seed.to_string(),
            "mode" => self.mode.as_str().to_string(),
            "bits_w" => self.bits_w.render(),
            "bits_a" => self.bits_a.render(),
            "T" => self.images.to_string(),
            "N_w" => self.warmup_steps.to_string(),
            "N_g" => self.epochs.to_string(),
            "N_q" => self.calib_iters.to_string(),
            "nu" => self.nu.to_string(),
            "zeta" => self.zeta.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "lr_g" => self.lr_g.to_string(),
            "lr_z" => self.lr_z.to_string(),
            "alpha" => self.alpha.to_string(),
            "batch_gen" => self.batch_gen.to_string(),
            "batch_cal" => self.batch_cal.to_string(),
            "rho_eval" => self.rho_eval.to_string(),
            "reg_weight" => self.reg_weight.to_string(),
            "fine_tune" => self.fine_tune.to_string(),
            "classes" => self.classes.to_string(),
            "image_size" => self.image_size.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "data_seed" => self.data_seed.to_string(),
            "teacher_epochs" => self.teacher_epochs.to_string(),
            "teacher_seed" => self.teacher_seed.to_string(),
            "pool_size" => self.pool_size.to_string(),
            "select_k" => self.select_k.to_string(),
            "selection" => self.selection.as_str().to_string(),
            "radii" => self.radii.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
            _ => unreachable!("key checked against KEYS"),
        }
    }

    /// Parses config text; unset keys keep their defaults.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        let mut lines: HashMap<&'static str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, detail: format!("expected `key = value`, got {content:?}") });
            };
            let k = k.trim();
            let Some(&key) = KEYS.iter().find(|&&known| known == k) else {
                return Err(ConfigError::UnknownKey { key: k.to_string(), line });
            };
            if let Some(first) = lines.insert(key, line) {
                return Err(ConfigError::Invalid {
                    key: key.to_string(),
                    line,
                    detail: format!("already set on line {first}"),
                });
            }
            cfg.set(key, v.trim()).map_err(|detail| ConfigError::Invalid { key: key.to_string(), line, detail })?;
        }
        cfg.validate().map_err(|(key, detail)| ConfigError::Invalid {
            key: key.to_string(),
            line: lines.get(key).copied().unwrap_or(0),
            detail,
        })?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::parse_str(&text)
    }

    /// Canonical text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            writeln!(out, "{k} = {}", self.get(k)).expect("writing to a string");
        }
        out
    }

    /// Digest of every key except `seed`.
    pub fn config_hash(&self) -> u64 {
        self.digest(KEYS.iter().filter(|&&k| k != "seed"))
    }

    /// Digest of the keys that determine the toy data and the teacher.
    pub fn teacher_hash(&self) -> u64 {
        self.digest(TEACHER_KEYS.iter())
    }

    fn digest<'a>(&self, keys: impl Iterator<Item = &'a &'a str>) -> u64 {
        let mut text = String::new();
        for k in keys {
            writeln!(text, "{k}={}", self.get(k)).expect("writing to a string");
        }
        digest_u64(text.as_bytes())
    }

    /// Checks every field; on failure names the offending key.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let pos = |k: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((k, format!("must be positive, got {v}")))
            }
        };
        let non_neg = |k: &'static str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((k, format!("must be non-negative, got {v}")))
            }
        };
        let at_least = |k: &'static str, v: usize, min: usize| {
            if v >= min {
                Ok(())
            } else {
                Err((k, format!("must be at least {min}, got {v}")))
            }
        };
        pos("nu", self.nu)?;
        non_neg("zeta", self.zeta)?;
        non_neg("lambda1", self.lambda1)?;
        non_neg("lambda2", self.lambda2)?;
        pos("lr_g", self.lr_g)?;
        pos("lr_z", self.lr_z)?;
        non_neg("alpha", self.alpha)?;
        non_neg("rho_eval", self.rho_eval)?;
        non_neg("reg_weight", self.reg_weight)?;
        at_least("T", self.images, 2)?;
        at_least("batch_gen", self.batch_gen, 2)?;
        if self.images % self.batch_gen == 1 {
            return Err((
                "T",
                format!("{} images in batches of {} leave a single-image batch", self.images, self.batch_gen),
            ));
        }
        at_least("N_q", self.calib_iters, 1)?;
        at_least("batch_cal", self.batch_cal, 1)?;
        at_least("classes", self.classes, 2)?;
        if self.classes >= u16::MAX as usize {
            return Err(("classes", format!("at most {} classes", u16::MAX - 1)));
        }
        at_least("teacher_epochs", self.teacher_epochs, 1)?;
        at_least("select_k", self.select_k, 1)?;
        if self.select_k > self.pool_size {
            return Err(("select_k", format!("{} exceeds pool_size {}", self.select_k, self.pool_size)));
        }
        if self.pool_size >= self.val_size {
            return Err(("pool_size", format!("{} leaves no held-out validation images", self.pool_size)));
        }
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(("image_size", format!("must be a positive multiple of 4, got {}", self.image_size)));
        }
        if self.radii.iter().any(|&r| !(r >= 0.0)) || self.radii.windows(2).any(|w| !(w[0] <= w[1])) {
            return Err(("radii", "must be non-negative and ascending".into()));
        }
        self.toy_params().validate().map_err(|e| ("train_size", e.to_string()))?;
        self.bit_widths().map_err(|e| ("bits_w", e))?;
        Ok(())
    }

    pub fn toy_params(&self) -> ToyParams {
        ToyParams {
            classes: self.classes,
            height: self.image_size,
            width: self.image_size,
            train_size: self.train_size,
            val_size: self.val_size,
            ..ToyParams::default()
        }
    }

    pub fn teacher_arch(&self) -> TeacherArch {
        TeacherArch {
            in_channels: ToyParams::default().channels,
            height: self.image_size,
            width: self.image_size,
            classes: self.classes,
            ..TeacherArch::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.teacher_epochs, seed: self.teacher_seed, ..TrainConfig::default() }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            images: self.images,
            warmup_steps: self.warmup_steps,
            epochs: self.epochs,
            nu: self.nu,
            zeta: self.zeta,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lr_g: self.lr_g,
            lr_z: self.lr_z,
            batch: self.batch_gen,
        }
    }

    pub fn calibration(&self) -> CalibConfig {
        CalibConfig {
            iterations: self.calib_iters,
            lr: self.alpha,
            batch: self.batch_cal,
            rho_eval: self.rho_eval,
            reg_weight: self.reg_weight,
            fine_tune: self.fine_tune,
        }
    }

    pub fn bit_widths(&self) -> Result<BitWidths, String> {
        let arch = self.teacher_arch();
        let base = BitWidths::standard(&arch, uniform_or(&self.bits_w, 2), uniform_or(&self.bits_a, 4));
        let bits = BitWidths {
            weights: match &self.bits_w {
                BitSpec::Uniform(_) => base.weights,
                BitSpec::PerLayer(v) => v.clone(),
            },
            activations: match &self.bits_a {
                BitSpec::Uniform(_) => base.activations,
                BitSpec::PerLayer(v) => v.clone(),
            },
        };
        bits.validate(&arch).map_err(|e| e.to_string())?;
        Ok(bits)
    }
}

fn uniform_or(b: &BitSpec, fallback: u32) -> u32 {
    match b {
        BitSpec::Uniform(v) => *v,
        BitSpec::PerLayer(_) => fallback,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let c = ExperimentConfig::parse_str("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!((c.nu, c.zeta, c.lambda1, c.lambda2), (2.0, 0.0, 1.0, 1.0));
        assert_eq!((c.lr_g, c.lr_z), (0.1, 0.01));
        assert_eq!((c.batch_gen, c.batch_cal, c.images), (128, 32, 1024));
    }

    #[test]
    fn canonical_text_round_trips() {
        let mut c = ExperimentConfig::default();
        c.nu = 0.75;
        c.bits_w = BitSpec::PerLayer(vec![8, 3, 4, 8]);
        c.radii = vec![0.01, 0.5];
        let back = ExperimentConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn rejections_name_key_and_line() {
        let e = ExperimentConfig::parse_str("# comment\nnu = -1\n").unwrap_err();
        assert!(matches!(&e, ConfigError::Invalid { key, line: 2, .. } if key == "nu"), "{e}");
        let e = ExperimentConfig::parse_str("seed = 1\nfoo = 2").unwrap_err();
        assert!(matches!(&e, ConfigError::UnknownKey { key, line: 2 } if key == "foo"));
        let e = ExperimentConfig::parse_str("nu 2").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1, .. }));
        let e = ExperimentConfig::parse_str("T = abc").unwrap_err();
        assert!(matches!(&e, ConfigError::Invalid { key, .. } if key == "T"));
        let e = ExperimentConfig::parse_str("bits_w = 1").unwrap_err();
        assert!(matches!(&e, ConfigError::Invalid { key, .. } if key == "bits_w"));
        assert!(ExperimentConfig::parse_str("nu = 1\nnu = 2").is_err());
    }

    #[test]
    fn hashes_ignore_seed_and_scope_teacher_keys() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { seed: 9, ..a.clone() };
        let c = ExperimentConfig { lambda2: 0.0, ..a.clone() };
        let d = ExperimentConfig { teacher_epochs: 3, ..a.clone() };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.teacher_hash(), c.teacher_hash());
        assert_ne!(a.teacher_hash(), d.teacher_hash());
    }

    #[test]
    fn bit_spec_expansion() {
        let c = ExperimentConfig::default();
        let b = c.bit_widths().unwrap();
        assert_eq!(b.weights, vec![8, 2, 2, 8]);
        assert_eq!(b.activations, vec![8, 4, 8]);
    }
}

//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{ClassEffect, SyntheticTaskSpec};
use crate::ensemble::ArchitecturePreset;
use crate::error::{Error, Result};

/// Learning rates of the standard grid.
pub const GRID_LEARNING_RATES: [f64; 2] = [0.001, 0.0001];

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    /// Generated on the fly with its own seed.
    Synthetic { spec: SyntheticTaskSpec, seed: u64 },
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub architecture: ArchitecturePreset,
    pub pretrained: bool,
    pub smoothed: bool,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub slice_k: usize,
    pub fwhm_mm: f64,
    pub train_fraction: f64,
    pub val_fraction_of_train: f64,
    /// Train even when the balance check flags the dataset.
    pub waive_balance: bool,
    pub data: DataSource,
    /// Directory of pretrained backbone snapshots.
    pub snapshots: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            architecture: ArchitecturePreset::One,
            pretrained: false,
            smoothed: false,
            learning_rate: 0.001,
            epochs: 25,
            batch_size: 8,
            seed: 0,
            slice_k: 8,
            fwhm_mm: 8.0,
            train_fraction: 0.8,
            val_fraction_of_train: 0.2,
            waive_balance: false,
            data: DataSource::Synthetic {
                spec: SyntheticTaskSpec::standard(),
                seed: 0,
            },
            snapshots: None,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{v}`"))),
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{v}`")))
}

fn parse_dims(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(['x', 'X', ','])
        .map(|p| parse_num(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("`{key}` expects XxYxZ, got `{v}`")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.slice_k < 1 {
            return Err(Error::Config("slice_k must be at least 1".into()));
        }
        if !(self.fwhm_mm.is_finite() && self.fwhm_mm >= 0.0) {
            return Err(Error::Config(format!("fwhm_mm must be non-negative, got {}", self.fwhm_mm)));
        }
        if let DataSource::Synthetic { spec, .. } = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    /// Applies `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut spec = SyntheticTaskSpec::standard();
        let mut data_seed = 0u64;
        let mut manifest = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            match key {
                "architecture_id" => cfg.architecture = ArchitecturePreset::from_id(parse_num(key, value)?)?,
                "pretrained" => cfg.pretrained = parse_bool(key, value)?,
                "smoothed" => cfg.smoothed = parse_bool(key, value)?,
                "learning_rate" => cfg.learning_rate = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "slice_k" => cfg.slice_k = parse_num(key, value)?,
                "fwhm_mm" => cfg.fwhm_mm = parse_num(key, value)?,
                "train_fraction" => cfg.train_fraction = parse_num(key, value)?,
                "val_fraction_of_train" => cfg.val_fraction_of_train = parse_num(key, value)?,
                "waive_balance" => cfg.waive_balance = parse_bool(key, value)?,
                "snapshots" => cfg.snapshots = Some(PathBuf::from(value)),
                "manifest" => manifest = Some(PathBuf::from(value)),
                "data_seed" => data_seed = parse_num(key, value)?,
                "dims" => spec.dims = parse_dims(key, value)?,
                "voxel_mm" => spec.voxel_mm = parse_num(key, value)?,
                "n_per_class" => spec.n_per_class = parse_num(key, value)?,
                "effect_min" => spec.class_effect.min_strength = parse_num(key, value)?,
                "effect_max" => spec.class_effect.max_strength = parse_num(key, value)?,
                "noise_sigma" => spec.noise_sigma = parse_num(key, value)?,
                "n_proxy_classes" => spec.n_proxy_classes = parse_num(key, value)?,
                "proxy_per_class" => spec.proxy_per_class = parse_num(key, value)?,
                _ => return Err(Error::Config(format!("line {}: unknown key `{key}`", n + 1))),
            }
        }
        cfg.data = match manifest {
            Some(path) => DataSource::Manifest(path),
            None => DataSource::Synthetic { spec, seed: data_seed },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Manifest(p) = &mut cfg.data {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = &mut cfg.snapshots {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The config in the form [`ExperimentConfig::parse`] reads.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("architecture_id", self.architecture.id().to_string());
        kv("pretrained", self.pretrained.to_string());
        kv("smoothed", self.smoothed.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("seed", self.seed.to_string());
        kv("slice_k", self.slice_k.to_string());
        kv("fwhm_mm", self.fwhm_mm.to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("val_fraction_of_train", self.val_fraction_of_train.to_string());
        kv("waive_balance", self.waive_balance.to_string());
        if let Some(p) = &self.snapshots {
            kv("snapshots", p.display().to_string());
        }
        match &self.data {
            DataSource::Manifest(p) => kv("manifest", p.display().to_string()),
            DataSource::Synthetic { spec, seed } => {
                let [x, y, z] = spec.dims;
                let ClassEffect {
                    min_strength,
                    max_strength,
                } = spec.class_effect;
                kv("data_seed", seed.to_string());
                kv("dims", format!("{x}x{y}x{z}"));
                kv("voxel_mm", spec.voxel_mm.to_string());
                kv("n_per_class", spec.n_per_class.to_string());
                kv("effect_min", min_strength.to_string());
                kv("effect_max", max_strength.to_string());
                kv("noise_sigma", spec.noise_sigma.to_string());
                kv("n_proxy_classes", spec.n_proxy_classes.to_string());
                kv("proxy_per_class", spec.proxy_per_class.to_string());
            }
        }
        s
    }

    /// Single-line summary for error messages.
    pub fn echo(&self) -> String {
        self.to_text().trim_end().replace('\n', "; ")
    }
}

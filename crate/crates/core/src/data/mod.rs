//! Datasets of paired tissue volumes, class balance, the train/test and
//! per-epoch validation split protocol, and synthetic task generators.

mod synth;

pub use synth::{
    generate_classification_task, generate_proxy_pretraining_task, ClassEffect, ProxyDataset,
    SyntheticTaskSpec, EFFECT_SEMI_AXIS,
};

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::volume::{read_volume, write_volume, Label, Tissue, Volume};

/// Ratio above which a dataset counts as imbalanced.
pub const IMBALANCE_THRESHOLD: f64 = 1.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub gm: Volume,
    pub wm: Volume,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        for (i, s) in samples.iter().enumerate() {
            if s.gm.dims() != s.wm.dims() {
                return Err(Error::shape(
                    "dataset",
                    format!(
                        "sample {i}: gm dims {:?} differ from wm dims {:?}",
                        s.gm.dims(),
                        s.wm.dims()
                    ),
                ));
            }
        }
        Ok(Dataset {
            name: name.into(),
            samples,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BalanceReport {
    pub pd: usize,
    pub hc: usize,
    /// Majority over minority count; infinite when a class is absent.
    pub ratio: f64,
    pub flagged: bool,
}

impl BalanceReport {
    pub fn from_labels(labels: &[Label]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("cannot check the balance of an empty dataset".into()));
        }
        let pd = labels.iter().filter(|&&l| l == Label::Pd).count();
        let hc = labels.len() - pd;
        let (hi, lo) = (pd.max(hc), pd.min(hc));
        let ratio = if lo == 0 {
            f64::INFINITY
        } else {
            hi as f64 / lo as f64
        };
        Ok(BalanceReport {
            pd,
            hc,
            ratio,
            flagged: ratio > IMBALANCE_THRESHOLD,
        })
    }
}

pub fn check_balance(d: &Dataset) -> Result<BalanceReport> {
    BalanceReport::from_labels(&d.labels())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction_of_train: f64,
}

impl SplitPlan {
    pub fn new(seed: u64) -> Self {
        SplitPlan {
            seed,
            train_fraction: 0.8,
            val_fraction_of_train: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("train_fraction", self.train_fraction),
            ("val_fraction_of_train", self.val_fraction_of_train),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        Ok(())
    }

    /// Index partition of `0..n` into (train, test), train first in a
    /// seed-determined order.
    pub fn train_test_indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let perm = permutation(n, seed::derive(self.seed, &[seed::label("train-test")]))?;
        let k = floor_fraction(n, self.train_fraction);
        let test = perm[k..].to_vec();
        let mut train = perm;
        train.truncate(k);
        Ok((train, test))
    }

    /// Index partition of `0..n_train` into (fit, validation) for `epoch`.
    pub fn epoch_validation_indices(&self, n_train: usize, epoch: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        self.validate()?;
        let perm = permutation(
            n_train,
            seed::derive(self.seed, &[seed::label("validation"), epoch as u64]),
        )?;
        let v = floor_fraction(n_train, self.val_fraction_of_train);
        Ok((perm[v..].to_vec(), perm[..v].to_vec()))
    }
}

/// `floor(n·f)`, robust to `n·f` landing a rounding error below an integer.
pub fn floor_fraction(n: usize, f: f64) -> usize {
    ((n as f64 * f) + 1e-9).floor() as usize
}

fn permutation(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!("cannot split {n} samples; need at least 2")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut seed::rng(seed, &[]));
    Ok(perm)
}

pub fn split_train_test(d: &Dataset, plan: &SplitPlan) -> Result<(Dataset, Dataset)> {
    let (train, test) = plan.train_test_indices(d.len())?;
    Ok((d.subset(&train), d.subset(&test)))
}

pub fn split_epoch_validation(train: &Dataset, plan: &SplitPlan, epoch: usize) -> Result<(Dataset, Dataset)> {
    let (fit, val) = plan.epoch_validation_indices(train.len(), epoch)?;
    Ok((train.subset(&fit), train.subset(&val)))
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Writes one native file per volume and a manifest of
/// `gm-path,wm-path,label` lines with paths relative to `dir`.
pub fn save_dataset(d: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in d.samples.iter().enumerate() {
        let gm = format!("{i:05}_gm.nvol");
        let wm = format!("{i:05}_wm.nvol");
        write_volume(&s.gm, &dir.join(&gm))?;
        write_volume(&s.wm, &dir.join(&wm))?;
        manifest.push_str(&format!("{gm},{wm},{}\n", s.label.name()));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a manifest; relative volume paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let what = path.display().to_string();
    let mut samples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [gm, wm, label] = fields[..] else {
            return Err(Error::parse(&what, format!("line {}: expected gm,wm,label", n + 1)));
        };
        let label = Label::parse(label)
            .ok_or_else(|| Error::parse(&what, format!("line {}: unknown label `{label}`", n + 1)))?;
        let gm = read_volume(&base.join(gm))?;
        let wm = read_volume(&base.join(wm))?;
        samples.push(Sample {
            gm: gm.with_tissue(Tissue::Gm).with_label(Some(label)),
            wm: wm.with_tissue(Tissue::Wm).with_label(Some(label)),
            label,
        });
    }
    let name = base
        .file_name()
        .map_or_else(|| "manifest".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples)
}

use std::time::Instant;

use rand::seq::SliceRandom;

use super::config::ExperimentConfig;
use crate::data::{check_balance, Dataset, SplitPlan};
use crate::ensemble::{build_preset, core_forward, CoreArchitecture, SnapshotStore};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Adam, AdamConfig, Graph, Real, Tensor};
use crate::volume::{clip_artifacts, gaussian_smooth, normalize_intensity, slice_to_input, Label, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub model: String,
    pub smoothed: bool,
    pub pretrained: bool,
    pub learning_rate: f64,
    pub seed: u64,
    /// Correct over total on the held-out test split.
    pub accuracy: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: f64,
}

impl ResultRecord {
    /// Equality of everything except wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        ResultRecord {
            seconds: 0.0,
            ..self.clone()
        } == ResultRecord {
            seconds: 0.0,
            ..other.clone()
        }
    }
}

/// Model inputs for a whole dataset: GM and WM stacks `[N, k, Y, X]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs {
    pub gm: Tensor<f32>,
    pub wm: Tensor<f32>,
    pub labels: Vec<Label>,
}

impl Inputs {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn gather(t: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
        let per: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let data = indices
            .iter()
            .flat_map(|&i| t.data()[i * per..(i + 1) * per].iter().copied())
            .collect();
        Tensor::new(&shape, data).expect("gathered batch")
    }

    pub fn subset(&self, indices: &[usize]) -> Inputs {
        Inputs {
            gm: Self::gather(&self.gm, indices),
            wm: Self::gather(&self.wm, indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Normalize, clip, and (when `smoothed`) smooth, in that order.
pub fn preprocess(v: &Volume, smoothed: bool, fwhm_mm: f64) -> Result<Volume> {
    let v = clip_artifacts(&normalize_intensity(v)?);
    if smoothed {
        gaussian_smooth(&v, fwhm_mm)
    } else {
        Ok(v)
    }
}

pub fn prepare_inputs(d: &Dataset, smoothed: bool, fwhm_mm: f64, slice_k: usize) -> Result<Inputs> {
    let mut gm = Vec::with_capacity(d.len());
    let mut wm = Vec::with_capacity(d.len());
    for s in d.samples() {
        gm.push(slice_to_input(&preprocess(&s.gm, smoothed, fwhm_mm)?, slice_k)?);
        wm.push(slice_to_input(&preprocess(&s.wm, smoothed, fwhm_mm)?, slice_k)?);
    }
    let stack = |v: Vec<Tensor<f32>>| -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = v.iter().collect();
        let t = Tensor::stack(&refs)?;
        // stack adds a leading axis to [1, k, Y, X]; fold it away
        let mut shape = t.shape().to_vec();
        shape.remove(1);
        t.reshaped(&shape)
    };
    Ok(Inputs {
        gm: stack(gm)?,
        wm: stack(wm)?,
        labels: d.labels(),
    })
}

fn targets(labels: &[Label]) -> Vec<usize> {
    labels.iter().map(|l| l.index()).collect()
}

const EVAL_BATCH: usize = 32;

/// Mean cross-entropy in evaluation mode.
pub fn mean_loss<T: Real>(core: &mut CoreArchitecture<T>, inputs: &Inputs) -> Result<f64> {
    let mut total = 0.0;
    for chunk in (0..inputs.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let b = inputs.subset(chunk);
        let mut g = Graph::new();
        let x = g.leaf(b.gm.cast());
        let y = g.leaf(b.wm.cast());
        let logits = core_forward(core, &mut g, x, y, false)?;
        let loss = g.cross_entropy(logits, &targets(&b.labels))?;
        total += g.scalar(loss).as_f64() * chunk.len() as f64;
    }
    Ok(total / inputs.len() as f64)
}

/// Fraction of test samples whose prediction equals the label.
pub fn evaluate<T: Real>(core: &mut CoreArchitecture<T>, test: &Inputs) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0;
    for chunk in (0..test.len()).collect::<Vec<_>>().chunks(EVAL_BATCH) {
        let b = test.subset(chunk);
        let pred = core.predict(&b.gm.cast(), &b.wm.cast())?;
        correct += pred.iter().zip(&b.labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Seeds of one run, all derived from `config.seed`.
fn run_seed(config: &ExperimentConfig, what: &str) -> u64 {
    seed::derive(config.seed, &[seed::label(what)])
}

/// Trains on `train` with per-epoch validation re-splits, then evaluates
/// the last-epoch model on `test`.
pub fn train_on_inputs(
    config: &ExperimentConfig,
    train: &Inputs,
    test: &Inputs,
    snapshots: &SnapshotStore,
) -> Result<(CoreArchitecture, ResultRecord)> {
    config.validate()?;
    let start = Instant::now();
    let plan = SplitPlan {
        seed: run_seed(config, "split"),
        train_fraction: config.train_fraction,
        val_fraction_of_train: config.val_fraction_of_train,
    };
    if test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let mut core = build_preset(
        config.architecture,
        config.pretrained,
        run_seed(config, "model"),
        config.slice_k,
        snapshots,
    )?;
    let mut adam = Adam::new(AdamConfig::default())?;
    let mut train_loss = Vec::with_capacity(config.epochs);
    let mut val_loss = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let (mut fit, val) = plan.epoch_validation_indices(train.len(), epoch)?;
        if fit.is_empty() || val.is_empty() {
            return Err(Error::Config(format!(
                "{} training samples leave an empty fit or validation split",
                train.len()
            )));
        }
        fit.shuffle(&mut seed::rng(plan.seed, &[seed::label("batches"), epoch as u64]));
        let mut epoch_total = 0.0;
        for (batch, chunk) in fit.chunks(config.batch_size).enumerate() {
            let b = train.subset(chunk);
            let mut g = Graph::new();
            let x = g.leaf(b.gm.clone());
            let y = g.leaf(b.wm.clone());
            let logits = core_forward(&mut core, &mut g, x, y, true)?;
            let loss = g.cross_entropy(logits, &targets(&b.labels))?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    value,
                    config: config.echo(),
                });
            }
            g.backward(loss)?;
            core.pull_grads(&g)?;
            adam.step(&mut core.stores_mut(), config.learning_rate)?;
            epoch_total += value * chunk.len() as f64;
        }
        train_loss.push(epoch_total / fit.len() as f64);
        let v = mean_loss(&mut core, &train.subset(&val))?;
        log::debug!(
            "epoch {epoch}: train loss {:.4}, val loss {v:.4}",
            train_loss[epoch]
        );
        val_loss.push(v);
    }
    let accuracy = evaluate(&mut core, test)?;
    let record = ResultRecord {
        model: config.architecture.name(),
        smoothed: config.smoothed,
        pretrained: config.pretrained,
        learning_rate: config.learning_rate,
        seed: config.seed,
        accuracy,
        train_loss,
        val_loss,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((core, record))
}

/// Splits `dataset` into train and test, preprocesses once, and trains.
pub fn train(
    config: &ExperimentConfig,
    dataset: &Dataset,
    snapshots: &SnapshotStore,
) -> Result<(CoreArchitecture, ResultRecord)> {
    config.validate()?;
    if !config.waive_balance {
        let report = check_balance(dataset)?;
        if report.flagged {
            return Err(Error::Config(format!(
                "dataset is imbalanced ({} PD / {} HC, ratio {:.2}); set waive_balance = true to train anyway",
                report.pd, report.hc, report.ratio
            )));
        }
    }
    let inputs = prepare_inputs(dataset, config.smoothed, config.fwhm_mm, config.slice_k)?;
    train_prepared(config, &inputs, snapshots)
}

/// Splits preprocessed inputs into train and test by the config's seed and
/// trains.
pub fn train_prepared(
    config: &ExperimentConfig,
    inputs: &Inputs,
    snapshots: &SnapshotStore,
) -> Result<(CoreArchitecture, ResultRecord)> {
    let plan = SplitPlan {
        seed: run_seed(config, "split"),
        train_fraction: config.train_fraction,
        val_fraction_of_train: config.val_fraction_of_train,
    };
    let (train_idx, test_idx) = plan.train_test_indices(inputs.len())?;
    train_on_inputs(config, &inputs.subset(&train_idx), &inputs.subset(&test_idx), snapshots)
}

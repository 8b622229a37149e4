use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{generate_proxy_pretraining_task, ProxyDataset, SyntheticTaskSpec};
use crate::ensemble::SnapshotStore;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Adam, AdamConfig, Graph, Tensor};
use crate::zoo::{adapt_output_layer, build_micro_model, MicroKind, MicroModel, MicroModelSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.001,
        }
    }
}

fn batch(images: &Tensor<f32>, indices: &[usize]) -> Tensor<f32> {
    let per: usize = images.shape()[1..].iter().product();
    let mut shape = images.shape().to_vec();
    shape[0] = indices.len();
    let data = indices
        .iter()
        .flat_map(|&i| images.data()[i * per..(i + 1) * per].iter().copied())
        .collect();
    Tensor::new(&shape, data).expect("proxy batch")
}

/// Trains a model with a classifier head on proxy images; returns the
/// per-epoch mean training loss.
pub fn train_micro_classifier(
    model: &mut MicroModel,
    data: &ProxyDataset,
    options: &PretrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Config("proxy dataset is empty".into()));
    }
    let mut adam = Adam::new(AdamConfig::default())?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        order.shuffle(&mut seed::rng(seed, &[seed::label("proxy-batches"), epoch as u64]));
        let mut total = 0.0;
        for (b, chunk) in order.chunks(options.batch_size).enumerate() {
            let mut g = Graph::new();
            let x = g.leaf(batch(&data.images, chunk));
            let logits = model.logits(&mut g, x, true)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = g.cross_entropy(logits, &targets)?;
            let value = g.scalar(loss) as f64;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    value,
                    config: format!(
                        "proxy pretraining of {} (epochs {}, batch {}, lr {}, seed {seed})",
                        model.kind(),
                        options.epochs,
                        options.batch_size,
                        options.learning_rate
                    ),
                });
            }
            g.backward(loss)?;
            model.pull_grads(&g)?;
            adam.step(&mut model.stores_mut(), options.learning_rate)?;
            total += value * chunk.len() as f64;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

/// Accuracy of the model's head on proxy images, in evaluation mode.
pub fn micro_accuracy(model: &mut MicroModel, data: &ProxyDataset) -> Result<f64> {
    let mut correct = 0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(32) {
        let mut g = Graph::new();
        let x = g.leaf(batch(&data.images, chunk));
        let logits = model.logits(&mut g, x, false)?;
        let k = g.shape(logits)[1];
        for (row, &i) in g.value(logits).chunks(k).zip(chunk) {
            let best = (0..k).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            correct += usize::from(best == data.labels[i]);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Population variance of each pooled feature across `data`, in
/// evaluation mode.
pub fn feature_variance(model: &mut MicroModel, data: &ProxyDataset) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let idx: Vec<usize> = (0..data.len()).collect();
    let x = g.leaf(batch(&data.images, &idx));
    let f = model.features(&mut g, x, false)?;
    let d = g.shape(f)[1];
    let values = g.value(f);
    let n = data.len() as f64;
    Ok((0..d)
        .map(|j| {
            let col = values.iter().skip(j).step_by(d).map(|&v| v as f64);
            let mean = col.clone().sum::<f64>() / n;
            col.map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .collect())
}

/// Model trained on the proxy task for one kind, head still attached.
pub fn pretrain_kind(kind: MicroKind, data: &ProxyDataset, options: &PretrainOptions, seed: u64) -> Result<MicroModel> {
    let in_channels = data.images.shape()[1];
    let kind_seed = seed::derive(seed, &[seed::label(kind.name())]);
    let model = build_micro_model(&MicroModelSpec::default_for(kind, in_channels), kind_seed)?;
    let mut model = adapt_output_layer(model, data.num_classes)?;
    let history = train_micro_classifier(&mut model, data, options, kind_seed)?;
    log::info!(
        "pretrained {kind}: loss {:.4} -> {:.4}",
        history.first().copied().unwrap_or(f64::NAN),
        history.last().copied().unwrap_or(f64::NAN)
    );
    Ok(model)
}

/// One backbone snapshot per kind; classifier heads are discarded.
pub fn pretrain_proxy(
    kinds: &[MicroKind],
    data: &ProxyDataset,
    options: &PretrainOptions,
    seed: u64,
) -> Result<SnapshotStore> {
    let models: Vec<(MicroKind, MicroModel)> = kinds
        .par_iter()
        .map(|&kind| pretrain_kind(kind, data, options, seed).map(|m| (kind, m)))
        .collect::<Result<_>>()?;
    let mut store = SnapshotStore::new();
    for (kind, model) in models {
        let tag = format!("proxy-{kind}-seed{seed}-epochs{}", options.epochs);
        store.insert(kind, tag, model.backbone_snapshot());
    }
    Ok(store)
}

/// Generates a proxy task from `spec` and pretrains `kinds` on it, all
/// seeded from `seed`.
pub fn proxy_snapshots(
    kinds: &[MicroKind],
    spec: &SyntheticTaskSpec,
    slices: usize,
    options: &PretrainOptions,
    seed: u64,
) -> Result<SnapshotStore> {
    let proxy = generate_proxy_pretraining_task(spec, slices, seed::derive(seed, &[seed::label("proxy-data")]))?;
    pretrain_proxy(kinds, &proxy, options, seed)
}

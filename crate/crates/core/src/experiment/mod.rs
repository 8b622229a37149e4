//! Configuration, training, proxy pretraining, grids, and result tables.

mod config;
mod grid;
mod pretrain;
mod train;

pub use config::{DataSource, ExperimentConfig, GRID_LEARNING_RATES};
pub use grid::{
    cell_seed, cell_settings, emit_table, parse_csv_table, run_cells, run_grid, GridInputs, TableFormat, TableRow,
    CELLS_PER_ARCHITECTURE, TABLE_COLUMNS,
};
pub use pretrain::{
    feature_variance, micro_accuracy, pretrain_kind, pretrain_proxy, proxy_snapshots, train_micro_classifier, PretrainOptions,
};
pub use train::{
    evaluate, mean_loss, prepare_inputs, preprocess, train, train_on_inputs, train_prepared, Inputs, ResultRecord,
};

use crate::data::{generate_classification_task, load_manifest, Dataset};
use crate::error::{Error, Result};

pub const THREADS_VAR: &str = "NVE_THREADS";

/// Worker pool sized by `NVE_THREADS`, defaulting to the available cores.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_VAR) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{v}`")))?,
        Err(_) => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))
}

/// Loads or generates the configured dataset.
pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { spec, seed } => generate_classification_task(spec, *seed),
        DataSource::Manifest(path) => load_manifest(path),
    }
}

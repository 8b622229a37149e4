use std::fmt::Write as _;

use rayon::prelude::*;

use super::config::{ExperimentConfig, GRID_LEARNING_RATES};
use super::train::{train_on_inputs, Inputs, ResultRecord};
use crate::data::SplitPlan;
use crate::ensemble::{ArchitecturePreset, SnapshotStore};
use crate::error::{Error, Result};
use crate::seed;

pub const CELLS_PER_ARCHITECTURE: usize = 8;

/// `(smoothed, pretrained, learning_rate)` of cell `c`, in table order:
/// smoothing outermost, then pretraining, then learning rate.
pub fn cell_settings(c: usize) -> (bool, bool, f64) {
    (c / 4 == 1, (c / 2) % 2 == 1, GRID_LEARNING_RATES[c % 2])
}

pub fn cell_seed(master_seed: u64, arch: ArchitecturePreset, cell: usize) -> u64 {
    seed::derive(master_seed, &[arch.id() as u64, cell as u64])
}

/// Inputs preprocessed both ways, shared by every cell.
pub struct GridInputs {
    pub plain: Inputs,
    pub smoothed: Inputs,
}

/// Runs every cell of every architecture on `pool`; records come back in
/// table order regardless of scheduling. With `repeats > 1` each cell is
/// rerun on fresh splits and seeds and its accuracy and losses averaged;
/// repeat 0 uses `master_seed` itself.
pub fn run_grid(
    archs: &[ArchitecturePreset],
    inputs: &GridInputs,
    base: &ExperimentConfig,
    master_seed: u64,
    repeats: usize,
    snapshots: &SnapshotStore,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ResultRecord>> {
    if repeats < 1 {
        return Err(Error::Config("grid needs at least one repeat".into()));
    }
    let cells: Vec<usize> = (0..CELLS_PER_ARCHITECTURE).collect();
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        let m = if r == 0 {
            master_seed
        } else {
            seed::derive(master_seed, &[seed::label("repeat"), r as u64])
        };
        runs.push(run_cells(archs, &cells, inputs, base, m, snapshots, pool)?);
    }
    let mut merged = runs.swap_remove(0);
    if runs.is_empty() {
        return Ok(merged);
    }
    let n = repeats as f64;
    let mean = |a: &mut Vec<f64>, others: Vec<&Vec<f64>>| {
        for (i, v) in a.iter_mut().enumerate() {
            *v = (*v + others.iter().map(|o| o[i]).sum::<f64>()) / n;
        }
    };
    for (i, rec) in merged.iter_mut().enumerate() {
        rec.accuracy = (rec.accuracy + runs.iter().map(|r| r[i].accuracy).sum::<f64>()) / n;
        rec.seconds += runs.iter().map(|r| r[i].seconds).sum::<f64>();
        mean(&mut rec.train_loss, runs.iter().map(|r| &r[i].train_loss).collect());
        mean(&mut rec.val_loss, runs.iter().map(|r| &r[i].val_loss).collect());
    }
    Ok(merged)
}

/// Runs the listed cells of each architecture. Every cell trains and tests
/// on the same split, drawn from `master_seed`.
pub fn run_cells(
    archs: &[ArchitecturePreset],
    cells: &[usize],
    inputs: &GridInputs,
    base: &ExperimentConfig,
    master_seed: u64,
    snapshots: &SnapshotStore,
    pool: &rayon::ThreadPool,
) -> Result<Vec<ResultRecord>> {
    if let Some(&c) = cells.iter().find(|&&c| c >= CELLS_PER_ARCHITECTURE) {
        return Err(Error::Config(format!("cell {c} is outside 0..{CELLS_PER_ARCHITECTURE}")));
    }
    let plan = SplitPlan {
        seed: seed::derive(master_seed, &[seed::label("split")]),
        train_fraction: base.train_fraction,
        val_fraction_of_train: base.val_fraction_of_train,
    };
    let (train_idx, test_idx) = plan.train_test_indices(inputs.plain.len())?;
    let plain = (inputs.plain.subset(&train_idx), inputs.plain.subset(&test_idx));
    let smooth = (inputs.smoothed.subset(&train_idx), inputs.smoothed.subset(&test_idx));
    let jobs: Vec<(ArchitecturePreset, usize)> = archs
        .iter()
        .flat_map(|&arch| cells.iter().map(move |&c| (arch, c)))
        .collect();
    let records: Vec<Result<ResultRecord>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(arch, c)| {
                let (smoothed, pretrained, learning_rate) = cell_settings(c);
                let config = ExperimentConfig {
                    architecture: arch,
                    smoothed,
                    pretrained,
                    learning_rate,
                    seed: cell_seed(master_seed, arch, c),
                    ..base.clone()
                };
                let (train, test) = if smoothed { &smooth } else { &plain };
                let (_, record) = train_on_inputs(&config, train, test, snapshots)?;
                log::info!(
                    "{} smoothed={smoothed} pretrained={pretrained} lr={learning_rate}: {:.4}",
                    record.model,
                    record.accuracy
                );
                Ok(record)
            })
            .collect()
    });
    records.into_iter().collect()
}

/// One line of the result table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub model: String,
    pub smoothed: bool,
    pub pretrained: bool,
    pub learning_rate: f64,
    pub accuracy: f64,
}

impl From<&ResultRecord> for TableRow {
    fn from(r: &ResultRecord) -> Self {
        TableRow {
            model: r.model.clone(),
            smoothed: r.smoothed,
            pretrained: r.pretrained,
            learning_rate: r.learning_rate,
            accuracy: r.accuracy,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(TableFormat::Csv),
            "md" | "markdown" => Ok(TableFormat::Markdown),
            _ => Err(Error::Config(format!("unknown table format `{s}`; expected csv or md"))),
        }
    }
}

pub const TABLE_COLUMNS: [&str; 5] = [
    "model",
    "use_smoothed_scan",
    "pre_trained",
    "learning_rate",
    "classification_accuracy",
];

fn bool_cell(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

fn cells(r: &TableRow) -> [String; 5] {
    [
        r.model.clone(),
        bool_cell(r.smoothed).to_string(),
        bool_cell(r.pretrained).to_string(),
        r.learning_rate.to_string(),
        format!("{:.4}", r.accuracy),
    ]
}

pub fn emit_table(rows: &[TableRow], format: TableFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("no records to tabulate".into()));
    }
    for (i, r) in rows.iter().enumerate() {
        if r.model.trim().is_empty() {
            return Err(Error::Config(format!("record {i} has an empty model name")));
        }
        if r.model.contains([',', '|', '\n']) {
            return Err(Error::Config(format!("record {i} model name `{}` contains a separator", r.model)));
        }
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(Error::Config(format!("record {i} accuracy {} is outside [0, 1]", r.accuracy)));
        }
    }
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            writeln!(out, "{}", TABLE_COLUMNS.join(",")).unwrap();
            for r in rows {
                writeln!(out, "{}", cells(r).join(",")).unwrap();
            }
        }
        TableFormat::Markdown => {
            writeln!(out, "| {} |", TABLE_COLUMNS.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(TABLE_COLUMNS.len())).unwrap();
            for r in rows {
                writeln!(out, "| {} |", cells(r).join(" | ")).unwrap();
            }
        }
    }
    Ok(out)
}

/// Reads a table written by [`emit_table`] in CSV form.
pub fn parse_csv_table(text: &str) -> Result<Vec<TableRow>> {
    let what = "result table";
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::parse(what, "empty input"))?;
    if header.trim() != TABLE_COLUMNS.join(",") {
        return Err(Error::parse(what, format!("unexpected header `{header}`")));
    }
    let parse_bool = |s: &str, n: usize| match s {
        "True" => Ok(true),
        "False" => Ok(false),
        _ => Err(Error::parse(what, format!("row {n}: `{s}` is not True or False"))),
    };
    lines
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.trim().split(',').collect();
            let [model, smoothed, pretrained, lr, acc] = f[..] else {
                return Err(Error::parse(what, format!("row {}: expected 5 fields", n + 1)));
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::parse(what, format!("row {}: `{s}` is not a number", n + 1)))
            };
            Ok(TableRow {
                model: model.to_string(),
                smoothed: parse_bool(smoothed, n + 1)?,
                pretrained: parse_bool(pretrained, n + 1)?,
                learning_rate: num(lr)?,
                accuracy: num(acc)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_follow_table_order() {
        let all: Vec<_> = (0..8).map(cell_settings).collect();
        assert_eq!(all[0], (false, false, 0.001));
        assert_eq!(all[1], (false, false, 0.0001));
        assert_eq!(all[2], (false, true, 0.001));
        assert_eq!(all[7], (true, true, 0.0001));
        for i in 0..8 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
    }

    #[test]
    fn rejects_empty_names() {
        let row = TableRow {
            model: " ".into(),
            smoothed: false,
            pretrained: false,
            learning_rate: 0.001,
            accuracy: 0.5,
        };
        assert!(emit_table(&[row], TableFormat::Csv).is_err());
        assert!(emit_table(&[], TableFormat::Csv).is_err());
    }
}

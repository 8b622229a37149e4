use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nve::data::{generate_classification_task, save_dataset, SyntheticTaskSpec};
use nve::ensemble::{ArchitecturePreset, SnapshotStore};
use nve::experiment::{
    emit_table, load_dataset, parse_csv_table, prepare_inputs, proxy_snapshots, run_grid, train, worker_pool,
    DataSource, ExperimentConfig, GridInputs, PretrainOptions, TableFormat, TableRow,
};
use nve::seed;
use nve::zoo::MicroKind;

#[derive(Parser)]
#[command(name = "nve", version, about = "Two-stream ensemble CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain backbones on the synthetic proxy task and save snapshots.
    Pretrain {
        /// Comma-separated model kinds.
        #[arg(long, default_value = "resnet,squeezenet,densenet,vgg,mobilenet,shufflenet")]
        kinds: String,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input channels (axial slices per volume).
        #[arg(long, default_value_t = 8)]
        slices: usize,
        /// Task file (`key = value`, same keys as the experiment config).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset directory with a manifest.
    GenData {
        /// Task file, or `standard` / `separable`.
        #[arg(long, default_value = "standard")]
        spec: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration and print its result row.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Also write the result table here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Save the trained weights here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run all eight cells for each architecture.
    Grid {
        #[arg(long, default_value = "1,2,3")]
        archs: String,
        #[arg(long, default_value_t = 0)]
        master_seed: u64,
        /// Runs per cell; accuracies are averaged.
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        /// Base configuration; cell settings override it.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Snapshot directory; pretrained on the fly when absent.
        #[arg(long)]
        snapshots: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a result CSV.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "md")]
        format: String,
    },
}

fn read_spec_file(path: &Path) -> Result<SyntheticTaskSpec> {
    let cfg = ExperimentConfig::load(path)?;
    match cfg.data {
        DataSource::Synthetic { spec, .. } => Ok(spec),
        DataSource::Manifest(_) => bail!("{} names a manifest, not a synthetic task", path.display()),
    }
}

fn parse_kinds(s: &str) -> Result<Vec<MicroKind>> {
    let mut kinds: Vec<MicroKind> = s.split(',').map(str::parse).collect::<nve::Result<_>>()?;
    kinds.sort();
    kinds.dedup();
    Ok(kinds)
}

fn parse_archs(s: &str) -> Result<Vec<ArchitecturePreset>> {
    let mut archs = s
        .split(',')
        .map(|a| {
            let id: u8 = a.trim().parse().with_context(|| format!("bad architecture id `{a}`"))?;
            Ok(ArchitecturePreset::from_id(id)?)
        })
        .collect::<Result<Vec<_>>>()?;
    archs.sort();
    archs.dedup();
    Ok(archs)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            kinds,
            epochs,
            seed,
            slices,
            spec,
            out,
        } => {
            let spec = match spec {
                Some(p) => read_spec_file(&p)?,
                None => SyntheticTaskSpec::standard(),
            };
            let options = PretrainOptions {
                epochs,
                ..PretrainOptions::default()
            };
            let store = proxy_snapshots(&parse_kinds(&kinds)?, &spec, slices, &options, seed)?;
            store.save_dir(&out)?;
            for kind in store.kinds() {
                println!("{}", out.join(format!("{kind}.nvw")).display());
            }
        }
        Command::GenData { spec, seed, out } => {
            let spec = match spec.as_str() {
                "standard" => SyntheticTaskSpec::standard(),
                "separable" => SyntheticTaskSpec::separable(),
                path => read_spec_file(Path::new(path))?,
            };
            let d = generate_classification_task(&spec, seed)?;
            let manifest = save_dataset(&d, &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, out, save } => {
            let cfg = ExperimentConfig::load(&config)?;
            let snapshots = match (&cfg.snapshots, cfg.pretrained) {
                (Some(dir), _) => SnapshotStore::load_dir(dir)?,
                (None, false) => SnapshotStore::new(),
                (None, true) => bail!("pretrained = true needs `snapshots = <dir>` in the config"),
            };
            let dataset = load_dataset(&cfg.data)?;
            let (core, record) = train(&cfg, &dataset, &snapshots)?;
            if let Some(p) = save {
                core.save(&p)?;
            }
            let table = emit_table(&[TableRow::from(&record)], TableFormat::Csv)?;
            write_or_print(out.as_deref(), &table)?;
        }
        Command::Grid {
            archs,
            master_seed,
            repeats,
            config,
            snapshots,
            out,
        } => {
            let archs = parse_archs(&archs)?;
            let mut base = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            // synthetic grid data is a function of the master seed
            if let DataSource::Synthetic { seed, .. } = &mut base.data {
                *seed = seed::derive(master_seed, &[seed::label("data")]);
            }
            let spec = match &base.data {
                DataSource::Synthetic { spec, .. } => spec.clone(),
                DataSource::Manifest(_) => SyntheticTaskSpec::standard(),
            };
            let snapshots = match snapshots.or(base.snapshots.clone()) {
                Some(dir) => SnapshotStore::load_dir(&dir)?,
                None => {
                    let mut kinds: Vec<MicroKind> = archs.iter().flat_map(|a| a.kinds().iter().copied()).collect();
                    kinds.sort();
                    kinds.dedup();
                    let seed = seed::derive(master_seed, &[seed::label("pretrain")]);
                    proxy_snapshots(&kinds, &spec, base.slice_k, &PretrainOptions::default(), seed)?
                }
            };
            let dataset = load_dataset(&base.data)?;
            let inputs = GridInputs {
                plain: prepare_inputs(&dataset, false, base.fwhm_mm, base.slice_k)?,
                smoothed: prepare_inputs(&dataset, true, base.fwhm_mm, base.slice_k)?,
            };
            let pool = worker_pool()?;
            let records = run_grid(&archs, &inputs, &base, master_seed, repeats, &snapshots, &pool)?;
            let rows: Vec<TableRow> = records.iter().map(TableRow::from).collect();
            write_or_print(out.as_deref(), &emit_table(&rows, TableFormat::Csv)?)?;
        }
        Command::Report { input, format } => {
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let rows = parse_csv_table(&text)?;
            print!("{}", emit_table(&rows, format.parse()?)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

//! Command-line front end. Exit codes: 0 success, 2 configuration or
//! usage error, 3 invalid data, 4 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::datastore::container::{encode_params, encode_shapes};
use crate::datastore::{load_dataset, read_json, save_dataset, write_file, write_json, SyntheticSpec};
use crate::federation::{per_domain_shapes, run_federation_with_workers, ExperimentConfig};
use crate::geometry::{cross_domain_similarity_matrix, DEFAULT_SIMILARITY_TOP};
use crate::partition::{build_partition, check_disjoint, class_counts, PartitionFile, PartitionSpec};
use crate::report::{emit_reports, heatmap_csv, write_similarity};
use crate::{Error, Result};

pub const PARTITION_FILE: &str = "partition.json";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const MODEL_FILE: &str = "model.mlp1";
pub const SHAPES_FILE: &str = "shapes.geo";

#[derive(Debug, Parser)]
#[command(name = "ggeur", version, about = "Federated learning with geometry-guided embedding augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic embedding dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Partition a dataset over clients; writes the partition JSON and a
    /// class-count heatmap CSV beside it.
    Partition {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-domain shape similarity matrices.
    Similarity {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SIMILARITY_TOP)]
        top: usize,
    },
    /// Run a federated experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the dataset in the config.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

fn heatmap_path(partition_out: &Path) -> PathBuf {
    let stem = partition_out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "partition".into());
    partition_out.with_file_name(format!("{stem}.{HEATMAP_FILE}"))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn cmd_synth(spec: &Path, out: &Path) -> Result<String> {
    let spec: SyntheticSpec = read_json(spec)?;
    spec.validate()?;
    let ds = crate::datastore::synth_generate(&spec)?;
    let manifest = save_dataset(&ds, out)?;
    Ok(format!(
        "synth: {} domains × {} classes, p={} → {}",
        ds.domains.len(),
        ds.classes,
        ds.dim,
        manifest.display()
    ))
}

fn cmd_partition(dataset: &Path, spec: &Path, out: &Path) -> Result<String> {
    let spec: PartitionSpec = read_json(spec)?;
    spec.validate()?;
    let ds = load_dataset(dataset)?;
    let shards = build_partition(&ds, &spec)?;
    check_disjoint(&ds, &shards)?;
    let counts = class_counts(&ds, &shards)?;
    create_parent(out)?;
    write_file(&heatmap_path(out), heatmap_csv(&shards, &counts).as_bytes())?;
    let clients = shards.len();
    let assigned: usize = shards.iter().map(|s| s.indices.len()).sum();
    write_json(out, &PartitionFile::new(&spec, shards))?;
    Ok(format!("partition: {clients} clients, {assigned} samples → {}", out.display()))
}

fn cmd_similarity(dataset: &Path, out: &Path, top: usize) -> Result<String> {
    let ds = load_dataset(dataset)?;
    if top == 0 || top > ds.dim {
        return Err(Error::Config(format!("top must be in [1, {}]", ds.dim)));
    }
    let matrices = cross_domain_similarity_matrix(&per_domain_shapes(&ds)?, top)?;
    let paths = write_similarity(&matrices, out)?;
    let (diag, off) = matrices
        .iter()
        .map(|m| m.diagonal_means())
        .fold((0.0, 0.0), |acc, (d, o)| (acc.0 + d, acc.1 + o));
    let n = matrices.len().max(1) as f64;
    Ok(format!(
        "similarity: {} matrices, mean diagonal {:.4}, mean off-diagonal {:.4} → {}",
        paths.len(),
        diag / n,
        off / n,
        out.display()
    ))
}

fn cmd_run(
    config_path: &Path,
    out: &Path,
    workers: usize,
    seed: Option<u64>,
    dataset: Option<&Path>,
) -> Result<String> {
    let mut config: ExperimentConfig = read_json(config_path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if workers == 0 {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    config.validate()?;
    let dataset_path = match dataset {
        Some(p) => p.to_path_buf(),
        None => {
            let rel = config
                .dataset
                .clone()
                .ok_or_else(|| Error::Config("no dataset in config and no --dataset given".into()))?;
            config_path.parent().unwrap_or(Path::new(".")).join(rel)
        }
    };
    let ds = load_dataset(&dataset_path)?;
    let output = run_federation_with_workers(&config, &ds, workers)?;

    let summary = emit_reports(&output, &config, out)?;
    let counts = class_counts(&ds, &output.shards)?;
    write_file(&out.join(HEATMAP_FILE), heatmap_csv(&output.shards, &counts).as_bytes())?;
    write_json(
        &out.join(PARTITION_FILE),
        &PartitionFile::new(&config.effective_partition(), output.shards.clone()),
    )?;
    let container = |path: PathBuf| move |source| Error::Container { path, source };
    let model_path = out.join(MODEL_FILE);
    write_file(
        &model_path,
        &encode_params(output.final_params()).map_err(container(model_path.clone()))?,
    )?;
    if let Some(geometry) = &output.geometry {
        let shapes: Vec<_> = geometry.shapes.values().cloned().collect();
        let path = out.join(SHAPES_FILE);
        write_file(&path, &encode_shapes(&shapes).map_err(container(path.clone()))?)?;
    }
    if config.similarity_report {
        let matrices = cross_domain_similarity_matrix(&per_domain_shapes(&ds)?, DEFAULT_SIMILARITY_TOP.min(ds.dim))?;
        write_similarity(&matrices, out)?;
    }
    Ok(format!(
        "run: {} rounds, seed {}, AVG {:.4}, STD {:.4}{} → {}",
        summary.rounds,
        summary.seed,
        summary.avg,
        summary.std,
        if summary.last5_flagged { " (fewer than 5 rounds)" } else { "" },
        out.display()
    ))
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth { spec, out } => cmd_synth(spec, out),
        Command::Partition { dataset, spec, out } => cmd_partition(dataset, spec, out),
        Command::Similarity { dataset, out, top } => cmd_similarity(dataset, out, *top),
        Command::Run {
            config,
            out,
            workers,
            seed,
            dataset,
        } => cmd_run(config, out, *workers, *seed, dataset.as_deref()),
    }
}

/// Parse `args`, run, print the one-line summary or the error, and return
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(line) => {
            println!("{line}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heatmap_sits_beside_partition() {
        assert_eq!(heatmap_path(Path::new("a/b/part.json")), Path::new("a/b/part.heatmap.csv"));
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(main_with_args(["ggeur", "bogus"]), 2);
        assert_eq!(main_with_args(["ggeur", "run", "--out", "x"]), 2);
    }
}

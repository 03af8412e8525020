//! Subcommand implementations. Each writes its outputs under `--out-dir`.

pub mod bench;
pub mod dist;
pub mod infer;
pub mod prune;
pub mod train;

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bnn_core::io::{load_mnist_dir, Dataset, MnistSplits};
use bnn_core::train::init_rng;
use bnn_core::{BnnError, ModelGraph, Scalar};

use crate::config::RunConfig;
use crate::error::{usage, CliResult};

/// Runs `$f::<f64>` under `--f64`, `$f::<f32>` otherwise.
macro_rules! dispatch {
    ($f:ident, $cfg:expr) => {
        if $cfg.f64 {
            $f::<f64>($cfg)
        } else {
            $f::<f32>($cfg)
        }
    };
}
pub(crate) use dispatch;

pub fn load_splits<T: Scalar>(cfg: &RunConfig) -> CliResult<MnistSplits<T>> {
    let dir = cfg.data_dir()?;
    match load_mnist_dir::<T>(dir, cfg.n_train) {
        Err(BnnError::NotFound(p)) => usage(format!("--data-dir {}: missing {}", dir.display(), p.display())),
        other => Ok(other?),
    }
}

/// The test split, truncated by `--limit`.
pub fn test_set<T: Scalar>(cfg: &RunConfig) -> CliResult<Dataset<T>> {
    let test = load_splits::<T>(cfg)?.test;
    Ok(match cfg.limit {
        Some(n) if n < test.len() => test.subset(&(0..n).collect::<Vec<_>>(), "test")?,
        _ => test,
    })
}

/// The configured model with parameters drawn from the run seed.
pub fn initial_graph<T: Scalar>(cfg: &RunConfig) -> CliResult<ModelGraph<T>> {
    let mut g = cfg.model.build::<T>()?;
    g.init_params(&mut init_rng(cfg.train.seed), &cfg.init)?;
    Ok(g)
}

/// `--checkpoint`, else the `model-<n>.ckpt` with the largest `n` in the output directory.
pub fn find_checkpoint(cfg: &RunConfig) -> CliResult<PathBuf> {
    if let Some(p) = &cfg.checkpoint {
        return Ok(p.clone());
    }
    let newest = std::fs::read_dir(&cfg.out_dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: u64 = name.strip_prefix("model-")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n);
    match newest {
        Some((_, p)) => Ok(p),
        None => usage(format!(
            "no model-<n>.ckpt in {}; pass --checkpoint or the --out-dir of a training run",
            cfg.out_dir.display()
        )),
    }
}

pub fn checkpoint_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

pub fn out_dir(cfg: &RunConfig) -> CliResult<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

pub fn csv_writer(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

pub fn write_run_record(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    std::fs::write(dir.join("run.toml"), cfg.record())?;
    Ok(())
}

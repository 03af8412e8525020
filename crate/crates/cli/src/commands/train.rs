//! `train`: one worker through the resumable trainer, several through the
//! data-parallel path.

use std::io::Write;

use bnn_core::io::{save_checkpoint, write_manifest};
use bnn_core::train::{EpochMetrics, Trainer};
use bnn_core::Scalar;
use bnn_collective::Element;

use super::{csv_writer, dispatch, initial_graph, load_splits, out_dir, write_run_record};
use crate::config::RunConfig;
use crate::error::CliResult;

pub const METRICS_FILE: &str = "metrics.csv";

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    if cfg.workers > 1 || cfg.max_steps.is_some() {
        return super::dist::run(cfg);
    }
    dispatch!(train, cfg)
}

fn train<T: Scalar + Element>(cfg: &RunConfig) -> CliResult<()> {
    let splits = load_splits::<T>(cfg)?;
    let dir = out_dir(cfg)?;
    write_run_record(cfg, dir)?;
    let mut trainer = Trainer::new(initial_graph::<T>(cfg)?, cfg.train)?;
    println!(
        "model {} ({} parameters), {} training examples, {} epochs",
        cfg.model.name(),
        trainer.graph.param_count(),
        splits.train.len(),
        cfg.train.epochs
    );
    let mut metrics = csv_writer(&dir.join(METRICS_FILE))?;
    metrics.write_record(EpochMetrics::CSV_HEADER)?;
    metrics.flush()?;
    while trainer.epoch < cfg.train.epochs {
        let m = trainer.run_epoch(&splits.train)?;
        metrics.write_record(m.csv_record())?;
        metrics.flush()?;
        println!(
            "epoch {:>3}  nll {:.4}  kl {:.1}  total {:.4}  train_accuracy {:.4}  {:.1}s",
            m.epoch, m.nll, m.kl, m.total, m.train_accuracy, m.wall_seconds
        );
        std::io::stdout().flush()?;
    }
    let path = save_checkpoint(&trainer.checkpoint(), dir, trainer.step)?;
    write_manifest(&trainer.graph, dir)?;
    println!("checkpoint {}", path.display());
    Ok(())
}

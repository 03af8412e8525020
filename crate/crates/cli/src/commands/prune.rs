//! `prune` at an SNR threshold and `sweep` over pruning percentages.

use bnn_core::io::{save_checkpoint, write_manifest, Checkpoint};
use bnn_core::prune::{prune_by_threshold, prune_report, prune_sweep, SweepRow};
use bnn_core::Scalar;

use super::{csv_writer, dispatch, out_dir, test_set};
use crate::commands::infer::load_model;
use crate::config::RunConfig;
use crate::error::CliResult;

pub const REPORT_FILE: &str = "prune_report.bprn";
pub const PRUNE_FILE: &str = "prune.csv";
pub const PRUNED_DIR: &str = "pruned";
pub const SWEEP_FILE: &str = "sweep.csv";

pub fn run_prune(cfg: &RunConfig) -> CliResult<()> {
    dispatch!(prune, cfg)
}

pub fn run_sweep(cfg: &RunConfig) -> CliResult<()> {
    dispatch!(sweep, cfg)
}

fn prune<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let ck = load_model::<T>(cfg)?;
    let test = test_set::<T>(cfg)?;
    let (pruned, mask) = prune_by_threshold(&ck.graph, cfg.threshold)?;
    let report = prune_report(&pruned, &mask, &test, cfg.samples, cfg.train.seed)?;
    let dir = out_dir(cfg)?;
    report.write(&dir.join(REPORT_FILE))?;
    let acc = bnn_core::infer::accuracy(&report.predictive)?;
    let mut w = csv_writer(&dir.join(PRUNE_FILE))?;
    w.write_record(["layer", "nnz", "weights", "kept_fraction"])?;
    for l in &mask.layers {
        w.write_record([l.name.clone(), l.nnz.to_string(), l.kept.len().to_string(), format!("{:.6}", l.nnz as f64 / l.kept.len() as f64)])?;
    }
    w.write_record([
        "total".into(),
        mask.total_nnz().to_string(),
        mask.total_len().to_string(),
        format!("{:.6}", 1.0 - mask.sparsity()),
    ])?;
    w.flush()?;
    let pruned_dir = dir.join(PRUNED_DIR);
    let out = Checkpoint {
        graph: pruned,
        optimizer: None,
        ..ck
    };
    save_checkpoint(&out, &pruned_dir, out.step)?;
    write_manifest(&out.graph, &pruned_dir)?;
    println!(
        "threshold {}  kept {}/{} weights  accuracy {acc:.4}  samples {}  {:.2}s",
        report.threshold,
        report.total_nnz,
        mask.total_len(),
        cfg.samples,
        report.runtime_seconds
    );
    Ok(())
}

fn sweep<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let graph = load_model::<T>(cfg)?.graph;
    let test = test_set::<T>(cfg)?;
    let rows = prune_sweep(&graph, &test, &cfg.percents, cfg.samples, cfg.train.seed)?;
    let mut w = csv_writer(&out_dir(cfg)?.join(SWEEP_FILE))?;
    w.write_record(SweepRow::CSV_HEADER)?;
    for r in &rows {
        w.write_record(r.csv_record())?;
        println!(
            "pruned {:>5.1}%  threshold {:.4}  accuracy {:.4}  nnz {}  {:.2}s",
            r.pct, r.threshold, r.accuracy, r.nnz_total, r.runtime_s
        );
    }
    w.flush()?;
    Ok(())
}

//! The `bnn` command line: training, Monte-Carlo inference, pruning and
//! collective benchmarks over MNIST.

pub mod commands;
pub mod config;
pub mod error;
pub mod model;

use clap::{Parser, Subcommand};

use crate::commands::dist::WorkerArgs;
use crate::config::{Overrides, RunConfig};
use crate::error::CliResult;

#[derive(Parser, Debug)]
#[command(name = "bnn", version, about = "Variational neural networks with flipout on MNIST")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Train a model; writes model-<step>.ckpt, LayerNames.txt, OpsNames.txt, metrics.csv and run.toml.
    Train(Overrides),
    /// Monte-Carlo prediction on the test set; writes predictive.csv, histograms.csv and infer_summary.csv.
    Infer(Overrides),
    /// Prune at an SNR threshold; writes prune_report.bprn, prune.csv and pruned/.
    Prune(Overrides),
    /// Accuracy after pruning each of --percents; writes sweep.csv.
    Sweep(Overrides),
    /// Data-parallel training over --workers ranks, or the scaling harness with --scaling.
    DistTrain(Overrides),
    /// Time all-reduce across tensor sizes; writes bench_allreduce.csv and comm_stats_<transport>.csv.
    BenchAllreduce(Overrides),
    /// One rank of a tcp run, launched by dist-train.
    #[command(hide = true)]
    Worker(WorkerArgs),
}

pub fn run(cli: Cli) -> CliResult<()> {
    use commands::*;
    match cli.command {
        Cmd::Worker(a) => dist::worker(&a),
        Cmd::Train(o) => train::run(&RunConfig::from_overrides(&o)?),
        Cmd::Infer(o) => infer::run(&RunConfig::from_overrides(&o)?),
        Cmd::Prune(o) => prune::run_prune(&RunConfig::from_overrides(&o)?),
        Cmd::Sweep(o) => prune::run_sweep(&RunConfig::from_overrides(&o)?),
        Cmd::DistTrain(o) => dist::run(&RunConfig::from_overrides(&o)?),
        Cmd::BenchAllreduce(o) => bench::run(&RunConfig::from_overrides(&o)?),
    }
}

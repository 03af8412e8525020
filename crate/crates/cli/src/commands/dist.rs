//! `dist-train`: data-parallel training over `--workers` ranks, or the
//! weak-scaling harness under `--scaling`.
//!
//! With the channel transport all ranks are threads of this process. With
//! tcp this process is rank 0 and every other rank is a `bnn worker`
//! subprocess that reads the same `run.toml`, trains its replica and leaves
//! its final parameters in `rank-<r>.ckpt` for the replica check.

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use bnn_collective::{CommStats, Communicator, Element, TcpTransport, TransportKind};
use bnn_core::io::{read_checkpoint, save_checkpoint, write_checkpoint, write_manifest, Checkpoint, Dataset};
use bnn_core::train::shuffle_rng;
use bnn_core::{ModelGraph, Scalar};
use bnn_dist::{check_replicas, dist_train, scaling_harness, train_rank, write_scaling_csv, DistConfig, RankOutcome};
use clap::Args;

use super::{csv_writer, dispatch, initial_graph, load_splits, out_dir, write_run_record};
use crate::config::{Overrides, RunConfig};
use crate::error::{usage, CliResult};

pub const STEPS_FILE: &str = "steps.csv";
pub const DIST_METRICS_FILE: &str = "metrics.csv";
pub const COMM_STATS_FILE: &str = "comm_stats.csv";
pub const REDUCTIONS_FILE: &str = "reductions.csv";
pub const SCALING_FILE: &str = "scaling.csv";
pub const SCALING_SUMMARY_FILE: &str = "scaling_summary.csv";

/// Arguments of a tcp rank launched by `dist-train`.
#[derive(Args, Clone, Debug)]
pub struct WorkerArgs {
    #[arg(long)]
    pub rank: usize,
    #[arg(long)]
    pub world: usize,
    #[arg(long)]
    pub coordinator: SocketAddr,
    /// The run record written by rank 0.
    #[arg(long)]
    pub run: PathBuf,
}

fn dist_config(cfg: &RunConfig) -> DistConfig {
    DistConfig {
        shared_noise: cfg.shared_noise,
        max_steps: cfg.max_steps,
        ..DistConfig::new(cfg.workers, cfg.train)
    }
}

fn replica_path(dir: &Path, rank: usize) -> PathBuf {
    dir.join(format!("rank-{rank}.ckpt"))
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    dispatch!(dist, cfg)
}

fn dist<T: Scalar + Element>(cfg: &RunConfig) -> CliResult<()> {
    let train = load_splits::<T>(cfg)?.train;
    let graph = initial_graph::<T>(cfg)?;
    let dir = out_dir(cfg)?;
    write_run_record(cfg, dir)?;
    if let Some(worlds) = &cfg.scaling {
        return scaling(cfg, &graph, &train, worlds, dir);
    }
    let dcfg = dist_config(cfg);
    println!(
        "model {}  workers {}  transport {}  global batch {}",
        cfg.model.name(),
        cfg.workers,
        cfg.transport.name(),
        dcfg.global_batch()
    );
    let (rank0, stats) = match cfg.transport {
        TransportKind::Channel => {
            let run = dist_train(&graph, &train, &dcfg, TransportKind::Channel, cfg.comm)?;
            let stats = run.stats[0].clone();
            (run.ranks.into_iter().next().expect("rank 0"), stats)
        }
        TransportKind::Tcp => tcp_rank0(cfg, graph, &train, &dcfg, dir)?,
    };
    write_outputs(cfg, dir, &rank0, &stats)
}

fn write_outputs<T: Scalar>(cfg: &RunConfig, dir: &Path, r: &RankOutcome<T>, stats: &CommStats) -> CliResult<()> {
    let mut w = csv_writer(&dir.join(STEPS_FILE))?;
    w.write_record(["step", "nll", "kl", "total", "samples", "seconds", "comm_seconds", "reductions"])?;
    for s in &r.steps {
        w.write_record([
            s.step.to_string(),
            s.nll.to_string(),
            s.kl.to_string(),
            s.total.to_string(),
            s.samples.to_string(),
            format!("{:.6}", s.seconds),
            format!("{:.6}", s.comm_seconds),
            s.reductions.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv_writer(&dir.join(DIST_METRICS_FILE))?;
    w.write_record([
        "epoch",
        "nll",
        "kl",
        "total",
        "train_accuracy",
        "samples_per_sec_mean",
        "samples_per_sec_std",
        "wall_s",
        "comm_s",
    ])?;
    for e in &r.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.nll.to_string(),
            e.kl.to_string(),
            e.total.to_string(),
            e.train_accuracy.map(|a| a.to_string()).unwrap_or_default(),
            format!("{:.3}", e.samples_per_sec_mean),
            format!("{:.3}", e.samples_per_sec_std),
            format!("{:.6}", e.wall_s),
            format!("{:.6}", e.comm_s),
        ])?;
        println!(
            "epoch {:>3}  nll {:.4}  kl {:.1}  total {:.4}  {:.1} samples/s  comm {:.2}s",
            e.epoch, e.nll, e.kl, e.total, e.samples_per_sec_mean, e.comm_s
        );
    }
    w.flush()?;
    stats.write_csv(std::fs::File::create(dir.join(COMM_STATS_FILE))?)?;
    let c = r.reductions;
    let mut w = csv_writer(&dir.join(REDUCTIONS_FILE))?;
    w.write_record(["kernel", "scale", "bias", "variational", "total"])?;
    w.write_record([c.kernel, c.scale, c.bias, c.variational(), c.total()].map(|v| v.to_string()))?;
    w.flush()?;
    println!(
        "gradient reductions per step: {} ({} kernel, {} scale, {} bias)",
        c.total(),
        c.kernel,
        c.scale,
        c.bias
    );
    let step = r.steps.last().map_or(0, |s| s.step + 1);
    let ck = Checkpoint {
        graph: r.graph.clone(),
        optimizer: None,
        rng: shuffle_rng(cfg.train.seed).state(),
        step,
        epoch: r.epochs.len() as u64,
    };
    let path = save_checkpoint(&ck, dir, step)?;
    write_manifest(&r.graph, dir)?;
    println!("checkpoint {}", path.display());
    Ok(())
}

fn scaling<T: Scalar + Element>(
    cfg: &RunConfig,
    graph: &ModelGraph<T>,
    train: &Dataset<T>,
    worlds: &[usize],
    dir: &Path,
) -> CliResult<()> {
    let dcfg = dist_config(cfg);
    let (rows, summary) = scaling_harness(graph, train, &dcfg, worlds, cfg.transport, cfg.comm)?;
    write_scaling_csv(&rows, std::fs::File::create(dir.join(SCALING_FILE))?)?;
    let mut w = csv_writer(&dir.join(SCALING_SUMMARY_FILE))?;
    w.write_record([
        "world",
        "samples_per_sec_mean",
        "samples_per_sec_std",
        "t1_s",
        "tn_s",
        "efficiency",
        "comm_fraction",
    ])?;
    for m in &summary {
        w.write_record([
            m.world.to_string(),
            format!("{:.3}", m.samples_per_second_mean),
            format!("{:.3}", m.samples_per_second_std),
            format!("{:.6}", m.t1),
            format!("{:.6}", m.tn),
            format!("{:.4}", m.efficiency),
            format!("{:.4}", m.comm_fraction),
        ])?;
        println!(
            "world {:>3}  {:>9.1} samples/s  efficiency {:.3}  comm {:.1}%",
            m.world,
            m.samples_per_second_mean,
            m.efficiency,
            100.0 * m.comm_fraction
        );
    }
    w.flush()?;
    Ok(())
}

/// Kills worker processes that are still running when rank 0 gives up.
struct Workers(Vec<(usize, Child)>);

impl Drop for Workers {
    fn drop(&mut self) {
        for (_, c) in &mut self.0 {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn tcp_rank0<T: Scalar + Element>(
    cfg: &RunConfig,
    graph: ModelGraph<T>,
    train: &Dataset<T>,
    dcfg: &DistConfig,
    dir: &Path,
) -> CliResult<(RankOutcome<T>, CommStats)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let exe = std::env::current_exe()?;
    let run_file = dir.join("run.toml");
    let mut workers = Workers(Vec::new());
    for rank in 1..cfg.workers {
        let _ = std::fs::remove_file(replica_path(dir, rank));
        let child = Command::new(&exe)
            .arg("worker")
            .args(["--rank", &rank.to_string(), "--world", &cfg.workers.to_string()])
            .args(["--coordinator", &addr.to_string()])
            .arg("--run")
            .arg(&run_file)
            .stdout(Stdio::null())
            .spawn()?;
        workers.0.push((rank, child));
    }
    let transport = TcpTransport::connect(0, cfg.workers, addr, Some(listener), cfg.comm.recv_timeout)?;
    let mut comm = Communicator::new(Box::new(transport), cfg.comm)?;
    let outcome = train_rank(&mut comm, graph, train, dcfg)?;
    for (rank, child) in std::mem::take(&mut workers.0) {
        let status = child.wait_with_output()?.status;
        if !status.success() {
            return Err(anyhow::anyhow!("worker rank {rank} exited with {status}").into());
        }
    }
    let replicas = (1..cfg.workers)
        .map(|r| {
            let p = replica_path(dir, r);
            let g = read_checkpoint::<T>(&p).map(|c| c.graph);
            let _ = std::fs::remove_file(&p);
            g
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut all = vec![&outcome.graph];
    all.extend(replicas.iter());
    check_replicas(&all)?;
    Ok((outcome, comm.stats().clone()))
}

/// A non-zero rank of a tcp run.
pub fn worker(args: &WorkerArgs) -> CliResult<()> {
    if args.rank == 0 || args.rank >= args.world {
        return usage(format!("--rank {} must lie in 1..{}", args.rank, args.world));
    }
    let text = std::fs::read_to_string(&args.run)?;
    let o: Overrides = match toml::from_str(&text) {
        Ok(o) => o,
        Err(e) => return usage(format!("--run {}: {e}", args.run.display())),
    };
    let cfg = RunConfig::from_overrides(&o)?;
    if cfg.workers != args.world {
        return usage(format!("--world {} differs from the run's {} workers", args.world, cfg.workers));
    }
    if cfg.f64 {
        worker_rank::<f64>(&cfg, args)
    } else {
        worker_rank::<f32>(&cfg, args)
    }
}

fn worker_rank<T: Scalar + Element>(cfg: &RunConfig, args: &WorkerArgs) -> CliResult<()> {
    let train = load_splits::<T>(cfg)?.train;
    let graph = initial_graph::<T>(cfg)?;
    let transport = TcpTransport::connect(args.rank, args.world, args.coordinator, None, cfg.comm.recv_timeout)?;
    let mut comm = Communicator::new(Box::new(transport), cfg.comm)?;
    let outcome = train_rank(&mut comm, graph, &train, &dist_config(cfg))?;
    let ck = Checkpoint {
        graph: outcome.graph,
        optimizer: None,
        rng: shuffle_rng(cfg.train.seed).state(),
        step: 0,
        epoch: 0,
    };
    write_checkpoint(&ck, &replica_path(&cfg.out_dir, args.rank))?;
    Ok(())
}

//! `bench-allreduce`: timed all-reduce of one tensor per size, repeated
//! `--reps` times over each transport.
//!
//! Inputs are small integers, so sums are exact in either precision and the
//! checksum column must not depend on transport or fusion capacity.

use std::time::Instant;

use bnn_collective::{run_group, CommStats, Element, ReduceOp, TransportKind};
use bnn_core::Scalar;
use bnn_dist::communicators;

use super::{csv_writer, out_dir};
use crate::config::RunConfig;
use crate::error::{usage, CliResult};

pub const BENCH_FILE: &str = "bench_allreduce.csv";

pub fn comm_stats_file(t: TransportKind) -> String {
    format!("comm_stats_{}.csv", t.name())
}

/// Timing of one size on rank 0.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub bytes: usize,
    pub elements: usize,
    pub seconds: Vec<f64>,
    pub checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn input<T: Scalar>(rank: usize, n: usize) -> Vec<T> {
    (0..n).map(|i| T::of(((i * 31 + rank * 7) % 13) as f64 - 6.0)).collect()
}

/// Runs every size over `transport`; returns rank 0's rows and counters.
pub fn bench<T: Scalar + Element>(cfg: &RunConfig, transport: TransportKind) -> CliResult<(Vec<BenchRow>, CommStats)> {
    let width = std::mem::size_of::<T>();
    let group = communicators(cfg.workers, transport, cfg.comm)?;
    let results = run_group(group, |c| -> CliResult<_> {
        let mut rows = Vec::with_capacity(cfg.sizes.len());
        for &bytes in &cfg.sizes {
            let n = (bytes / width).max(1);
            let name = format!("bench/{bytes}");
            let mut seconds = Vec::with_capacity(cfg.reps);
            let mut checksum = 0;
            for _ in 0..cfg.reps {
                let data = input::<T>(c.rank(), n);
                let started = Instant::now();
                let out = c.allreduce(vec![(name.clone(), data)], ReduceOp::Sum)?;
                seconds.push(started.elapsed().as_secs_f64());
                let mut raw = Vec::with_capacity(n * width);
                for &v in &out[0].1 {
                    v.write_le(&mut raw);
                }
                checksum = fnv1a(&raw);
            }
            rows.push(BenchRow {
                bytes: n * width,
                elements: n,
                seconds,
                checksum,
            });
        }
        Ok((rows, c.stats().clone()))
    });
    let mut results = results.into_iter().collect::<CliResult<Vec<_>>>()?;
    if results.iter().any(|(r, _)| r.iter().map(|x| x.checksum).ne(results[0].0.iter().map(|x| x.checksum))) {
        return Err(anyhow::anyhow!("ranks disagree on the reduced values").into());
    }
    Ok(results.swap_remove(0))
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    let width = if cfg.f64 { 8 } else { 4 };
    if let Some(&big) = cfg.sizes.iter().find(|&&s| s.max(width) > cfg.comm.fusion_bytes) {
        return usage(format!(
            "--sizes entry {big} exceeds the fusion buffer of {} bytes; raise --fusion-mb",
            cfg.comm.fusion_bytes
        ));
    }
    let transports = match cfg.source.transport {
        Some(_) => vec![cfg.transport],
        None => vec![TransportKind::Channel, TransportKind::Tcp],
    };
    let dir = out_dir(cfg)?;
    let mut w = csv_writer(&dir.join(BENCH_FILE))?;
    w.write_record([
        "transport", "world", "bytes", "elements", "reps", "mean_s", "min_s", "max_s", "algbw_mb_s", "checksum",
    ])?;
    for t in transports {
        let (rows, stats) = if cfg.f64 { bench::<f64>(cfg, t)? } else { bench::<f32>(cfg, t)? };
        for r in &rows {
            let mean = r.seconds.iter().sum::<f64>() / r.seconds.len() as f64;
            let min = r.seconds.iter().copied().fold(f64::INFINITY, f64::min);
            let max = r.seconds.iter().copied().fold(0.0, f64::max);
            w.write_record([
                t.name().to_string(),
                cfg.workers.to_string(),
                r.bytes.to_string(),
                r.elements.to_string(),
                r.seconds.len().to_string(),
                format!("{mean:.6}"),
                format!("{min:.6}"),
                format!("{max:.6}"),
                format!("{:.3}", r.bytes as f64 / mean.max(1e-12) / 1e6),
                format!("{:016x}", r.checksum),
            ])?;
            println!(
                "{:<7} W={} {:>10} bytes  mean {:.6}s  min {:.6}s  {:>10.1} MB/s",
                t.name(),
                cfg.workers,
                r.bytes,
                mean,
                min,
                r.bytes as f64 / mean.max(1e-12) / 1e6
            );
        }
        stats.write_csv(std::fs::File::create(dir.join(comm_stats_file(t)))?)?;
    }
    w.flush()?;
    Ok(())
}

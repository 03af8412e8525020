//! `infer`: Monte-Carlo predictive distribution of the test set.

use std::time::Instant;

use bnn_core::infer::{accuracy, class_pdf_histogram, predict_mc, predictive_mean, predictive_std, PredictiveSamples};
use bnn_core::io::{parse_manifest, read_checkpoint, Checkpoint};
use bnn_core::Scalar;

use super::{checkpoint_dir, csv_writer, dispatch, find_checkpoint, out_dir, test_set};
use crate::config::RunConfig;
use crate::error::CliResult;

pub const PREDICTIVE_FILE: &str = "predictive.csv";
pub const HISTOGRAM_FILE: &str = "histograms.csv";
pub const SUMMARY_FILE: &str = "infer_summary.csv";

/// The checkpoint named by the configuration, checked against its manifest.
pub fn load_model<T: Scalar>(cfg: &RunConfig) -> CliResult<Checkpoint<T>> {
    let path = find_checkpoint(cfg)?;
    let ck = read_checkpoint::<T>(&path)?;
    parse_manifest(checkpoint_dir(&path))?.check_against(&ck.graph)?;
    Ok(ck)
}

pub fn run(cfg: &RunConfig) -> CliResult<()> {
    dispatch!(infer, cfg)
}

fn infer<T: Scalar>(cfg: &RunConfig) -> CliResult<()> {
    let graph = load_model::<T>(cfg)?.graph;
    let test = test_set::<T>(cfg)?;
    let started = Instant::now();
    let ps = predict_mc(&graph, &test.images, cfg.samples, cfg.train.seed, Some(test.labels.clone()))?;
    let seconds = started.elapsed().as_secs_f64();
    let dir = out_dir(cfg)?;
    write_predictive(&ps, &dir.join(PREDICTIVE_FILE))?;
    write_histograms(&ps, cfg.bins, &dir.join(HISTOGRAM_FILE))?;
    let acc = accuracy(&ps)?;
    let mut s = csv_writer(&dir.join(SUMMARY_FILE))?;
    s.write_record(["samples", "examples", "accuracy", "seconds"])?;
    s.write_record([ps.n_samples.to_string(), ps.batch.to_string(), acc.to_string(), format!("{seconds:.6}")])?;
    s.flush()?;
    println!("samples {}  examples {}  accuracy {acc:.4}  {seconds:.2}s", ps.n_samples, ps.batch);
    Ok(())
}

/// One row per (example, class): label, predictive mean and standard deviation.
fn write_predictive(ps: &PredictiveSamples, path: &std::path::Path) -> CliResult<()> {
    let (mean, std) = (predictive_mean(ps), predictive_std(ps));
    let labels = ps.labels.as_deref().unwrap_or_default();
    let mut w = csv_writer(path)?;
    w.write_record(["example_id", "label", "class", "mean", "std", "argmax"])?;
    for b in 0..ps.batch {
        let row = &mean.data()[b * ps.classes..(b + 1) * ps.classes];
        let argmax = (0..ps.classes).fold(0, |best, c| if row[c] > row[best] { c } else { best });
        for (c, m) in row.iter().enumerate() {
            w.write_record([
                b.to_string(),
                labels.get(b).map(|l| l.to_string()).unwrap_or_default(),
                c.to_string(),
                format!("{m:.8}"),
                format!("{:.8}", std.data()[b * ps.classes + c]),
                u8::from(argmax == c).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Density of each class's softmax output over the examples of each true class.
fn write_histograms(ps: &PredictiveSamples, bins: usize, path: &std::path::Path) -> CliResult<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["true_class", "class", "bin_lo", "bin_hi", "count", "density"])?;
    for t in 0..ps.classes {
        for c in 0..ps.classes {
            let Some(h) = class_pdf_histogram(ps, c, t, bins)? else {
                continue;
            };
            let width = 1.0 / bins as f64;
            let total = h.total() as f64;
            for (i, &n) in h.counts.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    c.to_string(),
                    format!("{:.4}", h.edges[i]),
                    format!("{:.4}", h.edges[i + 1]),
                    n.to_string(),
                    format!("{:.6}", n as f64 / (total * width)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

//! Run configuration: an optional TOML file overlaid by command-line flags.
//! Every key of the file is also a flag; flags win. Unset values fall back to
//! the preset defaults (23 epochs, batch 100, RMSProp at 1e-3).

use std::path::{Path, PathBuf};
use std::time::Duration;

use bnn_collective::{CommConfig, TransportKind, DEFAULT_FUSION_BYTES};
use bnn_core::prune::DEFAULT_THRESHOLD;
use bnn_core::train::{BetaSchedule, OptimizerKind, TrainConfig};
use bnn_core::InitConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::error::{usage, CliResult};
use crate::model::ModelChoice;

/// Settings shared by every subcommand, as flags or file keys.
#[derive(Args, Clone, Debug, Default, Deserialize, Serialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// TOML file with any of these settings; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// bnn-fc, bnn-conv or a path to a TOML model description.
    #[arg(long)]
    pub model: Option<String>,
    /// Filters per conv layer of bnn-conv.
    #[arg(long)]
    pub filters: Option<usize>,
    /// Directory with the MNIST IDX files (optionally gzipped).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training images taken from the training file; the rest is held out.
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Minibatch size (per worker when distributed).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Learning rate for one worker; scaled by the worker count.
    #[arg(long)]
    pub lr: Option<f64>,
    /// adam or rmsprop.
    #[arg(long)]
    pub opt: Option<String>,
    /// KL weight: a number, linear:<steps> or cyclical:<steps>.
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train μ only, keeping ρ at its initial value.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub freeze_scale: Option<bool>,
    /// Mean weights in every training pass.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
    #[arg(long)]
    pub mu_std: Option<f64>,
    #[arg(long)]
    pub rho_mean: Option<f64>,
    #[arg(long)]
    pub rho_std: Option<f64>,
    /// Monte-Carlo samples S.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Histogram bins over [0, 1].
    #[arg(long)]
    pub bins: Option<usize>,
    /// Use only the first N test examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// SNR threshold for prune.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Pruning percentages for sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub percents: Option<Vec<f64>>,
    /// Checkpoint to read; defaults to the newest in the output directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Data-parallel workers W.
    #[arg(long)]
    pub workers: Option<usize>,
    /// channel (threads) or tcp (one process per rank).
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub fusion_mb: Option<f64>,
    #[arg(long)]
    pub cycle_ms: Option<u64>,
    /// Milliseconds before an incomplete tensor or silent rank fails the run.
    #[arg(long)]
    pub coord_timeout_ms: Option<u64>,
    /// Share one noise stream across workers.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub shared_noise: Option<bool>,
    /// World sizes for the scaling harness, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub scaling: Option<Vec<usize>>,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<u64>,
    /// Tensor sizes in bytes for bench-allreduce, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// 64-bit arithmetic throughout (verification mode).
    #[arg(long = "f64", num_args = 0..=1, default_missing_value = "true")]
    pub f64: Option<bool>,
}

macro_rules! overlay {
    ($flags:expr, $file:expr, $($f:ident),*) => {
        Overrides { config: $flags.config.clone(), $($f: $flags.$f.clone().or($file.$f.clone())),* }
    };
}

impl Overrides {
    /// Flags over the file named by `--config`, if any.
    pub fn resolve_file(&self) -> CliResult<Overrides> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| crate::error::CliError::Usage(format!("--config {}: {e}", path.display())))?;
        let file: Overrides = match toml::from_str(&text) {
            Ok(f) => f,
            Err(e) => return usage(format!("--config {}: {e}", path.display())),
        };
        Ok(overlay!(
            self, file, model, filters, data_dir, n_train, epochs, batch, lr, opt, beta, seed, freeze_scale,
            deterministic, mu_std, rho_mean, rho_std, samples, bins, limit, threshold, percents, checkpoint, workers,
            transport, fusion_mb, cycle_ms, coord_timeout_ms, shared_noise, scaling, max_steps, sizes, reps, out_dir,
            f64
        ))
    }
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelChoice,
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub train: TrainConfig,
    pub init: InitConfig,
    pub samples: usize,
    pub bins: usize,
    pub limit: Option<usize>,
    pub threshold: f64,
    pub percents: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub workers: usize,
    pub transport: TransportKind,
    pub comm: CommConfig,
    pub shared_noise: bool,
    pub scaling: Option<Vec<usize>>,
    pub max_steps: Option<u64>,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub out_dir: PathBuf,
    pub f64: bool,
    /// The merged overrides, kept to hand to worker processes.
    pub source: Overrides,
}

pub const DEFAULT_SAMPLES: usize = 400;
pub const DEFAULT_N_TRAIN: usize = 50_000;
pub const DEFAULT_PERCENTS: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, 90.0];

fn parse_beta(s: &str) -> CliResult<BetaSchedule> {
    let bad = || usage(format!("--beta {s:?}: expected a number, linear:<steps> or cyclical:<steps>"));
    if let Some(n) = s.strip_prefix("linear:") {
        return n.parse().map(|ramp_steps| BetaSchedule::Linear { ramp_steps }).or_else(|_| bad());
    }
    if let Some(n) = s.strip_prefix("cyclical:") {
        return n.parse().map(|cycle_steps| BetaSchedule::Cyclical { cycle_steps }).or_else(|_| bad());
    }
    match s.strip_prefix("constant:").unwrap_or(s).parse::<f64>() {
        Ok(v) if v.is_finite() && v >= 0.0 => Ok(BetaSchedule::Constant(v)),
        _ => bad(),
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(name: &str, v: T) -> CliResult<T> {
    if v > T::default() {
        Ok(v)
    } else {
        usage(format!("--{name} must be positive, got {v}"))
    }
}

impl RunConfig {
    pub fn from_overrides(o: &Overrides) -> CliResult<Self> {
        let o = o.resolve_file()?;
        let model = ModelChoice::parse(o.model.as_deref().unwrap_or("bnn-fc"), o.filters)?;
        let optimizer = match o.opt.as_deref().unwrap_or("rmsprop").parse::<OptimizerKind>() {
            Ok(k) => k,
            Err(e) => return usage(format!("--opt: {e}")),
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            epochs: o.epochs.unwrap_or(defaults.epochs),
            batch_size: positive("batch", o.batch.unwrap_or(defaults.batch_size))?,
            lr: o.lr.unwrap_or(defaults.lr),
            optimizer,
            beta: o.beta.as_deref().map(parse_beta).transpose()?.unwrap_or(defaults.beta),
            seed: o.seed.unwrap_or(0),
            freeze_scale: o.freeze_scale.unwrap_or(false),
            deterministic: o.deterministic.unwrap_or(false),
        };
        if !(train.lr.is_finite() && train.lr > 0.0) {
            return usage(format!("--lr must be positive, got {}", train.lr));
        }
        let d = InitConfig::default();
        let init = InitConfig {
            mu_std: o.mu_std.unwrap_or(d.mu_std),
            rho_mean: o.rho_mean.unwrap_or(d.rho_mean),
            rho_std: o.rho_std.unwrap_or(d.rho_std),
        };
        for (name, v) in [("mu-std", init.mu_std), ("rho-std", init.rho_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return usage(format!("--{name} must be a finite non-negative number, got {v}"));
            }
        }
        let transport = match o.transport.as_deref() {
            None => TransportKind::Channel,
            Some(t) => match TransportKind::parse(t) {
                Some(k) => k,
                None => return usage(format!("--transport {t:?}: expected channel or tcp")),
            },
        };
        let fusion_mb = o.fusion_mb.unwrap_or(DEFAULT_FUSION_BYTES as f64 / (1 << 20) as f64);
        if !(fusion_mb.is_finite() && fusion_mb > 0.0) {
            return usage(format!("--fusion-mb must be positive, got {fusion_mb}"));
        }
        let defaults = CommConfig::default();
        let comm = CommConfig {
            cycle: o.cycle_ms.map_or(defaults.cycle, Duration::from_millis),
            fusion_bytes: ((fusion_mb * (1 << 20) as f64) as usize).max(1),
            stall_timeout: o
                .coord_timeout_ms
                .map(|ms| positive("coord-timeout-ms", ms).map(Duration::from_millis))
                .transpose()?
                .unwrap_or(defaults.stall_timeout),
            recv_timeout: defaults.recv_timeout,
        };
        let percents = o.percents.clone().unwrap_or_else(|| DEFAULT_PERCENTS.to_vec());
        if let Some(p) = percents.iter().find(|p| !(0.0..=100.0).contains(*p)) {
            return usage(format!("--percents: {p} is outside 0..=100"));
        }
        let threshold = o.threshold.unwrap_or(DEFAULT_THRESHOLD);
        if !(threshold.is_finite() && threshold >= 0.0) {
            return usage(format!("--threshold must be non-negative, got {threshold}"));
        }
        if let Some(s) = &o.scaling {
            if s.first() != Some(&1) || s.contains(&0) {
                return usage("--scaling must start with 1 and list positive world sizes");
            }
        }
        let mut o = o;
        o.data_dir = o.data_dir.or_else(|| std::env::var_os("BNN_MNIST_DIR").map(PathBuf::from));
        Ok(Self {
            model,
            data_dir: o.data_dir.clone(),
            n_train: positive("n-train", o.n_train.unwrap_or(DEFAULT_N_TRAIN))?,
            train,
            init,
            samples: positive("samples", o.samples.unwrap_or(DEFAULT_SAMPLES))?,
            bins: o.bins.unwrap_or(20).max(2),
            limit: o.limit.map(|l| positive("limit", l)).transpose()?,
            threshold,
            percents,
            checkpoint: o.checkpoint.clone(),
            workers: positive("workers", o.workers.unwrap_or(1))?,
            transport,
            comm,
            shared_noise: o.shared_noise.unwrap_or(false),
            scaling: o.scaling.clone(),
            max_steps: o.max_steps,
            sizes: o.sizes.clone().unwrap_or_else(|| (0..9).map(|i| 1024 << (2 * i)).collect()),
            reps: positive("reps", o.reps.unwrap_or(5))?,
            out_dir: o.out_dir.clone().unwrap_or_else(|| PathBuf::from("out")),
            f64: o.f64.unwrap_or(false),
            source: o,
        })
    }

    pub fn data_dir(&self) -> CliResult<&Path> {
        match &self.data_dir {
            None => usage("no dataset given: pass --data-dir (or set data_dir in --config, or BNN_MNIST_DIR)"),
            Some(d) if !d.is_dir() => usage(format!("--data-dir {} does not exist", d.display())),
            Some(d) => Ok(d),
        }
    }

    /// The merged settings as TOML, written next to every run's outputs.
    pub fn record(&self) -> String {
        toml::to_string(&self.source).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_recipe() {
        let c = RunConfig::from_overrides(&Overrides::default()).unwrap();
        assert_eq!((c.train.epochs, c.train.batch_size, c.train.lr), (23, 100, 1e-3));
        assert_eq!(c.train.optimizer, OptimizerKind::RmsProp);
        assert_eq!(c.samples, 400);
        assert_eq!(c.threshold, 10.0);
        assert_eq!(c.percents, DEFAULT_PERCENTS.to_vec());
        assert_eq!(c.comm.cycle, Duration::from_millis(5));
        assert_eq!(c.comm.fusion_bytes, 64 << 20);
    }

    #[test]
    fn flags_win_over_the_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "epochs = 3\nbatch = 50\nbeta = \"linear:10\"\n").unwrap();
        let o = Overrides {
            config: Some(path.clone()),
            batch: Some(20),
            ..Overrides::default()
        };
        let c = RunConfig::from_overrides(&o).unwrap();
        assert_eq!((c.train.epochs, c.train.batch_size), (3, 20));
        assert_eq!(c.train.beta, BetaSchedule::Linear { ramp_steps: 10 });
        let again: Overrides = toml::from_str(&c.record()).unwrap();
        assert_eq!(again.batch, Some(20));
        std::fs::write(&path, "epochs = 3\nepohcs = 4\n").unwrap();
        match RunConfig::from_overrides(&o) {
            Err(crate::error::CliError::Usage(m)) => assert!(m.contains("epohcs"), "{m}"),
            _ => panic!("unknown key accepted"),
        }
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for o in [
            Overrides { batch: Some(0), ..Default::default() },
            Overrides { opt: Some("sgd".into()), ..Default::default() },
            Overrides { beta: Some("warm".into()), ..Default::default() },
            Overrides { transport: Some("mpi".into()), ..Default::default() },
            Overrides { percents: Some(vec![120.0]), ..Default::default() },
        ] {
            assert!(matches!(RunConfig::from_overrides(&o), Err(crate::error::CliError::Usage(_))));
        }
    }
}

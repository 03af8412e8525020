//! ELBO assembly, KL weighting schedules, optimizers and the single-worker loop.
//!
//! Per step the minimised loss is `mean NLL + β·KL/N_train`, estimated with
//! one flipout noise sample.

mod optim;
mod schedule;

pub use optim::{Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, OPT_EPS, RMSPROP_DECAY};
pub use schedule::BetaSchedule;

use std::time::Instant;

use crate::error::{BnnError, Result};
use crate::io::{Checkpoint, Dataset};
use crate::layers::{Gradients, ModelGraph, Noise, ParamKind, Sampling};
use crate::rng::{stream_id, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const SHUFFLE_TAG: u64 = 0x5348_5546;
const INIT_TAG: u64 = 0x494E_4954;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub step: u64,
}

fn check_labels(logits: &[usize], labels: &[usize]) -> Result<()> {
    let (b, c) = (logits[0], logits[1]);
    if labels.len() != b {
        return Err(BnnError::dim("nll labels", logits, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(BnnError::Data(format!("label {bad} outside [0, {c})")));
    }
    Ok(())
}

/// `−(1/B) Σ log softmax(logits)[n, label_n]`.
pub fn nll_categorical<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    Ok(nll_impl(logits, labels, false)?.0)
}

/// The mean NLL and its gradient `(softmax − onehot)/B`.
pub fn nll_with_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (nll, g) = nll_impl(logits, labels, true)?;
    Ok((nll, g.expect("requested")))
}

fn nll_impl<T: Scalar>(logits: &Tensor<T>, labels: &[usize], grad: bool) -> Result<(f64, Option<Tensor<T>>)> {
    if logits.rank() != 2 || logits.shape()[0] == 0 {
        return Err(BnnError::dim("nll logits", logits.shape(), &[0, 0]));
    }
    check_labels(logits.shape(), labels)?;
    let (b, c) = (logits.shape()[0], logits.shape()[1]);
    let mut total = 0.0;
    let mut g = grad.then(|| Tensor::zeros(&[b, c]));
    let inv_b = 1.0 / b as f64;
    for (n, &label) in labels.iter().enumerate() {
        let row = logits.row(n);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[label].as_f64();
        if let Some(g) = &mut g {
            let out = &mut g.data_mut()[n * c..(n + 1) * c];
            for (j, (o, v)) in out.iter_mut().zip(row).enumerate() {
                let p = (v.as_f64() - lse).exp();
                let y = if j == label { 1.0 } else { 0.0 };
                *o = T::of((p - y) * inv_b);
            }
        }
    }
    Ok((total * inv_b, g))
}

/// One-sample ELBO loss and gradients for the parameters the run trains.
///
/// With `freeze_scale`, ρ receives no gradient (the KL term still counts it).
pub fn elbo_loss<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    n_train: usize,
    sampling: &Sampling,
    freeze_scale: bool,
) -> Result<(ElboBreakdown, Gradients<T>)> {
    if n_train == 0 {
        return Err(BnnError::Parameter("N_train must be positive".into()));
    }
    let (logits, tape) = graph.forward(x, sampling)?;
    let (nll, d_logits) = nll_with_grad(&logits, labels)?;
    let mut grads = graph.backward(&tape, &d_logits)?;
    if freeze_scale {
        grads.retain(|id| id.kind != ParamKind::Scale);
    }
    let kl = graph.kl();
    let w = beta / n_train as f64;
    if w != 0.0 {
        graph.add_kl_grad(T::of(w), &mut grads);
    }
    Ok((
        ElboBreakdown {
            nll,
            kl,
            beta,
            total: nll + w * kl,
            step: 0,
        },
        grads,
    ))
}

/// Loss value only, for the same inputs as [`elbo_loss`].
pub fn elbo_value<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor<T>,
    labels: &[usize],
    beta: f64,
    n_train: usize,
    sampling: &Sampling,
) -> Result<f64> {
    let logits = graph.infer(x, sampling)?;
    Ok(nll_categorical(&logits, labels)? + beta * graph.kl() / n_train as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta: BetaSchedule,
    pub seed: u64,
    /// Exclude ρ from training.
    pub freeze_scale: bool,
    /// Use mean weights in every forward pass (implies `freeze_scale`).
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 23,
            batch_size: 100,
            lr: 1e-3,
            optimizer: OptimizerKind::RmsProp,
            beta: BetaSchedule::Constant(1.0),
            seed: 0,
            freeze_scale: false,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(BnnError::Parameter("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(BnnError::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn sampling(&self, step: u64, rank: Option<usize>) -> Sampling {
        if self.deterministic {
            Sampling::Mean
        } else {
            Sampling::Flipout(Noise::for_step(self.seed, step, rank))
        }
    }

    pub fn trains_scale(&self) -> bool {
        !(self.freeze_scale || self.deterministic)
    }
}

/// Epoch averages of the per-step breakdowns plus mean-weight training accuracy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub nll: f64,
    pub kl: f64,
    pub beta: f64,
    pub total: f64,
    pub train_accuracy: f64,
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: [&'static str; 7] = ["epoch", "nll", "kl", "beta", "total", "train_accuracy", "wall_seconds"];

    pub fn csv_record(&self) -> [String; 7] {
        [
            self.epoch.to_string(),
            self.nll.to_string(),
            self.kl.to_string(),
            self.beta.to_string(),
            self.total.to_string(),
            self.train_accuracy.to_string(),
            self.wall_seconds.to_string(),
        ]
    }
}

/// Fraction of `data` classified correctly by the mean-weight network.
pub fn mean_weight_accuracy<T: Scalar>(graph: &ModelGraph<T>, data: &Dataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(BnnError::Data("empty dataset".into()));
    }
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(1000) {
        let idx: Vec<usize> = (start..(start + 1000).min(data.len())).collect();
        let x = data.batch(&idx, graph.input_shape())?;
        let pred = graph.infer(&x, &Sampling::Mean)?.argmax_rows();
        correct += pred.iter().zip(&idx).filter(|(p, &i)| **p == data.labels[i]).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// The generator that orders training examples for a run seeded with `seed`.
pub fn shuffle_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed, stream_id(&[SHUFFLE_TAG]))
}

/// The generator that draws initial parameters for a run seeded with `seed`.
pub fn init_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed, stream_id(&[INIT_TAG]))
}

/// Resumable single-worker training state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub graph: ModelGraph<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub shuffle_rng: SeededRng,
    pub history: Vec<EpochMetrics>,
    pub step_log: Vec<ElboBreakdown>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(graph: ModelGraph<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            graph,
            optimizer: Optimizer::new(config.optimizer, config.lr),
            config,
            epoch: 0,
            step: 0,
            shuffle_rng: shuffle_rng(config.seed),
            history: Vec::new(),
            step_log: Vec::new(),
        })
    }

    pub fn train_step(&mut self, x: &Tensor<T>, labels: &[usize], n_train: usize) -> Result<ElboBreakdown> {
        let beta = self.config.beta.beta_at(self.step);
        let sampling = self.config.sampling(self.step, None);
        let (mut b, grads) = elbo_loss(
            &self.graph,
            x,
            labels,
            beta,
            n_train,
            &sampling,
            !self.config.trains_scale(),
        )?;
        if !b.total.is_finite() {
            return Err(BnnError::Data(format!("non-finite loss at step {}", self.step)));
        }
        self.optimizer.step(&mut self.graph, &grads)?;
        b.step = self.step;
        self.step += 1;
        self.step_log.push(b);
        Ok(b)
    }

    /// One shuffled pass over `data`; the final partial batch is kept.
    pub fn run_epoch(&mut self, data: &Dataset<T>) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(BnnError::Data("empty training set".into()));
        }
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        self.shuffle_rng.shuffle(&mut order);
        let (mut nll, mut kl, mut beta, mut total, mut steps) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(self.config.batch_size) {
            let x = data.batch(idx, self.graph.input_shape())?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let b = self.train_step(&x, &labels, data.len())?;
            nll += b.nll;
            kl += b.kl;
            beta += b.beta;
            total += b.total;
            steps += 1;
        }
        let n = steps as f64;
        let m = EpochMetrics {
            epoch: self.epoch,
            nll: nll / n,
            kl: kl / n,
            beta: beta / n,
            total: total / n,
            train_accuracy: mean_weight_accuracy(&self.graph, data)?,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.epoch += 1;
        self.history.push(m);
        Ok(m)
    }

    /// Everything needed to continue this run exactly.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            graph: self.graph.clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: self.shuffle_rng.state(),
            step: self.step,
            epoch: self.epoch as u64,
        }
    }

    /// Continues the run saved in `ck`; `config` must be the one it started with.
    pub fn resume(ck: Checkpoint<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| BnnError::Usage("checkpoint carries no optimizer state to resume from".into()))?;
        if optimizer.kind != config.optimizer || optimizer.lr != config.lr {
            return Err(BnnError::Consistency(format!(
                "checkpoint optimizer {} lr {} differs from configured {} lr {}",
                optimizer.kind.name(),
                optimizer.lr,
                config.optimizer.name(),
                config.lr
            )));
        }
        Ok(Self {
            graph: ck.graph,
            optimizer,
            config,
            epoch: ck.epoch as usize,
            step: ck.step,
            shuffle_rng: SeededRng::from_state(ck.rng),
            history: Vec::new(),
            step_log: Vec::new(),
        })
    }

    /// Runs epochs until `config.epochs` have completed in total.
    pub fn fit(&mut self, data: &Dataset<T>) -> Result<&[EpochMetrics]> {
        let first = self.history.len();
        while self.epoch < self.config.epochs {
            self.run_epoch(data)?;
        }
        Ok(&self.history[first..])
    }
}

/// Trains `graph` on `data` from scratch.
pub fn train<T: Scalar>(
    graph: ModelGraph<T>,
    data: &Dataset<T>,
    config: TrainConfig,
) -> Result<(ModelGraph<T>, Vec<EpochMetrics>)> {
    if data.is_empty() {
        return Err(BnnError::Data("empty training set".into()));
    }
    let mut t = Trainer::new(graph, config)?;
    t.fit(data)?;
    Ok((t.graph, t.history))
}

//! Monte-Carlo predictive inference: `p(y|x) ≈ (1/S) Σ_s softmax(f(x; θ_s))`.
//!
//! Sample `s` uses the noise stream keyed by `(seed, s)` and each example's
//! global index, so results do not depend on chunking and the first `S`
//! samples of a larger run equal an `S`-sample run.

use crate::error::{BnnError, Result};
use crate::layers::{ModelGraph, Noise, Sampling};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Examples per forward pass.
pub const DEFAULT_CHUNK: usize = 2000;

/// Softmax outputs `[S, B, C]`, stored as `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveSamples {
    pub n_samples: usize,
    pub batch: usize,
    pub classes: usize,
    pub probs: Vec<f32>,
    pub labels: Option<Vec<usize>>,
}

impl PredictiveSamples {
    pub fn new(n_samples: usize, batch: usize, classes: usize, probs: Vec<f32>, labels: Option<Vec<usize>>) -> Result<Self> {
        if n_samples == 0 {
            return Err(BnnError::Parameter("at least one MC sample is required".into()));
        }
        if probs.len() != n_samples * batch * classes {
            return Err(BnnError::dim("predictive samples", &[probs.len()], &[n_samples, batch, classes]));
        }
        if labels.as_ref().is_some_and(|l| l.len() != batch) {
            return Err(BnnError::dim("predictive labels", &[batch], &[labels.as_ref().map_or(0, Vec::len)]));
        }
        Ok(Self {
            n_samples,
            batch,
            classes,
            probs,
            labels,
        })
    }

    /// Probabilities of sample `s` for example `b`.
    pub fn row(&self, s: usize, b: usize) -> &[f32] {
        let at = (s * self.batch + b) * self.classes;
        &self.probs[at..at + self.classes]
    }

    /// The first `s` samples.
    pub fn prefix(&self, s: usize) -> Result<Self> {
        if s == 0 || s > self.n_samples {
            return Err(BnnError::Parameter(format!("prefix {s} outside 1..={}", self.n_samples)));
        }
        Ok(Self {
            n_samples: s,
            probs: self.probs[..s * self.batch * self.classes].to_vec(),
            ..self.clone()
        })
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.probs
            .chunks_exact(self.classes)
            .map(|r| (r.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// All `S` values for one `(example, class)` pair.
    pub fn values(&self, b: usize, c: usize) -> Vec<f32> {
        (0..self.n_samples).map(|s| self.row(s, b)[c]).collect()
    }
}

/// Runs `forward` for samples `0..n_samples`, `chunk` examples at a time,
/// with each chunk reshaped to `[n, input_shape..]`.
pub(crate) fn mc_with<T: Scalar>(
    x: &Tensor<T>,
    input_shape: &[usize],
    n_samples: usize,
    seed: u64,
    chunk: usize,
    mut forward: impl FnMut(&Tensor<T>, &Sampling) -> Result<Tensor<T>>,
) -> Result<(usize, Vec<f32>)> {
    if n_samples == 0 {
        return Err(BnnError::Parameter("S must be at least 1".into()));
    }
    let batch = x.shape().first().copied().unwrap_or(0);
    let chunk = chunk.max(1);
    let mut probs = Vec::new();
    let mut classes = 0;
    for s in 0..n_samples {
        let noise = Noise::for_mc_sample(seed, s as u64);
        for start in (0..batch).step_by(chunk) {
            let n = chunk.min(batch - start);
            let mut shape = vec![n];
            shape.extend_from_slice(input_shape);
            let xs = x.slice_rows(start, n).reshape(&shape)?;
            let logits = forward(&xs, &Sampling::Flipout(noise.with_offset(start as u64)))?;
            classes = logits.row_len();
            probs.extend(logits.softmax().data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)));
        }
    }
    Ok((classes, probs))
}

/// `S` stochastic forward passes with softmax applied. `x` may be any shape
/// whose rows hold one example each.
pub fn predict_mc<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor<T>,
    n_samples: usize,
    seed: u64,
    labels: Option<Vec<usize>>,
) -> Result<PredictiveSamples> {
    predict_mc_chunked(graph, x, n_samples, seed, labels, DEFAULT_CHUNK)
}

pub fn predict_mc_chunked<T: Scalar>(
    graph: &ModelGraph<T>,
    x: &Tensor<T>,
    n_samples: usize,
    seed: u64,
    labels: Option<Vec<usize>>,
    chunk: usize,
) -> Result<PredictiveSamples> {
    let (classes, probs) = mc_with(x, graph.input_shape(), n_samples, seed, chunk, |xs, s| graph.infer(xs, s))?;
    PredictiveSamples::new(n_samples, x.shape()[0], classes, probs, labels)
}

/// Mean over samples, `[B, C]`.
pub fn predictive_mean(ps: &PredictiveSamples) -> Tensor<f64> {
    let mut out = vec![0.0; ps.batch * ps.classes];
    for s in 0..ps.n_samples {
        let block = &ps.probs[s * ps.batch * ps.classes..(s + 1) * ps.batch * ps.classes];
        for (o, &v) in out.iter_mut().zip(block) {
            *o += f64::from(v);
        }
    }
    let inv = 1.0 / ps.n_samples as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::from_vec(&[ps.batch, ps.classes], out).expect("shape")
}

/// Per-(example, class) standard deviation over samples, `[B, C]`.
pub fn predictive_std(ps: &PredictiveSamples) -> Tensor<f64> {
    let mean = predictive_mean(ps);
    let mut out = vec![0.0; ps.batch * ps.classes];
    for s in 0..ps.n_samples {
        let block = &ps.probs[s * ps.batch * ps.classes..(s + 1) * ps.batch * ps.classes];
        for ((o, &v), &m) in out.iter_mut().zip(block).zip(mean.data()) {
            *o += (f64::from(v) - m).powi(2);
        }
    }
    let inv = 1.0 / ps.n_samples as f64;
    out.iter_mut().for_each(|v| *v = (*v * inv).sqrt());
    Tensor::from_vec(&[ps.batch, ps.classes], out).expect("shape")
}

/// Fraction of examples whose predictive-mean argmax equals the label.
pub fn accuracy(ps: &PredictiveSamples) -> Result<f64> {
    let labels = ps
        .labels
        .as_ref()
        .ok_or_else(|| BnnError::Usage("accuracy needs ground-truth labels".into()))?;
    if ps.batch == 0 {
        return Err(BnnError::Data("no examples".into()));
    }
    let pred = predictive_mean(ps).argmax_rows();
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / ps.batch as f64)
}

/// Equal-width bins over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of the softmax values of `class_index` over all samples of the
/// examples labelled `true_class`; `None` when no example carries that label.
pub fn class_pdf_histogram(
    ps: &PredictiveSamples,
    class_index: usize,
    true_class: usize,
    bins: usize,
) -> Result<Option<Histogram>> {
    if bins < 2 {
        return Err(BnnError::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    if class_index >= ps.classes {
        return Err(BnnError::Parameter(format!("class {class_index} outside 0..{}", ps.classes)));
    }
    let labels = ps
        .labels
        .as_ref()
        .ok_or_else(|| BnnError::Usage("histogram filtering needs labels".into()))?;
    let examples: Vec<usize> = (0..ps.batch).filter(|&b| labels[b] == true_class).collect();
    if examples.is_empty() {
        return Ok(None);
    }
    let mut counts = vec![0u64; bins];
    for s in 0..ps.n_samples {
        for &b in &examples {
            let v = f64::from(ps.row(s, b)[class_index]).clamp(0.0, 1.0);
            counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Some(Histogram { edges, counts }))
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a − F_b|`.
pub fn ks_distance(a: &[f32], b: &[f32]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return if a.len() == b.len() { 0.0 } else { 1.0 };
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f32::total_cmp);
    b.sort_by(f32::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = if a[i].total_cmp(&b[j]).is_le() { a[i] } else { b[j] };
        while i < a.len() && a[i] == v {
            i += 1;
        }
        while j < b.len() && b[j] == v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn check_comparable(a: &PredictiveSamples, b: &PredictiveSamples) -> Result<()> {
    if a.batch != b.batch || a.classes != b.classes {
        return Err(BnnError::Usage(format!(
            "cannot compare [{}×{}] with [{}×{}] predictive samples",
            a.batch, a.classes, b.batch, b.classes
        )));
    }
    Ok(())
}

/// KS distance for every `(example, class)` pair, example-major.
pub fn ks_per_pair(small: &PredictiveSamples, large: &PredictiveSamples) -> Result<Vec<f64>> {
    check_comparable(small, large)?;
    let mut out = Vec::with_capacity(small.batch * small.classes);
    for b in 0..small.batch {
        for c in 0..small.classes {
            out.push(ks_distance(&small.values(b, c), &large.values(b, c)));
        }
    }
    Ok(out)
}

/// Largest per-pair KS distance.
pub fn mc_convergence(small: &PredictiveSamples, large: &PredictiveSamples) -> Result<f64> {
    Ok(ks_per_pair(small, large)?.into_iter().fold(0.0, f64::max))
}

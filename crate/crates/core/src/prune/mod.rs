//! Signal-to-noise pruning of variational weights.
//!
//! A weight's SNR is `|μ| / σ`. Pruning removes a weight from both the mean
//! path and the noise path: the mask is stored on the parameter, `μ` is
//! zeroed and sampling skips the position.

mod report;
mod sparse;

pub use report::{PruneReport, REPORT_MAGIC, REPORT_VERSION};
pub use sparse::{sparse_forward, sparse_infer, SparseKernel, SparseModel};

use std::time::Instant;

use crate::error::{BnnError, Result};
use crate::infer::accuracy;
use crate::io::Dataset;
use crate::layers::ModelGraph;
use crate::layers::VariationalParam;
use crate::scalar::Scalar;
use crate::tensor::{softplus, Tensor};

/// Threshold applied when none is given.
pub const DEFAULT_THRESHOLD: f64 = 10.0;

/// `|μ| / softplus(ρ)`, elementwise.
pub fn snr<T: Scalar>(p: &VariationalParam<T>) -> Tensor<T> {
    let data = p.mu.data().iter().zip(p.rho.data()).map(|(&m, &r)| m.abs() / softplus(r)).collect();
    Tensor::from_vec(p.shape(), data).expect("same shape")
}

/// SNR of every variational weight, per layer and concatenated in layer order.
#[derive(Clone, Debug)]
pub struct GlobalSnr {
    /// `(layer index, SNR tensor)` for each variational layer.
    pub layers: Vec<(usize, Tensor<f64>)>,
    pub flat: Vec<f64>,
}

pub fn global_snr<T: Scalar>(graph: &ModelGraph<T>) -> GlobalSnr {
    let mut layers = Vec::new();
    let mut flat = Vec::with_capacity(graph.variational_weight_count());
    for (i, layer) in graph.layers().iter().enumerate() {
        if let Some(p) = &layer.param {
            let t: Tensor<f64> = snr(p).cast();
            flat.extend_from_slice(t.data());
            layers.push((i, t));
        }
    }
    GlobalSnr { layers, flat }
}

/// Kept positions of one variational layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMask {
    pub layer: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub kept: Vec<bool>,
    pub nnz: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
    pub threshold: f64,
}

impl PruneMask {
    pub fn total_nnz(&self) -> usize {
        self.layers.iter().map(|l| l.nnz).sum()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.kept.len()).sum()
    }

    /// Fraction of weights removed.
    pub fn sparsity(&self) -> f64 {
        let n = self.total_len();
        if n == 0 {
            0.0
        } else {
            1.0 - self.total_nnz() as f64 / n as f64
        }
    }
}

/// Installs `keep(global index)` as the mask, intersected with any existing mask.
fn apply_mask<T: Scalar>(graph: &ModelGraph<T>, threshold: f64, keep: impl Fn(usize) -> bool) -> (ModelGraph<T>, PruneMask) {
    let mut out = graph.clone();
    let mut layers = Vec::new();
    let mut base = 0;
    for (i, layer) in out.layers_mut().iter_mut().enumerate() {
        let name = layer.name.clone();
        let Some(p) = layer.param.as_mut() else { continue };
        let kept: Vec<bool> = (0..p.len()).map(|j| p.is_kept(j) && keep(base + j)).collect();
        base += p.len();
        let nnz = kept.iter().filter(|&&k| k).count();
        p.kept = if p.kept.is_none() && nnz == kept.len() {
            None
        } else {
            Some(kept.clone())
        };
        layers.push(LayerMask {
            layer: i,
            name,
            shape: p.shape().to_vec(),
            kept,
            nnz,
        });
    }
    out.enforce_masks();
    (out, PruneMask { layers, threshold })
}

/// Removes every weight with SNR below `t`.
pub fn prune_by_threshold<T: Scalar>(graph: &ModelGraph<T>, t: f64) -> Result<(ModelGraph<T>, PruneMask)> {
    if t.is_nan() || t < 0.0 {
        return Err(BnnError::Parameter(format!("threshold must be ≥ 0, got {t}")));
    }
    let snr = global_snr(graph).flat;
    Ok(apply_mask(graph, t, |j| snr[j] >= t))
}

/// Removes the `round(pct·n/100)` lowest-SNR weights; ties prune the higher
/// index first. Returns the midpoint between the last pruned and first kept SNR.
pub fn prune_by_fraction<T: Scalar>(graph: &ModelGraph<T>, pct: f64) -> Result<(ModelGraph<T>, PruneMask, f64)> {
    if !(0.0..=100.0).contains(&pct) {
        return Err(BnnError::Parameter(format!("prune percentage must be in [0, 100], got {pct}")));
    }
    let snr = global_snr(graph).flat;
    let n = snr.len();
    let k = ((pct / 100.0) * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| snr[a].total_cmp(&snr[b]).then(b.cmp(&a)));
    let mut pruned = vec![false; n];
    for &j in &order[..k] {
        pruned[j] = true;
    }
    let threshold = match (k.checked_sub(1).map(|i| snr[order[i]]), order.get(k).map(|&j| snr[j])) {
        (None, _) => 0.0,
        (Some(_), None) => f64::INFINITY,
        (Some(lo), Some(hi)) => 0.5 * (lo + hi),
    };
    let (g, mask) = apply_mask(graph, threshold, |j| !pruned[j]);
    Ok((g, mask, threshold))
}

/// One row of an accuracy-versus-sparsity sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub pct: f64,
    pub threshold: f64,
    pub layer_nnz: Vec<(String, usize)>,
    pub nnz_total: usize,
    pub accuracy: f64,
    pub runtime_s: f64,
}

impl SweepRow {
    pub const CSV_HEADER: [&'static str; 5] = ["pct", "threshold", "accuracy", "nnz_total", "runtime_s"];

    pub fn csv_record(&self) -> [String; 5] {
        [
            self.pct.to_string(),
            self.threshold.to_string(),
            self.accuracy.to_string(),
            self.nnz_total.to_string(),
            self.runtime_s.to_string(),
        ]
    }
}

/// Prunes each percentage from the unpruned `graph` and evaluates the sparse
/// predictive mean over `n_samples` draws.
pub fn prune_sweep<T: Scalar>(
    graph: &ModelGraph<T>,
    test: &Dataset<T>,
    pcts: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(pcts.len());
    for &pct in pcts {
        let (pruned, mask, threshold) = prune_by_fraction(graph, pct)?;
        let sparse = SparseModel::from_graph(&pruned);
        let (ps, runtime_s) = sparse_infer(&pruned, &sparse, &test.images, n_samples, seed, Some(test.labels.clone()))?;
        rows.push(SweepRow {
            pct,
            threshold,
            layer_nnz: mask.layers.iter().map(|l| (l.name.clone(), l.nnz)).collect(),
            nnz_total: mask.total_nnz(),
            accuracy: accuracy(&ps)?,
            runtime_s,
        });
    }
    Ok(rows)
}

/// Sparse inference on `test` packaged with the mask counts.
pub fn prune_report<T: Scalar>(
    graph: &ModelGraph<T>,
    mask: &PruneMask,
    test: &Dataset<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PruneReport> {
    let sparse = SparseModel::from_graph(graph);
    let started = Instant::now();
    let (ps, _) = sparse_infer(graph, &sparse, &test.images, n_samples, seed, Some(test.labels.clone()))?;
    let runtime = started.elapsed().as_secs_f64();
    PruneReport::new(
        mask.threshold,
        test.images.cast::<f32>(),
        test.labels.iter().map(|&l| l as u32).collect(),
        mask.layers.iter().map(|l| (l.name.clone(), l.nnz as u64)).collect(),
        ps,
        runtime,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{presets, InitConfig, LayerSpec, Sampling};
    use crate::rng::{sample_normal, SeededRng};

    fn fc() -> ModelGraph<f64> {
        let mut g = presets::bnn_fc::<f64>();
        let cfg = InitConfig {
            rho_mean: -3.0,
            rho_std: 1.0,
            ..Default::default()
        };
        g.init_params(&mut SeededRng::new(2, 2), &cfg).unwrap();
        g
    }

    fn line(values: &[f64]) -> ModelGraph<f64> {
        let mut g = ModelGraph::new(&[values.len()], vec![("d".into(), LayerSpec::dense(values.len(), 1))]).unwrap();
        let p = g.layers_mut()[0].param.as_mut().unwrap();
        p.mu = Tensor::from_vec(&[values.len(), 1], values.to_vec()).unwrap();
        // softplus(ρ) = 1 exactly is not representable; ρ = ln(e − 1) gets within an ulp.
        p.rho = Tensor::full(&[values.len(), 1], (std::f64::consts::E - 1.0).ln());
        g
    }

    #[test]
    fn snr_arithmetic_and_loop_oracle() {
        let p = VariationalParam::new(
            Tensor::from_vec(&[2], vec![0.5, 0.0]).unwrap(),
            Tensor::full(&[2], (0.05f64.exp() - 1.0).ln()),
        )
        .unwrap();
        let s = snr(&p);
        assert!((s.data()[0] - 10.0).abs() < 1e-12);
        assert_eq!(s.data()[1], 0.0);

        let g = fc();
        let p = g.layers()[2].param.as_ref().unwrap();
        let got = snr(p);
        for i in 0..p.len() {
            let (m, r) = (p.mu.data()[i], p.rho.data()[i]);
            assert_eq!(got.data()[i], m.abs() / softplus(r));
        }
    }

    #[test]
    fn global_snr_concatenates_in_layer_order() {
        let g = fc();
        let gs = global_snr(&g);
        assert_eq!(gs.flat.len(), 268_800);
        let joined: Vec<f64> = gs.layers.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(joined, gs.flat);
        assert_eq!(gs.layers.iter().map(|(i, _)| *i).collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn zero_threshold_changes_nothing() {
        let g = fc();
        let (p, mask) = prune_by_threshold(&g, 0.0).unwrap();
        assert_eq!(p, g);
        assert_eq!(mask.total_nnz(), mask.total_len());
        assert!(prune_by_threshold(&g, -1.0).is_err());
    }

    #[test]
    fn infinite_threshold_leaves_bias_only_logits() {
        let g = fc();
        let (p, mask) = prune_by_threshold(&g, f64::INFINITY).unwrap();
        assert_eq!(mask.total_nnz(), 0);
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(3, 3), &[2, 784]);
        let y = p.infer(&x, &Sampling::Mean).unwrap();
        let bias = p.layers()[4].bias.as_ref().unwrap();
        for b in 0..2 {
            assert_eq!(y.row(b), bias.data());
        }
    }

    #[test]
    fn pruning_is_idempotent_and_monotone() {
        let g = fc();
        let (once, m1) = prune_by_threshold(&g, 1.0).unwrap();
        let (twice, m2) = prune_by_threshold(&once, 1.0).unwrap();
        assert_eq!(once, twice);
        assert_eq!(m1.total_nnz(), m2.total_nnz());
        let mut last = usize::MAX;
        for t in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let nnz = prune_by_threshold(&g, t).unwrap().1.total_nnz();
            assert!(nnz <= last);
            last = nnz;
        }
    }

    #[test]
    fn fraction_on_known_snr() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let g = line(&values);
        let (_, mask, t) = prune_by_fraction(&g, 50.0).unwrap();
        assert_eq!(mask.total_nnz(), 50);
        assert!(t > 50.0 - 1e-9 && t < 51.0 + 1e-9, "{t}");
        assert_eq!(mask.layers[0].kept[..50], [false; 50]);
        assert_eq!(prune_by_fraction(&g, 0.0).unwrap().1.total_nnz(), 100);
        assert!(prune_by_fraction(&g, 100.5).is_err());
    }

    #[test]
    fn fraction_ties_keep_lower_index() {
        let g = line(&[1.0, 1.0, 1.0, 1.0]);
        let (_, mask, _) = prune_by_fraction(&g, 50.0).unwrap();
        assert_eq!(mask.layers[0].kept, vec![true, true, false, false]);
    }

    #[test]
    fn fraction_hits_target_on_fc() {
        let g = fc();
        for pct in [10.0, 70.0, 95.0] {
            let (_, mask, _) = prune_by_fraction(&g, pct).unwrap();
            assert!((mask.sparsity() * 100.0 - pct).abs() < 0.1);
        }
    }
}

//! Independent numerical checks of the analytic machinery: central finite
//! differences of the ELBO, a sampling estimate of the KL term and flipout
//! moment statistics.

use crate::error::{BnnError, Result};
use crate::layers::{ModelGraph, Noise, Sampling, VariationalParam};
use crate::rng::SeededRng;
use crate::tensor::{softplus, Tensor};
use crate::train::{elbo_loss, elbo_value};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// `"<layer>/<variable>[index]"` of the entry with the largest error.
    pub worst: String,
    pub checked: usize,
}

/// Compares [`elbo_loss`] gradients with central differences of
/// [`elbo_value`] on every trainable entry, holding the noise fixed.
///
/// The error of one entry is `|fd − an| / max(|an|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_gradient_check(
    graph: &ModelGraph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    beta: f64,
    n_train: usize,
    sampling: &Sampling,
    h: f64,
    floor: f64,
) -> Result<GradCheck> {
    if !(h > 0.0 && floor > 0.0) {
        return Err(BnnError::Parameter(format!("step {h} and floor {floor} must be positive")));
    }
    let (_, grads) = elbo_loss(graph, x, labels, beta, n_train, sampling, false)?;
    let mut out = GradCheck {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut probe = graph.clone();
    for (id, an) in &grads.entries {
        for (i, &a) in an.data().iter().enumerate() {
            let orig = probe.tensor(*id).expect("graph owns gradient ids").data()[i];
            probe.tensor_mut(*id).expect("present").data_mut()[i] = orig + h;
            let up = elbo_value(&probe, x, labels, beta, n_train, sampling)?;
            probe.tensor_mut(*id).expect("present").data_mut()[i] = orig - h;
            let down = elbo_value(&probe, x, labels, beta, n_train, sampling)?;
            probe.tensor_mut(*id).expect("present").data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - a).abs() / a.abs().max(floor);
            if err > out.max_rel_err || out.checked == 0 {
                out.max_rel_err = err.max(out.max_rel_err);
                out.worst = format!("{}[{i}]", graph.param_name(*id));
            }
            out.checked += 1;
        }
    }
    Ok(out)
}

/// `E_q[log q(w) − log p(w)]` over `samples` draws `w = μ + σ·ε`, with `p`
/// the standard normal. Shares no code with the closed form.
pub fn kl_monte_carlo(p: &VariationalParam<f64>, samples: usize, rng: &mut SeededRng) -> Result<f64> {
    if samples == 0 {
        return Err(BnnError::Parameter("at least one sample is required".into()));
    }
    let sigma: Vec<f64> = p.rho.data().iter().map(|&r| softplus(r)).collect();
    let log_sigma: f64 = sigma.iter().map(|s| s.ln()).sum();
    let mut eps = vec![0.0f64; p.len()];
    let mut total = 0.0;
    for _ in 0..samples {
        rng.fill_normal(&mut eps);
        // log q − log p = −ln σ − ε²/2 + w²/2; the 2π terms cancel.
        let mut s = -log_sigma;
        for ((&e, &m), &sd) in eps.iter().zip(p.mu.data()).zip(&sigma) {
            let w = m + sd * e;
            s += 0.5 * (w * w - e * e);
        }
        total += s;
    }
    Ok(total / samples as f64)
}

/// Largest standardized deviations seen by [`flipout_moments`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlipoutMoments {
    pub trials: usize,
    /// max over outputs of `|mean(y − ȳ)| / stderr`.
    pub mean_z: f64,
    /// max over outputs `j` of `|mean(p₀ⱼ·p₁ⱼ)| / stderr`, `p = y − ȳ`
    /// for the first two examples.
    pub cov_z: f64,
}

/// Runs `forward` under `trials` independent noise draws and standardizes
/// the mean perturbation of every output and the cross-example product of
/// perturbations against their standard errors. `reference` is the
/// mean-weight output `[B, ..]` with `B ≥ 2`.
pub fn flipout_moments(
    reference: &Tensor<f64>,
    trials: usize,
    seed: u64,
    mut forward: impl FnMut(&Noise) -> Result<Tensor<f64>>,
) -> Result<FlipoutMoments> {
    if trials < 2 || reference.rank() < 2 || reference.shape()[0] < 2 {
        return Err(BnnError::Parameter(format!(
            "need ≥ 2 trials and ≥ 2 examples, got {trials} trials and shape {:?}",
            reference.shape()
        )));
    }
    let per = reference.len() / reference.shape()[0];
    let n = reference.len();
    let (mut sum, mut sq) = (vec![0.0; n], vec![0.0; n]);
    let (mut psum, mut psq) = (vec![0.0; per], vec![0.0; per]);
    for t in 0..trials {
        let y = forward(&Noise::new(seed, t as u64))?;
        if y.shape() != reference.shape() {
            return Err(BnnError::dim("flipout moments", reference.shape(), y.shape()));
        }
        let d: Vec<f64> = y.data().iter().zip(reference.data()).map(|(a, b)| a - b).collect();
        for (i, &v) in d.iter().enumerate() {
            sum[i] += v;
            sq[i] += v * v;
        }
        for j in 0..per {
            let p = d[j] * d[per + j];
            psum[j] += p;
            psq[j] += p * p;
        }
    }
    let z = |s: f64, q: f64| {
        let tn = trials as f64;
        let mean = s / tn;
        let var = (q / tn - mean * mean).max(0.0) * tn / (tn - 1.0);
        let se = (var / tn).sqrt();
        if se == 0.0 {
            if mean == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            mean.abs() / se
        }
    };
    let fold = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&s, &q)| z(s, q)).fold(0.0, f64::max);
    Ok(FlipoutMoments {
        trials,
        mean_z: fold(&sum, &sq),
        cov_z: fold(&psum, &psq),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{InitConfig, LayerSpec, Noise};
    use crate::rng::sample_normal;
    use crate::Tensor;

    #[test]
    fn kl_estimate_is_exact_at_the_prior() {
        // q = p gives log q − log p = 0 for every draw.
        let p = VariationalParam::new(Tensor::zeros(&[5]), Tensor::full(&[5], (std::f64::consts::E - 1.0).ln())).unwrap();
        let kl = kl_monte_carlo(&p, 10, &mut SeededRng::new(0, 0)).unwrap();
        assert!(kl.abs() < 1e-12, "{kl}");
    }

    #[test]
    fn gradient_check_of_a_dense_layer() {
        let mut g = ModelGraph::<f64>::new(&[3], vec![("d".into(), LayerSpec::dense(3, 2))]).unwrap();
        let cfg = InitConfig {
            rho_mean: -2.0,
            ..InitConfig::default()
        };
        g.init_params(&mut SeededRng::new(1, 1), &cfg).unwrap();
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(2, 2), &[4, 3]);
        let s = Sampling::Flipout(Noise::new(3, 3));
        let ok = elbo_gradient_check(&g, &x, &[0, 1, 1, 0], 1.0, 8, &s, 1e-6, 1e-3).unwrap();
        assert!(ok.max_rel_err < 1e-6, "{ok:?}");
        assert_eq!(ok.checked, 3 * 2 * 2 + 2);
        assert!(elbo_gradient_check(&g, &x, &[0, 1, 1, 0], 1.0, 8, &s, 0.0, 1e-3).is_err());
    }
}

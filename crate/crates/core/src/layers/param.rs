use crate::error::{BnnError, Result};
use crate::rng::NoiseStream;
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, softplus, Tensor};

/// Variable name of the posterior mean.
pub const KERNEL: &str = "kernel";
/// Variable name of ρ, with σ = softplus(ρ).
pub const SCALE: &str = "un-transformed scale";
/// Variable name of the deterministic bias.
pub const BIAS: &str = "bias";

/// Factorized Gaussian posterior over one weight tensor.
///
/// `kept`, when present, is the pruning mask: pruned positions have `mu == 0`
/// and draw no noise.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalParam<T> {
    pub mu: Tensor<T>,
    pub rho: Tensor<T>,
    pub kept: Option<Vec<bool>>,
}

impl<T: Scalar> VariationalParam<T> {
    pub const VARIABLE_NAMES: (&'static str, &'static str) = (KERNEL, SCALE);

    pub fn new(mu: Tensor<T>, rho: Tensor<T>) -> Result<Self> {
        mu.check_same(&rho, "variational param")?;
        Ok(Self { mu, rho, kept: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            mu: Tensor::zeros(shape),
            rho: Tensor::zeros(shape),
            kept: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.mu.shape()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Tensor<T> {
        self.rho.softplus()
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.kept.as_ref().is_none_or(|k| k[i])
    }

    pub fn kept_count(&self) -> usize {
        match &self.kept {
            Some(k) => k.iter().filter(|&&b| b).count(),
            None => self.len(),
        }
    }

    /// Closed-form `KL(N(μ, σ²) ‖ N(0, 1))` summed over every weight.
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mu
            .data()
            .iter()
            .zip(self.rho.data())
            .map(|(&m, &r)| {
                let s = softplus(r).as_f64();
                let m = m.as_f64();
                -s.ln() + 0.5 * (s * s + m * m - 1.0)
            })
            .sum()
    }

    /// Adds `scale · ∂KL/∂μ` and `scale · ∂KL/∂ρ` into the given buffers.
    pub fn accumulate_kl_grad(&self, scale: T, d_mu: &mut Tensor<T>, d_rho: Option<&mut Tensor<T>>) {
        for (g, &m) in d_mu.data_mut().iter_mut().zip(self.mu.data()) {
            *g += scale * m;
        }
        if let Some(d_rho) = d_rho {
            for (g, &r) in d_rho.data_mut().iter_mut().zip(self.rho.data()) {
                let s = softplus(r);
                *g += scale * (s - s.recip()) * sigmoid(r);
            }
        }
    }

    /// Draws `ε` at positions `0..len` of `eps` and returns `(ε, σ∘ε)`, with
    /// pruned positions zeroed in both.
    pub fn sample_perturbation(&self, eps: &NoiseStream) -> (Tensor<T>, Tensor<T>) {
        let mut e = Tensor::zeros(self.shape());
        eps.fill_normal(0, e.data_mut());
        if let Some(kept) = &self.kept {
            for (v, &k) in e.data_mut().iter_mut().zip(kept) {
                if !k {
                    *v = T::zero();
                }
            }
        }
        let delta = e
            .data()
            .iter()
            .zip(self.rho.data())
            .map(|(&e, &r)| e * softplus(r))
            .collect();
        let delta = Tensor::from_vec(self.shape(), delta).expect("same shape");
        (e, delta)
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.mu.data().iter().chain(self.rho.data()).any(|v| !v.is_finite()) {
            return Err(BnnError::Data("non-finite variational parameter".into()));
        }
        Ok(())
    }
}

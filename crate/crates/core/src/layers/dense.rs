use super::{scale_grads_by_mask, FlipoutDraw, LayerGrads, LayerNoise, VariationalParam};
use crate::error::{BnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Debug)]
pub struct DenseCache<T> {
    pub(crate) x: Tensor<T>,
    /// The draw and `x∘s`, absent for mean-weight passes.
    pub(crate) flip: Option<(FlipoutDraw<T>, Tensor<T>)>,
}

/// `y = x·μ + ((x∘s)·ΔW)∘r + b`, or `x·μ + b` when `noise` is `None`.
pub fn dense_flipout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &VariationalParam<T>,
    bias: Option<&Tensor<T>>,
    noise: Option<&LayerNoise>,
) -> Result<(Tensor<T>, DenseCache<T>)> {
    let (y, cache) = dense_apply(x, p, bias, noise, true)?;
    Ok((y, cache.expect("cache requested")))
}

pub(crate) fn dense_apply<T: Scalar>(
    x: &Tensor<T>,
    p: &VariationalParam<T>,
    bias: Option<&Tensor<T>>,
    noise: Option<&LayerNoise>,
    keep: bool,
) -> Result<(Tensor<T>, Option<DenseCache<T>>)> {
    if x.rank() != 2 || p.shape().len() != 2 || x.shape()[1] != p.shape()[0] {
        return Err(BnnError::dim("dense_flipout", x.shape(), p.shape()));
    }
    let (batch, n_in, n_out) = (x.shape()[0], p.shape()[0], p.shape()[1]);
    let mut y = x.matmul(&p.mu)?;
    let flip = match noise {
        Some(noise) => {
            let (eps, delta) = p.sample_perturbation(&noise.weights);
            let (s, r) = noise.signs(batch, n_in, n_out);
            let xs = x.mul(&s)?;
            let pert = xs.matmul(&delta)?;
            for (yv, (&pv, &rv)) in y.data_mut().iter_mut().zip(pert.data().iter().zip(r.data())) {
                *yv += pv * rv;
            }
            Some((
                FlipoutDraw {
                    eps,
                    delta,
                    in_signs: s,
                    out_signs: r,
                },
                xs,
            ))
        }
        None => None,
    };
    if let Some(b) = bias {
        y.add_bias(b)?;
    }
    Ok((y, keep.then(|| DenseCache { x: x.clone(), flip })))
}

/// Exact gradients of the sampled forward function recorded in `cache`.
pub fn dense_flipout_backward<T: Scalar>(
    cache: &DenseCache<T>,
    p: &VariationalParam<T>,
    dy: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let batch = cache.x.shape()[0];
    if dy.shape() != [batch, p.shape()[1]] || cache.x.shape()[1] != p.shape()[0] {
        return Err(BnnError::Usage(format!(
            "dense backward: cache {:?} / grad {:?} do not match kernel {:?}",
            cache.x.shape(),
            dy.shape(),
            p.shape()
        )));
    }
    let d_mu = cache.x.matmul_tn(dy)?;
    let mut dx = dy.matmul_nt(&p.mu)?;
    let mut d_rho = Tensor::zeros(p.shape());
    if let Some((draw, xs)) = &cache.flip {
        let gr = dy.mul(&draw.out_signs)?;
        let d_delta = xs.matmul_tn(&gr)?;
        let dxs = gr.matmul_nt(&draw.delta)?;
        for (d, (&v, &s)) in dx.data_mut().iter_mut().zip(dxs.data().iter().zip(draw.in_signs.data())) {
            *d += v * s;
        }
        for (((g, &dd), &e), &r) in d_rho
            .data_mut()
            .iter_mut()
            .zip(d_delta.data())
            .zip(draw.eps.data())
            .zip(p.rho.data())
        {
            *g = dd * e * sigmoid(r);
        }
    }
    let mut grads = LayerGrads {
        dx,
        d_mu,
        d_rho,
        d_bias: Some(dy.sum_to_last()),
    };
    scale_grads_by_mask(p, &mut grads);
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::super::Noise;
    use super::*;
    use crate::rng::{sample_normal, SeededRng};

    fn layer(seed: u64, n_in: usize, n_out: usize, rho: f64) -> (VariationalParam<f64>, Tensor<f64>) {
        let mut rng = SeededRng::new(seed, 0);
        let mu = sample_normal(&mut rng, &[n_in, n_out]);
        let mut rho_t: Tensor<f64> = sample_normal(&mut rng, &[n_in, n_out]);
        rho_t = rho_t.map(|v| rho + 0.3 * v);
        let bias = sample_normal(&mut rng, &[n_out]);
        (VariationalParam::new(mu, rho_t).unwrap(), bias)
    }

    #[test]
    fn zero_noise_limit_is_deterministic_layer() {
        let (mut p, b) = layer(1, 4, 3, 0.0);
        p.rho = Tensor::full(p.shape(), -1000.0);
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(2, 0), &[5, 4]);
        let noise = Noise::new(0, 0).layer(0);
        let (y, _) = dense_flipout_forward(&x, &p, Some(&b), Some(&noise)).unwrap();
        let mut want = x.matmul(&p.mu).unwrap();
        want.add_bias(&b).unwrap();
        assert_eq!(y.data(), want.data());
    }

    #[test]
    fn deterministic_limit_kernel_gradient() {
        let (p, b) = layer(3, 4, 3, 0.0);
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(4, 0), &[6, 4]);
        let dy: Tensor<f64> = sample_normal(&mut SeededRng::new(5, 0), &[6, 3]);
        let (_, cache) = dense_flipout_forward(&x, &p, Some(&b), None).unwrap();
        let g = dense_flipout_backward(&cache, &p, &dy).unwrap();
        assert_eq!(g.d_mu.data(), x.matmul_tn(&dy).unwrap().data());
        assert_eq!(g.d_bias.unwrap().data(), dy.sum_to_last().data());
        assert!(g.d_rho.data().iter().all(|&v| v == 0.0));
    }

    /// Central differences of `L = Σ y∘w` with the noise held fixed.
    #[test]
    fn gradients_match_finite_differences() {
        let (p, b) = layer(6, 4, 3, -1.0);
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(7, 0), &[5, 4]);
        let w: Tensor<f64> = sample_normal(&mut SeededRng::new(8, 0), &[5, 3]);
        let noise = Noise::new(11, 12).layer(2);
        let loss = |p: &VariationalParam<f64>, b: &Tensor<f64>, x: &Tensor<f64>| {
            let (y, _) = dense_flipout_forward(x, p, Some(b), Some(&noise)).unwrap();
            y.data().iter().zip(w.data()).map(|(a, c)| a * c).sum::<f64>()
        };
        let (_, cache) = dense_flipout_forward(&x, &p, Some(&b), Some(&noise)).unwrap();
        let g = dense_flipout_backward(&cache, &p, &w).unwrap();
        let h = 1e-6;
        let check = |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{fd} vs {an}");
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut c = p.clone();
            a.mu.data_mut()[i] += h;
            c.mu.data_mut()[i] -= h;
            check((loss(&a, &b, &x) - loss(&c, &b, &x)) / (2.0 * h), g.d_mu.data()[i]);
            let mut a = p.clone();
            let mut c = p.clone();
            a.rho.data_mut()[i] += h;
            c.rho.data_mut()[i] -= h;
            check((loss(&a, &b, &x) - loss(&c, &b, &x)) / (2.0 * h), g.d_rho.data()[i]);
        }
        for i in 0..x.len() {
            let mut a = x.clone();
            let mut c = x.clone();
            a.data_mut()[i] += h;
            c.data_mut()[i] -= h;
            check((loss(&p, &b, &a) - loss(&p, &b, &c)) / (2.0 * h), g.dx.data()[i]);
        }
        let db = g.d_bias.unwrap();
        for i in 0..b.len() {
            let mut a = b.clone();
            let mut c = b.clone();
            a.data_mut()[i] += h;
            c.data_mut()[i] -= h;
            check((loss(&p, &a, &x) - loss(&p, &c, &x)) / (2.0 * h), db.data()[i]);
        }
    }

    #[test]
    fn stale_cache_is_a_usage_error() {
        let (p, b) = layer(9, 4, 3, 0.0);
        let x: Tensor<f64> = Tensor::zeros(&[2, 4]);
        let (_, cache) = dense_flipout_forward(&x, &p, Some(&b), None).unwrap();
        let (q, _) = layer(9, 5, 3, 0.0);
        let err = dense_flipout_backward(&cache, &q, &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(matches!(err, BnnError::Usage(_)));
    }
}

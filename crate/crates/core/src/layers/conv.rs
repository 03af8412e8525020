use super::{scale_grads_by_mask, FlipoutDraw, LayerGrads, LayerNoise, VariationalParam};
use crate::error::{BnnError, Result};
use crate::scalar::Scalar;
use crate::tensor::{col2im, im2col, sigmoid, Conv2dGeometry, Padding, Tensor};

#[derive(Clone, Debug)]
pub struct ConvCache<T> {
    pub(crate) geom: Conv2dGeometry,
    pub(crate) cols: Tensor<T>,
    /// The draw and the sign-flipped patch matrix, absent for mean-weight passes.
    pub(crate) flip: Option<(FlipoutDraw<T>, Tensor<T>)>,
}

/// Multiplies patch column `(ky, kx, c)` of every row from example `b` by `s[b, c]`.
fn scale_patch_channels<T: Scalar>(cols: &mut Tensor<T>, s: &Tensor<T>, g: &Conv2dGeometry) {
    let plen = g.patch_len();
    let per_example = g.out_h * g.out_w;
    let sd = s.data();
    for (row, chunk) in cols.data_mut().chunks_exact_mut(plen).enumerate() {
        let signs = &sd[(row / per_example) * g.cin..(row / per_example + 1) * g.cin];
        for tap in chunk.chunks_exact_mut(g.cin) {
            for (v, &sv) in tap.iter_mut().zip(signs) {
                *v *= sv;
            }
        }
    }
}

/// `y_n = conv(x_n, μ) + conv(x_n∘s_n, ΔW)∘r_n + b`, with `s_n` over input
/// channels and `r_n` over output channels.
pub fn conv2d_flipout_forward<T: Scalar>(
    x: &Tensor<T>,
    p: &VariationalParam<T>,
    bias: Option<&Tensor<T>>,
    noise: Option<&LayerNoise>,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let (y, cache) = conv_apply(x, p, bias, noise, stride, padding, true)?;
    Ok((y, cache.expect("cache requested")))
}

pub(crate) fn conv_apply<T: Scalar>(
    x: &Tensor<T>,
    p: &VariationalParam<T>,
    bias: Option<&Tensor<T>>,
    noise: Option<&LayerNoise>,
    stride: usize,
    padding: Padding,
    keep: bool,
) -> Result<(Tensor<T>, Option<ConvCache<T>>)> {
    let g = Conv2dGeometry::new(x.shape(), p.shape(), stride, padding)?;
    let (plen, cout) = (g.patch_len(), g.cout);
    let cols = im2col(x, &g);
    let mu = p.mu.clone().reshape(&[plen, cout])?;
    let mut y = cols.matmul(&mu)?;
    let flip = match noise {
        Some(noise) => {
            let (eps, delta) = p.sample_perturbation(&noise.weights);
            let delta = delta.reshape(&[plen, cout])?;
            let (s, r) = noise.signs(g.batch, g.cin, cout);
            let mut cols_s = cols.clone();
            scale_patch_channels(&mut cols_s, &s, &g);
            let pert = cols_s.matmul(&delta)?;
            let per_example = g.out_h * g.out_w;
            let rd = r.data();
            for (row, (yr, pr)) in y
                .data_mut()
                .chunks_exact_mut(cout)
                .zip(pert.data().chunks_exact(cout))
                .enumerate()
            {
                let signs = &rd[(row / per_example) * cout..(row / per_example + 1) * cout];
                for ((yv, &pv), &rv) in yr.iter_mut().zip(pr).zip(signs) {
                    *yv += pv * rv;
                }
            }
            Some((
                FlipoutDraw {
                    eps,
                    delta,
                    in_signs: s,
                    out_signs: r,
                },
                cols_s,
            ))
        }
        None => None,
    };
    if let Some(b) = bias {
        y.add_bias(b)?;
    }
    let y = y.reshape(&g.output_shape())?;
    Ok((y, keep.then_some(ConvCache { geom: g, cols, flip })))
}

/// Exact gradients of the sampled forward function recorded in `cache`.
pub fn conv2d_flipout_backward<T: Scalar>(
    cache: &ConvCache<T>,
    p: &VariationalParam<T>,
    dy: &Tensor<T>,
) -> Result<LayerGrads<T>> {
    let g = &cache.geom;
    let kshape = [g.kh, g.kw, g.cin, g.cout];
    if dy.shape() != g.output_shape() || p.shape() != kshape {
        return Err(BnnError::Usage(format!(
            "conv backward: cache for kernel {:?} / output {:?} does not match kernel {:?} / grad {:?}",
            kshape,
            g.output_shape(),
            p.shape(),
            dy.shape()
        )));
    }
    let (plen, cout) = (g.patch_len(), g.cout);
    let dy2 = dy.clone().reshape(&[g.positions(), cout])?;
    let d_mu = cache.cols.matmul_tn(&dy2)?.reshape(p.shape())?;
    let mu = p.mu.clone().reshape(&[plen, cout])?;
    let mut d_cols = dy2.matmul_nt(&mu)?;
    let mut d_rho = Tensor::zeros(p.shape());
    if let Some((draw, cols_s)) = &cache.flip {
        let per_example = g.out_h * g.out_w;
        let mut gr = dy2.clone();
        let rd = draw.out_signs.data();
        for (row, chunk) in gr.data_mut().chunks_exact_mut(cout).enumerate() {
            let signs = &rd[(row / per_example) * cout..(row / per_example + 1) * cout];
            for (v, &rv) in chunk.iter_mut().zip(signs) {
                *v *= rv;
            }
        }
        let d_delta = cols_s.matmul_tn(&gr)?;
        let mut d_cols_s = gr.matmul_nt(&draw.delta)?;
        scale_patch_channels(&mut d_cols_s, &draw.in_signs, g);
        d_cols.add_assign(&d_cols_s)?;
        for (((gv, &dd), &e), &r) in d_rho
            .data_mut()
            .iter_mut()
            .zip(d_delta.data())
            .zip(draw.eps.data())
            .zip(p.rho.data())
        {
            *gv = dd * e * sigmoid(r);
        }
    }
    let mut grads = LayerGrads {
        dx: col2im(&d_cols, g),
        d_mu,
        d_rho,
        d_bias: Some(dy2.sum_to_last()),
    };
    scale_grads_by_mask(p, &mut grads);
    Ok(grads)
}

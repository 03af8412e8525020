//! NHWC convolution and pooling.
//!
//! Convolution lowers to a patch matrix (`im2col`) times the kernel viewed as
//! `[kh·kw·cin, cout]`; patch columns are ordered `(ky, kx, c)` to match the
//! `[kh, kw, cin, cout]` kernel layout.

use super::Tensor;
use crate::error::{BnnError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (input >= k).then(|| ((input - k) / stride + 1, 0)),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            (input > 0).then_some((out, total / 2))
        }
    }
}

impl Conv2dGeometry {
    pub fn new(x_shape: &[usize], k_shape: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if x_shape.len() != 4 || k_shape.len() != 4 || x_shape[3] != k_shape[2] || stride == 0 {
            return Err(BnnError::dim("conv2d", x_shape, k_shape));
        }
        let (batch, in_h, in_w, cin) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (kh, kw, cout) = (k_shape[0], k_shape[1], k_shape[3]);
        let (out_h, pad_top) =
            out_extent(in_h, kh, stride, padding).ok_or_else(|| BnnError::dim("conv2d", x_shape, k_shape))?;
        let (out_w, pad_left) =
            out_extent(in_w, kw, stride, padding).ok_or_else(|| BnnError::dim("conv2d", x_shape, k_shape))?;
        Ok(Self {
            batch,
            in_h,
            in_w,
            cin,
            kh,
            kw,
            cout,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.cout]
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.cin]
    }

    /// Input coordinate of output row `o` and kernel tap `k`, if not padding.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k).checked_sub(pad)?;
        (p < extent).then_some(p)
    }
}

/// Patch matrix `[B·Ho·Wo, kh·kw·cin]`; padded taps are zero.
pub fn im2col<T: Scalar>(x: &Tensor<T>, g: &Conv2dGeometry) -> Tensor<T> {
    let plen = g.patch_len();
    let mut cols = vec![T::zero(); g.positions() * plen];
    let xd = x.data();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let src = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&xd[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(&[g.positions(), plen], cols).expect("im2col shape")
}

/// Scatter-adds a patch matrix back onto the input grid (adjoint of [`im2col`]).
pub fn col2im<T: Scalar>(cols: &Tensor<T>, g: &Conv2dGeometry) -> Tensor<T> {
    let plen = g.patch_len();
    let mut x = Tensor::zeros(&g.input_shape());
    let xd = x.data_mut();
    let cd = cols.data();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cd[row * plen..(row + 1) * plen];
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let dst = ((b * g.in_h + iy) * g.in_w + ix) * g.cin;
                        let off = (ky * g.kw + kx) * g.cin;
                        for c in 0..g.cin {
                            xd[dst + c] += src[off + c];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    x
}

/// Cross-correlation of NHWC `x` with a `[kh, kw, cin, cout]` kernel.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: Padding) -> Result<Tensor<T>> {
    let g = Conv2dGeometry::new(x.shape(), kernel.shape(), stride, padding)?;
    let cols = im2col(x, &g);
    let k = kernel.clone().reshape(&[g.patch_len(), g.cout])?;
    cols.matmul(&k)?.reshape(&g.output_shape())
}

/// Valid max pooling; also returns the flat input index of each maximum.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || window == 0 || stride == 0 || s[1] < window || s[2] < window {
        return Err(BnnError::dim("maxpool2d", s, &[window, window]));
    }
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(b * oh * ow * c);
    let mut arg = Vec::with_capacity(b * oh * ow * c);
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_i = ((bi * h + oy * stride) * w + ox * stride) * c + ch;
                    for dy in 0..window {
                        for dx in 0..window {
                            let i = ((bi * h + oy * stride + dy) * w + ox * stride + dx) * c + ch;
                            if xd[i] > xd[best_i] {
                                best_i = i;
                            }
                        }
                    }
                    out.push(xd[best_i]);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::from_vec(&[b, oh, ow, c], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(dy: &Tensor<T>, argmax: &[usize], x_shape: &[usize]) -> Tensor<T> {
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        d[i] += g;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{sample_normal, SeededRng};

    /// Brute-force cross-correlation straight from the definition.
    fn conv_oracle(x: &Tensor<f64>, k: &Tensor<f64>, stride: usize, padding: Padding) -> (Vec<usize>, Vec<f64>) {
        let [b, h, w, cin] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [kh, kw, _, cout] = [k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]];
        let (oh, ow, pt, pl) = match padding {
            Padding::Valid => ((h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0),
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        let mut out = vec![0.0; b * oh * ow * cout];
        for n in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..cout {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pt as isize;
                                let ix = (ox * stride + kx) as isize - pl as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = x.data()[((n * h + iy as usize) * w + ix as usize) * cin + ci];
                                    let kv = k.data()[((ky * kw + kx) * cin + ci) * cout + co];
                                    acc += xv * kv;
                                }
                            }
                        }
                        out[((n * oh + oy) * ow + ox) * cout + co] = acc;
                    }
                }
            }
        }
        (vec![b, oh, ow, cout], out)
    }

    #[test]
    fn ones_kernel_on_ones_input() {
        let x = Tensor::<f32>::full(&[1, 3, 3, 1], 1.0);
        let k = Tensor::<f32>::full(&[2, 2, 1, 1], 1.0);
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn identity_kernel_is_noop() {
        let mut rng = SeededRng::new(5, 0);
        let x: Tensor<f32> = sample_normal(&mut rng, &[2, 4, 5, 1]);
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        for pad in [Padding::Valid, Padding::Same] {
            assert_eq!(conv2d(&x, &k, 1, pad).unwrap().data(), x.data());
        }
    }

    #[test]
    fn random_matches_nested_loops() {
        let mut rng = SeededRng::new(6, 0);
        let x: Tensor<f64> = sample_normal(&mut rng, &[2, 6, 6, 3]);
        let k: Tensor<f64> = sample_normal(&mut rng, &[3, 3, 3, 4]);
        for (stride, pad) in [(1, Padding::Valid), (2, Padding::Valid), (1, Padding::Same), (2, Padding::Same)] {
            let (shape, want) = conv_oracle(&x, &k, stride, pad);
            let got = conv2d(&x, &k, stride, pad).unwrap();
            assert_eq!(got.shape(), shape.as_slice());
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
            let got32 = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), stride, pad).unwrap();
            for (a, b) in got32.data().iter().zip(&want) {
                assert!((f64::from(*a) - b).abs() <= 1e-5 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let mut rng = SeededRng::new(8, 0);
        let x: Tensor<f64> = sample_normal(&mut rng, &[2, 5, 5, 2]);
        let g = Conv2dGeometry::new(x.shape(), &[3, 3, 2, 1], 2, Padding::Same).unwrap();
        let c: Tensor<f64> = sample_normal(&mut rng, &[g.positions(), g.patch_len()]);
        let lhs: f64 = im2col(&x, &g).data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(col2im(&c, &g).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 1]);
        let k = Tensor::<f32>::zeros(&[3, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 1, Padding::Valid), Err(BnnError::Dimension { .. })));
        assert!(conv2d(&x, &k, 1, Padding::Same).is_ok());
    }

    #[test]
    fn maxpool_ramp() {
        let x = Tensor::<f32>::from_vec(&[1, 4, 4, 1], (0..16).map(|v| v as f32).collect()).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 1]);
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let dx = maxpool2d_backward(&Tensor::full(&[1, 2, 2, 1], 1.0), &arg, x.shape());
        assert_eq!(dx.data().iter().sum::<f32>(), 4.0);
        assert_eq!(dx.data()[15], 1.0);
    }
}

//! Mean-field Gaussian layers sampled with flipout, and the graphs built from them.
//!
//! A flipout layer draws one weight perturbation `ΔW = σ∘ε` per forward call
//! and decorrelates the examples of a batch with per-example sign vectors:
//! `y_n = x_n·μ + ((x_n∘s_n)·ΔW)∘r_n + b`.

mod conv;
mod dense;
mod graph;
mod param;
pub mod presets;

pub use conv::{conv2d_flipout_backward, conv2d_flipout_forward, ConvCache};
pub use dense::{dense_flipout_backward, dense_flipout_forward, DenseCache};
pub use graph::{Gradients, InitConfig, Layer, LayerCache, ModelGraph, ParamId, ParamKind, Tape};
pub use param::{VariationalParam, BIAS, KERNEL, SCALE};

use crate::error::{BnnError, Result};
use crate::rng::{stream_id, NoiseStream};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    DenseFlipout {
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2dFlipout {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
        bias: bool,
    },
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Relu,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::DenseFlipout {
            inputs,
            outputs,
            bias: true,
        }
    }

    pub fn conv(k: usize, cin: usize, cout: usize, stride: usize, padding: Padding) -> Self {
        LayerSpec::Conv2dFlipout {
            kh: k,
            kw: k,
            cin,
            cout,
            stride,
            padding,
            bias: true,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::DenseFlipout { .. } => "DenseFlipout",
            LayerSpec::Conv2dFlipout { .. } => "Conv2DFlipout",
            LayerSpec::MaxPool2d { .. } => "MaxPooling2D",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::Relu => "ReLU",
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, LayerSpec::DenseFlipout { .. } | LayerSpec::Conv2dFlipout { .. })
    }

    pub fn kernel_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::DenseFlipout { inputs, outputs, .. } => Some(vec![inputs, outputs]),
            LayerSpec::Conv2dFlipout { kh, kw, cin, cout, .. } => Some(vec![kh, kw, cin, cout]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::DenseFlipout { outputs, bias: true, .. } => Some(outputs),
            LayerSpec::Conv2dFlipout { cout, bias: true, .. } => Some(cout),
            _ => None,
        }
    }

    /// Trainable scalars: `2·|kernel| + |bias|`.
    pub fn param_count(&self) -> usize {
        let kernel: usize = self.kernel_shape().map_or(0, |s| s.iter().product());
        2 * kernel + self.bias_len().unwrap_or(0)
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |want: &[usize]| BnnError::dim("layer input", input, want);
        match *self {
            LayerSpec::DenseFlipout { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(bad(&[inputs]));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2dFlipout {
                kh,
                kw,
                cin,
                cout,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[2] != cin {
                    return Err(bad(&[0, 0, cin]));
                }
                let g = crate::tensor::Conv2dGeometry::new(
                    &[1, input[0], input[1], cin],
                    &[kh, kw, cin, cout],
                    stride,
                    padding,
                )?;
                Ok(vec![g.out_h, g.out_w, cout])
            }
            LayerSpec::MaxPool2d { window, stride } => {
                if input.len() != 3 || input[0] < window || input[1] < window || stride == 0 {
                    return Err(bad(&[window, window, 0]));
                }
                Ok(vec![
                    (input[0] - window) / stride + 1,
                    (input[1] - window) / stride + 1,
                    input[2],
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Relu => Ok(input.to_vec()),
        }
    }
}

/// Identifies the noise used by one forward pass.
///
/// Layer `l` draws `ε` from the `(seed, stream, l, 0)` stream at positions
/// `0..|W|`, and the signs of the example with global index `e` from the
/// `(seed, stream, l, 1)` stream at bit positions `e·(in+out)..`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Noise {
    pub seed: u64,
    pub stream: u64,
    pub example_offset: u64,
}

impl Noise {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self {
            seed,
            stream,
            example_offset: 0,
        }
    }

    /// Noise for one training step; `rank` is `None` for streams shared by all workers.
    pub fn for_step(seed: u64, step: u64, rank: Option<usize>) -> Self {
        let stream = match rank {
            Some(r) => stream_id(&[0x5354_4550, step, r as u64 + 1]),
            None => stream_id(&[0x5354_4550, step, 0]),
        };
        Self::new(seed, stream)
    }

    /// Noise for Monte-Carlo sample `s`.
    pub fn for_mc_sample(seed: u64, s: u64) -> Self {
        Self::new(seed, stream_id(&[0x4d43_4d43, s]))
    }

    pub fn with_offset(mut self, example_offset: u64) -> Self {
        self.example_offset = example_offset;
        self
    }

    pub fn layer(&self, index: usize) -> LayerNoise {
        let base = NoiseStream::new(self.seed, self.stream).derive(index as u64);
        LayerNoise {
            weights: base.derive(0),
            signs: base.derive(1),
            example_offset: self.example_offset,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNoise {
    pub weights: NoiseStream,
    pub signs: NoiseStream,
    pub example_offset: u64,
}

impl LayerNoise {
    /// Input and output sign vectors (`[B×n_in]`, `[B×n_out]`) for a batch.
    pub fn signs<T: Scalar>(&self, batch: usize, n_in: usize, n_out: usize) -> (Tensor<T>, Tensor<T>) {
        let width = (n_in + n_out) as u64;
        let mut s = Tensor::zeros(&[batch, n_in]);
        let mut r = Tensor::zeros(&[batch, n_out]);
        for n in 0..batch {
            let base = (self.example_offset + n as u64) * width;
            self.signs.fill_sign(base, &mut s.data_mut()[n * n_in..(n + 1) * n_in]);
            self.signs
                .fill_sign(base + n_in as u64, &mut r.data_mut()[n * n_out..(n + 1) * n_out]);
        }
        (s, r)
    }
}

/// How weights are chosen in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Posterior means only (σ ignored).
    Mean,
    Flipout(Noise),
}

/// One flipout draw: shared `ε` and `ΔW = σ∘ε`, plus per-example signs.
#[derive(Clone, Debug)]
pub struct FlipoutDraw<T> {
    pub eps: Tensor<T>,
    pub delta: Tensor<T>,
    pub in_signs: Tensor<T>,
    pub out_signs: Tensor<T>,
}

/// Gradients of one layer.
#[derive(Clone, Debug)]
pub struct LayerGrads<T> {
    pub dx: Tensor<T>,
    pub d_mu: Tensor<T>,
    pub d_rho: Tensor<T>,
    pub d_bias: Option<Tensor<T>>,
}

pub(crate) fn scale_grads_by_mask<T: Scalar>(p: &VariationalParam<T>, g: &mut LayerGrads<T>) {
    if let Some(kept) = &p.kept {
        for ((m, r), &k) in g.d_mu.data_mut().iter_mut().zip(g.d_rho.data_mut()).zip(kept) {
            if !k {
                *m = T::zero();
                *r = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_parameter_counts() {
        assert_eq!(LayerSpec::dense(784, 256).param_count(), 401_664);
        assert_eq!(LayerSpec::dense(256, 256).param_count(), 131_328);
        assert_eq!(LayerSpec::dense(256, 10).param_count(), 5_130);
        assert_eq!(LayerSpec::conv(5, 1, 256, 2, Padding::Valid).param_count(), 13_056);
        assert_eq!(LayerSpec::conv(5, 256, 256, 1, Padding::Valid).param_count(), 3_277_056);
        assert_eq!(LayerSpec::Relu.param_count(), 0);
    }

    #[test]
    fn shared_noise_signs_follow_global_example_index() {
        let noise = Noise::for_step(3, 7, None);
        let whole: (Tensor<f32>, Tensor<f32>) = noise.layer(0).signs(8, 5, 3);
        let tail: (Tensor<f32>, Tensor<f32>) = noise.with_offset(4).layer(0).signs(4, 5, 3);
        assert_eq!(&whole.0.data()[20..], tail.0.data());
        assert_eq!(&whole.1.data()[12..], tail.1.data());
    }
}

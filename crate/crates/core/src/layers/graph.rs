use std::collections::HashSet;

use super::conv::{conv2d_flipout_backward, conv_apply, ConvCache};
use super::dense::{dense_apply, dense_flipout_backward, DenseCache};
use super::{LayerGrads, LayerSpec, Sampling, VariationalParam, BIAS, KERNEL, SCALE};
use crate::error::{BnnError, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{maxpool2d, maxpool2d_backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    Kernel,
    Scale,
    Bias,
}

impl ParamKind {
    pub fn variable_name(self) -> &'static str {
        match self {
            ParamKind::Kernel => KERNEL,
            ParamKind::Scale => SCALE,
            ParamKind::Bias => BIAS,
        }
    }

    pub fn from_variable_name(name: &str) -> Option<Self> {
        [ParamKind::Kernel, ParamKind::Scale, ParamKind::Bias]
            .into_iter()
            .find(|k| k.variable_name() == name)
    }
}

/// A trainable tensor: layer index plus role.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub name: String,
    pub spec: LayerSpec,
    pub param: Option<VariationalParam<T>>,
    pub bias: Option<Tensor<T>>,
}

/// Posterior initialisation: `μ ~ N(0, mu_std²)`, `ρ ~ N(rho_mean, rho_std²)`, zero biases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitConfig {
    pub mu_std: f64,
    pub rho_mean: f64,
    pub rho_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            mu_std: 0.1,
            rho_mean: -9.0,
            rho_std: 0.1,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mu_std", self.mu_std), ("rho_std", self.rho_std)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(BnnError::Parameter(format!("{name} must be a finite non-negative value, got {v}")));
            }
        }
        if !self.rho_mean.is_finite() {
            return Err(BnnError::Parameter(format!("rho_mean must be finite, got {}", self.rho_mean)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum LayerCache<T> {
    Dense(DenseCache<T>),
    Conv(ConvCache<T>),
    Pool { argmax: Vec<usize>, input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
    Relu { output: Tensor<T> },
}

/// Everything a forward pass recorded for [`ModelGraph::backward`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    pub(crate) caches: Vec<LayerCache<T>>,
}

/// Gradients keyed by parameter, in [`ModelGraph::param_ids`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub entries: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(k, _)| *k == id).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        self.entries.iter_mut().find(|(k, _)| *k == id).map(|(_, t)| t)
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.entries.retain(|(id, _)| keep(*id));
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// An ordered stack of layers applied to inputs of shape `[B, input_shape..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph<T> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> ModelGraph<T> {
    /// Checks shapes layer by layer; parameters start at zero.
    pub fn new(input_shape: &[usize], layers: Vec<(String, LayerSpec)>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut shape = input_shape.to_vec();
        let mut built = Vec::with_capacity(layers.len());
        for (name, spec) in layers {
            if name.is_empty() || name.contains(['/', ':', '\n']) {
                return Err(BnnError::Parameter(format!("invalid layer name {name:?}")));
            }
            if !seen.insert(name.clone()) {
                return Err(BnnError::Parameter(format!("duplicate layer name {name:?}")));
            }
            shape = spec.output_shape(&shape)?;
            built.push(Layer {
                name,
                param: spec.kernel_shape().map(|s| VariationalParam::zeros(&s)),
                bias: spec.bias_len().map(|n| Tensor::zeros(&[n])),
                spec,
            });
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            layers: built,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Per-example output shape.
    pub fn output_shape(&self) -> Vec<usize> {
        self.layers.iter().fold(self.input_shape.clone(), |s, l| {
            l.spec.output_shape(&s).expect("validated at construction")
        })
    }

    pub fn init_params(&mut self, rng: &mut SeededRng, cfg: &InitConfig) -> Result<()> {
        cfg.validate()?;
        for layer in &mut self.layers {
            if let Some(p) = &mut layer.param {
                rng.fill_normal(p.mu.data_mut());
                rng.fill_normal(p.rho.data_mut());
                let (ms, rm, rs) = (T::of(cfg.mu_std), T::of(cfg.rho_mean), T::of(cfg.rho_std));
                p.mu.data_mut().iter_mut().for_each(|v| *v *= ms);
                p.rho.data_mut().iter_mut().for_each(|v| *v = rm + *v * rs);
                p.kept = None;
            }
            if let Some(b) = &mut layer.bias {
                b.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        Ok(())
    }

    /// Re-zeroes the means of pruned positions.
    pub fn enforce_masks(&mut self) {
        for p in self.layers.iter_mut().filter_map(|l| l.param.as_mut()) {
            if let Some(kept) = &p.kept {
                for (m, &k) in p.mu.data_mut().iter_mut().zip(kept) {
                    if !k {
                        *m = T::zero();
                    }
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    /// Number of variational weights (kernel entries).
    pub fn variational_weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.param.as_ref()).map(|p| p.len()).sum()
    }

    pub fn kept_weight_count(&self) -> usize {
        self.layers.iter().filter_map(|l| l.param.as_ref()).map(|p| p.kept_count()).sum()
    }

    /// Sum of the per-layer KL terms (biases carry no distribution).
    pub fn kl(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| l.param.as_ref())
            .map(|p| p.kl_to_standard_normal())
            .sum()
    }

    /// Adds `scale · ∇KL` to the kernel and scale entries present in `grads`.
    pub fn add_kl_grad(&self, scale: T, grads: &mut Gradients<T>) {
        for (i, layer) in self.layers.iter().enumerate() {
            let Some(p) = &layer.param else { continue };
            let kid = ParamId {
                layer: i,
                kind: ParamKind::Kernel,
            };
            let sid = ParamId {
                layer: i,
                kind: ParamKind::Scale,
            };
            let mut d_mu = grads.get(kid).cloned();
            let mut d_rho = grads.get(sid).cloned();
            match (&mut d_mu, &mut d_rho) {
                (Some(m), r) => p.accumulate_kl_grad(scale, m, r.as_mut()),
                (None, Some(r)) => {
                    let mut scratch = Tensor::zeros(p.shape());
                    p.accumulate_kl_grad(scale, &mut scratch, Some(r));
                }
                (None, None) => {}
            }
            if let Some(kept) = &p.kept {
                for t in [&mut d_mu, &mut d_rho].into_iter().flatten() {
                    for (v, &k) in t.data_mut().iter_mut().zip(kept) {
                        if !k {
                            *v = T::zero();
                        }
                    }
                }
            }
            if let Some(m) = d_mu {
                *grads.get_mut(kid).expect("present") = m;
            }
            if let Some(r) = d_rho {
                *grads.get_mut(sid).expect("present") = r;
            }
        }
    }

    /// All trainable tensors in layer order: kernel, scale, bias.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.param.is_some() {
                ids.push(ParamId {
                    layer: i,
                    kind: ParamKind::Kernel,
                });
                ids.push(ParamId {
                    layer: i,
                    kind: ParamKind::Scale,
                });
            }
            if l.bias.is_some() {
                ids.push(ParamId {
                    layer: i,
                    kind: ParamKind::Bias,
                });
            }
        }
        ids
    }

    pub fn tensor(&self, id: ParamId) -> Option<&Tensor<T>> {
        let l = self.layers.get(id.layer)?;
        match id.kind {
            ParamKind::Kernel => l.param.as_ref().map(|p| &p.mu),
            ParamKind::Scale => l.param.as_ref().map(|p| &p.rho),
            ParamKind::Bias => l.bias.as_ref(),
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Option<&mut Tensor<T>> {
        let l = self.layers.get_mut(id.layer)?;
        match id.kind {
            ParamKind::Kernel => l.param.as_mut().map(|p| &mut p.mu),
            ParamKind::Scale => l.param.as_mut().map(|p| &mut p.rho),
            ParamKind::Bias => l.bias.as_mut(),
        }
    }

    /// `"<layer>/<variable>"`.
    pub fn param_name(&self, id: ParamId) -> String {
        format!("{}/{}", self.layers[id.layer].name, id.kind.variable_name())
    }

    pub fn param_by_name(&self, name: &str) -> Option<ParamId> {
        let (layer, var) = name.split_once('/')?;
        let id = ParamId {
            layer: self.layer_index(layer)?,
            kind: ParamKind::from_variable_name(var)?,
        };
        self.tensor(id).map(|_| id)
    }

    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            input_shape: self.input_shape.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    spec: l.spec,
                    param: l.param.as_ref().map(|p| VariationalParam {
                        mu: p.mu.cast(),
                        rho: p.rho.cast(),
                        kept: p.kept.clone(),
                    }),
                    bias: l.bias.as_ref().map(|b| b.cast()),
                })
                .collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            if let Some(p) = &l.param {
                p.check_finite()?;
            }
            if l.bias.as_ref().is_some_and(|b| b.data().iter().any(|v| !v.is_finite())) {
                return Err(BnnError::Data(format!("non-finite bias in layer {}", l.name)));
            }
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != self.input_shape.len() + 1 || x.shape()[1..] != self.input_shape[..] {
            let mut want = vec![0];
            want.extend(&self.input_shape);
            return Err(BnnError::dim("graph input", x.shape(), &want));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, sampling: &Sampling, keep: bool) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.check_input(x)?;
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        for i in 0..self.layers.len() {
            let (next, cache) = self.apply_layer(i, h, sampling, keep)?;
            h = next;
            caches.extend(cache);
        }
        Ok((h, caches))
    }

    /// Runs layer `i` on `h`.
    pub(crate) fn apply_layer(
        &self,
        i: usize,
        h: Tensor<T>,
        sampling: &Sampling,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<LayerCache<T>>)> {
        let layer = &self.layers[i];
        let noise = match sampling {
            Sampling::Mean => None,
            Sampling::Flipout(n) => Some(n.layer(i)),
        };
        Ok(match layer.spec {
            LayerSpec::DenseFlipout { .. } => {
                let p = layer.param.as_ref().expect("variational layer");
                let (y, c) = dense_apply(&h, p, layer.bias.as_ref(), noise.as_ref(), keep)?;
                (y, c.map(LayerCache::Dense))
            }
            LayerSpec::Conv2dFlipout { stride, padding, .. } => {
                let p = layer.param.as_ref().expect("variational layer");
                let (y, c) = conv_apply(&h, p, layer.bias.as_ref(), noise.as_ref(), stride, padding, keep)?;
                (y, c.map(LayerCache::Conv))
            }
            LayerSpec::MaxPool2d { window, stride } => {
                let (y, argmax) = maxpool2d(&h, window, stride)?;
                let c = keep.then(|| LayerCache::Pool {
                    argmax,
                    input_shape: h.shape().to_vec(),
                });
                (y, c)
            }
            LayerSpec::Flatten => {
                let input_shape = h.shape().to_vec();
                let b = input_shape[0];
                let y = h.reshape(&[b, input_shape[1..].iter().product()])?;
                (y, keep.then_some(LayerCache::Flatten { input_shape }))
            }
            LayerSpec::Relu => {
                let y = h.relu();
                let c = keep.then(|| LayerCache::Relu { output: y.clone() });
                (y, c)
            }
        })
    }

    /// Forward pass recording a tape for [`Self::backward`].
    pub fn forward(&self, x: &Tensor<T>, sampling: &Sampling) -> Result<(Tensor<T>, Tape<T>)> {
        let (y, caches) = self.run(x, sampling, true)?;
        Ok((y, Tape { caches }))
    }

    /// Forward pass without recording.
    pub fn infer(&self, x: &Tensor<T>, sampling: &Sampling) -> Result<Tensor<T>> {
        Ok(self.run(x, sampling, false)?.0)
    }

    /// Data-term gradients for every entry of [`Self::param_ids`].
    pub fn backward(&self, tape: &Tape<T>, d_out: &Tensor<T>) -> Result<Gradients<T>> {
        if tape.caches.len() != self.layers.len() {
            return Err(BnnError::Usage(format!(
                "tape has {} layers, graph has {}",
                tape.caches.len(),
                self.layers.len()
            )));
        }
        let mut per_layer: Vec<Option<LayerGrads<T>>> = vec![None; self.layers.len()];
        let mut g = d_out.clone();
        for (i, (layer, cache)) in self.layers.iter().zip(&tape.caches).enumerate().rev() {
            g = match (layer.spec, cache) {
                (LayerSpec::DenseFlipout { .. }, LayerCache::Dense(c)) => {
                    let lg = dense_flipout_backward(c, layer.param.as_ref().expect("variational"), &g)?;
                    let dx = lg.dx.clone();
                    per_layer[i] = Some(lg);
                    dx
                }
                (LayerSpec::Conv2dFlipout { .. }, LayerCache::Conv(c)) => {
                    let lg = conv2d_flipout_backward(c, layer.param.as_ref().expect("variational"), &g)?;
                    let dx = lg.dx.clone();
                    per_layer[i] = Some(lg);
                    dx
                }
                (LayerSpec::MaxPool2d { .. }, LayerCache::Pool { argmax, input_shape }) => {
                    if g.len() != argmax.len() {
                        return Err(BnnError::Usage(format!("stale pooling cache in layer {}", layer.name)));
                    }
                    maxpool2d_backward(&g, argmax, input_shape)
                }
                (LayerSpec::Flatten, LayerCache::Flatten { input_shape }) => g.reshape(input_shape)?,
                (LayerSpec::Relu, LayerCache::Relu { output }) => {
                    output.check_same(&g, "relu backward")?;
                    output.zip_map(&g, "relu backward", |y, d| if y > T::zero() { d } else { T::zero() })?
                }
                _ => {
                    return Err(BnnError::Usage(format!("tape does not match layer {}", layer.name)));
                }
            };
        }
        let mut entries = Vec::new();
        for id in self.param_ids() {
            let lg = per_layer[id.layer].as_mut().expect("variational layer has grads");
            let t = match id.kind {
                ParamKind::Kernel => std::mem::replace(&mut lg.d_mu, Tensor::zeros(&[0])),
                ParamKind::Scale => std::mem::replace(&mut lg.d_rho, Tensor::zeros(&[0])),
                ParamKind::Bias => lg.d_bias.take().expect("bias grad"),
            };
            entries.push((id, t));
        }
        Ok(Gradients { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::super::{presets, Noise};
    use super::*;
    use crate::rng::sample_normal;
    use crate::tensor::Padding;

    fn toy() -> ModelGraph<f64> {
        let mut g = ModelGraph::new(
            &[4, 4, 1],
            vec![
                ("c".into(), LayerSpec::conv(3, 1, 2, 1, Padding::Same)),
                ("r".into(), LayerSpec::Relu),
                ("p".into(), LayerSpec::MaxPool2d { window: 2, stride: 2 }),
                ("f".into(), LayerSpec::Flatten),
                ("d".into(), LayerSpec::dense(8, 3)),
            ],
        )
        .unwrap();
        g.init_params(
            &mut SeededRng::new(1, 2),
            &InitConfig {
                mu_std: 0.5,
                rho_mean: -1.0,
                rho_std: 0.2,
            },
        )
        .unwrap();
        g
    }

    #[test]
    fn duplicate_names_rejected() {
        let err = ModelGraph::<f32>::new(
            &[4],
            vec![("a".into(), LayerSpec::dense(4, 4)), ("a".into(), LayerSpec::dense(4, 2))],
        );
        assert!(matches!(err, Err(BnnError::Parameter(_))));
    }

    #[test]
    fn incompatible_layers_rejected() {
        let err = ModelGraph::<f32>::new(&[4], vec![("a".into(), LayerSpec::dense(5, 4))]);
        assert!(matches!(err, Err(BnnError::Dimension { .. })));
    }

    #[test]
    fn negative_std_rejected() {
        let mut g = presets::bnn_fc::<f32>();
        let cfg = InitConfig {
            rho_std: -0.1,
            ..Default::default()
        };
        assert!(matches!(
            g.init_params(&mut SeededRng::new(0, 0), &cfg),
            Err(BnnError::Parameter(_))
        ));
    }

    #[test]
    fn degenerate_rho_draw_is_exact() {
        let mut g = presets::bnn_fc::<f64>();
        let cfg = InitConfig {
            rho_std: 0.0,
            ..Default::default()
        };
        g.init_params(&mut SeededRng::new(0, 0), &cfg).unwrap();
        for l in g.layers() {
            if let Some(p) = &l.param {
                assert!(p.rho.data().iter().all(|&r| r == -9.0));
            }
        }
    }

    #[test]
    fn kl_is_sum_of_layer_kls() {
        let g = toy();
        let parts: f64 = g
            .layers()
            .iter()
            .filter_map(|l| l.param.as_ref())
            .map(|p| p.kl_to_standard_normal())
            .sum();
        assert_eq!(g.kl(), parts);
        assert!(g.kl() > 0.0);
    }

    #[test]
    fn names_resolve_both_ways() {
        let g = toy();
        for id in g.param_ids() {
            assert_eq!(g.param_by_name(&g.param_name(id)), Some(id));
        }
        assert_eq!(g.param_by_name("r/kernel"), None);
    }

    /// Central differences over every parameter of a conv/pool/dense stack.
    #[test]
    fn whole_graph_gradients_match_finite_differences() {
        let g = toy();
        let x: Tensor<f64> = sample_normal(&mut SeededRng::new(3, 0), &[2, 4, 4, 1]);
        let w: Tensor<f64> = sample_normal(&mut SeededRng::new(4, 0), &[2, 3]);
        let sampling = Sampling::Flipout(Noise::new(9, 9));
        let loss = |g: &ModelGraph<f64>| {
            let y = g.infer(&x, &sampling).unwrap();
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = g.forward(&x, &sampling).unwrap();
        let grads = g.backward(&tape, &w).unwrap();
        let h = 1e-6;
        for (id, an) in &grads.entries {
            for i in 0..an.len() {
                let mut a = g.clone();
                let mut b = g.clone();
                a.tensor_mut(*id).unwrap().data_mut()[i] += h;
                b.tensor_mut(*id).unwrap().data_mut()[i] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                let an = an.data()[i];
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "{id:?}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn mismatched_tape_is_a_usage_error() {
        let g = toy();
        let x = Tensor::zeros(&[1, 4, 4, 1]);
        let (_, mut tape) = g.forward(&x, &Sampling::Mean).unwrap();
        tape.caches.pop();
        assert!(matches!(
            g.backward(&tape, &Tensor::zeros(&[1, 3])),
            Err(BnnError::Usage(_))
        ));
    }
}

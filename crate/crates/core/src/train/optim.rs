use crate::error::{BnnError, Result};
use crate::layers::{Gradients, ModelGraph, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OptimizerKind::Adam => 0,
            OptimizerKind::RmsProp => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(OptimizerKind::Adam),
            1 => Some(OptimizerKind::RmsProp),
            _ => None,
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = BnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(BnnError::Parameter(format!("unknown optimizer {other:?} (adam, rmsprop)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_DECAY: f64 = 0.9;
pub const OPT_EPS: f64 = 1e-8;

/// Adam or RMSProp state. Moment slots are created on the first step and
/// bound to that step's parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    pub ids: Vec<ParamId>,
    /// First moments (Adam only; empty for RMSProp).
    pub m: Vec<Tensor<T>>,
    /// Second moments.
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            ids: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    fn bind(&mut self, ids: &[ParamId], shapes: &[&[usize]]) -> Result<()> {
        if self.v.is_empty() {
            self.ids = ids.to_vec();
            self.v = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            if self.kind == OptimizerKind::Adam {
                self.m = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            }
            return Ok(());
        }
        if self.ids != ids || self.v.iter().zip(shapes).any(|(v, s)| v.shape() != *s) || self.v.len() != shapes.len() {
            return Err(BnnError::Usage(
                "optimizer state does not match the parameters being updated".into(),
            ));
        }
        Ok(())
    }

    /// One descent step on `params` against `grads`, slot by slot.
    pub fn update(&mut self, ids: &[ParamId], params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || ids.len() != grads.len() {
            return Err(BnnError::Usage("parameter and gradient lists differ in length".into()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(BnnError::Usage(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let shapes: Vec<&[usize]> = grads.iter().map(|g| g.shape()).collect();
        self.bind(ids, &shapes)?;
        self.step += 1;
        let lr = T::of(self.lr);
        let eps = T::of(OPT_EPS);
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                let c1 = T::of(1.0 - ADAM_BETA1.powf(self.step as f64));
                let c2 = T::of(1.0 - ADAM_BETA2.powf(self.step as f64));
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (((w, &g), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let rho = T::of(RMSPROP_DECAY);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    for ((w, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(self.v[i].data_mut()) {
                        *v = rho * *v + (T::one() - rho) * g * g;
                        *w -= lr * g / (v.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    /// Applies `grads` to the matching tensors of `graph`.
    pub fn step(&mut self, graph: &mut ModelGraph<T>, grads: &Gradients<T>) -> Result<()> {
        let ids: Vec<ParamId> = grads.entries.iter().map(|(id, _)| *id).collect();
        let g: Vec<&Tensor<T>> = grads.entries.iter().map(|(_, t)| t).collect();
        let mut taken: Vec<Tensor<T>> = Vec::with_capacity(ids.len());
        for id in &ids {
            let t = graph
                .tensor_mut(*id)
                .ok_or_else(|| BnnError::Usage(format!("gradient for unknown parameter {id:?}")))?;
            taken.push(std::mem::replace(t, Tensor::zeros(&[0])));
        }
        let mut refs: Vec<&mut Tensor<T>> = taken.iter_mut().collect();
        let res = self.update(&ids, &mut refs, &g);
        for (id, t) in ids.iter().zip(taken) {
            *graph.tensor_mut(*id).expect("checked") = t;
        }
        res?;
        graph.enforce_masks();
        Ok(())
    }
}

//! Layers shared by every architecture.

use std::cell::RefCell;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    ShiftedSoftplus,
    Relu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::ShiftedSoftplus => x.softplus_shifted(),
            Activation::Relu => x.relu(),
        }
    }
}

/// Per-forward context: the bound parameters, the mode, and running
/// statistics produced by batch normalization in training mode.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub p: Bound<'t>,
    pub training: bool,
    stats: RefCell<Vec<(ParamId, Tensor)>>,
}

impl<'t> Ctx<'t> {
    pub fn new(tape: &'t Tape, store: &ParamStore, training: bool) -> Self {
        Self::with_bound(tape, store.bind(tape), training)
    }

    pub fn with_bound(tape: &'t Tape, p: Bound<'t>, training: bool) -> Self {
        Self {
            tape,
            p,
            training,
            stats: RefCell::new(Vec::new()),
        }
    }

    /// Updated batch-norm running statistics to write back after the step.
    pub fn take_running_stats(&self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stats.borrow_mut())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    /// Weights uniform in `+-1/sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = store.add(format!("{name}/w"), uniform(rng, [fan_in, fan_out], bound));
        let b = store.add(format!("{name}/b"), Tensor::zeros([1, fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(cx.p[self.w])?.add(cx.p[self.b])
    }
}

const BN_MOMENTUM: f64 = 0.9;
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}/gamma"), Tensor::full([1, dim], 1.0)),
            beta: store.add(format!("{name}/beta"), Tensor::zeros([1, dim])),
            running_mean: store.add_buffer(format!("{name}/running_mean"), Tensor::zeros([1, dim])),
            running_var: store.add_buffer(format!("{name}/running_var"), Tensor::full([1, dim], 1.0)),
        }
    }

    fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.rows();
        let (mean, var) = if cx.training && n > 0 {
            let inv_n = 1.0 / n as f64;
            let mean = x.sum_rows()?.scale(inv_n)?;
            let centered = x.sub(mean)?;
            let var = centered.square()?.sum_rows()?.scale(inv_n)?;
            let old_m = cx.p[self.running_mean].value();
            let old_v = cx.p[self.running_var].value();
            let mix = |old: &Tensor, new: &Tensor| old.zip_map(new, |o, b| BN_MOMENTUM * o + (1.0 - BN_MOMENTUM) * b);
            let mut stats = cx.stats.borrow_mut();
            stats.push((self.running_mean, mix(&old_m, &mean.value())?));
            stats.push((self.running_var, mix(&old_v, &var.value())?));
            (mean, var)
        } else {
            (cx.p[self.running_mean], cx.p[self.running_var])
        };
        let eps = cx.tape.constant(Tensor::scalar(BN_EPS));
        let inv_std = var.add(eps)?.pow(-0.5)?;
        x.sub(mean)?.mul(inv_std)?.mul(cx.p[self.gamma])?.add(cx.p[self.beta])
    }
}

/// Fully connected stack of `depth` linear layers with the activation
/// (and optional batch norm) after every hidden layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
    norms: Vec<BatchNorm>,
    activation: Activation,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        depth: usize,
        activation: Activation,
        batch_norm: bool,
    ) -> Self {
        let depth = depth.max(1);
        let mut layers = Vec::with_capacity(depth);
        let mut norms = Vec::new();
        for i in 0..depth {
            let a = if i == 0 { fan_in } else { hidden };
            let b = if i + 1 == depth { fan_out } else { hidden };
            layers.push(Linear::new(store, rng, &format!("{name}/l{i}"), a, b));
            if batch_norm && i + 1 < depth {
                norms.push(BatchNorm::new(store, &format!("{name}/bn{i}"), b));
            }
        }
        Self {
            layers,
            norms,
            activation,
        }
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(cx, x)?;
            if i < last {
                if let Some(bn) = self.norms.get(i) {
                    x = bn.forward(cx, x)?;
                }
                x = self.activation.apply(x)?;
            }
        }
        Ok(x)
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                bad.push(format!("train.adam.{name}: must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            bad.push(format!("train.adam.eps: must be positive, got {}", self.eps));
        }
        bad
    }
}

/// Bias-corrected Adam on every trainable parameter. `t` is the 1-based
/// update count. Missing gradients count as zero.
pub fn adam_update(
    params: &mut ParamStore,
    m: &mut [Tensor],
    v: &mut [Tensor],
    grads: &[Option<Tensor>],
    lr: f64,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if m.len() != params.len() || v.len() != params.len() || grads.len() != params.len() {
        return Err(Error::contract(format!(
            "optimizer state for {} parameters, store has {}",
            m.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        if let Some(g) = &grads[id.index()] {
            if g.shape() != p.value.shape() {
                return Err(Error::dim(format!(
                    "gradient for {} has shape {:?}, parameter has {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name)));
            }
        }
    }
    let t = t.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if !params.entry(id).trainable {
            continue;
        }
        let i = id.index();
        let (mi, vi) = (&mut m[i], &mut v[i]);
        let w = params.get_mut(id).data_mut();
        match &grads[i] {
            Some(g) => {
                for (k, &gk) in g.data().iter().enumerate() {
                    let a = &mut mi.data_mut()[k];
                    *a = cfg.beta1 * *a + (1.0 - cfg.beta1) * gk;
                    let b = &mut vi.data_mut()[k];
                    *b = cfg.beta2 * *b + (1.0 - cfg.beta2) * gk * gk;
                }
            }
            None => {
                mi.data_mut().iter_mut().for_each(|a| *a *= cfg.beta1);
                vi.data_mut().iter_mut().for_each(|b| *b *= cfg.beta2);
            }
        }
        for (k, wk) in w.iter_mut().enumerate() {
            let mh = mi.data()[k] / c1;
            let vh = vi.data()[k] / c2;
            *wk -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `min(base, (1 + step) / (10 + step))`.
pub fn ema_decay(step: u64, base: f64) -> f64 {
    let s = step as f64;
    base.min((1.0 + s) / (10.0 + s))
}

/// `ema <- d * ema + (1 - d) * params` with the warmed-up decay `d`.
pub fn ema_update(ema: &mut [Tensor], params: &ParamStore, step: u64, base_decay: f64) -> Result<()> {
    if ema.len() != params.len() {
        return Err(Error::contract("EMA state does not mirror the parameter store"));
    }
    let d = ema_decay(step, base_decay);
    for (id, p) in params.iter() {
        let e = &mut ema[id.index()];
        if !p.trainable {
            *e = p.value.clone();
            continue;
        }
        for (x, y) in e.data_mut().iter_mut().zip(p.value.data()) {
            *x = d * *x + (1.0 - d) * y;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_decay_values() {
        assert!((ema_decay(0, 0.9999) - 0.1).abs() < 1e-15);
        assert!((ema_decay(90, 0.9999) - 0.91).abs() < 1e-15);
        assert_eq!(ema_decay(10_000_000, 0.9999), 0.9999);
        let mut prev = 0.0;
        for s in 0..1000 {
            let d = ema_decay(s, 0.99);
            assert!(d >= prev && d <= 0.99);
            prev = d;
        }
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.5));
        let mut m = vec![Tensor::scalar(0.0)];
        let mut v = vec![Tensor::scalar(0.0)];
        let g = vec![Some(Tensor::scalar(1.0))];
        adam_update(&mut store, &mut m, &mut v, &g, 0.01, 1, &AdamConfig::default()).unwrap();
        let w = store.tensors()[0].item();
        assert!((0.5 - w - 0.01).abs() < 1e-9);
    }

    #[test]
    fn zero_grads_keep_params_and_decay_moments() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]));
        let mut m = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut v = vec![Tensor::vector(vec![0.0, 0.0])];
        let g = vec![Some(Tensor::vector(vec![0.0, 0.0]))];
        adam_update(&mut store, &mut m, &mut v, &g, 0.1, 1, &AdamConfig::default()).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0, -2.0]);
        let mut m = vec![Tensor::vector(vec![1.0, 1.0])];
        let mut v = vec![Tensor::vector(vec![1.0, 1.0])];
        adam_update(&mut store, &mut m, &mut v, &g, 0.0, 3, &AdamConfig::default()).unwrap();
        assert_eq!(m[0].data(), &[0.9, 0.9]);
        assert_eq!(v[0].data(), &[0.95, 0.95]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = ParamStore::new();
        store.add("layer/w", Tensor::scalar(0.5));
        let mut m = vec![Tensor::scalar(0.0)];
        let mut v = vec![Tensor::scalar(0.0)];
        let g = vec![Some(Tensor::scalar(f64::NAN))];
        let err = adam_update(&mut store, &mut m, &mut v, &g, 0.01, 1, &AdamConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Numeric(s) if s.contains("layer/w")));
    }
}

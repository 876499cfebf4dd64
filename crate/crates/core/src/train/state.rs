use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{Model, ModelConfig};
use crate::noise::{NoiseKind, NoiseSpec};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::atomref::{fit_atomref, reference_value};
use crate::train::optim::AdamConfig;
use crate::train::schedule::ScheduleSpec;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Mean squared error on normalized graph targets.
    #[default]
    GraphRegression,
    /// Cross entropy on the class id stored in graph target 0.
    GraphClassification,
}

fn d_ema() -> f64 {
    0.999
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub task: Task,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Edge cutoff used to rebuild edges of geometric graphs after noise.
    #[serde(default)]
    pub cutoff: Option<f64>,
    /// Subtract fitted per-type reference energies from graph targets.
    #[serde(default)]
    pub use_atomref: bool,
    /// Average the loss over every weight group's decoded output.
    #[serde(default = "d_true")]
    pub intermediate_losses: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::GraphRegression,
            schedule: ScheduleSpec::default(),
            adam: AdamConfig::default(),
            ema_decay: d_ema(),
            noise: NoiseSpec::default(),
            cutoff: None,
            use_atomref: false,
            intermediate_losses: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Vec<String> {
        let mut bad = self.schedule.validate();
        bad.extend(self.adam.validate());
        bad.extend(self.noise.validate());
        if !(0.0..1.0).contains(&self.ema_decay) {
            bad.push(format!("train.ema_decay: must lie in [0, 1), got {}", self.ema_decay));
        }
        if let Some(c) = self.cutoff {
            if !(c > 0.0) {
                bad.push(format!("train.cutoff: must be positive, got {c}"));
            }
        }
        let n = &self.noise;
        if n.lambda > 0.0 && !model.heads.nodes() {
            bad.push("noise.lambda: auxiliary loss needs a model with a node head".into());
        }
        if !model.heads.graph() {
            bad.push("model.heads: the primary loss needs a graph head".into());
        }
        if n.kind == NoiseKind::CategoryFlip && model.node_out != model.node_vocab && n.lambda > 0.0 {
            bad.push(format!(
                "model.node_out: category reconstruction needs node_out = node_vocab ({})",
                model.node_vocab
            ));
        }
        if n.is_positional() && n.lambda > 0.0 && model.node_out != 3 {
            bad.push("model.node_out: position denoising needs node_out = 3".into());
        }
        bad
    }
}

/// Target statistics fitted on the training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Mean and std of the (reference-subtracted) graph targets.
    pub graph_mean: Vec<f64>,
    pub graph_std: Vec<f64>,
    /// Std of the raw graph targets, for the standardized MAE.
    pub target_std: Vec<f64>,
    /// Node regression targets are divided by this.
    pub node_scale: f64,
}

impl Normalizer {
    pub fn identity(width: usize) -> Self {
        Self {
            graph_mean: vec![0.0; width],
            graph_std: vec![1.0; width],
            target_std: vec![1.0; width],
            node_scale: 1.0,
        }
    }

    fn column_stats(rows: &[Vec<f64>], width: usize) -> (Vec<f64>, Vec<f64>) {
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..width).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
        let std = (0..width)
            .map(|k| {
                let v = rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
                if v > 1e-24 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }

    pub fn fit(graphs: &[Graph], task: Task, width: usize, atomref: Option<&[f64]>, noise: &NoiseSpec) -> Result<Self> {
        let mut raw = Vec::with_capacity(graphs.len());
        let mut resid = Vec::with_capacity(graphs.len());
        for (i, g) in graphs.iter().enumerate() {
            let t = g
                .graph_target
                .as_ref()
                .ok_or_else(|| Error::Validation(format!("graph {i} has no graph target")))?;
            let need = if task == Task::GraphClassification { 1 } else { width };
            if t.len() < need {
                return Err(Error::Validation(format!(
                    "graph {i} has {} targets, model predicts {need}",
                    t.len()
                )));
            }
            let mut r = t[..need].to_vec();
            if let Some(w) = atomref {
                r[0] -= reference_value(g, w)?;
            }
            raw.push(t[..need].to_vec());
            resid.push(r);
        }
        let mut out = match task {
            Task::GraphClassification => Self::identity(width),
            Task::GraphRegression => {
                let (graph_mean, graph_std) = Self::column_stats(&resid, width);
                let (_, target_std) = Self::column_stats(&raw, width);
                Self {
                    graph_mean,
                    graph_std,
                    target_std,
                    node_scale: 1.0,
                }
            }
        };
        if noise.is_positional() || noise.predict_differences {
            let mut sq = 0.0;
            let mut count = 0usize;
            if noise.predict_differences {
                for g in graphs {
                    if let Some(t) = &g.node_targets {
                        sq += t.data().iter().map(|x| x * x).sum::<f64>();
                        count += t.numel();
                    }
                }
            }
            let delta_ms = if count > 0 { sq / count as f64 } else { 0.0 };
            let ms = delta_ms
                + if noise.is_positional() {
                    noise.sigma * noise.sigma
                } else {
                    0.0
                };
            out.node_scale = if ms > 1e-24 { ms.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    pub fn normalize(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter()
            .zip(self.graph_mean.iter().zip(&self.graph_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.graph_mean.iter().zip(&self.graph_std))
            .map(|(x, (m, s))| x * s + m)
            .collect()
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
    pub ema: Vec<Tensor>,
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub atomref: Option<Vec<f64>>,
    pub normalizer: Normalizer,
}

impl TrainState {
    /// Builds the model and a fresh state, fitting reference energies and
    /// target statistics on `train`.
    pub fn init(model: &ModelConfig, cfg: &TrainConfig, seed: u64, train: &[Graph]) -> Result<(Model, Self)> {
        let mut bad = model.validate();
        bad.extend(cfg.validate(model));
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let built = Model::build(model, &mut params, &mut init_rng)?;
        let atomref = if cfg.use_atomref && cfg.task == Task::GraphRegression {
            Some(fit_atomref(train, 0, model.node_vocab)?)
        } else {
            None
        };
        let normalizer = Normalizer::fit(train, cfg.task, model.graph_out, atomref.as_deref(), &cfg.noise)?;
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let state = Self {
            ema: params.tensors(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            params,
            step: 0,
            rng,
            atomref,
            normalizer,
        };
        Ok((built, state))
    }

    /// The parameter store with EMA values in place of trainable parameters.
    pub fn ema_params(&self) -> ParamStore {
        let mut store = self.params.clone();
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.entry(id).trainable {
                *store.get_mut(id) = self.ema[id.index()].clone();
            }
        }
        store
    }
}

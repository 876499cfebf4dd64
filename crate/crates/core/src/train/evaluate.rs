use std::collections::BTreeMap;

use rand::RngCore;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{batch_indices, BatchLimits, Graph};
use crate::metrics::{self, DEFAULT_THRESHOLD};
use crate::models::Model;
use crate::nn::Ctx;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::atomref::reference_value;
use crate::train::state::{Task, TrainConfig, TrainState};
use crate::train::step::{aux_loss, prepare_batch, primary_loss, AuxTargets};

/// Evaluation never corrupts, so any request for randomness is a bug.
struct NoRng;

impl RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("evaluation drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("evaluation drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("evaluation drew a random number")
    }
}

/// Model outputs on a dataset, on the raw target scale.
#[derive(Clone, Debug, Default)]
pub struct Predictions {
    /// Per graph: predicted targets (regression) or class logits.
    pub graph: Vec<Vec<f64>>,
    /// Per graph: node head output, rescaled to target units.
    pub nodes: Vec<Option<Tensor>>,
    /// Per graph: node latents after the encoder and after every layer.
    pub snapshots: Vec<Vec<Tensor>>,
    /// Sum over batches of `graphs x primary loss`.
    primary_sum: f64,
    aux_sum: f64,
}

fn split_rows(t: &Tensor, counts: &[usize]) -> Vec<Tensor> {
    let c = t.cols();
    let mut start = 0;
    counts
        .iter()
        .map(|&n| {
            let part = Tensor::new([n, c], t.data()[start * c..(start + n) * c].to_vec()).expect("row split");
            start += n;
            part
        })
        .collect()
}

/// Forward passes in evaluation mode with the given parameters.
pub fn predict(
    model: &Model,
    params: &ParamStore,
    state: &TrainState,
    graphs: &[Graph],
    cfg: &TrainConfig,
    limits: BatchLimits,
) -> Result<Predictions> {
    let mut out = Predictions::default();
    for idx in batch_indices(graphs, limits)? {
        let members: Vec<Graph> = idx.iter().map(|&i| graphs[i].clone()).collect();
        let pb = prepare_batch(
            &members,
            model,
            cfg,
            &state.normalizer,
            state.atomref.as_deref(),
            false,
            &mut NoRng,
        )?;
        let tape = Tape::new();
        let cx = Ctx::new(&tape, params, false);
        let res = model.forward(&cx, &pb.batch)?;
        let last = res.last();
        let n_graphs = pb.batch.n_graphs() as f64;
        out.primary_sum += n_graphs * primary_loss(last, &pb)?.item();
        if cfg.noise.lambda > 0.0 {
            if let Some(a) = aux_loss(last, &pb)? {
                out.aux_sum += n_graphs * a.item();
            }
        }
        let g = last
            .graph
            .ok_or_else(|| Error::contract("evaluation needs a graph head"))?
            .value();
        for (k, member) in members.iter().enumerate() {
            let row = g.row(k).to_vec();
            out.graph.push(match cfg.task {
                Task::GraphRegression => {
                    let mut y = state.normalizer.denormalize(&row);
                    if let Some(w) = &state.atomref {
                        y[0] += reference_value(member, w)?;
                    }
                    y
                }
                Task::GraphClassification => row,
            });
        }
        let counts = &pb.batch.node_counts;
        match last.nodes {
            Some(v) => {
                let scale = match &pb.aux {
                    AuxTargets::Nodes(_) if cfg.noise.is_positional() || cfg.noise.predict_differences => {
                        state.normalizer.node_scale
                    }
                    _ => 1.0,
                };
                out.nodes
                    .extend(split_rows(&v.value().scale(scale), counts).into_iter().map(Some));
            }
            None => out.nodes.extend(counts.iter().map(|_| None)),
        }
        let snaps: Vec<Vec<Tensor>> = res
            .latent
            .snapshots
            .iter()
            .map(|s| split_rows(&s.value(), counts))
            .collect();
        for k in 0..counts.len() {
            out.snapshots.push(snaps.iter().map(|layer| layer[k].clone()).collect());
        }
    }
    Ok(out)
}

/// Named metric values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRecord {
    pub metrics: BTreeMap<String, f64>,
}

impl EvalRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Metrics on `graphs` with corruption disabled. With `use_ema` the
/// exponential moving average of the parameters is evaluated.
pub fn evaluate(
    model: &Model,
    state: &TrainState,
    graphs: &[Graph],
    cfg: &TrainConfig,
    limits: BatchLimits,
    use_ema: bool,
) -> Result<EvalRecord> {
    if graphs.is_empty() {
        return Err(Error::UndefinedMetric("evaluation on an empty dataset".into()));
    }
    let ema;
    let params = if use_ema {
        ema = state.ema_params();
        &ema
    } else {
        &state.params
    };
    let p = predict(model, params, state, graphs, cfg, limits)?;
    let n = graphs.len() as f64;
    let mut m = BTreeMap::new();
    m.insert("loss".to_string(), p.primary_sum / n);
    if cfg.noise.lambda > 0.0 {
        m.insert("aux_loss".to_string(), p.aux_sum / n);
    }
    let targets: Vec<&Vec<f64>> = graphs
        .iter()
        .map(|g| {
            g.graph_target
                .as_ref()
                .ok_or_else(|| Error::Validation("graph has no target".into()))
        })
        .collect::<Result<_>>()?;
    match cfg.task {
        Task::GraphRegression => {
            let width = model.config().graph_out;
            let mut maes = Vec::with_capacity(width);
            for k in 0..width {
                let pred: Vec<f64> = p.graph.iter().map(|r| r[k]).collect();
                let tgt: Vec<f64> = targets.iter().map(|t| t[k]).collect();
                maes.push(metrics::mae(&pred, &tgt)?);
                if k == 0 {
                    m.insert("ewt".into(), metrics::within_threshold(&pred, &tgt, DEFAULT_THRESHOLD)?);
                }
            }
            m.insert("mae".into(), maes.iter().sum::<f64>() / width as f64);
            let stds = &state.normalizer.target_std;
            if maes.iter().all(|&x| x > 0.0) {
                m.insert("std_mae".into(), metrics::std_mae(&maes, stds)?);
                m.insert("log_mae".into(), metrics::log_mae(&maes, stds)?);
            }
        }
        Task::GraphClassification => {
            let labels: Vec<usize> = targets.iter().map(|t| t[0] as usize).collect();
            let logits = Tensor::from_rows(&p.graph);
            m.insert("accuracy".into(), metrics::accuracy(&logits, &labels)?);
        }
    }
    if cfg.noise.predict_differences {
        let mut pred = Vec::new();
        let mut tgt = Vec::new();
        for (g, nodes) in graphs.iter().zip(&p.nodes) {
            if let (Some(t), Some(y)) = (&g.node_targets, nodes) {
                tgt.extend((0..t.rows()).map(|i| t.row(i).to_vec()));
                pred.extend((0..y.rows()).map(|i| y.row(i).to_vec()));
            }
        }
        if !pred.is_empty() {
            let (pt, tt) = (Tensor::from_rows(&pred), Tensor::from_rows(&tgt));
            m.insert("node_mae".into(), metrics::mae(pt.data(), tt.data())?);
            m.insert(
                "adwt".into(),
                metrics::within_threshold_rows(&pt, &tt, DEFAULT_THRESHOLD)?,
            );
        }
    }
    Ok(EvalRecord { metrics: m })
}

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{Batch, Graph};
use crate::models::{HeadOutputs, Model, ModelOutput};
use crate::nn::Ctx;
use crate::noise::{compose_loss, corrupt, drop_edge, drop_node, CorruptionContext, NoiseKind, NoiseSpec};
use crate::tensor::Tensor;
use crate::train::atomref::reference_value;
use crate::train::optim::{adam_update, ema_update};
use crate::train::schedule::lr_schedule;
use crate::train::state::{Normalizer, Task, TrainConfig, TrainState};

/// Targets for the auxiliary node loss of a batch.
#[derive(Clone, Debug)]
pub enum AuxTargets {
    None,
    /// Per-node regression targets, already divided by the node scale.
    Nodes(Tensor),
    /// Clean node (and edge) categories.
    Categories {
        nodes: Arc<[usize]>,
        edges: Option<Arc<[usize]>>,
    },
}

/// A batch with its normalized primary targets and auxiliary targets.
#[derive(Clone, Debug)]
pub struct PreparedBatch {
    pub batch: Batch,
    /// `[n_graphs x graph_out]`, normalized.
    pub graph_targets: Option<Tensor>,
    pub graph_labels: Option<Arc<[usize]>>,
    pub aux: AuxTargets,
}

fn aux_kind(noise: &NoiseSpec) -> AuxKind {
    match noise.kind {
        NoiseKind::CategoryFlip => AuxKind::Categories,
        NoiseKind::InputDropout => AuxKind::Features,
        NoiseKind::GaussianPositions | NoiseKind::TrajectoryInterpThenGaussian => AuxKind::Positions,
        NoiseKind::None if noise.predict_differences => AuxKind::Positions,
        NoiseKind::None => AuxKind::None,
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum AuxKind {
    None,
    Positions,
    Categories,
    Features,
}

/// Corrupts (when `training`), attaches denoising targets, applies the
/// structural dropout baselines and batches the graphs.
///
/// Outside training no randomness is drawn.
#[allow(clippy::too_many_arguments)]
pub fn prepare_batch<R: Rng + ?Sized>(
    graphs: &[Graph],
    model: &Model,
    cfg: &TrainConfig,
    normalizer: &Normalizer,
    atomref: Option<&[f64]>,
    training: bool,
    rng: &mut R,
) -> Result<PreparedBatch> {
    let mc = model.config();
    let noise = &cfg.noise;
    let kind = aux_kind(noise);
    let ccx = CorruptionContext {
        node_vocab: mc.node_vocab,
        edge_vocab: mc.edge_vocab,
        cutoff: cfg.cutoff,
    };
    let mut work = Vec::with_capacity(graphs.len());
    for (i, g) in graphs.iter().enumerate() {
        let target = g
            .graph_target
            .clone()
            .ok_or_else(|| Error::Validation(format!("graph {i} has no graph target")))?;
        let rec = corrupt(g, noise, ccx, training, rng)?;
        let mut w = rec.noisy_graph;
        let mut t = target;
        if let (Some(coeffs), Task::GraphRegression) = (atomref, cfg.task) {
            t[0] -= reference_value(g, coeffs)?;
        }
        w.graph_target = Some(t);
        match kind {
            AuxKind::None => w.node_targets = None,
            AuxKind::Positions => {
                let n = g.num_nodes();
                let base = if noise.predict_differences {
                    g.node_targets
                        .clone()
                        .filter(|d| d.shape() == [n, 3])
                        .ok_or_else(|| Error::Validation(format!("graph {i} lacks [n x 3] displacement targets")))?
                } else {
                    Tensor::zeros([n, 3])
                };
                let target = match &rec.per_node_noise {
                    Some(noise) => base.sub(noise)?,
                    None => base,
                };
                w.node_targets = Some(target.scale(1.0 / normalizer.node_scale));
            }
            AuxKind::Categories => {
                let cats: Vec<f64> = g.node_types(0).into_iter().map(|c| c as f64).collect();
                w.node_targets = Some(Tensor::new([g.num_nodes(), 1], cats)?);
                for (e, clean) in w.edges.iter_mut().zip(&g.edges) {
                    e.attr.truncate(1);
                    e.attr.push(clean.attr.first().copied().unwrap_or(0.0));
                }
            }
            AuxKind::Features => w.node_targets = Some(g.node_features.clone()),
        }
        if training && noise.drop_edge_rate > 0.0 {
            w = drop_edge(&w, noise.drop_edge_rate, rng)?;
        }
        if training && noise.drop_node_rate > 0.0 {
            w = drop_node(&w, noise.drop_node_rate, rng)?;
        }
        work.push(w);
    }
    let batch = Batch::from_graphs(&work)?;
    let (graph_targets, graph_labels) = match cfg.task {
        Task::GraphRegression => {
            let rows: Vec<Vec<f64>> = work
                .iter()
                .map(|w| {
                    let t = w.graph_target.as_ref().expect("set above");
                    normalizer.normalize(&t[..mc.graph_out.min(t.len())])
                })
                .collect();
            if rows.iter().any(|r| r.len() != mc.graph_out) {
                return Err(Error::Validation(format!(
                    "graph targets must have {} entries",
                    mc.graph_out
                )));
            }
            (Some(Tensor::from_rows(&rows)), None)
        }
        Task::GraphClassification => {
            let labels: Vec<usize> = work
                .iter()
                .map(|w| w.graph_target.as_ref().expect("set above")[0] as usize)
                .collect();
            if let Some(&bad) = labels.iter().find(|&&l| l >= mc.graph_out) {
                return Err(Error::Index(format!("class {bad} outside {} classes", mc.graph_out)));
            }
            (None, Some(labels.into()))
        }
    };
    let aux = match kind {
        AuxKind::None => AuxTargets::None,
        AuxKind::Positions | AuxKind::Features => {
            AuxTargets::Nodes(batch.node_targets.clone().expect("targets attached to every graph"))
        }
        AuxKind::Categories => {
            let t = batch.node_targets.as_ref().expect("targets attached to every graph");
            let nodes: Vec<usize> = (0..t.rows()).map(|i| t.row(i)[0] as usize).collect();
            let edges = (batch.edge_attr.cols() >= 2).then(|| {
                (0..batch.n_edges())
                    .map(|k| batch.edge_attr.row(k)[1] as usize)
                    .collect::<Vec<_>>()
                    .into()
            });
            AuxTargets::Categories {
                nodes: nodes.into(),
                edges,
            }
        }
    };
    Ok(PreparedBatch {
        batch,
        graph_targets,
        graph_labels,
        aux,
    })
}

fn mse<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} does not match target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    pred.sub(pred.tape().constant(target.clone()))?.square()?.mean()
}

pub(crate) fn primary_loss<'t>(out: &HeadOutputs<'t>, pb: &PreparedBatch) -> Result<Var<'t>> {
    let g = out
        .graph
        .ok_or_else(|| Error::contract("primary loss needs a graph head"))?;
    match (&pb.graph_targets, &pb.graph_labels) {
        (Some(t), _) => mse(g, t),
        (None, Some(labels)) => g.cross_entropy(labels),
        (None, None) => Err(Error::contract("batch has no primary targets")),
    }
}

pub(crate) fn aux_loss<'t>(out: &HeadOutputs<'t>, pb: &PreparedBatch) -> Result<Option<Var<'t>>> {
    let nodes = || {
        out.nodes
            .ok_or_else(|| Error::contract("auxiliary loss needs a node head"))
    };
    Ok(match &pb.aux {
        AuxTargets::None => None,
        AuxTargets::Nodes(t) => Some(mse(nodes()?, t)?),
        AuxTargets::Categories { nodes: labels, edges } => {
            let node_ce = nodes()?.cross_entropy(labels)?;
            match (edges, out.edges) {
                (Some(e), Some(logits)) if !e.is_empty() => Some(node_ce.add(logits.cross_entropy(e)?)?.scale(0.5)?),
                _ => Some(node_ce),
            }
        }
    })
}

/// Scalar losses of one step. `primary` and `aux` refer to the final output
/// group; `total` is what was differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub primary: f64,
    pub aux: f64,
    pub total: f64,
    pub lr: f64,
}

fn latent_norms(out: &ModelOutput<'_>) -> String {
    out.latent
        .snapshots
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let v = s.value();
            let norm = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            format!("layer {k}: |h| = {norm:.4e}")
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Losses of a forward pass averaged over output groups.
pub(crate) fn batch_losses<'t>(
    out: &ModelOutput<'t>,
    pb: &PreparedBatch,
    lambda: f64,
    intermediate: bool,
) -> Result<(Var<'t>, f64, f64)> {
    let groups: &[HeadOutputs<'t>] = if intermediate {
        &out.groups
    } else {
        std::slice::from_ref(out.last())
    };
    let mut total: Option<Var<'t>> = None;
    let (mut last_p, mut last_a) = (0.0, 0.0);
    for h in groups {
        let p = primary_loss(h, pb)?;
        let a = if lambda > 0.0 { aux_loss(h, pb)? } else { None };
        let a = a.unwrap_or_else(|| p.tape().constant(Tensor::scalar(0.0)));
        last_p = p.item();
        last_a = a.item();
        let l = compose_loss(p, a, lambda).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("{m}; {}", latent_norms(out))),
            e => e,
        })?;
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let total = total
        .ok_or_else(|| Error::contract("model produced no outputs"))?
        .scale(1.0 / groups.len() as f64)?;
    Ok((total, last_p, last_a))
}

/// One Noisy Nodes update: corrupt, rebuild edges, forward, weighted
/// primary plus auxiliary loss, backward, Adam, EMA.
pub fn train_step(model: &Model, state: &mut TrainState, graphs: &[Graph], cfg: &TrainConfig) -> Result<LossRecord> {
    let pb = prepare_batch(
        graphs,
        model,
        cfg,
        &state.normalizer,
        state.atomref.as_deref(),
        true,
        &mut state.rng,
    )?;
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &state.params, true);
    let out = model.forward(&cx, &pb.batch).map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("forward pass at step {}: {m}", state.step)),
        e => e,
    })?;
    let (total, primary, aux) = batch_losses(&out, &pb, cfg.noise.lambda, cfg.intermediate_losses)?;
    let grads = tape.backward(total)?.into_params(state.params.len());
    let lr = lr_schedule(state.step, &cfg.schedule);
    adam_update(
        &mut state.params,
        &mut state.adam_m,
        &mut state.adam_v,
        &grads,
        lr,
        state.step + 1,
        &cfg.adam,
    )?;
    for (id, t) in cx.take_running_stats() {
        *state.params.get_mut(id) = t;
    }
    ema_update(&mut state.ema, &state.params, state.step, cfg.ema_decay)?;
    state.step += 1;
    Ok(LossRecord {
        primary,
        aux,
        total: total.item(),
        lr,
    })
}

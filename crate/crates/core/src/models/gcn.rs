use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::models::{HeadOutputs, LatentGraph, ModelConfig, ModelOutput};
use crate::nn::{Ctx, Linear, Mlp};
use crate::params::{uniform, ParamId, ParamStore};

/// Unnormalized neighbour sum `h'_i = sum_{j -> i} h_j W`, plus `h_i` when
/// `residual`. No self loops are added.
pub fn gcn_layer<'t>(
    h: Var<'t>,
    senders: &Arc<[usize]>,
    receivers: &Arc<[usize]>,
    w: Var<'t>,
    residual: bool,
) -> Result<Var<'t>> {
    if w.rows() != w.cols() || w.rows() != h.cols() {
        return Err(Error::dim(format!(
            "gcn weight must be square and match width {}, got {:?}",
            h.cols(),
            w.shape()
        )));
    }
    let agg = h.matmul(w)?.gather_rows(senders)?.segment_sum(receivers, h.rows())?;
    if residual {
        agg.add(h)
    } else {
        Ok(agg)
    }
}

#[derive(Clone, Debug)]
enum GcnInput {
    Embed(ParamId),
    Dense(Linear),
}

/// Graph convolutional network: `h' = [h +] act(sum_{j -> i} h_j W + b)`.
#[derive(Clone, Debug)]
pub struct Gcn {
    pub(crate) config: ModelConfig,
    input: GcnInput,
    pub layers: Vec<Linear>,
    graph_readout: Mlp,
    node_decoder: Mlp,
}

impl Gcn {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let c = config;
        let (l, h, d, act, bn) = (c.latent_dim, c.mlp_hidden, c.mlp_depth, c.activation, c.batch_norm);
        let input = if c.node_vocab > 0 {
            let bound = 1.0 / (l as f64).sqrt();
            GcnInput::Embed(store.add("gcn/embed", uniform(rng, [c.node_vocab, l], bound)))
        } else {
            GcnInput::Dense(Linear::new(store, rng, "gcn/input", c.node_input_dim, l))
        };
        let layers = (0..c.num_layers)
            .map(|k| Linear::new(store, rng, &format!("gcn/layer{k}"), l, l))
            .collect();
        Self {
            config: c.clone(),
            input,
            layers,
            graph_readout: Mlp::new(store, rng, "gcn/readout", l, h, c.graph_out, d, act, bn),
            node_decoder: Mlp::new(store, rng, "gcn/dec/node", l, h, c.node_out, d, act, bn),
        }
    }

    fn embed<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<Var<'t>> {
        match &self.input {
            GcnInput::Embed(table) => {
                let types = batch.node_types(0);
                let vocab = self.config.node_vocab;
                if let Some(&bad) = types.iter().find(|&&t| t >= vocab) {
                    return Err(Error::Index(format!(
                        "node category {bad} outside vocabulary of {vocab}"
                    )));
                }
                cx.p[*table].gather_rows(&types.into())
            }
            GcnInput::Dense(lin) => {
                let x = &batch.node_features;
                if x.cols() != lin.fan_in {
                    return Err(Error::dim(format!(
                        "node features have {} columns, expected {}",
                        x.cols(),
                        lin.fan_in
                    )));
                }
                lin.forward(cx, cx.tape.constant(x.clone()))
            }
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<ModelOutput<'t>> {
        let c = &self.config;
        let mut h = self.embed(cx, batch)?;
        let mut snapshots = vec![h];
        for lin in &self.layers {
            let agg = gcn_layer(h, &batch.senders, &batch.receivers, cx.p[lin.w], false)?;
            let upd = c.activation.apply(agg.add(cx.p[lin.b])?)?;
            h = if c.residual { h.add(upd)? } else { upd };
            snapshots.push(h);
        }
        let graph = if c.heads.graph() {
            let pooled = h.segment_sum(&batch.membership, batch.n_graphs())?;
            Some(self.graph_readout.forward(cx, pooled)?)
        } else {
            None
        };
        let nodes = if c.heads.nodes() {
            Some(self.node_decoder.forward(cx, h)?)
        } else {
            None
        };
        Ok(ModelOutput {
            groups: vec![HeadOutputs {
                graph,
                nodes,
                edges: None,
            }],
            latent: LatentGraph {
                node_latents: h,
                edge_latents: None,
                snapshots,
            },
        })
    }
}

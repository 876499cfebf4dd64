use std::sync::Arc;

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::Batch;
use crate::models::{range_ids, HeadOutputs, LatentGraph, ModelConfig, ModelOutput};
use crate::nn::{Ctx, Mlp};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Message-passing connectivity for a batch, optionally extended with one
/// virtual node per graph linked in both directions to each of its nodes.
#[derive(Clone, Debug)]
pub struct MpnnTopology {
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// Edge category per edge; virtual links use the extra category `edge_vocab`.
    pub edge_types: Arc<[usize]>,
    pub n_real: usize,
    pub n_total: usize,
    pub n_real_edges: usize,
}

impl MpnnTopology {
    pub fn new(batch: &Batch, edge_vocab: usize, virtual_node: bool) -> Result<Self> {
        let n = batch.n_nodes();
        let e = batch.n_edges();
        let mut senders = batch.senders.to_vec();
        let mut receivers = batch.receivers.to_vec();
        let mut types = Vec::with_capacity(e);
        for k in 0..e {
            let t = if batch.edge_attr.cols() > 0 {
                batch.edge_attr.row(k)[0] as usize
            } else {
                0
            };
            if t >= edge_vocab {
                return Err(Error::Index(format!(
                    "edge category {t} outside vocabulary of {edge_vocab}"
                )));
            }
            types.push(t);
        }
        let mut n_total = n;
        if virtual_node {
            n_total += batch.n_graphs();
            for (i, &g) in batch.membership.iter().enumerate() {
                senders.extend([i, n + g]);
                receivers.extend([n + g, i]);
                types.extend([edge_vocab, edge_vocab]);
            }
        }
        Ok(Self {
            senders: senders.into(),
            receivers: receivers.into(),
            edge_types: types.into(),
            n_real: n,
            n_total,
            n_real_edges: e,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }
}

#[derive(Clone, Debug)]
pub struct MpnnLayer {
    /// Message function over `[h_u, h_v, m + m_prev, edge embedding]`.
    pub psi: Mlp,
    /// Update function over `[h, incoming sum, outgoing sum]`.
    pub phi: Mlp,
}

/// One message-passing step:
/// `m'_uv = psi(h_u, h_v, m_uv + m_prev_uv, e_uv)` and
/// `h'_u = phi(h_u, sum of incoming m', sum of outgoing m') + h_u`.
pub fn mpnn_step<'t>(
    cx: &Ctx<'t>,
    layer: &MpnnLayer,
    topo: &MpnnTopology,
    h: Var<'t>,
    m: Var<'t>,
    m_prev: Var<'t>,
    edge_embed: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let e = topo.n_edges();
    if h.rows() != topo.n_total {
        return Err(Error::contract(format!(
            "node state has {} rows, topology has {} nodes",
            h.rows(),
            topo.n_total
        )));
    }
    for (name, v) in [
        ("message", m),
        ("previous message", m_prev),
        ("edge embedding", edge_embed),
    ] {
        if v.rows() != e {
            return Err(Error::contract(format!(
                "{name} state has {} rows, expected {e}",
                v.rows()
            )));
        }
    }
    if m.shape() != m_prev.shape() {
        return Err(Error::contract(format!(
            "message states differ in shape: {:?} vs {:?}",
            m.shape(),
            m_prev.shape()
        )));
    }
    let hs = h.gather_rows(&topo.senders)?;
    let hr = h.gather_rows(&topo.receivers)?;
    let m_new = layer
        .psi
        .forward(cx, cx.tape.concat(&[hs, hr, m.add(m_prev)?, edge_embed])?)?;
    let incoming = m_new.segment_sum(&topo.receivers, topo.n_total)?;
    let outgoing = m_new.segment_sum(&topo.senders, topo.n_total)?;
    let h_new = layer
        .phi
        .forward(cx, cx.tape.concat(&[h, incoming, outgoing])?)?
        .add(h)?;
    Ok((h_new, m_new))
}

/// Message-passing network with per-layer weights and an optional virtual node.
#[derive(Clone, Debug)]
pub struct Mpnn {
    pub(crate) config: ModelConfig,
    node_embed: ParamId,
    edge_embed: ParamId,
    virtual_init: Option<ParamId>,
    pub layers: Vec<MpnnLayer>,
    graph_readout: Mlp,
    node_decoder: Mlp,
    edge_decoder: Option<Mlp>,
}

impl Mpnn {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let c = config;
        let (l, h, d, act, bn) = (c.latent_dim, c.mlp_hidden, c.mlp_depth, c.activation, c.batch_norm);
        let bound = 1.0 / (l as f64).sqrt();
        let node_embed = store.add("mpnn/node_embed", uniform(rng, [c.node_vocab, l], bound));
        let edge_embed = store.add("mpnn/edge_embed", uniform(rng, [c.edge_vocab + 1, l], bound));
        let virtual_init = c
            .virtual_node
            .then(|| store.add("mpnn/virtual", uniform(rng, [1, l], bound)));
        let layers = (0..c.num_layers)
            .map(|k| MpnnLayer {
                psi: Mlp::new(store, rng, &format!("mpnn/layer{k}/psi"), 4 * l, h, l, d, act, bn),
                phi: Mlp::new(store, rng, &format!("mpnn/layer{k}/phi"), 3 * l, h, l, d, act, bn),
            })
            .collect();
        let graph_readout = Mlp::new(store, rng, "mpnn/readout", l, h, c.graph_out, d, act, bn);
        let node_decoder = Mlp::new(store, rng, "mpnn/dec/node", l, h, c.node_out, d, act, bn);
        let edge_decoder =
            (c.edge_vocab > 0).then(|| Mlp::new(store, rng, "mpnn/dec/edge", l, h, c.edge_vocab, d, act, bn));
        Self {
            config: c.clone(),
            node_embed,
            edge_embed,
            virtual_init,
            layers,
            graph_readout,
            node_decoder,
            edge_decoder,
        }
    }

    pub fn topology(&self, batch: &Batch) -> Result<MpnnTopology> {
        MpnnTopology::new(batch, self.config.edge_vocab, self.config.virtual_node)
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<ModelOutput<'t>> {
        let c = &self.config;
        let topo = self.topology(batch)?;
        let types = batch.node_types(0);
        if let Some(&bad) = types.iter().find(|&&t| t >= c.node_vocab) {
            return Err(Error::Index(format!(
                "node category {bad} outside vocabulary of {}",
                c.node_vocab
            )));
        }
        let mut h = cx.p[self.node_embed].gather_rows(&types.into())?;
        if let Some(vn) = self.virtual_init {
            let copies: Arc<[usize]> = vec![0; batch.n_graphs()].into();
            let vns = cx.p[vn].gather_rows(&copies)?;
            h = cx.tape.stack_rows(&[h, vns])?;
        }
        let edge_embed = cx.p[self.edge_embed].gather_rows(&topo.edge_types)?;
        let zeros = cx.tape.constant(Tensor::zeros([topo.n_edges(), c.latent_dim]));
        let (mut m, mut m_prev) = (zeros, zeros);
        let real = range_ids(0, topo.n_real);
        let real_nodes = |h: Var<'t>| if c.virtual_node { h.gather_rows(&real) } else { Ok(h) };
        let mut snapshots = vec![real_nodes(h)?];
        for layer in &self.layers {
            let (h2, m2) = mpnn_step(cx, layer, &topo, h, m, m_prev, edge_embed)?;
            h = h2;
            m_prev = m;
            m = m2;
            snapshots.push(real_nodes(h)?);
        }
        let node_latents = *snapshots.last().expect("snapshot list is nonempty");
        let real_edges = if c.virtual_node {
            m.gather_rows(&range_ids(0, topo.n_real_edges))?
        } else {
            m
        };
        let graph = if c.heads.graph() {
            let pooled = node_latents.segment_sum(&batch.membership, batch.n_graphs())?;
            Some(self.graph_readout.forward(cx, pooled)?)
        } else {
            None
        };
        let (nodes, edges) = if c.heads.nodes() {
            let edges = match &self.edge_decoder {
                Some(dec) => Some(dec.forward(cx, real_edges)?),
                None => None,
            };
            (Some(self.node_decoder.forward(cx, node_latents)?), edges)
        } else {
            (None, None)
        };
        Ok(ModelOutput {
            groups: vec![HeadOutputs { graph, nodes, edges }],
            latent: LatentGraph {
                node_latents,
                edge_latents: Some(real_edges),
                snapshots,
            },
        })
    }
}

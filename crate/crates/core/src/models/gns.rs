use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::featurize::{cell_invariants, edge_features, row3, sub3, AtomEmbedding};
use crate::graph::Batch;
use crate::models::{HeadOutputs, LatentGraph, ModelConfig, ModelOutput};
use crate::nn::{Ctx, Linear, Mlp};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
struct ProcessorLayer {
    edge_mlp: Mlp,
    node_mlp: Mlp,
}

/// Encode-process-decode graph network over 3D point clouds.
///
/// Processor weights come in `group_size` sets; layer `k` uses set
/// `k % group_size`, so depth can grow without adding parameters. Both
/// decoders are shared by every group boundary.
#[derive(Clone, Debug)]
pub struct Gns {
    pub(crate) config: ModelConfig,
    embed: AtomEmbedding,
    node_encoder: Mlp,
    edge_encoder: Mlp,
    layers: Vec<ProcessorLayer>,
    enc_readout: Mlp,
    enc_linear: Linear,
    proc_readout: Mlp,
    proc_linear: Linear,
    node_decoder: Mlp,
    reference: Option<Mlp>,
}

impl Gns {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let c = config;
        let (l, h, d, act, bn) = (c.latent_dim, c.mlp_hidden, c.mlp_depth, c.activation, c.batch_norm);
        let fs = &c.featurize;
        let embed = AtomEmbedding::new(store, rng, "gns/embed", c.node_vocab, c.num_flags, fs.embed_dim);
        let node_in = fs.embed_dim + if fs.use_fractional { 6 } else { 0 };
        let node_encoder = Mlp::new(store, rng, "gns/enc/node", node_in, h, l, d, act, bn);
        let edge_encoder = Mlp::new(store, rng, "gns/enc/edge", fs.edge_dim(), h, l, d, act, bn);
        let layers = (0..c.group_size())
            .map(|g| ProcessorLayer {
                edge_mlp: Mlp::new(store, rng, &format!("gns/proc/{g}/edge"), 3 * l, h, l, d, act, bn),
                node_mlp: Mlp::new(store, rng, &format!("gns/proc/{g}/node"), 2 * l, h, l, d, act, bn),
            })
            .collect();
        let enc_readout = Mlp::new(store, rng, "gns/dec/enc_mlp", l, h, l, d, act, bn);
        let enc_linear = Linear::new(store, rng, "gns/dec/enc_linear", l, c.graph_out);
        let proc_readout = Mlp::new(store, rng, "gns/dec/proc_mlp", l, h, l, d, act, bn);
        let proc_linear = Linear::new(store, rng, "gns/dec/proc_linear", l, c.graph_out);
        let node_decoder = Mlp::new(store, rng, "gns/dec/node", l, h, c.node_out, d, act, bn);
        let reference = c
            .reference_energy
            .then(|| Mlp::new(store, rng, "gns/reference", c.node_vocab, h, c.graph_out, d, act, false));
        Self {
            config: c.clone(),
            embed,
            node_encoder,
            edge_encoder,
            layers,
            enc_readout,
            enc_linear,
            proc_readout,
            proc_linear,
            node_decoder,
            reference,
        }
    }

    /// Number of distinct processor parameter sets.
    pub fn num_layer_sets(&self) -> usize {
        self.layers.len()
    }

    fn node_flags(&self, batch: &Batch) -> Result<Tensor> {
        let nf = self.config.num_flags;
        if batch.node_features.cols() < 1 + nf {
            return Err(Error::dim(format!(
                "node features have {} columns, need type + {nf} flags",
                batch.node_features.cols()
            )));
        }
        let mut data = Vec::with_capacity(batch.n_nodes() * nf);
        for i in 0..batch.n_nodes() {
            data.extend_from_slice(&batch.node_features.row(i)[1..1 + nf]);
        }
        Tensor::new([batch.n_nodes(), nf], data)
    }

    /// Featurized edge inputs, `[|E| x (num_rbf + 3)]`.
    pub fn edge_inputs(&self, batch: &Batch) -> Result<Tensor> {
        let pos = batch
            .positions
            .as_ref()
            .ok_or_else(|| Error::contract("graph net simulator needs node positions"))?;
        let spec = &self.config.featurize;
        let mut data = Vec::with_capacity(batch.n_edges() * spec.edge_dim());
        for k in 0..batch.n_edges() {
            let d = sub3(row3(pos, batch.receivers[k]), row3(pos, batch.senders[k]));
            let cell = batch.cells[batch.edge_membership[k]];
            data.extend(edge_features(d, spec, cell.as_ref())?);
        }
        Tensor::new([batch.n_edges(), spec.edge_dim()], data)
    }

    pub fn encode<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<LatentGraph<'t>> {
        let edge_in = self.edge_inputs(batch)?;
        let types = batch.node_types(0);
        let mut node_in = self.embed.forward(cx, &types, &self.node_flags(batch)?)?;
        if self.config.featurize.use_fractional {
            let mut inv = Vec::with_capacity(batch.n_nodes() * 6);
            for &g in batch.membership.iter() {
                let cell =
                    batch.cells[g].ok_or_else(|| Error::contract("fractional featurization needs a unit cell"))?;
                inv.extend(cell_invariants(&cell));
            }
            let inv = cx.tape.constant(Tensor::new([batch.n_nodes(), 6], inv)?);
            node_in = cx.tape.concat(&[node_in, inv])?;
        }
        let h = self.node_encoder.forward(cx, node_in)?;
        let e = self.edge_encoder.forward(cx, cx.tape.constant(edge_in))?;
        Ok(LatentGraph {
            node_latents: h,
            edge_latents: Some(e),
            snapshots: vec![h],
        })
    }

    /// One interaction-network layer with residual node and edge updates.
    fn layer<'t>(
        &self,
        cx: &Ctx<'t>,
        set: &ProcessorLayer,
        batch: &Batch,
        h: Var<'t>,
        e: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let hs = h.gather_rows(&batch.senders)?;
        let hr = h.gather_rows(&batch.receivers)?;
        let e = e.add(set.edge_mlp.forward(cx, cx.tape.concat(&[e, hs, hr])?)?)?;
        let agg = e.segment_sum(&batch.receivers, batch.n_nodes())?;
        let h = h.add(set.node_mlp.forward(cx, cx.tape.concat(&[h, agg])?)?)?;
        Ok((h, e))
    }

    /// Runs all processor layers. `on_group` is called with the latent graph
    /// after every complete group of `group_size` layers.
    pub fn process<'t>(
        &self,
        cx: &Ctx<'t>,
        batch: &Batch,
        mut latent: LatentGraph<'t>,
        mut on_group: impl FnMut(&LatentGraph<'t>) -> Result<()>,
    ) -> Result<LatentGraph<'t>> {
        let g = self.layers.len();
        if g == 0 || !self.config.num_layers.is_multiple_of(g) {
            return Err(Error::contract(format!(
                "{} layer parameter sets cannot tile {} layers",
                g, self.config.num_layers
            )));
        }
        let mut e = latent
            .edge_latents
            .ok_or_else(|| Error::contract("processor needs edge latents"))?;
        let mut h = latent.node_latents;
        for k in 0..self.config.num_layers {
            (h, e) = self.layer(cx, &self.layers[k % g], batch, h, e)?;
            latent.snapshots.push(h);
            latent.node_latents = h;
            latent.edge_latents = Some(e);
            if (k + 1) % g == 0 {
                on_group(&latent)?;
            }
        }
        Ok(latent)
    }

    fn encoder_term<'t>(&self, cx: &Ctx<'t>, batch: &Batch, latent: &LatentGraph<'t>) -> Result<Var<'t>> {
        let pooled = self
            .enc_readout
            .forward(cx, latent.snapshots[0])?
            .segment_sum(&batch.membership, batch.n_graphs())?;
        let mut y = self.enc_linear.forward(cx, pooled)?;
        if let Some(reference) = &self.reference {
            y = y.add(self.reference_energy(cx, reference, batch)?)?;
        }
        Ok(y)
    }

    /// Learned per-graph baseline: an MLP over one-hot atom types summed
    /// per graph. `None` unless the model was built with it.
    pub fn reference<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<Option<Var<'t>>> {
        self.reference
            .as_ref()
            .map(|mlp| self.reference_energy(cx, mlp, batch))
            .transpose()
    }

    fn reference_energy<'t>(&self, cx: &Ctx<'t>, mlp: &Mlp, batch: &Batch) -> Result<Var<'t>> {
        let vocab = self.config.node_vocab;
        let mut onehot = Tensor::zeros([batch.n_nodes(), vocab]);
        for (i, t) in batch.node_types(0).into_iter().enumerate() {
            if t >= vocab {
                return Err(Error::Index(format!("atom type {t} outside vocabulary of {vocab}")));
            }
            onehot.row_mut(i)[t] = 1.0;
        }
        mlp.forward(cx, cx.tape.constant(onehot))?
            .segment_sum(&batch.membership, batch.n_graphs())
    }

    /// Graph-level decoder: two sum-pooled branches, one over encoder latents
    /// and one over the given processor latents, each through an MLP and a
    /// linear map with bias.
    pub fn decode_graph<'t>(
        &self,
        cx: &Ctx<'t>,
        batch: &Batch,
        proc_latents: Var<'t>,
        encoder_term: Var<'t>,
    ) -> Result<Var<'t>> {
        let pooled = self
            .proc_readout
            .forward(cx, proc_latents)?
            .segment_sum(&batch.membership, batch.n_graphs())?;
        self.proc_linear.forward(cx, pooled)?.add(encoder_term)
    }

    /// Per-node 3-vector prediction from processor latents.
    pub fn decode_nodes<'t>(&self, cx: &Ctx<'t>, proc_latents: Var<'t>) -> Result<Var<'t>> {
        self.node_decoder.forward(cx, proc_latents)
    }

    fn decode<'t>(
        &self,
        cx: &Ctx<'t>,
        batch: &Batch,
        proc_latents: Var<'t>,
        encoder_term: Option<Var<'t>>,
    ) -> Result<HeadOutputs<'t>> {
        let heads = self.config.heads;
        Ok(HeadOutputs {
            graph: match encoder_term {
                Some(t) if heads.graph() => Some(self.decode_graph(cx, batch, proc_latents, t)?),
                _ => None,
            },
            nodes: if heads.nodes() {
                Some(self.decode_nodes(cx, proc_latents)?)
            } else {
                None
            },
            edges: None,
        })
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<ModelOutput<'t>> {
        let latent = self.encode(cx, batch)?;
        let enc_term = if self.config.heads.graph() {
            Some(self.encoder_term(cx, batch, &latent)?)
        } else {
            None
        };
        let mut groups = Vec::with_capacity(self.config.num_groups());
        let latent = self.process(cx, batch, latent, |lg| {
            groups.push(self.decode(cx, batch, lg.node_latents, enc_term)?);
            Ok(())
        })?;
        Ok(ModelOutput { groups, latent })
    }
}

/// Decodes the latents at every group boundary with the shared decoders and
/// scores each against the same targets. Returns one loss per group, in
/// depth order; the last one is the final-layer loss.
pub fn gns_intermediate_losses<'t, F>(
    model: &Gns,
    cx: &Ctx<'t>,
    batch: &Batch,
    latent: &LatentGraph<'t>,
    loss_fn: F,
) -> Result<Vec<Var<'t>>>
where
    F: Fn(&HeadOutputs<'t>) -> Result<Var<'t>>,
{
    let g = model.config.group_size();
    if g == 0 || !model.config.num_layers.is_multiple_of(g) {
        return Err(Error::contract("group size must divide the layer count"));
    }
    if latent.snapshots.len() != model.config.num_layers + 1 {
        return Err(Error::contract(format!(
            "expected {} snapshots, got {}",
            model.config.num_layers + 1,
            latent.snapshots.len()
        )));
    }
    let enc_term = if model.config.heads.graph() {
        Some(model.encoder_term(cx, batch, latent)?)
    } else {
        None
    };
    (1..=model.config.num_layers / g)
        .map(|k| {
            let out = model.decode(cx, batch, latent.snapshots[k * g], enc_term)?;
            loss_fn(&out)
        })
        .collect()
}

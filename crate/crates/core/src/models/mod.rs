//! The three architectures: an encode-process-decode graph net simulator
//! with grouped processor weights, a message-passing network with an
//! optional virtual node, and a residual graph convolutional network.

mod gcn;
mod gns;
mod mpnn;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::featurize::FeaturizeSpec;
use crate::graph::Batch;
use crate::nn::{Activation, Ctx};
use crate::params::ParamStore;

pub use gcn::{gcn_layer, Gcn};
pub use gns::{gns_intermediate_losses, Gns};
pub use mpnn::{mpnn_step, Mpnn, MpnnTopology};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Gns,
    MpnnVn,
    Gcn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heads {
    GraphScalar,
    NodeVector,
    #[default]
    Both,
}

impl Heads {
    pub fn graph(self) -> bool {
        matches!(self, Heads::GraphScalar | Heads::Both)
    }

    pub fn nodes(self) -> bool {
        matches!(self, Heads::NodeVector | Heads::Both)
    }
}

fn d_layers() -> usize {
    3
}
fn d_latent() -> usize {
    16
}
fn d_depth() -> usize {
    2
}
fn d_one() -> usize {
    1
}
fn d_three() -> usize {
    3
}
fn d_vocab() -> usize {
    4
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    #[serde(default = "d_layers")]
    pub num_layers: usize,
    /// Processor layers `k` and `k + group_size` share weights. Defaults to
    /// `num_layers` (no sharing). Only used by the graph net simulator.
    #[serde(default)]
    pub group_size: Option<usize>,
    #[serde(default = "d_latent")]
    pub latent_dim: usize,
    #[serde(default = "d_latent")]
    pub mlp_hidden: usize,
    #[serde(default = "d_depth")]
    pub mlp_depth: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub heads: Heads,
    /// Width of the graph-level output (classes for classification).
    #[serde(default = "d_one")]
    pub graph_out: usize,
    /// Width of the node-level regression output.
    #[serde(default = "d_three")]
    pub node_out: usize,
    /// Number of atom types / node categories in column 0 of the node features.
    #[serde(default = "d_vocab")]
    pub node_vocab: usize,
    /// Number of edge categories in the first edge attribute (message passing only).
    #[serde(default)]
    pub edge_vocab: usize,
    /// Binary per-node flags following the type column.
    #[serde(default)]
    pub num_flags: usize,
    /// Raw input width for the convolutional network when `node_vocab` is 0.
    #[serde(default)]
    pub node_input_dim: usize,
    #[serde(default)]
    pub virtual_node: bool,
    #[serde(default)]
    pub batch_norm: bool,
    #[serde(default)]
    pub reference_energy: bool,
    #[serde(default = "d_true")]
    pub residual: bool,
    #[serde(default)]
    pub featurize: FeaturizeSpec,
}

impl ModelConfig {
    pub fn new(arch: Arch) -> Self {
        Self {
            arch,
            num_layers: d_layers(),
            group_size: None,
            latent_dim: d_latent(),
            mlp_hidden: d_latent(),
            mlp_depth: d_depth(),
            activation: Activation::default(),
            heads: Heads::default(),
            graph_out: 1,
            node_out: 3,
            node_vocab: d_vocab(),
            edge_vocab: 0,
            num_flags: 0,
            node_input_dim: 0,
            virtual_node: arch == Arch::MpnnVn,
            batch_norm: false,
            reference_energy: false,
            residual: true,
            featurize: FeaturizeSpec::default(),
        }
    }

    pub fn group_size(&self) -> usize {
        self.group_size.unwrap_or(self.num_layers)
    }

    pub fn num_groups(&self) -> usize {
        match self.arch {
            Arch::Gns => self.num_layers / self.group_size().max(1),
            _ => 1,
        }
    }

    /// Every violated constraint, as `field: reason`.
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.num_layers < 1 {
            bad.push("model.num_layers: must be at least 1".into());
        }
        if self.arch == Arch::Gns {
            let g = self.group_size();
            if g == 0 || !self.num_layers.is_multiple_of(g) {
                bad.push(format!(
                    "model.group_size: {g} does not divide num_layers {}",
                    self.num_layers
                ));
            }
        }
        if self.latent_dim < 1 || self.mlp_hidden < 1 || self.mlp_depth < 1 {
            bad.push("model: latent_dim, mlp_hidden and mlp_depth must be positive".into());
        }
        if self.graph_out < 1 {
            bad.push("model.graph_out: must be at least 1".into());
        }
        match self.arch {
            Arch::Gns | Arch::MpnnVn if self.node_vocab < 1 => {
                bad.push("model.node_vocab: must be at least 1".into());
            }
            Arch::MpnnVn if self.edge_vocab < 1 => {
                bad.push("model.edge_vocab: must be at least 1 for mpnn_vn".into());
            }
            Arch::Gcn if self.node_vocab == 0 && self.node_input_dim == 0 => {
                bad.push("model.node_input_dim: needed when node_vocab is 0".into());
            }
            _ => {}
        }
        bad.extend(self.featurize.validate());
        bad
    }
}

/// Node and edge latents after the processor, plus the node latents
/// recorded after the encoder and after every processor layer.
#[derive(Clone, Debug)]
pub struct LatentGraph<'t> {
    pub node_latents: Var<'t>,
    pub edge_latents: Option<Var<'t>>,
    pub snapshots: Vec<Var<'t>>,
}

/// Decoder outputs at one group boundary.
#[derive(Clone, Debug, Default)]
pub struct HeadOutputs<'t> {
    /// `[n_graphs x graph_out]`
    pub graph: Option<Var<'t>>,
    /// `[n_nodes x node_out]` (or class logits)
    pub nodes: Option<Var<'t>>,
    /// `[n_edges x edge_vocab]` class logits
    pub edges: Option<Var<'t>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'t> {
    /// One entry per weight group; the last is the final output.
    pub groups: Vec<HeadOutputs<'t>>,
    pub latent: LatentGraph<'t>,
}

impl<'t> ModelOutput<'t> {
    pub fn last(&self) -> &HeadOutputs<'t> {
        self.groups.last().expect("at least one output group")
    }

    pub fn graph(&self) -> Option<Var<'t>> {
        self.last().graph
    }

    pub fn nodes(&self) -> Option<Var<'t>> {
        self.last().nodes
    }

    pub fn edges(&self) -> Option<Var<'t>> {
        self.last().edges
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Gns(Gns),
    Mpnn(Mpnn),
    Gcn(Gcn),
}

impl Model {
    /// Allocates and initializes parameters in `store`.
    pub fn build<R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let bad = config.validate();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        Ok(match config.arch {
            Arch::Gns => Model::Gns(Gns::new(config, store, rng)),
            Arch::MpnnVn => Model::Mpnn(Mpnn::new(config, store, rng)),
            Arch::Gcn => Model::Gcn(Gcn::new(config, store, rng)),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Gns(m) => &m.config,
            Model::Mpnn(m) => &m.config,
            Model::Gcn(m) => &m.config,
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, batch: &Batch) -> Result<ModelOutput<'t>> {
        match self {
            Model::Gns(m) => m.forward(cx, batch),
            Model::Mpnn(m) => m.forward(cx, batch),
            Model::Gcn(m) => m.forward(cx, batch),
        }
    }
}

pub(crate) fn range_ids(start: usize, end: usize) -> std::sync::Arc<[usize]> {
    (start..end).collect::<Vec<_>>().into()
}

//! Graph corruption for Noisy Nodes, target correction, the weighted
//! auxiliary loss, and the DropEdge / DropNode baselines.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::graph::{recompute_edges, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    GaussianPositions,
    TrajectoryInterpThenGaussian,
    CategoryFlip,
    InputDropout,
    #[default]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation of the position noise, in length units.
    pub sigma: f64,
    pub flip_rate: f64,
    pub dropout_rate: f64,
    /// Weight of the auxiliary node loss.
    pub lambda: f64,
    /// Regress corrected displacements `delta - noise` instead of the clean input.
    pub predict_differences: bool,
    pub drop_edge_rate: f64,
    pub drop_node_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma: 0.0,
            flip_rate: 0.0,
            dropout_rate: 0.0,
            lambda: 0.0,
            predict_differences: false,
            drop_edge_rate: 0.0,
            drop_node_rate: 0.0,
        }
    }
}

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn gaussian(sigma: f64, lambda: f64) -> Self {
        Self {
            kind: NoiseKind::GaussianPositions,
            sigma,
            lambda,
            ..Self::default()
        }
    }

    pub fn is_positional(&self) -> bool {
        matches!(
            self.kind,
            NoiseKind::GaussianPositions | NoiseKind::TrajectoryInterpThenGaussian
        )
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            bad.push(format!("noise.sigma: must be finite and >= 0, got {}", self.sigma));
        }
        if !in_unit(self.flip_rate) {
            bad.push(format!("noise.flip_rate: must lie in [0, 1], got {}", self.flip_rate));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bad.push(format!(
                "noise.dropout_rate: must lie in [0, 1), got {}",
                self.dropout_rate
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            bad.push(format!("noise.lambda: must be finite and >= 0, got {}", self.lambda));
        }
        if !in_unit(self.drop_edge_rate) {
            bad.push(format!(
                "noise.drop_edge_rate: must lie in [0, 1], got {}",
                self.drop_edge_rate
            ));
        }
        if !(0.0..1.0).contains(&self.drop_node_rate) {
            bad.push(format!(
                "noise.drop_node_rate: must lie in [0, 1), got {}",
                self.drop_node_rate
            ));
        }
        bad
    }
}

/// A corrupted graph and what is needed to build its denoising targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRecord {
    pub noisy_graph: Graph,
    /// `noisy positions - input positions`, for positional noise.
    pub per_node_noise: Option<Tensor>,
    pub node_flips: Option<Vec<bool>>,
    pub edge_flips: Option<Vec<bool>>,
    /// Input displacement targets corrected for the noise, `delta - noise`.
    pub corrected_node_targets: Option<Tensor>,
}

impl CorruptionRecord {
    pub fn clean(graph: &Graph) -> Self {
        Self {
            noisy_graph: graph.clone(),
            per_node_noise: None,
            node_flips: None,
            edge_flips: None,
            corrected_node_targets: None,
        }
    }
}

/// Elementwise `delta - noise`.
pub fn adjust_target(delta: &Tensor, per_node_noise: &Tensor) -> Result<Tensor> {
    if delta.shape() != per_node_noise.shape() {
        return Err(Error::dim(format!(
            "target shape {:?} does not match noise shape {:?}",
            delta.shape(),
            per_node_noise.shape()
        )));
    }
    delta.sub(per_node_noise)
}

fn with_positions(graph: &Graph, noisy: Tensor, cutoff: Option<f64>) -> Result<(Graph, Tensor)> {
    let clean = graph.positions_ref()?;
    let noise = noisy.sub(clean)?;
    let mut out = graph.clone();
    if let Some(c) = cutoff {
        out.edges = recompute_edges(&noisy, c)?;
    }
    out.positions = Some(noisy);
    Ok((out, noise))
}

fn positional_record(graph: &Graph, noisy: Graph, noise: Tensor) -> Result<CorruptionRecord> {
    let corrected = match &graph.node_targets {
        Some(t) if t.shape() == noise.shape() => Some(adjust_target(t, &noise)?),
        _ => None,
    };
    Ok(CorruptionRecord {
        noisy_graph: noisy,
        per_node_noise: Some(noise),
        node_flips: None,
        edge_flips: None,
        corrected_node_targets: corrected,
    })
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every position coordinate. Edges are
/// rebuilt from the noisy positions when `cutoff` is given.
pub fn gaussian_corrupt<R: Rng + ?Sized>(
    graph: &Graph,
    sigma: f64,
    cutoff: Option<f64>,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let clean = graph.positions_ref()?;
    if sigma == 0.0 {
        return positional_record(graph, graph.clone(), Tensor::zeros(clean.shape()));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
    let mut noisy = clean.clone();
    noisy.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    let (noisy_graph, noise) = with_positions(graph, noisy, cutoff)?;
    positional_record(graph, noisy_graph, noise)
}

/// `v_init + gamma * (v_final - v_init)`.
pub fn interpolate_positions(v_init: &Tensor, v_final: &Tensor, gamma: f64) -> Result<Tensor> {
    if v_init.shape() != v_final.shape() {
        return Err(Error::contract(format!(
            "initial positions {:?} and final positions {:?} differ in shape",
            v_init.shape(),
            v_final.shape()
        )));
    }
    v_init.zip_map(v_final, |a, b| a + gamma * (b - a))
}

/// Jumps the whole configuration to a uniformly random point on the segment
/// between its initial and final positions.
pub fn trajectory_interpolate<R: Rng + ?Sized>(v_init: &Tensor, v_final: &Tensor, rng: &mut R) -> Result<Tensor> {
    if v_init.shape() != v_final.shape() {
        return interpolate_positions(v_init, v_final, 0.0);
    }
    let gamma: f64 = rng.random();
    interpolate_positions(v_init, v_final, gamma)
}

/// Interpolation towards the relaxed structure followed by Gaussian noise.
/// The graph's node targets hold the displacement to the relaxed positions.
pub fn trajectory_corrupt<R: Rng + ?Sized>(
    graph: &Graph,
    sigma: f64,
    cutoff: Option<f64>,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::domain(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let init = graph.positions_ref()?;
    let delta = graph
        .node_targets
        .as_ref()
        .ok_or_else(|| Error::contract("trajectory interpolation needs displacement targets"))?;
    let fin = init.add(delta)?;
    let mid = trajectory_interpolate(init, &fin, rng)?;
    let mut noisy = mid;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::domain(e.to_string()))?;
        noisy.data_mut().iter_mut().for_each(|x| *x += normal.sample(rng));
    }
    let (noisy_graph, noise) = with_positions(graph, noisy, cutoff)?;
    positional_record(graph, noisy_graph, noise)
}

/// Resamples each entry with probability `rate` to a different category,
/// uniformly. Returns the noisy ids and the flip mask; the input is the
/// reconstruction target.
pub fn flip_categories<R: Rng + ?Sized>(
    ids: &[usize],
    vocab: usize,
    rate: f64,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if !in_unit(rate) {
        return Err(Error::domain(format!("flip rate must lie in [0, 1], got {rate}")));
    }
    if let Some(&bad) = ids.iter().find(|&&c| c >= vocab) {
        return Err(Error::Index(format!("category {bad} outside vocabulary of {vocab}")));
    }
    if rate == 0.0 {
        return Ok((ids.to_vec(), vec![false; ids.len()]));
    }
    if vocab < 2 {
        return Err(Error::domain("cannot flip categories of a one-symbol vocabulary"));
    }
    let mut out = Vec::with_capacity(ids.len());
    let mut mask = Vec::with_capacity(ids.len());
    for &c in ids {
        if rng.random_bool(rate) {
            let r = rng.random_range(0..vocab - 1);
            out.push(if r >= c { r + 1 } else { r });
            mask.push(true);
        } else {
            out.push(c);
            mask.push(false);
        }
    }
    Ok((out, mask))
}

/// Flips node categories (feature column 0) and edge categories (attribute 0).
pub fn category_flip_corrupt<R: Rng + ?Sized>(
    graph: &Graph,
    node_vocab: usize,
    edge_vocab: usize,
    rate: f64,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    let (nodes, node_mask) = flip_categories(&graph.node_types(0), node_vocab, rate, rng)?;
    let edge_ids: Vec<usize> = graph
        .edges
        .iter()
        .map(|e| e.attr.first().copied().unwrap_or(0.0) as usize)
        .collect();
    let has_edge_cats = graph.edges.iter().all(|e| !e.attr.is_empty()) && edge_vocab > 0;
    let (edges, edge_mask) = if has_edge_cats {
        flip_categories(&edge_ids, edge_vocab, rate, rng)?
    } else {
        (edge_ids, vec![false; graph.num_edges()])
    };
    let mut noisy = graph.clone();
    for (i, c) in nodes.into_iter().enumerate() {
        noisy.node_features.row_mut(i)[0] = c as f64;
    }
    if has_edge_cats {
        for (e, c) in noisy.edges.iter_mut().zip(edges) {
            e.attr[0] = c as f64;
        }
    }
    Ok(CorruptionRecord {
        noisy_graph: noisy,
        per_node_noise: None,
        node_flips: Some(node_mask),
        edge_flips: Some(edge_mask),
        corrected_node_targets: None,
    })
}

/// Inverted dropout: zero each entry with probability `rate`, scale the rest
/// by `1 / (1 - rate)`.
pub fn input_dropout<R: Rng + ?Sized>(features: &Tensor, rate: f64, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if rate == 0.0 {
        return Ok(features.clone());
    }
    let keep = 1.0 / (1.0 - rate);
    let mut out = features.clone();
    for x in out.data_mut() {
        *x = if rng.random_bool(rate) { 0.0 } else { *x * keep };
    }
    Ok(out)
}

/// Removes each directed edge independently with probability `rate`.
pub fn drop_edge<R: Rng + ?Sized>(graph: &Graph, rate: f64, rng: &mut R) -> Result<Graph> {
    if !in_unit(rate) {
        return Err(Error::domain(format!("drop edge rate must lie in [0, 1], got {rate}")));
    }
    let mut out = graph.clone();
    if rate > 0.0 {
        out.edges.retain(|_| !rng.random_bool(rate));
    }
    Ok(out)
}

/// Keeps the listed nodes (ascending), the edges between them, and their
/// targets, with indices compacted.
pub fn subgraph(graph: &Graph, keep: &[usize]) -> Result<Graph> {
    let n = graph.num_nodes();
    let mut new_index = vec![usize::MAX; n];
    for (new, &old) in keep.iter().enumerate() {
        if old >= n {
            return Err(Error::Index(format!("node {old} outside 0..{n}")));
        }
        new_index[old] = new;
    }
    let rows = |t: &Tensor| Tensor::from_rows(&keep.iter().map(|&i| t.row(i)).collect::<Vec<_>>());
    let mut out = graph.clone();
    out.node_features = if keep.is_empty() {
        Tensor::zeros([0, graph.node_features.cols()])
    } else {
        rows(&graph.node_features)
    };
    out.positions = graph.positions.as_ref().map(rows);
    out.node_targets = graph.node_targets.as_ref().map(rows);
    out.edges = graph
        .edges
        .iter()
        .filter(|e| new_index[e.sender] != usize::MAX && new_index[e.receiver] != usize::MAX)
        .map(|e| {
            let mut e = e.clone();
            e.sender = new_index[e.sender];
            e.receiver = new_index[e.receiver];
            e
        })
        .collect();
    Ok(out)
}

/// Removes each node independently with probability `rate` along with its
/// incident edges. If every node is dropped the draw is repeated once.
pub fn drop_node<R: Rng + ?Sized>(graph: &Graph, rate: f64, rng: &mut R) -> Result<Graph> {
    if !in_unit(rate) {
        return Err(Error::domain(format!("drop node rate must lie in [0, 1], got {rate}")));
    }
    if rate == 0.0 {
        return Ok(graph.clone());
    }
    for _ in 0..2 {
        let keep: Vec<usize> = (0..graph.num_nodes()).filter(|_| !rng.random_bool(rate)).collect();
        if !keep.is_empty() {
            return subgraph(graph, &keep);
        }
    }
    Err(Error::Generation(format!(
        "drop node removed all {} nodes twice in a row",
        graph.num_nodes()
    )))
}

/// `primary + lambda * aux`.
pub fn compose_loss<'t>(primary: Var<'t>, aux: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let (p, a) = (primary.item(), aux.item());
    if !p.is_finite() || !a.is_finite() || !lambda.is_finite() {
        return Err(Error::Numeric(format!(
            "cannot compose losses primary={p}, aux={a}, lambda={lambda}"
        )));
    }
    primary.add(aux.scale(lambda)?)
}

/// Dataset vocabularies and geometry needed to corrupt a graph.
#[derive(Clone, Copy, Debug, Default)]
pub struct CorruptionContext {
    pub node_vocab: usize,
    pub edge_vocab: usize,
    /// Edge cutoff for geometric graphs; `None` keeps the input connectivity.
    pub cutoff: Option<f64>,
}

/// Applies the configured corruption. Outside training the clean graph is
/// returned and `rng` is never used. Structural dropout (`drop_edge_rate`,
/// `drop_node_rate`) is applied separately by the training step.
pub fn corrupt<R: Rng + ?Sized>(
    graph: &Graph,
    spec: &NoiseSpec,
    cx: CorruptionContext,
    training: bool,
    rng: &mut R,
) -> Result<CorruptionRecord> {
    if !training {
        return Ok(CorruptionRecord::clean(graph));
    }
    let bad = spec.validate();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    let rec = match spec.kind {
        NoiseKind::None => CorruptionRecord::clean(graph),
        NoiseKind::GaussianPositions => gaussian_corrupt(graph, spec.sigma, cx.cutoff, rng)?,
        NoiseKind::TrajectoryInterpThenGaussian => trajectory_corrupt(graph, spec.sigma, cx.cutoff, rng)?,
        NoiseKind::CategoryFlip => category_flip_corrupt(graph, cx.node_vocab, cx.edge_vocab, spec.flip_rate, rng)?,
        NoiseKind::InputDropout => {
            let mut g = graph.clone();
            g.node_features = input_dropout(&graph.node_features, spec.dropout_rate, rng)?;
            CorruptionRecord::clean(&g)
        }
    };
    Ok(rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_graph, Edge};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        let x = Tensor::from_rows(&[[0.0], [1.0], [2.0]]);
        let t = Tensor::from_rows(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let p = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let edges = vec![
            Edge::new(0, 1, vec![]),
            Edge::new(1, 0, vec![]),
            Edge::new(1, 2, vec![]),
            Edge::new(2, 1, vec![]),
        ];
        build_graph(x, Some(p), edges, vec![], Some(t), None).unwrap()
    }

    #[test]
    fn adjust_target_example() {
        let d = Tensor::from_rows(&[[0.5, 0.0, 0.0]]);
        let s = Tensor::from_rows(&[[0.3, 0.0, 0.0]]);
        let out = adjust_target(&d, &s).unwrap();
        assert!((out.data()[0] - 0.2).abs() < 1e-15);
        assert_eq!(adjust_target(&d, &Tensor::zeros([1, 3])).unwrap(), d);
        assert!(adjust_target(&d, &Tensor::zeros([2, 3])).is_err());
    }

    #[test]
    fn drop_middle_of_path() {
        let g = subgraph(&path3(), &[0, 2]).unwrap();
        assert_eq!(g.num_nodes(), 2);
        assert_eq!(g.num_edges(), 0);
        assert_eq!(g.node_targets.unwrap().row(1), &[3.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_rates_are_identity() {
        let g = path3();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(drop_node(&g, 0.0, &mut rng).unwrap(), g);
        assert_eq!(drop_edge(&g, 0.0, &mut rng).unwrap(), g);
        assert_eq!(gaussian_corrupt(&g, 0.0, Some(1.5), &mut rng).unwrap().noisy_graph, g);
        assert_eq!(drop_edge(&g, 1.0, &mut rng).unwrap().num_edges(), 0);
    }

    #[test]
    fn compose_loss_arithmetic() {
        let tape = crate::autodiff::Tape::new();
        let p = tape.constant(Tensor::scalar(1.0));
        let a = tape.constant(Tensor::scalar(2.0));
        assert!((compose_loss(p, a, 0.1).unwrap().item() - 1.2).abs() < 1e-15);
        assert_eq!(compose_loss(p, a, 0.0).unwrap().item(), 1.0);
        let nan = tape.constant(Tensor::scalar(f64::INFINITY));
        assert!(matches!(compose_loss(p, nan, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn spec_validation_collects_all() {
        let spec = NoiseSpec {
            sigma: -1.0,
            flip_rate: 2.0,
            dropout_rate: 1.0,
            ..NoiseSpec::default()
        };
        assert_eq!(spec.validate().len(), 3);
    }
}

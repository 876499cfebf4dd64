//! Attributed graphs `G = (V, E, g)`, dynamic batching, geometric edge
//! construction and the newline-delimited JSON dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featurize::{row3, CellBasis};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub sender: usize,
    pub receiver: usize,
    pub attr: Vec<f64>,
}

impl Edge {
    pub fn new(sender: usize, receiver: usize, attr: Vec<f64>) -> Self {
        Self { sender, receiver, attr }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    /// `[|V| x d_v]`. For typed nodes column 0 holds the integer type id.
    pub node_features: Tensor,
    /// `[|V| x 3]` for geometric graphs.
    pub positions: Option<Tensor>,
    pub edges: Vec<Edge>,
    pub global_attr: Vec<f64>,
    /// Per-node regression targets, `[|V| x d_t]`.
    pub node_targets: Option<Tensor>,
    pub graph_target: Option<Vec<f64>>,
    /// Periodic unit cell, when the system has one.
    pub cell: Option<CellBasis>,
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.node_features.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edge_dim(&self) -> Option<usize> {
        self.edges.first().map(|e| e.attr.len())
    }

    /// Integer ids stored in column `col` of the node features.
    pub fn node_types(&self, col: usize) -> Vec<usize> {
        (0..self.num_nodes())
            .map(|i| self.node_features.row(i)[col] as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.node_features.ndim() != 2 {
            return Err(Error::Validation(format!(
                "node_features must be a matrix, got shape {:?}",
                self.node_features.shape()
            )));
        }
        let d_e = self.edge_dim().unwrap_or(0);
        for (k, e) in self.edges.iter().enumerate() {
            if e.sender >= n || e.receiver >= n {
                return Err(Error::Validation(format!(
                    "edge {k} ({} -> {}) references a node outside 0..{n}",
                    e.sender, e.receiver
                )));
            }
            if e.attr.len() != d_e {
                return Err(Error::Validation(format!(
                    "edge {k} has {} attributes, expected {d_e}",
                    e.attr.len()
                )));
            }
        }
        if let Some(p) = &self.positions {
            if p.shape() != [n, 3] {
                return Err(Error::Validation(format!(
                    "positions shape {:?} does not match {n} nodes x 3",
                    p.shape()
                )));
            }
        }
        if let Some(t) = &self.node_targets {
            if t.ndim() != 2 || t.rows() != n {
                return Err(Error::Validation(format!(
                    "node_targets shape {:?} does not match {n} nodes",
                    t.shape()
                )));
            }
        }
        let finite = self.node_features.is_finite()
            && self.positions.as_ref().is_none_or(Tensor::is_finite)
            && self.global_attr.iter().all(|x| x.is_finite());
        if !finite {
            return Err(Error::Validation("graph holds non-finite values".into()));
        }
        Ok(())
    }

    pub fn positions_ref(&self) -> Result<&Tensor> {
        self.positions
            .as_ref()
            .ok_or_else(|| Error::contract("graph has no node positions"))
    }
}

/// Validated constructor.
pub fn build_graph(
    node_features: Tensor,
    positions: Option<Tensor>,
    edges: Vec<Edge>,
    global_attr: Vec<f64>,
    node_targets: Option<Tensor>,
    graph_target: Option<Vec<f64>>,
) -> Result<Graph> {
    let g = Graph {
        node_features,
        positions,
        edges,
        global_attr,
        node_targets,
        graph_target,
        cell: None,
    };
    g.validate()?;
    Ok(g)
}

/// Directed edges `i -> j` for every ordered pair with distance strictly
/// below `cutoff`, sorted by `(sender, receiver)`.
pub fn recompute_edges(positions: &Tensor, cutoff: f64) -> Result<Vec<Edge>> {
    if !(cutoff > 0.0) {
        return Err(Error::domain(format!("cutoff must be positive, got {cutoff}")));
    }
    let (n, _) = positions.as_matrix("recompute_edges")?;
    let c2 = cutoff * cutoff;
    let mut edges = Vec::new();
    for i in 0..n {
        let pi = row3(positions, i);
        for j in 0..n {
            if i == j {
                continue;
            }
            let pj = row3(positions, j);
            let d2 = (pi[0] - pj[0]).powi(2) + (pi[1] - pj[1]).powi(2) + (pi[2] - pj[2]).powi(2);
            if d2 < c2 {
                edges.push(Edge::new(i, j, Vec::new()));
            }
        }
    }
    Ok(edges)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchLimits {
    pub max_nodes: usize,
    pub max_edges: usize,
    pub max_graphs: usize,
}

impl Default for BatchLimits {
    fn default() -> Self {
        Self {
            max_nodes: 256,
            max_edges: 4096,
            max_graphs: 16,
        }
    }
}

/// Several graphs concatenated into one disconnected graph.
#[derive(Clone, Debug)]
pub struct Batch {
    pub node_features: Tensor,
    pub positions: Option<Tensor>,
    pub senders: Arc<[usize]>,
    pub receivers: Arc<[usize]>,
    /// `[|E| x d_e]`.
    pub edge_attr: Tensor,
    /// `[n_graphs x d_g]`.
    pub global_attr: Tensor,
    pub node_targets: Option<Tensor>,
    /// `[n_graphs x d_t]`.
    pub graph_targets: Option<Tensor>,
    pub cells: Vec<Option<CellBasis>>,
    /// Graph index of every node.
    pub membership: Arc<[usize]>,
    /// Graph index of every edge.
    pub edge_membership: Arc<[usize]>,
    pub node_counts: Vec<usize>,
    pub edge_counts: Vec<usize>,
}

fn same_presence(graphs: &[Graph], f: impl Fn(&Graph) -> bool, what: &str) -> Result<bool> {
    let first = graphs.first().is_some_and(&f);
    if graphs.iter().any(|g| f(g) != first) {
        return Err(Error::Validation(format!(
            "{what} present on some graphs but not others"
        )));
    }
    Ok(first)
}

fn stack_rows(parts: &[&Tensor], cols: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.numel() > 0 && p.cols() != cols {
            return Err(Error::Validation(format!(
                "cannot stack width {} with width {cols}",
                p.cols()
            )));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::new([rows, cols], data)
}

impl Batch {
    pub fn from_graphs(graphs: &[Graph]) -> Result<Self> {
        for g in graphs {
            g.validate()?;
        }
        let has_pos = same_presence(graphs, |g| g.positions.is_some(), "positions")?;
        let has_nt = same_presence(graphs, |g| g.node_targets.is_some(), "node_targets")?;
        let has_gt = same_presence(graphs, |g| g.graph_target.is_some(), "graph_target")?;

        let d_v = graphs.first().map_or(0, |g| g.node_features.cols());
        let d_e = graphs.iter().find_map(Graph::edge_dim).unwrap_or(0);
        let d_g = graphs.first().map_or(0, |g| g.global_attr.len());

        let mut senders = Vec::new();
        let mut receivers = Vec::new();
        let mut edge_attr = Vec::new();
        let mut membership = Vec::new();
        let mut edge_membership = Vec::new();
        let mut global = Vec::new();
        let mut gt = Vec::new();
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.global_attr.len() != d_g {
                return Err(Error::Validation(format!(
                    "graph {gi} global_attr width {} differs from {d_g}",
                    g.global_attr.len()
                )));
            }
            for e in &g.edges {
                if e.attr.len() != d_e {
                    return Err(Error::Validation(format!(
                        "graph {gi} edge width {} differs from {d_e}",
                        e.attr.len()
                    )));
                }
                senders.push(e.sender + offset);
                receivers.push(e.receiver + offset);
                edge_attr.extend_from_slice(&e.attr);
                edge_membership.push(gi);
            }
            membership.extend(std::iter::repeat_n(gi, g.num_nodes()));
            global.extend_from_slice(&g.global_attr);
            if let Some(t) = &g.graph_target {
                gt.push(t.clone());
            }
            offset += g.num_nodes();
        }
        let nf: Vec<&Tensor> = graphs.iter().map(|g| &g.node_features).collect();
        let positions = if has_pos {
            let ps: Vec<&Tensor> = graphs.iter().map(|g| g.positions.as_ref().unwrap()).collect();
            Some(stack_rows(&ps, 3)?)
        } else {
            None
        };
        let node_targets = if has_nt {
            let ts: Vec<&Tensor> = graphs.iter().map(|g| g.node_targets.as_ref().unwrap()).collect();
            Some(stack_rows(&ts, ts[0].cols())?)
        } else {
            None
        };
        let graph_targets = if has_gt {
            let w = gt[0].len();
            if gt.iter().any(|t| t.len() != w) {
                return Err(Error::Validation("graph targets differ in width".into()));
            }
            Some(Tensor::new([gt.len(), w], gt.concat())?)
        } else {
            None
        };
        let n_edges = senders.len();
        Ok(Self {
            node_features: stack_rows(&nf, d_v)?,
            positions,
            senders: senders.into(),
            receivers: receivers.into(),
            edge_attr: Tensor::new([n_edges, d_e], edge_attr)?,
            global_attr: Tensor::new([graphs.len(), d_g], global)?,
            node_targets,
            graph_targets,
            cells: graphs.iter().map(|g| g.cell).collect(),
            membership: membership.into(),
            edge_membership: edge_membership.into(),
            node_counts: graphs.iter().map(Graph::num_nodes).collect(),
            edge_counts: graphs.iter().map(Graph::num_edges).collect(),
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.membership.len()
    }

    pub fn n_edges(&self) -> usize {
        self.senders.len()
    }

    pub fn n_graphs(&self) -> usize {
        self.node_counts.len()
    }

    /// First node index of every graph.
    pub fn node_offsets(&self) -> Vec<usize> {
        offsets(&self.node_counts)
    }

    pub fn node_types(&self, col: usize) -> Vec<usize> {
        (0..self.n_nodes())
            .map(|i| self.node_features.row(i)[col] as usize)
            .collect()
    }

    /// Splits the batch back into its source graphs.
    pub fn unbatch(&self) -> Vec<Graph> {
        let node_off = offsets(&self.node_counts);
        let edge_off = offsets(&self.edge_counts);
        let slice_rows = |t: &Tensor, start: usize, n: usize| {
            let c = t.cols();
            Tensor::new([n, c], t.data()[start * c..(start + n) * c].to_vec()).expect("row slice")
        };
        (0..self.n_graphs())
            .map(|gi| {
                let (n0, n) = (node_off[gi], self.node_counts[gi]);
                let (e0, ne) = (edge_off[gi], self.edge_counts[gi]);
                let edges = (e0..e0 + ne)
                    .map(|k| {
                        Edge::new(
                            self.senders[k] - n0,
                            self.receivers[k] - n0,
                            self.edge_attr.row(k).to_vec(),
                        )
                    })
                    .collect();
                Graph {
                    node_features: slice_rows(&self.node_features, n0, n),
                    positions: self.positions.as_ref().map(|p| slice_rows(p, n0, n)),
                    edges,
                    global_attr: self.global_attr.row(gi).to_vec(),
                    node_targets: self.node_targets.as_ref().map(|t| slice_rows(t, n0, n)),
                    graph_target: self.graph_targets.as_ref().map(|t| t.row(gi).to_vec()),
                    cell: self.cells[gi],
                }
            })
            .collect()
    }
}

fn offsets(counts: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    counts
        .iter()
        .map(|c| {
            let o = acc;
            acc += c;
            o
        })
        .collect()
}

/// Greedy in-order packing: graphs are appended to the current batch until
/// adding the next one would exceed any limit.
pub fn batch_indices(graphs: &[Graph], limits: BatchLimits) -> Result<Vec<Vec<usize>>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let (mut nodes, mut edges) = (0, 0);
    for (i, g) in graphs.iter().enumerate() {
        let (gn, ge) = (g.num_nodes(), g.num_edges());
        let oversize = |limit, value, max| Error::Oversize {
            graph: i,
            limit,
            value,
            max,
        };
        if gn > limits.max_nodes {
            return Err(oversize("nodes", gn, limits.max_nodes));
        }
        if ge > limits.max_edges {
            return Err(oversize("edges", ge, limits.max_edges));
        }
        if limits.max_graphs == 0 {
            return Err(oversize("graphs", 1, 0));
        }
        let fits = nodes + gn <= limits.max_nodes && edges + ge <= limits.max_edges && cur.len() < limits.max_graphs;
        if !fits {
            out.push(std::mem::take(&mut cur));
            nodes = 0;
            edges = 0;
        }
        cur.push(i);
        nodes += gn;
        edges += ge;
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn batch_graphs(graphs: &[Graph], limits: BatchLimits) -> Result<Vec<Batch>> {
    batch_indices(graphs, limits)?
        .into_iter()
        .map(|idx| {
            let members: Vec<Graph> = idx.iter().map(|&i| graphs[i].clone()).collect();
            Batch::from_graphs(&members)
        })
        .collect()
}

// --- serialization ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TargetsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    node: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    node_features: Vec<Vec<f64>>,
    positions: Option<Vec<[f64; 3]>>,
    edges: Vec<Vec<f64>>,
    global_attr: Vec<f64>,
    targets: Option<TargetsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cell: Option<[[f64; 3]; 3]>,
}

fn matrix_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn rows_matrix(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Validation(format!("{what} rows are ragged")));
    }
    Tensor::new([rows.len(), cols], rows.concat())
}

impl GraphDoc {
    fn from_graph(g: &Graph) -> Self {
        let targets = if g.node_targets.is_some() || g.graph_target.is_some() {
            Some(TargetsDoc {
                node: g.node_targets.as_ref().map(matrix_rows),
                graph: g.graph_target.clone(),
            })
        } else {
            None
        };
        Self {
            node_features: matrix_rows(&g.node_features),
            positions: g
                .positions
                .as_ref()
                .map(|p| (0..p.rows()).map(|i| row3(p, i)).collect()),
            edges: g
                .edges
                .iter()
                .map(|e| {
                    let mut v = vec![e.sender as f64, e.receiver as f64];
                    v.extend_from_slice(&e.attr);
                    v
                })
                .collect(),
            global_attr: g.global_attr.clone(),
            targets,
            cell: g.cell.map(|c| [c.alpha, c.beta, c.gamma]),
        }
    }

    fn into_graph(self) -> Result<Graph> {
        let node_features = rows_matrix(&self.node_features, "node_features")?;
        let positions = self
            .positions
            .map(|p| Tensor::new([p.len(), 3], p.concat()))
            .transpose()?;
        let edges = self
            .edges
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                if v.len() < 2 || v[0] < 0.0 || v[1] < 0.0 || v[0].fract() != 0.0 || v[1].fract() != 0.0 {
                    return Err(Error::Validation(format!("edge {k} needs integer sender and receiver")));
                }
                Ok(Edge::new(v[0] as usize, v[1] as usize, v[2..].to_vec()))
            })
            .collect::<Result<Vec<_>>>()?;
        let (node_targets, graph_target) = match self.targets {
            Some(t) => (t.node.map(|r| rows_matrix(&r, "node targets")).transpose()?, t.graph),
            None => (None, None),
        };
        let cell = self.cell.map(|[a, b, c]| CellBasis::new(a, b, c)).transpose()?;
        let g = Graph {
            node_features,
            positions,
            edges,
            global_attr: self.global_attr,
            node_targets,
            graph_target,
            cell,
        };
        g.validate()?;
        Ok(g)
    }
}

pub fn graph_to_json(g: &Graph) -> Result<String> {
    Ok(serde_json::to_string(&GraphDoc::from_graph(g))?)
}

pub fn graph_from_json(s: &str) -> Result<Graph> {
    serde_json::from_str::<GraphDoc>(s)?.into_graph()
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Writes one JSON document per line; gzip-compressed if the path ends in `.gz`.
pub fn write_dataset(path: &Path, graphs: &[Graph]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut w: Box<dyn Write> = if is_gz(path) {
        Box::new(GzEncoder::new(file, Compression::default()))
    } else {
        Box::new(file)
    };
    for g in graphs {
        w.write_all(graph_to_json(g)?.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Graph>> {
    let mut file = File::open(path)?;
    let mut magic = [0u8; 2];
    let n = file.read(&mut magic)?;
    let file = File::open(path)?;
    let reader: Box<dyn BufRead> = if n == 2 && magic == [0x1f, 0x8b] {
        Box::new(BufReader::new(GzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    };
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let g =
            graph_from_json(&line).map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(g);
    }
    Ok(out)
}

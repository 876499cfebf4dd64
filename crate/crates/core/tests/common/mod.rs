#![allow(dead_code)]

use gnnd_core::graph::{build_graph, recompute_edges, Edge, Graph};
use gnnd_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point cloud with distance-cutoff edges and types in `0..vocab`.
pub fn point_cloud(seed: u64, n: usize, vocab: usize) -> Graph {
    let mut r = rng(seed);
    let pos: Vec<f64> = (0..3 * n).map(|_| r.random_range(-1.5..1.5)).collect();
    let pos = Tensor::new([n, 3], pos).unwrap();
    let types: Vec<f64> = (0..n).map(|_| r.random_range(0..vocab) as f64).collect();
    let edges = recompute_edges(&pos, 2.5).unwrap();
    let targets: Vec<f64> = (0..3 * n).map(|_| r.random_range(-0.3..0.3)).collect();
    build_graph(
        Tensor::new([n, 1], types).unwrap(),
        Some(pos),
        edges,
        vec![],
        Some(Tensor::new([n, 3], targets).unwrap()),
        Some(vec![r.random_range(-1.0..1.0)]),
    )
    .unwrap()
}

/// Categorical graph: node and edge categories, directed edges both ways.
pub fn categorical(seed: u64, n: usize, node_vocab: usize, edge_vocab: usize, pairs: &[(usize, usize)]) -> Graph {
    let mut r = rng(seed);
    let types: Vec<f64> = (0..n).map(|_| r.random_range(0..node_vocab) as f64).collect();
    let mut edges = Vec::new();
    for &(a, b) in pairs {
        let c = r.random_range(0..edge_vocab) as f64;
        edges.push(Edge::new(a, b, vec![c]));
        edges.push(Edge::new(b, a, vec![c]));
    }
    build_graph(
        Tensor::new([n, 1], types).unwrap(),
        None,
        edges,
        vec![],
        None,
        Some(vec![0.0]),
    )
    .unwrap()
}

pub fn path_pairs(n: usize) -> Vec<(usize, usize)> {
    (1..n).map(|i| (i - 1, i)).collect()
}

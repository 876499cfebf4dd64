//! Synthetic datasets standing in for relaxation, equilibrium-property and
//! molecular-graph classification tasks.
//!
//! Geometric tasks use clusters bound by a pairwise Morse potential whose
//! well depth and equilibrium distance depend on the two atom types.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{recompute_edges, Edge, Graph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Perturbed minimum as input, relaxed energy and displacements as targets.
    Relaxation,
    /// Relaxed positions as input, relaxed energy as target.
    EquilibriumDenoise,
    /// Typed nodes and bonds, binary graph label.
    Categorical,
}

fn d_graphs() -> usize {
    200
}
fn d_min_nodes() -> usize {
    10
}
fn d_max_nodes() -> usize {
    20
}
fn d_types() -> usize {
    3
}
fn d_edge_vocab() -> usize {
    3
}
fn d_perturbation() -> f64 {
    0.15
}
fn d_cutoff() -> f64 {
    2.0
}
fn d_extra() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task: SyntheticTask,
    #[serde(default = "d_graphs")]
    pub num_graphs: usize,
    #[serde(default = "d_min_nodes")]
    pub min_nodes: usize,
    #[serde(default = "d_max_nodes")]
    pub max_nodes: usize,
    /// Atom types (geometric tasks) or node categories.
    #[serde(default = "d_types")]
    pub num_types: usize,
    /// Bond categories of the categorical task.
    #[serde(default = "d_edge_vocab")]
    pub edge_vocab: usize,
    /// Std of the Gaussian displacement from the minimum to the initial structure.
    #[serde(default = "d_perturbation")]
    pub perturbation: f64,
    /// Radius graph cutoff of the geometric tasks.
    #[serde(default = "d_cutoff")]
    pub cutoff: f64,
    /// Extra bonds per node on top of a random spanning tree.
    #[serde(default = "d_extra")]
    pub extra_bond_rate: f64,
}

impl SyntheticSpec {
    pub fn new(task: SyntheticTask, num_graphs: usize) -> Self {
        Self {
            task,
            num_graphs,
            min_nodes: d_min_nodes(),
            max_nodes: d_max_nodes(),
            num_types: d_types(),
            edge_vocab: d_edge_vocab(),
            perturbation: d_perturbation(),
            cutoff: d_cutoff(),
            extra_bond_rate: d_extra(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.num_graphs == 0 {
            bad.push("dataset.synthetic.num_graphs: must be positive".into());
        }
        if self.min_nodes < 2 || self.max_nodes < self.min_nodes {
            bad.push(format!(
                "dataset.synthetic.min_nodes/max_nodes: need 2 <= min <= max, got {}..{}",
                self.min_nodes, self.max_nodes
            ));
        }
        if self.num_types == 0 {
            bad.push("dataset.synthetic.num_types: must be positive".into());
        }
        if self.task == SyntheticTask::Categorical && self.edge_vocab == 0 {
            bad.push("dataset.synthetic.edge_vocab: must be positive".into());
        }
        if !(self.perturbation >= 0.0 && self.perturbation.is_finite()) {
            bad.push(format!(
                "dataset.synthetic.perturbation: must be >= 0, got {}",
                self.perturbation
            ));
        }
        if !(self.cutoff > 0.0) {
            bad.push(format!(
                "dataset.synthetic.cutoff: must be positive, got {}",
                self.cutoff
            ));
        }
        if !(self.extra_bond_rate >= 0.0) {
            bad.push("dataset.synthetic.extra_bond_rate: must be >= 0".into());
        }
        bad
    }
}

/// Type-dependent Morse pair potential
/// `D_ij [(1 - exp(-a (r - r_ij)))^2 - 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MorseParams {
    pub radius: Vec<f64>,
    pub depth: Vec<f64>,
    pub stiffness: f64,
}

impl MorseParams {
    pub fn for_types(k: usize) -> Self {
        Self {
            radius: (0..k).map(|t| 1.0 + 0.15 * (t % 4) as f64).collect(),
            depth: (0..k).map(|t| [1.0, 1.6, 0.7, 1.3][t % 4]).collect(),
            stiffness: 1.8,
        }
    }

    fn pair(&self, a: usize, b: usize) -> (f64, f64) {
        (
            (self.depth[a] * self.depth[b]).sqrt(),
            0.5 * (self.radius[a] + self.radius[b]),
        )
    }

    fn check(&self, types: &[usize], n: usize) -> Result<()> {
        if types.len() != n {
            return Err(Error::dim(format!("{} types for {n} atoms", types.len())));
        }
        if let Some(&t) = types.iter().find(|&&t| t >= self.radius.len()) {
            return Err(Error::Index(format!(
                "atom type {t} outside {} types",
                self.radius.len()
            )));
        }
        Ok(())
    }
}

/// Potential energy and its gradient with respect to the flat `[n*3]` coordinates.
fn energy_grad(x: &[f64], types: &[usize], p: &MorseParams, grad: Option<&mut [f64]>) -> f64 {
    let n = types.len();
    let mut e = 0.0;
    let mut g = grad;
    if let Some(g) = g.as_deref_mut() {
        g.fill(0.0);
    }
    for i in 0..n {
        for j in i + 1..n {
            let d = [
                x[3 * j] - x[3 * i],
                x[3 * j + 1] - x[3 * i + 1],
                x[3 * j + 2] - x[3 * i + 2],
            ];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let (depth, r0) = p.pair(types[i], types[j]);
            let ex = (-p.stiffness * (r - r0)).exp();
            e += depth * ((1.0 - ex).powi(2) - 1.0);
            if let Some(g) = g.as_deref_mut() {
                let de_dr = 2.0 * depth * p.stiffness * (1.0 - ex) * ex;
                for k in 0..3 {
                    let c = de_dr * d[k] / r;
                    g[3 * j + k] += c;
                    g[3 * i + k] -= c;
                }
            }
        }
    }
    e
}

/// Potential energy of a configuration.
pub fn morse_energy(positions: &Tensor, types: &[usize], params: &MorseParams) -> Result<f64> {
    let (n, c) = positions.as_matrix("morse_energy")?;
    if c != 3 {
        return Err(Error::dim(format!("positions must be [n x 3], got [{n} x {c}]")));
    }
    params.check(types, n)?;
    Ok(energy_grad(positions.data(), types, params, None))
}

/// Forces `-dE/dx`, `[n x 3]`.
pub fn morse_forces(positions: &Tensor, types: &[usize], params: &MorseParams) -> Result<Tensor> {
    let (n, _) = positions.as_matrix("morse_forces")?;
    params.check(types, n)?;
    let mut g = vec![0.0; 3 * n];
    energy_grad(positions.data(), types, params, Some(&mut g));
    Tensor::new([n, 3], g.into_iter().map(|v| -v).collect())
}

pub const RELAX_TOLERANCE: f64 = 1e-6;
const RELAX_MAX_ITER: usize = 200_000;

/// FIRE minimization until the largest force component is below `tol`.
/// Returns the relaxed positions and their energy.
pub fn relax(positions: &Tensor, types: &[usize], params: &MorseParams, tol: f64) -> Result<(Tensor, f64)> {
    let (n, _) = positions.as_matrix("relax")?;
    params.check(types, n)?;
    let mut x = positions.data().to_vec();
    let mut v = vec![0.0; 3 * n];
    let mut g = vec![0.0; 3 * n];
    let (mut dt, dt_max, alpha0) = (0.02f64, 0.2, 0.1);
    let mut alpha = alpha0;
    let mut uphill_free = 0usize;
    for _ in 0..RELAX_MAX_ITER {
        let e = energy_grad(&x, types, params, Some(&mut g));
        if g.iter().all(|v| v.abs() < tol) {
            return Ok((Tensor::new([n, 3], x)?, e));
        }
        let power: f64 = -g.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
        if power > 0.0 {
            let vn = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let fnorm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
            for (vi, gi) in v.iter_mut().zip(&g) {
                *vi = (1.0 - alpha) * *vi - alpha * vn * gi / fnorm;
            }
            uphill_free += 1;
            if uphill_free > 5 {
                dt = (dt * 1.1).min(dt_max);
                alpha *= 0.99;
            }
        } else {
            v.fill(0.0);
            dt *= 0.5;
            alpha = alpha0;
            uphill_free = 0;
        }
        for k in 0..3 * n {
            v[k] -= dt * g[k];
            x[k] += dt * v[k];
        }
    }
    Err(Error::Generation(format!(
        "relaxation of a {n}-atom cluster did not reach max force {tol:e} in {RELAX_MAX_ITER} iterations"
    )))
}

fn graph_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: [f64; 3] = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len > 1e-6 {
            return [v[0] / len, v[1] / len, v[2] / len];
        }
    }
}

/// Grows a compact cluster by attaching each atom to a random earlier one
/// near the pair equilibrium distance, then relaxes it.
fn relaxed_cluster<R: Rng + ?Sized>(
    spec: &SyntheticSpec,
    params: &MorseParams,
    rng: &mut R,
) -> Result<(Vec<usize>, Tensor, f64)> {
    let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
    let types: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_types)).collect();
    let mut pos: Vec<[f64; 3]> = vec![[0.0; 3]];
    while pos.len() < n {
        let i = pos.len();
        let anchor = pos[rng.random_range(0..i)];
        let r0 = params.pair(types[i], types[0]).1;
        let u = random_unit(rng);
        let cand = [anchor[0] + r0 * u[0], anchor[1] + r0 * u[1], anchor[2] + r0 * u[2]];
        let clear = pos.iter().all(|p| {
            let d2: f64 = (0..3).map(|k| (p[k] - cand[k]).powi(2)).sum();
            d2 > (0.8 * r0).powi(2)
        });
        if clear {
            pos.push(cand);
        }
    }
    let flat: Vec<f64> = pos.iter().flatten().copied().collect();
    let (mut relaxed, energy) = relax(&Tensor::new([n, 3], flat)?, &types, params, RELAX_TOLERANCE)?;
    let mut centre = [0.0; 3];
    for i in 0..n {
        for k in 0..3 {
            centre[k] += relaxed.data()[3 * i + k] / n as f64;
        }
    }
    for (idx, v) in relaxed.data_mut().iter_mut().enumerate() {
        *v -= centre[idx % 3];
    }
    Ok((types, relaxed, energy))
}

fn type_column(types: &[usize]) -> Result<Tensor> {
    Tensor::new([types.len(), 1], types.iter().map(|&t| t as f64).collect())
}

fn check_spec(spec: &SyntheticSpec, task: SyntheticTask) -> Result<()> {
    let mut bad = spec.validate();
    if spec.task != task {
        bad.push(format!(
            "dataset.synthetic.task: expected {task:?}, got {:?}",
            spec.task
        ));
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(bad))
    }
}

/// Initial structures (a Gaussian perturbation of a relaxed cluster) with
/// the relaxed energy as graph target and `final - initial` as node targets.
/// Each graph draws from its own stream of `seed`.
pub fn generate_relaxation_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Graph>> {
    check_spec(spec, SyntheticTask::Relaxation)?;
    let params = MorseParams::for_types(spec.num_types);
    let noise = Normal::new(0.0, spec.perturbation.max(f64::MIN_POSITIVE)).expect("valid std");
    (0..spec.num_graphs)
        .into_par_iter()
        .map(|i| {
            let mut rng = graph_rng(seed, i);
            let (types, relaxed, energy) = relaxed_cluster(spec, &params, &mut rng)?;
            let mut initial = relaxed.clone();
            if spec.perturbation > 0.0 {
                for v in initial.data_mut() {
                    *v += noise.sample(&mut rng);
                }
            }
            let delta = relaxed.sub(&initial)?;
            let g = Graph {
                node_features: type_column(&types)?,
                edges: recompute_edges(&initial, spec.cutoff)?,
                positions: Some(initial),
                global_attr: Vec::new(),
                node_targets: Some(delta),
                graph_target: Some(vec![energy]),
                cell: None,
            };
            g.validate()?;
            Ok(g)
        })
        .collect()
}

/// Relaxed clusters as input with their energy as graph target.
pub fn generate_equilibrium_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Graph>> {
    check_spec(spec, SyntheticTask::EquilibriumDenoise)?;
    let params = MorseParams::for_types(spec.num_types);
    (0..spec.num_graphs)
        .into_par_iter()
        .map(|i| {
            let mut rng = graph_rng(seed, i);
            let (types, relaxed, energy) = relaxed_cluster(spec, &params, &mut rng)?;
            let g = Graph {
                node_features: type_column(&types)?,
                edges: recompute_edges(&relaxed, spec.cutoff)?,
                positions: Some(relaxed),
                global_attr: Vec::new(),
                node_targets: None,
                graph_target: Some(vec![energy]),
                cell: None,
            };
            g.validate()?;
            Ok(g)
        })
        .collect()
}

/// Connected random graphs with categorical atoms and bonds. The label is
/// the parity of the number of bonds joining two atoms of the same category.
pub fn generate_categorical_dataset(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Graph>> {
    check_spec(spec, SyntheticTask::Categorical)?;
    (0..spec.num_graphs)
        .into_par_iter()
        .map(|i| {
            let mut rng = graph_rng(seed, i);
            let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
            let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.num_types)).collect();
            let mut bonds: Vec<(usize, usize)> = (1..n).map(|j| (rng.random_range(0..j), j)).collect();
            let extra = (spec.extra_bond_rate * n as f64).round() as usize;
            let max_bonds = n * (n - 1) / 2;
            let mut attempts = 0;
            while bonds.len() < (n - 1 + extra).min(max_bonds) && attempts < 100 * (extra + 1) {
                attempts += 1;
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                let pair = (a.min(b), a.max(b));
                if a != b && !bonds.contains(&pair) {
                    bonds.push(pair);
                }
            }
            let same = bonds.iter().filter(|(a, b)| cats[*a] == cats[*b]).count();
            let mut edges = Vec::with_capacity(2 * bonds.len());
            for &(a, b) in &bonds {
                let c = rng.random_range(0..spec.edge_vocab) as f64;
                edges.push(Edge::new(a, b, vec![c]));
                edges.push(Edge::new(b, a, vec![c]));
            }
            let g = Graph {
                node_features: type_column(&cats)?,
                positions: None,
                edges,
                global_attr: Vec::new(),
                node_targets: None,
                graph_target: Some(vec![(same % 2) as f64]),
                cell: None,
            };
            g.validate()?;
            Ok(g)
        })
        .collect()
}

/// Dispatches on `spec.task`.
pub fn generate(spec: &SyntheticSpec, seed: u64) -> Result<Vec<Graph>> {
    match spec.task {
        SyntheticTask::Relaxation => generate_relaxation_dataset(spec, seed),
        SyntheticTask::EquilibriumDenoise => generate_equilibrium_dataset(spec, seed),
        SyntheticTask::Categorical => generate_categorical_dataset(spec, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forces_match_finite_differences() {
        let p = MorseParams::for_types(3);
        let x = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.1, 0.1, 0.0], [0.4, 0.9, 0.3]]);
        let types = [0, 1, 2];
        let f = morse_forces(&x, &types, &p).unwrap();
        let h = 1e-6;
        for k in 0..9 {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data_mut()[k] += h;
            b.data_mut()[k] -= h;
            let fd = (morse_energy(&a, &types, &p).unwrap() - morse_energy(&b, &types, &p).unwrap()) / (2.0 * h);
            assert!((fd + f.data()[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn dimer_relaxes_to_pair_distance() {
        let p = MorseParams::for_types(2);
        let x = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.6, 0.0, 0.0]]);
        let (r, e) = relax(&x, &[0, 1], &p, 1e-9).unwrap();
        let d = (r.get2(1, 0) - r.get2(0, 0)).abs();
        assert!((d - 1.075).abs() < 1e-8);
        assert!((e + 1.6f64.sqrt()).abs() < 1e-12);
    }
}

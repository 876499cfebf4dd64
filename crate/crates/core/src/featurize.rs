//! Input featurization for 3D graphs: radial Bessel basis on edge lengths,
//! unit displacement vectors (optionally in the unit-cell basis), the
//! rotation-invariant cell descriptor, and learned atom-type embeddings.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::{uniform, ParamId, ParamStore};
use crate::tensor::Tensor;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit-cell basis vectors. The matrix with columns `[alpha beta gamma]`
/// maps fractional to Cartesian coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellBasis {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub gamma: Vec3,
}

impl CellBasis {
    pub fn new(alpha: Vec3, beta: Vec3, gamma: Vec3) -> Result<Self> {
        let cell = Self { alpha, beta, gamma };
        cell.inverse()?;
        Ok(cell)
    }

    pub fn cubic(edge: f64) -> Self {
        Self {
            alpha: [edge, 0.0, 0.0],
            beta: [0.0, edge, 0.0],
            gamma: [0.0, 0.0, edge],
        }
    }

    fn det(&self) -> f64 {
        dot(self.alpha, cross(self.beta, self.gamma))
    }

    /// Rows of the inverse of the column matrix `[alpha beta gamma]`.
    fn inverse(&self) -> Result<[Vec3; 3]> {
        let det = self.det();
        let scale = norm(self.alpha) * norm(self.beta) * norm(self.gamma);
        if !(det.abs() > 1e-12 * scale) || !det.is_finite() {
            return Err(Error::LinearAlgebra(format!(
                "singular unit cell (determinant {det:e})"
            )));
        }
        // Rows of the inverse are the reciprocal vectors.
        let r0 = cross(self.beta, self.gamma);
        let r1 = cross(self.gamma, self.alpha);
        let r2 = cross(self.alpha, self.beta);
        let s = 1.0 / det;
        Ok([
            [r0[0] * s, r0[1] * s, r0[2] * s],
            [r1[0] * s, r1[1] * s, r1[2] * s],
            [r2[0] * s, r2[1] * s, r2[2] * s],
        ])
    }

    pub fn to_cartesian(&self, f: Vec3) -> Vec3 {
        let mut out = [0.0; 3];
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.alpha[k] * f[0] + self.beta[k] * f[1] + self.gamma[k] * f[2];
        }
        out
    }

    pub fn to_fractional_vec(&self, p: Vec3) -> Result<Vec3> {
        let inv = self.inverse()?;
        Ok([dot(inv[0], p), dot(inv[1], p), dot(inv[2], p)])
    }

    pub fn transformed(&self, rot: &[Vec3; 3]) -> Self {
        let apply = |v: Vec3| [dot(rot[0], v), dot(rot[1], v), dot(rot[2], v)];
        Self {
            alpha: apply(self.alpha),
            beta: apply(self.beta),
            gamma: apply(self.gamma),
        }
    }
}

/// Solves `[alpha beta gamma] f = p` for every row of `positions`.
pub fn to_fractional(positions: &Tensor, cell: &CellBasis) -> Result<Tensor> {
    let (n, d) = positions.as_matrix("to_fractional")?;
    if d != 3 {
        return Err(Error::dim(format!(
            "positions must be [n x 3], got {:?}",
            positions.shape()
        )));
    }
    let inv = cell.inverse()?;
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        let p = row3(positions, i);
        out.extend([dot(inv[0], p), dot(inv[1], p), dot(inv[2], p)]);
    }
    Tensor::new([n, 3], out)
}

/// `(alpha.beta, beta.gamma, alpha.gamma, |alpha|, |beta|, |gamma|)`.
pub fn cell_invariants(cell: &CellBasis) -> [f64; 6] {
    [
        dot(cell.alpha, cell.beta),
        dot(cell.beta, cell.gamma),
        dot(cell.alpha, cell.gamma),
        norm(cell.alpha),
        norm(cell.beta),
        norm(cell.gamma),
    ]
}

pub(crate) fn row3(t: &Tensor, i: usize) -> Vec3 {
    let r = t.row(i);
    [r[0], r[1], r[2]]
}

/// Radial Bessel basis function `sqrt(2/R) sin(c pi d / R) / d`.
pub fn bessel_rbf(d: f64, c: usize, cutoff: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::domain(format!("bessel_rbf distance must be positive, got {d}")));
    }
    if c < 1 {
        return Err(Error::domain("bessel_rbf index starts at 1"));
    }
    if !(cutoff > 0.0) {
        return Err(Error::domain(format!(
            "bessel_rbf cutoff must be positive, got {cutoff}"
        )));
    }
    let k = c as f64 * std::f64::consts::PI / cutoff;
    Ok((2.0 / cutoff).sqrt() * (k * d).sin() / d)
}

fn default_num_rbf() -> usize {
    8
}

fn default_rbf_cutoff() -> f64 {
    5.0
}

fn default_embed_dim() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizeSpec {
    #[serde(default = "default_num_rbf")]
    pub num_rbf: usize,
    #[serde(default = "default_rbf_cutoff")]
    pub rbf_cutoff: f64,
    #[serde(default)]
    pub use_fractional: bool,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
}

impl Default for FeaturizeSpec {
    fn default() -> Self {
        Self {
            num_rbf: default_num_rbf(),
            rbf_cutoff: default_rbf_cutoff(),
            use_fractional: false,
            embed_dim: default_embed_dim(),
        }
    }
}

impl FeaturizeSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.num_rbf < 1 {
            bad.push("model.featurize.num_rbf: must be at least 1".to_string());
        }
        if !(self.rbf_cutoff > 0.0) {
            bad.push("model.featurize.rbf_cutoff: must be positive".to_string());
        }
        if self.embed_dim < 1 {
            bad.push("model.featurize.embed_dim: must be at least 1".to_string());
        }
        bad
    }

    pub fn edge_dim(&self) -> usize {
        self.num_rbf + 3
    }
}

/// RBF channels on `|d|` followed by the unit displacement direction.
///
/// With `spec.use_fractional` the direction is taken from the displacement
/// expressed in the cell basis, so a cell must be supplied.
pub fn edge_features(displacement: Vec3, spec: &FeaturizeSpec, cell: Option<&CellBasis>) -> Result<Vec<f64>> {
    let len = norm(displacement);
    if !(len > 0.0) {
        return Err(Error::domain("edge_features: zero-length displacement"));
    }
    let mut out = Vec::with_capacity(spec.edge_dim());
    for c in 1..=spec.num_rbf {
        out.push(bessel_rbf(len, c, spec.rbf_cutoff)?);
    }
    let dir = if spec.use_fractional {
        let cell = cell.ok_or_else(|| Error::contract("fractional featurization needs a unit cell"))?;
        cell.to_fractional_vec(displacement)?
    } else {
        displacement
    };
    let dn = norm(dir);
    out.extend(dir.iter().map(|x| x / dn));
    Ok(out)
}

/// Learned atom-type lookup, with optional binary flags concatenated and
/// projected back to `embed_dim`.
#[derive(Clone, Debug)]
pub struct AtomEmbedding {
    table: ParamId,
    proj: Linear,
    num_types: usize,
    num_flags: usize,
    embed_dim: usize,
}

impl AtomEmbedding {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        num_types: usize,
        num_flags: usize,
        embed_dim: usize,
    ) -> Self {
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let table = store.add(format!("{name}/table"), uniform(rng, [num_types, embed_dim], bound));
        let proj = Linear::new(store, rng, &format!("{name}/proj"), embed_dim + num_flags, embed_dim);
        Self {
            table,
            proj,
            num_types,
            num_flags,
            embed_dim,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn num_types(&self) -> usize {
        self.num_types
    }

    /// `types` has one entry per node, `flags` is `[n x num_flags]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, types: &[usize], flags: &Tensor) -> Result<Var<'t>> {
        if let Some(&bad) = types.iter().find(|&&t| t >= self.num_types) {
            return Err(Error::Index(format!(
                "atom type {bad} outside embedding table of {} types",
                self.num_types
            )));
        }
        if flags.ndim() != 2 || flags.rows() != types.len() || flags.cols() != self.num_flags {
            return Err(Error::dim(format!(
                "flags shape {:?} does not match {} nodes x {} flags",
                flags.shape(),
                types.len(),
                self.num_flags
            )));
        }
        let ids: Arc<[usize]> = types.to_vec().into();
        let rows = cx.p[self.table].gather_rows(&ids)?;
        let input = if self.num_flags > 0 {
            let f = cx.tape.constant(flags.clone());
            cx.tape.concat(&[rows, f])?
        } else {
            rows
        };
        self.proj.forward(cx, input)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_examples() {
        let r = 5.0;
        let v = bessel_rbf(r / 2.0, 1, r).unwrap();
        assert!((v - 2.0 * (2.0 / r).sqrt() / r).abs() < 1e-14);
        assert!(bessel_rbf(r, 1, r).unwrap().abs() < 1e-15);
        let v = bessel_rbf(1.0, 2, 5.0).unwrap();
        assert!((v - 0.6015).abs() < 1e-4, "{v}");
    }

    #[test]
    fn bessel_rejects_non_positive_distance() {
        assert!(matches!(bessel_rbf(0.0, 1, 5.0), Err(Error::Domain(_))));
        assert!(matches!(bessel_rbf(-1.0, 1, 5.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bessel_small_distance_limit() {
        let (c, r) = (3, 5.0);
        let limit = c as f64 * std::f64::consts::PI * (2.0_f64 / r).sqrt() / r;
        let v = bessel_rbf(1e-8, c, r).unwrap();
        assert!(v.is_finite());
        assert!((v - limit).abs() < 1e-9);
    }

    #[test]
    fn edge_features_shape_and_direction() {
        let spec = FeaturizeSpec {
            num_rbf: 1,
            rbf_cutoff: 5.0,
            ..Default::default()
        };
        let f = edge_features([2.5, 0.0, 0.0], &spec, None).unwrap();
        let expect = 2.0 * (2.0f64 / 5.0).sqrt() / 5.0;
        assert!((f[0] - expect).abs() < 1e-14);
        assert_eq!(&f[1..], &[1.0, 0.0, 0.0]);

        let spec = FeaturizeSpec {
            num_rbf: 7,
            ..Default::default()
        };
        let a = edge_features([0.3, -1.0, 2.0], &spec, None).unwrap();
        let b = edge_features([0.6, -2.0, 4.0], &spec, None).unwrap();
        assert_eq!(a.len(), 10);
        for k in 7..10 {
            assert!((a[k] - b[k]).abs() < 1e-15);
        }
        assert!(edge_features([0.0; 3], &spec, None).is_err());
    }

    #[test]
    fn fractional_examples() {
        let p = Tensor::from_rows(&[[2.0, 4.0, 6.0]]);
        assert_eq!(to_fractional(&p, &CellBasis::cubic(1.0)).unwrap(), p);
        let f = to_fractional(&p, &CellBasis::cubic(2.0)).unwrap();
        assert_eq!(f.data(), &[1.0, 2.0, 3.0]);
        let flat = CellBasis {
            alpha: [1.0, 0.0, 0.0],
            beta: [2.0, 0.0, 0.0],
            gamma: [0.0, 0.0, 1.0],
        };
        assert!(matches!(to_fractional(&p, &flat), Err(Error::LinearAlgebra(_))));
    }

    #[test]
    fn invariants_examples() {
        assert_eq!(cell_invariants(&CellBasis::cubic(1.0)), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = [1.0, 1.0, 1.0];
        let inv = cell_invariants(&CellBasis {
            alpha: v,
            beta: v,
            gamma: v,
        });
        let s3 = 3f64.sqrt();
        assert_eq!(inv, [3.0, 3.0, 3.0, s3, s3, s3]);
    }
}

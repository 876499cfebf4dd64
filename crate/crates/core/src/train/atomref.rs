use crate::error::{Error, Result};
use crate::graph::Graph;

/// Number of atoms of every type in column 0 of the node features.
pub fn atom_counts(graph: &Graph, num_types: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0.0; num_types];
    for t in graph.node_types(0) {
        *counts
            .get_mut(t)
            .ok_or_else(|| Error::Index(format!("atom type {t} outside 0..{num_types}")))? += 1.0;
    }
    Ok(counts)
}

/// Sum of per-type coefficients over a graph's atoms.
pub fn reference_value(graph: &Graph, coeffs: &[f64]) -> Result<f64> {
    let counts = atom_counts(graph, coeffs.len())?;
    Ok(counts.iter().zip(coeffs).map(|(c, w)| c * w).sum())
}

/// Least-squares per-type coefficients `w` minimizing
/// `sum_g (y_g - counts_g . w)^2`, with `y_g` the graph target at
/// `target_index`.
pub fn fit_atomref(graphs: &[Graph], target_index: usize, num_types: usize) -> Result<Vec<f64>> {
    if graphs.len() < num_types {
        return Err(Error::Fit(format!(
            "{} graphs cannot determine {num_types} per-type coefficients; add more data",
            graphs.len()
        )));
    }
    let k = num_types;
    let mut ata = vec![vec![0.0; k]; k];
    let mut aty = vec![0.0; k];
    for g in graphs {
        let y = g
            .graph_target
            .as_ref()
            .and_then(|t| t.get(target_index))
            .copied()
            .ok_or_else(|| Error::Fit(format!("graph lacks target {target_index}")))?;
        let c = atom_counts(g, k)?;
        for i in 0..k {
            aty[i] += c[i] * y;
            for j in 0..k {
                ata[i][j] += c[i] * c[j];
            }
        }
    }
    let scale = (0..k).map(|i| ata[i][i]).fold(0.0, f64::max);
    // Gaussian elimination with partial pivoting on the normal equations.
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&a, &b| ata[a][col].abs().total_cmp(&ata[b][col].abs()))
            .expect("nonempty range");
        if ata[piv][col].abs() <= 1e-10 * scale.max(1.0) {
            return Err(Error::Fit(format!(
                "atom-type count matrix is rank deficient (type {col} is not identifiable); add more varied data"
            )));
        }
        ata.swap(col, piv);
        aty.swap(col, piv);
        for r in col + 1..k {
            let f = ata[r][col] / ata[col][col];
            for c in col..k {
                ata[r][c] -= f * ata[col][c];
            }
            aty[r] -= f * aty[col];
        }
    }
    let mut w = vec![0.0; k];
    for r in (0..k).rev() {
        let s: f64 = (r + 1..k).map(|c| ata[r][c] * w[c]).sum();
        w[r] = (aty[r] - s) / ata[r][r];
    }
    Ok(w)
}

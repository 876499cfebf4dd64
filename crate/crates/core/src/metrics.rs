//! Diagnostics: mean average cosine distance (MAD) per layer, MAE,
//! standardized and log MAE, and within-threshold rates.

use serde::{Deserialize, Serialize};

use crate::autodiff::log_softmax;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default tolerance for energy and distance within-threshold rates.
pub const DEFAULT_THRESHOLD: f64 = 0.02;

/// Mean cosine distance `1 - cos(h_i, h_j)` over ordered pairs `i != j` of
/// rows with nonzero norm.
pub fn mad(latents: &Tensor) -> Result<f64> {
    let (n, _) = latents.as_matrix("mad")?;
    if n < 2 {
        return Err(Error::UndefinedMetric(format!("MAD needs at least 2 rows, got {n}")));
    }
    let rows: Vec<(&[f64], f64)> = (0..n)
        .map(|i| {
            let r = latents.row(i);
            (r, r.iter().map(|x| x * x).sum::<f64>().sqrt())
        })
        .filter(|(_, norm)| *norm > 0.0)
        .collect();
    if rows.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "MAD needs at least 2 nonzero rows, got {}",
            rows.len()
        )));
    }
    let mut total = 0.0;
    for (i, (a, na)) in rows.iter().enumerate() {
        for (b, nb) in &rows[i + 1..] {
            let cos = a.iter().zip(*b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
            total += 1.0 - cos.clamp(-1.0, 1.0);
        }
    }
    let m = rows.len() as f64;
    // each unordered pair stands for two ordered ones
    Ok(2.0 * total / (m * (m - 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadTarget {
    /// `latent_k - latent_{k-1}` for every layer `k`.
    ResidualUpdates,
    /// The latents after every layer.
    Latents,
}

/// MAD per processor layer. `None` marks a layer whose MAD is undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDiversityProfile {
    pub values: Vec<Option<f64>>,
    pub sorted: bool,
}

impl LayerDiversityProfile {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Descending order, undefined layers last.
    pub fn sorted(&self) -> Self {
        let mut values = self.values.clone();
        values.sort_by(|a, b| match (a, b) {
            (Some(x), Some(y)) => y.total_cmp(x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        });
        Self { values, sorted: true }
    }

    /// True when every value is defined and each is strictly below the last.
    pub fn strictly_decreasing(&self) -> bool {
        self.values.iter().all(Option::is_some) && self.values.windows(2).all(|w| w[1].unwrap() < w[0].unwrap())
    }
}

fn rows_of(t: &Tensor, start: usize, len: usize) -> Tensor {
    let c = t.cols();
    Tensor::new([len, c], t.data()[start * c..(start + len) * c].to_vec()).expect("row slice")
}

/// MAD per layer from the snapshot list (encoder output first), averaged
/// over the graphs of a batch given their node counts. Graphs where MAD is
/// undefined are skipped; a layer with no defined graph is `None`.
pub fn mad_profile(snapshots: &[Tensor], node_counts: &[usize], target: MadTarget) -> Result<LayerDiversityProfile> {
    if snapshots.len() < 2 {
        return Err(Error::contract("MAD profile needs at least one processor layer"));
    }
    let n: usize = node_counts.iter().sum();
    for s in snapshots {
        if s.rows() != n {
            return Err(Error::dim(format!(
                "snapshot has {} rows, node counts sum to {n}",
                s.rows()
            )));
        }
    }
    let mut values = Vec::with_capacity(snapshots.len() - 1);
    for k in 1..snapshots.len() {
        let layer = match target {
            MadTarget::ResidualUpdates => snapshots[k].sub(&snapshots[k - 1])?,
            MadTarget::Latents => snapshots[k].clone(),
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut start = 0;
        for &c in node_counts {
            match mad(&rows_of(&layer, start, c)) {
                Ok(v) => {
                    sum += v;
                    count += 1;
                }
                Err(Error::UndefinedMetric(_)) => {}
                Err(e) => return Err(e),
            }
            start += c;
        }
        values.push((count > 0).then(|| sum / count as f64));
    }
    Ok(LayerDiversityProfile { values, sorted: false })
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::dim(format!(
            "prediction has {} entries, target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::UndefinedMetric("metric of empty input".into()));
    }
    Ok(())
}

pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Fraction of entries whose absolute error is strictly below `thresh`.
pub fn within_threshold(pred: &[f64], target: &[f64], thresh: f64) -> Result<f64> {
    check_pair(pred, target)?;
    if !(thresh > 0.0) {
        return Err(Error::domain(format!("threshold must be positive, got {thresh}")));
    }
    let hits = pred
        .iter()
        .zip(target)
        .filter(|(p, t)| (*p - *t).abs() < thresh)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Fraction of rows whose Euclidean error is strictly below `thresh`.
pub fn within_threshold_rows(pred: &Tensor, target: &Tensor, thresh: f64) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    let dists: Vec<f64> = (0..pred.rows())
        .map(|i| {
            pred.row(i)
                .iter()
                .zip(target.row(i))
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    within_threshold(&dists, &vec![0.0; dists.len()], thresh)
}

fn ratios(maes: &[f64], stds: &[f64]) -> Result<Vec<f64>> {
    check_pair(maes, stds)?;
    maes.iter()
        .zip(stds)
        .map(|(m, s)| {
            if *s > 0.0 {
                Ok(m / s)
            } else {
                Err(Error::domain(format!(
                    "target standard deviation must be positive, got {s}"
                )))
            }
        })
        .collect()
}

/// Mean over targets of `MAE_m / std_m`.
pub fn std_mae(maes: &[f64], stds: &[f64]) -> Result<f64> {
    let r = ratios(maes, stds)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// Mean over targets of `ln(MAE_m / std_m)`.
pub fn log_mae(maes: &[f64], stds: &[f64]) -> Result<f64> {
    let r = ratios(maes, stds)?;
    Ok(r.iter().map(|x| x.ln()).sum::<f64>() / r.len() as f64)
}

/// Fraction of rows whose arg-max matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.as_matrix("accuracy")?;
    if n != labels.len() {
        return Err(Error::dim(format!("{n} logit rows for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("accuracy of empty input".into()));
    }
    let hits = (0..n)
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == labels[i]
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean negative log-likelihood of the labels under softmax of the logits.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = logits.as_matrix("cross_entropy")?;
    if n != labels.len() || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "{n} logit rows for {} labels",
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index(format!("label {y} outside {k} classes")));
        }
        total -= log_softmax(logits.row(i))[y];
    }
    Ok(total / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Maximize,
    Minimize,
    /// Reported but not comparable (e.g. the learning rate).
    Neutral,
}

/// Whether larger or smaller values of a named metric are better.
pub fn direction(name: &str) -> Direction {
    if name == "lr" || name == "step" {
        Direction::Neutral
    } else if name.contains("accuracy")
        || name.contains("within")
        || name.ends_with("ewt")
        || name.ends_with("dwt")
        || name.contains("mad")
    {
        Direction::Maximize
    } else {
        Direction::Minimize
    }
}

//! Geometry diagnostics over decoder atoms and latent codes.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::StepRecord;
use crate::error::{Error, Result};

/// Rows scaled to unit L2 norm; a zero row is reported by index.
pub fn normalize_rows(rows: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = rows.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroColumn { index: i });
        }
        row /= norm;
    }
    Ok(out)
}

/// Maximum absolute cosine similarity between distinct atoms (one atom per row).
pub fn incoherence(atoms: ArrayView2<f64>) -> Result<f64> {
    if atoms.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "incoherence needs at least 2 atoms, got {}",
            atoms.nrows()
        )));
    }
    let unit = normalize_rows(atoms)?;
    let gram = unit.dot(&unit.t());
    let mut mu: f64 = 0.0;
    for ((i, j), &g) in gram.indexed_iter() {
        if i != j {
            mu = mu.max(g.abs());
        }
    }
    Ok(mu.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelActivity {
    pub channel_index: usize,
    /// Largest `|latent|` of the channel over rows carrying `label`.
    pub activity: f64,
    pub label: String,
}

/// Per-channel max `|latent|` over the rows whose label equals `target`.
pub fn channel_activities<L: PartialEq + fmt::Display>(
    latents: ArrayView2<f64>,
    labels: &[L],
    target: &L,
) -> Result<Vec<ChannelActivity>> {
    if labels.len() != latents.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} latent rows",
            labels.len(),
            latents.nrows()
        )));
    }
    let mut max = vec![0.0f64; latents.ncols()];
    let mut seen = false;
    for (row, label) in latents.rows().into_iter().zip(labels) {
        if label != target {
            continue;
        }
        seen = true;
        for (m, &v) in max.iter_mut().zip(row) {
            *m = m.max(v.abs());
        }
    }
    if !seen {
        return Err(Error::InvalidArgument(format!("no rows labeled {target}")));
    }
    let label = target.to_string();
    Ok(max
        .into_iter()
        .enumerate()
        .map(|(channel_index, activity)| ChannelActivity {
            channel_index,
            activity,
            label: label.clone(),
        })
        .collect())
}

/// The `k` most active channels for `target`, descending, ties to the lower index.
/// `k` larger than the width is clamped with a warning.
pub fn top_active_channels<L: PartialEq + fmt::Display>(
    latents: ArrayView2<f64>,
    labels: &[L],
    target: &L,
    k: usize,
) -> Result<Vec<ChannelActivity>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut all = channel_activities(latents, labels, target)?;
    let k = if k > all.len() {
        log::warn!("top-k {k} exceeds width {}, clamped", all.len());
        all.len()
    } else {
        k
    };
    all.sort_by(|a, b| {
        b.activity
            .total_cmp(&a.activity)
            .then(a.channel_index.cmp(&b.channel_index))
    });
    all.truncate(k);
    Ok(all)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Silhouette {
    pub per_point: Vec<f64>,
    pub mean: f64,
}

/// Silhouette coefficients under cosine distance `1 - cos(u, v)`.
///
/// Points in singleton clusters score 0.
pub fn silhouette_cosine<L: Ord>(vectors: ArrayView2<f64>, labels: &[L]) -> Result<Silhouette> {
    let n = vectors.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} points",
            labels.len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "silhouette needs at least 3 points, got {n}"
        )));
    }
    let mut ids: BTreeMap<&L, usize> = BTreeMap::new();
    for l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let n_clusters = ids.len();
    if n_clusters < 2 {
        return Err(Error::InvalidArgument(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let cluster: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut sizes = vec![0usize; n_clusters];
    for &c in &cluster {
        sizes[c] += 1;
    }
    let unit = normalize_rows(vectors)?;

    let per_point: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = cluster[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let ui = unit.row(i);
            let mut sums = vec![0.0f64; n_clusters];
            for (j, uj) in unit.rows().into_iter().enumerate() {
                if j != i {
                    sums[cluster[j]] += 1.0 - ui.dot(&uj);
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..n_clusters)
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                ((b - a) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / n as f64;
    Ok(Silhouette { per_point, mean })
}

/// Min-max scaling of per-layer scores onto `[0, 1]`.
pub fn normalize_across_layers(scores: &[f64]) -> Result<Vec<f64>> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= min || !min.is_finite() || !max.is_finite() {
        return Err(Error::InvalidArgument(
            "layer normalization needs at least two distinct finite scores".into(),
        ));
    }
    Ok(scores.iter().map(|s| (s - min) / (max - min)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2d {
    /// `n x 2` principal coordinates.
    pub coords: Array2<f64>,
    /// Unit-normalized input rows, for external cosine-metric embedders.
    pub normalized: Array2<f64>,
}

/// Two-component PCA of the row-normalized vectors.
///
/// Each axis is sign-fixed so its largest-magnitude loading is positive.
/// Axes beyond the available rank are zero.
pub fn embed_2d(vectors: ArrayView2<f64>) -> Result<Embedding2d> {
    let n = vectors.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "embedding needs at least 3 points, got {n}"
        )));
    }
    let normalized = normalize_rows(vectors)?;
    let mean = normalized.mean_axis(Axis(0)).expect("nonempty");
    let centered = &normalized - &mean;
    let d = centered.ncols();
    let mut coords = Array2::zeros((n, 2));

    // Eigendecompose whichever of the Gram (n x n) or covariance (d x d) is smaller.
    if n <= d {
        let gram = centered.dot(&centered.t());
        let (values, vectors) = top_eigen(&gram, 2);
        for (axis, (lambda, u)) in values.iter().zip(&vectors).enumerate() {
            if *lambda <= eigen_floor(&values) {
                continue;
            }
            let scale = lambda.sqrt();
            for i in 0..n {
                coords[[i, axis]] = u[i] * scale;
            }
        }
    } else {
        let cov = centered.t().dot(&centered);
        let (values, vectors) = top_eigen(&cov, 2);
        for (axis, (lambda, v)) in values.iter().zip(&vectors).enumerate() {
            if *lambda <= eigen_floor(&values) {
                continue;
            }
            let v = ndarray::Array1::from(v.clone());
            coords.column_mut(axis).assign(&centered.dot(&v));
        }
    }
    for mut col in coords.columns_mut() {
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(Embedding2d { coords, normalized })
}

fn eigen_floor(values: &[f64]) -> f64 {
    values.first().copied().unwrap_or(0.0).abs() * 1e-12 + 1e-14
}

/// The `count` largest eigenpairs of a symmetric matrix, descending.
fn top_eigen(m: &Array2<f64>, count: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = m.nrows();
    let mat = DMatrix::from_fn(dim, dim, |i, j| m[[i, j]]);
    let eig = SymmetricEigen::new(mat);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    order.truncate(count);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    (values, vectors)
}

/// Response-length class of a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Short,
    Long,
    Excluded,
}

impl fmt::Display for LengthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthClass::Short => "short",
            LengthClass::Long => "long",
            LengthClass::Excluded => "excluded",
        })
    }
}

pub const SHORT_MAX_TOKENS: usize = 1000;
pub const LONG_MIN_TOKENS: usize = 8000;

/// Short below `short_max` tokens, long above `long_min`, excluded otherwise.
pub fn length_split_labels(
    records: &[StepRecord],
    short_max: usize,
    long_min: usize,
) -> Vec<LengthClass> {
    records
        .iter()
        .map(|r| {
            let len = r.response_length_tokens;
            if len < short_max {
                LengthClass::Short
            } else if len > long_min {
                LengthClass::Long
            } else {
                LengthClass::Excluded
            }
        })
        .collect()
}

//! Behavior vectors built from decoder rows and the projection-based
//! intervention
//!
//! ```text
//! h' = h + alpha * v (v^T h)
//! ```
//!
//! `alpha = -1` removes the component of `h` along `v`, `alpha = 0` is the
//! identity and `alpha > 0` amplifies it, so the sign of `alpha` matches the
//! direction of the behavioral effect.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::ChannelActivity;
use crate::io;

/// Default activity ratio above which a channel counts as shared.
pub const DEFAULT_OVERLAP_RATIO: f64 = 0.5;
/// Strength grid swept by the CLI.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [-1.5, -1.0, 0.0, 1.0, 1.5];

pub const STEERING_META_FILE: &str = "steering.json";
pub const STEERING_BIN_FILE: &str = "steering.bin";

/// Norm deviation tolerated silently.
const UNIT_TOLERANCE: f64 = 1e-6;
/// Norm deviation repaired with a warning; anything larger is an error.
const RENORMALIZE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVector {
    /// Unit-norm direction of length `d`.
    pub direction: Vec<f32>,
    pub behavior: String,
    /// Decoder rows averaged into the direction.
    pub provenance: Vec<usize>,
}

impl SteeringVector {
    /// Wraps a direction, normalizing it to unit length.
    pub fn new(
        direction: &[f64],
        behavior: impl Into<String>,
        provenance: Vec<usize>,
    ) -> Result<Self> {
        let norm = l2(direction);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroDirection);
        }
        Ok(SteeringVector {
            direction: direction.iter().map(|&x| (x / norm) as f32).collect(),
            behavior: behavior.into(),
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    pub fn direction_f64(&self) -> Vec<f64> {
        self.direction.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation("direction", "non-finite entry"));
        }
        let norm = l2(&self.direction_f64());
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::validation(
                "direction",
                format!("norm {norm} is not 1"),
            ));
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Keeps, per behavior, the channels whose activity under every other
/// behavior is below `overlap_ratio` times their activity under this one.
///
/// A channel missing from another behavior's list counts as inactive there.
/// Retained channels keep the order of the input lists.
pub fn filter_exclusive_channels(
    activities: &BTreeMap<String, Vec<ChannelActivity>>,
    overlap_ratio: f64,
) -> Result<BTreeMap<String, Vec<usize>>> {
    if activities.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "exclusivity needs at least 2 behaviors, got {}",
            activities.len()
        )));
    }
    if !(overlap_ratio > 0.0 && overlap_ratio.is_finite()) {
        return Err(Error::InvalidArgument(
            "overlap ratio must be positive".into(),
        ));
    }
    if let Some((name, _)) = activities.iter().find(|(_, list)| list.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "no channel activities for behavior {name}"
        )));
    }
    let lookup: BTreeMap<&str, HashMap<usize, f64>> = activities
        .iter()
        .map(|(name, list)| {
            let map = list.iter().map(|c| (c.channel_index, c.activity)).collect();
            (name.as_str(), map)
        })
        .collect();

    let mut kept = BTreeMap::new();
    for (name, list) in activities {
        let exclusive = list
            .iter()
            .filter(|c| {
                lookup
                    .iter()
                    .filter(|(other, _)| **other != name.as_str())
                    .all(|(_, map)| {
                        let elsewhere = map.get(&c.channel_index).copied().unwrap_or(0.0);
                        elsewhere < overlap_ratio * c.activity
                    })
            })
            .map(|c| c.channel_index)
            .collect();
        kept.insert(name.clone(), exclusive);
    }
    Ok(kept)
}

/// Averages the unit-normalized decoder rows `channels` of `w_dec` (`D x d`)
/// and normalizes the mean to unit length.
pub fn build_behavior_vector(
    w_dec: ArrayView2<f64>,
    channels: &[usize],
    behavior: &str,
) -> Result<SteeringVector> {
    if channels.is_empty() {
        return Err(Error::InvalidArgument("no channels selected".into()));
    }
    let (hidden, d) = w_dec.dim();
    let mut sum = vec![0.0; d];
    for &c in channels {
        if c >= hidden {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {hidden} decoder rows"
            )));
        }
        let row = w_dec.row(c);
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::ZeroColumn { index: c });
        }
        for (s, &x) in sum.iter_mut().zip(&row) {
            *s += x / norm;
        }
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / channels.len() as f64).collect();
    // Relative floor: the mean of unit vectors has norm at most 1.
    if l2(&mean) < 1e-9 {
        return Err(Error::ZeroDirection);
    }
    SteeringVector::new(&mean, behavior, channels.to_vec())
}

/// `h + alpha * v (v^T h)`, computed in f64 with `v` renormalized.
pub fn apply_steering(h: &[f64], v: &SteeringVector, alpha: f64) -> Result<Vec<f64>> {
    if h.len() != v.dim() {
        return Err(Error::Dimension(format!(
            "activation has dim {}, steering vector {}",
            h.len(),
            v.dim()
        )));
    }
    let mut dir = v.direction_f64();
    let norm = l2(&dir);
    if (norm - 1.0).abs() > RENORMALIZE_TOLERANCE || norm.is_nan() {
        return Err(Error::validation(
            "direction",
            format!("norm {norm} is not 1"),
        ));
    }
    if (norm - 1.0).abs() > UNIT_TOLERANCE {
        log::warn!("steering vector norm {norm} renormalized");
    }
    dir.iter_mut().for_each(|x| *x /= norm);
    let coeff = alpha * dot(&dir, h);
    Ok(h.iter().zip(&dir).map(|(&x, &u)| x + coeff * u).collect())
}

/// `sum_i coefficients[i] * vectors[i].direction`, not renormalized.
pub fn combine_steering(vectors: &[SteeringVector], coefficients: &[f64]) -> Result<Vec<f64>> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("no vectors to combine".into()));
    }
    if vectors.len() != coefficients.len() {
        return Err(Error::SizeMismatch {
            what: "coefficients".into(),
            expected: vectors.len() as u64,
            found: coefficients.len() as u64,
        });
    }
    let d = vectors[0].dim();
    let mut out = vec![0.0; d];
    for (v, &c) in vectors.iter().zip(coefficients) {
        if v.dim() != d {
            return Err(Error::Dimension(format!(
                "vector dims {} and {d} differ",
                v.dim()
            )));
        }
        for (o, x) in out.iter_mut().zip(v.direction_f64()) {
            *o += c * x;
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct SteeringMeta {
    behavior: String,
    provenance: Vec<usize>,
    d: usize,
    dtype: String,
}

/// Writes `steering.json` (behavior, provenance, dimension) and
/// `steering.bin` (the direction as little-endian f32) into `dir`.
pub fn save_steering(v: &SteeringVector, dir: &Path) -> Result<()> {
    v.validate()?;
    io::ensure_dir(dir)?;
    let meta = SteeringMeta {
        behavior: v.behavior.clone(),
        provenance: v.provenance.clone(),
        d: v.dim(),
        dtype: "f32".into(),
    };
    io::write_json(&dir.join(STEERING_META_FILE), &meta)?;
    io::write_bytes(
        &dir.join(STEERING_BIN_FILE),
        &io::f32_to_le_bytes(v.direction.iter().copied()),
    )
}

pub fn load_steering(dir: &Path) -> Result<SteeringVector> {
    let meta: SteeringMeta = io::read_json(&dir.join(STEERING_META_FILE))?;
    if meta.dtype != "f32" {
        return Err(Error::validation(
            "dtype",
            format!("unsupported dtype {}", meta.dtype),
        ));
    }
    let direction = io::read_f32_file(&dir.join(STEERING_BIN_FILE), meta.d)?;
    let v = SteeringVector {
        direction,
        behavior: meta.behavior,
        provenance: meta.provenance,
    };
    v.validate()?;
    Ok(v)
}

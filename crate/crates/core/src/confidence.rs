//! Confidence directions found by entropy minimization through a linear
//! readout head.
//!
//! A score vector `S` (one entry per decoder row) shifts every activation by
//! `W_dec^T S`; `S` is optimized so the head's output distribution
//! `softmax(W_out^T (h + W_dec^T S) + b_out)` has minimal mean entropy. The
//! gradient is closed-form: with `g_k = -p_k (ln p_k + H)` the derivative of
//! the entropy with respect to logit `k`,
//!
//! ```text
//! dH/dS = W_dec W_out mean_b(g_b)
//! ```
//!
//! The same objective over a small set of fixed directions fits the
//! combination coefficients of the top-scoring channels.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ActivationSet;
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::sae::sampler;
use crate::steering::SteeringVector;

pub const HEAD_META_FILE: &str = "head.json";
pub const HEAD_BIN_FILE: &str = "head.bin";
pub const SCORES_META_FILE: &str = "scores.json";
pub const SCORES_BIN_FILE: &str = "scores.bin";

/// Number of top-scoring channels combined into a confidence vector.
pub const DEFAULT_TOP_K: usize = 3;

const SIMPLEX_TOLERANCE: f64 = 1e-6;
/// Rows evaluated at once when scoring a whole activation set.
const EVAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
}

/// Linear-softmax map from a hidden state to a token distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutHead {
    /// `d x V` weights.
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

impl ReadoutHead {
    pub fn new(w_out: Array2<f32>, b_out: Array1<f32>) -> Result<Self> {
        let head = ReadoutHead { w_out, b_out };
        head.validate()?;
        Ok(head)
    }

    pub fn input_dim(&self) -> usize {
        self.w_out.nrows()
    }

    pub fn vocab(&self) -> usize {
        self.w_out.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab() < 2 {
            return Err(Error::validation("vocab", "needs at least 2 outputs"));
        }
        if self.b_out.len() != self.vocab() {
            return Err(Error::SizeMismatch {
                what: "b_out".into(),
                expected: self.vocab() as u64,
                found: self.b_out.len() as u64,
            });
        }
        if self
            .w_out
            .iter()
            .chain(self.b_out.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::validation("head", "non-finite weight"));
        }
        Ok(())
    }
}

/// Natural-log Shannon entropy of a probability vector, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
        return Err(Error::validation(
            "p",
            "entries must be finite and nonnegative",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::validation("p", format!("sums to {sum}, not 1")));
    }
    Ok(entropy_unchecked(p.iter().copied()))
}

fn entropy_unchecked(p: impl IntoIterator<Item = f64>) -> f64 {
    let h: f64 = p
        .into_iter()
        .filter(|&x| x > 0.0)
        .map(|x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// Max-subtracted softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p = logits.mapv(|v| (v - max).exp());
    let total = p.sum();
    p /= total;
    p
}

/// `softmax(W_out^T h + b_out)`.
pub fn predict(head: &ReadoutHead, h: &[f64]) -> Result<Vec<f64>> {
    if h.len() != head.input_dim() {
        return Err(Error::Dimension(format!(
            "activation has dim {}, head expects {}",
            h.len(),
            head.input_dim()
        )));
    }
    let w = head.w_out.mapv(f64::from);
    let logits = ArrayView1::from(h).dot(&w) + head.b_out.mapv(f64::from);
    Ok(softmax(logits.view()).to_vec())
}

/// Mean output entropy of a batch shifted by `basis^T c`.
///
/// `basis` is `K x d` (decoder rows for score vectors, steering directions
/// for combination coefficients) and `c` has length `K`.
#[derive(Debug, Clone)]
pub struct EntropyObjective {
    w_out: Array2<f64>,
    b_out: Array1<f64>,
    basis: Array2<f64>,
}

impl EntropyObjective {
    pub fn new(head: &ReadoutHead, basis: ArrayView2<f64>) -> Result<Self> {
        head.validate()?;
        if basis.ncols() != head.input_dim() {
            return Err(Error::Dimension(format!(
                "basis vectors have dim {}, head expects {}",
                basis.ncols(),
                head.input_dim()
            )));
        }
        if basis.nrows() == 0 {
            return Err(Error::InvalidArgument("empty basis".into()));
        }
        Ok(EntropyObjective {
            w_out: head.w_out.mapv(f64::from),
            b_out: head.b_out.mapv(f64::from),
            basis: basis.to_owned(),
        })
    }

    pub fn num_coefficients(&self) -> usize {
        self.basis.nrows()
    }

    fn probabilities(&self, batch: ArrayView2<f64>, coeffs: &[f64]) -> Result<Array2<f64>> {
        if coeffs.len() != self.basis.nrows() {
            return Err(Error::Dimension(format!(
                "{} coefficients for {} basis vectors",
                coeffs.len(),
                self.basis.nrows()
            )));
        }
        if batch.ncols() != self.basis.ncols() {
            return Err(Error::Dimension(format!(
                "batch has dim {}, head expects {}",
                batch.ncols(),
                self.basis.ncols()
            )));
        }
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let shift = ArrayView1::from(coeffs).dot(&self.basis);
        let shifted = &batch + &shift;
        let mut logits = shifted.dot(&self.w_out) + &self.b_out;
        for mut row in logits.rows_mut() {
            let p = softmax(row.view());
            row.assign(&p);
        }
        Ok(logits)
    }

    /// Mean entropy over the rows of `batch`.
    pub fn value(&self, batch: ArrayView2<f64>, coeffs: &[f64]) -> Result<f64> {
        let probs = self.probabilities(batch, coeffs)?;
        let total: f64 = probs
            .rows()
            .into_iter()
            .map(|p| entropy_unchecked(p.iter().copied()))
            .sum();
        Ok(total / batch.nrows() as f64)
    }

    /// Mean entropy and its gradient with respect to the coefficients.
    pub fn value_and_grad(
        &self,
        batch: ArrayView2<f64>,
        coeffs: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let probs = self.probabilities(batch, coeffs)?;
        let n = batch.nrows() as f64;
        let mut mean_g = Array1::<f64>::zeros(probs.ncols());
        let mut total = 0.0;
        for p in probs.rows() {
            let h = entropy_unchecked(p.iter().copied());
            total += h;
            for (g, &pk) in mean_g.iter_mut().zip(p) {
                if pk > 0.0 {
                    *g -= pk * (pk.ln() + h);
                }
            }
        }
        mean_g /= n;
        let grad = self.basis.dot(&self.w_out.dot(&mean_g));
        Ok((total / n, grad.to_vec()))
    }

    /// Mean entropy over a whole matrix, evaluated in chunks.
    pub fn value_chunked(&self, data: ArrayView2<f64>, coeffs: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in data.axis_chunks_iter(Axis(0), EVAL_CHUNK) {
            total += self.value(chunk, coeffs)? * chunk.nrows() as f64;
        }
        Ok(total / data.nrows() as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub iters: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            iters: 1000,
            learning_rate: 0.01,
            batch_size: 256,
            seed: 0,
        }
    }
}

impl EntropyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 || self.batch_size == 0 {
            return Err(Error::validation("iters/batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation("learning_rate", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyFit {
    pub coefficients: Vec<f64>,
    /// Minibatch objective before each step.
    pub trajectory: Vec<f64>,
    /// Mean entropy over all rows at the zero start.
    pub initial_entropy: f64,
    /// Mean entropy over all rows at the returned coefficients.
    pub final_entropy: f64,
}

/// Adam with cosine decay from zero coefficients over shuffled minibatches.
pub fn minimize_entropy(
    objective: &EntropyObjective,
    data: ArrayView2<f64>,
    config: &EntropyConfig,
) -> Result<EntropyFit> {
    config.validate()?;
    let n = data.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no activations".into()));
    }
    let k = objective.num_coefficients();
    let mut coeffs = vec![0.0; k];
    let initial_entropy = objective.value_chunked(data, &coeffs)?;
    let schedule = LrSchedule::cosine(config.learning_rate, config.iters);
    let mut adam = Adam::new(k, AdamConfig::default());
    let mut next_batch = sampler(n, config.batch_size, config.seed, 2);
    let mut trajectory = Vec::with_capacity(config.iters);
    for step in 0..config.iters {
        let batch = data.select(Axis(0), &next_batch());
        let (value, grad) = objective.value_and_grad(batch.view(), &coeffs)?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                what: "entropy gradient".into(),
                step,
            });
        }
        trajectory.push(value);
        adam.step(&mut coeffs, &grad, schedule.lr_at(step));
    }
    let final_entropy = objective.value_chunked(data, &coeffs)?;
    Ok(EntropyFit {
        coefficients: coeffs,
        trajectory,
        initial_entropy,
        final_entropy,
    })
}

/// Per-decoder-row scores from entropy minimization.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f32>,
    pub trained_iters: u64,
    pub final_entropy: f64,
}

impl ScoreVector {
    pub fn validate(&self) -> Result<()> {
        if self.scores.iter().any(|v| !v.is_finite()) || !self.final_entropy.is_finite() {
            return Err(Error::validation("scores", "non-finite value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub scores: ScoreVector,
    pub fit: EntropyFit,
}

fn check_head_dim(head: &ReadoutHead, d: usize) -> Result<()> {
    if head.input_dim() != d {
        return Err(Error::Dimension(format!(
            "head expects dim {}, activations have {d}",
            head.input_dim()
        )));
    }
    Ok(())
}

/// Optimizes one score per decoder row of `w_dec` (`D x d`).
pub fn optimize_scores(
    head: &ReadoutHead,
    w_dec: ArrayView2<f64>,
    set: &ActivationSet,
    config: &EntropyConfig,
) -> Result<ScoreOutcome> {
    check_head_dim(head, set.dim)?;
    let objective = EntropyObjective::new(head, w_dec)?;
    let data = set.data_f64();
    let fit = minimize_entropy(&objective, data.view(), config)?;
    let scores: Vec<f32> = fit.coefficients.iter().map(|&v| v as f32).collect();
    // Record the entropy of the stored (f32) scores so it can be reproduced from the file.
    let stored: Vec<f64> = scores.iter().map(|&v| f64::from(v)).collect();
    let final_entropy = objective.value_chunked(data.view(), &stored)?;
    Ok(ScoreOutcome {
        scores: ScoreVector {
            scores,
            trained_iters: config.iters as u64,
            final_entropy,
        },
        fit,
    })
}

/// Indices of the `k` largest `|S|`, descending, ties to the lower index.
pub fn top_scoring_columns(scores: &ScoreVector, k: usize) -> Result<Vec<usize>> {
    let dim = scores.scores.len();
    if k == 0 || k > dim {
        return Err(Error::InvalidArgument(format!(
            "k={k} must lie in 1..={dim}"
        )));
    }
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .abs()
            .total_cmp(&scores.scores[a].abs())
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order)
}

/// Fits one coefficient per steering direction by entropy minimization.
pub fn fit_coefficients(
    head: &ReadoutHead,
    vectors: &[SteeringVector],
    set: &ActivationSet,
    config: &EntropyConfig,
) -> Result<EntropyFit> {
    if vectors.is_empty() {
        return Err(Error::InvalidArgument("no vectors to combine".into()));
    }
    check_head_dim(head, set.dim)?;
    let mut basis = Array2::zeros((vectors.len(), set.dim));
    for (mut row, v) in basis.rows_mut().into_iter().zip(vectors) {
        if v.dim() != set.dim {
            return Err(Error::Dimension(format!(
                "steering vector has dim {}, activations {}",
                v.dim(),
                set.dim
            )));
        }
        row.assign(&Array1::from(v.direction_f64()));
    }
    let objective = EntropyObjective::new(head, basis.view())?;
    minimize_entropy(&objective, set.data_f64().view(), config)
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    kind: HeadKind,
    d: usize,
    vocab: usize,
}

/// Writes `head.json` and `head.bin` (`W_out` row-major, then `b_out`).
pub fn save_head(head: &ReadoutHead, dir: &Path) -> Result<()> {
    head.validate()?;
    io::ensure_dir(dir)?;
    let meta = HeadMeta {
        kind: HeadKind::Linear,
        d: head.input_dim(),
        vocab: head.vocab(),
    };
    io::write_json(&dir.join(HEAD_META_FILE), &meta)?;
    let payload = head.w_out.iter().chain(head.b_out.iter()).copied();
    io::write_bytes(&dir.join(HEAD_BIN_FILE), &io::f32_to_le_bytes(payload))
}

pub fn load_head(dir: &Path) -> Result<ReadoutHead> {
    let meta: HeadMeta = io::read_json(&dir.join(HEAD_META_FILE))?;
    let values = io::read_f32_file(&dir.join(HEAD_BIN_FILE), meta.d * meta.vocab + meta.vocab)?;
    let (w, b) = values.split_at(meta.d * meta.vocab);
    let w_out = Array2::from_shape_vec((meta.d, meta.vocab), w.to_vec())
        .map_err(|e| Error::Dimension(e.to_string()))?;
    ReadoutHead::new(w_out, Array1::from(b.to_vec()))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoresMeta {
    #[serde(rename = "D")]
    hidden: usize,
    trained_iters: u64,
    final_entropy: f64,
    dtype: String,
}

/// Writes `scores.json` (metadata) and `scores.bin` (little-endian f32 scores).
pub fn save_scores(scores: &ScoreVector, dir: &Path) -> Result<()> {
    scores.validate()?;
    io::ensure_dir(dir)?;
    let meta = ScoresMeta {
        hidden: scores.scores.len(),
        trained_iters: scores.trained_iters,
        final_entropy: scores.final_entropy,
        dtype: "f32".into(),
    };
    io::write_json(&dir.join(SCORES_META_FILE), &meta)?;
    io::write_bytes(
        &dir.join(SCORES_BIN_FILE),
        &io::f32_to_le_bytes(scores.scores.iter().copied()),
    )
}

pub fn load_scores(dir: &Path) -> Result<ScoreVector> {
    let meta: ScoresMeta = io::read_json(&dir.join(SCORES_META_FILE))?;
    if meta.dtype != "f32" {
        return Err(Error::validation(
            "dtype",
            format!("unsupported dtype {}", meta.dtype),
        ));
    }
    let scores = ScoreVector {
        scores: io::read_f32_file(&dir.join(SCORES_BIN_FILE), meta.hidden)?,
        trained_iters: meta.trained_iters,
        final_entropy: meta.final_entropy,
    };
    scores.validate()?;
    Ok(scores)
}

//! ReLU sparse autoencoder: forward pass, training objective, gradients and
//! the minibatch Adam training loop.
//!
//! ```text
//! z = ReLU(W_enc^T h + b_enc)
//! h_hat = W_dec^T z + b_dec
//! loss = mean ||h_hat - h||^2 + lambda * mean sum_j c_j z_j
//! ```
//!
//! The weighted L1 term stands in for the non-differentiable L0 count during
//! training; the exact L0 is reported alongside as a metric. With
//! [`SparsityPenalty::L1`] every `c_j` is 1; with the default
//! [`SparsityPenalty::DecoderWeightedL1`] `c_j = ||W_dec[j]||`, which stops the
//! optimizer from shrinking codes by inflating decoder rows.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ActivationSet, SaeModel};
use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, AdamConfig, LrSchedule};

/// A latent counts as active above this value.
pub const ACTIVE_THRESHOLD: f64 = 1e-6;

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Dimension(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

impl SaeModel {
    /// `ReLU(W_enc^T h + b_enc)`.
    pub fn encode(&self, h: &[f64]) -> Result<Vec<f64>> {
        check_len("input", h.len(), self.input_dim())?;
        let mut z: Vec<f64> = self.b_enc.iter().map(|&b| f64::from(b)).collect();
        for (row, &hi) in self.w_enc.rows().into_iter().zip(h) {
            for (zj, &w) in z.iter_mut().zip(row) {
                *zj += f64::from(w) * hi;
            }
        }
        z.iter_mut().for_each(|v| *v = v.max(0.0));
        Ok(z)
    }

    /// `W_dec^T z + b_dec`.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_len("code", z.len(), self.hidden_dim())?;
        let mut h: Vec<f64> = self.b_dec.iter().map(|&b| f64::from(b)).collect();
        for (row, &zj) in self.w_dec.rows().into_iter().zip(z) {
            if zj == 0.0 {
                continue;
            }
            for (hi, &w) in h.iter_mut().zip(row) {
                *hi += f64::from(w) * zj;
            }
        }
        Ok(h)
    }

    pub fn reconstruct(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.decode(&self.encode(h)?)
    }

    /// Decoder rows widened to f64 (`D x d`).
    pub fn decoder_f64(&self) -> Array2<f64> {
        self.w_dec.mapv(f64::from)
    }

    /// Loss terms of this model on a batch of rows.
    pub fn loss(&self, batch: ArrayView2<f64>) -> Result<LossTerms> {
        SaeParams::from_model(self).loss(batch, self.lambda, SparsityPenalty::default())
    }
}

/// Latent codes for every row of an activation set (`N x D`).
pub fn latent_features(model: &SaeModel, set: &ActivationSet) -> Result<Array2<f64>> {
    latent_features_matrix(model, set.data_f64().view())
}

/// Latent codes for every row of `data`; zero rows in gives an empty matrix out.
pub fn latent_features_matrix(model: &SaeModel, data: ArrayView2<f64>) -> Result<Array2<f64>> {
    if data.ncols() != model.input_dim() {
        return Err(Error::Dimension(format!(
            "activations have dim {}, model expects {}",
            data.ncols(),
            model.input_dim()
        )));
    }
    let params = SaeParams::from_model(model);
    let mut z = data.dot(&params.w_enc) + &params.b_enc;
    z.mapv_inplace(|v| v.max(0.0));
    Ok(z)
}

/// Relative reconstruction error `sqrt(sum ||h_hat - h||^2 / sum ||h||^2)`.
pub fn relative_reconstruction_error(model: &SaeModel, data: ArrayView2<f64>) -> Result<f64> {
    let params = SaeParams::from_model(model);
    let z = latent_features_matrix(model, data)?;
    let recon = z.dot(&params.w_dec) + &params.b_dec;
    let err: f64 = (&recon - &data).iter().map(|v| v * v).sum();
    let norm: f64 = data.iter().map(|v| v * v).sum();
    Ok(if norm == 0.0 {
        err.sqrt()
    } else {
        (err / norm).sqrt()
    })
}

/// Mean number of active latents per row.
pub fn mean_l0(latents: ArrayView2<f64>) -> f64 {
    if latents.nrows() == 0 {
        return 0.0;
    }
    let active = latents.iter().filter(|&&v| v > ACTIVE_THRESHOLD).count();
    active as f64 / latents.nrows() as f64
}

/// How the encoder is initialized relative to the decoder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Encoder and decoder drawn independently.
    Independent,
    /// Encoder starts as the decoder transpose.
    #[default]
    Tied,
}

/// Differentiable stand-in for the L0 count in the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityPenalty {
    /// `sum_j z_j`.
    L1,
    /// `sum_j z_j * ||W_dec[j]||`; unaffected by trading code scale for decoder scale.
    #[default]
    DecoderWeightedL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    /// Mean over the batch of the squared L2 reconstruction error.
    pub reconstruction_mse: f64,
    /// `lambda` times the mean (weighted) L1 norm of the latent code.
    pub sparsity_penalty: f64,
    /// Mean exact L0 of the latent code (metric only).
    pub mean_l0: f64,
}

/// f64 working copy of the weights used during training and gradient checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Array2<f64>,
    pub b_enc: Array1<f64>,
    pub w_dec: Array2<f64>,
    pub b_dec: Array1<f64>,
}

/// Gradients with the same layout as [`SaeParams`].
pub type SaeGrads = SaeParams;

impl SaeParams {
    pub fn from_model(model: &SaeModel) -> Self {
        SaeParams {
            w_enc: model.w_enc.mapv(f64::from),
            b_enc: model.b_enc.mapv(f64::from),
            w_dec: model.w_dec.mapv(f64::from),
            b_dec: model.b_dec.mapv(f64::from),
        }
    }

    pub fn to_model(&self, lambda: f64, trained_steps: u64) -> SaeModel {
        SaeModel {
            w_enc: self.w_enc.mapv(|v| v as f32),
            b_enc: self.b_enc.mapv(|v| v as f32),
            w_dec: self.w_dec.mapv(|v| v as f32),
            b_dec: self.b_dec.mapv(|v| v as f32),
            lambda,
            trained_steps,
        }
    }

    /// Gaussian weights with standard deviation `1/sqrt(d)`, zero biases.
    pub fn init(d: usize, hidden: usize, scheme: InitScheme, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let w_dec = Array2::from_shape_simple_fn((hidden, d), || normal.sample(rng));
        let w_enc = match scheme {
            InitScheme::Independent => {
                Array2::from_shape_simple_fn((d, hidden), || normal.sample(rng))
            }
            InitScheme::Tied => w_dec.t().as_standard_layout().into_owned(),
        };
        SaeParams {
            w_enc,
            b_enc: Array1::zeros(hidden),
            w_dec,
            b_dec: Array1::zeros(d),
        }
    }

    fn check_batch(&self, batch: ArrayView2<f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.ncols() != self.w_enc.nrows() {
            return Err(Error::Dimension(format!(
                "batch has dim {}, model expects {}",
                batch.ncols(),
                self.w_enc.nrows()
            )));
        }
        Ok(())
    }

    pub fn loss(
        &self,
        batch: ArrayView2<f64>,
        lambda: f64,
        penalty: SparsityPenalty,
    ) -> Result<LossTerms> {
        self.check_batch(batch)?;
        let mut z = batch.dot(&self.w_enc) + &self.b_enc;
        z.mapv_inplace(|v| v.max(0.0));
        let resid = z.dot(&self.w_dec) + &self.b_dec - batch;
        let weights = self.penalty_weights(penalty);
        Ok(self.terms(&z, &resid, lambda, &weights))
    }

    /// Per-latent multipliers of the L1 term.
    fn penalty_weights(&self, penalty: SparsityPenalty) -> Array1<f64> {
        match penalty {
            SparsityPenalty::L1 => Array1::ones(self.w_dec.nrows()),
            SparsityPenalty::DecoderWeightedL1 => self
                .w_dec
                .rows()
                .into_iter()
                .map(|r| r.dot(&r).sqrt())
                .collect(),
        }
    }

    fn terms(
        &self,
        z: &Array2<f64>,
        resid: &Array2<f64>,
        lambda: f64,
        weights: &Array1<f64>,
    ) -> LossTerms {
        let n = z.nrows() as f64;
        let mse = resid.iter().map(|v| v * v).sum::<f64>() / n;
        let l1 = z.dot(weights).sum() / n;
        LossTerms {
            total: mse + lambda * l1,
            reconstruction_mse: mse,
            sparsity_penalty: lambda * l1,
            mean_l0: mean_l0(z.view()),
        }
    }

    /// Loss and its analytic gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        batch: ArrayView2<f64>,
        lambda: f64,
        penalty: SparsityPenalty,
    ) -> Result<(LossTerms, SaeGrads)> {
        self.check_batch(batch)?;
        let n = batch.nrows() as f64;
        let pre = batch.dot(&self.w_enc) + &self.b_enc;
        let z = pre.mapv(|v| v.max(0.0));
        let resid = z.dot(&self.w_dec) + &self.b_dec - batch;
        let weights = self.penalty_weights(penalty);
        let terms = self.terms(&z, &resid, lambda, &weights);

        let d_out = resid * (2.0 / n);
        let mut w_dec = z.t().dot(&d_out);
        if penalty == SparsityPenalty::DecoderWeightedL1 {
            // d/dr_j of lambda/n * sum_b z_bj ||r_j|| = lambda/n * (sum_b z_bj) r_j / ||r_j||
            let usage = z.sum_axis(Axis(0));
            for (j, (mut g, r)) in w_dec
                .rows_mut()
                .into_iter()
                .zip(self.w_dec.rows())
                .enumerate()
            {
                if weights[j] > 0.0 {
                    g.scaled_add(lambda * usage[j] / (n * weights[j]), &r);
                }
            }
        }
        let b_dec = d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&self.w_dec.t());
        let scaled = weights.mapv(|w| lambda * w / n);
        ndarray::Zip::from(d_pre.rows_mut())
            .and(pre.rows())
            .for_each(|mut g, p| {
                ndarray::Zip::from(&mut g)
                    .and(&p)
                    .and(&scaled)
                    .for_each(|g, &p, &s| {
                        *g = if p > 0.0 { *g + s } else { 0.0 };
                    });
            });
        let w_enc = batch.t().dot(&d_pre);
        let b_enc = d_pre.sum_axis(Axis(0));
        Ok((
            terms,
            SaeGrads {
                w_enc,
                b_enc,
                w_dec,
                b_dec,
            },
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Hidden width `D`.
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub penalty: SparsityPenalty,
    pub init: InitScheme,
    /// Total optimizer steps; when absent, `epochs` full passes are run.
    pub steps: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub input_norm: InputNorm,
}

/// Affine rescaling applied to the activations before training. The inverse
/// is folded into the trained weights, so the saved model acts on raw inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputNorm {
    #[default]
    Raw,
    /// Zero mean, unit variance per dimension.
    Standardize,
    /// Multiply every input by a fixed positive factor.
    Scale(f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_dim: 2048,
            batch_size: 1024,
            learning_rate: 1e-4,
            warmup_fraction: 0.10,
            lambda: 2e-3,
            penalty: SparsityPenalty::default(),
            init: InitScheme::default(),
            steps: None,
            epochs: 50,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            input_norm: InputNorm::Raw,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::validation(field, msg));
        if self.hidden_dim == 0 {
            return bad("hidden_dim", "must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction", "must lie in [0, 1)");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be nonnegative");
        }
        if let InputNorm::Scale(f) = self.input_norm {
            if !(f > 0.0 && f.is_finite()) {
                return bad("input_norm", "scale factor must be positive");
            }
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return bad("steps", "must be positive");
        }
        Ok(())
    }

    /// Number of optimizer steps for a dataset of `n` rows.
    pub fn total_steps(&self, n: usize) -> usize {
        self.steps
            .unwrap_or_else(|| self.epochs * n.div_ceil(self.batch_size))
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub l1: f64,
    pub l0: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SaeModel,
    pub log: Vec<LossLogRow>,
}

/// Writes the loss log as CSV with header `step,lr,total,mse,l1,l0`.
pub fn write_loss_csv(log: &[LossLogRow], path: &Path) -> Result<()> {
    let mut text = String::from("step,lr,total,mse,l1,l0\n");
    for r in log {
        let _ = writeln!(
            text,
            "{},{},{},{},{},{}",
            r.step, r.lr, r.total, r.mse, r.l1, r.l0
        );
    }
    io::write_bytes(path, text.as_bytes())
}

/// Cycles through shuffled epochs, yielding row indices for each minibatch.
/// The final batch of an epoch may be partial.
struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Self {
        let mut s = EpochSampler {
            order: (0..n).collect(),
            pos: 0,
            batch: batch.min(n),
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.order.len());
        let out = &self.order[self.pos..end];
        self.pos = end;
        out
    }
}

pub(crate) fn sampler(
    n: usize,
    batch: usize,
    seed: u64,
    stream: u64,
) -> impl FnMut() -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut s = EpochSampler::new(n, batch, rng);
    move || s.next_batch().to_vec()
}

struct Standardizer {
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl Standardizer {
    fn fit(data: ArrayView2<f64>, norm: InputNorm) -> Option<Self> {
        let d = data.ncols();
        match norm {
            InputNorm::Raw => None,
            InputNorm::Standardize => {
                let mean = data.mean_axis(Axis(0)).expect("nonempty");
                let std = data
                    .std_axis(Axis(0), 0.0)
                    .mapv(|s| if s > 0.0 { s } else { 1.0 });
                Some(Standardizer { mean, std })
            }
            InputNorm::Scale(factor) => Some(Standardizer {
                mean: Array1::zeros(d),
                std: Array1::from_elem(d, 1.0 / factor),
            }),
        }
    }

    fn apply(&self, data: &Array2<f64>) -> Array2<f64> {
        (data - &self.mean) / &self.std
    }

    /// Rewrites weights trained on transformed inputs so they act on raw inputs.
    fn fold(&self, p: &mut SaeParams) {
        for (mut row, &s) in p.w_enc.rows_mut().into_iter().zip(&self.std) {
            row.mapv_inplace(|w| w / s);
        }
        let shift = self.mean.dot(&p.w_enc);
        p.b_enc -= &shift;
        for mut row in p.w_dec.rows_mut() {
            row *= &self.std;
        }
        p.b_dec = &p.b_dec * &self.std + &self.mean;
    }
}

/// Trains an SAE on an activation set.
pub fn train(set: &ActivationSet, config: &TrainConfig) -> Result<TrainOutcome> {
    train_matrix(set.data_f64(), config)
}

/// Trains an SAE on the rows of `data` (`N x d`).
pub fn train_matrix(data: Array2<f64>, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let standardizer = Standardizer::fit(data.view(), config.input_norm);
    let data = match &standardizer {
        Some(s) => s.apply(&data),
        None => data,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = SaeParams::init(d, config.hidden_dim, config.init, &mut rng);
    let total = config.total_steps(n);
    let schedule = LrSchedule::new(config.learning_rate, total, config.warmup_fraction);
    let mut next_batch = sampler(n, config.batch_size, config.seed, 1);

    let adam = config.adam();
    let mut opt_w_enc = Adam::new(params.w_enc.len(), adam);
    let mut opt_b_enc = Adam::new(params.b_enc.len(), adam);
    let mut opt_w_dec = Adam::new(params.w_dec.len(), adam);
    let mut opt_b_dec = Adam::new(params.b_dec.len(), adam);

    let mut log = Vec::with_capacity(total);
    for step in 0..total {
        let idx = next_batch();
        let batch = data.select(Axis(0), &idx);
        let (terms, grads) = params.loss_and_grad(batch.view(), config.lambda, config.penalty)?;
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                what: "loss".into(),
                step,
            });
        }
        let lr = schedule.lr_at(step);
        log.push(LossLogRow {
            step,
            lr,
            total: terms.total,
            mse: terms.reconstruction_mse,
            l1: terms.sparsity_penalty,
            l0: terms.mean_l0,
        });
        opt_w_enc.step(slice_mut(&mut params.w_enc), slice(&grads.w_enc), lr);
        opt_b_enc.step(slice_mut(&mut params.b_enc), slice(&grads.b_enc), lr);
        opt_w_dec.step(slice_mut(&mut params.w_dec), slice(&grads.w_dec), lr);
        opt_b_dec.step(slice_mut(&mut params.b_dec), slice(&grads.b_dec), lr);
    }

    if let Some(s) = &standardizer {
        s.fold(&mut params);
    }
    let model = params.to_model(config.lambda, total as u64);
    model.validate()?;
    Ok(TrainOutcome { model, log })
}

fn slice<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Moving average of a series over a window (shorter at the tail is ignored).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

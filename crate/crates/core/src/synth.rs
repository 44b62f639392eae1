//! Synthetic dictionary-recovery benchmark.
//!
//! Samples `h = W a + eps` with a unit-norm, incoherent dictionary `W`
//! (`d x m`), `k`-sparse codes `a` whose nonzeros have magnitude at least
//! `alpha_min`, and noise bounded by `noise_bound`. An SAE is trained on the
//! samples and its decoder rows are matched one-to-one against the true atoms
//! by absolute cosine similarity.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ActivationSet, SaeModel, StepRecord};
use crate::error::{Error, Result};
use crate::geometry::{incoherence, normalize_rows};
use crate::hungarian::min_cost_assignment;
use crate::sae::{self, InputNorm, LossLogRow, TrainConfig};

/// Alignment at or above this counts an atom as recovered.
pub const RECOVERY_THRESHOLD: f64 = 0.9;

/// Inputs are multiplied by this factor before SAE training in the bench.
pub const BENCH_INPUT_SCALE: f64 = 0.02;
pub const BENCH_EPOCHS: usize = 500;

const SAMPLE_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub d: usize,
    /// Number of true atoms.
    pub m: usize,
    /// Nonzeros per code.
    pub k: usize,
    pub alpha_min: f64,
    /// Coefficient magnitudes are uniform on `[alpha_min, alpha_max_ratio * alpha_min]`.
    pub alpha_max_ratio: f64,
    /// Draw a random sign per coefficient. A ReLU SAE with one latent per
    /// atom can only represent one sign per atom, so this is off by default.
    pub signed: bool,
    pub noise_bound: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub target_mu: f64,
    /// Orthonormalize the dictionary when `m <= d`.
    pub orthogonalize: bool,
    pub max_attempts: usize,
    /// SAE width; defaults to `m`.
    pub sae_width: Option<usize>,
    pub train: TrainConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 128,
            m: 64,
            k: 3,
            alpha_min: 0.5,
            alpha_max_ratio: 2.0,
            signed: false,
            noise_bound: 0.01,
            n_samples: 50_000,
            seed: 0,
            target_mu: 0.5,
            orthogonalize: false,
            max_attempts: 100,
            sae_width: None,
            train: TrainConfig {
                hidden_dim: 64,
                epochs: BENCH_EPOCHS,
                input_norm: InputNorm::Scale(BENCH_INPUT_SCALE),
                ..TrainConfig::default()
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::validation(field, msg));
        if self.d == 0 || self.m == 0 || self.k == 0 || self.n_samples == 0 {
            return bad("d/m/k/n_samples", "must be positive".into());
        }
        if self.k > self.m {
            return bad("k", format!("k={} exceeds m={}", self.k, self.m));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min.is_finite()) {
            return bad("alpha_min", "must be positive".into());
        }
        if !(self.alpha_max_ratio >= 1.0 && self.alpha_max_ratio.is_finite()) {
            return bad("alpha_max_ratio", "must be at least 1".into());
        }
        if !(self.noise_bound >= 0.0 && self.noise_bound.is_finite()) {
            return bad("noise_bound", "must be nonnegative".into());
        }
        if !(self.target_mu > 0.0 && self.target_mu < 1.0) {
            return bad("target_mu", "must lie in (0, 1)".into());
        }
        if self.max_attempts == 0 {
            return bad("max_attempts", "must be positive".into());
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.sae_width.unwrap_or(self.m)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

/// Modified Gram-Schmidt on the columns, applied twice for stability.
fn orthonormalize_columns(w: &mut Array2<f64>) {
    for _ in 0..2 {
        for j in 0..w.ncols() {
            for i in 0..j {
                let proj = w.column(i).dot(&w.column(j));
                let prev = w.column(i).to_owned();
                w.column_mut(j).scaled_add(-proj, &prev);
            }
            let norm = w.column(j).dot(&w.column(j)).sqrt();
            w.column_mut(j).mapv_inplace(|v| v / norm);
        }
    }
}

fn normalize_columns(w: &mut Array2<f64>) {
    for mut col in w.columns_mut() {
        let norm = col.dot(&col).sqrt();
        col.mapv_inplace(|v| v / norm);
    }
}

/// Unit-norm `d x m` dictionary with incoherence at most `target_mu`.
///
/// Gaussian draws are rejected until the target holds, up to `max_attempts`.
pub fn generate_dictionary(config: &SynthConfig) -> Result<Array2<f64>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = f64::INFINITY;
    for _ in 0..config.max_attempts {
        let mut w = gaussian_matrix(config.d, config.m, &mut rng);
        if config.orthogonalize && config.m <= config.d {
            orthonormalize_columns(&mut w);
        } else {
            normalize_columns(&mut w);
        }
        let mu = if config.m >= 2 {
            incoherence(w.t())?
        } else {
            0.0
        };
        if mu <= config.target_mu {
            return Ok(w);
        }
        best = best.min(mu);
    }
    Err(Error::Unachievable {
        target: config.target_mu,
        best,
        attempts: config.max_attempts,
    })
}

/// Sparse ground-truth code: `(atom, coefficient)` pairs.
pub type SparseCode = Vec<(usize, f64)>;

#[derive(Debug, Clone)]
pub struct SynthData {
    pub set: ActivationSet,
    pub codes: Vec<SparseCode>,
    /// The noise vector added to each sample.
    pub noise: Array2<f64>,
}

fn sample_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SAMPLE_STREAM_BASE + i as u64);
    rng
}

fn ball_noise(d: usize, radius: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    if radius == 0.0 {
        return Array1::zeros(d);
    }
    let mut dir: Array1<f64> = Array1::from_shape_simple_fn(d, || StandardNormal.sample(rng));
    let norm = dir.dot(&dir).sqrt();
    let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
    dir.mapv_inplace(|v| v / norm * r);
    dir
}

/// Draws `n_samples` rows `W a + eps`, each from its own counter-derived stream.
pub fn generate_samples(w: ArrayView2<f64>, config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let (d, m) = w.dim();
    if d != config.d || m != config.m {
        return Err(Error::Dimension(format!(
            "dictionary is {d}x{m}, config says {}x{}",
            config.d, config.m
        )));
    }
    let hi = config.alpha_min * config.alpha_max_ratio;
    let rows: Vec<(Vec<f32>, SparseCode, Array1<f64>)> = (0..config.n_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(config.seed, i);
            let mut support = index::sample(&mut rng, m, config.k).into_vec();
            support.sort_unstable();
            let code: SparseCode = support
                .into_iter()
                .map(|atom| {
                    let mag = if hi > config.alpha_min {
                        rng.random_range(config.alpha_min..=hi)
                    } else {
                        config.alpha_min
                    };
                    let sign = if config.signed && rng.random::<bool>() {
                        -1.0
                    } else {
                        1.0
                    };
                    (atom, sign * mag)
                })
                .collect();
            let noise = ball_noise(d, config.noise_bound, &mut rng);
            let mut h = noise.clone();
            for &(atom, c) in &code {
                h.scaled_add(c, &w.column(atom));
            }
            (h.iter().map(|&v| v as f32).collect(), code, noise)
        })
        .collect();

    let mut data = Array2::zeros((config.n_samples, d));
    let mut noise = Array2::zeros((config.n_samples, d));
    let mut codes = Vec::with_capacity(config.n_samples);
    for (i, (h, code, eps)) in rows.into_iter().enumerate() {
        data.row_mut(i).assign(&Array1::from(h));
        noise.row_mut(i).assign(&eps);
        codes.push(code);
    }
    let records = (0..config.n_samples)
        .map(|i| StepRecord::unlabeled(format!("synth-{i}"), 0))
        .collect();
    let set = ActivationSet::new("synthetic", 0, data, records)?;
    Ok(SynthData { set, codes, noise })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// `assignment[i]` is the learned row matched to true atom `i`.
    pub assignment: Vec<usize>,
    /// `|cos|` between true atom `i` and its matched row.
    pub scores: Vec<f64>,
}

impl Matching {
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }

    pub fn fraction_above(&self, threshold: f64) -> f64 {
        self.scores.iter().filter(|&&s| s >= threshold).count() as f64 / self.scores.len() as f64
    }
}

/// One-to-one matching of true atoms (columns of `w_true`, `d x m`) to learned
/// atoms (rows of `w_learned`, `D x d`) maximizing total absolute cosine.
///
/// Zero-norm learned rows are skipped.
pub fn match_dictionaries(w_true: ArrayView2<f64>, w_learned: ArrayView2<f64>) -> Result<Matching> {
    let (d, m) = w_true.dim();
    if w_learned.ncols() != d {
        return Err(Error::Dimension(format!(
            "learned atoms have dim {}, true atoms {d}",
            w_learned.ncols()
        )));
    }
    let truth = normalize_rows(w_true.t())?;
    let usable: Vec<usize> = w_learned
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| r.dot(r) > 0.0)
        .map(|(i, _)| i)
        .collect();
    let skipped = w_learned.nrows() - usable.len();
    if skipped > 0 {
        log::warn!("{skipped} zero-norm learned atoms excluded from matching");
    }
    if usable.len() < m {
        return Err(Error::InvalidArgument(format!(
            "{} usable learned atoms for {m} true atoms",
            usable.len()
        )));
    }
    let learned = normalize_rows(w_learned.select(Axis(0), &usable).view())?;
    let abs_cos = truth.dot(&learned.t()).mapv(f64::abs);
    let cost = abs_cos.mapv(|c| -c);
    let cols = min_cost_assignment(cost.view());
    let scores = cols
        .iter()
        .enumerate()
        .map(|(i, &j)| abs_cos[[i, j]])
        .collect();
    let assignment = cols.into_iter().map(|j| usable[j]).collect();
    Ok(Matching { assignment, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub mean_alignment: f64,
    #[serde(rename = "fraction_above_0.9")]
    pub fraction_above_0_9: f64,
    /// Incoherence of the matched learned atoms.
    pub mu_measured: f64,
    /// Incoherence of the generating dictionary.
    pub mu_true: f64,
    pub mean_l0: f64,
    pub recon_error: f64,
    pub train_steps: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct RecoveryRun {
    pub report: RecoveryReport,
    pub dictionary: Array2<f64>,
    pub model: SaeModel,
    pub matching: Matching,
    pub loss_log: Vec<LossLogRow>,
}

/// Generate, train, match and summarize.
pub fn run_recovery_experiment(config: &SynthConfig) -> Result<RecoveryRun> {
    config.validate()?;
    let started = Instant::now();
    let dictionary = generate_dictionary(config)?;
    let synth = generate_samples(dictionary.view(), config)?;
    let mut train = config.train.clone();
    train.hidden_dim = config.width();
    let outcome = sae::train(&synth.set, &train)?;
    log::info!(
        "trained {} steps in {:.1}s",
        outcome.log.len(),
        started.elapsed().as_secs_f64()
    );

    let decoder = outcome.model.decoder_f64();
    let matching = match_dictionaries(dictionary.view(), decoder.view())?;
    let matched = decoder.select(Axis(0), &matching.assignment);
    let mu_measured = if matched.nrows() >= 2 {
        incoherence(matched.view())?
    } else {
        0.0
    };
    let mu_true = if config.m >= 2 {
        incoherence(dictionary.t())?
    } else {
        0.0
    };
    let data = synth.set.data_f64();
    let latents = sae::latent_features_matrix(&outcome.model, data.view())?;
    let report = RecoveryReport {
        mean_alignment: matching.mean(),
        fraction_above_0_9: matching.fraction_above(RECOVERY_THRESHOLD),
        mu_measured,
        mu_true,
        mean_l0: sae::mean_l0(latents.view()),
        recon_error: sae::relative_reconstruction_error(&outcome.model, data.view())?,
        train_steps: outcome.log.len(),
        final_loss: outcome.log.last().map_or(f64::NAN, |r| r.total),
    };
    Ok(RecoveryRun {
        report,
        dictionary,
        model: outcome.model,
        matching,
        loss_log: outcome.log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(d: usize, m: usize, k: usize) -> SynthConfig {
        SynthConfig {
            d,
            m,
            k,
            n_samples: 200,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn orthogonalized_dictionary_is_incoherent() {
        let cfg = SynthConfig {
            orthogonalize: true,
            ..small(32, 16, 2)
        };
        let w = generate_dictionary(&cfg).unwrap();
        assert!(incoherence(w.t()).unwrap() <= 1e-9);
        for col in w.columns() {
            assert!((col.dot(&col) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn wide_ambient_space_gives_low_incoherence() {
        let cfg = SynthConfig {
            target_mu: 0.35,
            ..small(256, 64, 3)
        };
        let w = generate_dictionary(&cfg).unwrap();
        assert!(incoherence(w.t()).unwrap() < 0.35);
    }

    #[test]
    fn impossible_target_reports_best() {
        let cfg = SynthConfig {
            target_mu: 0.01,
            max_attempts: 3,
            ..small(8, 16, 2)
        };
        match generate_dictionary(&cfg).unwrap_err() {
            Error::Unachievable {
                target,
                best,
                attempts,
            } => {
                assert_eq!(target, 0.01);
                assert_eq!(attempts, 3);
                assert!(best > 0.01 && best <= 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn noiseless_single_atom_sample_is_scaled_atom() {
        let cfg = SynthConfig {
            noise_bound: 0.0,
            alpha_max_ratio: 1.0,
            signed: true,
            ..small(16, 8, 1)
        };
        let w = generate_dictionary(&cfg).unwrap();
        let data = generate_samples(w.view(), &cfg).unwrap();
        for (i, code) in data.codes.iter().enumerate() {
            let (atom, c) = code[0];
            assert_eq!(c.abs(), cfg.alpha_min);
            for (j, &v) in data.set.data.row(i).iter().enumerate() {
                assert_eq!(v, (c * w[[j, atom]]) as f32);
            }
        }
    }

    #[test]
    fn samples_match_codes_within_noise_bound() {
        let cfg = small(32, 16, 3);
        let w = generate_dictionary(&cfg).unwrap();
        let data = generate_samples(w.view(), &cfg).unwrap();
        for (i, code) in data.codes.iter().enumerate() {
            assert_eq!(code.len(), 3);
            let mut atoms: Vec<usize> = code.iter().map(|c| c.0).collect();
            atoms.dedup();
            assert_eq!(atoms.len(), 3);
            for &(_, c) in code {
                assert!((cfg.alpha_min..=cfg.alpha_min * cfg.alpha_max_ratio).contains(&c));
            }
            let mut clean = Array1::<f64>::zeros(cfg.d);
            for &(atom, c) in code {
                clean.scaled_add(c, &w.column(atom));
            }
            let h = data.set.data.row(i).mapv(f64::from);
            let resid = &h - &clean;
            assert!(resid.dot(&resid).sqrt() <= cfg.noise_bound + 1e-5);
            let eps = data.noise.row(i);
            assert!(eps.dot(&eps).sqrt() <= cfg.noise_bound + 1e-12);
        }
    }

    #[test]
    fn samples_are_reproducible() {
        let cfg = small(16, 8, 2);
        let w = generate_dictionary(&cfg).unwrap();
        let a = generate_samples(w.view(), &cfg).unwrap();
        let b = generate_samples(w.view(), &cfg).unwrap();
        assert_eq!(a.set.data, b.set.data);
        assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn wrong_dictionary_shape_is_rejected() {
        let cfg = small(16, 8, 2);
        assert!(generate_samples(Array2::zeros((16, 9)).view(), &cfg).is_err());
    }

    #[test]
    fn random_learned_atoms_align_poorly() {
        let cfg = small(128, 64, 3);
        let w = generate_dictionary(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let learned = gaussian_matrix(64, 128, &mut rng);
        let matching = match_dictionaries(w.view(), learned.view()).unwrap();
        assert!(matching.mean() < 0.3, "mean {}", matching.mean());
    }

    #[test]
    fn zero_rows_are_skipped() {
        let cfg = small(8, 3, 1);
        let w = generate_dictionary(&cfg).unwrap();
        let mut learned = Array2::zeros((4, 8));
        for (i, row) in [0, 2, 3].into_iter().enumerate() {
            learned.row_mut(row).assign(&w.column(i));
        }
        let matching = match_dictionaries(w.view(), learned.view()).unwrap();
        assert_eq!(matching.assignment, vec![0, 2, 3]);
        assert!(matching.scores.iter().all(|&s| (s - 1.0).abs() < 1e-12));
        learned.row_mut(3).fill(0.0);
        assert!(match_dictionaries(w.view(), learned.view()).is_err());
    }

    fn quick_bench(noise_bound: f64) -> RecoveryReport {
        let cfg = SynthConfig {
            d: 16,
            m: 8,
            k: 1,
            noise_bound,
            n_samples: 2000,
            train: TrainConfig {
                batch_size: 128,
                learning_rate: 1e-2,
                epochs: 200,
                lambda: 0.03,
                input_norm: InputNorm::Raw,
                ..SynthConfig::default().train
            },
            ..SynthConfig::default()
        };
        run_recovery_experiment(&cfg).unwrap().report
    }

    #[test]
    fn noiseless_one_sparse_recovery() {
        let report = quick_bench(0.0);
        assert!(report.mean_alignment >= 0.99, "{report:?}");
        assert_eq!(report.train_steps, 200 * 16);
    }

    #[test]
    fn heavy_noise_degrades_recovery() {
        let clean = quick_bench(0.0);
        let noisy = quick_bench(3.0);
        assert!(noisy.mean_alignment < clean.mean_alignment, "{noisy:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn matching_ignores_permutation_scale_and_sign(
            seed in 0u64..1000,
            perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            scales in proptest::collection::vec(0.1f64..10.0, 6),
            signs in proptest::collection::vec(any::<bool>(), 6),
        ) {
            let cfg = SynthConfig { seed, target_mu: 0.99, ..small(12, 6, 1) };
            let w = generate_dictionary(&cfg).unwrap();
            let mut learned = Array2::zeros((6, 12));
            for i in 0..6 {
                let s = if signs[i] { -scales[i] } else { scales[i] };
                learned.row_mut(perm[i]).assign(&w.column(i).mapv(|v| v * s));
            }
            let matching = match_dictionaries(w.view(), learned.view()).unwrap();
            prop_assert_eq!(&matching.assignment, &perm);
            prop_assert!((matching.mean() - 1.0).abs() < 1e-9);
            prop_assert_eq!(matching.fraction_above(RECOVERY_THRESHOLD), 1.0);
        }
    }
}

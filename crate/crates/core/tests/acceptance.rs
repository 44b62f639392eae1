//! Acceptance suite: one PASS/FAIL line per primary criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! Pass a substring as the first free argument to run only matching criteria.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use reasonvec::confidence::{self, EntropyConfig, EntropyObjective, ReadoutHead, ScoreVector};
use reasonvec::data::{self, ActivationSet, Label, SaeModel, StepRecord};
use reasonvec::geometry;
use reasonvec::sae::{self, InitScheme, SaeParams, SparsityPenalty, TrainConfig};
use reasonvec::segment::{self, KeywordTable};
use reasonvec::steering::{self, SteeringVector};
use reasonvec::synth::{self, RecoveryReport, SynthConfig};

// Pinned tolerances and thresholds.
const RECOVERY_FRACTION_MIN: f64 = 0.9;
const RECOVERY_COS: f64 = 0.9;
const RECOVERY_TIME_LIMIT: Duration = Duration::from_secs(600);
const STEERING_TOL: f64 = 1e-6;
const STEERING_CASES: usize = 1000;
const GRAD_REL_TOL: f64 = 1e-4;
const SMOOTH_WINDOW: usize = 50;
const SILHOUETTE_MIN: f64 = 0.8;
const SHUFFLED_MAX: f64 = 0.2;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn main() {
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: Vec<Criterion> = vec![
        ("dictionary_recovery_and_assumptions", dictionary_recovery),
        ("steering_math_invariants", steering_invariants),
        ("entropy_optimizer", entropy_optimizer),
        (
            "sae_gradient_and_reproducibility",
            sae_gradient_and_reproducibility,
        ),
        ("annotator_keyword_fixtures", annotator_fixtures),
        ("silhouette_sanity", silhouette_sanity),
        ("format_round_trips", format_round_trips),
    ];
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f)) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => {
                for line in detail.lines() {
                    println!("PASS {line} ({secs:.1}s)");
                }
            }
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg} ({secs:.1}s)");
            }
        }
    }
    println!(
        "acceptance: {} of {ran} criterion groups passed",
        ran - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

/// Recovery on the 128-dim, 64-atom, 3-sparse benchmark, plus the learned
/// dictionary's incoherence and sparsity. Prints one line per criterion.
fn dictionary_recovery() -> Outcome {
    let mut config = SynthConfig {
        d: 128,
        m: 64,
        k: 3,
        alpha_min: 0.5,
        noise_bound: 0.01,
        n_samples: 50_000,
        sae_width: Some(64),
        seed: 0,
        ..SynthConfig::default()
    };
    config.train.learning_rate = 1e-4;
    config.train.lambda = 2e-3;
    let started = Instant::now();
    let run = synth::run_recovery_experiment(&config).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let r: &RecoveryReport = &run.report;

    // Recompute the matched-fraction independently from the matching scores.
    let recovered = run
        .matching
        .scores
        .iter()
        .filter(|&&s| s >= RECOVERY_COS)
        .count();
    let fraction = recovered as f64 / config.m as f64;
    check(
        (fraction - r.fraction_above_0_9).abs() < 1e-12,
        "report disagrees with matching",
    )?;
    // Cross-check the matched scores against directly computed cosines.
    let decoder = run.model.decoder_f64();
    for (atom, &row) in run.matching.assignment.iter().enumerate() {
        let w = run.dictionary.column(atom);
        let v = decoder.row(row);
        let cos = (w.dot(&v) / (w.dot(&w).sqrt() * v.dot(&v).sqrt())).abs();
        check(
            (cos - run.matching.scores[atom]).abs() < 1e-9,
            "matching score mismatch",
        )?;
    }

    let recovery_ok = fraction >= RECOVERY_FRACTION_MIN && elapsed <= RECOVERY_TIME_LIMIT;
    let assumptions_ok = r.mu_measured < 1.0 && r.mean_l0 <= 2.0 * config.k as f64;
    let recovery_line = format!(
        "dictionary_recovery: fraction_above_0.9={fraction:.4} (>= {RECOVERY_FRACTION_MIN}), mean |cos|={:.4}, {:.0}s (<= {}s)",
        r.mean_alignment,
        elapsed.as_secs_f64(),
        RECOVERY_TIME_LIMIT.as_secs()
    );
    let assumption_line = format!(
        "assumption_check: mu_learned={:.4} (< 1), mean_L0={:.3} (<= {}), mu_true={:.4}",
        r.mu_measured,
        r.mean_l0,
        2 * config.k,
        r.mu_true
    );
    match (recovery_ok, assumptions_ok) {
        (true, true) => Ok(format!("{recovery_line}\n{assumption_line}")),
        (false, true) => Err(format!("{recovery_line} | PASS {assumption_line}")),
        (true, false) => Err(format!("{assumption_line} | PASS {recovery_line}")),
        (false, false) => Err(format!("{recovery_line} | {assumption_line}")),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The direction the intervention actually uses: the stored f32 vector
/// renormalized in f64.
fn unit_of(v: &SteeringVector) -> Vec<f64> {
    let u = v.direction_f64();
    let n = dot(&u, &u).sqrt();
    u.iter().map(|x| x / n).collect()
}

fn steering_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 4];
    for _ in 0..STEERING_CASES {
        let d = rng.random_range(2..=32);
        let raw: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        if dot(&raw, &raw) < 1e-6 {
            continue;
        }
        let v = SteeringVector::new(&raw, "b", vec![]).map_err(|e| e.to_string())?;
        let h: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let alpha = rng.random_range(-3.0..3.0);
        let u = unit_of(&v);
        let vh = dot(&u, &h);

        let removed = steering::apply_steering(&h, &v, -1.0).map_err(|e| e.to_string())?;
        worst[0] = worst[0].max(dot(&u, &removed).abs());

        let twice = steering::apply_steering(&removed, &v, -1.0).map_err(|e| e.to_string())?;
        let idem = twice
            .iter()
            .zip(&removed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst[1] = worst[1].max(idem);

        let steered = steering::apply_steering(&h, &v, alpha).map_err(|e| e.to_string())?;
        let expected = dot(&h, &h) + (2.0 * alpha + alpha * alpha) * vh * vh;
        worst[2] = worst[2].max((dot(&steered, &steered) - expected).abs());

        // Orthogonal complement: a vector on coordinates the direction does
        // not touch is returned exactly.
        let split = rng.random_range(1..d);
        let mut sparse_v = raw.clone();
        sparse_v[split..].iter_mut().for_each(|x| *x = 0.0);
        if dot(&sparse_v, &sparse_v) > 1e-6 {
            let v2 = SteeringVector::new(&sparse_v, "b", vec![]).map_err(|e| e.to_string())?;
            let mut h2 = h.clone();
            h2[..split].iter_mut().for_each(|x| *x = 0.0);
            let out = steering::apply_steering(&h2, &v2, alpha).map_err(|e| e.to_string())?;
            check(out == h2, "orthogonal complement changed")?;
        }
        // A generic orthogonal vector (projection removed numerically).
        let out = steering::apply_steering(&removed, &v, alpha).map_err(|e| e.to_string())?;
        let drift = out
            .iter()
            .zip(&removed)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst[3] = worst[3].max(drift);
    }
    check(
        worst[0] <= STEERING_TOL,
        format!("removal leaves <v,h'>={:.3e}", worst[0]),
    )?;
    check(
        worst[1] <= STEERING_TOL,
        format!("idempotence error {:.3e}", worst[1]),
    )?;
    check(
        worst[2] <= STEERING_TOL,
        format!("norm relation error {:.3e}", worst[2]),
    )?;
    check(
        worst[3] <= STEERING_TOL,
        format!("orthogonal drift {:.3e}", worst[3]),
    )?;
    Ok(format!(
        "steering_math_invariants: {STEERING_CASES} cases, max |<v,h'>|={:.1e}, idempotence {:.1e}, norm relation {:.1e}, complement exact (tol {STEERING_TOL})",
        worst[0], worst[1], worst[2]
    ))
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

fn unlabeled_set(data: Array2<f64>) -> ActivationSet {
    let records = (0..data.nrows())
        .map(|i| StepRecord::unlabeled(format!("r{i}"), 0))
        .collect();
    ActivationSet::new("fixture", 0, data.mapv(|v| v as f32), records).unwrap()
}

/// Mean entropy of `softmax(W^T (h + shift) + b)` computed from scratch.
fn entropy_oracle(
    w: &Array2<f64>,
    b: &Array1<f64>,
    batch: &Array2<f64>,
    shift: &Array1<f64>,
) -> f64 {
    let mut total = 0.0;
    for h in batch.rows() {
        let x = &h + shift;
        let logits: Vec<f64> = (0..w.ncols()).map(|k| x.dot(&w.column(k)) + b[k]).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        total -= logits
            .iter()
            .map(|l| {
                let p = (l - m).exp() / z;
                if p > 0.0 {
                    p * p.ln()
                } else {
                    0.0
                }
            })
            .sum::<f64>();
    }
    total / batch.nrows() as f64
}

fn entropy_optimizer() -> Outcome {
    // Analytic gradient vs central differences of an independent objective.
    let mut worst = 0.0f64;
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, hidden, vocab) = (6, 8, 5);
        let w = random_matrix(d, vocab, &mut rng);
        let b = random_matrix(1, vocab, &mut rng).row(0).to_owned();
        let w_dec = random_matrix(hidden, d, &mut rng);
        let batch = random_matrix(9, d, &mut rng);
        let head = ReadoutHead::new(w.mapv(|v| v as f32), b.mapv(|v| v as f32)).unwrap();
        let (w, b) = (head.w_out.mapv(f64::from), head.b_out.mapv(f64::from));
        let s: Vec<f64> = (0..hidden).map(|_| rng.random_range(-0.5..0.5)).collect();
        let objective = EntropyObjective::new(&head, w_dec.view()).map_err(|e| e.to_string())?;
        let (value, grad) = objective
            .value_and_grad(batch.view(), &s)
            .map_err(|e| e.to_string())?;
        let shift_of = |s: &[f64]| Array1::from(s.to_vec()).dot(&w_dec);
        check(
            (value - entropy_oracle(&w, &b, &batch, &shift_of(&s))).abs() < 1e-12,
            "objective value mismatch",
        )?;
        let eps = 1e-6;
        for j in 0..hidden {
            let (mut plus, mut minus) = (s.clone(), s.clone());
            plus[j] += eps;
            minus[j] -= eps;
            let numeric = (entropy_oracle(&w, &b, &batch, &shift_of(&plus))
                - entropy_oracle(&w, &b, &batch, &shift_of(&minus)))
                / (2.0 * eps);
            let rel = (numeric - grad[j]).abs() / numeric.abs().max(grad[j].abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    check(
        worst <= GRAD_REL_TOL,
        format!("gradient relative error {worst:.2e}"),
    )?;

    // Constant head: the objective is flat, so S stays at its zero start.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let flat = ReadoutHead::new(Array2::zeros((6, 5)), Array1::zeros(5)).unwrap();
    let set = unlabeled_set(random_matrix(300, 6, &mut rng));
    let w_dec = random_matrix(8, 6, &mut rng);
    let out = confidence::optimize_scores(&flat, w_dec.view(), &set, &EntropyConfig::default())
        .map_err(|e| e.to_string())?;
    check(
        out.scores.scores.iter().all(|&s| s == 0.0),
        "constant head moved S",
    )?;

    // Alignable head: logit 0 reads decoder row 2's direction and every
    // activation already leans toward output 0.
    let (d, hidden, vocab) = (6, 8, 4);
    let mut w_dec = random_matrix(hidden, d, &mut rng) * 0.1;
    w_dec
        .row_mut(2)
        .assign(&Array1::from(vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let mut w_out = Array2::<f32>::zeros((d, vocab));
    w_out[[0, 0]] = 1.0;
    let head = ReadoutHead::new(w_out, Array1::zeros(vocab)).unwrap();
    let mut data = random_matrix(1000, d, &mut rng) * 0.3;
    data.column_mut(0).mapv_inplace(|v| v + 1.0);
    let set = unlabeled_set(data);
    let out = confidence::optimize_scores(&head, w_dec.view(), &set, &EntropyConfig::default())
        .map_err(|e| e.to_string())?;
    let smooth = sae::smoothed(&out.fit.trajectory, SMOOTH_WINDOW);
    let (first, last) = (smooth[0], *smooth.last().unwrap());
    check(
        last < first,
        format!("smoothed objective {first:.4} -> {last:.4}"),
    )?;
    check(
        out.scores.final_entropy < out.fit.initial_entropy,
        "final entropy not below initial",
    )?;
    Ok(format!(
        "entropy_optimizer: max grad rel err {worst:.1e} (<= {GRAD_REL_TOL}), constant head S=0 exactly, smoothed({SMOOTH_WINDOW}) objective {first:.4} -> {last:.4}"
    ))
}

/// SAE loss computed from scratch, one sample at a time.
fn sae_loss_oracle(
    p: &SaeParams,
    batch: &Array2<f64>,
    lambda: f64,
    penalty: SparsityPenalty,
) -> f64 {
    let (d, hidden) = p.w_enc.dim();
    let mut total = 0.0;
    for h in batch.rows() {
        let z: Vec<f64> = (0..hidden)
            .map(|j| ((0..d).map(|i| p.w_enc[[i, j]] * h[i]).sum::<f64>() + p.b_enc[j]).max(0.0))
            .collect();
        for i in 0..d {
            let recon: f64 = (0..hidden).map(|j| z[j] * p.w_dec[[j, i]]).sum::<f64>() + p.b_dec[i];
            total += (recon - h[i]).powi(2);
        }
        for (j, zj) in z.iter().enumerate() {
            let weight = match penalty {
                SparsityPenalty::L1 => 1.0,
                SparsityPenalty::DecoderWeightedL1 => p.w_dec.row(j).dot(&p.w_dec.row(j)).sqrt(),
            };
            total += lambda * zj * weight;
        }
    }
    total / batch.nrows() as f64
}

fn sae_gradient_and_reproducibility() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for penalty in [SparsityPenalty::DecoderWeightedL1, SparsityPenalty::L1] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SaeParams::init(6, 10, InitScheme::Independent, &mut rng);
        p.b_enc = Array1::from_shape_simple_fn(10, || rng.random_range(-0.1..0.1));
        p.b_dec = Array1::from_shape_simple_fn(6, || rng.random_range(-0.1..0.1));
        let batch = random_matrix(4, 6, &mut rng);
        let lambda = 0.05;
        let (_, g) = p
            .loss_and_grad(batch.view(), lambda, penalty)
            .map_err(|e| e.to_string())?;
        let eps = 1e-6;
        let mut probe = |get: &dyn Fn(&mut SaeParams) -> &mut f64, analytic: f64| {
            let mut plus = p.clone();
            *get(&mut plus) += eps;
            let mut minus = p.clone();
            *get(&mut minus) -= eps;
            // Skip probes that flip a ReLU inside the interval.
            let active = |q: &SaeParams| {
                let pre = batch.dot(&q.w_enc) + &q.b_enc;
                pre.mapv(|v| v > 0.0)
            };
            if active(&plus) != active(&minus) {
                return;
            }
            let numeric = (sae_loss_oracle(&plus, &batch, lambda, penalty)
                - sae_loss_oracle(&minus, &batch, lambda, penalty))
                / (2.0 * eps);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        };
        for i in 0..6 {
            for j in 0..10 {
                probe(&|q| &mut q.w_enc[[i, j]], g.w_enc[[i, j]]);
                probe(&|q| &mut q.w_dec[[j, i]], g.w_dec[[j, i]]);
            }
            probe(&|q| &mut q.b_dec[i], g.b_dec[i]);
        }
        for j in 0..10 {
            probe(&|q| &mut q.b_enc[j], g.b_enc[j]);
        }
    }
    check(
        worst <= GRAD_REL_TOL,
        format!("gradient relative error {worst:.2e}"),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let set = unlabeled_set(random_matrix(500, 12, &mut rng).mapv(f64::abs));
    let cfg = TrainConfig {
        hidden_dim: 24,
        batch_size: 64,
        steps: Some(200),
        learning_rate: 1e-3,
        seed: 3,
        ..TrainConfig::default()
    };
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    for name in ["a", "b"] {
        let out = sae::train(&set, &cfg).map_err(|e| e.to_string())?;
        data::save_sae(&out.model, &tmp.path().join(name)).map_err(|e| e.to_string())?;
    }
    for file in [data::SAE_BIN_FILE, data::SAE_META_FILE] {
        let a = fs::read(tmp.path().join("a").join(file)).map_err(|e| e.to_string())?;
        let b = fs::read(tmp.path().join("b").join(file)).map_err(|e| e.to_string())?;
        check(a == b, format!("{file} differs between runs"))?;
    }
    Ok(format!(
        "sae_gradient_and_reproducibility: {checked} probes, max rel err {worst:.1e} (<= {GRAD_REL_TOL}); two seeded runs byte-identical"
    ))
}

fn annotator_fixtures() -> Outcome {
    // The reference keyword table, transcribed independently of the crate.
    let reflection = [
        "Wait",
        "verify",
        "make sure",
        "hold on",
        "think again",
        "'s correct",
        "'s incorrect",
        "Let me check",
        "seems right",
    ];
    let backtracking = [
        "Alternatively",
        "think differenly",
        "another way",
        "another approach",
        "another method",
        "another solution",
        "another strategy",
        "another technique",
    ];
    let table = KeywordTable::default();
    let mut cases = 0;
    for (keywords, label) in [
        (&reflection[..], Label::Reflection),
        (&backtracking[..], Label::Backtracking),
    ] {
        for kw in keywords {
            for text in [
                kw.to_string(),
                format!("So {kw} here."),
                format!("{} then", kw.to_uppercase()),
            ] {
                let got = segment::annotate_step(&text, &table);
                check(
                    got == label,
                    format!("{text:?} labeled {got}, expected {label}"),
                )?;
                cases += 1;
            }
        }
    }
    let plain = segment::annotate_step("Compute 2+2=4.", &table);
    check(
        plain == Label::Others,
        format!("plain step labeled {plain}"),
    )?;
    Ok(format!(
        "annotator_keyword_fixtures: {} keywords x 3 phrasings = {cases} cases + plain step, 100% correct",
        reflection.len() + backtracking.len()
    ))
}

/// Silhouette with cosine distance, written directly from the definition.
fn silhouette_oracle(x: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = x.nrows();
    let cos_dist = |i: usize, j: usize| {
        let (a, b) = (x.row(i), x.row(j));
        1.0 - a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt())
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut mean_to = std::collections::BTreeMap::<usize, (f64, usize)>::new();
        for (j, &label) in labels.iter().enumerate().take(n) {
            if j != i {
                let e = mean_to.entry(label).or_insert((0.0, 0));
                e.0 += cos_dist(i, j);
                e.1 += 1;
            }
        }
        let Some(&(own_sum, own_n)) = mean_to.get(&labels[i]) else {
            continue;
        };
        let a = own_sum / own_n as f64;
        let b = mean_to
            .iter()
            .filter(|(l, _)| **l != labels[i])
            .map(|(_, (s, c))| s / *c as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

fn silhouette_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (per, d) = (40, 16);
    let mut x = Array2::zeros((2 * per, d));
    let mut labels = Vec::new();
    for i in 0..2 * per {
        let c = i / per;
        for j in 0..d {
            x[[i, j]] = rng.random_range(-0.05..0.05);
        }
        x[[i, c]] += 1.0;
        labels.push(c);
    }
    let s = geometry::silhouette_cosine(x.view(), &labels).map_err(|e| e.to_string())?;
    let oracle = silhouette_oracle(&x, &labels);
    check(
        (s.mean - oracle).abs() < 1e-9,
        format!("silhouette {} vs oracle {oracle}", s.mean),
    )?;
    check(
        s.mean > SILHOUETTE_MIN,
        format!("clustered mean {:.4}", s.mean),
    )?;

    let mut worst = 0.0f64;
    for trial in 0..10 {
        let mut shuffled = labels.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + trial));
        let t = geometry::silhouette_cosine(x.view(), &shuffled).map_err(|e| e.to_string())?;
        worst = worst.max(t.mean.abs());
    }
    check(worst < SHUFFLED_MAX, format!("shuffled |mean| {worst:.4}"))?;
    Ok(format!(
        "silhouette_sanity: orthogonal clusters mean={:.4} (> {SILHOUETTE_MIN}, oracle agrees), shuffled max |mean|={worst:.4} (< {SHUFFLED_MAX})",
        s.mean
    ))
}

fn same_bytes(a: &Path, b: &Path, files: &[&str]) -> Result<(), String> {
    for f in files {
        let x = fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = fs::read(b.join(f)).map_err(|e| e.to_string())?;
        check(x == y, format!("{f} not reproduced byte-for-byte"))?;
    }
    Ok(())
}

fn bits(values: impl IntoIterator<Item = f32>) -> Vec<u32> {
    values.into_iter().map(f32::to_bits).collect()
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let awkward = |rng: &mut ChaCha8Rng| -> f32 {
        match rng.random_range(0..4) {
            0 => f32::MIN_POSITIVE / 2.0,
            1 => -0.0,
            2 => rng.random::<f32>() * 1e30,
            _ => StandardNormal.sample(rng),
        }
    };
    let e = |x: reasonvec::Error| x.to_string();

    // Activation set.
    let data = Array2::from_shape_simple_fn((7, 5), || awkward(&mut rng));
    let labels = [
        Label::Reflection,
        Label::Backtracking,
        Label::Others,
        Label::Unlabeled,
    ];
    let records = (0..7)
        .map(|i| StepRecord {
            sample_id: format!("s{}", i / 3),
            step_index: i % 3,
            text: format!("step \"{i}\"\n\u{e9}"),
            label: labels[i % 4],
            response_length_tokens: 1000 * i,
        })
        .collect();
    let set = ActivationSet::new("model/x", 12, data, records).map_err(e)?;
    data::write_activation_set(&set, &root.join("acts")).map_err(e)?;
    let back = data::read_activation_set(&root.join("acts")).map_err(e)?;
    check(
        bits(back.data.iter().copied()) == bits(set.data.iter().copied()),
        "activations bits",
    )?;
    check(
        back.records == set.records && back.model_name == set.model_name,
        "activation metadata",
    )?;
    data::write_activation_set(&back, &root.join("acts2")).map_err(e)?;
    same_bytes(
        &root.join("acts"),
        &root.join("acts2"),
        &[
            data::MANIFEST_FILE,
            data::ACTIVATIONS_FILE,
            data::STEPS_FILE,
        ],
    )?;

    // SAE checkpoint.
    let model = SaeModel {
        w_enc: Array2::from_shape_simple_fn((5, 3), || awkward(&mut rng)),
        b_enc: Array1::from_shape_simple_fn(3, || awkward(&mut rng)),
        w_dec: Array2::from_shape_simple_fn((3, 5), || awkward(&mut rng)),
        b_dec: Array1::from_shape_simple_fn(5, || awkward(&mut rng)),
        lambda: 2e-3,
        trained_steps: 123_456,
    };
    data::save_sae(&model, &root.join("sae")).map_err(e)?;
    let back = data::load_sae(&root.join("sae")).map_err(e)?;
    let all = |m: &SaeModel| {
        bits(
            m.w_enc
                .iter()
                .chain(&m.b_enc)
                .chain(&m.w_dec)
                .chain(&m.b_dec)
                .copied(),
        )
    };
    check(all(&back) == all(&model), "SAE weight bits")?;
    check(
        back.lambda.to_bits() == model.lambda.to_bits()
            && back.trained_steps == model.trained_steps,
        "SAE metadata",
    )?;
    data::save_sae(&back, &root.join("sae2")).map_err(e)?;
    same_bytes(
        &root.join("sae"),
        &root.join("sae2"),
        &[data::SAE_META_FILE, data::SAE_BIN_FILE],
    )?;

    // Steering vector.
    let raw: Vec<f64> = (0..9).map(|_| StandardNormal.sample(&mut rng)).collect();
    let v = SteeringVector::new(&raw, "reflection", vec![3, 1, 4]).map_err(e)?;
    steering::save_steering(&v, &root.join("steer")).map_err(e)?;
    let back = steering::load_steering(&root.join("steer")).map_err(e)?;
    check(
        bits(back.direction.iter().copied()) == bits(v.direction.iter().copied()),
        "steering bits",
    )?;
    check(back == v, "steering metadata")?;
    steering::save_steering(&back, &root.join("steer2")).map_err(e)?;
    same_bytes(
        &root.join("steer"),
        &root.join("steer2"),
        &[steering::STEERING_META_FILE, steering::STEERING_BIN_FILE],
    )?;

    // Readout head.
    let head = ReadoutHead::new(
        Array2::from_shape_simple_fn((5, 4), || awkward(&mut rng)),
        Array1::from_shape_simple_fn(4, || awkward(&mut rng)),
    )
    .map_err(e)?;
    confidence::save_head(&head, &root.join("head")).map_err(e)?;
    let back = confidence::load_head(&root.join("head")).map_err(e)?;
    check(
        bits(back.w_out.iter().chain(&back.b_out).copied())
            == bits(head.w_out.iter().chain(&head.b_out).copied()),
        "head bits",
    )?;
    confidence::save_head(&back, &root.join("head2")).map_err(e)?;
    same_bytes(
        &root.join("head"),
        &root.join("head2"),
        &[confidence::HEAD_META_FILE, confidence::HEAD_BIN_FILE],
    )?;

    // Score vector.
    let scores = ScoreVector {
        scores: (0..6).map(|_| awkward(&mut rng)).collect(),
        trained_iters: 1000,
        final_entropy: std::f64::consts::LN_2 / 3.0,
    };
    confidence::save_scores(&scores, &root.join("scores")).map_err(e)?;
    let back = confidence::load_scores(&root.join("scores")).map_err(e)?;
    check(
        bits(back.scores.iter().copied()) == bits(scores.scores.iter().copied()),
        "score bits",
    )?;
    check(
        back.final_entropy.to_bits() == scores.final_entropy.to_bits(),
        "final entropy bits",
    )?;
    confidence::save_scores(&back, &root.join("scores2")).map_err(e)?;
    same_bytes(
        &root.join("scores"),
        &root.join("scores2"),
        &[confidence::SCORES_META_FILE, confidence::SCORES_BIN_FILE],
    )?;

    Ok("format_round_trips: ActivationSet, SAE checkpoint, SteeringVector, ReadoutHead, ScoreVector bit-exact both ways".into())
}

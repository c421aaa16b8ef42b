//! Adversaries and privacy attacks.
//!
//! Poisoning adversaries corrupt either a client's update vector
//! (sign-flip, scaling) or its training shard (backdoor triggers).
//! The inversion side reconstructs a training input from an observed
//! batch-1 gradient by finite-difference gradient matching, with the
//! label read analytically from the output-bias block.

use serde::{Deserialize, Serialize};

use crate::config::AttackKind;
use crate::datasim::Dataset;
use crate::error::{Result, SafeLmError};
use crate::learners::{grad, Learner};
use crate::quantizer::{l2_norm, BinarizedUpdate};
use crate::seeds;
use rand::Rng;

/// Outcome metrics for one attack run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThreatOutcome {
    /// Reconstruction quality in dB; `f64::INFINITY` when exact.
    pub psnr_db: f64,
    pub label_recovery_rate: f64,
    pub asr: f64,
    pub clean_acc: f64,
}

/// Negate an update in place of the honest one.
pub fn sign_flip(update: &[f64]) -> Vec<f64> {
    update.iter().map(|x| -x).collect()
}

/// Scale an update by a constant factor.
pub fn scale_update(update: &[f64], factor: f64) -> Vec<f64> {
    update.iter().map(|x| x * factor).collect()
}

/// Stamp the trigger pattern onto `sample_fraction` of the shard and set
/// those labels to the target class. Returns the poisoned shard.
pub fn backdoor_shard(
    shard: &Dataset,
    trigger_coords: &[usize],
    trigger_value: f64,
    target_label: usize,
    sample_fraction: f64,
    seed: u64,
) -> Dataset {
    let mut out = shard.clone();
    let mut rng = seeds::rng(seed, &[seeds::purpose::ATTACK]);
    let stamped = ((shard.len() as f64) * sample_fraction).round() as usize;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    // Deterministic Fisher-Yates prefix.
    for i in 0..stamped.min(shard.len()) {
        let j = rng.random_range(i..order.len());
        order.swap(i, j);
    }
    for &i in order.iter().take(stamped.min(shard.len())) {
        stamp_trigger(out.row_mut(i), trigger_coords, trigger_value);
        out.labels[i] = target_label;
    }
    out
}

pub fn stamp_trigger(row: &mut [f64], trigger_coords: &[usize], trigger_value: f64) {
    for &c in trigger_coords {
        row[c] = trigger_value;
    }
}

/// Apply an update-level adversary; backdoor corruption happens at the
/// shard level before training instead (see `backdoor_shard`).
pub fn apply_update_adversary(kind: &AttackKind, honest: &[f64]) -> Vec<f64> {
    match kind {
        AttackKind::SignFlip => sign_flip(honest),
        AttackKind::Scale { factor } => scale_update(honest, *factor),
        AttackKind::Backdoor { .. } => honest.to_vec(),
    }
}

/// What a gradient-inversion attacker can observe of a client update.
/// Ciphertext payloads never reach this type: there is no accessor that
/// yields plaintext material without the secret key.
#[derive(Debug, Clone)]
pub enum ObservedUpdate {
    Full(Vec<f64>),
    Binarized(BinarizedUpdate),
}

/// Result of a gradient-inversion attempt.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub x_hat: Vec<f64>,
    pub inferred_label: Option<usize>,
    pub objective: f64,
    pub converged: bool,
}

/// Read the label from the output-bias gradient block: `softmax - onehot`
/// has its unique negative coordinate at the true class. Returns the
/// argmin, abstaining when no coordinate is negative.
pub fn infer_label(bias_grad: &[f64]) -> Option<usize> {
    let mut best = 0usize;
    for (i, v) in bias_grad.iter().enumerate() {
        if *v < bias_grad[best] {
            best = i;
        }
    }
    if bias_grad[best] < 0.0 {
        Some(best)
    } else {
        None
    }
}

/// Bias-gradient block of a flat logreg/MLP gradient (the last C entries).
pub fn bias_block(gradient: &[f64], classes: usize) -> &[f64] {
    &gradient[gradient.len() - classes..]
}

/// Peak signal-to-noise ratio for unit-range signals.
pub fn psnr(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() {
        return Err(SafeLmError::invalid(format!(
            "psnr length mismatch: {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    if x.is_empty() {
        return Err(SafeLmError::invalid("psnr of empty vectors"));
    }
    let mse: f64 = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

const FD_STEP: f64 = 1e-4;
const CONVERGENCE_TOL: f64 = 1e-6;

/// Gradient-matching inversion of a batch-1 update.
///
/// Minimizes `||grad(x_hat, y_hat) - observed||^2` (full-precision
/// observations) or `1 - cos(grad(x_hat, y_hat), signs)` (binarized
/// observations, whose magnitudes are gone) over the unit box, by central
/// finite differences and backtracking descent. The label comes from
/// `infer_label` on the observed bias block; an abstention falls back to
/// class 0, which is part of why binarized observations reconstruct badly.
pub fn invert_gradient(
    observed: &ObservedUpdate,
    learner: &Learner,
    iters: usize,
    seed: u64,
) -> Result<InversionResult> {
    let f = learner.n_features;
    let c = learner.n_classes;
    let inferred_label = match observed {
        ObservedUpdate::Full(g) => infer_label(bias_block(g, c)),
        ObservedUpdate::Binarized(b) => infer_label(&b.as_f64()[b.len() - c..]),
    };
    let y = inferred_label.unwrap_or(0);

    let objective = |x: &[f64]| -> f64 {
        let g = single_sample_gradient(learner, x, y);
        match observed {
            ObservedUpdate::Full(target) => g
                .iter()
                .zip(target)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>(),
            ObservedUpdate::Binarized(b) => {
                let signs = b.as_f64();
                let dot: f64 = g.iter().zip(&signs).map(|(a, s)| a * s).sum();
                let norm = l2_norm(&g);
                if norm == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (norm * (signs.len() as f64).sqrt())
                }
            }
        }
    };

    let mut rng = seeds::rng(seed, &[seeds::purpose::ATTACK]);
    let mut x: Vec<f64> = (0..f).map(|_| rng.random_range(0.0..1.0)).collect();
    let mut best_x = x.clone();
    let mut best_obj = objective(&x);
    let mut step = 0.25;

    for _ in 0..iters {
        // Central finite differences on the attack objective.
        let fd: Vec<f64> = (0..f)
            .map(|j| {
                let mut plus = x.clone();
                plus[j] = (plus[j] + FD_STEP).min(1.0);
                let mut minus = x.clone();
                minus[j] = (minus[j] - FD_STEP).max(0.0);
                let span = plus[j] - minus[j];
                if span == 0.0 {
                    0.0
                } else {
                    (objective(&plus) - objective(&minus)) / span
                }
            })
            .collect();
        let current = objective(&x);
        // Backtracking: shrink until the step improves the objective.
        let mut advanced = false;
        for _ in 0..12 {
            let trial: Vec<f64> = x
                .iter()
                .zip(&fd)
                .map(|(xj, gj)| (xj - step * gj).clamp(0.0, 1.0))
                .collect();
            let value = objective(&trial);
            if value < current {
                x = trial;
                if value < best_obj {
                    best_obj = value;
                    best_x = x.clone();
                }
                step *= 1.5;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced && step < 1e-12 {
            break;
        }
    }

    Ok(InversionResult {
        x_hat: best_x,
        inferred_label,
        objective: best_obj,
        converged: best_obj < CONVERGENCE_TOL,
    })
}

/// Mean cross-entropy gradient of a single `(x, y)` sample.
pub fn single_sample_gradient(learner: &Learner, x: &[f64], y: usize) -> Vec<f64> {
    let mut one = Dataset::new(Vec::new(), Vec::new(), learner.n_features, learner.n_classes);
    one.push(x, y);
    grad(learner, &one).expect("single-sample gradient")
}

/// Analytic rank-1 inversion oracle for a batch-1 logreg gradient: row `k`
/// of the weight gradient is `(p_k - y_k) * x`, and the bias block carries
/// the factors, so `x = row_k / bias_k` for any `k` with `bias_k != 0`.
pub fn logreg_rank1_invert(gradient: &[f64], features: usize, classes: usize) -> Option<Vec<f64>> {
    let bias = bias_block(gradient, classes);
    let k = (0..classes).max_by(|&a, &b| {
        bias[a]
            .abs()
            .partial_cmp(&bias[b].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    })?;
    if bias[k] == 0.0 {
        return None;
    }
    Some(
        gradient[k * features..(k + 1) * features]
            .iter()
            .map(|g| g / bias[k])
            .collect(),
    )
}

/// Measure trigger attack success: the fraction of stamped non-target
/// test samples classified as the target, plus clean accuracy.
pub fn measure_asr(
    model: &Learner,
    trigger_coords: &[usize],
    trigger_value: f64,
    target_label: usize,
    test: &Dataset,
) -> ThreatOutcome {
    let mut stamped_total = 0usize;
    let mut stamped_hits = 0usize;
    for i in 0..test.len() {
        if test.labels[i] == target_label {
            continue;
        }
        let mut row = test.row(i).to_vec();
        stamp_trigger(&mut row, trigger_coords, trigger_value);
        stamped_total += 1;
        if model.predict(&row) == target_label {
            stamped_hits += 1;
        }
    }
    ThreatOutcome {
        psnr_db: 0.0,
        label_recovery_rate: 0.0,
        asr: if stamped_total == 0 {
            0.0
        } else {
            stamped_hits as f64 / stamped_total as f64
        },
        clean_acc: model.accuracy(test),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::generate;
    use crate::learners::{local_train, softmax, LearnerKind};
    use crate::quantizer::{smartify, ThresholdVariant};

    #[test]
    fn sign_flip_is_an_involution() {
        let u = vec![0.5, -0.2, 0.0, 3.0];
        assert_eq!(sign_flip(&sign_flip(&u)), u);
    }

    #[test]
    fn unit_scale_is_identity() {
        let u = vec![0.5, -0.2, 0.0, 3.0];
        assert_eq!(scale_update(&u, 1.0), u);
        assert_eq!(scale_update(&u, -2.0), sign_flip(&scale_update(&u, 2.0)));
    }

    #[test]
    fn backdoor_stamps_carry_target_label() {
        let ds = generate(3, 6, 40, 2.0, 1.0, 5).unwrap();
        // Trigger value 2.0 cannot occur naturally in [0,1] data, so the
        // stamped rows are exactly identifiable.
        let poisoned = backdoor_shard(&ds, &[0, 2], 2.0, 1, 0.5, 9);
        assert_eq!(poisoned.len(), ds.len());
        let stamped: Vec<usize> = (0..poisoned.len())
            .filter(|&i| poisoned.row(i)[0] == 2.0 && poisoned.row(i)[2] == 2.0)
            .collect();
        assert_eq!(stamped.len(), ((ds.len() as f64) * 0.5).round() as usize);
        // 100% of stamped samples carry the target label.
        assert!(stamped.iter().all(|&i| poisoned.labels[i] == 1));
        // Unstamped rows are untouched.
        for i in 0..poisoned.len() {
            if !stamped.contains(&i) {
                assert_eq!(poisoned.row(i), ds.row(i));
                assert_eq!(poisoned.labels[i], ds.labels[i]);
            }
        }
    }

    #[test]
    fn infer_label_closed_form_cases() {
        // probs [0.2, 0.5, 0.3], y = 0 -> grad [-0.8, 0.5, 0.3] -> 0
        assert_eq!(infer_label(&[-0.8, 0.5, 0.3]), Some(0));
        // uniform probs, y = 2, C = 3 -> [1/3, 1/3, -2/3] -> 2
        assert_eq!(infer_label(&[1.0 / 3.0, 1.0 / 3.0, -2.0 / 3.0]), Some(2));
        // no negative coordinate -> abstain
        assert_eq!(infer_label(&[0.1, 0.2, 0.0]), None);
    }

    #[test]
    fn infer_label_exact_over_classes() {
        // For every class count and true label, softmax - onehot points at
        // the label.
        let mut rng = seeds::rng(31, &[]);
        for c in 2..10usize {
            for y in 0..c {
                let logits: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
                let mut dz = softmax(&logits);
                dz[y] -= 1.0;
                assert_eq!(infer_label(&dz), Some(y), "C={c} y={y}");
            }
        }
    }

    #[test]
    fn label_recovery_perfect_on_batch1_gradients() {
        let ds = generate(7, 10, 40, 2.5, 1.0, 3).unwrap();
        let base = Learner::new(LearnerKind::Logreg, 10, 7, 0);
        let w = local_train(&base, &ds, 3, 16, 0.3, 0.0, &base.weights.clone(), 1).unwrap();
        let model = Learner::with_weights(LearnerKind::Logreg, 10, 7, w);
        let mut hits = 0;
        let trials = 200.min(ds.len());
        for i in 0..trials {
            let g = single_sample_gradient(&model, ds.row(i), ds.labels[i]);
            if infer_label(bias_block(&g, 7)) == Some(ds.labels[i]) {
                hits += 1;
            }
        }
        assert_eq!(hits, trials);
    }

    #[test]
    fn psnr_cases() {
        assert_eq!(psnr(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), f64::INFINITY);
        assert!((psnr(&[0.0, 1.0], &[1.0, 0.0]).unwrap() - 0.0).abs() < 1e-12);
        // MSE = 0.01 -> 20 dB
        let x = vec![0.5; 4];
        let y = vec![0.6; 4];
        assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&[0.1], &[0.1, 0.2]).is_err());
    }

    #[test]
    fn psnr_is_symmetric_and_nonnegative_in_unit_box() {
        let mut rng = seeds::rng(12, &[]);
        for _ in 0..100 {
            let x: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
            let a = psnr(&x, &y).unwrap();
            let b = psnr(&y, &x).unwrap();
            assert_eq!(a, b);
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn rank1_oracle_recovers_input_exactly() {
        let ds = generate(7, 12, 30, 2.5, 1.0, 8).unwrap();
        let base = Learner::new(LearnerKind::Logreg, 12, 7, 0);
        let w = local_train(&base, &ds, 2, 16, 0.3, 0.0, &base.weights.clone(), 1).unwrap();
        let model = Learner::with_weights(LearnerKind::Logreg, 12, 7, w);
        for i in 0..10 {
            let x = ds.row(i);
            let g = single_sample_gradient(&model, x, ds.labels[i]);
            let rec = logreg_rank1_invert(&g, 12, 7).unwrap();
            let quality = psnr(x, &rec).unwrap();
            assert!(quality > 100.0, "sample {i}: psnr {quality}");
        }
    }

    #[test]
    fn inversion_fixed_point_has_zero_objective() {
        let ds = generate(3, 6, 20, 2.5, 1.0, 8).unwrap();
        let base = Learner::new(LearnerKind::Logreg, 6, 3, 0);
        let w = local_train(&base, &ds, 2, 8, 0.3, 0.0, &base.weights.clone(), 1).unwrap();
        let model = Learner::with_weights(LearnerKind::Logreg, 6, 3, w);
        let x = ds.row(0);
        let g = single_sample_gradient(&model, x, ds.labels[0]);
        // Evaluate the attack objective at the true x via a 0-iteration
        // run seeded to start anywhere; instead check directly:
        let g2 = single_sample_gradient(&model, x, infer_label(bias_block(&g, 3)).unwrap());
        let resid: f64 = g.iter().zip(&g2).map(|(a, b)| (a - b) * (a - b)).sum();
        assert!(resid < 1e-20);
    }

    #[test]
    fn full_precision_inversion_reconstructs_well() {
        let ds = generate(7, 20, 40, 2.5, 1.0, 8).unwrap();
        let base = Learner::new(LearnerKind::Logreg, 20, 7, 0);
        let w = local_train(&base, &ds, 3, 16, 0.3, 0.0, &base.weights.clone(), 1).unwrap();
        let model = Learner::with_weights(LearnerKind::Logreg, 20, 7, w);
        let x = ds.row(3);
        let g = single_sample_gradient(&model, x, ds.labels[3]);
        let result = invert_gradient(&ObservedUpdate::Full(g.clone()), &model, 400, 5).unwrap();
        let quality = psnr(x, &result.x_hat).unwrap();
        // Cross-check against the analytic rank-1 oracle, which is exact.
        let oracle = logreg_rank1_invert(&g, 20, 7).unwrap();
        assert!(psnr(x, &oracle).unwrap() > 100.0);
        assert!(quality > 30.0, "psnr {quality}");
        assert_eq!(result.inferred_label, Some(ds.labels[3]));
    }

    #[test]
    fn binarized_observation_reconstructs_worse() {
        let ds = generate(7, 20, 40, 2.5, 1.0, 8).unwrap();
        let base = Learner::new(LearnerKind::Logreg, 20, 7, 0);
        let w = local_train(&base, &ds, 3, 16, 0.3, 0.0, &base.weights.clone(), 1).unwrap();
        let model = Learner::with_weights(LearnerKind::Logreg, 20, 7, w);
        let mut full_sum = 0.0;
        let mut bin_sum = 0.0;
        let trials = 20;
        for i in 0..trials {
            let x = ds.row(i);
            let g = single_sample_gradient(&model, x, ds.labels[i]);
            let full = invert_gradient(&ObservedUpdate::Full(g.clone()), &model, 300, i as u64).unwrap();
            let b = smartify(&g, ThresholdVariant::AbsMedian).unwrap();
            let bin = invert_gradient(&ObservedUpdate::Binarized(b), &model, 300, i as u64).unwrap();
            full_sum += psnr(x, &full.x_hat).unwrap().min(80.0);
            bin_sum += psnr(x, &bin.x_hat).unwrap().min(80.0);
        }
        let (bin_mean, full_mean) = (bin_sum / trials as f64, full_sum / trials as f64);
        assert!(bin_mean < full_mean, "binarized {bin_mean} vs full {full_mean}");
    }

    #[test]
    fn untrained_model_asr_is_chance_level() {
        let ds = generate(7, 10, 60, 2.5, 1.0, 4).unwrap();
        // Random-weight model: averaged over all 7 target choices the ASR
        // is the mean prediction share, which sits at 1/7.
        let mut learner = Learner::new(LearnerKind::Logreg, 10, 7, 0);
        let mut rng = seeds::rng(50, &[]);
        for w in &mut learner.weights {
            *w = rng.random_range(-0.3..0.3);
        }
        let mut mean_asr = 0.0;
        for target in 0..7 {
            mean_asr += measure_asr(&learner, &[0, 1], 1.0, target, &ds).asr / 7.0;
        }
        assert!((mean_asr - 1.0 / 7.0).abs() < 0.05, "mean asr {mean_asr}");
    }

    #[test]
    fn hardwired_model_asr_is_one() {
        let ds = generate(7, 10, 30, 2.5, 1.0, 4).unwrap();
        let mut learner = Learner::new(LearnerKind::Logreg, 10, 7, 0);
        // Huge bias on the target class dominates every logit.
        let d = learner.weights.len();
        learner.weights[d - 7 + 3] = 1e6;
        let out = measure_asr(&learner, &[0], 1.0, 3, &ds);
        assert_eq!(out.asr, 1.0);
    }
}

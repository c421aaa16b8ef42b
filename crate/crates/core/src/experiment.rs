//! Experiment orchestration and artifact emission.
//!
//! Sits on top of `fed::run_simulation`: writes the per-round CSV and the
//! JSON summary into one directory per `(config hash, seed)`, runs the
//! ablation matrix, and hosts the inversion / guard measurement harnesses
//! whose numbers feed the ablation summary.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{AggregationMode, ExperimentConfig, Toggles};
use crate::datasim::Dataset;
use crate::error::{Result, SafeLmError};
use crate::fed::{run_simulation, EffectivePipeline, RunOutcome, SimRun};
use crate::guard::{faith_score, guard_decision, ClaimEvidence, GuardDecision};
use crate::learners::{fit_temperature, local_train, Learner};
use crate::quantizer::{payload_bits, smartify, PayloadScheme};
use crate::report::{mean_std, round_markers, write_rounds_csv, RoundMarkers};
use crate::seeds;
use crate::threat::{
    bias_block, infer_label, invert_gradient, psnr, single_sample_gradient, ObservedUpdate,
};
use rand::Rng;

pub const ROUNDS_CSV: &str = "rounds.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Everything the JSON summary records about one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub pipeline: EffectivePipeline,
    pub outcome: RunOutcome,
    pub rounds_completed: usize,
    pub final_test_acc: f64,
    pub final_train_acc: f64,
    pub final_macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub markers: RoundMarkers,
    pub logical_bits_total: u64,
    pub wire_bits_total: u64,
    pub gamma_mean: Option<f64>,
    pub gamma_std: Option<f64>,
    pub final_asr: Option<f64>,
    pub guard: Option<GuardReport>,
    pub config: ExperimentConfig,
}

/// Run one seed and, when `out_dir` is given, write
/// `out_dir/<hash>-<seed>/{rounds.csv, summary.json}`.
pub fn execute_run(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<(SimRun, RunSummary)> {
    let run = run_simulation(cfg, seed)?;
    let last = run.reports.last();
    let gammas: Vec<f64> = run.reports.iter().filter_map(|r| r.gamma_mean).collect();
    let (gamma_mean, gamma_std) = mean_std(&gammas);
    let guard = Some(guard_artifact(
        &run.final_model,
        &run.test,
        cfg.guard_tau,
        cfg.toggles.guard,
        seeds::derive(seed, &[seeds::purpose::ATTACK, 0x6a]),
    )?);
    let summary = RunSummary {
        config_hash: cfg.stable_hash(),
        seed,
        pipeline: run.pipeline,
        outcome: run.outcome.clone(),
        rounds_completed: run.reports.len(),
        final_test_acc: last.map(|r| r.test_acc).unwrap_or(0.0),
        final_train_acc: last.map(|r| r.train_acc).unwrap_or(0.0),
        final_macro_f1: last.map(|r| r.macro_f1).unwrap_or(0.0),
        per_class_f1: last.map(|r| r.per_class_f1.clone()).unwrap_or_default(),
        markers: round_markers(&run.reports),
        logical_bits_total: last.map(|r| r.logical_bits_cum).unwrap_or(0),
        wire_bits_total: last.map(|r| r.wire_bits_cum).unwrap_or(0),
        gamma_mean,
        gamma_std,
        final_asr: last.and_then(|r| r.asr),
        guard,
        config: cfg.clone(),
    };
    if let Some(dir) = out_dir {
        let run_dir = run_dir(dir, cfg, seed);
        fs::create_dir_all(&run_dir)?;
        let mut csv = Vec::new();
        write_rounds_csv(&mut csv, &run.reports)?;
        fs::write(run_dir.join(ROUNDS_CSV), csv)?;
        fs::write(
            run_dir.join(SUMMARY_JSON),
            serde_json::to_string_pretty(&summary)?,
        )?;
    }
    Ok((run, summary))
}

pub fn run_dir(out: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out.join(format!("{}-{seed}", cfg.stable_hash()))
}

// ---------------------------------------------------------------------
// Gradient-inversion experiment
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionTrial {
    pub psnr_full: f64,
    pub psnr_binarized: f64,
    pub label_ok_full: bool,
    pub label_ok_binarized: bool,
}

/// An original input next to its reconstructions, kept only on request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionPair {
    pub trial: usize,
    pub original: Vec<f64>,
    pub from_full: Vec<f64>,
    pub from_binarized: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InversionReport {
    pub trials: Vec<InversionTrial>,
    pub mean_psnr_full: f64,
    pub mean_psnr_binarized: f64,
    pub psnr_gap: f64,
    pub label_recovery_full: f64,
    pub label_recovery_binarized: f64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub pairs: Vec<ReconstructionPair>,
}

/// Cap used when averaging PSNR values; near-exact reconstructions would
/// otherwise dominate the mean.
pub const PSNR_MEAN_CAP: f64 = 80.0;

/// Paired inversion trials against full-precision and binarized views of
/// the same batch-1 gradients. The victim model is trained briefly on the
/// configured data so gradients carry signal. When the DP toggle is on,
/// the observed gradient is clipped and noised first, matching what an
/// honest client would upload.
pub fn run_inversion(
    cfg: &ExperimentConfig,
    seed: u64,
    trials: usize,
    iters: usize,
    keep_pairs: bool,
) -> Result<InversionReport> {
    cfg.validate()?;
    let data = crate::datasim::generate(
        cfg.data.classes,
        cfg.data.features,
        cfg.data.per_class,
        cfg.data.separation,
        cfg.data.imbalance_ratio,
        seeds::derive(seed, &[seeds::purpose::DATA]),
    )?;
    let base = Learner::new(
        cfg.model.kind,
        cfg.model.features,
        cfg.model.classes,
        seeds::derive(seed, &[seeds::purpose::INIT]),
    );
    let weights = local_train(
        &base,
        &data,
        3,
        cfg.local.batch,
        0.3,
        0.0,
        &base.weights.clone(),
        seeds::derive(seed, &[seeds::purpose::LOCAL_TRAIN]),
    )?;
    let model = Learner::with_weights(cfg.model.kind, cfg.model.features, cfg.model.classes, weights);

    if trials == 0 || trials > data.len() {
        return Err(SafeLmError::invalid(format!(
            "trials must be in 1..={}",
            data.len()
        )));
    }
    // The generator lays samples out class by class; shuffle so trials
    // cover all classes rather than the first few.
    let victims: Vec<usize> = {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut seeds::rng(seed, &[seeds::purpose::ATTACK, 0x77]));
        idx.truncate(trials);
        idx
    };
    let mut rows = Vec::with_capacity(trials);
    let mut pairs = Vec::new();
    for (t, &victim) in victims.iter().enumerate() {
        let x = data.row(victim).to_vec();
        let y = data.labels[victim];
        let mut observed = single_sample_gradient(&model, &x, y);
        if cfg.toggles.dp {
            let norm = crate::quantizer::l2_norm(&observed);
            if cfg.dp.clip > 0.0 && norm > cfg.dp.clip {
                let s = cfg.dp.clip / norm;
                for v in observed.iter_mut() {
                    *v *= s;
                }
            }
            if cfg.dp.sigma > 0.0 {
                let mut rng = seeds::rng(seed, &[seeds::purpose::DP_NOISE, t as u64]);
                let n = rand_distr::Normal::new(0.0, cfg.dp.sigma).expect("sigma validated");
                for v in observed.iter_mut() {
                    *v += rand_distr::Distribution::sample(&n, &mut rng);
                }
            }
        }
        let truth = y;
        let full = invert_gradient(
            &ObservedUpdate::Full(observed.clone()),
            &model,
            iters,
            seeds::derive(seed, &[seeds::purpose::ATTACK, t as u64, 0]),
        )?;
        let binarized_obs = smartify(&observed, cfg.variant)?;
        let label_ok_binarized = {
            let c = cfg.model.classes;
            let tail = &binarized_obs.as_f64()[binarized_obs.len() - c..];
            infer_label(tail) == Some(truth)
        };
        let bin = invert_gradient(
            &ObservedUpdate::Binarized(binarized_obs),
            &model,
            iters,
            seeds::derive(seed, &[seeds::purpose::ATTACK, t as u64, 1]),
        )?;
        rows.push(InversionTrial {
            psnr_full: psnr(&x, &full.x_hat)?,
            psnr_binarized: psnr(&x, &bin.x_hat)?,
            label_ok_full: infer_label(bias_block(&observed, cfg.model.classes)) == Some(truth),
            label_ok_binarized,
        });
        if keep_pairs {
            pairs.push(ReconstructionPair {
                trial: t,
                original: x,
                from_full: full.x_hat,
                from_binarized: bin.x_hat,
            });
        }
    }
    let capped = |v: f64| v.min(PSNR_MEAN_CAP);
    let mean_full = rows.iter().map(|r| capped(r.psnr_full)).sum::<f64>() / trials as f64;
    let mean_bin = rows.iter().map(|r| capped(r.psnr_binarized)).sum::<f64>() / trials as f64;
    Ok(InversionReport {
        mean_psnr_full: mean_full,
        mean_psnr_binarized: mean_bin,
        psnr_gap: mean_full - mean_bin,
        label_recovery_full: rows.iter().filter(|r| r.label_ok_full).count() as f64
            / trials as f64,
        label_recovery_binarized: rows.iter().filter(|r| r.label_ok_binarized).count() as f64
            / trials as f64,
        trials: rows,
        pairs,
    })
}

// ---------------------------------------------------------------------
// Guard measurement
// ---------------------------------------------------------------------

/// Guard statistics over a synthetic claim set built from the trained
/// model's calibrated confidences. Entailment scores are synthetic draws
/// (correct predictions draw higher evidence support), standing in for a
/// real scorer behind the same arithmetic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuardReport {
    pub claims: usize,
    pub abstain_rate: f64,
    /// Fraction of all claims scoring below tau.
    pub below_tau_rate: f64,
    /// Fraction of claims below tau that nevertheless pass (0 with the
    /// guard on; equals `below_tau_rate` with it off).
    pub unfiltered_low_faith_rate: f64,
    pub mean_score: f64,
    pub temperature: f64,
}

pub fn guard_artifact(
    model: &Learner,
    test: &Dataset,
    tau: f64,
    enabled: bool,
    seed: u64,
) -> Result<GuardReport> {
    if test.is_empty() {
        return Err(SafeLmError::invalid("guard artifact needs a non-empty test set"));
    }
    let logits: Vec<Vec<f64>> = (0..test.len()).map(|i| model.logits(test.row(i))).collect();
    let calibration = fit_temperature(&logits, &test.labels)?;
    let mut rng = seeds::rng(seed, &[]);
    let mut below = 0usize;
    let mut abstain = 0usize;
    let mut passed_low = 0usize;
    let mut score_sum = 0.0;
    for (i, z) in logits.iter().enumerate() {
        let correct = model.predict(test.row(i)) == test.labels[i];
        let nli_scores: Vec<f64> = (0..3)
            .map(|_| {
                if correct {
                    rng.random_range(0.55..1.0)
                } else {
                    rng.random_range(0.0..0.7)
                }
            })
            .collect();
        let ce = ClaimEvidence {
            nli_scores,
            confidence: calibration.confidence(z),
            threshold: tau,
        };
        let score = faith_score(&ce)?;
        score_sum += score;
        let low = score < tau;
        if low {
            below += 1;
        }
        let decision = if enabled {
            guard_decision(score, tau)
        } else {
            GuardDecision::Pass
        };
        match decision {
            GuardDecision::Pass => {
                if low {
                    passed_low += 1;
                }
            }
            GuardDecision::AbstainOrRegenerate => abstain += 1,
        }
    }
    let n = test.len() as f64;
    Ok(GuardReport {
        claims: test.len(),
        abstain_rate: abstain as f64 / n,
        below_tau_rate: below as f64 / n,
        unfiltered_low_faith_rate: passed_low as f64 / n,
        mean_score: score_sum / n,
        temperature: calibration.temperature,
    })
}

// ---------------------------------------------------------------------
// Ablation matrix
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub disabled: String,
    pub mean_final_acc: f64,
    pub mean_macro_f1: f64,
    /// Logical uplink per client per round, in megabytes.
    pub comm_logical_mb: f64,
    /// Wire uplink per client per round, in megabytes.
    pub comm_wire_mb: f64,
    /// Inversion PSNR against what the server can actually observe;
    /// absent when updates stay encrypted.
    pub psnr_visible_db: Option<f64>,
    /// Inversion PSNR against the pre-encryption plaintext form.
    pub psnr_plaintext_floor_db: f64,
    pub label_recovery: f64,
    pub guard_abstain_rate: f64,
    pub unfiltered_low_faith_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

const INVERSION_TRIALS: usize = 12;
const INVERSION_ITERS: usize = 250;

/// Run the single-toggle-off matrix plus the all-off mean baseline.
/// Each row averages final metrics over the config's seeds.
pub fn run_ablation(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<AblationSummary> {
    let all_on = Toggles::default();
    let mut variants: Vec<(String, String, ExperimentConfig)> = Vec::new();
    let base = ExperimentConfig {
        toggles: all_on,
        ..cfg.clone()
    };
    variants.push(("full".into(), "-".into(), base.clone()));
    type ToggleOff = fn(&mut Toggles);
    let single_off: [(&str, &str, ToggleOff); 6] = [
        ("no_encryption", "paillier", |t| t.encryption = false),
        ("no_smartification", "binarization", |t| t.smartification = false),
        ("no_smote", "class balancing", |t| t.smote = false),
        ("no_dp", "dp noise", |t| t.dp = false),
        ("no_adv_training", "robustness head", |t| {
            t.adversarial_training = false
        }),
        ("no_guard", "faith guard", |t| t.guard = false),
    ];
    for (name, disabled, apply) in single_off {
        let mut v = base.clone();
        apply(&mut v.toggles);
        variants.push((name.into(), disabled.into(), v));
    }
    let mut fedavg = base.clone();
    fedavg.mode = AggregationMode::Mean;
    fedavg.toggles = Toggles {
        encryption: false,
        smartification: false,
        smote: false,
        dp: false,
        adversarial_training: false,
        guard: false,
    };
    variants.push(("fedavg_baseline".into(), "all".into(), fedavg));

    let mut rows = Vec::with_capacity(variants.len());
    for (name, disabled, variant) in variants {
        let mut accs = Vec::new();
        let mut f1s = Vec::new();
        let mut last_summary: Option<RunSummary> = None;
        for &seed in &variant.seeds {
            let (_, summary) = execute_run(&variant, seed, None)?;
            accs.push(summary.final_test_acc);
            f1s.push(summary.final_macro_f1);
            last_summary = Some(summary);
        }
        let summary = last_summary.expect("at least one seed");
        let d = variant.model.dim() as u64;
        let pipeline = summary.pipeline;
        let (logical, wire) = if pipeline.smartify {
            (
                payload_bits(d, PayloadScheme::Binarized),
                if pipeline.encrypt {
                    payload_bits(d, PayloadScheme::Ciphertext { key_bits: variant.key_bits })
                } else {
                    payload_bits(d, PayloadScheme::Binarized)
                },
            )
        } else {
            (
                payload_bits(d, PayloadScheme::Full32),
                payload_bits(d, PayloadScheme::Full32),
            )
        };
        let inversion = run_inversion(&variant, variant.seeds[0], INVERSION_TRIALS, INVERSION_ITERS, false)?;
        let floor = if pipeline.smartify {
            inversion.mean_psnr_binarized
        } else {
            inversion.mean_psnr_full
        };
        let visible = if pipeline.encrypt { None } else { Some(floor) };
        let label_recovery = if pipeline.smartify {
            inversion.label_recovery_binarized
        } else {
            inversion.label_recovery_full
        };
        let guard = summary.guard.clone().expect("guard artifact always computed");
        rows.push(AblationRow {
            name,
            disabled,
            mean_final_acc: accs.iter().sum::<f64>() / accs.len() as f64,
            mean_macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
            comm_logical_mb: logical as f64 / 8.0 / 1e6,
            comm_wire_mb: wire as f64 / 8.0 / 1e6,
            psnr_visible_db: visible,
            psnr_plaintext_floor_db: floor,
            label_recovery,
            guard_abstain_rate: guard.abstain_rate,
            unfiltered_low_faith_rate: guard.unfiltered_low_faith_rate,
        });
    }
    let summary = AblationSummary {
        rows,
        seeds: cfg.seeds.clone(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(ABLATION_JSON), serde_json::to_string_pretty(&summary)?)?;
        let mut csv = String::from(
            "name,disabled,mean_final_acc,mean_macro_f1,comm_logical_mb,comm_wire_mb,psnr_visible_db,psnr_plaintext_floor_db,label_recovery,guard_abstain_rate,unfiltered_low_faith_rate\n",
        );
        for r in &summary.rows {
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{:.6},{:.6},{},{:.3},{:.3},{:.3},{:.3}\n",
                r.name,
                r.disabled,
                r.mean_final_acc,
                r.mean_macro_f1,
                r.comm_logical_mb,
                r.comm_wire_mb,
                r.psnr_visible_db.map(|v| format!("{v:.3}")).unwrap_or_default(),
                r.psnr_plaintext_floor_db,
                r.label_recovery,
                r.guard_abstain_rate,
                r.unfiltered_low_faith_rate,
            ));
        }
        fs::write(dir.join(ABLATION_CSV), csv)?;
    }
    Ok(summary)
}

// ---------------------------------------------------------------------
// Compression accounting table
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionRow {
    pub scheme: String,
    pub bits: u64,
    pub ratio_vs_full32: f64,
}

/// Uplink accounting for a `d`-coordinate update.
pub fn compression_table(d: u64, key_bits: u64) -> Vec<CompressionRow> {
    let full = payload_bits(d, PayloadScheme::Full32);
    let rows = [
        ("full32".to_string(), full),
        ("binarized".to_string(), payload_bits(d, PayloadScheme::Binarized)),
        (
            format!("ciphertext_{key_bits}"),
            payload_bits(d, PayloadScheme::Ciphertext { key_bits }),
        ),
    ];
    rows.into_iter()
        .map(|(scheme, bits)| CompressionRow {
            scheme,
            bits,
            ratio_vs_full32: full as f64 / bits as f64,
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;
    use tempfile::TempDir;

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.clients = 3;
        cfg.rounds = 2;
        cfg.model.features = 5;
        cfg.model.classes = 3;
        cfg.data.features = 5;
        cfg.data.classes = 3;
        cfg.data.per_class = 20;
        cfg.local.epochs = 1;
        cfg.local.batch = 8;
        cfg.local.lr = 0.05;
        cfg.alpha = 0.05;
        cfg.key_bits = 256;
        cfg.seeds = vec![7];
        cfg.toggles.adversarial_training = false;
        cfg
    }

    #[test]
    fn run_artifacts_are_byte_identical_across_reruns() {
        let cfg = tiny_cfg();
        let dir_a = TempDir::new().unwrap();
        let dir_b = TempDir::new().unwrap();
        execute_run(&cfg, 7, Some(dir_a.path())).unwrap();
        execute_run(&cfg, 7, Some(dir_b.path())).unwrap();
        for file in [ROUNDS_CSV, SUMMARY_JSON] {
            let a = fs::read(run_dir(dir_a.path(), &cfg, 7).join(file)).unwrap();
            let b = fs::read(run_dir(dir_b.path(), &cfg, 7).join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }

    #[test]
    fn compression_table_is_exact() {
        let rows = compression_table(35, 2048);
        assert_eq!(rows[0].bits, 1120);
        assert_eq!(rows[1].bits, 35);
        assert_eq!(rows[1].ratio_vs_full32, 32.0);
        assert_eq!(rows[2].bits, 143_360);
    }

    #[test]
    fn inversion_report_orders_full_above_binarized() {
        let mut cfg = tiny_cfg();
        cfg.model.features = 20;
        cfg.data.features = 20;
        cfg.model.classes = 7;
        cfg.data.classes = 7;
        cfg.toggles.dp = false;
        let report = run_inversion(&cfg, 3, 6, 200, false).unwrap();
        assert!(report.mean_psnr_full > report.mean_psnr_binarized);
        assert_eq!(report.label_recovery_full, 1.0);
    }

    #[test]
    fn guard_artifact_rates_are_consistent() {
        let cfg = tiny_cfg();
        let (run, _) = execute_run(&cfg, 7, None).unwrap();
        let on = guard_artifact(&run.final_model, &run.test, 0.55, true, 3).unwrap();
        let off = guard_artifact(&run.final_model, &run.test, 0.55, false, 3).unwrap();
        assert_eq!(on.below_tau_rate, off.below_tau_rate);
        assert_eq!(on.abstain_rate, on.below_tau_rate);
        assert_eq!(on.unfiltered_low_faith_rate, 0.0);
        assert_eq!(off.abstain_rate, 0.0);
        assert_eq!(off.unfiltered_low_faith_rate, off.below_tau_rate);
    }
}

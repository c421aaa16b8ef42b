//! The per-round federated protocol.
//!
//! Client side: local training from the broadcast weights, optional
//! clip-and-noise, median-threshold binarization, optional per-coordinate
//! Paillier encryption. Server side: homomorphic summation, decryption of
//! the per-coordinate sum only, and a sign-of-sum decode.
//!
//! The decode is the protocol's load-bearing identity: for `{-1,+1}`
//! inputs the coordinate-wise median over clients equals the sign of
//! their sum (0 on ties), so the Byzantine median filter is computable
//! from the decrypted aggregate alone, without per-client values.
//! `plaintext_median` mode keeps the literal per-client median as the
//! reference oracle, and mean / DP-mean / signSGD modes provide the
//! baselines.

use serde::{Deserialize, Serialize};

use crate::config::{AggregationMode, AttackKind, ExperimentConfig};
use crate::datasim::{generate, partition, Dataset};
use crate::error::{Result, SafeLmError};
use crate::exec;
use crate::learners::{adv_local_train, local_train, smote_balance, Learner};
use crate::paillier::{
    self, Ciphertext, PaillierPublicKey, PaillierSecretKey,
};
use crate::quantizer::{
    cosine_alignment, l2_norm, payload_bits, smartify, AlignmentReport, BinarizedUpdate,
    PayloadScheme, ThresholdVariant,
};
use crate::report::{mean_std, RoundReport};
use crate::seeds;
use crate::threat;
use rand_distr::{Distribution, Normal};

/// Global optimizer state: current and previous weights plus the server
/// step size and momentum coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub weights: Vec<f64>,
    pub prev_weights: Vec<f64>,
    pub round: usize,
    pub alpha: f64,
    pub momentum: f64,
}

impl GlobalState {
    /// At round 0 the previous weights equal the current ones, so the
    /// first momentum term vanishes.
    pub fn new(weights: Vec<f64>, alpha: f64, momentum: f64) -> GlobalState {
        GlobalState {
            prev_weights: weights.clone(),
            weights,
            round: 0,
            alpha,
            momentum,
        }
    }
}

/// What a client actually uploads.
#[derive(Debug, Clone, PartialEq)]
pub enum UpdatePayload {
    Plain(Vec<f64>),
    Binarized(BinarizedUpdate),
    Encrypted(Vec<Ciphertext>),
}

impl UpdatePayload {
    fn kind(&self) -> &'static str {
        match self {
            UpdatePayload::Plain(_) => "plain",
            UpdatePayload::Binarized(_) => "binarized",
            UpdatePayload::Encrypted(_) => "encrypted",
        }
    }

    fn len(&self) -> usize {
        match self {
            UpdatePayload::Plain(v) => v.len(),
            UpdatePayload::Binarized(b) => b.len(),
            UpdatePayload::Encrypted(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdateEnvelope {
    pub client_id: usize,
    pub payload: UpdatePayload,
    pub logical_bits: u64,
    pub wire_bits: u64,
}

/// A client either contributes an envelope or is skipped explicitly;
/// an empty shard never turns into a silent zero update.
#[derive(Debug, Clone, PartialEq)]
pub enum ClientContribution {
    Update(ClientUpdateEnvelope),
    Skipped { client_id: usize },
}

#[derive(Debug, Clone)]
pub struct ClientRoundOutput {
    pub contribution: ClientContribution,
    pub alignment: Option<AlignmentReport>,
}

/// The toggle-resolved shape of the pipeline for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectivePipeline {
    pub mode: AggregationMode,
    pub variant: ThresholdVariant,
    pub smartify: bool,
    pub encrypt: bool,
    pub dp: bool,
    pub adversarial_training: bool,
    pub smote: bool,
}

/// Resolve ablation toggles against the aggregation mode. Disabling
/// smartification leaves nothing to encrypt, so secure majority falls
/// back to the plaintext median filter over full-precision deltas.
pub fn resolve_pipeline(cfg: &ExperimentConfig) -> EffectivePipeline {
    let t = cfg.toggles;
    let mut p = EffectivePipeline {
        mode: cfg.mode,
        variant: cfg.variant,
        smartify: t.smartification,
        encrypt: t.encryption,
        dp: t.dp,
        adversarial_training: t.adversarial_training,
        smote: t.smote,
    };
    match cfg.mode {
        AggregationMode::Mean => {
            p.smartify = false;
            p.encrypt = false;
            p.dp = false;
        }
        AggregationMode::DpMean => {
            p.smartify = false;
            p.encrypt = false;
            p.dp = true;
        }
        AggregationMode::SignsgdMajority => {
            p.smartify = true;
            p.variant = ThresholdVariant::Zero;
            p.encrypt = false;
        }
        AggregationMode::PlaintextMedian => {
            p.encrypt = false;
        }
        AggregationMode::SecureMajority => {
            if !p.smartify {
                p.mode = AggregationMode::PlaintextMedian;
                p.encrypt = false;
            } else {
                p.encrypt = t.encryption;
            }
        }
    }
    p
}

pub struct ClientRoundCtx<'a> {
    pub cfg: &'a ExperimentConfig,
    pub pipeline: EffectivePipeline,
    pub global: &'a [f64],
    pub shard: &'a Dataset,
    pub pk: Option<&'a PaillierPublicKey>,
    pub master_seed: u64,
    pub round: usize,
    pub client_id: usize,
    pub adversary: Option<&'a AttackKind>,
}

/// One client's round: train locally, form the delta, corrupt it if this
/// client is an update-level adversary, otherwise clip-and-noise when DP
/// is on, then binarize and (optionally) encrypt.
pub fn client_round(ctx: &ClientRoundCtx) -> Result<ClientRoundOutput> {
    if ctx.shard.is_empty() {
        return Ok(ClientRoundOutput {
            contribution: ClientContribution::Skipped {
                client_id: ctx.client_id,
            },
            alignment: None,
        });
    }
    let cfg = ctx.cfg;
    let model = Learner::with_weights(
        cfg.model.kind,
        cfg.model.features,
        cfg.model.classes,
        ctx.global.to_vec(),
    );
    let train_seed = seeds::derive(
        ctx.master_seed,
        &[seeds::purpose::LOCAL_TRAIN, ctx.round as u64, ctx.client_id as u64],
    );
    let new_weights = if ctx.pipeline.adversarial_training {
        adv_local_train(
            &model,
            ctx.shard,
            cfg.local.epochs,
            cfg.local.batch,
            cfg.local.lr,
            cfg.fedprox_mu,
            ctx.global,
            &cfg.adv,
            train_seed,
        )?
    } else {
        local_train(
            &model,
            ctx.shard,
            cfg.local.epochs,
            cfg.local.batch,
            cfg.local.lr,
            cfg.fedprox_mu,
            ctx.global,
            train_seed,
        )?
    };
    let mut delta: Vec<f64> = new_weights
        .iter()
        .zip(ctx.global)
        .map(|(w, g)| w - g)
        .collect();

    let update_adversary = matches!(
        ctx.adversary,
        Some(AttackKind::SignFlip | AttackKind::Scale { .. })
    );
    if let (true, Some(kind)) = (update_adversary, ctx.adversary) {
        // Update-level adversaries send whatever they like; they do not
        // sanitize themselves with DP noise.
        delta = threat::apply_update_adversary(kind, &delta);
    } else if ctx.pipeline.dp {
        apply_dp(
            &mut delta,
            cfg.dp.clip,
            cfg.dp.sigma,
            ctx.master_seed,
            ctx.round,
            ctx.client_id,
        );
    }

    let d = delta.len() as u64;
    let (payload, alignment) = if ctx.pipeline.smartify {
        let binarized = smartify(&delta, ctx.pipeline.variant)?;
        let alignment = cosine_alignment(&delta, &binarized.as_f64())?;
        if ctx.pipeline.encrypt {
            let pk = ctx
                .pk
                .ok_or_else(|| SafeLmError::Protocol("encryption enabled but no public key".into()))?;
            let enc_seed = seeds::derive(
                ctx.master_seed,
                &[seeds::purpose::ENCRYPT, ctx.round as u64, ctx.client_id as u64],
            );
            let signs: Vec<i64> = binarized.signs.iter().map(|&s| i64::from(s)).collect();
            let cts = paillier::encrypt_vector(pk, &signs, enc_seed)?;
            (UpdatePayload::Encrypted(cts), Some(alignment))
        } else {
            (UpdatePayload::Binarized(binarized), Some(alignment))
        }
    } else {
        (UpdatePayload::Plain(delta), None)
    };

    let (logical_bits, wire_bits) = match &payload {
        UpdatePayload::Plain(_) => (
            payload_bits(d, PayloadScheme::Full32),
            payload_bits(d, PayloadScheme::Full32),
        ),
        UpdatePayload::Binarized(_) => (
            payload_bits(d, PayloadScheme::Binarized),
            payload_bits(d, PayloadScheme::Binarized),
        ),
        UpdatePayload::Encrypted(_) => (
            payload_bits(d, PayloadScheme::Binarized),
            payload_bits(
                d,
                PayloadScheme::Ciphertext {
                    key_bits: ctx.cfg.key_bits,
                },
            ),
        ),
    };

    Ok(ClientRoundOutput {
        contribution: ClientContribution::Update(ClientUpdateEnvelope {
            client_id: ctx.client_id,
            payload,
            logical_bits,
            wire_bits,
        }),
        alignment,
    })
}

/// `delta <- delta * min(1, clip / ||delta||) + N(0, sigma^2 I)`.
fn apply_dp(delta: &mut [f64], clip: f64, sigma: f64, master: u64, round: usize, client: usize) {
    let norm = l2_norm(delta);
    if clip > 0.0 && norm > clip {
        let scale = clip / norm;
        for v in delta.iter_mut() {
            *v *= scale;
        }
    }
    if sigma > 0.0 {
        let mut rng = seeds::rng(
            master,
            &[seeds::purpose::DP_NOISE, round as u64, client as u64],
        );
        let noise = Normal::new(0.0, sigma).expect("sigma validated");
        for v in delta.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
}

/// Decoded aggregate plus the number of tie coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateOutcome {
    pub s_hat: Vec<f64>,
    pub ties: usize,
}

/// Sign of the per-coordinate sum; ties decode to 0. For `{-1,+1}`
/// client values this equals the coordinate-wise median.
pub fn sign_of_sum_decode(sums: &[i64]) -> AggregateOutcome {
    let mut ties = 0usize;
    let s_hat = sums
        .iter()
        .map(|&s| match s.cmp(&0) {
            std::cmp::Ordering::Greater => 1.0,
            std::cmp::Ordering::Less => -1.0,
            std::cmp::Ordering::Equal => {
                ties += 1;
                0.0
            }
        })
        .collect();
    AggregateOutcome { s_hat, ties }
}

/// Literal coordinate-wise median across client rows (sorting oracle).
pub fn coordinate_median(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d)
        .map(|j| {
            let mut col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).expect("finite update values"));
            let n = col.len();
            if n % 2 == 1 {
                col[n / 2]
            } else {
                (col[n / 2 - 1] + col[n / 2]) / 2.0
            }
        })
        .collect()
}

/// Aggregate uniform envelopes under the effective mode.
pub fn server_aggregate(
    envelopes: &[ClientUpdateEnvelope],
    mode: AggregationMode,
    keys: Option<(&PaillierPublicKey, &PaillierSecretKey)>,
) -> Result<AggregateOutcome> {
    if envelopes.is_empty() {
        return Err(SafeLmError::Protocol("no client envelopes to aggregate".into()));
    }
    let kind = envelopes[0].payload.kind();
    let d = envelopes[0].payload.len();
    for e in envelopes {
        if e.payload.kind() != kind {
            return Err(SafeLmError::Protocol(format!(
                "mixed payload kinds: {} and {}",
                kind,
                e.payload.kind()
            )));
        }
        if e.payload.len() != d {
            return Err(SafeLmError::Protocol("mismatched update dimensions".into()));
        }
    }
    let k = envelopes.len();

    match (mode, kind) {
        (AggregationMode::SecureMajority, "encrypted") => {
            let (pk, sk) =
                keys.ok_or_else(|| SafeLmError::Protocol("secure mode requires the secret key".into()))?;
            // The signed encoding must hold sums in [-K, K].
            if pk.n <= num_bigint::BigUint::from(2 * k as u64) {
                return Err(SafeLmError::Protocol(format!(
                    "modulus too small for {k} clients"
                )));
            }
            let vectors: Vec<Vec<Ciphertext>> = envelopes
                .iter()
                .map(|e| match &e.payload {
                    UpdatePayload::Encrypted(c) => c.clone(),
                    _ => unreachable!("kind checked above"),
                })
                .collect();
            let agg = paillier::hom_sum_vectors(pk, &vectors)?;
            let sums = paillier::decrypt_vector(sk, pk, &agg)?;
            for &s in &sums {
                if s.unsigned_abs() as usize > k {
                    return Err(SafeLmError::AggregateIntegrity {
                        magnitude: s,
                        clients: k,
                    });
                }
            }
            Ok(sign_of_sum_decode(&sums))
        }
        (AggregationMode::SecureMajority | AggregationMode::SignsgdMajority, "binarized") => {
            let mut sums = vec![0i64; d];
            for e in envelopes {
                if let UpdatePayload::Binarized(b) = &e.payload {
                    for (acc, &s) in sums.iter_mut().zip(&b.signs) {
                        *acc += i64::from(s);
                    }
                }
            }
            Ok(sign_of_sum_decode(&sums))
        }
        (AggregationMode::PlaintextMedian, "binarized" | "plain") => {
            let rows: Vec<Vec<f64>> = envelopes
                .iter()
                .map(|e| match &e.payload {
                    UpdatePayload::Binarized(b) => b.as_f64(),
                    UpdatePayload::Plain(v) => v.clone(),
                    _ => unreachable!("kind checked above"),
                })
                .collect();
            let s_hat = coordinate_median(&rows);
            let ties = s_hat.iter().filter(|&&v| v == 0.0).count();
            Ok(AggregateOutcome { s_hat, ties })
        }
        (AggregationMode::Mean | AggregationMode::DpMean, "plain") => {
            let mut s_hat = vec![0.0; d];
            for e in envelopes {
                if let UpdatePayload::Plain(v) = &e.payload {
                    for (acc, x) in s_hat.iter_mut().zip(v) {
                        *acc += x / k as f64;
                    }
                }
            }
            Ok(AggregateOutcome { s_hat, ties: 0 })
        }
        (mode, kind) => Err(SafeLmError::Protocol(format!(
            "mode {mode:?} cannot aggregate {kind} payloads"
        ))),
    }
}

/// Server step: `W_next = W + alpha * s' + momentum * (W - W_prev)` with
/// `s'` the decoded aggregate, divided by `k` when normalization is on.
pub fn global_update(
    state: &GlobalState,
    s_hat: &[f64],
    normalize_by_k: bool,
    k: usize,
) -> Result<GlobalState> {
    if s_hat.len() != state.weights.len() {
        return Err(SafeLmError::Protocol(format!(
            "aggregate dimension {} does not match weights {}",
            s_hat.len(),
            state.weights.len()
        )));
    }
    let scale = if normalize_by_k { 1.0 / k as f64 } else { 1.0 };
    let weights: Vec<f64> = state
        .weights
        .iter()
        .zip(&state.prev_weights)
        .zip(s_hat)
        .map(|((w, wp), s)| w + state.alpha * s * scale + state.momentum * (w - wp))
        .collect();
    Ok(GlobalState {
        prev_weights: state.weights.clone(),
        weights,
        round: state.round + 1,
        alpha: state.alpha,
        momentum: state.momentum,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunOutcome {
    Completed,
    Diverged { round: usize, detail: String },
}

/// A full simulation run for one seed.
#[derive(Debug, Clone)]
pub struct SimRun {
    pub reports: Vec<RoundReport>,
    pub outcome: RunOutcome,
    pub final_model: Learner,
    pub test: Dataset,
    pub pipeline: EffectivePipeline,
}

/// Orchestrate the full protocol for `rounds` rounds and `K` clients.
///
/// Deterministic in `(cfg, seed)`: every random stream is derived from the
/// master seed with structural tags, so scheduling order cannot leak in.
pub fn run_simulation(cfg: &ExperimentConfig, seed: u64) -> Result<SimRun> {
    cfg.validate()?;
    let pipeline = resolve_pipeline(cfg);

    let data = generate(
        cfg.data.classes,
        cfg.data.features,
        cfg.data.per_class,
        cfg.data.separation,
        cfg.data.imbalance_ratio,
        seeds::derive(seed, &[seeds::purpose::DATA]),
    )?;
    let (train, test) = if cfg.data.test_fraction > 0.0 {
        data.stratified_split(cfg.data.test_fraction, seed)
    } else {
        (data.clone(), data)
    };
    let plan = partition(&train, cfg.partition, cfg.clients, seed)?;
    let mut shards = plan.shards(&train);

    // Adversary assignment: the first floor(fraction * K) clients.
    let malicious = cfg
        .attack
        .as_ref()
        .map(|a| ((a.fraction * cfg.clients as f64).floor() as usize).min(cfg.clients))
        .unwrap_or(0);
    let adversary = cfg.attack.as_ref().map(|a| &a.kind);

    for (client, shard) in shards.iter_mut().enumerate() {
        let is_malicious = client < malicious;
        if let (true, Some(AttackKind::Backdoor {
            trigger_coords,
            trigger_value,
            target_label,
            sample_fraction,
        })) = (is_malicious, adversary)
        {
            // Backdoor clients poison their raw shard and skip the
            // honest preprocessing.
            *shard = threat::backdoor_shard(
                shard,
                trigger_coords,
                *trigger_value,
                *target_label,
                *sample_fraction,
                seeds::derive(seed, &[seeds::purpose::ATTACK, client as u64]),
            );
        } else if pipeline.smote && !shard.is_empty() {
            *shard = smote_balance(
                shard,
                cfg.local.smote_k,
                seeds::derive(seed, &[seeds::purpose::SMOTE, client as u64]),
            )?;
        }
    }

    let keypair = if pipeline.encrypt {
        Some(paillier::keygen(
            cfg.key_bits,
            seeds::derive(seed, &[seeds::purpose::KEYGEN]),
        )?)
    } else {
        None
    };

    let init = Learner::new(
        cfg.model.kind,
        cfg.model.features,
        cfg.model.classes,
        seeds::derive(seed, &[seeds::purpose::INIT]),
    );
    let mut state = GlobalState::new(init.weights.clone(), cfg.alpha, cfg.momentum);

    let mut reports = Vec::with_capacity(cfg.rounds);
    let mut logical_cum = 0u64;
    let mut wire_cum = 0u64;
    let mut outcome = RunOutcome::Completed;

    for round in 1..=cfg.rounds {
        let global = state.weights.clone();
        let outputs = exec::par_map_n(cfg.clients, |client_id| {
            let ctx = ClientRoundCtx {
                cfg,
                pipeline,
                global: &global,
                shard: &shards[client_id],
                pk: keypair.as_ref().map(|(pk, _)| pk),
                master_seed: seed,
                round,
                client_id,
                adversary: if client_id < malicious { adversary } else { None },
            };
            client_round(&ctx)
        });

        let mut envelopes = Vec::with_capacity(cfg.clients);
        let mut gammas = Vec::new();
        let mut failure: Option<String> = None;
        for out in outputs {
            match out {
                Ok(o) => {
                    if let Some(a) = &o.alignment {
                        if let Some(g) = a.gamma {
                            gammas.push(g);
                        }
                    }
                    match o.contribution {
                        ClientContribution::Update(e) => envelopes.push(e),
                        ClientContribution::Skipped { .. } => {}
                    }
                }
                Err(SafeLmError::Divergence { detail, .. }) => {
                    failure = Some(detail);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(detail) = failure {
            outcome = RunOutcome::Diverged { round, detail };
            break;
        }
        if envelopes.is_empty() {
            return Err(SafeLmError::Protocol("every client was skipped".into()));
        }

        logical_cum += envelopes.iter().map(|e| e.logical_bits).sum::<u64>();
        wire_cum += envelopes.iter().map(|e| e.wire_bits).sum::<u64>();

        let aggregate = server_aggregate(
            &envelopes,
            pipeline.mode,
            keypair.as_ref().map(|(pk, sk)| (pk, sk)),
        )?;
        state = global_update(&state, &aggregate.s_hat, cfg.normalize_by_k, envelopes.len())?;

        if state.weights.iter().any(|w| !w.is_finite()) {
            outcome = RunOutcome::Diverged {
                round,
                detail: "non-finite global weights".into(),
            };
            break;
        }

        let model = Learner::with_weights(
            cfg.model.kind,
            cfg.model.features,
            cfg.model.classes,
            state.weights.clone(),
        );
        let per_class_f1 = model.per_class_f1(&test);
        let macro_f1 = per_class_f1.iter().sum::<f64>() / per_class_f1.len() as f64;
        let (gamma_mean, gamma_std) = mean_std(&gammas);
        let asr = match adversary {
            Some(AttackKind::Backdoor {
                trigger_coords,
                trigger_value,
                target_label,
                ..
            }) => Some(
                threat::measure_asr(&model, trigger_coords, *trigger_value, *target_label, &test)
                    .asr,
            ),
            _ => None,
        };
        reports.push(RoundReport {
            round,
            train_acc: model.accuracy(&train),
            test_acc: model.accuracy(&test),
            macro_f1,
            per_class_f1,
            logical_bits_cum: logical_cum,
            wire_bits_cum: wire_cum,
            gamma_mean,
            gamma_std,
            filter_ties: aggregate.ties,
            asr,
            notes: String::new(),
        });
    }

    if let RunOutcome::Diverged { round, detail } = &outcome {
        log::warn!("run diverged at round {round}: {detail}");
    }

    Ok(SimRun {
        reports,
        outcome,
        final_model: Learner::with_weights(
            cfg.model.kind,
            cfg.model.features,
            cfg.model.classes,
            state.weights,
        ),
        test,
        pipeline,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::config::Toggles;
    use crate::quantizer::smartify;

    fn bin_envelope(client_id: usize, signs: Vec<i8>) -> ClientUpdateEnvelope {
        let d = signs.len() as u64;
        ClientUpdateEnvelope {
            client_id,
            payload: UpdatePayload::Binarized(BinarizedUpdate {
                signs,
                threshold: 0.0,
                variant: ThresholdVariant::Zero,
            }),
            logical_bits: d,
            wire_bits: d,
        }
    }

    fn plain_envelope(client_id: usize, v: Vec<f64>) -> ClientUpdateEnvelope {
        let d = v.len() as u64;
        ClientUpdateEnvelope {
            client_id,
            payload: UpdatePayload::Plain(v),
            logical_bits: 32 * d,
            wire_bits: 32 * d,
        }
    }

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.clients = 4;
        cfg.rounds = 3;
        cfg.model.features = 6;
        cfg.model.classes = 3;
        cfg.data.features = 6;
        cfg.data.classes = 3;
        cfg.data.per_class = 30;
        cfg.local.epochs = 1;
        cfg.local.batch = 16;
        cfg.local.lr = 0.05;
        cfg.alpha = 0.05;
        cfg.key_bits = 256;
        cfg.toggles = Toggles {
            adversarial_training: false,
            ..Toggles::default()
        };
        cfg
    }

    #[test]
    fn majority_matches_median_on_odd_panel() {
        // K=3, coordinate (+1, +1, -1) -> +1 in both modes.
        let envs = vec![
            bin_envelope(0, vec![1, 1]),
            bin_envelope(1, vec![1, -1]),
            bin_envelope(2, vec![-1, -1]),
        ];
        let majority = server_aggregate(&envs, AggregationMode::SecureMajority, None).unwrap();
        let median = server_aggregate(&envs, AggregationMode::PlaintextMedian, None).unwrap();
        assert_eq!(majority.s_hat, vec![1.0, -1.0]);
        assert_eq!(majority.s_hat, median.s_hat);
    }

    #[test]
    fn tie_decodes_to_zero() {
        let envs = vec![bin_envelope(0, vec![1]), bin_envelope(1, vec![-1])];
        let majority = server_aggregate(&envs, AggregationMode::SecureMajority, None).unwrap();
        assert_eq!(majority.s_hat, vec![0.0]);
        assert_eq!(majority.ties, 1);
        let median = server_aggregate(&envs, AggregationMode::PlaintextMedian, None).unwrap();
        assert_eq!(median.s_hat, vec![0.0]);
    }

    #[test]
    fn single_client_is_identity() {
        let envs = vec![bin_envelope(0, vec![1, -1, 1])];
        let out = server_aggregate(&envs, AggregationMode::SecureMajority, None).unwrap();
        assert_eq!(out.s_hat, vec![1.0, -1.0, 1.0]);
    }

    #[test]
    fn mixed_payload_kinds_rejected() {
        let envs = vec![bin_envelope(0, vec![1]), plain_envelope(1, vec![0.5])];
        assert!(matches!(
            server_aggregate(&envs, AggregationMode::SecureMajority, None),
            Err(SafeLmError::Protocol(_))
        ));
    }

    #[test]
    fn mean_mode_averages() {
        let envs = vec![
            plain_envelope(0, vec![1.0, 0.0]),
            plain_envelope(1, vec![0.0, 1.0]),
        ];
        let out = server_aggregate(&envs, AggregationMode::Mean, None).unwrap();
        assert_eq!(out.s_hat, vec![0.5, 0.5]);
    }

    #[test]
    fn momentum_free_update_adds_alpha_s() {
        let state = GlobalState::new(vec![1.0, 2.0], 1.0, 0.0);
        let next = global_update(&state, &[1.0, -1.0], false, 5).unwrap();
        assert_eq!(next.weights, vec![2.0, 1.0]);
        assert_eq!(next.round, 1);
    }

    #[test]
    fn first_round_momentum_vanishes() {
        let state = GlobalState::new(vec![1.0, 2.0], 1.0, 0.9);
        let with_momentum = global_update(&state, &[1.0, -1.0], false, 5).unwrap();
        let mut no_momentum_state = state.clone();
        no_momentum_state.momentum = 0.0;
        let without = global_update(&no_momentum_state, &[1.0, -1.0], false, 5).unwrap();
        assert_eq!(with_momentum.weights, without.weights);
    }

    #[test]
    fn zero_aggregate_two_rounds_returns_to_start() {
        let w0 = vec![0.3, -0.7, 1.1];
        let mut state = GlobalState::new(w0.clone(), 0.5, 0.9);
        state = global_update(&state, &[0.0, 0.0, 0.0], false, 3).unwrap();
        state = global_update(&state, &[0.0, 0.0, 0.0], false, 3).unwrap();
        assert_eq!(state.weights, w0);
    }

    #[test]
    fn normalization_divides_by_k() {
        let state = GlobalState::new(vec![0.0], 1.0, 0.0);
        let next = global_update(&state, &[1.0], true, 4).unwrap();
        assert_eq!(next.weights, vec![0.25]);
    }

    #[test]
    fn momentum_telescoping_matches_closed_form() {
        // Constant aggregate s, momentum mu: the per-round displacement is
        // u_r = alpha * s * (1 - mu^r) / (1 - mu), so
        // W_R = W_0 + alpha * s * sum_{r=1..R} (1 - mu^r) / (1 - mu).
        let alpha = 0.1;
        let mu = 0.6;
        let s = 1.0;
        let rounds = 12;
        let mut state = GlobalState::new(vec![0.0], alpha, mu);
        for _ in 0..rounds {
            state = global_update(&state, &[s], false, 1).unwrap();
        }
        let mut expect = 0.0;
        for r in 1..=rounds {
            expect += alpha * s * (1.0 - mu.powi(r)) / (1.0 - mu);
        }
        assert!((state.weights[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn smartified_zero_delta_still_binary() {
        // lr = 0 makes the local delta exactly zero; the binarized payload
        // is still all +-1 (all +1 under the >= tie rule).
        let mut cfg = small_cfg();
        cfg.local.lr = 0.0;
        cfg.toggles.encryption = false;
        cfg.toggles.dp = false;
        let run = run_simulation(&cfg, 3).unwrap();
        assert_eq!(run.reports.len(), 3);
        // Zero delta binarizes to all +1, sum = K > 0 everywhere, so the
        // decoded aggregate is all +1 and weights drift by alpha per round.
        assert!(matches!(run.outcome, RunOutcome::Completed));
    }

    #[test]
    fn dp_clip_halves_oversized_delta() {
        let mut delta = vec![0.12, 0.16];
        // ||delta|| = 0.2, clip = 0.1 -> exactly halved; sigma = 0.
        apply_dp(&mut delta, 0.1, 0.0, 0, 0, 0);
        assert!((delta[0] - 0.06).abs() < 1e-12);
        assert!((delta[1] - 0.08).abs() < 1e-12);
    }

    #[test]
    fn zero_rounds_changes_nothing() {
        let mut cfg = small_cfg();
        cfg.rounds = 0;
        cfg.toggles.encryption = false;
        let run = run_simulation(&cfg, 1).unwrap();
        assert!(run.reports.is_empty());
        let init = Learner::new(cfg.model.kind, 6, 3, seeds::derive(1, &[seeds::purpose::INIT]));
        assert_eq!(run.final_model.weights, init.weights);
    }

    #[test]
    fn same_seed_reproduces_reports_exactly() {
        let mut cfg = small_cfg();
        cfg.toggles.encryption = false;
        let a = run_simulation(&cfg, 9).unwrap();
        let b = run_simulation(&cfg, 9).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.final_model.weights, b.final_model.weights);
        let c = run_simulation(&cfg, 10).unwrap();
        assert_ne!(a.final_model.weights, c.final_model.weights);
    }

    #[test]
    fn encrypted_and_plain_secure_paths_agree_exactly() {
        let mut cfg = small_cfg();
        cfg.rounds = 4;
        let mut plain_cfg = cfg.clone();
        plain_cfg.toggles.encryption = false;
        let enc = run_simulation(&cfg, 5).unwrap();
        let plain = run_simulation(&plain_cfg, 5).unwrap();
        assert_eq!(enc.final_model.weights, plain.final_model.weights);
        for (a, b) in enc.reports.iter().zip(&plain.reports) {
            assert_eq!(a.test_acc, b.test_acc);
            assert_eq!(a.train_acc, b.train_acc);
            assert_eq!(a.logical_bits_cum, b.logical_bits_cum);
            assert_ne!(a.wire_bits_cum, b.wire_bits_cum);
        }
    }

    #[test]
    fn majority_equals_median_randomized_panels() {
        let mut rng = seeds::rng(77, &[]);
        use rand::Rng;
        for _ in 0..500 {
            let k = rng.random_range(1..=15usize);
            let d = rng.random_range(1..=8usize);
            let envs: Vec<ClientUpdateEnvelope> = (0..k)
                .map(|c| {
                    bin_envelope(
                        c,
                        (0..d)
                            .map(|_| if rng.random::<bool>() { 1i8 } else { -1 })
                            .collect(),
                    )
                })
                .collect();
            let majority = server_aggregate(&envs, AggregationMode::SecureMajority, None).unwrap();
            let median = server_aggregate(&envs, AggregationMode::PlaintextMedian, None).unwrap();
            assert_eq!(majority.s_hat, median.s_hat);
        }
    }

    #[test]
    fn sign_flip_cannot_override_honest_majority() {
        // 3 honest clients agree on every coordinate; 2 flipped clients
        // cannot move any coordinate of the decoded aggregate.
        let honest = vec![0.4, -0.2, 0.9, -0.6];
        let honest_signs = smartify(&honest, ThresholdVariant::AbsMedian).unwrap();
        let flipped = threat::sign_flip(&honest);
        let adv_signs = smartify(&flipped, ThresholdVariant::AbsMedian).unwrap();
        let envs = vec![
            bin_envelope(0, honest_signs.signs.clone()),
            bin_envelope(1, honest_signs.signs.clone()),
            bin_envelope(2, honest_signs.signs.clone()),
            bin_envelope(3, adv_signs.signs.clone()),
            bin_envelope(4, adv_signs.signs),
        ];
        let out = server_aggregate(&envs, AggregationMode::SecureMajority, None).unwrap();
        assert_eq!(
            out.s_hat,
            honest_signs.signs.iter().map(|&s| f64::from(s)).collect::<Vec<_>>()
        );
    }
}

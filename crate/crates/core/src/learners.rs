//! Toy differentiable models with analytic gradients.
//!
//! Two model kinds stand in for the adapted model whose deltas flow
//! through the aggregation pipeline: multinomial logistic regression and
//! a one-hidden-layer tanh network. Both expose flat weight vectors, mean
//! cross-entropy gradients, seeded mini-batch SGD (optionally with a
//! proximal anchor and an adversarial-mixing objective), plus the SMOTE
//! balancer and temperature calibration used by the experiments.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasim::Dataset;
use crate::error::{Result, SafeLmError};
use crate::seeds;

/// Model architecture selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LearnerKind {
    Logreg,
    Mlp { hidden: usize },
}

/// A model with flattened weights.
///
/// Logreg layout: `W[C x F]` row-major, then `b[C]`.
/// MLP layout: `W1[H x F]`, `b1[H]`, `W2[C x H]`, `b2[C]`, tanh hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub kind: LearnerKind,
    pub weights: Vec<f64>,
    pub n_features: usize,
    pub n_classes: usize,
}

impl Learner {
    pub fn dim(kind: LearnerKind, n_features: usize, n_classes: usize) -> usize {
        match kind {
            LearnerKind::Logreg => n_features * n_classes + n_classes,
            LearnerKind::Mlp { hidden } => {
                n_features * hidden + hidden + hidden * n_classes + n_classes
            }
        }
    }

    /// Fresh model: zero weights for logreg, symmetric uniform
    /// `±1/sqrt(fan_in)` for the MLP, seeded.
    pub fn new(kind: LearnerKind, n_features: usize, n_classes: usize, seed: u64) -> Learner {
        let d = Self::dim(kind, n_features, n_classes);
        let weights = match kind {
            LearnerKind::Logreg => vec![0.0; d],
            LearnerKind::Mlp { hidden } => {
                let mut rng = seeds::rng(seed, &[seeds::purpose::INIT]);
                let mut w = Vec::with_capacity(d);
                let bound1 = 1.0 / (n_features as f64).sqrt();
                for _ in 0..n_features * hidden {
                    w.push(rng.random_range(-bound1..bound1));
                }
                w.extend(std::iter::repeat_n(0.0, hidden));
                let bound2 = 1.0 / (hidden as f64).sqrt();
                for _ in 0..hidden * n_classes {
                    w.push(rng.random_range(-bound2..bound2));
                }
                w.extend(std::iter::repeat_n(0.0, n_classes));
                w
            }
        };
        Learner {
            kind,
            weights,
            n_features,
            n_classes,
        }
    }

    pub fn with_weights(
        kind: LearnerKind,
        n_features: usize,
        n_classes: usize,
        weights: Vec<f64>,
    ) -> Learner {
        assert_eq!(weights.len(), Self::dim(kind, n_features, n_classes));
        Learner {
            kind,
            weights,
            n_features,
            n_classes,
        }
    }

    /// Class logits for one sample.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_features);
        let f = self.n_features;
        let c = self.n_classes;
        match self.kind {
            LearnerKind::Logreg => {
                let (w, b) = self.weights.split_at(f * c);
                (0..c)
                    .map(|k| b[k] + w[k * f..(k + 1) * f].iter().zip(x).map(|(wj, xj)| wj * xj).sum::<f64>())
                    .collect()
            }
            LearnerKind::Mlp { hidden } => {
                let (w1, rest) = self.weights.split_at(f * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * c);
                let h: Vec<f64> = (0..hidden)
                    .map(|k| {
                        (b1[k]
                            + w1[k * f..(k + 1) * f]
                                .iter()
                                .zip(x)
                                .map(|(wj, xj)| wj * xj)
                                .sum::<f64>())
                        .tanh()
                    })
                    .collect();
                (0..c)
                    .map(|k| {
                        b2[k]
                            + w2[k * hidden..(k + 1) * hidden]
                                .iter()
                                .zip(&h)
                                .map(|(wj, hj)| wj * hj)
                                .sum::<f64>()
                    })
                    .collect()
            }
        }
    }

    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, ds: &Dataset) -> f64 {
        if ds.is_empty() {
            return 0.0;
        }
        let hits = (0..ds.len())
            .filter(|&i| self.predict(ds.row(i)) == ds.labels[i])
            .count();
        hits as f64 / ds.len() as f64
    }

    /// Per-class F1 scores on `ds` (0 when a class never appears).
    pub fn per_class_f1(&self, ds: &Dataset) -> Vec<f64> {
        let c = self.n_classes;
        let mut tp = vec![0usize; c];
        let mut fp = vec![0usize; c];
        let mut fneg = vec![0usize; c];
        for i in 0..ds.len() {
            let pred = self.predict(ds.row(i));
            let truth = ds.labels[i];
            if pred == truth {
                tp[truth] += 1;
            } else {
                fp[pred] += 1;
                fneg[truth] += 1;
            }
        }
        (0..c)
            .map(|k| {
                let denom = 2 * tp[k] + fp[k] + fneg[k];
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp[k] as f64 / denom as f64
                }
            })
            .collect()
    }

    pub fn macro_f1(&self, ds: &Dataset) -> f64 {
        let f1 = self.per_class_f1(ds);
        f1.iter().sum::<f64>() / f1.len() as f64
    }

    /// Mean cross-entropy over the given sample indices.
    pub fn loss_on(&self, ds: &Dataset, idx: &[usize]) -> f64 {
        assert!(!idx.is_empty());
        let mut total = 0.0;
        for &i in idx {
            let p = self.probabilities(ds.row(i));
            // clamp propagates NaN, which the divergence checks rely on.
            total -= p[ds.labels[i]].clamp(1e-300, 1.0).ln();
        }
        total / idx.len() as f64
    }

    pub fn loss(&self, ds: &Dataset) -> f64 {
        let idx: Vec<usize> = (0..ds.len()).collect();
        self.loss_on(ds, &idx)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Analytic gradient of mean cross-entropy over `idx`.
pub fn grad_on(learner: &Learner, ds: &Dataset, idx: &[usize]) -> Result<Vec<f64>> {
    if idx.is_empty() {
        return Err(SafeLmError::invalid("gradient of an empty batch"));
    }
    if ds.n_features != learner.n_features {
        return Err(SafeLmError::invalid(format!(
            "feature dimension mismatch: data {} vs model {}",
            ds.n_features, learner.n_features
        )));
    }
    let f = learner.n_features;
    let c = learner.n_classes;
    let scale = 1.0 / idx.len() as f64;
    let mut grad = vec![0.0; learner.weights.len()];
    match learner.kind {
        LearnerKind::Logreg => {
            for &i in idx {
                let x = ds.row(i);
                let mut dz = learner.probabilities(x);
                dz[ds.labels[i]] -= 1.0;
                for k in 0..c {
                    let gk = dz[k] * scale;
                    let row = &mut grad[k * f..(k + 1) * f];
                    for (gj, xj) in row.iter_mut().zip(x) {
                        *gj += gk * xj;
                    }
                    grad[f * c + k] += gk;
                }
            }
        }
        LearnerKind::Mlp { hidden } => {
            let (w1, rest) = learner.weights.split_at(f * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, _b2) = rest.split_at(hidden * c);
            let off_b1 = f * hidden;
            let off_w2 = off_b1 + hidden;
            let off_b2 = off_w2 + hidden * c;
            for &i in idx {
                let x = ds.row(i);
                let pre: Vec<f64> = (0..hidden)
                    .map(|k| {
                        b1[k]
                            + w1[k * f..(k + 1) * f]
                                .iter()
                                .zip(x)
                                .map(|(wj, xj)| wj * xj)
                                .sum::<f64>()
                    })
                    .collect();
                let h: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
                let logits: Vec<f64> = (0..c)
                    .map(|k| {
                        learner.weights[off_b2 + k]
                            + w2[k * hidden..(k + 1) * hidden]
                                .iter()
                                .zip(&h)
                                .map(|(wj, hj)| wj * hj)
                                .sum::<f64>()
                    })
                    .collect();
                let mut dz = softmax(&logits);
                dz[ds.labels[i]] -= 1.0;
                // Output layer.
                for k in 0..c {
                    let gk = dz[k] * scale;
                    for (j, hj) in h.iter().enumerate() {
                        grad[off_w2 + k * hidden + j] += gk * hj;
                    }
                    grad[off_b2 + k] += gk;
                }
                // Hidden layer through tanh'.
                for j in 0..hidden {
                    let upstream: f64 = (0..c).map(|k| dz[k] * w2[k * hidden + j]).sum();
                    let dh = upstream * (1.0 - h[j] * h[j]) * scale;
                    for (gj, xj) in grad[j * f..(j + 1) * f].iter_mut().zip(x) {
                        *gj += dh * xj;
                    }
                    grad[off_b1 + j] += dh;
                }
            }
        }
    }
    Ok(grad)
}

pub fn grad(learner: &Learner, ds: &Dataset) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    grad_on(learner, ds, &idx)
}

/// Mini-batch SGD for `epochs` passes, shuffled per epoch by `seed`.
/// When `prox_mu > 0` the objective gains `prox_mu/2 * ||W - anchor||^2`.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    learner: &Learner,
    shard: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    prox_mu: f64,
    anchor: &[f64],
    seed: u64,
) -> Result<Vec<f64>> {
    train_inner(learner, shard, epochs, batch, lr, prox_mu, anchor, None, seed)
}

/// PGD attack configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvConfig {
    /// L-infinity budget.
    pub epsilon: f64,
    /// Inner ascent iterations.
    pub steps: usize,
    /// Mixing weight of the adversarial loss.
    pub lambda_adv: f64,
    /// Inner step size; `None` selects `2.5 * epsilon / steps`.
    pub step_size: Option<f64>,
}

impl Default for AdvConfig {
    fn default() -> Self {
        AdvConfig {
            epsilon: 0.01,
            steps: 7,
            lambda_adv: 0.3,
            step_size: None,
        }
    }
}

impl AdvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(SafeLmError::invalid("adv epsilon must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.lambda_adv) {
            return Err(SafeLmError::invalid("lambda_adv must be in [0,1]"));
        }
        Ok(())
    }

    pub fn effective_step(&self) -> f64 {
        self.step_size
            .unwrap_or_else(|| 2.5 * self.epsilon / (self.steps.max(1) as f64))
    }
}

/// `local_train` with the per-batch loss mixed as
/// `(1 - lambda) * clean + lambda * adversarial`; adversarial examples are
/// regenerated for every batch.
#[allow(clippy::too_many_arguments)]
pub fn adv_local_train(
    learner: &Learner,
    shard: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    prox_mu: f64,
    anchor: &[f64],
    adv: &AdvConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    adv.validate()?;
    train_inner(learner, shard, epochs, batch, lr, prox_mu, anchor, Some(adv), seed)
}

#[allow(clippy::too_many_arguments)]
fn train_inner(
    learner: &Learner,
    shard: &Dataset,
    epochs: usize,
    batch: usize,
    lr: f64,
    prox_mu: f64,
    anchor: &[f64],
    adv: Option<&AdvConfig>,
    seed: u64,
) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(SafeLmError::invalid("local_train on an empty shard"));
    }
    if prox_mu < 0.0 {
        return Err(SafeLmError::invalid("prox_mu must be >= 0"));
    }
    let batch = batch.max(1);
    let mut model = learner.clone();
    let mut rng = seeds::rng(seed, &[seeds::purpose::LOCAL_TRAIN]);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut g = match adv {
                None => grad_on(&model, shard, chunk)?,
                Some(cfg) => {
                    let clean = grad_on(&model, shard, chunk)?;
                    if cfg.lambda_adv == 0.0 {
                        clean
                    } else {
                        let adv_shard = adversarial_batch(&model, shard, chunk, cfg)?;
                        let idx: Vec<usize> = (0..adv_shard.len()).collect();
                        let adv_g = grad_on(&model, &adv_shard, &idx)?;
                        clean
                            .iter()
                            .zip(&adv_g)
                            .map(|(c, a)| (1.0 - cfg.lambda_adv) * c + cfg.lambda_adv * a)
                            .collect()
                    }
                }
            };
            if prox_mu > 0.0 {
                for ((gj, wj), aj) in g.iter_mut().zip(&model.weights).zip(anchor) {
                    *gj += prox_mu * (wj - aj);
                }
            }
            for (w, gj) in model.weights.iter_mut().zip(&g) {
                *w -= lr * gj;
            }
        }
        let loss = model.loss(shard);
        if !loss.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(SafeLmError::Divergence {
                round: epoch,
                detail: format!("non-finite local state (loss {loss})"),
            });
        }
    }
    Ok(model.weights)
}

fn adversarial_batch(
    model: &Learner,
    shard: &Dataset,
    idx: &[usize],
    cfg: &AdvConfig,
) -> Result<Dataset> {
    let mut out = Dataset::new(Vec::new(), Vec::new(), shard.n_features, shard.n_classes);
    for &i in idx {
        let adv = pgd_example(model, shard.row(i), shard.labels[i], cfg)?;
        out.push(&adv, shard.labels[i]);
    }
    Ok(out)
}

/// Iterative L-infinity ascent: `x <- clip(x + step * sign(grad_x L))`,
/// projected onto the epsilon-ball around the input and the `[0,1]` box.
pub fn pgd_example(learner: &Learner, x: &[f64], y: usize, cfg: &AdvConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 || cfg.steps == 0 {
        return Ok(x.to_vec());
    }
    let step = cfg.effective_step();
    let mut adv = x.to_vec();
    for _ in 0..cfg.steps {
        let gx = input_gradient(learner, &adv, y);
        for ((aj, gj), xj) in adv.iter_mut().zip(&gx).zip(x) {
            let moved = *aj + step * gj.signum();
            *aj = moved.clamp(xj - cfg.epsilon, xj + cfg.epsilon).clamp(0.0, 1.0);
        }
    }
    Ok(adv)
}

/// Analytic gradient of the cross-entropy loss with respect to the input.
pub fn input_gradient(learner: &Learner, x: &[f64], y: usize) -> Vec<f64> {
    let f = learner.n_features;
    let c = learner.n_classes;
    match learner.kind {
        LearnerKind::Logreg => {
            let mut dz = learner.probabilities(x);
            dz[y] -= 1.0;
            let w = &learner.weights[..f * c];
            (0..f)
                .map(|j| (0..c).map(|k| dz[k] * w[k * f + j]).sum())
                .collect()
        }
        LearnerKind::Mlp { hidden } => {
            let (w1, rest) = learner.weights.split_at(f * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, _) = rest.split_at(hidden * c);
            let pre: Vec<f64> = (0..hidden)
                .map(|k| {
                    b1[k]
                        + w1[k * f..(k + 1) * f]
                            .iter()
                            .zip(x)
                            .map(|(wj, xj)| wj * xj)
                            .sum::<f64>()
                })
                .collect();
            let h: Vec<f64> = pre.iter().map(|z| z.tanh()).collect();
            let mut dz = learner.probabilities(x);
            dz[y] -= 1.0;
            let dh: Vec<f64> = (0..hidden)
                .map(|j| {
                    let upstream: f64 = (0..c).map(|k| dz[k] * w2[k * hidden + j]).sum();
                    upstream * (1.0 - h[j] * h[j])
                })
                .collect();
            (0..f)
                .map(|j| (0..hidden).map(|k| dh[k] * w1[k * f + j]).sum())
                .collect()
        }
    }
}

/// SMOTE: upsample every minority class to the majority count with
/// `x + u * (x_nn - x)`, `u ~ U(0,1)`, `x_nn` a random same-class
/// neighbor among the `k` nearest.
pub fn smote_balance(shard: &Dataset, k_neighbors: usize, seed: u64) -> Result<Dataset> {
    if k_neighbors == 0 {
        return Err(SafeLmError::invalid("smote requires k_neighbors >= 1"));
    }
    let counts = shard.class_counts();
    let present: Vec<usize> = (0..shard.n_classes).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return Err(SafeLmError::invalid("smote on an empty shard"));
    }
    let majority = *counts.iter().max().unwrap();
    let mut out = shard.clone();
    let mut rng = seeds::rng(seed, &[seeds::purpose::SMOTE]);
    for &class in &present {
        let members: Vec<usize> = (0..shard.len()).filter(|&i| shard.labels[i] == class).collect();
        let deficit = majority - counts[class];
        if deficit == 0 {
            continue;
        }
        if members.len() == 1 {
            log::warn!("smote: class {class} has a single sample; duplicating it");
            for _ in 0..deficit {
                out.push(shard.row(members[0]), class);
            }
            continue;
        }
        // Neighbor lists among same-class points, by squared distance.
        let neighbor_lists: Vec<Vec<usize>> = members
            .iter()
            .map(|&i| {
                let mut others: Vec<(f64, usize)> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| (sq_dist(shard.row(i), shard.row(j)), j))
                    .collect();
                others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                others
                    .into_iter()
                    .take(k_neighbors)
                    .map(|(_, j)| j)
                    .collect()
            })
            .collect();
        for _ in 0..deficit {
            let pick = rng.random_range(0..members.len());
            let base = members[pick];
            let nns = &neighbor_lists[pick];
            let nn = nns[rng.random_range(0..nns.len())];
            let u: f64 = rng.random();
            let synthetic: Vec<f64> = shard
                .row(base)
                .iter()
                .zip(shard.row(nn))
                .map(|(a, b)| a + u * (b - a))
                .collect();
            out.push(&synthetic, class);
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Temperature scaling model; `T = 1` is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub temperature: f64,
}

impl CalibrationModel {
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        softmax(&logits.iter().map(|z| z / self.temperature).collect::<Vec<_>>())
    }

    pub fn confidence(&self, logits: &[f64]) -> f64 {
        let p = self.apply(logits);
        p[argmax(&p)]
    }
}

const TEMP_LO: f64 = 0.05;
const TEMP_HI: f64 = 20.0;
const TEMP_TOL: f64 = 1e-4;

/// Fit `T` minimizing validation NLL of `softmax(z / T)` by grid bracket
/// plus golden-section refinement on `[0.05, 20]`. `T = 1` is always
/// evaluated, so the fitted NLL never exceeds the uncalibrated one.
pub fn fit_temperature(logits: &[Vec<f64>], labels: &[usize]) -> Result<CalibrationModel> {
    if logits.is_empty() || logits.len() != labels.len() {
        return Err(SafeLmError::invalid(
            "fit_temperature needs matching non-empty logits and labels",
        ));
    }
    let degenerate = logits
        .iter()
        .all(|z| z.iter().all(|&v| (v - z[0]).abs() < 1e-12));
    if degenerate {
        log::warn!("fit_temperature: degenerate logits, returning T = 1");
        return Ok(CalibrationModel { temperature: 1.0 });
    }
    let nll = |t: f64| -> f64 {
        let model = CalibrationModel { temperature: t };
        let mut total = 0.0;
        for (z, &y) in logits.iter().zip(labels) {
            let p = model.apply(z);
            total -= p[y].clamp(1e-300, 1.0).ln();
        }
        total / logits.len() as f64
    };

    // Coarse log-spaced grid (with T = 1 pinned) to bracket the minimum.
    let mut grid: Vec<f64> = (0..=60)
        .map(|i| TEMP_LO * (TEMP_HI / TEMP_LO).powf(i as f64 / 60.0))
        .collect();
    grid.push(1.0);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best_i = 0;
    let mut best_v = f64::INFINITY;
    for (i, &t) in grid.iter().enumerate() {
        let v = nll(t);
        if v < best_v {
            best_v = v;
            best_i = i;
        }
    }
    let mut lo = grid[best_i.saturating_sub(1)];
    let mut hi = grid[(best_i + 1).min(grid.len() - 1)];

    // Golden-section refinement.
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let mut fa = nll(a);
    let mut fb = nll(b);
    while hi - lo > TEMP_TOL {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = nll(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = nll(b);
        }
    }
    let mid = (lo + hi) / 2.0;
    // Keep whichever of {grid best, refined} evaluates lower; the grid
    // contains 1.0, which bounds the fitted NLL by NLL(1).
    let temperature = if nll(mid) <= best_v { mid } else { grid[best_i] };
    Ok(CalibrationModel { temperature })
}

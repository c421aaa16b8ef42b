//! Gradient binarization and baseline quantizers.
//!
//! The central operator maps a parameter delta to `{-1, +1}^d` against a
//! median threshold. Three threshold variants exist: the absolute-value
//! median (default), the signed median, and zero (plain signSGD). QSGD
//! and TernGrad are included as unbiased stochastic baselines, and
//! `cosine_alignment` instruments how well a quantized vector tracks the
//! original.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SafeLmError};
use crate::seeds;

/// Threshold choice for `smartify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdVariant {
    /// `theta = median(|delta|)`; the default.
    AbsMedian,
    /// `tau = median(delta)`.
    SignedMedian,
    /// Plain sign function (signSGD baseline).
    Zero,
}

/// A binarized update: per-coordinate signs plus the threshold used.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarizedUpdate {
    pub signs: Vec<i8>,
    pub threshold: f64,
    pub variant: ThresholdVariant,
}

impl BinarizedUpdate {
    pub fn len(&self) -> usize {
        self.signs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signs.is_empty()
    }

    /// Signs as `±1.0` floats.
    pub fn as_f64(&self) -> Vec<f64> {
        self.signs.iter().map(|&s| f64::from(s)).collect()
    }
}

/// Median with the even-length convention: midpoint of the two middle
/// order statistics.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(SafeLmError::invalid("median of an empty vector"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in median"));
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[n / 2])
    } else {
        Ok((sorted[n / 2 - 1] + sorted[n / 2]) / 2.0)
    }
}

/// Binarize `delta`: coordinate j maps to `+1` iff it is `>=` the
/// variant's threshold, else `-1`. Ties at the threshold map to `+1`.
pub fn smartify(delta: &[f64], variant: ThresholdVariant) -> Result<BinarizedUpdate> {
    if delta.is_empty() {
        return Err(SafeLmError::invalid("smartify of an empty vector"));
    }
    if delta.iter().any(|x| !x.is_finite()) {
        return Err(SafeLmError::invalid("smartify of a non-finite vector"));
    }
    let threshold = match variant {
        ThresholdVariant::AbsMedian => {
            let mags: Vec<f64> = delta.iter().map(|x| x.abs()).collect();
            median(&mags)?
        }
        ThresholdVariant::SignedMedian => median(delta)?,
        ThresholdVariant::Zero => 0.0,
    };
    let signs = delta
        .iter()
        .map(|&x| if x >= threshold { 1i8 } else { -1i8 })
        .collect();
    Ok(BinarizedUpdate {
        signs,
        threshold,
        variant,
    })
}

/// QSGD-style stochastic level quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QsgdVector {
    /// Signed level index per coordinate, in `[-levels, levels]`.
    pub levels: Vec<i32>,
    /// The l2 norm of the input; zero for the zero vector.
    pub scale: f64,
    /// Number of positive levels.
    pub level_count: u32,
}

impl QsgdVector {
    pub fn dequantize(&self) -> Vec<f64> {
        let s = f64::from(self.level_count);
        self.levels
            .iter()
            .map(|&l| f64::from(l) / s * self.scale)
            .collect()
    }
}

/// Quantize each coordinate to an adjacent grid level of `|g_j|/||g||`
/// with probabilities that make the estimate unbiased.
pub fn qsgd_quantize(g: &[f64], levels: u32, seed: u64) -> Result<QsgdVector> {
    if levels == 0 {
        return Err(SafeLmError::invalid("qsgd requires levels >= 1"));
    }
    if g.is_empty() {
        return Err(SafeLmError::invalid("qsgd of an empty vector"));
    }
    let norm = l2_norm(g);
    if norm == 0.0 {
        return Ok(QsgdVector {
            levels: vec![0; g.len()],
            scale: 0.0,
            level_count: levels,
        });
    }
    let mut rng = seeds::rng(seed, &[]);
    let s = f64::from(levels);
    let out = g
        .iter()
        .map(|&x| {
            let u = x.abs() / norm * s;
            let lower = u.floor();
            let p_up = u - lower;
            let level = if rng.random::<f64>() < p_up {
                lower + 1.0
            } else {
                lower
            };
            (level as i32) * if x < 0.0 { -1 } else { 1 }
        })
        .collect();
    Ok(QsgdVector {
        levels: out,
        scale: norm,
        level_count: levels,
    })
}

/// TernGrad ternary quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryVector {
    pub signs: Vec<i8>,
    /// `max |g_j|`; zero for the zero vector.
    pub scale: f64,
}

impl TernaryVector {
    pub fn dequantize(&self) -> Vec<f64> {
        self.signs.iter().map(|&t| f64::from(t) * self.scale).collect()
    }
}

/// Each coordinate becomes `sign(g_j)` with probability `|g_j| / max|g|`,
/// else 0; unbiased after rescaling by the max magnitude.
pub fn terngrad_quantize(g: &[f64], seed: u64) -> Result<TernaryVector> {
    if g.is_empty() {
        return Err(SafeLmError::invalid("terngrad of an empty vector"));
    }
    let scale = g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Ok(TernaryVector {
            signs: vec![0; g.len()],
            scale: 0.0,
        });
    }
    let mut rng = seeds::rng(seed, &[]);
    let signs = g
        .iter()
        .map(|&x| {
            let p = x.abs() / scale;
            if rng.random::<f64>() < p {
                if x < 0.0 {
                    -1i8
                } else {
                    1i8
                }
            } else {
                0i8
            }
        })
        .collect();
    Ok(TernaryVector { signs, scale })
}

/// Alignment between a gradient and its quantized surrogate, plus slots
/// for a per-step descent-inequality check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Cosine similarity; absent when either norm vanishes.
    pub gamma: Option<f64>,
    pub grad_norm: f64,
    pub quantized_norm: f64,
    /// Loss after the step, once recorded.
    pub descent_lhs: Option<f64>,
    /// Descent bound `f(W) - eta*gamma*||g||^2 + L*eta^2/2*||g~||^2`.
    pub descent_rhs: Option<f64>,
    pub smoothness_estimate: Option<f64>,
}

/// Cosine alignment `gamma = <g, g~> / (||g|| ||g~||)`.
pub fn cosine_alignment(g: &[f64], g_tilde: &[f64]) -> Result<AlignmentReport> {
    if g.len() != g_tilde.len() {
        return Err(SafeLmError::invalid(format!(
            "alignment length mismatch: {} vs {}",
            g.len(),
            g_tilde.len()
        )));
    }
    let grad_norm = l2_norm(g);
    let quantized_norm = l2_norm(g_tilde);
    let gamma = if grad_norm > 0.0 && quantized_norm > 0.0 {
        let dot: f64 = g.iter().zip(g_tilde).map(|(a, b)| a * b).sum();
        Some(dot / (grad_norm * quantized_norm))
    } else {
        None
    };
    Ok(AlignmentReport {
        gamma,
        grad_norm,
        quantized_norm,
        descent_lhs: None,
        descent_rhs: None,
        smoothness_estimate: None,
    })
}

impl AlignmentReport {
    /// Record both sides of the descent inequality for a step of size
    /// `eta` under smoothness constant `smoothness`: the loss after the
    /// step on the left, the bound built from this report on the right.
    pub fn record_descent(
        &mut self,
        loss_before: f64,
        loss_after: f64,
        eta: f64,
        smoothness: f64,
    ) {
        let gamma = self.gamma.unwrap_or(0.0);
        self.descent_lhs = Some(loss_after);
        self.descent_rhs = Some(
            loss_before - eta * gamma * self.grad_norm.powi(2)
                + smoothness * eta * eta / 2.0 * self.quantized_norm.powi(2),
        );
        self.smoothness_estimate = Some(smoothness);
    }
}

/// Payload accounting schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadScheme {
    /// 32-bit float per coordinate.
    Full32,
    /// One bit per coordinate (logical payload of a sign vector).
    Binarized,
    /// Paillier ciphertext per coordinate: `2 * key_bits` wire bits each.
    Ciphertext { key_bits: u64 },
}

/// Uplink bits for a `d`-coordinate update under `scheme`.
pub fn payload_bits(d: u64, scheme: PayloadScheme) -> u64 {
    match scheme {
        PayloadScheme::Full32 => 32 * d,
        PayloadScheme::Binarized => d,
        PayloadScheme::Ciphertext { key_bits } => 2 * key_bits * d,
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SPEC_DELTA: [f64; 4] = [0.5, -0.2, 0.1, -0.9];

    #[test]
    fn abs_median_hand_case() {
        // |delta| sorted: 0.1 0.2 0.5 0.9 -> theta = 0.35
        let b = smartify(&SPEC_DELTA, ThresholdVariant::AbsMedian).unwrap();
        assert!((b.threshold - 0.35).abs() < 1e-12);
        assert_eq!(b.signs, vec![1, -1, -1, -1]);
    }

    #[test]
    fn signed_median_hand_case() {
        // sorted: -0.9 -0.2 0.1 0.5 -> tau = -0.05
        let b = smartify(&SPEC_DELTA, ThresholdVariant::SignedMedian).unwrap();
        assert!((b.threshold - (-0.05)).abs() < 1e-12);
        assert_eq!(b.signs, vec![1, -1, 1, -1]);
    }

    #[test]
    fn zero_threshold_hand_case() {
        let b = smartify(&SPEC_DELTA, ThresholdVariant::Zero).unwrap();
        assert_eq!(b.threshold, 0.0);
        assert_eq!(b.signs, vec![1, -1, 1, -1]);
    }

    #[test]
    fn smartify_rejects_bad_input() {
        assert!(smartify(&[], ThresholdVariant::AbsMedian).is_err());
        assert!(smartify(&[1.0, f64::NAN], ThresholdVariant::Zero).is_err());
    }

    #[test]
    fn tie_at_threshold_maps_positive() {
        // Odd length, theta = 2.0 exactly; the coordinate equal to theta
        // gets +1.
        let b = smartify(&[2.0, -1.0, 3.0], ThresholdVariant::AbsMedian).unwrap();
        assert_eq!(b.threshold, 2.0);
        assert_eq!(b.signs, vec![1, -1, 1]);
    }

    #[test]
    fn zero_vector_binarizes_all_positive() {
        let b = smartify(&[0.0; 5], ThresholdVariant::AbsMedian).unwrap();
        assert_eq!(b.signs, vec![1; 5]);
        assert_eq!(b.threshold, 0.0);
    }

    #[test]
    fn qsgd_exact_on_grid() {
        // |g|/||g|| already sits on the level grid, so no stochastic
        // rounding happens and the vector reproduces exactly.
        let g = [0.0, 3.0, 0.0];
        let q = qsgd_quantize(&g, 2, 9).unwrap();
        assert_eq!(q.dequantize(), g.to_vec());
        let one_hot = [0.0, -2.5, 0.0];
        let q = qsgd_quantize(&one_hot, 4, 10).unwrap();
        assert_eq!(q.dequantize(), one_hot.to_vec());
        // 3-4-5 triangle scaled: u = (0.6, 0.8) on the s = 5 grid.
        let g = [3.0, -4.0];
        let q = qsgd_quantize(&g, 5, 11).unwrap();
        assert_eq!(q.levels, vec![3, -4]);
        assert_eq!(q.dequantize(), g.to_vec());
    }

    #[test]
    fn qsgd_zero_vector() {
        let q = qsgd_quantize(&[0.0, 0.0], 4, 0).unwrap();
        assert_eq!(q.levels, vec![0, 0]);
        assert_eq!(q.scale, 0.0);
    }

    #[test]
    fn qsgd_single_level_is_sign_times_norm_on_one_hot() {
        let g = [0.0, 0.0, -7.0];
        let q = qsgd_quantize(&g, 1, 3).unwrap();
        assert_eq!(q.dequantize(), vec![0.0, 0.0, -7.0]);
    }

    #[test]
    fn qsgd_unbiased_monte_carlo() {
        let g = [0.8, -0.3, 0.05, 0.4, -0.9];
        let trials = 10_000u64;
        let mut mean = vec![0.0; g.len()];
        for t in 0..trials {
            let q = qsgd_quantize(&g, 2, t).unwrap();
            for (m, v) in mean.iter_mut().zip(q.dequantize()) {
                *m += v / trials as f64;
            }
        }
        // Per-coordinate variance of one draw is bounded by (||g||/s)^2/4;
        // allow three standard errors.
        let norm = l2_norm(&g);
        let se = norm / 2.0 / 2.0 / (trials as f64).sqrt();
        for (j, (&gj, &mj)) in g.iter().zip(&mean).enumerate() {
            assert!(
                (gj - mj).abs() < 3.0 * se + 1e-9,
                "coord {j}: {gj} vs {mj} (se {se})"
            );
        }
    }

    #[test]
    fn terngrad_extremes() {
        let g = [0.5, -1.0, 0.0];
        for seed in 0..50 {
            let t = terngrad_quantize(&g, seed).unwrap();
            assert_eq!(t.signs[1], -1, "max-magnitude coordinate always fires");
            assert_eq!(t.signs[2], 0, "zero coordinate never fires");
        }
        let z = terngrad_quantize(&[0.0, 0.0], 1).unwrap();
        assert_eq!(z.signs, vec![0, 0]);
    }

    #[test]
    fn terngrad_unbiased_monte_carlo() {
        let g = [0.8, -0.3, 0.05, 0.4, -0.9];
        let trials = 10_000u64;
        let mut mean = vec![0.0; g.len()];
        for t in 0..trials {
            let q = terngrad_quantize(&g, 7_000 + t).unwrap();
            for (m, v) in mean.iter_mut().zip(q.dequantize()) {
                *m += v / trials as f64;
            }
        }
        let scale = 0.9;
        let se = scale / 2.0 / (trials as f64).sqrt();
        for (j, (&gj, &mj)) in g.iter().zip(&mean).enumerate() {
            assert!(
                (gj - mj).abs() < 3.0 * se + 1e-9,
                "coord {j}: {gj} vs {mj}"
            );
        }
    }

    #[test]
    fn cosine_scale_invariance_and_orthogonality() {
        let g = [1.0, 2.0, -3.0];
        let scaled: Vec<f64> = g.iter().map(|x| 3.0 * x).collect();
        let r = cosine_alignment(&g, &scaled).unwrap();
        assert!((r.gamma.unwrap() - 1.0).abs() < 1e-12);

        let r = cosine_alignment(&[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!(r.gamma.unwrap().abs() < 1e-12);

        assert!(cosine_alignment(&[1.0], &[1.0, 2.0]).is_err());
        let undefined = cosine_alignment(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(undefined.gamma, None);
    }

    #[test]
    fn abs_median_gamma_positive_on_heavy_tails() {
        use rand_distr::{Distribution, StudentT};
        let t3 = StudentT::new(3.0).unwrap();
        for draw in 0..100u64 {
            let mut rng = seeds::rng(0x5eed, &[draw]);
            let g: Vec<f64> = (0..10_000).map(|_| t3.sample(&mut rng)).collect();
            let b = smartify(&g, ThresholdVariant::AbsMedian).unwrap();
            let gamma = cosine_alignment(&g, &b.as_f64()).unwrap().gamma.unwrap();
            assert!(gamma > 0.0, "draw {draw}: gamma {gamma}");
        }
    }

    #[test]
    fn payload_accounting() {
        assert_eq!(payload_bits(35, PayloadScheme::Full32), 1120);
        assert_eq!(payload_bits(35, PayloadScheme::Binarized), 35);
        assert_eq!(payload_bits(1, PayloadScheme::Binarized), 1);
        assert_eq!(
            payload_bits(35, PayloadScheme::Ciphertext { key_bits: 2048 }),
            143_360
        );
        // The 32x logical ratio is exact for every d.
        for d in [1u64, 7, 35, 147, 10_000] {
            assert_eq!(
                payload_bits(d, PayloadScheme::Full32),
                32 * payload_bits(d, PayloadScheme::Binarized)
            );
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn prop_smartify_signs_and_threshold(
            delta in prop::collection::vec(-1e3f64..1e3, 1..60),
            variant_idx in 0usize..3,
        ) {
            let variant = [
                ThresholdVariant::AbsMedian,
                ThresholdVariant::SignedMedian,
                ThresholdVariant::Zero,
            ][variant_idx];
            let b = smartify(&delta, variant).unwrap();
            prop_assert_eq!(b.signs.len(), delta.len());
            prop_assert!(b.signs.iter().all(|&s| s == 1 || s == -1));
            // The threshold is reproducible from the input.
            let expect = match variant {
                ThresholdVariant::AbsMedian => {
                    let mags: Vec<f64> = delta.iter().map(|x| x.abs()).collect();
                    median(&mags).unwrap()
                }
                ThresholdVariant::SignedMedian => median(&delta).unwrap(),
                ThresholdVariant::Zero => 0.0,
            };
            prop_assert_eq!(b.threshold, expect);
        }

        #[test]
        fn prop_positive_abs_threshold_sends_negatives_down(
            delta in prop::collection::vec(-1e3f64..1e3, 2..60),
        ) {
            let b = smartify(&delta, ThresholdVariant::AbsMedian).unwrap();
            if b.threshold > 0.0 {
                for (x, s) in delta.iter().zip(&b.signs) {
                    if *x < 0.0 {
                        prop_assert_eq!(*s, -1);
                    }
                }
            }
        }
    }
}

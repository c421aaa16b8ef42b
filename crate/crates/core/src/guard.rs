//! Faithfulness guard: evidence-score aggregation and the threshold
//! decision. Entailment scores are pluggable inputs here; no model of any
//! kind is involved.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::error::{Result, SafeLmError};

/// A claim's evidence scores plus the calibrated model confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimEvidence {
    /// Entailment probabilities against each evidence item, in `[0,1]`.
    pub nli_scores: Vec<f64>,
    /// Calibrated confidence of the claim, in `[0,1]`.
    pub confidence: f64,
    /// Decision threshold.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardDecision {
    Pass,
    AbstainOrRegenerate,
}

/// `mean(nli_scores) * confidence`, exactly.
pub fn faith_score(ce: &ClaimEvidence) -> Result<f64> {
    if ce.nli_scores.is_empty() {
        return Err(SafeLmError::invalid("faith_score needs at least one evidence score"));
    }
    if ce.nli_scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
        return Err(SafeLmError::invalid("nli scores must lie in [0,1]"));
    }
    if !(0.0..=1.0).contains(&ce.confidence) {
        return Err(SafeLmError::invalid("confidence must lie in [0,1]"));
    }
    let mean = ce.nli_scores.iter().sum::<f64>() / ce.nli_scores.len() as f64;
    Ok(mean * ce.confidence)
}

/// Pass iff `score >= tau`; the boundary passes.
pub fn guard_decision(score: f64, tau: f64) -> GuardDecision {
    if score >= tau {
        GuardDecision::Pass
    } else {
        GuardDecision::AbstainOrRegenerate
    }
}

/// Batch interface. Input CSV rows: `nli_scores,confidence` with the
/// scores as a semicolon-separated list. Output rows: `score,decision`.
pub fn score_csv<R: BufRead, W: Write>(reader: R, tau: f64, mut out: W) -> Result<usize> {
    let mut rows = 0usize;
    writeln!(out, "score,decision")?;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (lineno == 0 && trimmed.starts_with("nli_scores")) {
            continue;
        }
        let (scores_part, conf_part) = trimmed.rsplit_once(',').ok_or_else(|| {
            SafeLmError::invalid(format!("line {}: expected `scores,confidence`", lineno + 1))
        })?;
        let nli_scores: Vec<f64> = scores_part
            .split(';')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| SafeLmError::invalid(format!("line {}: {e}", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        let confidence = conf_part
            .trim()
            .parse::<f64>()
            .map_err(|e| SafeLmError::invalid(format!("line {}: {e}", lineno + 1)))?;
        let ce = ClaimEvidence {
            nli_scores,
            confidence,
            threshold: tau,
        };
        let score = faith_score(&ce)?;
        let decision = match guard_decision(score, tau) {
            GuardDecision::Pass => "pass",
            GuardDecision::AbstainOrRegenerate => "abstain_or_regenerate",
        };
        writeln!(out, "{score},{decision}")?;
        rows += 1;
    }
    Ok(rows)
}

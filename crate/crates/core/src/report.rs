//! Round reports and artifact emission.
//!
//! The per-round CSV has a fixed, versioned header; everything else
//! (per-class F1, configuration echo, threat outcomes, round markers)
//! goes into a JSON summary. All output is byte-deterministic for a
//! fixed config and seed.

use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::error::Result;

/// Fixed CSV header for round reports (`acc` is test accuracy).
pub const ROUND_CSV_HEADER: &str =
    "round,acc,macro_f1,logical_bits_cum,wire_bits_cum,gamma_mean,asr,notes";

/// One federated round's metrics. `round` is 1-indexed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub logical_bits_cum: u64,
    pub wire_bits_cum: u64,
    pub gamma_mean: Option<f64>,
    pub gamma_std: Option<f64>,
    /// Coordinates where the Byzantine filter tied (decoded to 0).
    pub filter_ties: usize,
    pub asr: Option<f64>,
    pub notes: String,
}

impl RoundReport {
    fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{},{},{}",
            self.round,
            self.test_acc,
            self.macro_f1,
            self.logical_bits_cum,
            self.wire_bits_cum,
            self.gamma_mean.map(|g| format!("{g:.6}")).unwrap_or_default(),
            self.asr.map(|a| format!("{a:.6}")).unwrap_or_default(),
            self.notes,
        )
    }
}

/// Write the fixed-header round CSV.
pub fn write_rounds_csv<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    writeln!(w, "{ROUND_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// First 1-indexed round whose test accuracy reaches `target`, if any.
pub fn rounds_to_accuracy(reports: &[RoundReport], target: f64) -> Option<usize> {
    reports.iter().find(|r| r.test_acc >= target).map(|r| r.round)
}

/// Accuracy-target markers included in run summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMarkers {
    pub r95: Option<usize>,
    pub r98: Option<usize>,
    /// First round reaching 95% of the final accuracy.
    pub r95_of_final: Option<usize>,
}

pub fn round_markers(reports: &[RoundReport]) -> RoundMarkers {
    let final_acc = reports.last().map(|r| r.test_acc).unwrap_or(0.0);
    RoundMarkers {
        r95: rounds_to_accuracy(reports, 0.95),
        r98: rounds_to_accuracy(reports, 0.98),
        r95_of_final: rounds_to_accuracy(reports, 0.95 * final_acc),
    }
}

/// Mean and sample standard deviation of the defined entries.
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

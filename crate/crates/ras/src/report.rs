//! Evaluation outputs: the JSON summary and the PR curve CSV.

use ras_core::metrics::EvalReport;
use serde::{Deserialize, Serialize};

/// The fields of an [`EvalReport`] that are written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub max_f_measure: f64,
    pub argmax_threshold: usize,
    pub mae: f64,
    pub num_images: usize,
    pub beta2: f64,
}

impl From<&EvalReport> for ReportSummary {
    fn from(r: &EvalReport) -> Self {
        ReportSummary {
            max_f_measure: r.max_f_measure,
            argmax_threshold: r.argmax_threshold,
            mae: r.mae,
            num_images: r.num_images,
            beta2: r.beta2,
        }
    }
}

pub fn report_json(r: &EvalReport) -> String {
    serde_json::to_string_pretty(&ReportSummary::from(r)).expect("report serializes") + "\n"
}

/// `threshold,precision,recall`, one row per threshold.
pub fn pr_csv(r: &EvalReport) -> String {
    let mut out = String::from("threshold,precision,recall\n");
    for (t, (p, rec)) in r.curve.points.iter().enumerate() {
        out.push_str(&format!("{t},{p},{rec}\n"));
    }
    out
}

/// Relative max-F improvement of attention over no attention reported for
/// the full-scale networks; printed next to ablation results for reference.
pub const REFERENCE_ATTENTION_GAIN: f64 = 0.014;

/// Side-by-side results of the attention ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub with_attention: ReportSummary,
    pub without_attention: ReportSummary,
    /// `(F_with - F_without) / F_without`.
    pub relative_max_f_gain: f64,
    pub reference_gain: f64,
}

impl AblationReport {
    pub fn new(with: &EvalReport, without: &EvalReport) -> Self {
        AblationReport {
            with_attention: with.into(),
            without_attention: without.into(),
            relative_max_f_gain: (with.max_f_measure - without.max_f_measure) / without.max_f_measure,
            reference_gain: REFERENCE_ATTENTION_GAIN,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// A small fixed-width table for terminals.
    pub fn table(&self) -> String {
        let row = |name: &str, s: &ReportSummary| format!("{name:<20}{:>10.4}{:>10.4}\n", s.max_f_measure, s.mae);
        format!(
            "{:<20}{:>10}{:>10}\n{}{}max-F gain {:+.2}% (reference {:+.1}%, informative)\n",
            "variant",
            "max F",
            "MAE",
            row("with attention", &self.with_attention),
            row("without attention", &self.without_attention),
            100.0 * self.relative_max_f_gain,
            100.0 * self.reference_gain,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ras_core::metrics::{evaluate, CurveMode, GroundTruthMask, SaliencyMap, THRESHOLDS};

    fn report() -> EvalReport {
        let s = SaliencyMap::new(2, 1, vec![0.9, 0.2]).unwrap();
        let g = GroundTruthMask::new(2, 1, vec![1, 0]).unwrap();
        evaluate(&[(s, g)], 0.3, CurveMode::Aggregate).unwrap()
    }

    #[test]
    fn json_has_exactly_the_report_keys() {
        let v: serde_json::Value = serde_json::from_str(&report_json(&report())).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["argmax_threshold", "beta2", "mae", "max_f_measure", "num_images"]);
    }

    #[test]
    fn csv_has_one_row_per_threshold() {
        let csv = pr_csv(&report());
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "threshold,precision,recall");
        assert_eq!(lines.len(), THRESHOLDS + 1);
        assert!(lines[256].starts_with("255,"));
    }
}

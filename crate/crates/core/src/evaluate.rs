//! Accuracy-at-range evaluation and run comparison.
//!
//! A prediction counts as correct at range `r` when the great-circle
//! distance between estimate and ground truth is strictly lower than `r`.

use crate::geo::{gcd_km, GeoPoint};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("no predictions to evaluate")]
    EmptyInput,
    #[error("thresholds must be strictly increasing and positive")]
    BadRanges,
    #[error("runs cover different query sets")]
    QueryMismatch,
}

/// Ascending positive distance thresholds in kilometres.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSet {
    thresholds_km: Vec<f64>,
}

impl RangeSet {
    pub fn new(thresholds_km: Vec<f64>) -> Result<Self, EvaluateError> {
        if thresholds_km.is_empty()
            || thresholds_km[0] <= 0.0
            || thresholds_km.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(EvaluateError::BadRanges);
        }
        Ok(Self { thresholds_km })
    }

    /// Street to continent: 1, 25, 200, 750, 2500 km.
    pub fn baseline() -> Self {
        Self::new(vec![1.0, 25.0, 200.0, 750.0, 2500.0]).unwrap()
    }

    /// Fine-grained: 100 m, 1, 5, 10 km.
    pub fn fine_grained() -> Self {
        Self::new(vec![0.1, 1.0, 5.0, 10.0]).unwrap()
    }

    pub fn thresholds_km(&self) -> &[f64] {
        &self.thresholds_km
    }
}

/// An identified (estimate, truth) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPair {
    pub id: u64,
    pub estimate: GeoPoint,
    pub truth: GeoPoint,
}

/// Per-range accuracy report.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct AccuracyReport {
    pub ranges_km: Vec<f64>,
    /// Fraction of queries with `gcd < range`, one per range.
    pub accuracy: Vec<f64>,
    pub queries: usize,
}

/// Fraction of pairs whose geodesic error is strictly below each threshold.
/// Monotone non-decreasing across ascending ranges by construction.
pub fn accuracy_at(pairs: &[EvalPair], ranges: &RangeSet) -> Result<AccuracyReport, EvaluateError> {
    if pairs.is_empty() {
        return Err(EvaluateError::EmptyInput);
    }
    let distances: Vec<f64> = pairs
        .iter()
        .map(|p| gcd_km(p.estimate, p.truth))
        .collect();
    let accuracy = ranges
        .thresholds_km()
        .iter()
        .map(|&r| distances.iter().filter(|&&d| d < r).count() as f64 / pairs.len() as f64)
        .collect();
    Ok(AccuracyReport {
        ranges_km: ranges.thresholds_km().to_vec(),
        accuracy,
        queries: pairs.len(),
    })
}

/// Side-by-side comparison of two runs over the same query set.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Comparison {
    pub ranges_km: Vec<f64>,
    pub accuracy_a: Vec<f64>,
    pub accuracy_b: Vec<f64>,
    /// `accuracy_a - accuracy_b` per range.
    pub delta: Vec<f64>,
    /// Counts of ranges where the delta is positive / zero / negative.
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

/// Compares two runs range by range. The runs must cover the same query ids
/// (order-independent).
pub fn compare_runs(
    run_a: &[EvalPair],
    run_b: &[EvalPair],
    ranges: &RangeSet,
) -> Result<Comparison, EvaluateError> {
    let mut ids_a: Vec<u64> = run_a.iter().map(|p| p.id).collect();
    let mut ids_b: Vec<u64> = run_b.iter().map(|p| p.id).collect();
    ids_a.sort_unstable();
    ids_b.sort_unstable();
    if ids_a != ids_b {
        return Err(EvaluateError::QueryMismatch);
    }
    let a = accuracy_at(run_a, ranges)?;
    let b = accuracy_at(run_b, ranges)?;
    let delta: Vec<f64> = a
        .accuracy
        .iter()
        .zip(b.accuracy.iter())
        .map(|(x, y)| x - y)
        .collect();
    let wins = delta.iter().filter(|&&d| d > 0.0).count();
    let ties = delta.iter().filter(|&&d| d == 0.0).count();
    let losses = delta.iter().filter(|&&d| d < 0.0).count();
    Ok(Comparison {
        ranges_km: ranges.thresholds_km().to_vec(),
        accuracy_a: a.accuracy,
        accuracy_b: b.accuracy,
        delta,
        wins,
        ties,
        losses,
    })
}

/// Renders a report as a plain-text table, percentages to one decimal,
/// columns in ascending range order.
pub fn format_table(label: &str, report: &AccuracyReport) -> String {
    let mut header = format!("{:<14}", "range_km");
    let mut row = format!("{label:<14}");
    for (r, a) in report.ranges_km.iter().zip(report.accuracy.iter()) {
        header.push_str(&format!("{r:>9}"));
        row.push_str(&format!("{:>9.1}", a * 100.0));
    }
    format!("{header}\n{row}\n")
}

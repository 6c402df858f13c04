// SPDX-License-Identifier: MIT OR Apache-2.0

//! Range-based precision, recall and F1 with a threshold sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YmirError};
use crate::series::LabelSeries;

/// Disjoint, ordered, inclusive index ranges within `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RangeSet {
    pub len: usize,
    pub ranges: Vec<(usize, usize)>,
}

impl RangeSet {
    pub fn new(len: usize, ranges: Vec<(usize, usize)>) -> Result<Self> {
        for (i, &(a, b)) in ranges.iter().enumerate() {
            if a > b || b >= len {
                return Err(YmirError::Shape(format!("range ({a}, {b}) outside [0, {len})")));
            }
            if i > 0 && a <= ranges[i - 1].1 {
                return Err(YmirError::Shape("ranges must be disjoint and ordered".into()));
            }
        }
        Ok(Self { len, ranges })
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Points of `[a, b]` covered by this set.
    fn covered(&self, a: usize, b: usize) -> usize {
        let first = self.ranges.partition_point(|r| r.1 < a);
        self.ranges[first..]
            .iter()
            .take_while(|r| r.0 <= b)
            .map(|r| r.1.min(b) - r.0.max(a) + 1)
            .sum()
    }
}

/// Maximal runs of ones.
pub fn extract_ranges(binary: &[u8]) -> RangeSet {
    let mut ranges = Vec::new();
    let mut start = None;
    for (t, &v) in binary.iter().enumerate() {
        match (v != 0, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                ranges.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        ranges.push((s, binary.len() - 1));
    }
    RangeSet { len: binary.len(), ranges }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalBias {
    #[default]
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricParams {
    /// Reward for detecting a real range at all (recall only).
    pub alpha_existence: f64,
    pub positional_bias: PositionalBias,
    pub cardinality_gamma: f64,
}

impl Default for MetricParams {
    fn default() -> Self {
        Self { alpha_existence: 0.0, positional_bias: PositionalBias::Flat, cardinality_gamma: 1.0 }
    }
}

fn check_pair(a: &RangeSet, b: &RangeSet) -> Result<()> {
    if a.len != b.len {
        return Err(YmirError::Shape(format!("range sets over {} and {} points", a.len, b.len)));
    }
    for set in [a, b] {
        if set.ranges.iter().any(|r| r.1 >= set.len || r.0 > r.1) {
            return Err(YmirError::Shape("range outside its series".into()));
        }
    }
    Ok(())
}

/// Mean reward over `targets`; empty `targets` score 1.
fn range_score(targets: &RangeSet, other: &RangeSet, alpha: f64) -> f64 {
    if targets.is_empty() {
        return 1.0;
    }
    let total: f64 = targets
        .ranges
        .iter()
        .map(|&(a, b)| {
            let hit = other.covered(a, b);
            let existence = if hit > 0 { 1.0 } else { 0.0 };
            alpha * existence + (1.0 - alpha) * hit as f64 / (b - a + 1) as f64
        })
        .sum();
    total / targets.ranges.len() as f64
}

pub fn range_recall(real: &RangeSet, pred: &RangeSet, p: &MetricParams) -> Result<f64> {
    check_pair(real, pred)?;
    if !(0.0..=1.0).contains(&p.alpha_existence) {
        return Err(YmirError::Param(format!("alpha_existence must be in [0, 1], got {}", p.alpha_existence)));
    }
    Ok(range_score(real, pred, p.alpha_existence))
}

pub fn range_precision(real: &RangeSet, pred: &RangeSet, _p: &MetricParams) -> Result<f64> {
    check_pair(real, pred)?;
    Ok(range_score(pred, real, 0.0))
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub best_f1: f64,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub curve: Vec<CurvePoint>,
}

/// Candidate thresholds: the distinct score values above the minimum, or
/// `count` of them picked evenly by rank when there are more.
///
/// Rank-based picks make the sweep invariant under strictly increasing
/// transforms of the scores.
pub fn sweep_thresholds(scores: &[f64], count: usize) -> Vec<f64> {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let candidates = distinct.get(1..).unwrap_or(&[]);
    let m = candidates.len();
    if m <= count {
        return candidates.to_vec();
    }
    (0..count).map(|i| candidates[((i + 1) * m).div_ceil(count) - 1]).collect()
}

fn evaluate_at(scores: &[f64], real: &RangeSet, threshold: f64, p: &MetricParams) -> Result<CurvePoint> {
    let binary: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
    let pred = extract_ranges(&binary);
    let precision = range_precision(real, &pred, p)?;
    let recall = range_recall(real, &pred, p)?;
    Ok(CurvePoint { threshold, precision, recall, f1: f1(precision, recall) })
}

/// Best range F1 over the threshold sweep; ties keep the lowest threshold.
/// With a single distinct score nothing is predicted.
pub fn best_range_f1(scores: &[f64], truth: &LabelSeries, thresholds: usize, p: &MetricParams) -> Result<EvalReport> {
    if scores.len() != truth.len() {
        return Err(YmirError::Shape(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if !truth.is_fully_labeled() {
        return Err(YmirError::Contract("evaluation requires every point to be labeled".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(YmirError::Data("scores contain non-finite values".into()));
    }
    let real = extract_ranges(&truth.labels);
    let candidates = sweep_thresholds(scores, thresholds);
    let curve: Vec<CurvePoint> = candidates
        .par_iter()
        .map(|&th| evaluate_at(scores, &real, th, p))
        .collect::<Result<_>>()?;
    let best = curve.iter().fold(None::<&CurvePoint>, |acc, c| match acc {
        Some(b) if b.f1 >= c.f1 => Some(b),
        _ => Some(c),
    });
    let best = match best {
        Some(b) => *b,
        None => {
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let nothing = RangeSet { len: scores.len(), ranges: vec![] };
            let (precision, recall) = (range_precision(&real, &nothing, p)?, range_recall(&real, &nothing, p)?);
            CurvePoint { threshold: top, precision, recall, f1: f1(precision, recall) }
        }
    };
    Ok(EvalReport { best_f1: best.f1, threshold: best.threshold, precision: best.precision, recall: best.recall, curve })
}

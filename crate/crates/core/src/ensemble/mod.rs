// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score normalization, weighting, aggregation and the unsupervised
//! detection path.

mod esd;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

pub use esd::{default_r_max, esd_critical_values, generalized_esd, EsdTable};

use crate::detectors::RawScoreSeries;
use crate::error::{Result, YmirError};
use crate::series::format_float;
use crate::stats;

/// Spreads below this collapse a column to zero.
const MIN_SPREAD: f64 = 1e-12;

/// Per-model 1st/99th percentiles of training raw scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub model_ids: Vec<String>,
    pub q01: Vec<f64>,
    pub q99: Vec<f64>,
}

impl Normalizer {
    pub fn index_of(&self, model_id: &str) -> Result<usize> {
        self.model_ids
            .iter()
            .position(|m| m == model_id)
            .ok_or_else(|| YmirError::Registry(format!("normalizer has no model {model_id:?}")))
    }

    /// Normalized value of one raw score for column `j`.
    #[inline]
    pub fn normalize_value(&self, j: usize, raw: f64) -> f64 {
        let spread = self.q99[j] - self.q01[j];
        if spread < MIN_SPREAD {
            0.0
        } else {
            ((raw - self.q01[j]) / spread).clamp(0.0, 1.0)
        }
    }

    pub fn len(&self) -> usize {
        self.model_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.model_ids.is_empty()
    }
}

pub fn fit_normalizer(raw: &[RawScoreSeries]) -> Result<Normalizer> {
    let mut norm = Normalizer { model_ids: Vec::new(), q01: Vec::new(), q99: Vec::new() };
    for series in raw {
        if series.scores.is_empty() {
            return Err(YmirError::Size(format!("no training scores for {}", series.model_id)));
        }
        let mut sorted = series.scores.clone();
        sorted.sort_by(f64::total_cmp);
        norm.model_ids.push(series.model_id.clone());
        norm.q01.push(stats::percentile_sorted(&sorted, 0.01));
        norm.q99.push(stats::percentile_sorted(&sorted, 0.99));
    }
    Ok(norm)
}

pub fn normalize_scores(raw: &RawScoreSeries, norm: &Normalizer) -> Result<Vec<f64>> {
    let j = norm.index_of(&raw.model_id)?;
    Ok(raw.scores.iter().map(|&v| norm.normalize_value(j, v)).collect())
}

/// `T x k` per-model feature scores, one column per detector in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub model_ids: Vec<String>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    pub fn new(model_ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != model_ids.len() {
            return Err(YmirError::Shape(format!(
                "{} model ids for {} feature columns",
                model_ids.len(),
                values.ncols()
            )));
        }
        Ok(Self { model_ids, values })
    }

    /// Normalizes every raw series; columns follow the order of `raw`.
    pub fn from_raw(raw: &[RawScoreSeries], norm: &Normalizer) -> Result<Self> {
        let t = raw.first().map_or(0, |r| r.scores.len());
        let mut values = Array2::zeros((t, raw.len()));
        for (j, series) in raw.iter().enumerate() {
            if series.scores.len() != t {
                return Err(YmirError::Shape(format!(
                    "score series {} has length {}, expected {t}",
                    series.model_id,
                    series.scores.len()
                )));
            }
            let col = normalize_scores(series, norm)?;
            values.column_mut(j).assign(&ArrayView1::from(&col[..]));
        }
        Self::new(raw.iter().map(|r| r.model_id.clone()).collect(), values)
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn n_models(&self) -> usize {
        self.values.ncols()
    }

    /// CSV with header `timestamp,<model_id>...`.
    pub fn to_csv_string(&self, timestamps: &[i64]) -> Result<String> {
        if timestamps.len() != self.len() {
            return Err(YmirError::Shape(format!(
                "{} timestamps for {} feature rows",
                timestamps.len(),
                self.len()
            )));
        }
        let mut out = String::from("timestamp");
        for id in &self.model_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (ts, row) in timestamps.iter().zip(self.values.rows()) {
            write!(out, "{ts}").unwrap();
            for v in row {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Non-negative per-model weights; the default is all ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnsembleWeights {
    pub w: Vec<f64>,
}

impl EnsembleWeights {
    pub fn uniform(k: usize) -> Self {
        Self { w: vec![1.0; k] }
    }

    pub fn new(w: Vec<f64>) -> Result<Self> {
        let weights = Self { w };
        weights.validate()?;
        Ok(weights)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(bad) = self.w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(YmirError::Param(format!("ensemble weights must be finite and >= 0, got {bad}")));
        }
        if !self.w.iter().any(|&v| v > 0.0) {
            return Err(YmirError::Param("ensemble weights sum to zero".into()));
        }
        Ok(())
    }

    /// Weights relative to the largest, rounded to a 2^-24 grid.
    ///
    /// Scaling every weight by the same positive constant yields the same
    /// canonical weights, which makes aggregation exactly scale invariant.
    pub fn canonical(&self) -> Result<Vec<f64>> {
        self.validate()?;
        const GRID: f64 = (1u64 << 24) as f64;
        let max = self.w.iter().cloned().fold(0.0, f64::max);
        Ok(self.w.iter().map(|&v| ((v / max) * GRID).round() / GRID).collect())
    }

    fn check_len(&self, k: usize) -> Result<()> {
        if self.w.len() != k {
            return Err(YmirError::Shape(format!("{} weights for {k} feature columns", self.w.len())));
        }
        Ok(())
    }
}

/// Column `j` multiplied by `w_j`.
pub fn apply_weights(features: &FeatureMatrix, weights: &EnsembleWeights) -> Result<FeatureMatrix> {
    weights.check_len(features.n_models())?;
    if let Some(bad) = weights.w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(YmirError::Param(format!("ensemble weights must be finite and >= 0, got {bad}")));
    }
    let mut values = features.values.clone();
    for (mut col, &w) in values.columns_mut().into_iter().zip(&weights.w) {
        col.mapv_inplace(|v| v * w);
    }
    FeatureMatrix::new(features.model_ids.clone(), values)
}

/// Weighted mean of one feature row under canonical weights `q` (`q_sum = sum(q)`).
///
/// Computed as `min + sum q_j (x_j - min) / q_sum`, so identical columns
/// reproduce their common value exactly.
#[inline]
pub fn aggregate_row(row: ArrayView1<'_, f64>, q: &[f64], q_sum: f64) -> f64 {
    let anchor = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let spread: f64 = row.iter().zip(q).map(|(x, w)| w * (x - anchor)).sum();
    (anchor + spread / q_sum).clamp(0.0, 1.0)
}

/// Weighted average `a_t = sum_j w_j as_{t,j} / sum_j w_j` of the unweighted
/// feature matrix.
pub fn aggregate_weighted(features: &FeatureMatrix, weights: &EnsembleWeights) -> Result<Vec<f64>> {
    weights.check_len(features.n_models())?;
    let q = weights.canonical()?;
    let q_sum: f64 = q.iter().sum();
    Ok(features.values.rows().into_iter().map(|row| aggregate_row(row, &q, q_sum)).collect())
}

/// Flagged indices of the aggregate score with their confidences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedResult {
    pub flagged: Vec<usize>,
    /// Aggregate score at each flagged index.
    pub confidence: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub aggregate_scores: Vec<f64>,
}

impl UnsupervisedResult {
    pub fn is_flagged(&self, t: usize) -> bool {
        self.flagged.binary_search(&t).is_ok()
    }
}

/// Aggregates the feature matrix and runs generalized ESD on the result.
/// `r_max = None` uses 2% of the series length.
pub fn detect_unsupervised(
    features: &FeatureMatrix,
    weights: &EnsembleWeights,
    alpha: f64,
    r_max: Option<usize>,
) -> Result<UnsupervisedResult> {
    apply_weights(features, weights)?;
    let aggregate = aggregate_weighted(features, weights)?;
    let r_max = r_max.unwrap_or_else(|| default_r_max(aggregate.len(), 0.02));
    let flagged = generalized_esd(&aggregate, alpha, r_max)?;
    let confidence = flagged.iter().map(|&t| (t, aggregate[t])).collect();
    Ok(UnsupervisedResult { flagged, confidence, aggregate_scores: aggregate })
}

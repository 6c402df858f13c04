// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{max_over_metrics, Context, DetectorKind, ParamReader, Segment, TrainMeta, EPS};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;
use crate::stats;

/// Seasonal median-difference detector.
///
/// `d_t = |x_t - median(x_{t-p}, ..., x_{t-m p})|`, scaled by a robust
/// deviation of `d` over the training data. Positions with fewer than `m`
/// seasonal lags compare against the median of the trailing `p` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MediffState {
    pub period: usize,
    pub lags: usize,
    /// `1.4826 * MAD(d)` per metric.
    pub scales: Vec<f64>,
    pub meta: TrainMeta,
}

impl MediffState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet) -> Result<Self> {
        let period = params.usize("period", None)?;
        let lags = params.usize("lags", Some(3))?;
        if period < 2 {
            return Err(YmirError::Param(format!("mediff: period must be >= 2, got {period}")));
        }
        if lags < 1 {
            return Err(YmirError::Param("mediff: lags must be >= 1".into()));
        }
        if train.len() < lags * period {
            return Err(super::fit_error_min(&DetectorKind::Mediff, lags * period, train.len()));
        }
        let scales = (0..train.n_metrics())
            .map(|j| {
                let col = train.column(j).to_vec();
                let d = seasonal_differences(&col, period, lags, 0..col.len());
                stats::MAD_SCALE * stats::mad(&d)
            })
            .collect();
        Ok(Self { period, lags, scales, meta: TrainMeta::of(train) })
    }

    pub fn context(&self) -> Context {
        Context { back: self.period * self.lags, forward: 0 }
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Vec<f64> {
        max_over_metrics(seg, range, |j, col, r| {
            seasonal_differences(col, self.period, self.lags, r)
                .into_iter()
                .map(|d| d / (self.scales[j] + EPS))
                .collect()
        })
    }
}

pub(crate) fn seasonal_differences(col: &[f64], p: usize, m: usize, range: Range<usize>) -> Vec<f64> {
    range
        .map(|t| {
            let reference = if t >= m * p {
                let lagged: Vec<f64> = (1..=m).map(|k| col[t - k * p]).collect();
                stats::lower_median(&lagged)
            } else if t == 0 {
                col[0]
            } else {
                stats::lower_median(&col[t.saturating_sub(p)..t])
            };
            (col[t] - reference).abs()
        })
        .collect()
}

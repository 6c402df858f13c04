// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{max_over_metrics, Segment, TrainMeta, EPS};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;
use crate::stats;

/// Per-metric training mean and deviation; scores with the Chebyshev tail
/// bound turned into a score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChebyshevState {
    pub means: Vec<f64>,
    pub deviations: Vec<f64>,
    pub meta: TrainMeta,
}

impl ChebyshevState {
    pub(crate) fn fit(train: &TimeSeriesSet) -> Result<Self> {
        if train.len() < 2 {
            return Err(super::fit_error_min(&super::DetectorKind::Chebyshev, 2, train.len()));
        }
        let mut means = Vec::new();
        let mut deviations = Vec::new();
        for j in 0..train.n_metrics() {
            let col = train.column(j).to_vec();
            means.push(stats::mean(&col));
            let sd = stats::pop_std(&col);
            deviations.push(if sd > 0.0 { sd } else { EPS });
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(YmirError::Data("non-finite training mean".into()));
        }
        Ok(Self { means, deviations, meta: TrainMeta::of(train) })
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Vec<f64> {
        max_over_metrics(seg, range, |j, col, r| {
            r.map(|t| chebyshev_tail_score((col[t] - self.means[j]).abs() / self.deviations[j]))
                .collect()
        })
    }
}

/// `0` inside one deviation, `1 - 1/z^2` beyond.
pub fn chebyshev_tail_score(z: f64) -> f64 {
    if z <= 1.0 {
        0.0
    } else {
        1.0 - 1.0 / (z * z)
    }
}

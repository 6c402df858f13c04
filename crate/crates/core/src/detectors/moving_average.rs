// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{max_over_metrics, Context, ParamReader, Segment, TrainMeta, EPS};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;
use crate::stats;

/// Trailing-window z-score: `|x_t - mean| / (std + eps)` over the previous
/// `window` points. Positions before the first full window use the
/// statistics of the first `window` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingAverageState {
    pub window: usize,
    pub meta: TrainMeta,
}

impl MovingAverageState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet) -> Result<Self> {
        let window = params.usize("window", Some(20))?;
        if window < 2 {
            return Err(YmirError::Param(format!("moving_average: window must be >= 2, got {window}")));
        }
        Ok(Self { window, meta: TrainMeta::of(train) })
    }

    pub fn context(&self) -> Context {
        Context { back: self.window, forward: 0 }
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Vec<f64> {
        max_over_metrics(seg, range, |_, col, r| moving_average_scores(col, self.window, r))
    }
}

/// Moving-average scores of one metric at positions `range`.
pub fn moving_average_scores(col: &[f64], w: usize, range: Range<usize>) -> Vec<f64> {
    let prefix = &col[..w.min(col.len())];
    let (head_mean, head_std) = (stats::mean(prefix), stats::pop_std(prefix));
    range
        .map(|t| {
            let (m, s) = if t >= w {
                let win = &col[t - w..t];
                (stats::mean(win), stats::pop_std(win))
            } else {
                (head_mean, head_std)
            };
            (col[t] - m).abs() / (s + EPS)
        })
        .collect()
}

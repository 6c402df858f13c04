// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{max_over_metrics, Context, ParamReader, Segment, TrainMeta, EPS};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;

/// Spectral-residual saliency over a trailing window of `window` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralResidualState {
    pub window: usize,
    pub filter: usize,
    pub meta: TrainMeta,
}

impl SpectralResidualState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet) -> Result<Self> {
        let window = params.usize("window", Some(64))?;
        let filter = params.usize("filter", Some(3))?;
        validate(window, filter)?;
        if train.len() < window {
            return Err(super::fit_error_min(&super::DetectorKind::SpectralResidual, window, train.len()));
        }
        Ok(Self { window, filter, meta: TrainMeta::of(train) })
    }

    pub fn context(&self) -> Context {
        Context { back: self.window - 1, forward: 0 }
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Result<Vec<f64>> {
        if seg.len() < self.window {
            return Err(YmirError::Size(format!(
                "spectral_residual: window {} longer than segment {}",
                self.window,
                seg.len()
            )));
        }
        let fft = SpectralFft::new(self.window);
        Ok(max_over_metrics(seg, range, |_, col, r| {
            r.map(|t| fft.score_at(col, t, self.filter)).collect()
        }))
    }
}

fn validate(window: usize, filter: usize) -> Result<()> {
    if window < 4 || !window.is_power_of_two() {
        return Err(YmirError::Param(format!(
            "spectral_residual: window must be a power of two >= 4, got {window}"
        )));
    }
    if filter == 0 || filter.is_multiple_of(2) || filter > window {
        return Err(YmirError::Param(format!(
            "spectral_residual: filter must be odd and at most the window, got {filter}"
        )));
    }
    Ok(())
}

/// Scores positions `range` of a single metric.
pub fn spectral_residual_scores(col: &[f64], window: usize, filter: usize, range: Range<usize>) -> Result<Vec<f64>> {
    validate(window, filter)?;
    if col.len() < window {
        return Err(YmirError::Size(format!(
            "spectral_residual: window {window} longer than series {}",
            col.len()
        )));
    }
    let fft = SpectralFft::new(window);
    Ok(range.map(|t| fft.score_at(col, t, filter)).collect())
}

struct SpectralFft {
    window: usize,
    forward: std::sync::Arc<dyn Fft<f64>>,
    inverse: std::sync::Arc<dyn Fft<f64>>,
}

impl SpectralFft {
    fn new(window: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            window,
            forward: planner.plan_fft_forward(window),
            inverse: planner.plan_fft_inverse(window),
        }
    }

    /// Score of `col[t]` against the window ending at `t`, or against the
    /// first window when `t` precedes it.
    fn score_at(&self, col: &[f64], t: usize, filter: usize) -> f64 {
        let w = self.window;
        let (start, target) = if t + 1 >= w { (t + 1 - w, w - 1) } else { (0, t) };
        let win = &col[start..start + w];
        if win.iter().all(|&x| x == win[0]) {
            return 0.0;
        }
        let sal = self.saliency(win, filter);
        let others: f64 = sal
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != target)
            .map(|(_, s)| s)
            .sum();
        let local_mean = others / (w - 1) as f64;
        ((sal[target] - local_mean) / (local_mean + EPS)).max(0.0)
    }

    fn saliency(&self, win: &[f64], filter: usize) -> Vec<f64> {
        let w = self.window;
        let mut buf: Vec<Complex<f64>> = win.iter().map(|&x| Complex::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        let log_amp: Vec<f64> = buf.iter().map(|c| (c.norm() + EPS).ln()).collect();
        let half = filter / 2;
        for (f, c) in buf.iter_mut().enumerate() {
            let lo = f.saturating_sub(half);
            let hi = (f + half).min(w - 1);
            let avg = log_amp[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            let residual = log_amp[f] - avg;
            let phase = c.im.atan2(c.re);
            *c = Complex::from_polar(residual.exp(), phase);
        }
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.norm() / w as f64).collect()
    }
}

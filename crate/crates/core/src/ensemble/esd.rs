// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rosner's generalized extreme studentized deviate test.

use std::collections::HashMap;

use crate::error::{Result, YmirError};
use crate::stats;

/// Default cap on the number of outliers: 2% of the sample, at least one.
pub fn default_r_max(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).ceil() as usize).max(1)
}

/// Critical values `lambda_1..lambda_r` for a sample of size `n`.
///
/// `lambda_i = (n-i) t_{p,n-i-1} / sqrt((n-i-1 + t^2) (n-i+1))` with
/// `p = 1 - alpha / (2 (n-i+1))`.
pub fn esd_critical_values(n: usize, r_max: usize, alpha: f64) -> Vec<f64> {
    let r = r_max.min(n.saturating_sub(2));
    (1..=r)
        .map(|i| {
            let nf = n as f64;
            let i = i as f64;
            let p = 1.0 - alpha / (2.0 * (nf - i + 1.0));
            let df = nf - i - 1.0;
            let t = stats::student_t_quantile(p, df);
            (nf - i) * t / ((df + t * t) * (nf - i + 1.0)).sqrt()
        })
        .collect()
}

/// Test statistics `R_i` in removal order, with the removed indices.
/// Stops early when the remaining sample has zero spread.
///
/// The remaining sample is kept sorted by value, so sums run in an order
/// independent of the input order and the extreme point sits at either end.
/// Equal deviations resolve to the lowest original index.
fn removal_sequence(x: &[f64], r: usize) -> Vec<(usize, f64)> {
    let mut remaining: Vec<(f64, usize)> = x.iter().copied().zip(0..).collect();
    remaining.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut vals: Vec<f64> = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(r);
    for _ in 0..r {
        vals.clear();
        vals.extend(remaining.iter().map(|p| p.0));
        let mean = stats::mean(&vals);
        let sd = stats::sample_std(&vals);
        if !(sd > 0.0) || !sd.is_finite() {
            break;
        }
        let last = remaining.len() - 1;
        let top = remaining[last].0;
        let top_pos = remaining.partition_point(|p| p.0 < top);
        let dev_lo = mean - remaining[0].0;
        let dev_hi = top - mean;
        let pos = if dev_lo > dev_hi || (dev_lo == dev_hi && remaining[0].1 < remaining[top_pos].1) {
            0
        } else {
            top_pos
        };
        let (_, idx) = remaining.remove(pos);
        out.push((idx, dev_lo.max(dev_hi) / sd));
    }
    out
}

fn esd_with_critical(x: &[f64], critical: &[f64]) -> Vec<usize> {
    let seq = removal_sequence(x, critical.len());
    let count = seq
        .iter()
        .zip(critical)
        .enumerate()
        .filter(|(_, ((_, r), lambda))| r > lambda)
        .map(|(i, _)| i + 1)
        .max()
        .unwrap_or(0);
    let mut flagged: Vec<usize> = seq[..count].iter().map(|p| p.0).collect();
    flagged.sort_unstable();
    flagged
}

fn check_inputs(n: usize, alpha: f64) -> Result<()> {
    if n < 3 {
        return Err(YmirError::Size(format!("generalized ESD needs at least 3 points, got {n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(YmirError::Param(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Indices (ascending) declared outliers at significance `alpha`, at most `r_max`.
pub fn generalized_esd(x: &[f64], alpha: f64, r_max: usize) -> Result<Vec<usize>> {
    check_inputs(x.len(), alpha)?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(YmirError::Data("generalized ESD input contains non-finite values".into()));
    }
    Ok(esd_with_critical(x, &esd_critical_values(x.len(), r_max, alpha)))
}

/// Caches critical values per sample size for repeated windowed tests.
#[derive(Debug, Clone)]
pub struct EsdTable {
    alpha: f64,
    r_fraction: f64,
    cache: HashMap<usize, Vec<f64>>,
}

impl EsdTable {
    pub fn new(alpha: f64, r_fraction: f64) -> Self {
        Self { alpha, r_fraction, cache: HashMap::new() }
    }

    /// Whether the last point of `window` is among its ESD outliers.
    /// Windows shorter than 3 points never flag.
    pub fn flags_last(&mut self, window: &[f64]) -> bool {
        let n = window.len();
        if n < 3 {
            return false;
        }
        let (alpha, frac) = (self.alpha, self.r_fraction);
        let critical = self
            .cache
            .entry(n)
            .or_insert_with(|| esd_critical_values(n, default_r_max(n, frac), alpha));
        esd_with_critical(window, critical).last() == Some(&(n - 1))
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Pseudo-labels, label fusion and smoothing, and the learners trained on
//! them.

mod classifier;
mod linear;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use classifier::{
    classifier_forward, classifier_loss_and_gradient, init_classifier_params, positional_encoding,
    predict_series, train_classifier, ClassifierHyper, ClassifierModel, TrainedClassifier,
};
pub use linear::{loss_and_gradient as linear_loss_and_gradient, train_linear_baseline, LinearBaseline};

use crate::ensemble::{FeatureMatrix, UnsupervisedResult};
use crate::error::{Result, YmirError};
use crate::series::{sliding_windows, LabelSeries, TimeSeriesSet};
use crate::stats;

/// Optimizer and labeling settings shared by the learners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    pub epsilon_max: f64,
    /// Pseudo-label confidence threshold.
    pub th: f64,
    /// Reweight positives within each batch to balance class frequency.
    pub balance_positives: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 30,
            momentum: 0.9,
            seed: 0,
            epsilon_max: 0.1,
            th: 0.8,
            balance_positives: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(YmirError::Param(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.epsilon_max) {
            return bad("epsilon_max must be in [0, 0.5)");
        }
        if !(self.th > 0.0 && self.th <= 1.0) {
            return bad("th must be in (0, 1]");
        }
        Ok(())
    }
}

/// 1 where the point is flagged with confidence above `th`.
pub fn make_pseudo_labels(result: &UnsupervisedResult, th: f64, len: usize) -> Vec<u8> {
    let mut labels = vec![0u8; len];
    for (&t, &conf) in &result.confidence {
        if t < len && conf > th {
            labels[t] = 1;
        }
    }
    labels
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Pseudo,
    User,
}

/// Pseudo-labels overridden by user labels, with the smoothed targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedLabels {
    pub hard: Vec<u8>,
    pub source: Vec<LabelSource>,
    /// Fraction of points carrying a user label.
    pub rho: f64,
    pub targets: Vec<f64>,
}

/// Targets start equal to `hard`; see [`smooth_targets`].
pub fn fuse_labels(pseudo: &[u8], user: &LabelSeries) -> Result<FusedLabels> {
    if pseudo.len() != user.len() {
        return Err(YmirError::Shape(format!(
            "{} pseudo-labels for {} user label slots",
            pseudo.len(),
            user.len()
        )));
    }
    let mut hard = pseudo.to_vec();
    let mut source = vec![LabelSource::Pseudo; pseudo.len()];
    for t in 0..hard.len() {
        if user.mask[t] {
            hard[t] = user.labels[t];
            source[t] = LabelSource::User;
        }
    }
    let rho = if hard.is_empty() { 0.0 } else { user.labeled_count() as f64 / hard.len() as f64 };
    let targets = hard.iter().map(|&h| f64::from(h)).collect();
    Ok(FusedLabels { hard, source, rho, targets })
}

/// `target = hard (1 - eps) + eps / 2` with `eps = epsilon_max (1 - rho)`.
pub fn smooth_targets(fused: &FusedLabels, epsilon_max: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&epsilon_max) {
        return Err(YmirError::Param(format!("epsilon_max must be in [0, 0.5), got {epsilon_max}")));
    }
    let eps = epsilon_max * (1.0 - fused.rho);
    Ok(fused.hard.iter().map(|&h| f64::from(h) * (1.0 - eps) + eps / 2.0).collect())
}

/// Per-metric mean and deviation of the training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Deviations below 1e-12 are replaced by 1.
    pub fn fit(ts: &TimeSeriesSet) -> Self {
        let (mean, std) = (0..ts.n_metrics())
            .map(|j| {
                let col = ts.column(j).to_vec();
                let sd = stats::pop_std(&col);
                (stats::mean(&col), if sd < 1e-12 { 1.0 } else { sd })
            })
            .unzip();
        Self { mean, std }
    }

    pub fn identity(n: usize) -> Self {
        Self { mean: vec![0.0; n], std: vec![1.0; n] }
    }

    pub fn apply(&self, raw: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = raw.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            let (m, s) = (self.mean[j], self.std[j]);
            col.mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// Windowed samples: standardized raw window, feature window and the target
/// at the window center.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub window: usize,
    pub metric_names: Vec<String>,
    pub model_ids: Vec<String>,
    pub standardizer: Standardizer,
    pub x: Vec<Array2<f64>>,
    pub s: Vec<Array2<f64>>,
    pub y: Vec<f64>,
    pub centers: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn n_metrics(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn n_features(&self) -> usize {
        self.model_ids.len()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            window: self.window,
            metric_names: self.metric_names.clone(),
            model_ids: self.model_ids.clone(),
            standardizer: self.standardizer.clone(),
            x: idx.iter().map(|&i| self.x[i].clone()).collect(),
            s: idx.iter().map(|&i| self.s[i].clone()).collect(),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            centers: idx.iter().map(|&i| self.centers[i]).collect(),
        }
    }
}

/// One sample per stride-1 window of length `w`, targets read at the centers.
pub fn build_dataset(
    ts: &TimeSeriesSet,
    features: &FeatureMatrix,
    targets: &[f64],
    w: usize,
    standardizer: &Standardizer,
) -> Result<Dataset> {
    let t = ts.len();
    if features.len() != t || targets.len() != t {
        return Err(YmirError::Shape(format!(
            "series has {t} rows, features {} and targets {}",
            features.len(),
            targets.len()
        )));
    }
    if standardizer.mean.len() != ts.n_metrics() {
        return Err(YmirError::Shape("standardizer metric count differs from series".into()));
    }
    let windows = sliding_windows(t, w, 1)?;
    let z = standardizer.apply(ts.values());
    let mut ds = Dataset {
        window: w,
        metric_names: ts.metric_names().to_vec(),
        model_ids: features.model_ids.clone(),
        standardizer: standardizer.clone(),
        x: Vec::with_capacity(windows.len()),
        s: Vec::with_capacity(windows.len()),
        y: Vec::with_capacity(windows.len()),
        centers: Vec::with_capacity(windows.len()),
    };
    for win in windows {
        ds.x.push(z.slice(s![win.start..win.end(), ..]).to_owned());
        ds.s.push(features.values.slice(s![win.start..win.end(), ..]).to_owned());
        ds.y.push(targets[win.center]);
        ds.centers.push(win.center);
    }
    Ok(ds)
}

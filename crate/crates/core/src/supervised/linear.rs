// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logistic regression on window means, a fast reference learner.

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{Dataset, Standardizer, TrainConfig};
use crate::ensemble::FeatureMatrix;
use crate::error::{Result, YmirError};
use crate::nn::{bce_with_logit, sigmoid, MomentumSgd, ParamList, Tensor};
use crate::series::{sliding_windows, TimeSeriesSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline {
    pub window: usize,
    pub metric_names: Vec<String>,
    pub model_ids: Vec<String>,
    pub standardizer: Standardizer,
    /// `w` over `[mean(X) ; mean(S)]`, then the bias `b`.
    pub params: ParamList,
}

/// Column means of the standardized raw window followed by those of the
/// feature window.
fn pooled_features(x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>) -> Vec<f64> {
    let mx = x.mean_axis(Axis(0)).expect("non-empty window");
    let ms = s.mean_axis(Axis(0)).expect("non-empty window");
    mx.iter().chain(ms.iter()).copied().collect()
}

fn logit(params: &ParamList, f: &[f64]) -> f64 {
    let w = &params.tensors[0].data;
    w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + params.tensors[1].data[0]
}

/// Mean cross-entropy over `features`/`targets` and its gradient.
pub fn loss_and_gradient(params: &ParamList, features: &[Vec<f64>], targets: &[f64]) -> (f64, ParamList) {
    let mut grads = params.zeros_like();
    let m = features.len() as f64;
    let mut loss = 0.0;
    for (f, &y) in features.iter().zip(targets) {
        let z = logit(params, f);
        loss += bce_with_logit(z, y);
        let dz = (sigmoid(z) - y) / m;
        for (g, v) in grads.tensors[0].data.iter_mut().zip(f) {
            *g += dz * v;
        }
        grads.tensors[1].data[0] += dz;
    }
    (loss / m, grads)
}

impl LinearBaseline {
    pub fn zeros(window: usize, metric_names: Vec<String>, model_ids: Vec<String>, standardizer: Standardizer) -> Self {
        let dim = metric_names.len() + model_ids.len();
        let params = ParamList::new(vec![Tensor::zeros("w", &[dim]), Tensor::zeros("b", &[1])]);
        Self { window, metric_names, model_ids, standardizer, params }
    }

    /// Probability for one standardized raw window and its feature window.
    pub fn predict_standardized(&self, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>) -> f64 {
        sigmoid(logit(&self.params, &pooled_features(x, s)))
    }

    /// Per-timestamp probabilities with the same edge rule as the classifier.
    pub fn predict_series(&self, ts: &TimeSeriesSet, features: &FeatureMatrix) -> Result<Vec<f64>> {
        if ts.n_metrics() != self.metric_names.len() || features.n_models() != self.model_ids.len() || features.len() != ts.len() {
            return Err(YmirError::Shape("baseline input shape differs from training".into()));
        }
        let z = self.standardizer.apply(ts.values());
        let windows = sliding_windows(ts.len(), self.window, 1)?;
        let probs: Vec<f64> = windows
            .iter()
            .map(|w| {
                let r = w.start..w.end();
                self.predict_standardized(z.slice(ndarray::s![r.clone(), ..]), features.values.slice(ndarray::s![r, ..]))
            })
            .collect();
        let half = self.window / 2;
        Ok((0..ts.len()).map(|t| probs[t.saturating_sub(half).min(probs.len() - 1)]).collect())
    }
}

/// Full-batch gradient descent (with the configured momentum) for
/// `cfg.epochs` iterations, starting from zero weights.
pub fn train_linear_baseline(ds: &Dataset, cfg: &TrainConfig) -> Result<LinearBaseline> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(YmirError::Size("empty training dataset".into()));
    }
    let mut model = LinearBaseline::zeros(ds.window, ds.metric_names.clone(), ds.model_ids.clone(), ds.standardizer.clone());
    let features: Vec<Vec<f64>> = ds.x.iter().zip(&ds.s).map(|(x, s)| pooled_features(x.view(), s.view())).collect();
    let mut opt = MomentumSgd::new(cfg.learning_rate, cfg.momentum);
    for iter in 0..cfg.epochs {
        let (loss, grads) = loss_and_gradient(&model.params, &features, &ds.y);
        if !loss.is_finite() {
            return Err(YmirError::Numeric { epoch: Some(iter), msg: "non-finite baseline loss".into() });
        }
        opt.step(&mut model.params, &grads);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{numeric_gradient, relative_error};
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(count: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = 16;
        let mut ds = Dataset {
            window: w,
            metric_names: vec!["a".into()],
            model_ids: vec!["m0".into(), "m1".into()],
            standardizer: Standardizer::identity(1),
            x: vec![],
            s: vec![],
            y: vec![],
            centers: vec![],
        };
        for i in 0..count {
            let level: f64 = rng.random_range(0.0..1.0);
            let s = Array2::from_shape_fn((w, 2), |_| (level + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0));
            ds.y.push(if s.mean().unwrap() > 0.5 { 1.0 } else { 0.0 });
            ds.s.push(s);
            ds.x.push(Array2::from_shape_fn((w, 1), |_| rng.random_range(-1.0..1.0)));
            ds.centers.push(i);
        }
        ds
    }

    #[test]
    fn zero_weights_give_one_half() {
        let m = LinearBaseline::zeros(4, vec!["a".into()], vec!["m".into()], Standardizer::identity(1));
        let x = Array2::from_elem((4, 1), 3.0);
        let s = Array2::from_elem((4, 1), 0.7);
        assert_eq!(m.predict_standardized(x.view(), s.view()), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let dim = rng.random_range(1..6);
            let feats: Vec<Vec<f64>> = (0..12).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let ys: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut p = ParamList::new(vec![Tensor::zeros("w", &[dim]), Tensor::zeros("b", &[1])]);
            for i in 0..=dim {
                *p.scalar_mut(i) = rng.random_range(-1.0..1.0);
            }
            let (_, g) = loss_and_gradient(&p, &feats, &ys);
            let num = numeric_gradient(&p, 1e-6, |q| loss_and_gradient(q, &feats, &ys).0);
            assert!(relative_error(&g.flat(), &num) < 1e-4);
        }
    }

    #[test]
    fn separates_mean_feature_threshold() {
        let train = dataset(400, 2);
        let test = dataset(400, 3);
        let cfg = TrainConfig { learning_rate: 1.0, epochs: 500, ..TrainConfig::default() };
        let model = train_linear_baseline(&train, &cfg).unwrap();
        let again = train_linear_baseline(&train, &cfg).unwrap();
        assert_eq!(model, again);
        let correct = (0..test.len())
            .filter(|&i| {
                let p = model.predict_standardized(test.x[i].view(), test.s[i].view());
                (p > 0.5) == (test.y[i] > 0.5)
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.95, "accuracy {correct}/400");
    }
}

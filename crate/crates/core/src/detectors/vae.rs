// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Context, ParamReader, Segment, TrainMeta};
use crate::error::{Result, YmirError};
use crate::nn::{MomentumSgd, ParamList, Tensor};
use crate::series::TimeSeriesSet;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub window: usize,
    pub hidden: usize,
    pub latent: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { window: 16, hidden: 32, latent: 4, epochs: 50, learning_rate: 1e-3, batch: 32 }
    }
}

// tensor order
const ENC_W: usize = 0;
const ENC_B: usize = 1;
const MU_W: usize = 2;
const MU_B: usize = 3;
const LV_W: usize = 4;
const LV_B: usize = 5;
const DEC_W1: usize = 6;
const DEC_B1: usize = 7;
const DEC_W2: usize = 8;
const DEC_B2: usize = 9;

/// Windowed variational autoencoder; per-timestamp score is the mean
/// reconstruction error of every window covering the timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeState {
    pub config: VaeConfig,
    pub means: Vec<f64>,
    pub deviations: Vec<f64>,
    pub params: ParamList,
    pub epoch_loss: Vec<f64>,
    pub meta: TrainMeta,
}

/// Fresh parameters for input width `dim`.
pub fn init_vae_params(dim: usize, cfg: &VaeConfig, rng: &mut ChaCha8Rng) -> ParamList {
    let (h, z) = (cfg.hidden, cfg.latent);
    ParamList::new(vec![
        Tensor::xavier("enc_w", &[h, dim], dim, h, rng),
        Tensor::zeros("enc_b", &[h]),
        Tensor::xavier("mu_w", &[z, h], h, z, rng),
        Tensor::zeros("mu_b", &[z]),
        Tensor::xavier("logvar_w", &[z, h], h, z, rng),
        Tensor::zeros("logvar_b", &[z]),
        Tensor::xavier("dec_w1", &[h, z], z, h, rng),
        Tensor::zeros("dec_b1", &[h]),
        Tensor::xavier("dec_w2", &[dim, h], h, dim, rng),
        Tensor::zeros("dec_b2", &[dim]),
    ])
}

/// `-1/2 sum(1 + logvar - mu^2 - exp(logvar))`
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu.iter().zip(logvar).map(|(m, lv)| 1.0 + lv - m * m - lv.exp()).sum::<f64>()
}

fn affine(x: &ArrayView2<'_, f64>, w: &Tensor, b: &Tensor) -> Array2<f64> {
    x.dot(&w.view2().t()) + &b.view1()
}

/// Batch loss (mean over samples of MSE + KL) and its exact gradient.
///
/// `noise` holds the reparameterization draws, one row per sample, so the
/// loss is a deterministic function of the parameters.
pub fn vae_loss_and_gradient(params: &ParamList, x: ArrayView2<'_, f64>, noise: ArrayView2<'_, f64>) -> (f64, ParamList) {
    let t = &params.tensors;
    let b = x.nrows() as f64;
    let d = x.ncols() as f64;

    let h1 = affine(&x, &t[ENC_W], &t[ENC_B]).mapv(f64::tanh);
    let mu = affine(&h1.view(), &t[MU_W], &t[MU_B]);
    let lv = affine(&h1.view(), &t[LV_W], &t[LV_B]);
    let sd = lv.mapv(|v| (0.5 * v).exp());
    let z = &mu + &(&sd * &noise);
    let h2 = affine(&z.view(), &t[DEC_W1], &t[DEC_B1]).mapv(f64::tanh);
    let xr = affine(&h2.view(), &t[DEC_W2], &t[DEC_B2]);

    let diff = &xr - &x;
    let mse: f64 = diff.iter().map(|v| v * v).sum::<f64>() / d;
    let kl: f64 = -0.5 * (0..mu.nrows())
        .map(|i| {
            mu.row(i)
                .iter()
                .zip(lv.row(i))
                .map(|(m, l)| 1.0 + l - m * m - l.exp())
                .sum::<f64>()
        })
        .sum::<f64>();
    let loss = (mse + kl) / b;

    let mut g = params.zeros_like();
    let dxr = diff.mapv(|v| 2.0 * v / (d * b));
    g.tensors[DEC_W2].view2_mut().assign(&dxr.t().dot(&h2));
    g.tensors[DEC_B2].view1_mut().assign(&dxr.sum_axis(Axis(0)));
    let dh2 = dxr.dot(&t[DEC_W2].view2());
    let da2 = &dh2 * &h2.mapv(|v| 1.0 - v * v);
    g.tensors[DEC_W1].view2_mut().assign(&da2.t().dot(&z));
    g.tensors[DEC_B1].view1_mut().assign(&da2.sum_axis(Axis(0)));
    let dz = da2.dot(&t[DEC_W1].view2());

    let dmu = &dz + &mu.mapv(|m| m / b);
    let dlv = &(&(&dz * &noise) * &sd.mapv(|s| 0.5 * s)) + &lv.mapv(|l| 0.5 * (l.exp() - 1.0) / b);
    g.tensors[MU_W].view2_mut().assign(&dmu.t().dot(&h1));
    g.tensors[MU_B].view1_mut().assign(&dmu.sum_axis(Axis(0)));
    g.tensors[LV_W].view2_mut().assign(&dlv.t().dot(&h1));
    g.tensors[LV_B].view1_mut().assign(&dlv.sum_axis(Axis(0)));
    let dh1 = dmu.dot(&t[MU_W].view2()) + dlv.dot(&t[LV_W].view2());
    let da1 = &dh1 * &h1.mapv(|v| 1.0 - v * v);
    g.tensors[ENC_W].view2_mut().assign(&da1.t().dot(&x));
    g.tensors[ENC_B].view1_mut().assign(&da1.sum_axis(Axis(0)));

    (loss, g)
}

/// Deterministic (z = mu) reconstruction error of one flattened window.
fn reconstruction_error(params: &ParamList, x: &Array1<f64>) -> f64 {
    let t = &params.tensors;
    let h1 = (t[ENC_W].view2().dot(x) + &t[ENC_B].view1()).mapv(f64::tanh);
    let mu = t[MU_W].view2().dot(&h1) + &t[MU_B].view1();
    let h2 = (t[DEC_W1].view2().dot(&mu) + &t[DEC_B1].view1()).mapv(f64::tanh);
    let xr = t[DEC_W2].view2().dot(&h2) + &t[DEC_B2].view1();
    xr.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

impl VaeState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet, seed: u64) -> Result<Self> {
        let d = VaeConfig::default();
        let cfg = VaeConfig {
            window: params.usize("window", Some(d.window))?,
            hidden: params.usize("hidden", Some(d.hidden))?,
            latent: params.usize("latent", Some(d.latent))?,
            epochs: params.usize("epochs", Some(d.epochs))?,
            learning_rate: params.f64("learning_rate", Some(d.learning_rate))?,
            batch: params.usize("batch", Some(d.batch))?,
        };
        let seed = params.usize("seed", Some(seed as usize))? as u64;
        Self::train(cfg, train, seed)
    }

    pub fn train(cfg: VaeConfig, train: &TimeSeriesSet, seed: u64) -> Result<Self> {
        if cfg.window == 0 || cfg.hidden == 0 || cfg.latent == 0 || cfg.batch == 0 {
            return Err(YmirError::Param("vae_recon: sizes must be positive".into()));
        }
        if !(cfg.learning_rate > 0.0) {
            return Err(YmirError::Param("vae_recon: learning_rate must be positive".into()));
        }
        if cfg.window > train.len() {
            return Err(YmirError::Size(format!(
                "vae_recon: window {} longer than training series {}",
                cfg.window,
                train.len()
            )));
        }
        let n = train.n_metrics();
        let mut means = Vec::with_capacity(n);
        let mut deviations = Vec::with_capacity(n);
        for j in 0..n {
            let col = train.column(j).to_vec();
            means.push(stats::mean(&col));
            let sd = stats::pop_std(&col);
            deviations.push(if sd > 1e-12 { sd } else { 1.0 });
        }
        let mut state = VaeState {
            config: cfg,
            means,
            deviations,
            params: ParamList::new(Vec::new()),
            epoch_loss: Vec::new(),
            meta: TrainMeta::of(train),
        };
        let dim = cfg.window * n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        state.params = init_vae_params(dim, &cfg, &mut rng);

        let seg = Segment::from_set(train);
        let n_windows = train.len() - cfg.window + 1;
        let windows: Vec<Array1<f64>> = (0..n_windows).map(|s| state.flatten(&seg, s)).collect();
        let mut order: Vec<usize> = (0..n_windows).collect();
        let mut opt = MomentumSgd::new(cfg.learning_rate, 0.0);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let mut x = Array2::<f64>::zeros((chunk.len(), dim));
                for (r, &s) in chunk.iter().enumerate() {
                    x.row_mut(r).assign(&windows[s]);
                }
                let noise = Array2::from_shape_fn((chunk.len(), cfg.latent), |_| StandardNormal.sample(&mut rng));
                let (loss, grad) = vae_loss_and_gradient(&state.params, x.view(), noise.view());
                if !loss.is_finite() {
                    return Err(YmirError::Numeric { epoch: Some(epoch), msg: "vae_recon loss is not finite".into() });
                }
                total += loss * chunk.len() as f64;
                opt.step(&mut state.params, &grad);
            }
            state.epoch_loss.push(total / n_windows as f64);
        }
        if !state.params.all_finite() {
            return Err(YmirError::Numeric { epoch: Some(cfg.epochs), msg: "vae_recon parameters diverged".into() });
        }
        Ok(state)
    }

    fn flatten(&self, seg: &Segment<'_>, start: usize) -> Array1<f64> {
        let n = self.means.len();
        let mut out = Array1::zeros(self.config.window * n);
        for r in 0..self.config.window {
            for j in 0..n {
                out[r * n + j] = (seg.values[[start + r, j]] - self.means[j]) / self.deviations[j];
            }
        }
        out
    }

    pub fn context(&self) -> Context {
        Context { back: self.config.window - 1, forward: self.config.window - 1 }
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Result<Vec<f64>> {
        let w = self.config.window;
        if w > seg.len() {
            return Err(YmirError::Size(format!("vae_recon: window {w} longer than segment {}", seg.len())));
        }
        let last_start = seg.len() - w;
        let s_lo = (range.start + 1).saturating_sub(w);
        let s_hi = (range.end - 1).min(last_start);
        let errors: Vec<f64> = (s_lo..=s_hi)
            .map(|s| reconstruction_error(&self.params, &self.flatten(seg, s)))
            .collect();
        Ok(range
            .map(|i| {
                let first = (i + 1).saturating_sub(w);
                let last = i.min(last_start);
                let mut sum = 0.0;
                for s in first..=last {
                    sum += errors[s - s_lo];
                }
                sum / (last - first + 1) as f64
            })
            .collect())
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-encoder window classifier.
//!
//! Each encoder is a single-head, single-layer self-attention block over one
//! input stream (standardized raw metrics or feature scores). The two
//! `w x d` embeddings are concatenated along features and compressed by a
//! kernel-3 convolution, mean-pooled, and mapped to one logit.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Standardizer, TrainConfig};
use crate::ensemble::FeatureMatrix;
use crate::error::{Result, YmirError};
use crate::nn::{bce_with_logit, sigmoid, MomentumSgd, ParamList, Tensor};
use crate::series::{sliding_windows, TimeSeriesSet};

const LN_EPS: f64 = 1e-5;
const KERNEL: usize = 3;

// tensor order inside one encoder
const PROJ_W: usize = 0;
const PROJ_B: usize = 1;
const WQ: usize = 2;
const WK: usize = 3;
const WV: usize = 4;
const WO: usize = 5;
const LN1_G: usize = 6;
const LN1_B: usize = 7;
const FF1_W: usize = 8;
const FF1_B: usize = 9;
const FF2_W: usize = 10;
const FF2_B: usize = 11;
const LN2_G: usize = 12;
const LN2_B: usize = 13;
const ENC_TENSORS: usize = 14;

const RAW_ENC: usize = 0;
const FEAT_ENC: usize = ENC_TENSORS;
const CONV_W: usize = 2 * ENC_TENSORS;
const CONV_B: usize = CONV_W + 1;
const OUT_W: usize = CONV_W + 2;
const OUT_B: usize = CONV_W + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierHyper {
    pub window: usize,
    pub d_model: usize,
    pub channels: usize,
}

impl Default for ClassifierHyper {
    fn default() -> Self {
        Self { window: 32, d_model: 16, channels: 8 }
    }
}

/// Parameters in persisted order: raw encoder, feature encoder, conv head.
///
/// Weight matrices are Glorot-uniform; biases start at 0 and layer-norm
/// gains at 1.
pub fn init_classifier_params(hyper: &ClassifierHyper, n_metrics: usize, n_features: usize, seed: u64) -> ParamList {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = hyper.d_model;
    let c = hyper.channels;
    let mut tensors = Vec::with_capacity(CONV_W + 4);
    for (prefix, input) in [("raw", n_metrics), ("feat", n_features)] {
        let name = |t: &str| format!("{prefix}.{t}");
        tensors.push(Tensor::xavier(&name("proj_w"), &[input, d], input, d, &mut rng));
        tensors.push(Tensor::zeros(&name("proj_b"), &[d]));
        for t in ["wq", "wk", "wv", "wo"] {
            tensors.push(Tensor::xavier(&name(t), &[d, d], d, d, &mut rng));
        }
        tensors.push(Tensor::filled(&name("ln1_g"), &[d], 1.0));
        tensors.push(Tensor::zeros(&name("ln1_b"), &[d]));
        tensors.push(Tensor::xavier(&name("ff1_w"), &[d, 2 * d], d, 2 * d, &mut rng));
        tensors.push(Tensor::zeros(&name("ff1_b"), &[2 * d]));
        tensors.push(Tensor::xavier(&name("ff2_w"), &[2 * d, d], 2 * d, d, &mut rng));
        tensors.push(Tensor::zeros(&name("ff2_b"), &[d]));
        tensors.push(Tensor::filled(&name("ln2_g"), &[d], 1.0));
        tensors.push(Tensor::zeros(&name("ln2_b"), &[d]));
    }
    tensors.push(Tensor::xavier("conv_w", &[KERNEL, 2 * d, c], KERNEL * 2 * d, KERNEL * c, &mut rng));
    tensors.push(Tensor::zeros("conv_b", &[c]));
    tensors.push(Tensor::xavier("out_w", &[c], c, 1, &mut rng));
    tensors.push(Tensor::zeros("out_b", &[1]));
    ParamList::new(tensors)
}

/// Sinusoidal position table, `w x d`.
pub fn positional_encoding(w: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((w, d), |(pos, i)| {
        let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

struct LayerNormCache {
    xhat: Array2<f64>,
    inv: Array1<f64>,
}

fn layer_norm(u: &Array2<f64>, g: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> (Array2<f64>, LayerNormCache) {
    let mut xhat = u.clone();
    let mut inv = Array1::zeros(u.nrows());
    for (mut row, iv) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.mean().unwrap_or(0.0);
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
        *iv = 1.0 / (var + LN_EPS).sqrt();
        let s = *iv;
        row.mapv_inplace(|v| (v - mean) * s);
    }
    let y = &xhat * &g + &b;
    (y, LayerNormCache { xhat, inv })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LayerNormCache,
    g: ArrayView1<'_, f64>,
    mut dg: ArrayViewMut1<'_, f64>,
    mut db: ArrayViewMut1<'_, f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    dg += &(dy * &cache.xhat).sum_axis(Axis(0));
    db += &dy.sum_axis(Axis(0));
    let dxhat = dy * &g;
    let mut dx = Array2::zeros(dy.raw_dim());
    for r in 0..dy.nrows() {
        let dh = dxhat.row(r);
        let xh = cache.xhat.row(r);
        let sum1 = dh.sum();
        let sum2 = dh.dot(&xh);
        let k = cache.inv[r] / d;
        dx.row_mut(r).assign(&((&dh * d - sum1 - &xh * sum2) * k));
    }
    dx
}

struct EncoderCache {
    e: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    ln1: LayerNormCache,
    h1: Array2<f64>,
    f1: Array2<f64>,
    ln2: LayerNormCache,
}

fn mat(p: &ParamList, i: usize) -> ArrayView2<'_, f64> {
    p.tensors[i].view2()
}

fn vec1(p: &ParamList, i: usize) -> ArrayView1<'_, f64> {
    p.tensors[i].view1()
}

fn encoder_forward(p: &ParamList, base: usize, x: ArrayView2<'_, f64>, pe: &Array2<f64>) -> (Array2<f64>, EncoderCache) {
    let d = p.tensors[base + WQ].shape[0];
    let scale = 1.0 / (d as f64).sqrt();
    let e = x.dot(&mat(p, base + PROJ_W)) + vec1(p, base + PROJ_B) + pe;
    let q = e.dot(&mat(p, base + WQ));
    let k = e.dot(&mat(p, base + WK));
    let v = e.dot(&mat(p, base + WV));
    let mut attn = q.dot(&k.t()) * scale;
    for mut row in attn.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - m).exp());
        let sum = row.sum();
        row /= sum;
    }
    let ctx = attn.dot(&v);
    let u1 = &e + &ctx.dot(&mat(p, base + WO));
    let (h1, ln1) = layer_norm(&u1, vec1(p, base + LN1_G), vec1(p, base + LN1_B));
    let f1 = (h1.dot(&mat(p, base + FF1_W)) + vec1(p, base + FF1_B)).mapv(|z| z.max(0.0));
    let u2 = &h1 + &(f1.dot(&mat(p, base + FF2_W)) + vec1(p, base + FF2_B));
    let (h2, ln2) = layer_norm(&u2, vec1(p, base + LN2_G), vec1(p, base + LN2_B));
    (h2, EncoderCache { e, q, k, v, attn, ctx, ln1, h1, f1, ln2 })
}

fn add2(grads: &mut ParamList, i: usize, g: &Array2<f64>) {
    grads.tensors[i].view2_mut().scaled_add(1.0, g);
}

fn add1(grads: &mut ParamList, i: usize, g: &Array1<f64>) {
    grads.tensors[i].view1_mut().scaled_add(1.0, g);
}

fn encoder_backward(
    p: &ParamList,
    base: usize,
    x: ArrayView2<'_, f64>,
    c: &EncoderCache,
    dh2: &Array2<f64>,
    grads: &mut ParamList,
) {
    let d = p.tensors[base + WQ].shape[0];
    let scale = 1.0 / (d as f64).sqrt();

    let (gl, rest) = grads.tensors.split_at_mut(base + LN2_B);
    let du2 = layer_norm_backward(dh2, &c.ln2, vec1(p, base + LN2_G), gl[base + LN2_G].view1_mut(), rest[0].view1_mut());
    // u2 = h1 + f1 W2 + b2
    add2(grads, base + FF2_W, &c.f1.t().dot(&du2));
    add1(grads, base + FF2_B, &du2.sum_axis(Axis(0)));
    let mut df1 = du2.dot(&mat(p, base + FF2_W).t());
    df1.zip_mut_with(&c.f1, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    add2(grads, base + FF1_W, &c.h1.t().dot(&df1));
    add1(grads, base + FF1_B, &df1.sum_axis(Axis(0)));
    let dh1 = du2 + df1.dot(&mat(p, base + FF1_W).t());

    let (gl, rest) = grads.tensors.split_at_mut(base + LN1_B);
    let du1 = layer_norm_backward(&dh1, &c.ln1, vec1(p, base + LN1_G), gl[base + LN1_G].view1_mut(), rest[0].view1_mut());
    // u1 = e + ctx Wo
    add2(grads, base + WO, &c.ctx.t().dot(&du1));
    let dctx = du1.dot(&mat(p, base + WO).t());
    let dattn = dctx.dot(&c.v.t());
    let dv = c.attn.t().dot(&dctx);
    let mut dscore = Array2::zeros(dattn.raw_dim());
    for r in 0..dattn.nrows() {
        let a = c.attn.row(r);
        let da = dattn.row(r);
        let inner = a.dot(&da);
        dscore.row_mut(r).assign(&(&a * &(&da - inner) * scale));
    }
    let dq = dscore.dot(&c.k);
    let dk = dscore.t().dot(&c.q);
    add2(grads, base + WQ, &c.e.t().dot(&dq));
    add2(grads, base + WK, &c.e.t().dot(&dk));
    add2(grads, base + WV, &c.e.t().dot(&dv));
    let de = du1 + dq.dot(&mat(p, base + WQ).t()) + dk.dot(&mat(p, base + WK).t()) + dv.dot(&mat(p, base + WV).t());
    add2(grads, base + PROJ_W, &x.t().dot(&de));
    add1(grads, base + PROJ_B, &de.sum_axis(Axis(0)));
}

/// Row ranges `(dst, src)` pairing output time `t` with input time `t + k - 1`.
fn conv_ranges(w: usize, k: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    match k {
        0 => (1..w, 0..w - 1),
        1 => (0..w, 0..w),
        _ => (0..w - 1, 1..w),
    }
}

struct Cache {
    raw: EncoderCache,
    feat: EncoderCache,
    z: Array2<f64>,
    y: Array2<f64>,
    pooled: Array1<f64>,
}

fn check_shapes(p: &ParamList, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, pe: &Array2<f64>) -> Result<()> {
    let n = p.tensors[RAW_ENC + PROJ_W].shape[0];
    let k = p.tensors[FEAT_ENC + PROJ_W].shape[0];
    let (w, d) = pe.dim();
    if x.dim() != (w, n) || s.dim() != (w, k) || p.tensors[RAW_ENC + WQ].shape[0] != d {
        return Err(YmirError::Shape(format!(
            "classifier expects windows ({w}, {n}) and ({w}, {k}), got {:?} and {:?}",
            x.dim(),
            s.dim()
        )));
    }
    Ok(())
}

fn forward_cached(p: &ParamList, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, pe: &Array2<f64>) -> Result<(f64, Cache)> {
    check_shapes(p, x, s, pe)?;
    let w = x.nrows();
    let (hr, raw) = encoder_forward(p, RAW_ENC, x, pe);
    let (hf, feat) = encoder_forward(p, FEAT_ENC, s, pe);
    let z = ndarray::concatenate(Axis(1), &[hr.view(), hf.view()]).expect("encoder widths");
    let conv = &p.tensors[CONV_W];
    let mut y = Array2::zeros((w, conv.shape[2]));
    y += &vec1(p, CONV_B);
    for k in 0..KERNEL {
        let (dst, src) = conv_ranges(w, k);
        let contrib = z.slice(s![src, ..]).dot(&conv.slab(k));
        let mut target = y.slice_mut(s![dst, ..]);
        target += &contrib;
    }
    y.mapv_inplace(|v| v.max(0.0));
    let pooled = y.mean_axis(Axis(0)).expect("non-empty window");
    let logit = pooled.dot(&vec1(p, OUT_W)) + p.tensors[OUT_B].data[0];
    if !logit.is_finite() {
        return Err(YmirError::Numeric { epoch: None, msg: "non-finite classifier activation".into() });
    }
    Ok((logit, Cache { raw, feat, z, y, pooled }))
}

fn backward(p: &ParamList, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, cache: &Cache, dlogit: f64, grads: &mut ParamList) {
    let w = x.nrows();
    let d = p.tensors[RAW_ENC + WQ].shape[0];
    add1(grads, OUT_W, &(&cache.pooled * dlogit));
    grads.tensors[OUT_B].data[0] += dlogit;
    let dpooled = &vec1(p, OUT_W) * (dlogit / w as f64);
    let mut dy = Array2::from_shape_fn(cache.y.raw_dim(), |(_, o)| dpooled[o]);
    dy.zip_mut_with(&cache.y, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    add1(grads, CONV_B, &dy.sum_axis(Axis(0)));
    let mut dz = Array2::zeros(cache.z.raw_dim());
    for k in 0..KERNEL {
        let (dst, src) = conv_ranges(w, k);
        let dyk = dy.slice(s![dst, ..]);
        let gk = cache.z.slice(s![src.clone(), ..]).t().dot(&dyk);
        grads.tensors[CONV_W].slab_mut(k).scaled_add(1.0, &gk);
        let back = dyk.dot(&p.tensors[CONV_W].slab(k).t());
        let mut target = dz.slice_mut(s![src, ..]);
        target += &back;
    }
    let dhr = dz.slice(s![.., ..d]).to_owned();
    let dhf = dz.slice(s![.., d..]).to_owned();
    encoder_backward(p, RAW_ENC, x, &cache.raw, &dhr, grads);
    encoder_backward(p, FEAT_ENC, s, &cache.feat, &dhf, grads);
}

/// Logit of one window pair. `x` must already be standardized.
pub fn classifier_forward(p: &ParamList, x: ArrayView2<'_, f64>, s: ArrayView2<'_, f64>, pe: &Array2<f64>) -> Result<f64> {
    forward_cached(p, x, s, pe).map(|r| r.0)
}

/// Cross-entropy of one sample against a soft target, and its gradient.
pub fn classifier_loss_and_gradient(
    p: &ParamList,
    x: ArrayView2<'_, f64>,
    s: ArrayView2<'_, f64>,
    target: f64,
    pe: &Array2<f64>,
) -> Result<(f64, ParamList)> {
    let (logit, cache) = forward_cached(p, x, s, pe)?;
    let mut grads = p.zeros_like();
    backward(p, x, s, &cache, sigmoid(logit) - target, &mut grads);
    Ok((bce_with_logit(logit, target), grads))
}

/// Fitted classifier with everything needed to score new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub hyper: ClassifierHyper,
    pub seed: u64,
    pub metric_names: Vec<String>,
    pub model_ids: Vec<String>,
    pub standardizer: Standardizer,
    pub params: ParamList,
}

impl ClassifierModel {
    pub fn new(hyper: ClassifierHyper, metric_names: Vec<String>, model_ids: Vec<String>, standardizer: Standardizer, seed: u64) -> Self {
        let params = init_classifier_params(&hyper, metric_names.len(), model_ids.len(), seed);
        Self { hyper, seed, metric_names, model_ids, standardizer, params }
    }

    pub fn positional_encoding(&self) -> Array2<f64> {
        positional_encoding(self.hyper.window, self.hyper.d_model)
    }

    /// Probability for one unstandardized raw window and its feature window.
    pub fn predict_window(&self, raw: ArrayView2<'_, f64>, feats: ArrayView2<'_, f64>, pe: &Array2<f64>) -> Result<f64> {
        let x = self.standardizer.apply(raw);
        classifier_forward(&self.params, x.view(), feats, pe).map(sigmoid)
    }

    /// Probabilities of every full window of `raw`/`feats` (`T x n`, `T x k`),
    /// indexed by window start.
    pub fn predict_windows(&self, raw: ArrayView2<'_, f64>, feats: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let w = self.hyper.window;
        if raw.ncols() != self.metric_names.len() || feats.ncols() != self.model_ids.len() || raw.nrows() != feats.nrows() {
            return Err(YmirError::Shape(format!(
                "classifier trained on {} metrics and {} features, got {:?} and {:?}",
                self.metric_names.len(),
                self.model_ids.len(),
                raw.dim(),
                feats.dim()
            )));
        }
        let windows = sliding_windows(raw.nrows(), w, 1)?;
        let pe = self.positional_encoding();
        let z = self.standardizer.apply(raw);
        windows
            .par_iter()
            .map(|win| {
                let r = win.start..win.end();
                classifier_forward(&self.params, z.slice(s![r.clone(), ..]), feats.slice(s![r, ..]), &pe).map(sigmoid)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedClassifier {
    pub model: ClassifierModel,
    pub epoch_loss: Vec<f64>,
}

/// Mini-batch momentum SGD on mean cross-entropy.
///
/// Per-sample gradients are evaluated in parallel and summed in sample
/// order, so results do not depend on the thread count.
pub fn train_classifier(ds: &Dataset, cfg: &TrainConfig, hyper: &ClassifierHyper) -> Result<TrainedClassifier> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(YmirError::Size("empty training dataset".into()));
    }
    if ds.window != hyper.window {
        return Err(YmirError::Shape(format!("dataset window {} differs from classifier window {}", ds.window, hyper.window)));
    }
    let mut model = ClassifierModel::new(*hyper, ds.metric_names.clone(), ds.model_ids.clone(), ds.standardizer.clone(), cfg.seed);
    let pe = model.positional_encoding();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_d0fb_a7c4);
    let mut opt = MomentumSgd::new(cfg.learning_rate, cfg.momentum);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let weights = sample_weights(batch.iter().map(|&i| ds.y[i]), cfg.balance_positives);
            let per_sample: Vec<(f64, ParamList)> = batch
                .par_iter()
                .map(|&i| classifier_loss_and_gradient(&model.params, ds.x[i].view(), ds.s[i].view(), ds.y[i], &pe))
                .collect::<Result<_>>()
                .map_err(|e| with_epoch(e, epoch))?;
            let weight_sum: f64 = weights.iter().sum();
            let mut grad = model.params.zeros_like();
            for ((loss, g), w) in per_sample.iter().zip(&weights) {
                total += loss;
                grad.axpy(w / weight_sum, g);
            }
            opt.step(&mut model.params, &grad);
            if !model.params.all_finite() {
                return Err(YmirError::Numeric { epoch: Some(epoch), msg: "parameters diverged".into() });
            }
        }
        let mean = total / ds.len() as f64;
        if !mean.is_finite() {
            return Err(YmirError::Numeric { epoch: Some(epoch), msg: "non-finite training loss".into() });
        }
        epoch_loss.push(mean);
    }
    Ok(TrainedClassifier { model, epoch_loss })
}

fn with_epoch(e: YmirError, epoch: usize) -> YmirError {
    match e {
        YmirError::Numeric { msg, .. } => YmirError::Numeric { epoch: Some(epoch), msg },
        other => other,
    }
}

/// Positives get weight `negatives / positives` when balancing and both
/// classes are present; everything else weighs 1.
fn sample_weights(targets: impl Iterator<Item = f64>, balance: bool) -> Vec<f64> {
    let ys: Vec<f64> = targets.collect();
    let pos = ys.iter().filter(|&&y| y > 0.5).count();
    let neg = ys.len() - pos;
    let pos_weight = if balance && pos > 0 && neg > 0 { neg as f64 / pos as f64 } else { 1.0 };
    ys.iter().map(|&y| if y > 0.5 { pos_weight } else { 1.0 }).collect()
}

/// Per-timestamp probabilities; positions without a full centered window
/// take the nearest computed probability.
pub fn predict_series(model: &ClassifierModel, ts: &TimeSeriesSet, features: &FeatureMatrix) -> Result<Vec<f64>> {
    if features.len() != ts.len() {
        return Err(YmirError::Shape(format!("{} feature rows for {} series rows", features.len(), ts.len())));
    }
    let probs = model.predict_windows(ts.values(), features.values.view())?;
    let half = model.hyper.window / 2;
    Ok((0..ts.len())
        .map(|t| probs[t.saturating_sub(half).min(probs.len() - 1)])
        .collect())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Incremental detection over a growing series.
//!
//! Rows are scored once enough forward context has arrived and emitted in
//! order. Every score depends only on a bounded neighbourhood of its row, so
//! the output does not depend on how the input is split into batches.

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;

use super::{csv_float, FittedModel};
use crate::detectors::{Context, DetectorRegistry, Segment};
use crate::ensemble::{aggregate_row, EsdTable};
use crate::error::{Result, YmirError};

/// Buffered rows are dropped in chunks of at least this many.
const TRIM_CHUNK: usize = 1024;

/// One fully scored timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct EmittedRow {
    pub index: usize,
    pub timestamp: i64,
    /// Normalized per-model scores in model order.
    pub features: Vec<f64>,
    pub aggregate: f64,
    pub classifier: Option<f64>,
    pub flag: bool,
}

impl EmittedRow {
    pub fn to_csv_line(&self) -> String {
        let mut line = self.timestamp.to_string();
        for &f in &self.features {
            line.push(',');
            line.push_str(&csv_float(f));
        }
        line.push(',');
        line.push_str(&csv_float(self.aggregate));
        line.push(',');
        if let Some(p) = self.classifier {
            line.push_str(&csv_float(p));
        }
        line.push_str(if self.flag { ",1\n" } else { ",0\n" });
        line
    }
}

/// Rolling detection state bound to a fitted model.
pub struct StreamContext<'m> {
    model: &'m FittedModel,
    registry: &'m DetectorRegistry,
    n_metrics: usize,
    n_models: usize,
    det: Context,
    cls_back: usize,
    cls_fwd: usize,
    esd_window: usize,
    q: Vec<f64>,
    q_sum: f64,
    esd: EsdTable,
    pe: Option<ndarray::Array2<f64>>,
    step: Option<i64>,
    last_ts: Option<i64>,

    // rows [raw_base, n_seen)
    raw_base: usize,
    timestamps: Vec<i64>,
    raw: Vec<f64>,
    // rows [feat_base, next_feature)
    feat_base: usize,
    features: Vec<f64>,
    aggregates: Vec<f64>,
    flags: Vec<bool>,
    // centres [prob_base, next_center)
    prob_base: usize,
    probs: Vec<f64>,

    n_seen: usize,
    next_feature: usize,
    next_center: usize,
    next_emit: usize,
    finished: bool,
}

impl<'m> StreamContext<'m> {
    pub fn new(model: &'m FittedModel, registry: &'m DetectorRegistry) -> Result<Self> {
        let mut det = Context::POINTWISE;
        for state in &model.states {
            det = det.union(state.context(registry)?);
        }
        let q = model.weights.canonical()?;
        if q.len() != model.states.len() || model.normalizer.len() != model.states.len() {
            return Err(YmirError::Manifest("weights, normalizer and detectors differ in length".into()));
        }
        let (cls_back, cls_fwd) = match &model.classifier {
            Some(c) => {
                let w = c.hyper.window;
                (w / 2, w - 1 - w / 2)
            }
            None => (0, 0),
        };
        Ok(Self {
            model,
            registry,
            n_metrics: model.metric_names.len(),
            n_models: model.states.len(),
            det,
            cls_back,
            cls_fwd,
            esd_window: model.config.esd_window,
            q_sum: q.iter().sum(),
            q,
            esd: EsdTable::new(model.config.esd_alpha, model.config.esd_r_max_fraction),
            pe: model.classifier.as_ref().map(|c| c.positional_encoding()),
            step: model.step,
            last_ts: None,
            raw_base: 0,
            timestamps: Vec::new(),
            raw: Vec::new(),
            feat_base: 0,
            features: Vec::new(),
            aggregates: Vec::new(),
            flags: Vec::new(),
            prob_base: cls_back,
            probs: Vec::new(),
            n_seen: 0,
            next_feature: 0,
            next_center: cls_back,
            next_emit: 0,
            finished: false,
        })
    }

    /// Rows that must be buffered before the first row can be emitted.
    pub fn w_max(&self) -> usize {
        self.det.back + self.cls_back.max(self.esd_window - 1) + self.det.forward + self.cls_fwd + 1
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }

    /// Appends rows and returns every row that became final. A rejected
    /// batch leaves the context unchanged.
    pub fn append(&mut self, timestamps: &[i64], values: ArrayView2<'_, f64>) -> Result<Vec<EmittedRow>> {
        if self.finished {
            return Err(YmirError::Stream("append after finish".into()));
        }
        if values.nrows() != timestamps.len() || values.ncols() != self.n_metrics {
            return Err(YmirError::Shape(format!(
                "batch is {:?}, expected {} rows of {} metrics",
                values.dim(),
                timestamps.len(),
                self.n_metrics
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(YmirError::Data("non-finite value in stream batch; impute before streaming".into()));
        }
        let step = self.check_timestamps(timestamps)?;
        if timestamps.is_empty() {
            return Ok(Vec::new());
        }
        self.step = step;
        self.last_ts = timestamps.last().copied();
        self.timestamps.extend_from_slice(timestamps);
        self.raw.extend(values.rows().into_iter().flat_map(|r| r.to_vec()));
        self.n_seen += timestamps.len();
        self.process(false)
    }

    /// Flushes every remaining row using whatever context is available.
    pub fn finish(&mut self) -> Result<Vec<EmittedRow>> {
        if self.finished {
            return Err(YmirError::Stream("finish called twice".into()));
        }
        if self.n_seen == 0 {
            self.finished = true;
            return Ok(Vec::new());
        }
        if let Some(c) = &self.model.classifier {
            if self.n_seen < c.hyper.window {
                return Err(YmirError::Size(format!(
                    "{} rows seen, classifier window is {}",
                    self.n_seen, c.hyper.window
                )));
            }
        }
        let out = self.process(true)?;
        self.finished = true;
        Ok(out)
    }

    /// Validates spacing against the previous batch; returns the step.
    fn check_timestamps(&self, ts: &[i64]) -> Result<Option<i64>> {
        let mut step = self.step;
        let mut prev = self.last_ts;
        for &t in ts {
            if let Some(p) = prev {
                let d = t - p;
                match step {
                    Some(s) if d != s => {
                        return Err(YmirError::Stream(format!(
                            "timestamp {t} after {p}: expected step {s}, got {d}"
                        )))
                    }
                    None if d <= 0 => {
                        return Err(YmirError::Stream(format!("timestamp {t} does not follow {p}")))
                    }
                    None => step = Some(d),
                    _ => {}
                }
            }
            prev = Some(t);
        }
        Ok(step)
    }

    fn raw_rows(&self, start: usize, end: usize) -> ArrayView2<'_, f64> {
        let (a, b) = ((start - self.raw_base) * self.n_metrics, (end - self.raw_base) * self.n_metrics);
        ArrayView2::from_shape((end - start, self.n_metrics), &self.raw[a..b]).expect("raw buffer is row-major")
    }

    fn feature_rows(&self, start: usize, end: usize) -> ArrayView2<'_, f64> {
        let (a, b) = ((start - self.feat_base) * self.n_models, (end - self.feat_base) * self.n_models);
        ArrayView2::from_shape((end - start, self.n_models), &self.features[a..b]).expect("feature buffer is row-major")
    }

    fn process(&mut self, last: bool) -> Result<Vec<EmittedRow>> {
        if !last && self.n_seen < self.w_max() {
            return Ok(Vec::new());
        }
        let ready = if last { self.n_seen } else { self.n_seen.saturating_sub(self.det.forward) };
        if ready > self.next_feature {
            self.score_features(ready)?;
        }
        if self.model.classifier.is_some() {
            let end = self.next_feature.saturating_sub(self.cls_fwd);
            if end > self.next_center {
                self.score_centres(end)?;
            }
        }
        let out = self.emit(last);
        self.trim();
        Ok(out)
    }

    fn score_features(&mut self, ready: usize) -> Result<()> {
        let start = self.next_feature.saturating_sub(self.det.back);
        let ts = &self.timestamps[start - self.raw_base..self.n_seen - self.raw_base];
        let seg = Segment::new(ts, self.raw_rows(start, self.n_seen));
        let range = self.next_feature - start..ready - start;
        let registry = self.registry;
        let columns: Vec<Vec<f64>> = self
            .model
            .states
            .par_iter()
            .map(|s| s.score_range(&seg, range.clone(), registry))
            .collect::<Result<_>>()?;
        for (r, i) in (self.next_feature..ready).enumerate() {
            let row: Vec<f64> =
                columns.iter().enumerate().map(|(j, col)| self.model.normalizer.normalize_value(j, col[r])).collect();
            let agg = aggregate_row(ArrayView1::from(&row), &self.q, self.q_sum);
            self.features.extend_from_slice(&row);
            self.aggregates.push(agg);
            let lo = (i + 1).saturating_sub(self.esd_window).max(self.feat_base);
            let flag = self.esd.flags_last(&self.aggregates[lo - self.feat_base..]);
            self.flags.push(flag);
        }
        self.next_feature = ready;
        Ok(())
    }

    fn score_centres(&mut self, end: usize) -> Result<()> {
        let model = self.model.classifier.as_ref().expect("classifier present");
        let pe = self.pe.as_ref().expect("encoding built with classifier");
        let w = model.hyper.window;
        let probs: Vec<f64> = (self.next_center..end)
            .into_par_iter()
            .map(|c| {
                let s = c - self.cls_back;
                model.predict_window(self.raw_rows(s, s + w), self.feature_rows(s, s + w), pe)
            })
            .collect::<Result<_>>()?;
        self.probs.extend(probs);
        self.next_center = end;
        Ok(())
    }

    fn emit(&mut self, last: bool) -> Vec<EmittedRow> {
        let mut out = Vec::new();
        while self.next_emit < self.next_feature {
            let t = self.next_emit;
            let classifier = if self.model.classifier.is_some() {
                let mut c = t.max(self.cls_back);
                if last {
                    c = c.min(self.next_center - 1);
                } else if c >= self.next_center {
                    break;
                }
                Some(self.probs[c - self.prob_base])
            } else {
                None
            };
            let f = t - self.feat_base;
            out.push(EmittedRow {
                index: t,
                timestamp: self.timestamps[t - self.raw_base],
                features: self.features[f * self.n_models..(f + 1) * self.n_models].to_vec(),
                aggregate: self.aggregates[f],
                classifier,
                flag: self.flags[f],
            });
            self.next_emit += 1;
        }
        out
    }

    /// Drops buffered rows that no future computation reads.
    fn trim(&mut self) {
        let mut raw_keep = self.next_feature.saturating_sub(self.det.back).min(self.next_emit);
        let mut feat_keep = (self.next_feature + 1).saturating_sub(self.esd_window).min(self.next_emit);
        if self.model.classifier.is_some() {
            let win_start = self.next_center - self.cls_back;
            raw_keep = raw_keep.min(win_start);
            feat_keep = feat_keep.min(win_start);
            // the last centre stays: finish() reuses it for the tail rows
            let prob_keep = self.next_emit.max(self.cls_back).min(self.next_center.saturating_sub(1));
            if prob_keep >= self.prob_base + TRIM_CHUNK {
                self.probs.drain(..prob_keep - self.prob_base);
                self.prob_base = prob_keep;
            }
        }
        if raw_keep >= self.raw_base + TRIM_CHUNK {
            let d = raw_keep - self.raw_base;
            self.timestamps.drain(..d);
            self.raw.drain(..d * self.n_metrics);
            self.raw_base = raw_keep;
        }
        if feat_keep >= self.feat_base + TRIM_CHUNK {
            let d = feat_keep - self.feat_base;
            self.features.drain(..d * self.n_models);
            self.aggregates.drain(..d);
            self.flags.drain(..d);
            self.feat_base = feat_keep;
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end training, persistence, detection and evaluation.
//!
//! Training fits every detector, the normalizer and (with labels) the
//! classifier; the result is a frozen [`FittedModel`]. Detection always runs
//! through a [`StreamContext`]: offline detection is a single append
//! followed by [`StreamContext::finish`], so streamed and offline outputs
//! agree byte for byte.

mod stream;
pub mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use stream::{EmittedRow, StreamContext};
pub use synth::{generate_synthetic, EventCategory, SynthData, SynthEvent, SynthProfile};

use crate::detectors::{fit_detector, score_detector, DetectorKind, DetectorRegistry, DetectorSpec, DetectorState};
use crate::ensemble::{detect_unsupervised, fit_normalizer, EnsembleWeights, FeatureMatrix, Normalizer, UnsupervisedResult};
use crate::error::{Result, YmirError};
use crate::evaluation::{best_range_f1, EvalReport, MetricParams};
use crate::series::{format_float, read_labels_for, LabelSeries, TimeSeriesSet};
use crate::supervised::{
    build_dataset, fuse_labels, make_pseudo_labels, smooth_targets, train_classifier, ClassifierHyper,
    ClassifierModel, FusedLabels, Standardizer, TrainConfig,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything that shapes a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Empty means [`default_detectors`].
    pub detectors: Vec<DetectorSpec>,
    /// One weight per detector; `None` uses each spec's weight hint or 1.
    pub weights: Option<Vec<f64>>,
    pub esd_alpha: f64,
    pub esd_r_max_fraction: f64,
    /// Trailing window of the per-timestamp ESD flag.
    pub esd_window: usize,
    /// Seasonal period handed to the default seasonal detectors.
    pub period: usize,
    pub classifier: ClassifierHyper,
    /// `train.th` is the pseudo-label confidence threshold. `train.seed` is
    /// replaced by `seed`.
    pub train: TrainConfig,
    pub seed: u64,
    pub unsupervised_only: bool,
    pub paths: Paths,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detectors: Vec::new(),
            weights: None,
            esd_alpha: 0.05,
            esd_r_max_fraction: 0.02,
            esd_window: 256,
            period: 288,
            classifier: ClassifierHyper::default(),
            train: TrainConfig::default(),
            seed: 0,
            unsupervised_only: false,
            paths: Paths::default(),
        }
    }
}

/// One detector of each built-in kind plus a period-long moving average.
pub fn default_detectors(period: usize) -> Vec<DetectorSpec> {
    let p = period as f64;
    let mut long = DetectorSpec::new(DetectorKind::MovingAverage).with_param("window", p);
    long.id = Some("moving_average_long".into());
    vec![
        DetectorSpec::new(DetectorKind::Mediff).with_param("period", p),
        DetectorSpec::new(DetectorKind::Shesd).with_param("period", p),
        DetectorSpec::new(DetectorKind::MovingAverage).with_param("window", 20.0),
        long,
        DetectorSpec::new(DetectorKind::Chebyshev),
        DetectorSpec::new(DetectorKind::SpectralResidual),
        DetectorSpec::new(DetectorKind::VaeRecon),
        DetectorSpec::new(DetectorKind::IsolationForest),
        DetectorSpec::new(DetectorKind::Lof),
    ]
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| YmirError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| YmirError::Config(format!("{}: {e}", path.display())))
    }

    pub fn resolved_detectors(&self) -> Vec<DetectorSpec> {
        if self.detectors.is_empty() {
            default_detectors(self.period)
        } else {
            self.detectors.clone()
        }
    }

    pub fn resolved_weights(&self) -> Result<EnsembleWeights> {
        let specs = self.resolved_detectors();
        let w = match &self.weights {
            Some(w) if w.len() != specs.len() => {
                return Err(YmirError::Config(format!("{} weights for {} detectors", w.len(), specs.len())))
            }
            Some(w) => w.clone(),
            None => specs.iter().map(|s| s.weight_hint.unwrap_or(1.0)).collect(),
        };
        EnsembleWeights::new(w)
    }

    pub fn validate(&self, registry: &DetectorRegistry) -> Result<()> {
        let specs = self.resolved_detectors();
        let mut ids = BTreeSet::new();
        for spec in &specs {
            if let DetectorKind::UserDefined(name) = &spec.kind {
                registry.get(name)?;
            }
            if !ids.insert(spec.model_id()) {
                return Err(YmirError::Config(format!("duplicate model id {:?}", spec.model_id())));
            }
        }
        self.resolved_weights()?;
        if !(self.esd_alpha > 0.0 && self.esd_alpha < 1.0) {
            return Err(YmirError::Config("esd_alpha must be in (0, 1)".into()));
        }
        if !(self.esd_r_max_fraction > 0.0 && self.esd_r_max_fraction <= 1.0) {
            return Err(YmirError::Config("esd_r_max_fraction must be in (0, 1]".into()));
        }
        if self.esd_window < 3 {
            return Err(YmirError::Config("esd_window must be at least 3".into()));
        }
        let h = &self.classifier;
        if h.window < 2 || h.d_model == 0 || h.channels == 0 {
            return Err(YmirError::Config("classifier window >= 2, d_model and channels >= 1 required".into()));
        }
        self.train.validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    SemiSupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub len: usize,
    pub n_metrics: usize,
    /// SHA-256 of the canonical CSV rendering.
    pub sha256: String,
}

impl Fingerprint {
    pub fn of(ts: &TimeSeriesSet) -> Self {
        let digest = Sha256::digest(ts.to_csv_string().as_bytes());
        let sha256 = digest.iter().map(|b| format!("{b:02x}")).collect();
        Self { len: ts.len(), n_metrics: ts.n_metrics(), sha256 }
    }
}

/// The unsupervised half of training, reusable across label settings.
#[derive(Debug, Clone)]
pub struct UnsupervisedStage {
    pub specs: Vec<DetectorSpec>,
    pub model_ids: Vec<String>,
    pub states: Vec<DetectorState>,
    pub normalizer: Normalizer,
    pub weights: EnsembleWeights,
    pub features: FeatureMatrix,
    pub result: UnsupervisedResult,
}

/// A frozen, persistable model.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub config: PipelineConfig,
    pub specs: Vec<DetectorSpec>,
    pub model_ids: Vec<String>,
    pub states: Vec<DetectorState>,
    pub normalizer: Normalizer,
    pub weights: EnsembleWeights,
    pub classifier: Option<ClassifierModel>,
    pub metric_names: Vec<String>,
    pub step: Option<i64>,
    pub mode: Mode,
    pub rho: f64,
    pub fingerprint: Fingerprint,
    pub epoch_loss: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorEntry {
    pub model_id: String,
    pub kind: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub mode: Mode,
    pub rho: f64,
    pub config: PipelineConfig,
    pub metric_names: Vec<String>,
    pub step: Option<i64>,
    pub fingerprint: Fingerprint,
    pub weights: Vec<f64>,
    pub detectors: Vec<DetectorEntry>,
    pub normalizer: String,
    pub classifier: Option<String>,
    pub epoch_loss: Vec<f64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Fits detectors, normalizer and the unsupervised result on `ts`.
pub fn fit_unsupervised(ts: &TimeSeriesSet, config: &PipelineConfig, registry: &DetectorRegistry) -> Result<UnsupervisedStage> {
    config.validate(registry)?;
    if ts.has_missing() {
        return Err(YmirError::Data("training data contains missing values; impute first".into()));
    }
    let specs = config.resolved_detectors();
    let weights = config.resolved_weights()?;
    let fitted: Vec<(DetectorState, crate::detectors::RawScoreSeries)> = specs
        .par_iter()
        .map(|spec| {
            let state = fit_detector(spec, ts, config.seed, registry)?;
            let raw = score_detector(&state, ts, &spec.model_id(), registry)?;
            Ok((state, raw))
        })
        .collect::<Result<_>>()?;
    let (states, raw): (Vec<_>, Vec<_>) = fitted.into_iter().unzip();
    let normalizer = fit_normalizer(&raw)?;
    let features = FeatureMatrix::from_raw(&raw, &normalizer)?;
    let r_max = crate::ensemble::default_r_max(ts.len(), config.esd_r_max_fraction);
    let result = detect_unsupervised(&features, &weights, config.esd_alpha, Some(r_max))?;
    Ok(UnsupervisedStage {
        model_ids: specs.iter().map(DetectorSpec::model_id).collect(),
        specs,
        states,
        normalizer,
        weights,
        features,
        result,
    })
}

/// Pseudo-labels fused with `labels` and smoothed.
pub fn training_targets(stage: &UnsupervisedStage, labels: &LabelSeries, config: &PipelineConfig) -> Result<FusedLabels> {
    let pseudo = make_pseudo_labels(&stage.result, config.train.th, stage.features.len());
    let mut fused = fuse_labels(&pseudo, labels)?;
    fused.targets = smooth_targets(&fused, config.train.epsilon_max)?;
    Ok(fused)
}

/// Completes training from an unsupervised stage. Without labels, or with
/// `unsupervised_only`, no classifier is trained.
pub fn fit_supervised(
    stage: &UnsupervisedStage,
    ts: &TimeSeriesSet,
    labels: Option<&LabelSeries>,
    config: &PipelineConfig,
) -> Result<FittedModel> {
    let mut model = FittedModel {
        config: config.clone(),
        specs: stage.specs.clone(),
        model_ids: stage.model_ids.clone(),
        states: stage.states.clone(),
        normalizer: stage.normalizer.clone(),
        weights: stage.weights.clone(),
        classifier: None,
        metric_names: ts.metric_names().to_vec(),
        step: ts.step(),
        mode: Mode::Unsupervised,
        rho: 0.0,
        fingerprint: Fingerprint::of(ts),
        epoch_loss: Vec::new(),
    };
    let labels = match labels {
        Some(l) if !config.unsupervised_only && l.labeled_count() > 0 => l,
        Some(l) => {
            model.rho = l.coverage();
            return Ok(model);
        }
        None => return Ok(model),
    };
    if labels.timestamps != ts.timestamps() {
        return Err(YmirError::Alignment("labels are not aligned to the training data".into()));
    }
    let fused = training_targets(stage, labels, config)?;
    let ds = build_dataset(ts, &stage.features, &fused.targets, config.classifier.window, &Standardizer::fit(ts))?;
    let trained = train_classifier(&ds, &config.train_config(), &config.classifier)?;
    model.classifier = Some(trained.model);
    model.epoch_loss = trained.epoch_loss;
    model.rho = fused.rho;
    model.mode = if labels.is_fully_labeled() { Mode::Supervised } else { Mode::SemiSupervised };
    Ok(model)
}

pub fn train(
    ts: &TimeSeriesSet,
    labels: Option<&LabelSeries>,
    config: &PipelineConfig,
    registry: &DetectorRegistry,
) -> Result<FittedModel> {
    let stage = fit_unsupervised(ts, config, registry)?;
    fit_supervised(&stage, ts, labels, config)
}

fn file_safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| YmirError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| YmirError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| YmirError::Manifest(format!("{}: {e}", path.display())))
}

impl FittedModel {
    /// Writes the manifest and every fitted artifact under `dir`.
    pub fn save(&self, dir: &Path) -> Result<RunManifest> {
        let det_dir = dir.join("detectors");
        std::fs::create_dir_all(&det_dir).map_err(|e| YmirError::io(&det_dir, e))?;
        let mut detectors = Vec::with_capacity(self.states.len());
        for (i, (state, id)) in self.states.iter().zip(&self.model_ids).enumerate() {
            let file = format!("detectors/{i}_{}.json", file_safe(id));
            write_json(&dir.join(&file), state)?;
            detectors.push(DetectorEntry { model_id: id.clone(), kind: state.kind().to_string(), file });
        }
        write_json(&dir.join("normalizer.json"), &self.normalizer)?;
        let classifier = match &self.classifier {
            Some(c) => {
                write_json(&dir.join("classifier.json"), c)?;
                Some("classifier.json".to_string())
            }
            None => None,
        };
        let manifest = RunManifest {
            version: VERSION.to_string(),
            mode: self.mode,
            rho: self.rho,
            config: self.config.clone(),
            metric_names: self.metric_names.clone(),
            step: self.step,
            fingerprint: self.fingerprint.clone(),
            weights: self.weights.w.clone(),
            detectors,
            normalizer: "normalizer.json".into(),
            classifier,
            epoch_loss: self.epoch_loss.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let states: Vec<DetectorState> =
            manifest.detectors.iter().map(|d| read_json(&dir.join(&d.file))).collect::<Result<_>>()?;
        let normalizer: Normalizer = read_json(&dir.join(&manifest.normalizer))?;
        let classifier: Option<ClassifierModel> = manifest.classifier.as_ref().map(|f| read_json(&dir.join(f))).transpose()?;
        let model_ids: Vec<String> = manifest.detectors.iter().map(|d| d.model_id.clone()).collect();
        if normalizer.model_ids != model_ids {
            return Err(YmirError::Manifest("normalizer models differ from detector list".into()));
        }
        for state in &states {
            if state.train_meta().n_metrics != manifest.metric_names.len() {
                return Err(YmirError::Manifest("detector state metric count differs from manifest".into()));
            }
        }
        if let Some(c) = &classifier {
            if c.metric_names != manifest.metric_names || c.model_ids != model_ids {
                return Err(YmirError::Manifest("classifier inputs differ from manifest".into()));
            }
        }
        Ok(Self {
            specs: manifest.config.resolved_detectors(),
            config: manifest.config,
            model_ids,
            states,
            normalizer,
            weights: EnsembleWeights::new(manifest.weights)?,
            classifier,
            metric_names: manifest.metric_names,
            step: manifest.step,
            mode: manifest.mode,
            rho: manifest.rho,
            fingerprint: manifest.fingerprint,
            epoch_loss: manifest.epoch_loss,
        })
    }

    /// Refuses data whose metrics or spacing differ from training.
    pub fn check_compatible(&self, ts: &TimeSeriesSet) -> Result<()> {
        if ts.metric_names() != self.metric_names.as_slice() {
            return Err(YmirError::Manifest(format!(
                "data metrics {:?} differ from trained metrics {:?}",
                ts.metric_names(),
                self.metric_names
            )));
        }
        if let (Some(a), Some(b)) = (ts.step(), self.step) {
            if a != b {
                return Err(YmirError::Manifest(format!("data step {a} differs from trained step {b}")));
            }
        }
        Ok(())
    }
}

/// Detection output for a whole series.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub model_ids: Vec<String>,
    pub has_classifier: bool,
    pub rows: Vec<EmittedRow>,
}

impl Detection {
    pub fn header(model_ids: &[String]) -> String {
        let mut h = String::from("timestamp");
        for id in model_ids {
            h.push(',');
            h.push_str(id);
        }
        h.push_str(",aggregate,classifier,flag\n");
        h
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = Self::header(&self.model_ids);
        for row in &self.rows {
            out.push_str(&row.to_csv_line());
        }
        out
    }

    pub fn aggregate(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.aggregate).collect()
    }

    pub fn classifier(&self) -> Option<Vec<f64>> {
        self.rows.iter().map(|r| r.classifier).collect()
    }

    /// Flagged row indices with their aggregate scores.
    pub fn result(&self) -> UnsupervisedResult {
        let flagged: Vec<usize> = self.rows.iter().enumerate().filter(|(_, r)| r.flag).map(|(i, _)| i).collect();
        let confidence = flagged.iter().map(|&i| (i, self.rows[i].aggregate)).collect();
        UnsupervisedResult { flagged, confidence, aggregate_scores: self.aggregate() }
    }
}

/// Offline detection: one append of the whole series, then finish.
pub fn detect(model: &FittedModel, ts: &TimeSeriesSet, registry: &DetectorRegistry) -> Result<Detection> {
    detect_batched(model, ts, registry, ts.len().max(1))
}

/// Replays `ts` through a stream context in batches of `batch` rows.
pub fn detect_batched(model: &FittedModel, ts: &TimeSeriesSet, registry: &DetectorRegistry, batch: usize) -> Result<Detection> {
    if batch == 0 {
        return Err(YmirError::Param("batch size must be at least 1".into()));
    }
    model.check_compatible(ts)?;
    let mut ctx = StreamContext::new(model, registry)?;
    let mut rows = Vec::with_capacity(ts.len());
    let mut start = 0;
    while start < ts.len() {
        let end = (start + batch).min(ts.len());
        rows.extend(ctx.append(&ts.timestamps()[start..end], ts.values().slice(ndarray::s![start..end, ..]))?);
        start = end;
    }
    rows.extend(ctx.finish()?);
    Ok(Detection { model_ids: model.model_ids.clone(), has_classifier: model.classifier.is_some(), rows })
}

/// Score column parsed back from a detection CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreColumns {
    pub timestamps: Vec<i64>,
    pub aggregate: Vec<f64>,
    pub classifier: Option<Vec<f64>>,
}

pub fn read_scores_csv(text: &str) -> Result<ScoreColumns> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| YmirError::Structure("empty scores file".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name);
    let (Some(agg_i), Some(cls_i), Some(0)) = (col("aggregate"), col("classifier"), col("timestamp")) else {
        return Err(YmirError::Parse { line: 1, msg: "scores header needs timestamp, aggregate and classifier".into() });
    };
    let mut out = ScoreColumns { timestamps: vec![], aggregate: vec![], classifier: Some(vec![]) };
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let line_no = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(YmirError::Parse { line: line_no, msg: format!("expected {} fields", header.len()) });
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| YmirError::Parse { line: line_no, msg: e.to_string() });
        out.timestamps.push(fields[0].trim().parse().map_err(|e: std::num::ParseIntError| YmirError::Parse { line: line_no, msg: e.to_string() })?);
        out.aggregate.push(num(fields[agg_i])?);
        let cls = fields[cls_i].trim();
        if cls.is_empty() {
            out.classifier = None;
        } else if let Some(c) = out.classifier.as_mut() {
            c.push(num(cls)?);
        }
    }
    Ok(out)
}

/// Best range F1 of the classifier column, or of the aggregate when the
/// scores carry no classifier.
pub fn evaluate_scores(scores_csv: &str, labels_csv: &str) -> Result<EvalReport> {
    let cols = read_scores_csv(scores_csv)?;
    let truth = read_labels_for(labels_csv.as_bytes(), &cols.timestamps)?;
    let scores = cols.classifier.as_ref().unwrap_or(&cols.aggregate);
    best_range_f1(scores, &truth, 100, &MetricParams::default())
}

pub(crate) fn csv_float(v: f64) -> String {
    format_float(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> PipelineConfig {
        PipelineConfig {
            detectors: vec![
                DetectorSpec::new(DetectorKind::MovingAverage).with_param("window", 8.0),
                DetectorSpec::new(DetectorKind::Chebyshev),
                DetectorSpec::new(DetectorKind::Mediff).with_param("period", 24.0).with_param("lags", 2.0),
            ],
            classifier: ClassifierHyper { window: 8, d_model: 4, channels: 3 },
            train: TrainConfig { epochs: 2, ..TrainConfig::default() },
            esd_window: 40,
            ..PipelineConfig::default()
        }
    }

    fn tiny_data() -> SynthData {
        generate_synthetic(&SynthProfile {
            len: 400,
            period: 24,
            n_metrics: 3,
            spikes: 3,
            phase_violations: 1,
            level_shifts: 1,
            decorrelations: 1,
            restarts: 2,
            seed: 3,
            ..SynthProfile::default()
        })
        .unwrap()
    }

    #[test]
    fn default_set_has_nine_unique_models() {
        let cfg = PipelineConfig::default();
        cfg.validate(&DetectorRegistry::default()).unwrap();
        assert_eq!(cfg.resolved_detectors().len(), 9);
    }

    #[test]
    fn config_round_trips_and_rejects_duplicates() {
        let cfg = tiny_config();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<PipelineConfig>(&json).unwrap(), cfg);
        let mut dup = cfg.clone();
        dup.detectors.push(DetectorSpec::new(DetectorKind::Chebyshev));
        assert!(matches!(dup.validate(&DetectorRegistry::default()), Err(YmirError::Config(_))));
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.esd_alpha, 0.05);
    }

    #[test]
    fn modes_follow_label_coverage() {
        let d = tiny_data();
        let reg = DetectorRegistry::default();
        let cfg = tiny_config();
        let stage = fit_unsupervised(&d.data, &cfg, &reg).unwrap();
        let none = fit_supervised(&stage, &d.data, None, &cfg).unwrap();
        assert_eq!((none.mode, none.classifier.is_none()), (Mode::Unsupervised, true));
        let full = fit_supervised(&stage, &d.data, Some(&d.labels), &cfg).unwrap();
        assert_eq!((full.mode, full.rho), (Mode::Supervised, 1.0));
        let mut sparse = d.labels.clone();
        for t in 0..sparse.len() {
            sparse.mask[t] = t % 10 == 0;
        }
        let semi = fit_supervised(&stage, &d.data, Some(&sparse), &cfg).unwrap();
        assert_eq!(semi.mode, Mode::SemiSupervised);
        assert!((semi.rho - 0.1).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trip_and_manifest_safety() {
        let d = tiny_data();
        let reg = DetectorRegistry::default();
        let model = train(&d.data, Some(&d.labels), &tiny_config(), &reg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = model.save(dir.path()).unwrap();
        assert_eq!(manifest.detectors.len(), 3);
        let back = FittedModel::load(dir.path()).unwrap();
        assert_eq!(back, model);

        let renamed = TimeSeriesSet::new(
            d.data.timestamps().to_vec(),
            d.data.values().to_owned(),
            vec!["x".into(), "y".into(), "z".into()],
        )
        .unwrap();
        assert!(matches!(detect(&back, &renamed, &reg), Err(YmirError::Manifest(_))));
    }

    #[test]
    fn stream_matches_offline_for_any_batching() {
        let d = tiny_data();
        let reg = DetectorRegistry::default();
        let model = train(&d.data, Some(&d.labels), &tiny_config(), &reg).unwrap();
        let offline = detect(&model, &d.data, &reg).unwrap();
        assert_eq!(offline.rows.len(), d.data.len());
        let csv = offline.to_csv_string();
        for batch in [1, 7, 100] {
            assert_eq!(detect_batched(&model, &d.data, &reg, batch).unwrap().to_csv_string(), csv, "batch {batch}");
        }
        // classifier column equals whole-series prediction
        let features = stage_features(&model, &d.data, &reg);
        let probs = crate::supervised::predict_series(model.classifier.as_ref().unwrap(), &d.data, &features).unwrap();
        assert_eq!(offline.classifier().unwrap(), probs);
    }

    fn stage_features(model: &FittedModel, ts: &TimeSeriesSet, reg: &DetectorRegistry) -> FeatureMatrix {
        let raw: Vec<_> = model
            .states
            .iter()
            .zip(&model.model_ids)
            .map(|(s, id)| score_detector(s, ts, id, reg).unwrap())
            .collect();
        FeatureMatrix::from_raw(&raw, &model.normalizer).unwrap()
    }

    #[test]
    fn scores_csv_evaluates() {
        let d = tiny_data();
        let reg = DetectorRegistry::default();
        let model = train(&d.data, None, &tiny_config(), &reg).unwrap();
        let det = detect(&model, &d.data, &reg).unwrap();
        let csv = det.to_csv_string();
        assert!(csv.starts_with("timestamp,moving_average,chebyshev,mediff,aggregate,classifier,flag\n"));
        let cols = read_scores_csv(&csv).unwrap();
        assert!(cols.classifier.is_none());
        assert_eq!(cols.aggregate, det.aggregate());
        let a = evaluate_scores(&csv, &d.labels.to_csv_string()).unwrap();
        assert_eq!(a, evaluate_scores(&csv, &d.labels.to_csv_string()).unwrap());
        assert!((0.0..=1.0).contains(&a.best_f1));

        let mut perfect = Detection::header(&[]);
        for (t, l) in d.labels.timestamps.iter().zip(&d.labels.labels) {
            perfect.push_str(&format!("{t},{l},,0\n"));
        }
        assert_eq!(evaluate_scores(&perfect, &d.labels.to_csv_string()).unwrap().best_f1, 1.0);
        let sparse = "timestamp,label\n".to_string() + &format!("{},1\n", d.labels.timestamps[3]);
        assert!(matches!(evaluate_scores(&perfect, &sparse), Err(YmirError::Contract(_))));
    }
}

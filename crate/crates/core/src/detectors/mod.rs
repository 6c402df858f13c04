// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unsupervised representation models.
//!
//! Every detector is fitted on a training segment and then emits one
//! nonnegative raw score per timestamp. Univariate detectors score each
//! metric separately and keep the pointwise maximum, so an anomaly in any
//! metric surfaces; spatial and reconstruction detectors look at the
//! n-dimensional rows directly.
//!
//! Scoring works on a [`Segment`] plus a target index range. A score at
//! position `i` depends only on rows `i - back ..= i + forward` of the
//! segment (see [`Context`]), with natural truncation at the segment edges.
//! Streaming detection relies on this to reproduce offline scores exactly.

mod chebyshev;
mod iforest;
mod lof;
mod mediff;
mod moving_average;
mod registry;
mod shesd;
mod spectral;
mod vae;

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;

pub use chebyshev::{chebyshev_tail_score, ChebyshevState};
pub use iforest::{average_path_length, IsolationForestState, IsolationTree, IsoNode};
pub use lof::LofState;
pub use mediff::MediffState;
pub use moving_average::{moving_average_scores, MovingAverageState};
pub use registry::{DetectorRegistry, UserDetector, UserFitFn, UserScoreFn};
pub use shesd::ShesdState;
pub use spectral::{spectral_residual_scores, SpectralResidualState};
pub use vae::{init_vae_params, kl_divergence, vae_loss_and_gradient, VaeConfig, VaeState};

/// Guard added to denominators throughout the detectors.
pub const EPS: f64 = 1e-8;

/// The detector families.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DetectorKind {
    Mediff,
    Shesd,
    MovingAverage,
    Chebyshev,
    SpectralResidual,
    VaeRecon,
    IsolationForest,
    Lof,
    UserDefined(String),
}

impl DetectorKind {
    /// The eight built-in kinds in canonical order.
    pub const BUILTIN: [DetectorKind; 8] = [
        DetectorKind::Mediff,
        DetectorKind::Shesd,
        DetectorKind::MovingAverage,
        DetectorKind::Chebyshev,
        DetectorKind::SpectralResidual,
        DetectorKind::VaeRecon,
        DetectorKind::IsolationForest,
        DetectorKind::Lof,
    ];

    pub fn as_str(&self) -> &str {
        match self {
            DetectorKind::Mediff => "mediff",
            DetectorKind::Shesd => "shesd",
            DetectorKind::MovingAverage => "moving_average",
            DetectorKind::Chebyshev => "chebyshev",
            DetectorKind::SpectralResidual => "spectral_residual",
            DetectorKind::VaeRecon => "vae_recon",
            DetectorKind::IsolationForest => "isolation_forest",
            DetectorKind::Lof => "lof",
            DetectorKind::UserDefined(_) => "user_defined",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectorKind::UserDefined(name) => write!(f, "user_defined:{name}"),
            other => f.write_str(other.as_str()),
        }
    }
}

impl FromStr for DetectorKind {
    type Err = YmirError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(name) = s.strip_prefix("user_defined:") {
            if name.is_empty() {
                return Err(YmirError::Registry("empty user detector name".into()));
            }
            return Ok(DetectorKind::UserDefined(name.to_string()));
        }
        DetectorKind::BUILTIN
            .iter()
            .find(|k| k.as_str() == s)
            .cloned()
            .ok_or_else(|| YmirError::Registry(format!("unknown detector kind {s:?}")))
    }
}

impl Serialize for DetectorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DetectorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Number(f64),
    Text(String),
}

pub type Params = BTreeMap<String, ParamValue>;

/// One requested model: its kind plus named parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    #[serde(default)]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_hint: Option<f64>,
    /// Column name in feature exports; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl DetectorSpec {
    pub fn new(kind: DetectorKind) -> Self {
        Self { kind, params: Params::new(), weight_hint: None, id: None }
    }

    pub fn with_param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), ParamValue::Number(value));
        self
    }

    pub fn model_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| self.kind.to_string())
    }
}

/// Typed access to a spec's parameters with unknown-key checking.
pub(crate) struct ParamReader<'a> {
    kind: &'a DetectorKind,
    params: &'a Params,
}

impl<'a> ParamReader<'a> {
    pub(crate) fn new(kind: &'a DetectorKind, params: &'a Params, allowed: &[&str]) -> Result<Self> {
        if let Some(key) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(YmirError::Param(format!("{kind}: unknown parameter {key:?}")));
        }
        Ok(Self { kind, params })
    }

    pub(crate) fn f64(&self, name: &str, default: Option<f64>) -> Result<f64> {
        match self.params.get(name) {
            Some(ParamValue::Number(v)) if v.is_finite() => Ok(*v),
            Some(_) => Err(YmirError::Param(format!("{}: {name} must be a number", self.kind))),
            None => default
                .ok_or_else(|| YmirError::Param(format!("{}: missing parameter {name}", self.kind))),
        }
    }

    pub(crate) fn usize(&self, name: &str, default: Option<usize>) -> Result<usize> {
        let v = self.f64(name, default.map(|d| d as f64))?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(YmirError::Param(format!(
                "{}: {name} must be a nonnegative integer, got {v}",
                self.kind
            )));
        }
        Ok(v as usize)
    }
}

/// Rows of context a detector needs around a scored position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Context {
    pub back: usize,
    pub forward: usize,
}

impl Context {
    pub const POINTWISE: Context = Context { back: 0, forward: 0 };

    pub fn union(self, other: Context) -> Context {
        Context { back: self.back.max(other.back), forward: self.forward.max(other.forward) }
    }
}

/// A contiguous run of rows to score.
#[derive(Debug, Clone, Copy)]
pub struct Segment<'a> {
    pub timestamps: &'a [i64],
    pub values: ArrayView2<'a, f64>,
}

impl<'a> Segment<'a> {
    pub fn new(timestamps: &'a [i64], values: ArrayView2<'a, f64>) -> Self {
        debug_assert_eq!(timestamps.len(), values.nrows());
        Self { timestamps, values }
    }

    pub fn from_set(ts: &'a TimeSeriesSet) -> Self {
        Self::new(ts.timestamps(), ts.values())
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_metrics(&self) -> usize {
        self.values.ncols()
    }

    pub(crate) fn column_vec(&self, j: usize) -> Vec<f64> {
        self.values.column(j).to_vec()
    }
}

/// Training-segment shape recorded with every fitted state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub len: usize,
    pub n_metrics: usize,
}

impl TrainMeta {
    fn of(train: &TimeSeriesSet) -> Self {
        Self { len: train.len(), n_metrics: train.n_metrics() }
    }
}

/// State of a fitted user-defined detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserState {
    pub name: String,
    pub state: serde_json::Value,
    pub meta: TrainMeta,
}

/// A fitted detector. Immutable once built; serializes to one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorState {
    Mediff(MediffState),
    Shesd(ShesdState),
    MovingAverage(MovingAverageState),
    Chebyshev(ChebyshevState),
    SpectralResidual(SpectralResidualState),
    VaeRecon(VaeState),
    IsolationForest(IsolationForestState),
    Lof(LofState),
    UserDefined(UserState),
}

impl DetectorState {
    pub fn kind(&self) -> DetectorKind {
        match self {
            DetectorState::Mediff(_) => DetectorKind::Mediff,
            DetectorState::Shesd(_) => DetectorKind::Shesd,
            DetectorState::MovingAverage(_) => DetectorKind::MovingAverage,
            DetectorState::Chebyshev(_) => DetectorKind::Chebyshev,
            DetectorState::SpectralResidual(_) => DetectorKind::SpectralResidual,
            DetectorState::VaeRecon(_) => DetectorKind::VaeRecon,
            DetectorState::IsolationForest(_) => DetectorKind::IsolationForest,
            DetectorState::Lof(_) => DetectorKind::Lof,
            DetectorState::UserDefined(u) => DetectorKind::UserDefined(u.name.clone()),
        }
    }

    pub fn train_meta(&self) -> TrainMeta {
        match self {
            DetectorState::Mediff(s) => s.meta,
            DetectorState::Shesd(s) => s.meta,
            DetectorState::MovingAverage(s) => s.meta,
            DetectorState::Chebyshev(s) => s.meta,
            DetectorState::SpectralResidual(s) => s.meta,
            DetectorState::VaeRecon(s) => s.meta,
            DetectorState::IsolationForest(s) => s.meta,
            DetectorState::Lof(s) => s.meta,
            DetectorState::UserDefined(s) => s.meta,
        }
    }

    pub fn context(&self, registry: &DetectorRegistry) -> Result<Context> {
        Ok(match self {
            DetectorState::Mediff(s) => s.context(),
            DetectorState::Shesd(_) => Context::POINTWISE,
            DetectorState::MovingAverage(s) => s.context(),
            DetectorState::Chebyshev(_) => Context::POINTWISE,
            DetectorState::SpectralResidual(s) => s.context(),
            DetectorState::VaeRecon(s) => s.context(),
            DetectorState::IsolationForest(_) => Context::POINTWISE,
            DetectorState::Lof(_) => Context::POINTWISE,
            DetectorState::UserDefined(s) => registry.get(&s.name)?.context,
        })
    }

    /// Minimum segment length the scorer accepts.
    pub fn min_segment(&self) -> usize {
        match self {
            DetectorState::SpectralResidual(s) => s.window,
            DetectorState::VaeRecon(s) => s.config.window,
            _ => 1,
        }
    }

    /// Scores positions `range` of `seg`.
    pub fn score_range(
        &self,
        seg: &Segment<'_>,
        range: Range<usize>,
        registry: &DetectorRegistry,
    ) -> Result<Vec<f64>> {
        let meta = self.train_meta();
        if seg.n_metrics() != meta.n_metrics {
            return Err(YmirError::Shape(format!(
                "{}: fitted on {} metrics, scoring {}",
                self.kind(),
                meta.n_metrics,
                seg.n_metrics()
            )));
        }
        if range.end > seg.len() || range.start > range.end {
            return Err(YmirError::Size(format!(
                "score range {range:?} outside segment of length {}",
                seg.len()
            )));
        }
        if range.is_empty() {
            return Ok(Vec::new());
        }
        let scores = match self {
            DetectorState::Mediff(s) => s.score_range(seg, range.clone()),
            DetectorState::Shesd(s) => s.score_range(seg, range.clone()),
            DetectorState::MovingAverage(s) => s.score_range(seg, range.clone()),
            DetectorState::Chebyshev(s) => s.score_range(seg, range.clone()),
            DetectorState::SpectralResidual(s) => s.score_range(seg, range.clone())?,
            DetectorState::VaeRecon(s) => s.score_range(seg, range.clone())?,
            DetectorState::IsolationForest(s) => s.score_range(seg, range.clone()),
            DetectorState::Lof(s) => s.score_range(seg, range.clone()),
            DetectorState::UserDefined(s) => {
                let user = registry.get(&s.name)?;
                (user.score)(&s.state, seg, range.clone())?
            }
        };
        if scores.len() != range.len() {
            return Err(YmirError::Contract(format!(
                "{} returned {} scores for {} positions",
                self.kind(),
                scores.len(),
                range.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(YmirError::Contract(format!(
                "{} produced score {bad}; scores must be finite and nonnegative",
                self.kind()
            )));
        }
        Ok(scores)
    }
}

/// A detector's raw (unnormalized) score series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawScoreSeries {
    pub model_id: String,
    pub scores: Vec<f64>,
}

/// Fits one detector on `train`. `seed` drives the stochastic kinds unless
/// the detector spec carries its own `seed` parameter.
pub fn fit_detector(
    spec: &DetectorSpec,
    train: &TimeSeriesSet,
    seed: u64,
    registry: &DetectorRegistry,
) -> Result<DetectorState> {
    if train.has_missing() {
        return Err(YmirError::Data("training data contains missing values; impute first".into()));
    }
    let kind = &spec.kind;
    let p = &spec.params;
    Ok(match kind {
        DetectorKind::Mediff => DetectorState::Mediff(MediffState::fit(
            &ParamReader::new(kind, p, &["period", "lags"])?,
            train,
        )?),
        DetectorKind::Shesd => {
            DetectorState::Shesd(ShesdState::fit(&ParamReader::new(kind, p, &["period"])?, train)?)
        }
        DetectorKind::MovingAverage => DetectorState::MovingAverage(MovingAverageState::fit(
            &ParamReader::new(kind, p, &["window"])?,
            train,
        )?),
        DetectorKind::Chebyshev => {
            ParamReader::new(kind, p, &[])?;
            DetectorState::Chebyshev(ChebyshevState::fit(train)?)
        }
        DetectorKind::SpectralResidual => DetectorState::SpectralResidual(
            SpectralResidualState::fit(&ParamReader::new(kind, p, &["window", "filter"])?, train)?,
        ),
        DetectorKind::VaeRecon => DetectorState::VaeRecon(VaeState::fit(
            &ParamReader::new(
                kind,
                p,
                &["window", "hidden", "latent", "epochs", "learning_rate", "batch", "seed"],
            )?,
            train,
            seed,
        )?),
        DetectorKind::IsolationForest => DetectorState::IsolationForest(IsolationForestState::fit(
            &ParamReader::new(kind, p, &["trees", "subsample", "seed"])?,
            train,
            seed,
        )?),
        DetectorKind::Lof => {
            DetectorState::Lof(LofState::fit(&ParamReader::new(kind, p, &["k_neighbors"])?, train)?)
        }
        DetectorKind::UserDefined(name) => {
            let user = registry.get(name)?;
            let state = (user.fit)(train, p)?;
            DetectorState::UserDefined(UserState {
                name: name.clone(),
                state,
                meta: TrainMeta::of(train),
            })
        }
    })
}

/// Scores every timestamp of `ts`.
pub fn score_detector(
    state: &DetectorState,
    ts: &TimeSeriesSet,
    model_id: &str,
    registry: &DetectorRegistry,
) -> Result<RawScoreSeries> {
    if ts.n_metrics() != state.train_meta().n_metrics {
        return Err(YmirError::Shape(format!(
            "{}: fitted on {} metrics, scoring {}",
            state.kind(),
            state.train_meta().n_metrics,
            ts.n_metrics()
        )));
    }
    let seg = Segment::from_set(ts);
    let scores = state.score_range(&seg, 0..seg.len(), registry)?;
    Ok(RawScoreSeries { model_id: model_id.to_string(), scores })
}

/// Pointwise maximum of a per-metric scorer over all metrics.
pub(crate) fn max_over_metrics<F>(seg: &Segment<'_>, range: Range<usize>, mut per_metric: F) -> Vec<f64>
where
    F: FnMut(usize, &[f64], Range<usize>) -> Vec<f64>,
{
    let mut out = vec![0.0f64; range.len()];
    for j in 0..seg.n_metrics() {
        let col = seg.column_vec(j);
        let scores = per_metric(j, &col, range.clone());
        for (o, s) in out.iter_mut().zip(scores) {
            if s > *o {
                *o = s;
            }
        }
    }
    out
}

pub(crate) fn fit_error_min(kind: &DetectorKind, min: usize, got: usize) -> YmirError {
    YmirError::Fit(format!("{kind} needs at least {min} training points, got {got}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn series(cols: &[Vec<f64>]) -> TimeSeriesSet {
        let t = cols[0].len();
        let values = Array2::from_shape_fn((t, cols.len()), |(i, j)| cols[j][i]);
        TimeSeriesSet::new(
            (0..t as i64).map(|i| i * 60).collect(),
            values,
            (0..cols.len()).map(|j| format!("m{j}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn kind_round_trip() {
        for kind in DetectorKind::BUILTIN {
            assert_eq!(kind.to_string().parse::<DetectorKind>().unwrap(), kind);
        }
        let user: DetectorKind = "user_defined:threshold".parse().unwrap();
        assert_eq!(user, DetectorKind::UserDefined("threshold".into()));
        assert!(matches!("nope".parse::<DetectorKind>(), Err(YmirError::Registry(_))));
    }

    #[test]
    fn spec_json_shape() {
        let spec = DetectorSpec::new(DetectorKind::MovingAverage).with_param("window", 10.0);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(json, r#"{"kind":"moving_average","params":{"window":10.0}}"#);
        let back: DetectorSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn unknown_param_rejected() {
        let ts = series(&[vec![1.0, 2.0, 3.0]]);
        let spec = DetectorSpec::new(DetectorKind::Chebyshev).with_param("window", 3.0);
        let err = fit_detector(&spec, &ts, 0, &DetectorRegistry::default()).unwrap_err();
        assert!(matches!(err, YmirError::Param(_)));
    }

    #[test]
    fn univariate_scores_combine_by_max() {
        // Chebyshev with mean 0 / deviation 1 per metric: values chosen so the
        // per-metric scores at t = 1 are 0 and 0.96 (z = 5)
        let train = series(&[vec![-1.0, 1.0, -1.0, 1.0], vec![-1.0, 1.0, -1.0, 1.0]]);
        let state = fit_detector(
            &DetectorSpec::new(DetectorKind::Chebyshev),
            &train,
            0,
            &DetectorRegistry::default(),
        )
        .unwrap();
        let test = series(&[vec![0.0, 0.5], vec![0.0, 5.0]]);
        let raw = score_detector(&state, &test, "chebyshev", &DetectorRegistry::default()).unwrap();
        assert_eq!(raw.scores.len(), 2);
        assert_eq!(raw.scores[0], 0.0);
        assert!((raw.scores[1] - 0.96).abs() < 1e-12);
    }

    #[test]
    fn metric_count_mismatch_is_shape_error() {
        let train = series(&[vec![1.0, 2.0, 3.0]]);
        let state = fit_detector(
            &DetectorSpec::new(DetectorKind::Chebyshev),
            &train,
            0,
            &DetectorRegistry::default(),
        )
        .unwrap();
        let test = series(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let err = score_detector(&state, &test, "c", &DetectorRegistry::default()).unwrap_err();
        assert!(matches!(err, YmirError::Shape(_)));
    }
}

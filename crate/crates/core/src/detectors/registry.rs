// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::Arc;

use super::{Context, Params, Segment};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;

/// Fits a user detector and returns its JSON-serializable state.
pub type UserFitFn = Arc<dyn Fn(&TimeSeriesSet, &Params) -> Result<serde_json::Value> + Send + Sync>;

/// Scores positions `range` of a segment from a user state.
pub type UserScoreFn =
    Arc<dyn Fn(&serde_json::Value, &Segment<'_>, Range<usize>) -> Result<Vec<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct UserDetector {
    pub fit: UserFitFn,
    pub score: UserScoreFn,
    pub context: Context,
}

impl fmt::Debug for UserDetector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserDetector").field("context", &self.context).finish_non_exhaustive()
    }
}

/// User-registered detector functions, addressed as `user_defined:<name>`.
#[derive(Debug, Clone, Default)]
pub struct DetectorRegistry {
    user: BTreeMap<String, UserDetector>,
}

impl DetectorRegistry {
    /// Registers a pointwise detector.
    pub fn register<F, S>(&mut self, name: &str, fit: F, score: S) -> Result<()>
    where
        F: Fn(&TimeSeriesSet, &Params) -> Result<serde_json::Value> + Send + Sync + 'static,
        S: Fn(&serde_json::Value, &Segment<'_>, Range<usize>) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        self.register_with_context(name, Context::POINTWISE, fit, score)
    }

    /// Registers a detector whose score at `i` reads rows `i - back ..= i + forward`.
    pub fn register_with_context<F, S>(&mut self, name: &str, context: Context, fit: F, score: S) -> Result<()>
    where
        F: Fn(&TimeSeriesSet, &Params) -> Result<serde_json::Value> + Send + Sync + 'static,
        S: Fn(&serde_json::Value, &Segment<'_>, Range<usize>) -> Result<Vec<f64>> + Send + Sync + 'static,
    {
        if name.is_empty() || name.contains(':') {
            return Err(YmirError::Registry(format!("invalid detector name {name:?}")));
        }
        if self.user.contains_key(name) {
            return Err(YmirError::Registry(format!("detector {name:?} already registered")));
        }
        self.user.insert(
            name.to_string(),
            UserDetector { fit: Arc::new(fit), score: Arc::new(score), context },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&UserDetector> {
        self.user
            .get(name)
            .ok_or_else(|| YmirError::Registry(format!("no user detector named {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.user.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.user.keys().map(String::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{fit_detector, score_detector, DetectorKind, DetectorSpec};
    use ndarray::array;

    fn threshold_registry(offset: f64) -> DetectorRegistry {
        let mut reg = DetectorRegistry::default();
        reg.register(
            "threshold_gt_100",
            |_, _| Ok(serde_json::json!({"limit": 100.0})),
            move |state, seg, range| {
                let limit = state["limit"].as_f64().unwrap();
                Ok(range
                    .map(|t| {
                        let peak = seg.values.row(t).iter().cloned().fold(f64::MIN, f64::max);
                        (peak - limit).max(0.0) + offset
                    })
                    .collect())
            },
        )
        .unwrap();
        reg
    }

    fn data() -> TimeSeriesSet {
        TimeSeriesSet::new(vec![0, 60, 120], array![[90.0], [130.0], [100.0]], vec!["cpu".into()]).unwrap()
    }

    #[test]
    fn user_detector_end_to_end() {
        let reg = threshold_registry(0.0);
        let spec = DetectorSpec::new(DetectorKind::UserDefined("threshold_gt_100".into()));
        let state = fit_detector(&spec, &data(), 0, &reg).unwrap();
        let raw = score_detector(&state, &data(), &spec.model_id(), &reg).unwrap();
        assert_eq!(raw.scores, vec![0.0, 30.0, 0.0]);
        assert_eq!(raw.model_id, "user_defined:threshold_gt_100");
        // state survives a JSON round trip
        let json = serde_json::to_string(&state).unwrap();
        assert_eq!(serde_json::from_str::<super::super::DetectorState>(&json).unwrap(), state);
    }

    #[test]
    fn duplicate_registration_rejected() {
        let mut reg = threshold_registry(0.0);
        let err = reg.register("threshold_gt_100", |_, _| Ok(serde_json::Value::Null), |_, _, r| Ok(vec![0.0; r.len()]));
        assert!(matches!(err, Err(YmirError::Registry(_))));
    }

    #[test]
    fn negative_user_score_is_contract_error() {
        let reg = threshold_registry(-1.0);
        let spec = DetectorSpec::new(DetectorKind::UserDefined("threshold_gt_100".into()));
        let state = fit_detector(&spec, &data(), 0, &reg).unwrap();
        let err = score_detector(&state, &data(), "u", &reg).unwrap_err();
        assert!(matches!(err, YmirError::Contract(_)));
    }

    #[test]
    fn unregistered_name_is_registry_error() {
        let spec = DetectorSpec::new(DetectorKind::UserDefined("missing".into()));
        let err = fit_detector(&spec, &data(), 0, &DetectorRegistry::default()).unwrap_err();
        assert!(matches!(err, YmirError::Registry(_)));
    }
}

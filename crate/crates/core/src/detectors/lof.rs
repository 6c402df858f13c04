// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ParamReader, Segment, TrainMeta};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;
use crate::stats;

/// Floor on mean reachability distance; keeps densities finite for duplicates.
const DIST_FLOOR: f64 = 1e-12;

/// Local outlier factor against the (standardized) training rows.
///
/// The emitted score is `max(LOF - 1, 0)` so inliers sit near zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LofState {
    pub k_neighbors: usize,
    pub means: Vec<f64>,
    pub deviations: Vec<f64>,
    /// Standardized reference rows, row-major.
    pub reference: Vec<f64>,
    pub k_distance: Vec<f64>,
    pub lrd: Vec<f64>,
    pub meta: TrainMeta,
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// k-distance and neighbourhood (ties included) from a distance list.
fn neighbourhood(dist: &[(usize, f64)], k: usize) -> (f64, Vec<usize>) {
    let mut d: Vec<f64> = dist.iter().map(|p| p.1).collect();
    let (_, kd, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
    let kd = *kd;
    let nbrs = dist.iter().filter(|p| p.1 <= kd).map(|p| p.0).collect();
    (kd, nbrs)
}

impl LofState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet) -> Result<Self> {
        let k = params.usize("k_neighbors", Some(20))?;
        if k == 0 {
            return Err(YmirError::Param("lof: k_neighbors must be >= 1".into()));
        }
        if k >= train.len() {
            return Err(YmirError::Param(format!(
                "lof: k_neighbors {k} needs at least {} training points, got {}",
                k + 1,
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
        let mut state = LofState {
            k_neighbors: k,
            means,
            deviations,
            reference: Vec::with_capacity(train.len() * n),
            k_distance: Vec::new(),
            lrd: Vec::new(),
            meta: TrainMeta::of(train),
        };
        for row in train.values().rows() {
            let z = state.standardize(row.iter().copied());
            state.reference.extend(z);
        }
        state.fit_reference();
        Ok(state)
    }

    fn standardize(&self, row: impl Iterator<Item = f64>) -> Vec<f64> {
        row.zip(self.means.iter().zip(&self.deviations)).map(|(x, (m, s))| (x - m) / s).collect()
    }

    fn n_ref(&self) -> usize {
        self.reference.len() / self.means.len()
    }

    fn ref_row(&self, i: usize) -> &[f64] {
        let n = self.means.len();
        &self.reference[i * n..(i + 1) * n]
    }

    fn fit_reference(&mut self) {
        let n_ref = self.n_ref();
        let k = self.k_neighbors;
        let hoods: Vec<(f64, Vec<(usize, f64)>)> = (0..n_ref)
            .into_par_iter()
            .map(|i| {
                let p = self.ref_row(i);
                let dist: Vec<(usize, f64)> =
                    (0..n_ref).filter(|&j| j != i).map(|j| (j, distance(p, self.ref_row(j)))).collect();
                let (kd, nbrs) = neighbourhood(&dist, k);
                let with_d = nbrs.into_iter().map(|j| (j, distance(p, self.ref_row(j)))).collect();
                (kd, with_d)
            })
            .collect();
        self.k_distance = hoods.iter().map(|h| h.0).collect();
        self.lrd = hoods
            .iter()
            .map(|(_, nbrs)| {
                let reach: f64 = nbrs.iter().map(|&(o, d)| self.k_distance[o].max(d)).sum::<f64>() / nbrs.len() as f64;
                1.0 / reach.max(DIST_FLOOR)
            })
            .collect();
    }

    /// Raw local outlier factor of a point given in original units.
    pub fn local_outlier_factor(&self, row: impl Iterator<Item = f64>) -> f64 {
        let q = self.standardize(row);
        let dist: Vec<(usize, f64)> = (0..self.n_ref()).map(|j| (j, distance(&q, self.ref_row(j)))).collect();
        let (_, nbrs) = neighbourhood(&dist, self.k_neighbors);
        let reach: f64 =
            nbrs.iter().map(|&o| self.k_distance[o].max(dist[o].1)).sum::<f64>() / nbrs.len() as f64;
        let lrd_q = 1.0 / reach.max(DIST_FLOOR);
        let mean_lrd = nbrs.iter().map(|&o| self.lrd[o]).sum::<f64>() / nbrs.len() as f64;
        mean_lrd / lrd_q
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Vec<f64> {
        range
            .into_par_iter()
            .map(|t| (self.local_outlier_factor(seg.values.row(t).iter().copied()) - 1.0).max(0.0))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::{fit_detector, score_detector, DetectorKind, DetectorRegistry, DetectorSpec, DetectorState};
    use ndarray::Array2;

    fn line(xs: &[f64]) -> TimeSeriesSet {
        TimeSeriesSet::new(
            (0..xs.len() as i64).collect(),
            Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap(),
            vec!["x".into()],
        )
        .unwrap()
    }

    /// Textbook LOF by brute force on 1-D z-scored coordinates.
    fn oracle_lof(raw: &[f64], q: f64, k: usize) -> f64 {
        let m = raw.iter().sum::<f64>() / raw.len() as f64;
        let sd = (raw.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / raw.len() as f64).sqrt();
        let train: Vec<f64> = raw.iter().map(|x| (x - m) / sd).collect();
        let q = (q - m) / sd;
        let kdist_of = |p: f64, skip: Option<usize>| -> (f64, Vec<usize>) {
            let mut d: Vec<(usize, f64)> = train
                .iter()
                .enumerate()
                .filter(|(j, _)| Some(*j) != skip)
                .map(|(j, &x)| (j, (x - p).abs()))
                .collect();
            d.sort_by(|a, b| a.1.total_cmp(&b.1));
            let kd = d[k - 1].1;
            (kd, d.iter().filter(|e| e.1 <= kd).map(|e| e.0).collect())
        };
        let lrd_of = |p: f64, skip: Option<usize>| -> f64 {
            let (_, nb) = kdist_of(p, skip);
            let r: f64 = nb.iter().map(|&o| kdist_of(train[o], Some(o)).0.max((train[o] - p).abs())).sum();
            nb.len() as f64 / r
        };
        let (_, nb) = kdist_of(q, None);
        let own = lrd_of(q, None);
        nb.iter().map(|&o| lrd_of(train[o], Some(o))).sum::<f64>() / nb.len() as f64 / own
    }

    #[test]
    fn lattice_interior_and_far_point() {
        let lattice: Vec<f64> = (0..100).map(f64::from).collect();
        let reg = DetectorRegistry::default();
        let state = fit_detector(&DetectorSpec::new(DetectorKind::Lof), &line(&lattice), 0, &reg).unwrap();
        let DetectorState::Lof(lof) = &state else { unreachable!() };

        for q in [50.0, 50.5] {
            let expected = oracle_lof(&lattice, q, 20);
            let got = lof.local_outlier_factor(std::iter::once(q));
            assert!((got - expected).abs() < 1e-6, "q={q}: {got} vs {expected}");
            assert!((got - 1.0).abs() < 0.05);
        }
        let far = lof.local_outlier_factor(std::iter::once(400.0));
        let expected = oracle_lof(&lattice, 400.0, 20);
        assert!((far - expected).abs() / expected < 1e-9);

        let s = score_detector(&state, &line(&[50.0, 400.0]), "lof", &reg).unwrap().scores;
        assert!(s[0] < 0.05);
        assert!(s[1] > 1.0);
    }

    #[test]
    fn duplicates_stay_finite() {
        let reg = DetectorRegistry::default();
        let spec = DetectorSpec::new(DetectorKind::Lof).with_param("k_neighbors", 3.0);
        let state = fit_detector(&spec, &line(&[1.0; 10]), 0, &reg).unwrap();
        let s = score_detector(&state, &line(&[1.0, 2.0]), "lof", &reg).unwrap().scores;
        assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn k_at_least_train_size_rejected() {
        let reg = DetectorRegistry::default();
        let spec = DetectorSpec::new(DetectorKind::Lof).with_param("k_neighbors", 5.0);
        let err = fit_detector(&spec, &line(&[1.0, 2.0, 3.0, 4.0, 5.0]), 0, &reg).unwrap_err();
        assert!(matches!(err, YmirError::Param(_)));
    }
}

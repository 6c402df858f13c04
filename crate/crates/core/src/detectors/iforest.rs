// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use ndarray::ArrayView1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ParamReader, Segment, TrainMeta};
use crate::error::{Result, YmirError};
use crate::series::TimeSeriesSet;
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IsoNode {
    Split { attr: usize, value: f64, left: usize, right: usize },
    Leaf { size: usize },
}

/// One isolation tree stored as a flat node list rooted at index 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationTree {
    pub nodes: Vec<IsoNode>,
}

impl IsolationTree {
    fn grow(data: &ndarray::ArrayView2<'_, f64>, sample: Vec<usize>, max_depth: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = IsolationTree { nodes: Vec::new() };
        tree.grow_node(data, sample, 0, max_depth, rng);
        tree
    }

    fn grow_node(
        &mut self,
        data: &ndarray::ArrayView2<'_, f64>,
        idx: Vec<usize>,
        depth: usize,
        max_depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let me = self.nodes.len();
        self.nodes.push(IsoNode::Leaf { size: idx.len() });
        if depth >= max_depth || idx.len() <= 1 {
            return me;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..data.ncols())
            .filter_map(|a| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = data[[i, a]];
                    (lo.min(v), hi.max(v))
                });
                (hi > lo).then_some((a, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return me;
        }
        let (attr, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let value = rng.random_range(lo..hi);
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| data[[i, attr]] < value);
        let left = self.grow_node(data, left_idx, depth + 1, max_depth, rng);
        let right = self.grow_node(data, right_idx, depth + 1, max_depth, rng);
        self.nodes[me] = IsoNode::Split { attr, value, left, right };
        me
    }

    /// Path length of `x`, with the average-path credit for the leaf size.
    pub fn path_length(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut node = 0;
        let mut depth = 0usize;
        loop {
            match &self.nodes[node] {
                IsoNode::Leaf { size } => return depth as f64 + average_path_length(*size),
                IsoNode::Split { attr, value, left, right } => {
                    node = if x[*attr] < *value { *left } else { *right };
                    depth += 1;
                }
            }
        }
    }
}

/// Average path length of an unsuccessful BST search over `m` points:
/// `c(m) = 2 H(m-1) - 2 (m-1) / m`, with `c(0) = c(1) = 0`.
pub fn average_path_length(m: usize) -> f64 {
    if m <= 1 {
        return 0.0;
    }
    let m1 = (m - 1) as f64;
    2.0 * stats::harmonic(m - 1) - 2.0 * m1 / m as f64
}

/// Isolation forest over the n-dimensional rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsolationForestState {
    pub subsample: usize,
    pub trees: Vec<IsolationTree>,
    pub meta: TrainMeta,
}

impl IsolationForestState {
    pub(crate) fn fit(params: &ParamReader<'_>, train: &TimeSeriesSet, seed: u64) -> Result<Self> {
        let n_trees = params.usize("trees", Some(100))?;
        let psi = params.usize("subsample", Some(256.min(train.len())))?;
        let seed = params.usize("seed", Some(seed as usize))? as u64;
        if psi < 2 {
            return Err(YmirError::Param(format!("isolation_forest: subsample must be >= 2, got {psi}")));
        }
        if n_trees == 0 {
            return Err(YmirError::Param("isolation_forest: trees must be >= 1".into()));
        }
        if psi > train.len() {
            return Err(super::fit_error_min(&super::DetectorKind::IsolationForest, psi, train.len()));
        }
        Ok(Self::build(train.values(), n_trees, psi, seed, TrainMeta::of(train)))
    }

    pub(crate) fn build(
        data: ndarray::ArrayView2<'_, f64>,
        n_trees: usize,
        psi: usize,
        seed: u64,
        meta: TrainMeta,
    ) -> Self {
        let max_depth = (psi as f64).log2().ceil() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..n_trees)
            .map(|_| {
                let mut sample = rand::seq::index::sample(&mut rng, data.nrows(), psi).into_vec();
                sample.sort_unstable();
                IsolationTree::grow(&data, sample, max_depth, &mut rng)
            })
            .collect();
        Self { subsample: psi, trees, meta }
    }

    pub fn score_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mean_path = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean_path / average_path_length(self.subsample))
    }

    pub(crate) fn score_range(&self, seg: &Segment<'_>, range: Range<usize>) -> Vec<f64> {
        range.map(|t| self.score_point(seg.values.row(t))).collect()
    }
}

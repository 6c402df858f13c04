// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded synthetic multivariate series with labeled injections.
//!
//! The base signal is a per-metric seasonal pattern plus AR(1) noise, mixed
//! across metrics by a fixed matrix. Spikes, phase violations, level shifts
//! and decorrelations are labeled anomalous. Restarts (every metric drops to
//! near zero for a few points) are labeled normal and reported separately.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, YmirError};
use crate::series::{LabelSeries, TimeSeriesSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthProfile {
    pub len: usize,
    pub n_metrics: usize,
    pub period: usize,
    pub step: i64,
    pub start: i64,
    pub spikes: usize,
    pub phase_violations: usize,
    pub level_shifts: usize,
    pub decorrelations: usize,
    pub restarts: usize,
    /// AR(1) coefficient of the latent noise.
    pub noise_ar: f64,
    /// Innovation deviation of the latent noise.
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            len: 5000,
            n_metrics: 6,
            period: 288,
            step: 300,
            start: 1_600_000_000,
            spikes: 12,
            phase_violations: 8,
            level_shifts: 10,
            decorrelations: 10,
            restarts: 10,
            noise_ar: 0.7,
            noise_sd: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventCategory {
    Spike,
    PhaseViolation,
    LevelShift,
    Decorrelation,
    Restart,
}

impl EventCategory {
    pub fn label(self) -> u8 {
        u8::from(self != EventCategory::Restart)
    }

    /// Inclusive length range of one injection.
    fn length_range(self) -> (usize, usize) {
        match self {
            EventCategory::Spike => (1, 3),
            EventCategory::PhaseViolation => (12, 36),
            EventCategory::LevelShift => (24, 72),
            EventCategory::Decorrelation => (24, 60),
            EventCategory::Restart => (3, 10),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEvent {
    pub category: EventCategory,
    /// Inclusive row range.
    pub start: usize,
    pub end: usize,
    pub start_timestamp: i64,
    pub end_timestamp: i64,
    pub metrics: Vec<usize>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub data: TimeSeriesSet,
    pub labels: LabelSeries,
    pub events: Vec<SynthEvent>,
}

#[derive(Serialize)]
struct EventsDoc<'a> {
    profile: &'a SynthProfile,
    counts: BTreeMap<EventCategory, usize>,
    events: &'a [SynthEvent],
}

const LEVEL: f64 = 50.0;
const SCALE: f64 = 10.0;
/// Free rows kept between injections.
const GAP: usize = 10;
const MAX_ATTEMPTS: usize = 100;

impl SynthData {
    pub fn events_json(&self, profile: &SynthProfile) -> Result<String> {
        let mut counts = BTreeMap::new();
        for e in &self.events {
            *counts.entry(e.category).or_insert(0) += 1;
        }
        Ok(serde_json::to_string_pretty(&EventsDoc { profile, counts, events: &self.events })?)
    }

    /// Writes `data.csv`, `labels.csv` and `events.json` into `dir`.
    pub fn write_dir(&self, dir: &Path, profile: &SynthProfile) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| YmirError::io(dir, e))?;
        let write = |name: &str, body: String| {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| YmirError::io(&path, e))
        };
        write("data.csv", self.data.to_csv_string())?;
        write("labels.csv", self.labels.to_csv_string())?;
        write("events.json", self.events_json(profile)?)
    }
}

fn validate(p: &SynthProfile) -> Result<()> {
    if p.n_metrics == 0 || p.period < 4 || p.step <= 0 {
        return Err(YmirError::Param("synth: n_metrics >= 1, period >= 4 and step > 0 required".into()));
    }
    if p.len < 2 * p.period {
        return Err(YmirError::Param(format!("synth: len must be at least two periods ({})", 2 * p.period)));
    }
    if !(0.0..1.0).contains(&p.noise_ar) || !(p.noise_sd >= 0.0) {
        return Err(YmirError::Param("synth: noise_ar in [0, 1) and noise_sd >= 0 required".into()));
    }
    Ok(())
}

/// Base signal before injections, `len x n`.
fn base_signal(p: &SynthProfile, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = p.n_metrics;
    let mixing = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { rng.random_range(-0.4..0.4) });
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let harmonic: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let amp: Vec<f64> = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
    let innovation = Normal::new(0.0, p.noise_sd).expect("noise_sd validated");
    let mut ar = vec![0.0; n];
    let mut latent = Array2::zeros((p.len, n));
    for t in 0..p.len {
        let angle = 2.0 * PI * t as f64 / p.period as f64;
        for j in 0..n {
            ar[j] = p.noise_ar * ar[j] + innovation.sample(rng);
            latent[[t, j]] = amp[j] * (angle + phase[j]).sin() + 0.3 * (2.0 * angle + harmonic[j]).sin() + ar[j];
        }
    }
    latent.dot(&mixing.t()) * SCALE + LEVEL
}

fn place(
    taken: &[(usize, usize)],
    category: EventCategory,
    len: usize,
    margin: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize)> {
    let (lo, hi) = category.length_range();
    for _ in 0..MAX_ATTEMPTS {
        let length = rng.random_range(lo..=hi);
        if len <= 2 * margin + length {
            continue;
        }
        let start = rng.random_range(margin..len - margin - length);
        let end = start + length - 1;
        if taken.iter().all(|&(a, b)| end + GAP < a || b + GAP < start) {
            return Ok((start, end));
        }
    }
    Err(YmirError::Param(format!(
        "synth: could not place a {category:?} event without overlap after {MAX_ATTEMPTS} attempts"
    )))
}

fn pick_metrics(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let count = rng.random_range(1..=max.clamp(1, n));
    let mut m = sample(rng, n, count).into_vec();
    m.sort_unstable();
    m
}

pub fn generate_synthetic(p: &SynthProfile) -> Result<SynthData> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let base = base_signal(p, &mut rng);
    let mut values = base.clone();
    let n = p.n_metrics;
    let half = p.period / 2;

    let plan = [
        (EventCategory::Spike, p.spikes),
        (EventCategory::PhaseViolation, p.phase_violations),
        (EventCategory::LevelShift, p.level_shifts),
        (EventCategory::Decorrelation, p.decorrelations),
        (EventCategory::Restart, p.restarts),
    ];
    let mut taken = Vec::new();
    let mut events = Vec::new();
    for (category, count) in plan {
        for _ in 0..count {
            let (start, end) = place(&taken, category, p.len, GAP, &mut rng)?;
            taken.push((start, end));
            let metrics = match category {
                EventCategory::Spike => pick_metrics(n, 2, &mut rng),
                EventCategory::PhaseViolation => pick_metrics(n, n.div_ceil(2), &mut rng),
                EventCategory::LevelShift => pick_metrics(n, 3, &mut rng),
                EventCategory::Decorrelation => pick_metrics(n, 1, &mut rng),
                EventCategory::Restart => (0..n).collect(),
            };
            match category {
                EventCategory::Spike => {
                    for &j in &metrics {
                        let size = rng.random_range(8.0..15.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        for t in start..=end {
                            values[[t, j]] += size;
                        }
                    }
                }
                EventCategory::PhaseViolation => {
                    for &j in &metrics {
                        for t in start..=end {
                            let src = if t + half < p.len { t + half } else { t - half };
                            values[[t, j]] = base[[src, j]];
                        }
                    }
                }
                EventCategory::LevelShift => {
                    for &j in &metrics {
                        let size = rng.random_range(6.0..12.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                        for t in start..=end {
                            values[[t, j]] += size;
                        }
                    }
                }
                EventCategory::Decorrelation => {
                    for &j in &metrics {
                        for t in start..=end {
                            values[[t, j]] = 2.0 * LEVEL - base[[t, j]];
                        }
                    }
                }
                EventCategory::Restart => {
                    for t in start..=end {
                        for j in 0..n {
                            values[[t, j]] = rng.random_range(0.0..0.5);
                        }
                    }
                }
            }
            events.push(SynthEvent {
                category,
                start,
                end,
                start_timestamp: p.start + start as i64 * p.step,
                end_timestamp: p.start + end as i64 * p.step,
                metrics,
                label: category.label(),
            });
        }
    }
    events.sort_by_key(|e| e.start);

    let timestamps: Vec<i64> = (0..p.len as i64).map(|i| p.start + i * p.step).collect();
    let mut labels = vec![0u8; p.len];
    for e in &events {
        labels[e.start..=e.end].iter_mut().for_each(|l| *l = e.label);
    }
    let names = (0..n).map(|j| format!("metric_{j}")).collect();
    Ok(SynthData {
        labels: LabelSeries::full(&timestamps, labels)?,
        data: TimeSeriesSet::new(timestamps, values, names)?,
        events,
    })
}

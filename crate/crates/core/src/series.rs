// SPDX-License-Identifier: MIT OR Apache-2.0

//! Aligned multivariate series, user labels, CSV I/O and windowing.

use std::collections::{HashMap, HashSet};
use std::io::Read;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Result, YmirError};

/// `n` metrics sampled on a shared, uniformly spaced grid of `T` epochs.
///
/// Values are stored `T x n`. Cells may hold `NaN` until [`impute_missing`]
/// has been applied; every other invariant is checked on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSet {
    timestamps: Vec<i64>,
    values: Array2<f64>,
    metric_names: Vec<String>,
}

impl TimeSeriesSet {
    pub fn new(timestamps: Vec<i64>, values: Array2<f64>, metric_names: Vec<String>) -> Result<Self> {
        let t = timestamps.len();
        if t == 0 {
            return Err(YmirError::Structure("time series set is empty".into()));
        }
        if values.nrows() != t || values.ncols() != metric_names.len() {
            return Err(YmirError::Structure(format!(
                "values are {}x{}, expected {}x{}",
                values.nrows(),
                values.ncols(),
                t,
                metric_names.len()
            )));
        }
        if metric_names.is_empty() {
            return Err(YmirError::Structure("no metric columns".into()));
        }
        let mut seen = HashSet::new();
        for name in &metric_names {
            if name.is_empty() {
                return Err(YmirError::Structure("empty metric name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(YmirError::Structure(format!("duplicate metric name {name:?}")));
            }
        }
        check_spacing(&timestamps)?;
        if values.iter().any(|v| v.is_infinite()) {
            return Err(YmirError::Data("infinite value in series".into()));
        }
        Ok(Self { timestamps, values, metric_names })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_metrics(&self) -> usize {
        self.metric_names.len()
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn metric_names(&self) -> &[String] {
        &self.metric_names
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.column(j)
    }

    /// Sampling interval in seconds, `None` for a single-row set.
    pub fn step(&self) -> Option<i64> {
        (self.timestamps.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Rows `start..end` as a new set.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(YmirError::Size(format!(
                "slice {start}..{end} out of range for length {}",
                self.len()
            )));
        }
        Self::new(
            self.timestamps[start..end].to_vec(),
            self.values.slice(ndarray::s![start..end, ..]).to_owned(),
            self.metric_names.clone(),
        )
    }

    /// Serializes as `timestamp,<m1>,...` with shortest round-trip float formatting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.n_metrics() + 1) * 12);
        out.push_str("timestamp");
        for name in &self.metric_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (ts, row) in self.timestamps.iter().zip(self.values.axis_iter(Axis(0))) {
            out.push_str(&ts.to_string());
            for v in row {
                out.push(',');
                out.push_str(&format_float(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| YmirError::io(path, e))
    }
}

/// Float formatting shared by every CSV writer: shortest representation that
/// parses back to the same bits.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

fn check_spacing(timestamps: &[i64]) -> Result<()> {
    if timestamps.len() < 2 {
        return Ok(());
    }
    let step = timestamps[1] - timestamps[0];
    if step <= 0 {
        return Err(YmirError::Structure("timestamps are not strictly increasing".into()));
    }
    for pair in timestamps.windows(2) {
        let d = pair[1] - pair[0];
        if d <= 0 {
            return Err(YmirError::Structure("timestamps are not strictly increasing".into()));
        }
        if d != step {
            return Err(YmirError::Structure(format!(
                "non-uniform spacing: expected {step}s, found {d}s after {}",
                pair[0]
            )));
        }
    }
    Ok(())
}

fn parse_cell(cell: &str, line: usize) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(f64::NAN);
    }
    let v: f64 = cell.parse().map_err(|_| YmirError::Parse {
        line,
        msg: format!("invalid number {cell:?}"),
    })?;
    if v.is_infinite() {
        return Err(YmirError::Parse { line, msg: "infinite value".into() });
    }
    Ok(v)
}

fn parse_timestamp(cell: &str, line: usize) -> Result<i64> {
    cell.trim().parse().map_err(|_| YmirError::Parse {
        line,
        msg: format!("invalid timestamp {cell:?}"),
    })
}

fn csv_reader<R: Read>(rdr: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(rdr)
}

/// Parses a data CSV (`timestamp,<m1>,...,<mn>`) from any reader.
pub fn read_timeseries_csv<R: Read>(rdr: R) -> Result<TimeSeriesSet> {
    let mut reader = csv_reader(rdr);
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(YmirError::Structure("empty file".into())),
        Some(rec) => rec.map_err(|e| YmirError::Parse { line: 1, msg: e.to_string() })?,
    };
    let fields: Vec<&str> = header.iter().map(str::trim).collect();
    if fields.first() != Some(&"timestamp") {
        return Err(YmirError::Parse {
            line: 1,
            msg: "header must start with `timestamp`".into(),
        });
    }
    let names: Vec<String> = fields[1..].iter().map(|s| s.to_string()).collect();
    let width = fields.len();

    let mut rows: Vec<(i64, Vec<f64>)> = Vec::new();
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| YmirError::Parse { line, msg: e.to_string() })?;
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != width {
            return Err(YmirError::Parse {
                line,
                msg: format!("expected {width} columns, found {}", rec.len()),
            });
        }
        let ts = parse_timestamp(&rec[0], line)?;
        let vals = (1..width).map(|j| parse_cell(&rec[j], line)).collect::<Result<Vec<_>>>()?;
        rows.push((ts, vals));
    }
    if rows.is_empty() {
        return Err(YmirError::Structure("no data rows".into()));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(pair) = rows.windows(2).find(|p| p[0].0 == p[1].0) {
        return Err(YmirError::Structure(format!("duplicate timestamp {}", pair[0].0)));
    }
    let n = names.len();
    let t = rows.len();
    let mut values = Array2::<f64>::zeros((t, n));
    let mut timestamps = Vec::with_capacity(t);
    for (i, (ts, vals)) in rows.into_iter().enumerate() {
        timestamps.push(ts);
        for (j, v) in vals.into_iter().enumerate() {
            values[[i, j]] = v;
        }
    }
    TimeSeriesSet::new(timestamps, values, names)
}

pub fn load_timeseries_csv(path: impl AsRef<Path>) -> Result<TimeSeriesSet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| YmirError::io(path, e))?;
    read_timeseries_csv(std::io::BufReader::new(file))
}

/// Fills `NaN` cells by linear interpolation within each metric; leading and
/// trailing gaps take the nearest finite value.
pub fn impute_missing(ts: &TimeSeriesSet) -> Result<TimeSeriesSet> {
    let mut values = ts.values.clone();
    for (j, mut col) in values.axis_iter_mut(Axis(1)).enumerate() {
        let finite: Vec<usize> = (0..col.len()).filter(|&i| col[i].is_finite()).collect();
        if finite.is_empty() {
            return Err(YmirError::Data(format!(
                "metric {:?} has no finite values",
                ts.metric_names[j]
            )));
        }
        let first = finite[0];
        let last = *finite.last().unwrap();
        for i in 0..first {
            col[i] = col[first];
        }
        for i in last + 1..col.len() {
            col[i] = col[last];
        }
        for pair in finite.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a < 2 {
                continue;
            }
            let (va, vb) = (col[a], col[b]);
            let span = (b - a) as f64;
            for i in a + 1..b {
                col[i] = va + (vb - va) * (i - a) as f64 / span;
            }
        }
    }
    TimeSeriesSet::new(ts.timestamps.clone(), values, ts.metric_names.clone())
}

/// Human feedback labels aligned to a [`TimeSeriesSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeries {
    pub timestamps: Vec<i64>,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl LabelSeries {
    /// No labels at all.
    pub fn unlabeled(timestamps: &[i64]) -> Self {
        Self {
            timestamps: timestamps.to_vec(),
            labels: vec![0; timestamps.len()],
            mask: vec![false; timestamps.len()],
        }
    }

    /// Every point labeled.
    pub fn full(timestamps: &[i64], labels: Vec<u8>) -> Result<Self> {
        if labels.len() != timestamps.len() {
            return Err(YmirError::Shape(format!(
                "{} labels for {} timestamps",
                labels.len(),
                timestamps.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(YmirError::Contract("labels must be 0 or 1".into()));
        }
        Ok(Self {
            timestamps: timestamps.to_vec(),
            mask: vec![true; labels.len()],
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labeled_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.mask.iter().all(|&m| m)
    }

    /// Proportion of labeled points.
    pub fn coverage(&self) -> f64 {
        if self.mask.is_empty() {
            0.0
        } else {
            self.labeled_count() as f64 / self.mask.len() as f64
        }
    }

    /// Restriction to rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            timestamps: self.timestamps[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
            mask: self.mask[start..end].to_vec(),
        }
    }

    /// Writes only the labeled rows as `timestamp,label`.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("timestamp,label\n");
        for i in 0..self.len() {
            if self.mask[i] {
                out.push_str(&format!("{},{}\n", self.timestamps[i], self.labels[i]));
            }
        }
        out
    }
}

pub fn read_labels_csv<R: Read>(rdr: R, ts: &TimeSeriesSet) -> Result<LabelSeries> {
    read_labels_for(rdr, ts.timestamps())
}

/// Reads labels aligned to an explicit timestamp list.
pub fn read_labels_for<R: Read>(rdr: R, timestamps: &[i64]) -> Result<LabelSeries> {
    let index: HashMap<i64, usize> =
        timestamps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let mut out = LabelSeries::unlabeled(timestamps);
    let mut reader = csv_reader(rdr);
    let mut records = reader.records();
    match records.next() {
        None => return Ok(out),
        Some(rec) => {
            let rec = rec.map_err(|e| YmirError::Parse { line: 1, msg: e.to_string() })?;
            let fields: Vec<&str> = rec.iter().map(str::trim).collect();
            if fields != ["timestamp", "label"] {
                return Err(YmirError::Parse {
                    line: 1,
                    msg: "label header must be `timestamp,label`".into(),
                });
            }
        }
    }
    for (i, rec) in records.enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| YmirError::Parse { line, msg: e.to_string() })?;
        if rec.len() == 1 && rec.get(0).is_some_and(|c| c.trim().is_empty()) {
            continue;
        }
        if rec.len() != 2 {
            return Err(YmirError::Parse {
                line,
                msg: format!("expected 2 columns, found {}", rec.len()),
            });
        }
        let t = parse_timestamp(&rec[0], line)?;
        let label = match rec[1].trim() {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(YmirError::Parse {
                    line,
                    msg: format!("label must be 0 or 1, got {other:?}"),
                })
            }
        };
        let idx = *index.get(&t).ok_or_else(|| {
            YmirError::Alignment(format!("label timestamp {t} (line {line}) not in data"))
        })?;
        out.labels[idx] = label;
        out.mask[idx] = true;
    }
    Ok(out)
}

pub fn load_labels_csv(path: impl AsRef<Path>, ts: &TimeSeriesSet) -> Result<LabelSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| YmirError::io(path, e))?;
    read_labels_csv(std::io::BufReader::new(file), ts)
}

/// A window of `length` points starting at `start`, classified at `center`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowView {
    pub start: usize,
    pub length: usize,
    pub center: usize,
}

impl WindowView {
    pub fn end(&self) -> usize {
        self.start + self.length
    }
}

pub fn sliding_windows(len: usize, w: usize, stride: usize) -> Result<Vec<WindowView>> {
    if w == 0 || stride == 0 {
        return Err(YmirError::Param("window and stride must be at least 1".into()));
    }
    if w > len {
        return Err(YmirError::Size(format!("window {w} longer than series {len}")));
    }
    Ok((0..=len - w)
        .step_by(stride)
        .map(|start| WindowView { start, length: w, center: start + w / 2 })
        .collect())
}

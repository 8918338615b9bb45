//! Univariate labeled series: loading, scaling, windowing and splitting.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Point label for an unknown (never annotated) point.
pub const UNKNOWN: i8 = -1;
pub const NORMAL: i8 = 0;
pub const ANOMALY: i8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    name: String,
    timestamps: Vec<i64>,
    values: Vec<f64>,
    labels: Vec<i8>,
}

impl TimeSeries {
    pub fn new(
        name: impl Into<String>,
        timestamps: Vec<i64>,
        values: Vec<f64>,
        labels: Vec<i8>,
    ) -> Result<Self> {
        if timestamps.len() != values.len() || values.len() != labels.len() {
            return Err(Error::Integrity(format!(
                "column lengths differ: {} timestamps, {} values, {} labels",
                timestamps.len(),
                values.len(),
                labels.len()
            )));
        }
        if let Some(w) = timestamps.windows(2).position(|w| w[0] >= w[1]) {
            return Err(Error::Integrity(format!(
                "timestamps not strictly increasing at position {}",
                w + 1
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !(-1..=1).contains(*l)) {
            return Err(Error::Integrity(format!("label {bad} outside {{-1, 0, 1}}")));
        }
        Ok(TimeSeries {
            name: name.into(),
            timestamps,
            values,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn timestamps(&self) -> &[i64] {
        &self.timestamps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn labels(&self) -> &[i8] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy of the series with every label replaced by [`UNKNOWN`].
    pub fn without_labels(&self) -> TimeSeries {
        TimeSeries {
            labels: vec![UNKNOWN; self.len()],
            ..self.clone()
        }
    }

    fn slice(&self, range: std::ops::Range<usize>) -> TimeSeries {
        TimeSeries {
            name: self.name.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range.clone()].to_vec(),
            labels: self.labels[range].to_vec(),
        }
    }

    fn with_values(&self, values: Vec<f64>) -> TimeSeries {
        TimeSeries {
            values,
            ..self.clone()
        }
    }
}

/// Where a window's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Human,
    Pseudo,
    None,
}

/// `ω` consecutive scaled values, labeled by the point at `end_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowState {
    pub values: Vec<f64>,
    pub end_index: usize,
    pub label: i8,
    pub label_source: LabelSource,
}

impl WindowState {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.label_source != LabelSource::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub min: f64,
    pub max: f64,
}

impl ScalerParams {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Size("cannot fit a scaler on an empty series".into()));
        }
        let (min, max) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        if !min.is_finite() || !max.is_finite() {
            return Err(Error::Numeric("series contains non-finite values".into()));
        }
        Ok(ScalerParams { min, max })
    }

    /// Map one value into the unit interval. A constant series maps to 0.
    /// Values outside the fitted range are clamped when `clamp` is set.
    pub fn transform_value(&self, v: f64, clamp: bool) -> f64 {
        let span = self.max - self.min;
        let scaled = if span > 0.0 { (v - self.min) / span } else { 0.0 };
        if clamp {
            scaled.clamp(0.0, 1.0)
        } else {
            scaled
        }
    }

    pub fn transform(&self, series: &TimeSeries, clamp: bool) -> TimeSeries {
        let values = series
            .values
            .iter()
            .map(|&v| self.transform_value(v, clamp))
            .collect();
        series.with_values(values)
    }
}

/// Fit a min-max scaler on `series` and apply it.
pub fn scale_minmax(series: &TimeSeries) -> Result<(TimeSeries, ScalerParams)> {
    let params = ScalerParams::fit(&series.values)?;
    Ok((params.transform(series, false), params))
}

/// Slide a window of `window` points with stride 1. Window `k` covers raw
/// indices `k..k + window` and takes the label of its last point.
pub fn segment(series: &TimeSeries, window: usize) -> Result<Vec<WindowState>> {
    if window == 0 {
        return Err(Error::Parameter("window size must be positive".into()));
    }
    if series.len() < window {
        return Err(Error::Size(format!(
            "series of length {} is shorter than window size {window}",
            series.len()
        )));
    }
    Ok(series
        .values
        .windows(window)
        .enumerate()
        .map(|(k, vals)| {
            let end_index = k + window - 1;
            let label = series.labels[end_index];
            WindowState {
                values: vals.to_vec(),
                end_index,
                label,
                label_source: if label == UNKNOWN {
                    LabelSource::None
                } else {
                    LabelSource::Human
                },
            }
        })
        .collect())
}

/// Chronological split at `floor(n * ratio)`.
pub fn split_train_test(series: &TimeSeries, ratio: f64) -> Result<(TimeSeries, TimeSeries)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio {ratio} not in (0, 1)")));
    }
    let n = series.len();
    if n < 2 {
        return Err(Error::Size(format!("cannot split a series of length {n}")));
    }
    let cut = (n as f64 * ratio).floor() as usize;
    if cut == 0 || cut == n {
        return Err(Error::Size(format!(
            "ratio {ratio} on {n} points leaves an empty part"
        )));
    }
    Ok((series.slice(0..cut), series.slice(cut..n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Spike,
    LevelShift,
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(AnomalyKind::Spike),
            "level_shift" | "level-shift" => Ok(AnomalyKind::LevelShift),
            other => Err(Error::Parameter(format!("unknown anomaly kind '{other}'"))),
        }
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnomalyKind::Spike => write!(f, "spike"),
            AnomalyKind::LevelShift => write!(f, "level_shift"),
        }
    }
}

pub const SYNTHETIC_PERIOD: f64 = 100.0;
pub const SYNTHETIC_AMPLITUDE: f64 = 1.0;
pub const SYNTHETIC_NOISE: f64 = 0.05 * SYNTHETIC_AMPLITUDE;
const MAX_SHIFT_SEGMENT: usize = 20;

/// Seeded sine-plus-noise series with `ceil(n * anomaly_rate)` labeled
/// anomalous points.
///
/// Spikes add a random-signed offset of 3 to 5 amplitudes to single points.
/// Level shifts move contiguous segments (at most 20 points each) by 1 to 2
/// amplitudes. Either way every anomalous point sits at least 8 noise
/// standard deviations off the base signal.
pub fn gen_synthetic(n: usize, anomaly_rate: f64, kind: AnomalyKind, seed: u64) -> Result<TimeSeries> {
    if n < 100 {
        return Err(Error::Parameter(format!("synthetic series needs n >= 100, got {n}")));
    }
    if !(anomaly_rate > 0.0 && anomaly_rate < 0.1) {
        return Err(Error::Parameter(format!(
            "anomaly rate {anomaly_rate} not in (0, 0.1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, SYNTHETIC_NOISE).expect("positive noise scale");
    let mut values: Vec<f64> = (0..n)
        .map(|t| {
            SYNTHETIC_AMPLITUDE * (2.0 * std::f64::consts::PI * t as f64 / SYNTHETIC_PERIOD).sin()
                + noise.sample(&mut rng)
        })
        .collect();
    let mut labels = vec![NORMAL; n];
    let count = (n as f64 * anomaly_rate).ceil() as usize;

    match kind {
        AnomalyKind::Spike => {
            let mut positions = sample(&mut rng, n, count).into_vec();
            positions.sort_unstable();
            for p in positions {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let magnitude = rng.random_range(3.0..5.0) * SYNTHETIC_AMPLITUDE;
                values[p] += sign * magnitude;
                labels[p] = ANOMALY;
            }
        }
        AnomalyKind::LevelShift => {
            let segments = count.div_ceil(MAX_SHIFT_SEGMENT);
            let block = n / segments;
            let mut remaining = count;
            for s in 0..segments {
                let len = remaining.min(MAX_SHIFT_SEGMENT);
                remaining -= len;
                let start = s * block + rng.random_range(0..=block - len);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let shift = sign * rng.random_range(1.0..2.0) * SYNTHETIC_AMPLITUDE;
                for p in start..start + len {
                    values[p] += shift;
                    labels[p] = ANOMALY;
                }
            }
        }
    }

    let timestamps = (1..=n as i64).collect();
    TimeSeries::new(format!("synthetic-{kind}-{seed}"), timestamps, values, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsvFormat {
    /// `timestamp,value,is_anomaly`
    Yahoo,
    /// `timestamp,value,label,KPI ID`
    Kpi,
}

impl CsvFormat {
    fn label_column(self) -> &'static str {
        match self {
            CsvFormat::Yahoo => "is_anomaly",
            CsvFormat::Kpi => "label",
        }
    }
}

impl FromStr for CsvFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "yahoo" => Ok(CsvFormat::Yahoo),
            "kpi" => Ok(CsvFormat::Kpi),
            other => Err(Error::Parameter(format!("unknown csv format '{other}'"))),
        }
    }
}

fn parse_label(raw: &str) -> Option<i8> {
    let raw = raw.trim();
    if let Ok(v) = raw.parse::<i8>() {
        return Some(v);
    }
    // Some exports write flags as floats ("1.0").
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.fract() == 0.0 && v.abs() <= 1.0)
        .map(|v| v as i8)
}

pub fn load_series(path: impl AsRef<Path>, format: CsvFormat) -> Result<TimeSeries> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() || headers.iter().all(str::is_empty) {
        return Err(Error::Parse {
            line: 1,
            message: "empty file".into(),
        });
    }
    let column = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column '{name}' for {format:?} format"),
        })
    };
    let ts_col = column("timestamp")?;
    let value_col = column("value")?;
    let label_col = column(format.label_column())?;

    let mut rows: Vec<(i64, f64, i8)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| {
            record.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing field {i}"),
            })
        };
        let ts = field(ts_col)?.parse::<i64>().map_err(|e| Error::Parse {
            line,
            message: format!("bad timestamp: {e}"),
        })?;
        let value = field(value_col)?.parse::<f64>().map_err(|e| Error::Parse {
            line,
            message: format!("bad value: {e}"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse {
                line,
                message: "non-finite value".into(),
            });
        }
        let raw_label = field(label_col)?;
        let label = parse_label(raw_label)
            .filter(|l| (-1..=1).contains(l))
            .ok_or_else(|| Error::Parse {
                line,
                message: format!("bad label '{raw_label}'"),
            })?;
        rows.push((ts, value, label));
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 2,
            message: "no data rows".into(),
        });
    }

    rows.sort_by_key(|r| r.0);
    if let Some(dup) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Integrity(format!("duplicate timestamp {}", dup[0].0)));
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let (timestamps, rest): (Vec<_>, Vec<_>) = rows.into_iter().map(|(t, v, l)| (t, (v, l))).unzip();
    let (values, labels) = rest.into_iter().unzip();
    TimeSeries::new(name, timestamps, values, labels)
}

pub fn save_series(series: &TimeSeries, path: impl AsRef<Path>, format: CsvFormat) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let write_err = |e: csv::Error| Error::io(path, e.into());
    match format {
        CsvFormat::Yahoo => writer.write_record(["timestamp", "value", "is_anomaly"]),
        CsvFormat::Kpi => writer.write_record(["timestamp", "value", "label", "KPI ID"]),
    }
    .map_err(write_err)?;
    for i in 0..series.len() {
        let ts = series.timestamps[i].to_string();
        let value = series.values[i].to_string();
        let label = series.labels[i].to_string();
        match format {
            CsvFormat::Yahoo => writer.write_record([&ts, &value, &label]),
            CsvFormat::Kpi => writer.write_record([ts.as_str(), &value, &label, series.name()]),
        }
        .map_err(write_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

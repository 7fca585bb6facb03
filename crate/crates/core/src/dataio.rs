//! Half-hourly generation series: loading, scaling, windowing, splitting,
//! and a synthetic rooftop-PV generator.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};

pub const INTERVALS_PER_DAY: usize = 48;
const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

pub fn interval() -> Duration {
    Duration::minutes(30)
}

pub fn format_timestamp(t: &NaiveDateTime) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Strictly half-hourly, nonnegative generation values in kWh.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    timestamps: Vec<NaiveDateTime>,
    values: Vec<f64>,
}

impl Series {
    pub fn new(timestamps: Vec<NaiveDateTime>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::ShapeError(format!(
                "{} timestamps for {} values",
                timestamps.len(),
                values.len()
            )));
        }
        for (row, pair) in timestamps.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(Error::NonMonotonicTimestamps {
                    row: row + 1,
                    timestamp: format_timestamp(&pair[1]),
                });
            }
            if pair[1] - pair[0] != interval() {
                return Err(Error::GapError {
                    expected: format_timestamp(&(pair[0] + interval())),
                    found: format_timestamp(&pair[1]),
                });
            }
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidValue(format!("value {v} at row {i} is not a finite kWh >= 0")));
        }
        Ok(Series { timestamps, values })
    }

    /// Regular series starting at `start`.
    pub fn from_values(start: NaiveDateTime, values: Vec<f64>) -> Result<Self> {
        let timestamps = (0..values.len())
            .map(|i| start + interval() * i as i32)
            .collect();
        Series::new(timestamps, values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn slice(&self, start: usize, end: usize) -> Series {
        Series {
            timestamps: self.timestamps[start..end].to_vec(),
            values: self.values[start..end].to_vec(),
        }
    }

    pub fn position(&self, t: &NaiveDateTime) -> Option<usize> {
        self.timestamps.binary_search(t).ok()
    }
}

/// Column names for [`load_csv`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub timestamp: String,
    pub value: String,
}

impl Default for ColumnSpec {
    fn default() -> Self {
        ColumnSpec {
            timestamp: "timestamp".into(),
            value: "kwh".into(),
        }
    }
}

/// Reads a long CSV (`timestamp,kwh`). Lines starting with `#` are skipped.
pub fn load_csv(path: impl AsRef<Path>, columns: &ColumnSpec) -> Result<Series> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, columns)
}

pub fn parse_csv(text: &str, columns: &ColumnSpec) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::ParseError { line: 1, message: e.to_string() })?
        .clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let ts_col = find(&columns.timestamp)?;
    let val_col = find(&columns.value)?;

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::ParseError {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let ts_raw = record.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(ts_raw).ok_or_else(|| Error::ParseError {
            line,
            message: format!("bad timestamp `{ts_raw}`"),
        })?;
        let v_raw = record.get(val_col).unwrap_or("");
        let v: f64 = v_raw.parse().map_err(|_| Error::ParseError {
            line,
            message: format!("bad value `{v_raw}`"),
        })?;
        timestamps.push(ts);
        values.push(v);
    }
    Series::new(timestamps, values)
}

/// Writes `timestamp,kwh`, optionally preceded by `# ...` header lines.
pub fn write_csv(series: &Series, path: impl AsRef<Path>, header: &[String]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(series.len() * 32);
    for line in header {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out.push_str("timestamp,kwh\n");
    for (t, v) in series.timestamps.iter().zip(&series.values) {
        out.push_str(&format!("{},{}\n", format_timestamp(t), v));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Min-max scaling to `[0, 1]` using statistics of the training portion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub min: f64,
    pub max: f64,
}

impl Scaler {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidValue("cannot fit scaler on no values".into()));
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::DegenerateScale(min));
        }
        Ok(Scaler { min, max })
    }

    pub fn transform_one(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn inverse_one(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }

    pub fn transform(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|v| self.transform_one(*v)).collect()
    }

    pub fn inverse(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().map(|v| self.inverse_one(*v)).collect()
    }
}

/// Supervised windows: `inputs` is `N × k × 1`, `targets` is `N × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet {
    pub inputs: Array3<f64>,
    pub targets: Array2<f64>,
    pub k: usize,
    pub horizon: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inputs of the selected windows as a `k × B` block (one column each).
    pub fn input_block(&self, indices: &[usize]) -> Matrix {
        let mut block = Matrix::zeros((self.k, indices.len()));
        for (col, &i) in indices.iter().enumerate() {
            block
                .column_mut(col)
                .assign(&self.inputs.slice(s![i, .., 0]));
        }
        block
    }

    /// Targets `start..end` of the horizon for the selected windows, `(end-start) × B`.
    pub fn target_block(&self, indices: &[usize], start: usize, end: usize) -> Matrix {
        let mut block = Matrix::zeros((end - start, indices.len()));
        for (col, &i) in indices.iter().enumerate() {
            block
                .column_mut(col)
                .assign(&self.targets.slice(s![i, start..end]));
        }
        block
    }

    pub fn concat(&self, other: &WindowSet) -> Result<WindowSet> {
        if self.k != other.k || self.horizon != other.horizon {
            return Err(Error::ShapeError("window sets differ in k or horizon".into()));
        }
        Ok(WindowSet {
            inputs: ndarray::concatenate(ndarray::Axis(0), &[self.inputs.view(), other.inputs.view()])
                .expect("shapes checked"),
            targets: ndarray::concatenate(ndarray::Axis(0), &[self.targets.view(), other.targets.view()])
                .expect("shapes checked"),
            k: self.k,
            horizon: self.horizon,
        })
    }
}

/// All stride-1 windows of a scaled series: `N = L - k - H + 1`.
pub fn make_windows(scaled: &[f64], k: usize, horizon: usize) -> Result<WindowSet> {
    if k == 0 || horizon == 0 {
        return Err(Error::InvalidValue("k and horizon must be >= 1".into()));
    }
    if scaled.len() < k + horizon {
        return Err(Error::TooShort {
            needed: k + horizon,
            have: scaled.len(),
        });
    }
    let origins: Vec<usize> = (k..=scaled.len() - horizon).collect();
    Ok(windows_at(scaled, &origins, k, horizon))
}

/// Windows whose first target index is each of `origins`.
fn windows_at(scaled: &[f64], origins: &[usize], k: usize, horizon: usize) -> WindowSet {
    let n = origins.len();
    let mut inputs = Array3::zeros((n, k, 1));
    let mut targets = Array2::zeros((n, horizon));
    for (row, &o) in origins.iter().enumerate() {
        for j in 0..k {
            inputs[[row, j, 0]] = scaled[o - k + j];
        }
        for h in 0..horizon {
            targets[[row, h]] = scaled[o + h];
        }
    }
    WindowSet {
        inputs,
        targets,
        k,
        horizon,
    }
}

/// Windows whose targets fall entirely inside `start..end` of `scaled`,
/// with forecast origins every `stride` steps. Inputs may reach back before
/// `start` (they are past observations at forecast time).
pub fn segment_windows(
    scaled: &[f64],
    start: usize,
    end: usize,
    k: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowSet> {
    if k == 0 || horizon == 0 || stride == 0 {
        return Err(Error::InvalidValue("k, horizon and stride must be >= 1".into()));
    }
    if end > scaled.len() || start > end {
        return Err(Error::InvalidValue(format!(
            "segment {start}..{end} outside series of {}",
            scaled.len()
        )));
    }
    let first = start.max(k);
    if first + horizon > end {
        return Err(Error::TooShort {
            needed: first + horizon - start,
            have: end - start,
        });
    }
    let origins: Vec<usize> = (first..=end - horizon).step_by(stride).collect();
    Ok(windows_at(scaled, &origins, k, horizon))
}

/// Chronological train / validation / test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub validation: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

/// The first `train_fraction` of the series is for fitting, of which the
/// last `validation_fraction` is held out for validation; the rest is test.
pub fn split_indices(len: usize, train_fraction: f64, validation_fraction: f64) -> Result<Split> {
    let open = |f: f64| f > 0.0 && f < 1.0;
    if !open(train_fraction) || !open(validation_fraction) {
        return Err(Error::InvalidValue(format!(
            "fractions must lie in (0, 1): train={train_fraction}, validation={validation_fraction}"
        )));
    }
    if train_fraction + validation_fraction >= 1.0 {
        return Err(Error::InvalidValue("train + validation fractions must be < 1".into()));
    }
    let fit_end = (len as f64 * train_fraction).round() as usize;
    let val_len = (fit_end as f64 * validation_fraction).round() as usize;
    let train_end = fit_end - val_len;
    if train_end == 0 || val_len == 0 || fit_end >= len {
        return Err(Error::TooShort {
            needed: 3,
            have: len,
        });
    }
    Ok(Split {
        train: 0..train_end,
        validation: train_end..fit_end,
        test: fit_end..len,
    })
}

pub fn split(series: &Series, train_fraction: f64, validation_fraction: f64) -> Result<(Series, Series, Series)> {
    let sp = split_indices(series.len(), train_fraction, validation_fraction)?;
    Ok((
        series.slice(sp.train.start, sp.train.end),
        series.slice(sp.validation.start, sp.validation.end),
        series.slice(sp.test.start, sp.test.end),
    ))
}

/// Parameters of the synthetic rooftop-PV generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub days: usize,
    pub seed: u64,
    #[serde(default = "default_outlier_rate")]
    pub outlier_rate: f64,
    #[serde(default = "default_outlier_scale")]
    pub outlier_scale: f64,
}

fn default_outlier_rate() -> f64 {
    0.02
}

fn default_outlier_scale() -> f64 {
    1.0
}

pub fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2011, 7, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

/// Peak half-hour generation of a clear day, kWh.
const PEAK_KWH: f64 = 1.2;

/// Synthetic half-hourly PV series. Each day has a clipped-sine envelope
/// between a seasonal sunrise and sunset, scaled by a day-level amplitude
/// that follows a reflected random walk in `[0.3, 1]`. Daytime values carry
/// multiplicative noise and, with probability `outlier_rate`, a spike or a
/// drop of `outlier_scale × PEAK_KWH × U(0.5, 1)`. Night values are exactly
/// zero and all values are clipped at zero.
pub fn synth_solar(days: usize, seed: u64, outlier_rate: f64, outlier_scale: f64) -> Result<Series> {
    if days == 0 {
        return Err(Error::InvalidValue("days must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&outlier_rate) {
        return Err(Error::InvalidValue(format!("outlier_rate {outlier_rate} not in [0, 1)")));
    }
    if !(outlier_scale >= 0.0) || !outlier_scale.is_finite() {
        return Err(Error::InvalidValue(format!("outlier_scale {outlier_scale} must be >= 0")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = Normal::new(0.0, 0.12).expect("valid sd");
    let noise = Normal::new(0.0, 0.05).expect("valid sd");
    let mut amplitude: f64 = 0.8;
    let mut values = Vec::with_capacity(days * INTERVALS_PER_DAY);
    for day in 0..days {
        amplitude += step.sample(&mut rng);
        if amplitude > 1.0 {
            amplitude = 2.0 - amplitude;
        }
        if amplitude < 0.3 {
            amplitude = 0.6 - amplitude;
        }
        amplitude = amplitude.clamp(0.3, 1.0);
        // Day length swings between 10 and 14 hours over a year.
        let season = (2.0 * PI * (day as f64 + 80.0) / 365.0).sin();
        let half_day = 6.0 + 2.0 * season;
        let sunrise = 12.0 - half_day;
        let sunset = 12.0 + half_day;
        for slot in 0..INTERVALS_PER_DAY {
            let hour = (slot as f64 + 0.5) * 0.5;
            let envelope = if hour > sunrise && hour < sunset {
                (PI * (hour - sunrise) / (sunset - sunrise)).sin().max(0.0)
            } else {
                0.0
            };
            if envelope <= 0.0 {
                values.push(0.0);
                continue;
            }
            let mut v = PEAK_KWH * amplitude * envelope * (1.0 + noise.sample(&mut rng));
            if rng.random::<f64>() < outlier_rate {
                let jump = outlier_scale * PEAK_KWH * rng.random_range(0.5..1.0);
                if rng.random::<bool>() {
                    v += jump;
                } else {
                    v -= jump;
                }
            }
            values.push(v.max(0.0));
        }
    }
    Series::from_values(synth_start(), values)
}

fn parse_day(s: &str) -> Option<NaiveDate> {
    let s = s.trim();
    ["%d/%m/%Y", "%Y-%m-%d", "%d-%b-%y", "%d-%b-%Y"]
        .iter()
        .find_map(|f| NaiveDate::parse_from_str(s, f).ok())
}

/// Converts an Ausgrid-style wide CSV (one row per customer, category and
/// day, 48 half-hour columns `0:30 … 23:30, 0:00`) into a long series for
/// one customer's gross-generation (`GG`) rows. Each column is stamped with
/// the end of its interval.
pub fn convert_wide(text: &str, customer: &str) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let mut header = None;
    for rec in records.by_ref() {
        let rec = rec.map_err(|e| Error::ParseError { line: 0, message: e.to_string() })?;
        if rec.iter().any(|f| f.eq_ignore_ascii_case("customer")) {
            header = Some(rec);
            break;
        }
    }
    let header = header.ok_or_else(|| Error::MissingColumn("Customer".into()))?;
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let customer_col = col("Customer")?;
    let category_col = col("Consumption Category")?;
    let date_col = col("date")?;
    let first_slot = col("0:30")?;
    if header.len() < first_slot + INTERVALS_PER_DAY {
        return Err(Error::MissingColumn("0:00".into()));
    }

    let mut days: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    let mut seen_customer = false;
    for rec in records {
        let rec = rec.map_err(|e| Error::ParseError { line: 0, message: e.to_string() })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.get(customer_col) != Some(customer) {
            continue;
        }
        seen_customer = true;
        if rec.get(category_col) != Some("GG") {
            continue;
        }
        let raw_date = rec.get(date_col).unwrap_or("");
        let date = parse_day(raw_date).ok_or_else(|| Error::ParseError {
            line,
            message: format!("bad date `{raw_date}`"),
        })?;
        let mut vals = Vec::with_capacity(INTERVALS_PER_DAY);
        for j in 0..INTERVALS_PER_DAY {
            let raw = rec.get(first_slot + j).unwrap_or("");
            let v: f64 = raw.parse().map_err(|_| Error::ParseError {
                line,
                message: format!("bad reading `{raw}`"),
            })?;
            vals.push(v);
        }
        days.push((date, vals));
    }
    if !seen_customer {
        return Err(Error::NotFound(format!("customer {customer}")));
    }
    if days.is_empty() {
        return Err(Error::NotFound(format!("gross generation rows for customer {customer}")));
    }
    days.sort_by_key(|(d, _)| *d);
    let mut timestamps = Vec::with_capacity(days.len() * INTERVALS_PER_DAY);
    let mut values = Vec::with_capacity(days.len() * INTERVALS_PER_DAY);
    for (date, vals) in days {
        let midnight = date.and_hms_opt(0, 0, 0).expect("valid time");
        for (j, v) in vals.into_iter().enumerate() {
            timestamps.push(midnight + interval() * (j as i32 + 1));
            values.push(v);
        }
    }
    Series::new(timestamps, values)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

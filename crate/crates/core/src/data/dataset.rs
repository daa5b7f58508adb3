use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{PirError, Result};
use crate::tensor::Tensor;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// A `T x N` series at a fixed sampling stride.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    values: Tensor,
    timestamps: Vec<NaiveDateTime>,
    channel_names: Vec<String>,
    /// Index of row 0 within the series this dataset was cut from.
    start_index: usize,
}

impl TimeSeriesDataset {
    pub fn new(
        values: Tensor,
        timestamps: Vec<NaiveDateTime>,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        Self::with_start(values, timestamps, channel_names, 0)
    }

    pub fn with_start(
        values: Tensor,
        timestamps: Vec<NaiveDateTime>,
        channel_names: Vec<String>,
        start_index: usize,
    ) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(PirError::invalid("dataset values must be a T x N matrix"));
        }
        let (t, n) = (values.rows(), values.cols());
        if t == 0 {
            return Err(PirError::invalid("dataset must have at least one row"));
        }
        if timestamps.len() != t || channel_names.len() != n {
            return Err(PirError::invalid(format!(
                "dataset is {t} x {n} but has {} timestamps and {} channel names",
                timestamps.len(),
                channel_names.len()
            )));
        }
        if let Some(i) = values.data().iter().position(|v| !v.is_finite()) {
            return Err(PirError::Ingest {
                row: i / n + 1,
                message: format!("non-finite value in channel `{}`", channel_names[i % n]),
            });
        }
        check_stride(&timestamps, |i| i + 1)?;
        Ok(TimeSeriesDataset { values, timestamps, channel_names, start_index })
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.values.cols()
    }

    /// `T x N`, time-major.
    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn start_index(&self) -> usize {
        self.start_index
    }

    pub fn stride(&self) -> Option<TimeDelta> {
        (self.timestamps.len() > 1).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn value(&self, t: usize, channel: usize) -> f64 {
        self.values.at(t, channel)
    }

    /// Rows `start..end` as a new dataset (start index shifted accordingly).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(PirError::invalid(format!(
                "row range {start}..{end} is empty or outside 0..{}",
                self.len()
            )));
        }
        let n = self.num_channels();
        let data = self.values.data()[start * n..end * n].to_vec();
        Ok(TimeSeriesDataset {
            values: Tensor::matrix(end - start, n, data)?,
            timestamps: self.timestamps[start..end].to_vec(),
            channel_names: self.channel_names.clone(),
            start_index: self.start_index + start,
        })
    }

    pub(crate) fn with_values(&self, values: Tensor) -> Self {
        TimeSeriesDataset { values, ..self.clone() }
    }
}

fn check_stride(ts: &[NaiveDateTime], row_of: impl Fn(usize) -> usize) -> Result<()> {
    if ts.len() < 2 {
        return Ok(());
    }
    let stride = ts[1] - ts[0];
    if stride <= TimeDelta::zero() {
        return Err(PirError::Ingest {
            row: row_of(1),
            message: format!("timestamps not strictly increasing ({} -> {})", ts[0], ts[1]),
        });
    }
    for i in 2..ts.len() {
        let d = ts[i] - ts[i - 1];
        if d != stride {
            let kind = if d > stride { "gap" } else { "irregular stride" };
            return Err(PirError::Ingest {
                row: row_of(i),
                message: format!(
                    "{kind}: {} follows {} (step {}s, expected {}s)",
                    ts[i],
                    ts[i - 1],
                    d.num_seconds(),
                    stride.num_seconds()
                ),
            });
        }
    }
    Ok(())
}

/// Column layout of a dataset CSV.
#[derive(Clone, Debug)]
pub struct CsvLayout {
    pub date_column: String,
    pub delimiter: u8,
}

impl Default for CsvLayout {
    fn default() -> Self {
        CsvLayout { date_column: "date".to_string(), delimiter: b',' }
    }
}

/// Accepts `YYYY-MM-DD HH:MM:SS`, ISO-8601 / RFC 3339 (offsets are dropped),
/// minute-resolution variants, and bare dates.
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        TIMESTAMP_FORMAT,
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
        "%Y/%m/%d %H:%M:%S",
        "%Y/%m/%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_local());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
}

/// Loads a dataset CSV: a header row, the timestamp column first, numeric
/// channels after it. Error rows are 1-based file line numbers (the header is
/// line 1).
pub fn load_csv(path: &Path, layout: &CsvLayout) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(layout.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(PirError::Ingest { row: 1, message: "need a date column and at least one channel".into() });
    }
    if headers[0].trim() != layout.date_column {
        return Err(PirError::Ingest {
            row: 1,
            message: format!("first column must be `{}`, found `{}`", layout.date_column, &headers[0]),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let n = names.len();

    let mut stamps = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        if record.len() != n + 1 {
            return Err(PirError::Ingest {
                row: line,
                message: format!("expected {} cells, found {}", n + 1, record.len()),
            });
        }
        let ts = parse_timestamp(&record[0]).ok_or_else(|| PirError::Ingest {
            row: line,
            message: format!("unparsable timestamp `{}`", &record[0]),
        })?;
        stamps.push(ts);
        for (c, cell) in record.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                return Err(PirError::Ingest {
                    row: line,
                    message: format!("missing value in channel `{}`", names[c]),
                });
            }
            let v: f64 = cell.parse().map_err(|_| PirError::Ingest {
                row: line,
                message: format!("non-numeric value `{cell}` in channel `{}`", names[c]),
            })?;
            if !v.is_finite() {
                return Err(PirError::Ingest {
                    row: line,
                    message: format!("non-finite value in channel `{}`", names[c]),
                });
            }
            values.push(v);
        }
    }
    if stamps.is_empty() {
        return Err(PirError::Ingest { row: 2, message: "no data rows".into() });
    }
    check_stride(&stamps, |i| i + 2)?;
    let t = stamps.len();
    TimeSeriesDataset::new(Tensor::matrix(t, n, values)?, stamps, names)
}

/// Writes a dataset in the same layout `load_csv` reads. Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn write_csv(dataset: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string()];
    header.extend(dataset.channel_names().iter().cloned());
    w.write_record(&header)?;
    let mut row = Vec::with_capacity(dataset.num_channels() + 1);
    for (t, ts) in dataset.timestamps().iter().enumerate() {
        row.clear();
        row.push(ts.format(TIMESTAMP_FORMAT).to_string());
        for c in 0..dataset.num_channels() {
            row.push(dataset.value(t, c).to_string());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Train/validation/test proportions, e.g. `7:1:2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = SplitRatios { train, val, test };
        if [train, val, test].iter().any(|v| !v.is_finite() || *v < 0.0) || r.total() <= 0.0 {
            return Err(PirError::invalid(format!("invalid split ratios {train}:{val}:{test}")));
        }
        Ok(r)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| PirError::invalid(format!("split ratios `{s}` are not numbers")))?;
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(PirError::invalid(format!("split ratios `{s}` must have three parts"))),
        }
    }

    fn total(&self) -> f64 {
        self.train + self.val + self.test
    }

    /// End rows of the train and validation segments for a series of length `t`:
    /// `floor(cumulative ratio * t)`.
    pub fn boundaries(&self, t: usize) -> (usize, usize) {
        let total = self.total();
        // the small offset absorbs representation error in e.g. 0.6 * 100
        let cut = |cum: f64| ((t as f64) * cum / total + 1e-9).floor() as usize;
        (cut(self.train).min(t), cut(self.train + self.val).min(t))
    }
}

impl std::fmt::Display for SplitRatios {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.train, self.val, self.test)
    }
}

/// Contiguous, ordered, disjoint train/val/test segments covering the series.
pub fn split_chronological(
    dataset: &TimeSeriesDataset,
    ratios: SplitRatios,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset)> {
    let t = dataset.len();
    let (b1, b2) = ratios.boundaries(t);
    if b1 == 0 || b2 <= b1 || b2 >= t {
        return Err(PirError::invalid(format!(
            "split {ratios} of {t} rows gives lengths {}/{}/{}; every split must be nonempty",
            b1,
            b2.saturating_sub(b1),
            t.saturating_sub(b2)
        )));
    }
    Ok((dataset.slice_rows(0, b1)?, dataset.slice_rows(b1, b2)?, dataset.slice_rows(b2, t)?))
}

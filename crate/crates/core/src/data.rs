//! CSV ingestion, chronological splits, train-only standardization, sliding
//! windows and per-window instance normalization.

use std::ops::Range;
use std::path::Path;

use chrono::NaiveDateTime;

use crate::autodiff::RealArray;
use crate::error::{Error, Result};

/// Lower bound applied to per-window standard deviations.
pub const INST_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub columns: Vec<String>,
    /// `(T, D)` observations.
    pub values: RealArray,
    /// Minutes between consecutive rows, when the timestamps parse.
    pub sample_interval: Option<f64>,
    /// Absolute sample index of row 0.
    pub origin_index: u64,
}

impl Dataset {
    pub fn from_values(name: impl Into<String>, values: RealArray) -> Result<Self> {
        let [_, d] = *values.shape() else {
            return Err(Error::Data(format!("dataset values must be (T, D), got {:?}", values.shape())));
        };
        Ok(Self {
            name: name.into(),
            columns: (0..d).map(|i| format!("c{i}")).collect(),
            values,
            sample_interval: None,
            origin_index: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    /// Samples per day inferred from the timestamp spacing, e.g. 24 for hourly rows.
    pub fn daily_period(&self) -> Option<usize> {
        let m = self.sample_interval?;
        let p = 1440.0 / m;
        (m > 0.0 && (p - p.round()).abs() < 1e-9 && p >= 1.0).then_some(p.round() as usize)
    }
}

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    const FORMATS: [&str; 4] = [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M:%S",
        "%Y/%m/%d %H:%M",
    ];
    let s = s.trim();
    FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })
}

/// Reads a header row, then rows of `timestamp, value, value, ...`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    if header.len() < 2 {
        return Err(Error::Data(format!(
            "{}: need a timestamp column and at least one channel, found {} column(s)",
            path.display(),
            header.len()
        )));
    }
    let d = header.len() - 1;
    let mut values = Vec::new();
    let mut stamps = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::Data(format!("{}: row {line}: {e}", path.display())))?;
        if record.len() != header.len() {
            return Err(Error::Data(format!(
                "{}: row {line} has {} fields, header has {}",
                path.display(),
                record.len(),
                header.len()
            )));
        }
        stamps.push(parse_timestamp(&record[0]));
        for (col, cell) in record.iter().enumerate().skip(1) {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: row {line}, column {} ({}): non-numeric value {cell:?}",
                    path.display(),
                    col + 1,
                    &header[col]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: row {line}, column {}: non-finite value",
                    path.display(),
                    col + 1
                )));
            }
            values.push(v);
        }
    }
    let t = values.len() / d;
    if t == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }
    let parsed: Option<Vec<NaiveDateTime>> = stamps.into_iter().collect();
    let mut sample_interval = None;
    if let Some(ts) = parsed {
        if let Some(pos) = ts.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::Data(format!(
                "{}: timestamps not increasing at row {}",
                path.display(),
                pos + 3
            )));
        }
        if ts.len() >= 2 {
            sample_interval = Some((ts[1] - ts[0]).num_seconds() as f64 / 60.0);
        }
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset {
        name,
        columns: header.iter().skip(1).map(str::to_owned).collect(),
        values: RealArray::new(vec![t, d], values)?,
        sample_interval,
        origin_index: 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitSpec {
    pub const ETT: SplitSpec = SplitSpec {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    };
    pub const STANDARD: SplitSpec = SplitSpec {
        train: 0.7,
        val: 0.1,
        test: 0.2,
    };

    /// 6:2:2 for ETT and Traffic files, 7:1:2 otherwise.
    pub fn for_dataset(name: &str) -> Self {
        let n = name.to_ascii_lowercase();
        if n.starts_with("ett") || n.contains("traffic") {
            Self::ETT
        } else {
            Self::STANDARD
        }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios {parts:?} must be nonnegative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Chronological split of `t` rows. Validation and test ranges start
/// `lookback` rows early so their first windows have full context.
pub fn split(t: usize, spec: SplitSpec, lookback: usize, horizon: usize) -> Result<Splits> {
    spec.validate()?;
    let count = |r: f64| (t as f64 * r + 1e-9).floor() as usize;
    let n_train = count(spec.train);
    let n_test = count(spec.test);
    let n_val = t.saturating_sub(n_train + n_test);
    let val_end = n_train + n_val;
    let splits = Splits {
        train: 0..n_train,
        val: n_train.saturating_sub(lookback)..val_end,
        test: val_end.saturating_sub(lookback)..t,
    };
    let need = lookback + horizon;
    for (name, r) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        if r.len() < need {
            return Err(Error::Data(format!(
                "{name} split has {} rows, fewer than lookback + horizon = {need}",
                r.len()
            )));
        }
    }
    Ok(splits)
}

/// Per-channel z-score statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits on rows `range` of a `(T, D)` matrix only.
    pub fn fit(values: &RealArray, range: Range<usize>) -> Result<Self> {
        let [t, d] = *values.shape() else {
            return Err(Error::Data("scaler expects (T, D) values".into()));
        };
        if range.is_empty() || range.end > t {
            return Err(Error::Data(format!("scaler range {range:?} invalid for {t} rows")));
        }
        let n = range.len() as f64;
        let rows = &values.data()[range.start * d..range.end * d];
        let mut mean = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in rows.chunks_exact(d) {
            for ch in 0..d {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        if let Some(ch) = std.iter().position(|&s| s == 0.0) {
            return Err(Error::Data(format!("channel {ch} is constant on the training range")));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, values: &RealArray) -> Result<RealArray> {
        self.map(values, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, values: &RealArray) -> Result<RealArray> {
        self.map(values, |v, m, s| v * s + m)
    }

    fn map(&self, values: &RealArray, f: impl Fn(f64, f64, f64) -> f64) -> Result<RealArray> {
        let d = self.mean.len();
        if values.shape().len() != 2 || values.shape()[1] != d {
            return Err(Error::shape("scaler", values.shape(), &[0, d]));
        }
        let mut out = values.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ch in 0..d {
                row[ch] = f(row[ch], self.mean[ch], self.std[ch]);
            }
        }
        Ok(out)
    }
}

/// Lookback start offsets of every window inside `range`.
pub fn sample_windows(range: Range<usize>, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    let need = lookback + horizon;
    if stride == 0 || range.len() < need {
        return Err(Error::Data(format!(
            "no windows: range of {} rows, lookback + horizon = {need}, stride {stride}",
            range.len()
        )));
    }
    Ok((range.start..=range.end - need).step_by(stride).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub start: usize,
    /// `(L, D)`.
    pub lookback: RealArray,
    /// `(H, D)`.
    pub target: RealArray,
}

impl WindowSample {
    pub fn phase(&self, origin_index: u64, cycle_len: usize) -> usize {
        ((origin_index + self.start as u64) % cycle_len as u64) as usize
    }
}

pub fn window(values: &RealArray, start: usize, lookback: usize, horizon: usize) -> Result<WindowSample> {
    let [t, d] = *values.shape() else {
        return Err(Error::Data("window expects (T, D) values".into()));
    };
    if start + lookback + horizon > t {
        return Err(Error::Data(format!(
            "window at {start} with length {} exceeds {t} rows",
            lookback + horizon
        )));
    }
    let rows = |a: usize, n: usize| RealArray::new(vec![n, d], values.data()[a * d..(a + n) * d].to_vec());
    Ok(WindowSample {
        start,
        lookback: rows(start, lookback)?,
        target: rows(start + lookback, horizon)?,
    })
}

/// Windows packed channel-major for the model: `x` `(B, D, L)`, `y` `(B, D, H)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: RealArray,
    pub y: RealArray,
    /// Absolute sample index of each window's first lookback step.
    pub starts: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Rows `range` of the batch.
    pub fn slice(&self, range: Range<usize>) -> Result<Batch> {
        let take = |a: &RealArray| {
            let per: usize = a.shape()[1..].iter().product();
            let mut shape = a.shape().to_vec();
            shape[0] = range.len();
            RealArray::new(shape, a.data()[range.start * per..range.end * per].to_vec())
        };
        Ok(Batch {
            x: take(&self.x)?,
            y: take(&self.y)?,
            starts: self.starts[range.clone()].to_vec(),
        })
    }
}

pub fn make_batch(
    values: &RealArray,
    origin_index: u64,
    starts: &[usize],
    lookback: usize,
    horizon: usize,
) -> Result<Batch> {
    let [t, d] = *values.shape() else {
        return Err(Error::Data("batch expects (T, D) values".into()));
    };
    let b = starts.len();
    let mut x = vec![0.0; b * d * lookback];
    let mut y = vec![0.0; b * d * horizon];
    let data = values.data();
    for (i, &s) in starts.iter().enumerate() {
        if s + lookback + horizon > t {
            return Err(Error::Data(format!("window at {s} exceeds {t} rows")));
        }
        for ch in 0..d {
            for n in 0..lookback {
                x[(i * d + ch) * lookback + n] = data[(s + n) * d + ch];
            }
            for n in 0..horizon {
                y[(i * d + ch) * horizon + n] = data[(s + lookback + n) * d + ch];
            }
        }
    }
    Ok(Batch {
        x: RealArray::new(vec![b, d, lookback], x)?,
        y: RealArray::new(vec![b, d, horizon], y)?,
        starts: starts.iter().map(|&s| origin_index + s as u64).collect(),
    })
}

/// `(mean, std)` of each length-`n` row, population std clamped at [`INST_NORM_EPS`].
pub(crate) fn row_moments(data: &[f64], n: usize) -> Vec<(f64, f64)> {
    data.chunks_exact(n)
        .map(|row| {
            let m = row.iter().sum::<f64>() / n as f64;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            (m, v.sqrt().max(INST_NORM_EPS))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InstanceStats {
    /// Undoes [`instance_norm`] on a `(H, D)` prediction.
    pub fn denorm(&self, pred: &RealArray) -> Result<RealArray> {
        let d = self.mean.len();
        if pred.shape().len() != 2 || pred.shape()[1] != d {
            return Err(Error::shape("denorm", pred.shape(), &[0, d]));
        }
        let mut out = pred.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ch in 0..d {
                row[ch] = row[ch] * self.std[ch] + self.mean[ch];
            }
        }
        Ok(out)
    }
}

/// Normalizes a `(L, D)` lookback by its own per-channel mean and std.
pub fn instance_norm(window: &RealArray) -> Result<(RealArray, InstanceStats)> {
    let [l, d] = *window.shape() else {
        return Err(Error::invalid(format!("window must be (L, D), got {:?}", window.shape())));
    };
    let mut cols = vec![0.0; l * d];
    for n in 0..l {
        for ch in 0..d {
            cols[ch * l + n] = window.data()[n * d + ch];
        }
    }
    let moments = row_moments(&cols, l);
    let mut out = window.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        for ch in 0..d {
            row[ch] = (row[ch] - moments[ch].0) / moments[ch].1;
        }
    }
    Ok((
        out,
        InstanceStats {
            mean: moments.iter().map(|p| p.0).collect(),
            std: moments.iter().map(|p| p.1).collect(),
        },
    ))
}

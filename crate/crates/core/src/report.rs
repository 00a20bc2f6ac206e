//! Amplitude spectra of the residual before and after the frequency stage,
//! and parameter/time measurements.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{train, Task, TrainConfig, CHUNK};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub frequency_bin: usize,
    pub mean_amp_before: f64,
    pub mean_amp_after: f64,
    pub ratio: f64,
}

/// Mean `|rfft(r)|` and mean `|f|` per bin over all test windows and channels
/// of the base branch. When the stage leaves the spectrum untouched the two
/// columns coincide.
pub fn spectrum_report(model: &Model, task: &Task) -> Result<Vec<SpectrumRow>> {
    let starts = task.windows(task.splits.test.clone())?;
    let parts: Vec<Result<(Vec<f64>, Vec<f64>, usize)>> = starts
        .par_chunks(CHUNK)
        .map(|s| {
            let b = task.batch(s)?;
            let mut tape = Tape::new();
            let trace = model.forward_with(&mut tape, model.store(), &b.x, &b.starts)?;
            let before = tape.rfft(trace.base.residual)?;
            let after = trace.base.merged.unwrap_or(before);
            let k = *tape.shape(before)?.last().unwrap();
            let sum_bins = |v| -> Result<Vec<f64>> {
                let mut acc = vec![0.0; k];
                for row in tape.complex(v)?.data().chunks_exact(k) {
                    acc.iter_mut().zip(row).for_each(|(a, z)| *a += z.norm());
                }
                Ok(acc)
            };
            let rows = tape.complex(before)?.len() / k;
            Ok((sum_bins(before)?, sum_bins(after)?, rows))
        })
        .collect();
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut rows = 0usize;
    for part in parts {
        let (b, a, n) = part?;
        if before.is_empty() {
            before = vec![0.0; b.len()];
            after = vec![0.0; a.len()];
        }
        before.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
        after.iter_mut().zip(&a).for_each(|(x, y)| *x += y);
        rows += n;
    }
    if rows == 0 {
        return Err(Error::Data("spectrum report needs at least one test window".into()));
    }
    Ok(before
        .iter()
        .zip(&after)
        .enumerate()
        .map(|(k, (b, a))| {
            let (b, a) = (b / rows as f64, a / rows as f64);
            SpectrumRow {
                frequency_bin: k,
                mean_amp_before: b,
                mean_amp_after: a,
                ratio: if b > 0.0 { a / b } else { 1.0 },
            }
        })
        .collect())
}

pub fn spectrum_csv(rows: &[SpectrumRow]) -> String {
    let mut s = String::from("frequency_bin,mean_amp_before,mean_amp_after,ratio\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.frequency_bin, r.mean_amp_before, r.mean_amp_after, r.ratio
        ));
    }
    s
}

/// Structural reading of a spectrum report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumShape {
    /// Fraction of upper-half bins whose ratio exceeds 1.
    pub upper_boost_fraction: f64,
    /// `after / before` of the three largest non-DC lower-half bins.
    pub peak_retention: Vec<f64>,
}

impl SpectrumShape {
    pub fn of(rows: &[SpectrumRow]) -> Self {
        let k = rows.len();
        let upper: Vec<&SpectrumRow> = rows.iter().filter(|r| 2 * r.frequency_bin >= k).collect();
        let boosted = upper.iter().filter(|r| r.ratio > 1.0).count();
        let mut lower: Vec<&SpectrumRow> = rows
            .iter()
            .filter(|r| r.frequency_bin > 0 && 2 * r.frequency_bin < k)
            .collect();
        lower.sort_by(|a, b| b.mean_amp_before.total_cmp(&a.mean_amp_before));
        Self {
            upper_boost_fraction: boosted as f64 / upper.len().max(1) as f64,
            peak_retention: lower.iter().take(3).map(|r| r.ratio).collect(),
        }
    }

    pub fn passes(&self) -> bool {
        self.upper_boost_fraction > 0.5 && !self.peak_retention.is_empty() && self.peak_retention.iter().all(|&r| r > 0.8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub params_count: usize,
    /// Filled in by callers that track allocations.
    pub peak_bytes: Option<u64>,
    pub secs_per_epoch: f64,
}

/// Trains a copy of `model` for `cfg.epochs` epochs and reports wall-clock per epoch.
pub fn bench(model: &Model, task: &Task, cfg: &TrainConfig) -> Result<BenchReport> {
    let mut m = model.clone();
    let t0 = Instant::now();
    train(&mut m, task, cfg)?;
    Ok(BenchReport {
        params_count: model.param_count(),
        peak_bytes: None,
        secs_per_epoch: t0.elapsed().as_secs_f64() / cfg.epochs as f64,
    })
}

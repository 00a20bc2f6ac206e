//! Flat `key = value` run configuration.
//!
//! Keys left at `auto` are resolved against the dataset: the cycle length from
//! the sampling interval, and the weekly lookback / pool kernel from that.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant, WeeklyConfig};
use crate::sfpl::{FfnConfig, SegmentConfig, WeightMode};
use crate::spectral::WindowKind;
use crate::train::TrainConfig;

/// Cycle length used when neither the config nor the timestamps give one.
pub const FALLBACK_CYCLE_LEN: usize = 24;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub lookback: usize,
    pub horizon: usize,
    pub cycle_len: Option<usize>,
    pub seg_len: usize,
    pub seg_stride: usize,
    pub seg_window: WindowKind,
    pub seg_scalar_weights: bool,
    pub seg_per_channel: bool,
    pub seg_post_filter: bool,
    pub ffn_hidden: usize,
    pub ffn_linear_only: bool,
    pub variant: Variant,
    pub multiscale: bool,
    pub weekly_lookback: Option<usize>,
    pub pool_kernel: Option<usize>,
    pub weekly_cycle_len: usize,
    pub seed: u64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub inst_norm: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seg = SegmentConfig::default();
        let ffn = FfnConfig::default();
        let t = TrainConfig::default();
        Self {
            data: None,
            lookback: 96,
            horizon: 96,
            cycle_len: None,
            seg_len: seg.win_len,
            seg_stride: seg.stride,
            seg_window: seg.window,
            seg_scalar_weights: false,
            seg_per_channel: false,
            seg_post_filter: false,
            ffn_hidden: ffn.hidden,
            ffn_linear_only: ffn.linear_only,
            variant: Variant::Full,
            multiscale: false,
            weekly_lookback: None,
            pool_kernel: None,
            weekly_cycle_len: 7,
            seed: t.seed,
            lr: t.lr,
            batch: t.batch_size,
            epochs: t.epochs,
            inst_norm: true,
            out: PathBuf::from("out"),
        }
    }
}

pub const KEYS: [&str; 23] = [
    "data",
    "lookback",
    "horizon",
    "cycle_len",
    "seg_len",
    "seg_stride",
    "seg_window",
    "seg_scalar_weights",
    "seg_per_channel",
    "seg_post_filter",
    "ffn_hidden",
    "ffn_linear_only",
    "variant",
    "multiscale",
    "weekly_lookback",
    "pool_kernel",
    "weekly_cycle_len",
    "seed",
    "lr",
    "batch",
    "epochs",
    "inst_norm",
    "out",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {value:?}: expected true or false"))),
    }
}

fn parse_auto(key: &str, value: &str) -> Result<Option<usize>> {
    if value.eq_ignore_ascii_case("auto") {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_auto(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |v| v.to_string())
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "lookback" => self.lookback = parse(key, value)?,
            "horizon" => self.horizon = parse(key, value)?,
            "cycle_len" => self.cycle_len = parse_auto(key, value)?,
            "seg_len" => self.seg_len = parse(key, value)?,
            "seg_stride" => self.seg_stride = parse(key, value)?,
            "seg_window" => self.seg_window = parse(key, value)?,
            "seg_scalar_weights" => self.seg_scalar_weights = parse_bool(key, value)?,
            "seg_per_channel" => self.seg_per_channel = parse_bool(key, value)?,
            "seg_post_filter" => self.seg_post_filter = parse_bool(key, value)?,
            "ffn_hidden" => self.ffn_hidden = parse(key, value)?,
            "ffn_linear_only" => self.ffn_linear_only = parse_bool(key, value)?,
            "variant" => self.variant = parse(key, value)?,
            "multiscale" => self.multiscale = parse_bool(key, value)?,
            "weekly_lookback" => self.weekly_lookback = parse_auto(key, value)?,
            "pool_kernel" => self.pool_kernel = parse_auto(key, value)?,
            "weekly_cycle_len" => self.weekly_cycle_len = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "inst_norm" => self.inst_norm = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key {key:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", i + 1)),
                e => e,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "data" => self.data.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "lookback" => self.lookback.to_string(),
            "horizon" => self.horizon.to_string(),
            "cycle_len" => show_auto(self.cycle_len),
            "seg_len" => self.seg_len.to_string(),
            "seg_stride" => self.seg_stride.to_string(),
            "seg_window" => self.seg_window.to_string(),
            "seg_scalar_weights" => self.seg_scalar_weights.to_string(),
            "seg_per_channel" => self.seg_per_channel.to_string(),
            "seg_post_filter" => self.seg_post_filter.to_string(),
            "ffn_hidden" => self.ffn_hidden.to_string(),
            "ffn_linear_only" => self.ffn_linear_only.to_string(),
            "variant" => self.variant.to_string(),
            "multiscale" => self.multiscale.to_string(),
            "weekly_lookback" => show_auto(self.weekly_lookback),
            "pool_kernel" => show_auto(self.pool_kernel),
            "weekly_cycle_len" => self.weekly_cycle_len.to_string(),
            "seed" => self.seed.to_string(),
            // `{:?}` on f64 prints the shortest string that parses back exactly.
            "lr" => format!("{:?}", self.lr),
            "batch" => self.batch.to_string(),
            "epochs" => self.epochs.to_string(),
            "inst_norm" => self.inst_norm.to_string(),
            "out" => self.out.display().to_string(),
            _ => return None,
        })
    }

    /// Every key, one per line, in a form [`RunConfig::apply_str`] reads back.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap());
        }
        s
    }

    /// Fills `auto` keys from the dataset's sampling interval.
    pub fn resolve(&self, dataset: &Dataset) -> RunConfig {
        let daily = dataset.daily_period();
        let w0 = self.cycle_len.or(daily).unwrap_or(FALLBACK_CYCLE_LEN);
        let mut r = self.clone();
        r.cycle_len = Some(w0);
        if self.multiscale {
            let k = self.pool_kernel.unwrap_or(daily.unwrap_or(w0));
            r.pool_kernel = Some(k);
            r.weekly_lookback = Some(self.weekly_lookback.unwrap_or(k * self.weekly_cycle_len));
        }
        r
    }

    pub fn weight_mode(&self) -> Result<WeightMode> {
        match (self.seg_scalar_weights, self.seg_per_channel) {
            (false, false) => Ok(WeightMode::PerBin),
            (true, false) => Ok(WeightMode::Scalar),
            (false, true) => Ok(WeightMode::PerChannel),
            (true, true) => Err(Error::Config(
                "seg_scalar_weights and seg_per_channel are mutually exclusive".into(),
            )),
        }
    }

    /// Model configuration for `channels` series. `auto` keys must already be resolved.
    pub fn model_config(&self, channels: usize) -> Result<ModelConfig> {
        let unresolved = |k: &str| Error::Config(format!("{k} is still auto; resolve against a dataset first"));
        let weekly = if self.multiscale {
            Some(WeeklyConfig {
                lookback: self.weekly_lookback.ok_or_else(|| unresolved("weekly_lookback"))?,
                pool_kernel: self.pool_kernel.ok_or_else(|| unresolved("pool_kernel"))?,
                cycle_len: self.weekly_cycle_len,
            })
        } else {
            None
        };
        let cfg = ModelConfig {
            channels,
            lookback: self.lookback,
            horizon: self.horizon,
            cycle_len: self.cycle_len.ok_or_else(|| unresolved("cycle_len"))?,
            segment: SegmentConfig {
                win_len: self.seg_len,
                stride: self.seg_stride,
                window: self.seg_window,
            },
            weight_mode: self.weight_mode()?,
            post_filter: self.seg_post_filter,
            ffn: FfnConfig {
                hidden: self.ffn_hidden,
                linear_only: self.ffn_linear_only,
            },
            variant: self.variant,
            inst_norm: self.inst_norm,
            weekly,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be at least 1".into()));
        }
        Ok(TrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            epochs: self.epochs,
            seed: self.seed,
        })
    }
}

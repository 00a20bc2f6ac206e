//! Model assembly: cycle component, residual predictor, ablation variants,
//! optional weekly branch, and per-window instance normalization.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComplexArray, ParamId, ParamStore, RealArray, Tape, Value, Var};
use crate::data::row_moments;
use crate::error::{Error, Result};
use crate::fecf::{filter_on_tape, identity_filter, replicate_on_tape, zero_basis};
use crate::multiscale::{coarse_horizon, repeat_upsampler, FusionWeights};
use crate::sfpl::{merge_on_tape, FfnConfig, FfnParams, SegmentConfig, SfplParams, WeightMode};
use crate::spectral::{bin_count, WindowKind};

pub const DEFAULT_MOV_KERNEL: usize = 25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    #[default]
    Full,
    /// Cycle component forced to zero.
    NoFecf,
    /// Plain two-layer MLP on the raw residual.
    TwoMlp,
    /// Keep the lowest `cutoff` bins of the residual spectrum.
    Lpf { cutoff: Option<usize> },
    /// One learnable complex gain per bin, shared across channels.
    PlainFilter,
    /// Moving-average trend with a linear trend head in place of the cycle.
    MovStd { kernel: usize },
}

impl Variant {
    fn uses_cycle(self) -> bool {
        !matches!(self, Variant::NoFecf | Variant::MovStd { .. })
    }

    fn uses_cycle_filter(self) -> bool {
        self.uses_cycle() && self != Variant::TwoMlp
    }

    /// Resolved low-pass cutoff for a lookback of `lookback` samples.
    pub fn lpf_cutoff(self, lookback: usize) -> Option<usize> {
        match self {
            Variant::Lpf { cutoff } => Some(cutoff.unwrap_or(lookback / 4 + 1)),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::NoFecf => f.write_str("no_fecf"),
            Variant::TwoMlp => f.write_str("two_mlp"),
            Variant::Lpf { cutoff: None } => f.write_str("lpf"),
            Variant::Lpf { cutoff: Some(k) } => write!(f, "lpf:{k}"),
            Variant::PlainFilter => f.write_str("plain_filter"),
            Variant::MovStd { kernel } if *kernel == DEFAULT_MOV_KERNEL => f.write_str("mov_std"),
            Variant::MovStd { kernel } => write!(f, "mov_std:{kernel}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let number = |a: &str| {
            a.parse::<usize>()
                .map_err(|_| Error::Config(format!("variant {name}: bad argument {a:?}")))
        };
        let v = match (name, arg) {
            ("full", None) => Variant::Full,
            ("no_fecf", None) => Variant::NoFecf,
            ("two_mlp", None) => Variant::TwoMlp,
            ("plain_filter", None) => Variant::PlainFilter,
            ("lpf", None) => Variant::Lpf { cutoff: None },
            ("lpf", Some(a)) => Variant::Lpf { cutoff: Some(number(a)?) },
            ("mov_std", None) => Variant::MovStd { kernel: DEFAULT_MOV_KERNEL },
            ("mov_std", Some(a)) => Variant::MovStd { kernel: number(a)? },
            _ => {
                return Err(Error::Config(format!(
                    "unknown variant {s:?} (expected full, no_fecf, two_mlp, lpf[:K], plain_filter, mov_std[:K])"
                )))
            }
        };
        Ok(v)
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeeklyConfig {
    /// Long lookback `L_w` consumed by the weekly branch.
    pub lookback: usize,
    pub pool_kernel: usize,
    /// Cycle length on the pooled scale.
    pub cycle_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub channels: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub cycle_len: usize,
    pub segment: SegmentConfig,
    pub weight_mode: WeightMode,
    pub post_filter: bool,
    pub ffn: FfnConfig,
    pub variant: Variant,
    pub inst_norm: bool,
    pub weekly: Option<WeeklyConfig>,
}

impl ModelConfig {
    pub fn new(channels: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            channels,
            lookback,
            horizon,
            cycle_len: 24,
            segment: SegmentConfig::default(),
            weight_mode: WeightMode::PerBin,
            post_filter: false,
            ffn: FfnConfig::default(),
            variant: Variant::Full,
            inst_norm: true,
            weekly: None,
        }
    }

    /// Samples of history the model consumes per window.
    pub fn input_len(&self) -> usize {
        self.weekly.as_ref().map_or(self.lookback, |w| w.lookback)
    }

    pub fn validate(&self) -> Result<()> {
        self.branches().map(|_| ())
    }

    /// Resolved configuration of the base branch and, if enabled, the weekly branch.
    pub fn branches(&self) -> Result<(BranchConfig, Option<BranchConfig>)> {
        for (name, v) in [
            ("channels", self.channels),
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("cycle_len", self.cycle_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        let base = BranchConfig {
            lookback: self.lookback,
            horizon: self.horizon,
            cycle_len: self.cycle_len,
            pool_kernel: 1,
            segment: self.segment,
            weight_mode: self.weight_mode,
            post_filter: self.post_filter,
            ffn: self.ffn,
            variant: self.variant,
        };
        base.validate()?;
        let weekly = match &self.weekly {
            None => None,
            Some(w) => {
                if w.lookback < self.lookback {
                    return Err(Error::Config(format!(
                        "weekly_lookback {} shorter than lookback {}",
                        w.lookback, self.lookback
                    )));
                }
                if w.pool_kernel == 0 || w.lookback % w.pool_kernel != 0 {
                    return Err(Error::Config(format!(
                        "pool_kernel {} does not divide weekly_lookback {}",
                        w.pool_kernel, w.lookback
                    )));
                }
                let coarse = w.lookback / w.pool_kernel;
                let segment = if self.segment.segment_count(coarse).is_ok() {
                    self.segment
                } else {
                    SegmentConfig {
                        win_len: coarse,
                        stride: 1,
                        window: WindowKind::Rect,
                    }
                };
                let cfg = BranchConfig {
                    lookback: coarse,
                    horizon: coarse_horizon(self.horizon, w.pool_kernel),
                    cycle_len: w.cycle_len,
                    pool_kernel: w.pool_kernel,
                    segment,
                    variant: Variant::Full,
                    ..base.clone()
                };
                cfg.validate()?;
                Some(cfg)
            }
        };
        Ok((base, weekly))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub cycle_len: usize,
    pub pool_kernel: usize,
    pub segment: SegmentConfig,
    pub weight_mode: WeightMode,
    pub post_filter: bool,
    pub ffn: FfnConfig,
    pub variant: Variant,
}

impl BranchConfig {
    fn validate(&self) -> Result<()> {
        if self.cycle_len == 0 {
            return Err(Error::Config("cycle_len must be at least 1".into()));
        }
        if self.ffn.hidden == 0 && !self.ffn.linear_only {
            return Err(Error::Config("ffn_hidden must be at least 1".into()));
        }
        self.segment.segment_count(self.lookback)?;
        match self.variant {
            Variant::Lpf { .. } => {
                let k = self.variant.lpf_cutoff(self.lookback).unwrap();
                let bins = bin_count(self.lookback);
                if k == 0 || k > bins {
                    return Err(Error::Config(format!("lpf cutoff {k} outside [1, {bins}]")));
                }
            }
            Variant::MovStd { kernel } => {
                if kernel % 2 == 0 || kernel / 2 >= self.lookback {
                    return Err(Error::Config(format!(
                        "mov_std kernel {kernel} must be odd with half-width below lookback {}",
                        self.lookback
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// `(L, L)` matrix `A` with `trend = x A`: centred moving average with
/// reflective padding (`x[-i] = x[i]`, `x[L-1+i] = x[L-1-i]`).
pub fn moving_average_matrix(lookback: usize, kernel: usize) -> Result<RealArray> {
    let half = kernel / 2;
    if kernel % 2 == 0 || half >= lookback {
        return Err(Error::Config(format!(
            "moving-average kernel {kernel} invalid for length {lookback}"
        )));
    }
    let last = lookback as isize - 1;
    let mut a = RealArray::zeros(vec![lookback, lookback]);
    for t in 0..lookback as isize {
        for j in -(half as isize)..=half as isize {
            let mut i = t + j;
            if i < 0 {
                i = -i;
            } else if i > last {
                i = 2 * last - i;
            }
            a.data_mut()[i as usize * lookback + t as usize] += 1.0 / kernel as f64;
        }
    }
    Ok(a)
}

#[derive(Clone, Debug)]
struct Branch {
    cfg: BranchConfig,
    basis: Option<ParamId>,
    cycle_filter: Option<ParamId>,
    sfpl: Option<SfplParams>,
    plain_filter: Option<ParamId>,
    trend: Option<(RealArray, FfnParams)>,
    ffn: FfnParams,
    upsampler: Option<FfnParams>,
    channels: usize,
}

/// Handles produced by one branch pass.
#[derive(Clone, Copy, Debug)]
pub struct BranchTrace {
    pub pred: Var,
    /// Residual entering the frequency stage, `(B, D, L)`.
    pub residual: Var,
    /// Merged residual spectrum, when the branch computes one.
    pub merged: Option<Var>,
}

impl Branch {
    fn init(
        cfg: BranchConfig,
        channels: usize,
        output: usize,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (l, h, v) = (cfg.lookback, cfg.horizon, cfg.variant);
        let basis = v
            .uses_cycle()
            .then(|| store.add(format!("{prefix}basis"), zero_basis(cfg.cycle_len, channels)));
        let cycle_filter = v
            .uses_cycle_filter()
            .then(|| store.add(format!("{prefix}cycle_filter"), identity_filter(h, channels)));
        let sfpl = match v {
            Variant::Full | Variant::NoFecf | Variant::MovStd { .. } => Some(SfplParams::init(
                store,
                prefix,
                &cfg.segment,
                l,
                channels,
                cfg.weight_mode,
                cfg.post_filter,
            )?),
            _ => None,
        };
        let plain_filter = (v == Variant::PlainFilter).then(|| {
            store.add(
                format!("{prefix}plain_filter"),
                ComplexArray::filled(vec![bin_count(l)], Complex64::new(1.0, 0.0)),
            )
        });
        let trend = match v {
            Variant::MovStd { kernel } => {
                let linear = FfnConfig {
                    hidden: 0,
                    linear_only: true,
                };
                let head = FfnParams::init(store, &format!("{prefix}trend."), l, h, linear, rng);
                Some((moving_average_matrix(l, kernel)?, head))
            }
            _ => None,
        };
        let ffn = FfnParams::init(store, prefix, l, h, cfg.ffn, rng);
        let upsampler = (output != h || cfg.pool_kernel > 1).then(|| {
            let w = store.add(format!("{prefix}upsample.w"), repeat_upsampler(output, cfg.pool_kernel));
            let b = store.add(format!("{prefix}upsample.b"), RealArray::zeros(vec![output]));
            FfnParams::Linear { w, b }
        });
        Ok(Self {
            cfg,
            basis,
            cycle_filter,
            sfpl,
            plain_filter,
            trend,
            ffn,
            upsampler,
            channels,
        })
    }

    /// `x`: normalized `(B, D, L)` input; `starts`: absolute index of its first sample.
    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, starts: &[u64]) -> Result<BranchTrace> {
        let (l, h) = (self.cfg.lookback, self.cfg.horizon);
        let shape = tape.shape(x)?.to_vec();
        if shape.len() != 3 || shape[1] != self.channels || shape[2] != l || shape[0] != starts.len() {
            return Err(Error::shape("branch input", &shape, &[starts.len(), self.channels, l]));
        }
        let mut cycle_future = None;
        let mut residual = x;
        if let Some(q) = self.basis {
            let qv = tape.param(store, q);
            let hist = replicate_on_tape(tape, qv, starts, 0, l)?;
            let mut fut = replicate_on_tape(tape, qv, starts, l, h)?;
            if let Some(theta) = self.cycle_filter {
                let tv = tape.param(store, theta);
                fut = filter_on_tape(tape, fut, tv, h)?;
            }
            residual = tape.sub(x, hist)?;
            cycle_future = Some(fut);
        }
        let mut trend_pred = None;
        if let Some((avg, head)) = &self.trend {
            let a = tape.constant(avg.clone());
            let trend = tape.matmul(x, a)?;
            residual = tape.sub(x, trend)?;
            trend_pred = Some(head.forward(tape, store, trend)?);
        }

        let mut merged = None;
        let time = match self.cfg.variant {
            Variant::TwoMlp => residual,
            Variant::Lpf { .. } => {
                let cutoff = self.cfg.variant.lpf_cutoff(l).unwrap();
                let k = bin_count(l);
                let mask: Vec<Complex64> = (0..k)
                    .map(|i| Complex64::new(if i < cutoff { 1.0 } else { 0.0 }, 0.0))
                    .collect();
                let m = tape.constant(ComplexArray::new(vec![k], mask)?);
                let spec = tape.rfft(residual)?;
                let kept = tape.complex_mul(spec, m)?;
                merged = Some(kept);
                tape.irfft(kept, l)?
            }
            Variant::PlainFilter => {
                let phi = tape.param(store, self.plain_filter.unwrap());
                let spec = tape.rfft(residual)?;
                let shaped = tape.complex_mul(spec, phi)?;
                merged = Some(shaped);
                tape.irfft(shaped, l)?
            }
            _ => {
                let params = self.sfpl.as_ref().unwrap();
                let trace = merge_on_tape(tape, store, params, &self.cfg.segment, residual)?;
                merged = trace.merged;
                trace.time
            }
        };
        let mut pred = self.ffn.forward(tape, store, time)?;
        if let Some(c) = cycle_future {
            pred = tape.add(pred, c)?;
        }
        if let Some(t) = trend_pred {
            pred = tape.add(pred, t)?;
        }
        if let Some(up) = &self.upsampler {
            pred = up.forward(tape, store, pred)?;
        }
        Ok(BranchTrace {
            pred,
            residual,
            merged,
        })
    }
}

/// Per-row statistics used to undo instance normalization.
struct RowNorm {
    mean: RealArray,
    std: RealArray,
}

/// Takes the last `len` samples of every `(B, D, N)` row, optionally
/// normalizing each row by its own mean and standard deviation.
fn prepare_rows(x: &RealArray, len: usize, normalize: bool) -> Result<(RealArray, Option<RowNorm>)> {
    let [b, d, n] = *x.shape() else {
        return Err(Error::invalid(format!("model input must be (B, D, L), got {:?}", x.shape())));
    };
    if len > n {
        return Err(Error::invalid(format!("input length {n} shorter than required {len}")));
    }
    let mut data = Vec::with_capacity(b * d * len);
    for row in x.data().chunks_exact(n) {
        data.extend_from_slice(&row[n - len..]);
    }
    if !normalize {
        return Ok((RealArray::new(vec![b, d, len], data)?, None));
    }
    let moments = row_moments(&data, len);
    for (row, (m, s)) in data.chunks_exact_mut(len).zip(&moments) {
        row.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    let stats = RowNorm {
        mean: RealArray::new(vec![b, d, 1], moments.iter().map(|p| p.0).collect())?,
        std: RealArray::new(vec![b, d, 1], moments.iter().map(|p| p.1).collect())?,
    };
    Ok((RealArray::new(vec![b, d, len], data)?, Some(stats)))
}

fn denormalize(tape: &mut Tape, pred: Var, stats: Option<RowNorm>) -> Result<Var> {
    match stats {
        None => Ok(pred),
        Some(s) => {
            let std = tape.constant(s.std);
            let mean = tape.constant(s.mean);
            let scaled = tape.mul(pred, std)?;
            tape.add(scaled, mean)
        }
    }
}

/// Handles produced by a full forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardTrace {
    pub pred: Var,
    /// De-normalized base-branch forecast.
    pub base_pred: Var,
    pub base: BranchTrace,
    pub weekly: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    base: Branch,
    weekly: Option<Branch>,
    fusion: Option<FusionWeights>,
}

impl Model {
    /// Builds a freshly initialized model; weight draws come from a ChaCha8 stream seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let (base_cfg, weekly_cfg) = config.branches()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.channels, config.horizon);
        let base = Branch::init(base_cfg, d, h, &mut store, "base.", &mut rng)?;
        let weekly = weekly_cfg
            .map(|c| Branch::init(c, d, h, &mut store, "weekly.", &mut rng))
            .transpose()?;
        let fusion = weekly.is_some().then(|| FusionWeights::init(&mut store));
        Ok(Self {
            config,
            store,
            base,
            weekly,
            fusion,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn fusion(&self) -> Option<FusionWeights> {
        self.fusion
    }

    /// Total learnable real scalars; complex entries count twice.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Replaces every parameter value by name; shapes must match.
    pub fn load_values(&mut self, values: &[(String, Value)]) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                values.len(),
                self.store.len()
            )));
        }
        for (name, value) in values {
            let p = self
                .store
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
            if p.value.shape() != value.shape() || p.value.is_complex() != value.is_complex() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?}: checkpoint shape {:?}, model shape {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            let id = p.id;
            self.store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    /// `x`: `(B, D, input_len)`; `starts[b]`: absolute index of the first sample of row `b`.
    pub fn forward(&self, tape: &mut Tape, x: &RealArray, starts: &[u64]) -> Result<Var> {
        Ok(self.forward_with(tape, &self.store, x, starts)?.pred)
    }

    /// Forward pass reading parameters from `store` instead of the model's own.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &RealArray,
        starts: &[u64],
    ) -> Result<ForwardTrace> {
        let input = self.config.input_len();
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.config.channels || shape[2] != input || shape[0] != starts.len() {
            return Err(Error::shape("model input", shape, &[starts.len(), self.config.channels, input]));
        }
        let l0 = self.config.lookback;
        let offset = (input - l0) as u64;
        let (xb, stats) = prepare_rows(x, l0, self.config.inst_norm)?;
        let base_starts: Vec<u64> = starts.iter().map(|s| s + offset).collect();
        let xv = tape.constant(xb);
        let base = self.base.forward(tape, store, xv, &base_starts)?;
        let base_pred = denormalize(tape, base.pred, stats)?;

        let Some(weekly) = &self.weekly else {
            return Ok(ForwardTrace {
                pred: base_pred,
                base_pred,
                base,
                weekly: None,
            });
        };
        let k = weekly.cfg.pool_kernel;
        let (xl, stats) = prepare_rows(x, input, self.config.inst_norm)?;
        let mut xv = tape.constant(xl);
        if k > 1 {
            xv = tape.avg_pool(xv, k)?;
        }
        let coarse_starts: Vec<u64> = starts.iter().map(|s| s / k as u64).collect();
        let wk = weekly.forward(tape, store, xv, &coarse_starts)?;
        let weekly_pred = denormalize(tape, wk.pred, stats)?;
        let fusion = self.fusion.as_ref().unwrap();
        let pred = fusion.fuse_on_tape(tape, store, base_pred, weekly_pred)?;
        Ok(ForwardTrace {
            pred,
            base_pred,
            base,
            weekly: Some(weekly_pred),
        })
    }

    /// `(B, D, H)` forecast.
    pub fn predict(&self, x: &RealArray, starts: &[u64]) -> Result<RealArray> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, x, starts)?;
        Ok(tape.real(out)?.clone())
    }

    /// Base-branch and weekly-branch forecasts before fusion.
    pub fn branch_predictions(&self, x: &RealArray, starts: &[u64]) -> Result<(RealArray, Option<RealArray>)> {
        let mut tape = Tape::new();
        let trace = self.forward_with(&mut tape, &self.store, x, starts)?;
        let weekly = trace.weekly.map(|w| tape.real(w).cloned()).transpose()?;
        Ok((tape.real(trace.base_pred)?.clone(), weekly))
    }

    /// `sum((pred - y)^2) / denom` where `denom` is the element count of the full batch.
    pub fn squared_error(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: &RealArray,
        y: &RealArray,
        starts: &[u64],
        denom: f64,
    ) -> Result<Var> {
        let pred = self.forward_with(tape, store, x, starts)?.pred;
        let target = tape.constant(y.clone());
        let e = tape.sub(pred, target)?;
        let e = tape.square(e)?;
        let s = tape.sum(e)?;
        tape.scale(s, 1.0 / denom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_store;
    use rand::Rng;

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> RealArray {
        let n = shape.iter().product();
        RealArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small(variant: Variant) -> ModelConfig {
        ModelConfig {
            cycle_len: 3,
            segment: SegmentConfig {
                win_len: 2,
                stride: 2,
                window: WindowKind::Rect,
            },
            ffn: FfnConfig {
                hidden: 4,
                linear_only: false,
            },
            variant,
            ..ModelConfig::new(2, 8, 3)
        }
    }

    fn perturb(model: &mut Model, rng: &mut ChaCha8Rng) {
        let ids: Vec<ParamId> = model.store().iter().map(|p| p.id).collect();
        for id in ids {
            let mut v = model.store().value(id).clone();
            let c: Vec<f64> = v.components().iter().map(|x| x + rng.gen_range(-0.3..0.3)).collect();
            v.set_components(&c).unwrap();
            model.store_mut().set_value(id, v).unwrap();
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for s in ["full", "no_fecf", "two_mlp", "lpf", "lpf:7", "plain_filter", "mov_std", "mov_std:5"] {
            let v: Variant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(serde_json::from_str::<Variant>(&json).unwrap(), v);
        }
        assert!("lpf:x".parse::<Variant>().is_err());
        assert!("wavelet".parse::<Variant>().is_err());
        assert_eq!(Variant::Lpf { cutoff: None }.lpf_cutoff(96), Some(25));
    }

    #[test]
    fn config_validation() {
        let mut c = small(Variant::MovStd { kernel: 4 });
        assert!(c.validate().is_err());
        c.variant = Variant::MovStd { kernel: 17 };
        assert!(c.validate().is_err());
        c.variant = Variant::Lpf { cutoff: Some(6) };
        assert!(c.validate().is_err());
        c.variant = Variant::Full;
        c.weekly = Some(WeeklyConfig {
            lookback: 12,
            pool_kernel: 5,
            cycle_len: 3,
        });
        assert!(c.validate().is_err());
        c.weekly = Some(WeeklyConfig {
            lookback: 6,
            pool_kernel: 2,
            cycle_len: 3,
        });
        assert!(c.validate().is_err());
    }

    fn bench_count(w: usize, d: usize, l: usize, h: usize, hidden: usize, s: usize) -> usize {
        let (kl, kh) = (l / 2 + 1, h / 2 + 1);
        w * d + 2 * kh * d + s * kl + (l * hidden + hidden) + (hidden * h + h)
    }

    #[test]
    fn parameter_counts() {
        let cfg = ModelConfig::new(7, 96, 96);
        let m = Model::new(cfg.clone(), 1).unwrap();
        assert_eq!(bench_count(24, 7, 96, 96, 512, 16), 100550);
        assert_eq!(m.param_count(), 100550);

        let wide = Model::new(ModelConfig { channels: 14, ..cfg.clone() }, 1).unwrap();
        let ffn = |m: &Model| -> usize {
            m.store().iter().filter(|p| p.name.contains("ffn")).map(|p| p.value.scalar_count()).sum()
        };
        assert_eq!(ffn(&m), ffn(&wide));

        let two = Model::new(ModelConfig { variant: Variant::TwoMlp, ..cfg }, 1).unwrap();
        assert!(two.param_count() < m.param_count());
        assert!(two.store().by_name("base.theta_f").is_none());
        assert!(two.store().by_name("base.cycle_filter").is_none());
    }

    #[test]
    fn fresh_model_is_deterministic_and_zero_cycle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, vec![3, 2, 8]);
        let a = Model::new(small(Variant::Full), 5).unwrap();
        let b = Model::new(small(Variant::Full), 5).unwrap();
        let starts = [0, 4, 11];
        assert_eq!(a.predict(&x, &starts).unwrap(), b.predict(&x, &starts).unwrap());
        let c = Model::new(small(Variant::Full), 6).unwrap();
        assert_ne!(a.predict(&x, &starts).unwrap(), c.predict(&x, &starts).unwrap());
    }

    #[test]
    fn two_mlp_matches_single_segment_full_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, vec![2, 2, 8]);
        let two = Model::new(small(Variant::TwoMlp), 9).unwrap();
        let mut cfg = small(Variant::Full);
        cfg.segment = SegmentConfig {
            win_len: 8,
            stride: 1,
            window: WindowKind::Rect,
        };
        let full = Model::new(cfg, 9).unwrap();
        assert_eq!(two.predict(&x, &[0, 1]).unwrap(), full.predict(&x, &[0, 1]).unwrap());
    }

    #[test]
    fn full_band_lpf_matches_two_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, vec![2, 2, 8]);
        let mut lpf = Model::new(small(Variant::Lpf { cutoff: Some(5) }), 4).unwrap();
        let two = {
            let mut m = Model::new(small(Variant::TwoMlp), 4).unwrap();
            perturb(&mut m, &mut rng);
            m
        };
        for p in two.store().iter() {
            let id = lpf.store().by_name(&p.name).unwrap().id;
            lpf.store_mut().set_value(id, p.value.clone()).unwrap();
        }
        let a = lpf.predict(&x, &[2, 7]).unwrap();
        let b = two.predict(&x, &[2, 7]).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn moving_average_matrix_examples() {
        let a = moving_average_matrix(4, 3).unwrap();
        let x = [1.0, 2.0, 4.0, 8.0];
        let trend: Vec<f64> = (0..4).map(|t| (0..4).map(|n| x[n] * a.at(&[n, t])).sum()).collect();
        let expect = [(2.0 + 1.0 + 2.0) / 3.0, 7.0 / 3.0, 14.0 / 3.0, (4.0 + 8.0 + 4.0) / 3.0];
        for (u, v) in trend.iter().zip(expect) {
            assert!((u - v).abs() < 1e-12);
        }
        assert!(moving_average_matrix(4, 2).is_err());
        assert!(moving_average_matrix(3, 7).is_err());
    }

    #[test]
    fn instance_norm_removes_level_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, vec![2, 2, 8]);
        let mut shifted = x.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v = 3.0 * *v + 10.0);
        let mut m = Model::new(small(Variant::NoFecf), 1).unwrap();
        perturb(&mut m, &mut rng);
        let a = m.predict(&x, &[0, 0]).unwrap();
        let b = m.predict(&shifted, &[0, 0]).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((3.0 * u + 10.0 - v).abs() < 1e-9);
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let variants = [
            Variant::Full,
            Variant::NoFecf,
            Variant::TwoMlp,
            Variant::Lpf { cutoff: Some(3) },
            Variant::PlainFilter,
            Variant::MovStd { kernel: 3 },
        ];
        for v in variants {
            let mut m = Model::new(small(v), 3).unwrap();
            perturb(&mut m, &mut rng);
            let x = random(&mut rng, vec![2, 2, 8]);
            let y = random(&mut rng, vec![2, 2, 3]);
            let starts = [1u64, 5];
            let worst = check_store(
                m.store(),
                |tape, store| m.squared_error(tape, store, &x, &y, &starts, 12.0),
                1e-6,
            )
            .unwrap();
            assert!(worst < 1e-5, "{v}: {worst}");
        }
    }

    fn toy_multiscale() -> ModelConfig {
        ModelConfig {
            channels: 1,
            lookback: 4,
            horizon: 2,
            weekly: Some(WeeklyConfig {
                lookback: 12,
                pool_kernel: 2,
                cycle_len: 3,
            }),
            ..small(Variant::Full)
        }
    }

    #[test]
    fn multiscale_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut m = Model::new(toy_multiscale(), 2).unwrap();
        perturb(&mut m, &mut rng);
        let x = random(&mut rng, vec![2, 1, 12]);
        let y = random(&mut rng, vec![2, 1, 2]);
        let worst = check_store(
            m.store(),
            |tape, store| m.squared_error(tape, store, &x, &y, &[0, 9], 4.0),
            1e-6,
        )
        .unwrap();
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn unit_pool_weekly_branch_equals_plain_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut cfg = small(Variant::Full);
        cfg.weekly = Some(WeeklyConfig {
            lookback: 8,
            pool_kernel: 1,
            cycle_len: 3,
        });
        let mut ms = Model::new(cfg, 1).unwrap();
        perturb(&mut ms, &mut rng);
        let up = ms.store().by_name("weekly.upsample.w");
        assert!(up.is_none());
        let mut plain = Model::new(small(Variant::Full), 1).unwrap();
        for p in plain.store().iter().map(|p| (p.id, p.name.clone())).collect::<Vec<_>>() {
            let src = ms.store().by_name(&p.1.replace("base.", "weekly.")).unwrap().value.clone();
            plain.store_mut().set_value(p.0, src).unwrap();
        }
        let x = random(&mut rng, vec![2, 2, 8]);
        let (_, weekly) = ms.branch_predictions(&x, &[3, 4]).unwrap();
        assert_eq!(weekly.unwrap(), plain.predict(&x, &[3, 4]).unwrap());
    }

    #[test]
    fn disabled_weekly_branch_reduces_to_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut ms = Model::new(toy_multiscale(), 1).unwrap();
        perturb(&mut ms, &mut rng);
        let t1 = ms.fusion().unwrap().theta1;
        let t0 = ms.fusion().unwrap().theta0;
        ms.store_mut().set_value(t0, RealArray::scalar(0.0).into()).unwrap();
        ms.store_mut().set_value(t1, RealArray::scalar(-1000.0).into()).unwrap();
        let x = random(&mut rng, vec![2, 1, 12]);
        let fused = ms.predict(&x, &[0, 6]).unwrap();
        let (base, weekly) = ms.branch_predictions(&x, &[0, 6]).unwrap();
        assert_eq!(fused, base);
        let weekly = weekly.unwrap();
        ms.store_mut().set_value(t1, RealArray::scalar(0.4).into()).unwrap();
        let mixed = ms.predict(&x, &[0, 6]).unwrap();
        for i in 0..mixed.len() {
            let (a, b) = (base.data()[i], weekly.data()[i]);
            assert!(mixed.data()[i] >= a.min(b) - 1e-12 && mixed.data()[i] <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn zero_input_weekly_branch_predicts_zero() {
        let mut cfg = toy_multiscale();
        cfg.inst_norm = false;
        let mut m = Model::new(cfg, 1).unwrap();
        let ids: Vec<(ParamId, String)> = m.store().iter().map(|p| (p.id, p.name.clone())).collect();
        for (id, name) in ids {
            if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                let zero = m.store().value(id).zeros_like();
                m.store_mut().set_value(id, zero).unwrap();
            }
        }
        let (_, weekly) = m.branch_predictions(&RealArray::zeros(vec![1, 1, 12]), &[0]).unwrap();
        assert!(weekly.unwrap().data().iter().all(|&v| v == 0.0));
    }
}

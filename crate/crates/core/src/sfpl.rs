//! Segmented frequency-domain residual learning.
//!
//! The residual lookback is cut into windowed segments that stay at their
//! original offset inside a zero-padded length-`L` frame. Each frame is
//! transformed, the spectra are blended with per-bin softmax weights over the
//! segment axis, the blend is inverted back to time, and a feed-forward
//! projection maps it to the horizon.

use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ComplexArray, ParamId, ParamStore, RealArray, Tape, Var};
use crate::error::{Error, Result};
use crate::layout::{rows_to_time_major, swap_last_complex, swap_last_real, time_major_to_rows};
use crate::spectral::{self, bin_count, make_window, WindowKind, WindowSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub win_len: usize,
    pub stride: usize,
    pub window: WindowKind,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            win_len: 6,
            stride: 6,
            window: WindowKind::Rect,
        }
    }
}

impl SegmentConfig {
    /// Number of segments `s` for a lookback of `lookback` samples.
    pub fn segment_count(&self, lookback: usize) -> Result<usize> {
        let (wl, ws) = (self.win_len, self.stride);
        if wl == 0 || ws == 0 || wl > lookback {
            return Err(Error::Config(format!(
                "segment length {wl} and stride {ws} invalid for lookback {lookback} \
                 (need 1 <= seg_len <= lookback, seg_stride >= 1)"
            )));
        }
        if (lookback - wl) % ws != 0 {
            return Err(Error::Config(format!(
                "segments do not tile the lookback: (L - seg_len) mod seg_stride != 0 \
                 for L={lookback}, seg_len={wl}, seg_stride={ws}"
            )));
        }
        if self.window != WindowKind::Rect && wl < 3 {
            return Err(Error::Config(format!(
                "{} window needs seg_len >= 3, got {wl}",
                self.window
            )));
        }
        Ok((lookback - wl) / ws + 1)
    }

    /// A single rectangular segment covering the whole lookback. The spectral
    /// merge is then exactly the identity and is skipped.
    pub fn is_passthrough(&self, lookback: usize) -> bool {
        self.win_len == lookback && self.window == WindowKind::Rect
    }

    /// `(s, L)` mask holding the window coefficients at each segment's offset.
    pub fn mask(&self, lookback: usize) -> Result<RealArray> {
        let s = self.segment_count(lookback)?;
        let w = make_window(WindowSpec {
            kind: self.window,
            length: self.win_len,
        })?;
        let mut data = vec![0.0; s * lookback];
        for i in 0..s {
            let off = i * self.stride;
            data[i * lookback + off..i * lookback + off + self.win_len].copy_from_slice(&w);
        }
        RealArray::new(vec![s, lookback], data)
    }
}

/// How the segment weights `Theta_F` are shaped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `(s, L/2+1)`, shared across channels.
    #[default]
    PerBin,
    /// `(s, 1)`: one weight per segment.
    Scalar,
    /// `(D, s, L/2+1)`.
    PerChannel,
}

impl WeightMode {
    fn shape(self, segments: usize, bins: usize, channels: usize) -> Vec<usize> {
        match self {
            WeightMode::PerBin => vec![segments, bins],
            WeightMode::Scalar => vec![segments, 1],
            WeightMode::PerChannel => vec![channels, segments, bins],
        }
    }

    fn segment_axis(self) -> usize {
        match self {
            WeightMode::PerChannel => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for WeightMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightMode::PerBin => "per_bin",
            WeightMode::Scalar => "scalar",
            WeightMode::PerChannel => "per_channel",
        })
    }
}

/// Stacked segments `(s, L, D)` and, once transformed, their spectra `(s, L/2+1, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBank {
    pub segments: RealArray,
    pub spectra: Option<ComplexArray>,
}

impl SegmentBank {
    pub fn count(&self) -> usize {
        self.segments.shape()[0]
    }
}

/// Windows each segment into a zero-padded `(L, D)` frame.
pub fn segment_and_pad(r: &RealArray, cfg: &SegmentConfig) -> Result<SegmentBank> {
    let [l, d] = *r.shape() else {
        return Err(Error::invalid(format!("residual must be (L, D), got {:?}", r.shape())));
    };
    let mask = cfg.mask(l)?;
    let s = mask.shape()[0];
    let mut data = vec![0.0; s * l * d];
    for i in 0..s {
        for n in 0..l {
            let m = mask.data()[i * l + n];
            if m == 0.0 {
                continue;
            }
            for ch in 0..d {
                data[(i * l + n) * d + ch] = r.data()[n * d + ch] * m;
            }
        }
    }
    Ok(SegmentBank {
        segments: RealArray::new(vec![s, l, d], data)?,
        spectra: None,
    })
}

/// Transforms every segment frame along time.
pub fn segment_spectra(mut bank: SegmentBank) -> Result<SegmentBank> {
    let [s, l, d] = *bank.segments.shape() else {
        return Err(Error::invalid("segment bank must be (s, L, D)"));
    };
    // (s, L, D) -> (s, D, L) rows, transform, back to (s, K, D)
    let rows = swap_last_real(&bank.segments)?;
    let spec = spectral::rfft_rows(rows.data(), l);
    let spec = ComplexArray::new(vec![s, d, bin_count(l)], spec)?;
    bank.spectra = Some(swap_last_complex(&spec)?);
    Ok(bank)
}

/// Softmax of `theta` along its first (segment) axis.
pub fn segment_weights(theta: &RealArray) -> Result<RealArray> {
    let mut tape = Tape::new();
    let t = tape.constant(theta.clone());
    let w = tape.softmax(t, 0)?;
    Ok(tape.real(w)?.clone())
}

/// `f[k, d] = sum_i softmax_i(theta)[i, k] * F[i, k, d]`.
pub fn merge_spectra(spectra: &ComplexArray, theta: &RealArray) -> Result<ComplexArray> {
    let [s, k, d] = *spectra.shape() else {
        return Err(Error::invalid("segment spectra must be (s, K, D)"));
    };
    let ts = theta.shape();
    if ts.len() != 2 || ts[0] != s || (ts[1] != k && ts[1] != 1) {
        return Err(Error::shape("merge_spectra", spectra.shape(), ts));
    }
    let w = segment_weights(theta)?;
    let wk = ts[1];
    let mut out = vec![Complex64::new(0.0, 0.0); k * d];
    for i in 0..s {
        for bin in 0..k {
            let weight = w.data()[i * wk + if wk == 1 { 0 } else { bin }];
            for ch in 0..d {
                out[bin * d + ch] += spectra.data()[(i * k + bin) * d + ch] * weight;
            }
        }
    }
    ComplexArray::new(vec![k, d], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnConfig {
    pub hidden: usize,
    pub linear_only: bool,
}

impl Default for FfnConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            linear_only: false,
        }
    }
}

/// Concrete feed-forward weights, shared by every channel.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights {
    Mlp {
        w1: RealArray,
        b1: RealArray,
        w2: RealArray,
        b2: RealArray,
    },
    Linear {
        w: RealArray,
        b: RealArray,
    },
}

/// Parameter handles of a feed-forward head inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub enum FfnParams {
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    Linear {
        w: ParamId,
        b: ParamId,
    },
}

fn uniform(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> RealArray {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    RealArray::from_parts(shape, data)
}

impl FfnParams {
    /// Registers weights drawn uniformly in `+-1/sqrt(fan_in)`, zero biases.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        cfg: FfnConfig,
        rng: &mut impl Rng,
    ) -> Self {
        if cfg.linear_only {
            let w = store.add(format!("{prefix}ffn.w"), uniform(rng, vec![input, output], input));
            let b = store.add(format!("{prefix}ffn.b"), RealArray::zeros(vec![output]));
            FfnParams::Linear { w, b }
        } else {
            let h = cfg.hidden;
            let w1 = store.add(format!("{prefix}ffn.w1"), uniform(rng, vec![input, h], input));
            let b1 = store.add(format!("{prefix}ffn.b1"), RealArray::zeros(vec![h]));
            let w2 = store.add(format!("{prefix}ffn.w2"), uniform(rng, vec![h, output], h));
            let b2 = store.add(format!("{prefix}ffn.b2"), RealArray::zeros(vec![output]));
            FfnParams::Mlp { w1, b1, w2, b2 }
        }
    }

    /// `(..., L) -> (..., H)` applied to the last axis.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, u: Var) -> Result<Var> {
        match *self {
            FfnParams::Mlp { w1, b1, w2, b2 } => {
                let (w1, b1) = (tape.param(store, w1), tape.param(store, b1));
                let (w2, b2) = (tape.param(store, w2), tape.param(store, b2));
                let h = tape.matmul(u, w1)?;
                let h = tape.add(h, b1)?;
                let h = tape.relu(h)?;
                let o = tape.matmul(h, w2)?;
                tape.add(o, b2)
            }
            FfnParams::Linear { w, b } => {
                let (w, b) = (tape.param(store, w), tape.param(store, b));
                let o = tape.matmul(u, w)?;
                tape.add(o, b)
            }
        }
    }

    fn install(weights: &FfnWeights, store: &mut ParamStore) -> Self {
        match weights {
            FfnWeights::Mlp { w1, b1, w2, b2 } => FfnParams::Mlp {
                w1: store.add("ffn.w1", w1.clone()),
                b1: store.add("ffn.b1", b1.clone()),
                w2: store.add("ffn.w2", w2.clone()),
                b2: store.add("ffn.b2", b2.clone()),
            },
            FfnWeights::Linear { w, b } => FfnParams::Linear {
                w: store.add("ffn.w", w.clone()),
                b: store.add("ffn.b", b.clone()),
            },
        }
    }
}

/// Per-channel projection `out[:, d] = W2^T relu(W1^T u[:, d] + b1) + b2` on `(L, D)`.
pub fn ffn_project(u: &RealArray, weights: &FfnWeights) -> Result<RealArray> {
    let mut store = ParamStore::new();
    let ffn = FfnParams::install(weights, &mut store);
    let rows = time_major_to_rows(u)?;
    let mut tape = Tape::new();
    let x = tape.constant(rows);
    let out = ffn.forward(&mut tape, &store, x)?;
    rows_to_time_major(tape.real(out)?)
}

/// Learnable state of the segment merge.
#[derive(Clone, Debug, PartialEq)]
pub struct SfplParams {
    pub theta_f: ParamId,
    pub post_filter: Option<ParamId>,
    pub mode: WeightMode,
}

impl SfplParams {
    /// Zero weights (uniform softmax) and, if requested, an identity post-merge filter.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &SegmentConfig,
        lookback: usize,
        channels: usize,
        mode: WeightMode,
        post_filter: bool,
    ) -> Result<Self> {
        let s = cfg.segment_count(lookback)?;
        let k = bin_count(lookback);
        let theta_f = store.add(
            format!("{prefix}theta_f"),
            RealArray::zeros(mode.shape(s, k, channels)),
        );
        let post_filter = post_filter.then(|| {
            store.add(
                format!("{prefix}post_filter"),
                ComplexArray::filled(vec![k], Complex64::new(1.0, 0.0)),
            )
        });
        Ok(Self {
            theta_f,
            post_filter,
            mode,
        })
    }
}

/// Intermediate handles of one merge pass, kept for spectrum reporting.
#[derive(Clone, Copy, Debug)]
pub struct MergeTrace {
    /// Weighted spectrum `f`, `(B, D, L/2+1)`; `None` on the pass-through path.
    pub merged: Option<Var>,
    /// `irfft(f)`, `(B, D, L)`.
    pub time: Var,
}

/// Segments, transforms and merges a `(B, D, L)` residual.
pub fn merge_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    params: &SfplParams,
    cfg: &SegmentConfig,
    r: Var,
) -> Result<MergeTrace> {
    let shape = tape.shape(r)?.to_vec();
    let [b, d, l] = shape[..] else {
        return Err(Error::invalid(format!("residual must be (B, D, L), got {shape:?}")));
    };
    if cfg.is_passthrough(l) && params.post_filter.is_none() {
        return Ok(MergeTrace { merged: None, time: r });
    }
    let mask = tape.constant(cfg.mask(l)?);
    let framed = tape.reshape(r, &[b, d, 1, l])?;
    let segments = tape.mul(framed, mask)?;
    let spectra = tape.rfft(segments)?;
    let theta = tape.param(store, params.theta_f);
    let weights = tape.softmax(theta, params.mode.segment_axis())?;
    let weighted = tape.real_complex_mul(weights, spectra)?;
    let mut merged = tape.sum_axis(weighted, 2)?;
    if let Some(pf) = params.post_filter {
        let phi = tape.param(store, pf);
        merged = tape.complex_mul(merged, phi)?;
    }
    let time = tape.irfft(merged, l)?;
    Ok(MergeTrace {
        merged: Some(merged),
        time,
    })
}

/// Full residual predictor on `(L, D)`: segment, merge, invert, project.
pub fn sfpl_forward(
    r: &RealArray,
    cfg: &SegmentConfig,
    theta: &RealArray,
    ffn: &FfnWeights,
) -> Result<RealArray> {
    let [l, d] = *r.shape() else {
        return Err(Error::invalid(format!("residual must be (L, D), got {:?}", r.shape())));
    };
    let s = cfg.segment_count(l)?;
    let mode = match theta.shape() {
        [a, k] if *a == s && *k == bin_count(l) => WeightMode::PerBin,
        [a, 1] if *a == s => WeightMode::Scalar,
        other => return Err(Error::shape("sfpl_forward", &[s, bin_count(l)], other)),
    };
    let mut store = ParamStore::new();
    let theta_f = store.add("theta_f", theta.clone());
    let params = SfplParams {
        theta_f,
        post_filter: None,
        mode,
    };
    let head = FfnParams::install(ffn, &mut store);
    let rows = time_major_to_rows(r)?.reshape(vec![1, d, l])?;
    let mut tape = Tape::new();
    let x = tape.constant(rows);
    let trace = merge_on_tape(&mut tape, &store, &params, cfg, x)?;
    let out = head.forward(&mut tape, &store, trace.time)?;
    let h = *tape.shape(out)?.last().unwrap();
    rows_to_time_major(&tape.real(out)?.reshape(vec![d, h])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rect(win_len: usize, stride: usize) -> SegmentConfig {
        SegmentConfig {
            win_len,
            stride,
            window: WindowKind::Rect,
        }
    }

    fn column(values: &[f64]) -> RealArray {
        RealArray::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> RealArray {
        let n = shape.iter().product();
        RealArray::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn tiling_example() {
        let bank = segment_and_pad(&column(&[1.0, 2.0, 3.0, 4.0]), &rect(2, 2)).unwrap();
        assert_eq!(bank.count(), 2);
        assert_eq!(bank.segments.data(), &[1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn config_validation() {
        let err = rect(4, 3).segment_count(12).unwrap_err().to_string();
        assert!(err.contains("L=12") && err.contains("seg_len=4") && err.contains("seg_stride=3"), "{err}");
        assert!(rect(0, 1).segment_count(4).is_err());
        assert!(rect(5, 1).segment_count(4).is_err());
        let hann2 = SegmentConfig { win_len: 2, stride: 2, window: WindowKind::Hann };
        assert!(hann2.segment_count(4).is_err());
        let hann3 = SegmentConfig { win_len: 3, stride: 3, window: WindowKind::Hann };
        assert_eq!(hann3.segment_count(9).unwrap(), 3);
        assert_eq!(SegmentConfig::default().segment_count(96).unwrap(), 16);
    }

    #[test]
    fn partition_and_spectral_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random(&mut rng, vec![12, 3]);
        let bank = segment_spectra(segment_and_pad(&r, &rect(4, 4)).unwrap()).unwrap();
        let (s, l, d) = (3, 12, 3);
        let mut total = vec![0.0; l * d];
        for i in 0..s {
            for j in 0..l * d {
                total[j] += bank.segments.data()[i * l * d + j];
            }
        }
        assert_eq!(total, r.data());

        let spectra = bank.spectra.unwrap();
        let k = bin_count(l);
        let full = spectral::rfft_rows(time_major_to_rows(&r).unwrap().data(), l);
        for bin in 0..k {
            for ch in 0..d {
                let sum: Complex64 = (0..s).map(|i| spectra.data()[(i * k + bin) * d + ch]).sum();
                assert!((sum - full[ch * k + bin]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn single_segment_and_zero_input_spectra() {
        let r = column(&[0.5, -1.0, 2.0, 0.25, 3.0]);
        let bank = segment_spectra(segment_and_pad(&r, &rect(5, 1)).unwrap()).unwrap();
        let direct = spectral::rfft(&[0.5, -1.0, 2.0, 0.25, 3.0]).unwrap();
        for (a, b) in bank.spectra.unwrap().data().iter().zip(direct.bins()) {
            assert!((a - b).norm() < 1e-12);
        }
        let zeros = segment_spectra(segment_and_pad(&column(&[0.0; 6]), &rect(3, 3)).unwrap()).unwrap();
        assert!(zeros.spectra.unwrap().data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn merge_examples() {
        let f = ComplexArray::new(vec![2, 1, 1], vec![Complex64::new(3.0, 0.0), Complex64::new(1.0, 0.0)]).unwrap();
        let theta = RealArray::new(vec![2, 1], vec![3f64.ln(), 0.0]).unwrap();
        let w = segment_weights(&theta).unwrap();
        assert!((w.data()[0] - 0.75).abs() < 1e-12 && (w.data()[1] - 0.25).abs() < 1e-12);
        let merged = merge_spectra(&f, &theta).unwrap();
        assert!((merged.data()[0] - Complex64::new(2.5, 0.0)).norm() < 1e-12);

        let single = ComplexArray::new(vec![1, 2, 1], vec![Complex64::new(1.0, 2.0), Complex64::new(-3.0, 0.5)]).unwrap();
        let one = merge_spectra(&single, &RealArray::new(vec![1, 2], vec![0.7, -4.0]).unwrap()).unwrap();
        assert_eq!(one.data(), single.data());

        let uniform = merge_spectra(&f, &RealArray::zeros(vec![2, 1])).unwrap();
        assert!((uniform.data()[0] - Complex64::new(2.0, 0.0)).norm() < 1e-12);

        assert!(merge_spectra(&f, &RealArray::zeros(vec![3, 1])).is_err());
    }

    #[test]
    fn ffn_examples() {
        let (l, h, hidden) = (4, 3, 1);
        let zero = FfnWeights::Mlp {
            w1: RealArray::zeros(vec![l, hidden]),
            b1: RealArray::zeros(vec![hidden]),
            w2: RealArray::zeros(vec![hidden, h]),
            b2: RealArray::zeros(vec![h]),
        };
        let u = RealArray::new(vec![l, 2], vec![2.0, 5.0, 1.0, 1.0, -1.0, 0.0, 3.0, 2.0]).unwrap();
        assert!(ffn_project(&u, &zero).unwrap().data().iter().all(|&v| v == 0.0));

        let mut w1 = RealArray::zeros(vec![l, hidden]);
        w1.data_mut()[0] = 1.0;
        let picker = FfnWeights::Mlp {
            w1,
            b1: RealArray::zeros(vec![hidden]),
            w2: RealArray::filled(vec![hidden, h], 1.0),
            b2: RealArray::zeros(vec![h]),
        };
        let out = ffn_project(&u, &picker).unwrap();
        assert_eq!(out.shape(), &[h, 2]);
        for step in 0..h {
            assert_eq!(out.at(&[step, 0]), 2.0);
            assert_eq!(out.at(&[step, 1]), 5.0);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let shared = FfnWeights::Mlp {
            w1: random(&mut rng, vec![l, 5]),
            b1: random(&mut rng, vec![5]),
            w2: random(&mut rng, vec![5, h]),
            b2: random(&mut rng, vec![h]),
        };
        let twin = RealArray::new(vec![l, 2], vec![0.3, 0.3, -0.2, -0.2, 0.9, 0.9, 0.1, 0.1]).unwrap();
        let out = ffn_project(&twin, &shared).unwrap();
        for step in 0..h {
            assert_eq!(out.at(&[step, 0]), out.at(&[step, 1]));
        }
        assert!(ffn_project(&RealArray::zeros(vec![5, 1]), &shared).is_err());
    }

    #[test]
    fn forward_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (l, h) = (8, 3);
        let ffn = FfnWeights::Mlp {
            w1: random(&mut rng, vec![l, 6]),
            b1: random(&mut rng, vec![6]),
            w2: random(&mut rng, vec![6, h]),
            b2: random(&mut rng, vec![h]),
        };
        let zero = sfpl_forward(&RealArray::zeros(vec![l, 2]), &rect(4, 4), &RealArray::zeros(vec![2, 5]), &ffn).unwrap();
        let bias_only = ffn_project(&RealArray::zeros(vec![l, 2]), &ffn).unwrap();
        assert_eq!(zero, bias_only);

        let r = random(&mut rng, vec![l, 2]);
        let collapsed = sfpl_forward(&r, &rect(l, 1), &RealArray::zeros(vec![1, 5]), &ffn).unwrap();
        assert_eq!(collapsed, ffn_project(&r, &ffn).unwrap());
    }

    #[test]
    fn weighted_spectrum_amplitude_is_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&mut rng, vec![12, 2]);
        let bank = segment_spectra(segment_and_pad(&r, &rect(3, 3)).unwrap()).unwrap();
        let spectra = bank.spectra.unwrap();
        let theta = random(&mut rng, vec![4, 7]);
        let f = merge_spectra(&spectra, &theta).unwrap();
        for bin in 0..7 {
            for ch in 0..2 {
                let max = (0..4).map(|i| spectra.data()[(i * 7 + bin) * 2 + ch].norm()).fold(0.0, f64::max);
                assert!(f.data()[bin * 2 + ch].norm() <= max + 1e-12);
            }
        }
    }

    #[test]
    fn unweighted_sum_reconstructs_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r = random(&mut rng, vec![12, 2]);
        let spectra = segment_spectra(segment_and_pad(&r, &rect(3, 3)).unwrap())
            .unwrap()
            .spectra
            .unwrap();
        let (k, d) = (7, 2);
        let mut rows = Vec::new();
        for ch in 0..d {
            for bin in 0..k {
                rows.push((0..4).map(|i| spectra.data()[(i * k + bin) * d + ch]).sum::<Complex64>());
            }
        }
        let back = spectral::irfft_rows(&rows, 12);
        let back = rows_to_time_major(&RealArray::new(vec![d, 12], back).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    fn toy_store(rng: &mut ChaCha8Rng, post_filter: bool) -> (ParamStore, SfplParams, FfnParams) {
        let mut store = ParamStore::new();
        let params = SfplParams::init(&mut store, "", &rect(4, 4), 8, 1, WeightMode::PerBin, post_filter).unwrap();
        let theta = random(rng, vec![2, 5]);
        store.set_value(params.theta_f, theta.into()).unwrap();
        let ffn = FfnParams::init(&mut store, "", 8, 2, FfnConfig { hidden: 3, linear_only: false }, rng);
        (store, params, ffn)
    }

    fn toy_loss(
        params: &SfplParams,
        ffn: &FfnParams,
        x: &RealArray,
        y: &RealArray,
    ) -> impl Fn(&mut Tape, &ParamStore) -> Result<Var> {
        let (params, ffn) = (params.clone(), ffn.clone());
        let (x, y) = (x.clone(), y.clone());
        move |tape, store| {
            let xv = tape.constant(x.clone());
            let trace = merge_on_tape(tape, store, &params, &rect(4, 4), xv)?;
            let out = ffn.forward(tape, store, trace.time)?;
            let yv = tape.constant(y.clone());
            let e = tape.sub(out, yv)?;
            let e = tape.square(e)?;
            tape.mean(e)
        }
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for post_filter in [false, true] {
            let (store, params, ffn) = toy_store(&mut rng, post_filter);
            let x = random(&mut rng, vec![1, 1, 8]);
            let y = random(&mut rng, vec![1, 1, 2]);
            let loss = toy_loss(&params, &ffn, &x, &y);
            let worst = crate::autodiff::gradcheck::check_store(&store, &loss, 1e-6).unwrap();
            assert!(worst < 1e-5, "relative error {worst}");

            let mut tape = Tape::new();
            let l = loss(&mut tape, &store).unwrap();
            let grads = tape.backward(l).unwrap();
            for p in store.iter() {
                let g = grads.get(p.id).expect("missing gradient");
                assert!(g.all_finite(), "{}", p.name);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn softmax_weights_sum_to_one(vals in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let theta = RealArray::new(vec![3, 4], vals).unwrap();
            let w = segment_weights(&theta).unwrap();
            for bin in 0..4 {
                let total: f64 = (0..3).map(|i| w.data()[i * 4 + bin]).sum();
                proptest::prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }
}

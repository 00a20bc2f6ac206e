//! Built-in property suites: per-op and end-to-end gradients against finite
//! differences, transform identities, adjoint identities, and the
//! segmentation / softmax / fusion invariants.

use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_store, DEFAULT_STEP};
use crate::autodiff::{ComplexArray, ParamStore, RealArray, Tape, Var};
use crate::error::Result;
use crate::model::{Model, ModelConfig, WeeklyConfig};
use crate::multiscale::{fuse, FusionWeights};
use crate::sfpl::{segment_and_pad, segment_spectra, segment_weights, FfnConfig, SegmentConfig};
use crate::spectral::{self, bin_count, circular_convolve, WindowKind};

pub const GRAD_TOL: f64 = 1e-5;
pub const ROUND_TRIP_TOL: f64 = 1e-10;
pub const IDENTITY_TOL: f64 = 1e-9;
pub const SOFTMAX_TOL: f64 = 1e-12;

/// Deliberate defects used to prove the suites can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Replaces the forward-transform adjoint with one that conjugates its input.
    RfftAdjoint,
}

#[derive(Clone, Debug)]
pub struct SelfcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SelfcheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            seed: 0x5e1f,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// First offending case, if any.
    pub failure: Option<String>,
    pub secs: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelfcheckReport {
    pub suites: Vec<SuiteResult>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SuiteResult> {
        self.suites.iter().filter(|s| !s.passed())
    }
}

impl fmt::Display for SelfcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.suites {
            writeln!(
                f,
                "{:<6} {:<22} cases={:<5} max_err={:.3e} tol={:.0e} ({:.2}s)",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.cases,
                s.max_error,
                s.tolerance,
                s.secs
            )?;
            if let Some(msg) = &s.failure {
                writeln!(f, "       {}: {msg}", s.name)?;
            }
        }
        Ok(())
    }
}

struct Suite {
    name: &'static str,
    tolerance: f64,
    cases: usize,
    max_error: f64,
    failure: Option<String>,
    t0: Instant,
}

impl Suite {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            cases: 0,
            max_error: 0.0,
            failure: None,
            t0: Instant::now(),
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, outcome: Result<f64>) {
        self.cases += 1;
        match outcome {
            Ok(err) => {
                self.max_error = self.max_error.max(err);
                if (err > self.tolerance || !err.is_finite()) && self.failure.is_none() {
                    self.failure = Some(format!("{}: error {err:.3e} exceeds {:.0e}", label(), self.tolerance));
                }
            }
            Err(e) => {
                if self.failure.is_none() {
                    self.failure = Some(format!("{}: {e}", label()));
                }
            }
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            cases: self.cases,
            max_error: self.max_error,
            tolerance: self.tolerance,
            failure: self.failure,
            secs: self.t0.elapsed().as_secs_f64(),
        }
    }
}

pub fn run(opts: &SelfcheckOptions) -> SelfcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let trials = opts.trials.max(1);
    SelfcheckReport {
        suites: vec![
            op_gradients(&mut rng, trials),
            model_gradients(&mut rng, trials),
            fft_round_trip(&mut rng),
            fft_identities(&mut rng),
            rfft_adjoint(&mut rng, opts.fault),
            irfft_adjoint(&mut rng),
            segmentation(&mut rng),
            softmax_fusion(&mut rng, trials),
        ],
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn real(rng: &mut ChaCha8Rng, shape: &[usize]) -> RealArray {
    RealArray::new(shape.to_vec(), uniform(rng, shape.iter().product())).unwrap()
}

fn complex(rng: &mut ChaCha8Rng, shape: &[usize]) -> ComplexArray {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    ComplexArray::new(shape.to_vec(), data).unwrap()
}

/// Scalar loss `sum(w * v)` with fixed pseudo-random weights; complex values
/// are first mapped back to the real line by an odd-length inverse transform,
/// which keeps every imaginary part above DC in play.
fn project(tape: &mut Tape, v: Var) -> Result<Var> {
    let v = if tape.value(v)?.is_complex() {
        let k = *tape.shape(v)?.last().unwrap();
        tape.irfft(v, 2 * k - 1)?
    } else {
        v
    };
    let shape = tape.shape(v)?.to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.5 + (1.7 * i as f64 + 0.3).sin()).collect();
    let w = tape.constant(RealArray::new(shape, w)?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

type Build = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

struct OpCase {
    store: ParamStore,
    build: Build,
}

fn leaves(tape: &mut Tape, store: &ParamStore) -> Vec<Var> {
    store.iter().map(|p| tape.param(store, p.id)).collect()
}

fn op_case(
    inputs: Vec<crate::autodiff::Value>,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    let mut store = ParamStore::new();
    for (i, v) in inputs.into_iter().enumerate() {
        store.add(format!("in{i}"), v);
    }
    OpCase {
        store,
        build: Box::new(move |tape, store| {
            let xs = leaves(tape, store);
            let out = f(tape, &xs)?;
            project(tape, out)
        }),
    }
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> RealArray {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    RealArray::new(shape.to_vec(), data).unwrap()
}

fn make_op_case(op: &str, rng: &mut ChaCha8Rng) -> OpCase {
    let r = |rng: &mut ChaCha8Rng, s: &[usize]| real(rng, s).into();
    let c = |rng: &mut ChaCha8Rng, s: &[usize]| complex(rng, s).into();
    match op {
        "add" => op_case(vec![r(rng, &[2, 3]), r(rng, &[3])], |t, x| t.add(x[0], x[1])),
        "sub" => op_case(vec![r(rng, &[2, 1, 3]), r(rng, &[2, 1])], |t, x| t.sub(x[0], x[1])),
        "mul" => op_case(vec![r(rng, &[2, 3]), r(rng, &[2, 1])], |t, x| t.mul(x[0], x[1])),
        "complex_add" => op_case(vec![c(rng, &[2, 3]), c(rng, &[3])], |t, x| t.complex_add(x[0], x[1])),
        "complex_mul" => op_case(vec![c(rng, &[2, 3]), c(rng, &[2, 1])], |t, x| t.complex_mul(x[0], x[1])),
        "real_complex_mul" => op_case(vec![r(rng, &[1, 3]), c(rng, &[2, 3])], |t, x| {
            t.real_complex_mul(x[0], x[1])
        }),
        "scale" => op_case(vec![r(rng, &[4])], |t, x| t.scale(x[0], -1.7)),
        "complex_scale" => op_case(vec![c(rng, &[2, 2])], |t, x| t.scale(x[0], 0.6)),
        "matmul" => op_case(vec![r(rng, &[2, 2, 3]), r(rng, &[3, 4])], |t, x| t.matmul(x[0], x[1])),
        "relu" => op_case(vec![away_from_zero(rng, &[2, 4]).into()], |t, x| t.relu(x[0])),
        "square" => op_case(vec![r(rng, &[5])], |t, x| t.square(x[0])),
        "sum" => op_case(vec![r(rng, &[2, 3])], |t, x| t.sum(x[0])),
        "mean" => op_case(vec![r(rng, &[2, 3])], |t, x| t.mean(x[0])),
        "sum_axis" => op_case(vec![r(rng, &[2, 3, 4])], |t, x| t.sum_axis(x[0], 1)),
        "mean_axis" => op_case(vec![c(rng, &[3, 2])], |t, x| t.mean_axis(x[0], 0)),
        "softmax" => {
            let axis = rng.gen_range(0..2);
            op_case(vec![r(rng, &[3, 4])], move |t, x| t.softmax(x[0], axis))
        }
        "reshape" => op_case(vec![r(rng, &[2, 6])], |t, x| t.reshape(x[0], &[3, 4])),
        "gather" => {
            let index: Vec<usize> = (0..8).map(|_| rng.gen_range(0..6)).collect();
            let index = Arc::new(index);
            op_case(vec![r(rng, &[6])], move |t, x| t.gather(x[0], index.clone(), &[2, 4]))
        }
        "slice" => op_case(vec![r(rng, &[3, 5])], |t, x| t.slice(x[0], 1, 1, 3)),
        "concat" => op_case(vec![r(rng, &[2, 3]), r(rng, &[2, 2])], |t, x| t.concat(x[0], x[1], 1)),
        "avg_pool" => op_case(vec![r(rng, &[2, 6])], |t, x| t.avg_pool(x[0], 3)),
        "rfft" => {
            let n = rng.gen_range(1..=16);
            op_case(vec![r(rng, &[2, n])], |t, x| t.rfft(x[0]))
        }
        "irfft" => {
            let n = rng.gen_range(1..=16);
            op_case(vec![c(rng, &[2, bin_count(n)])], move |t, x| t.irfft(x[0], n))
        }
        other => unreachable!("no case for op {other}"),
    }
}

pub const OPS: [&str; 23] = [
    "add",
    "sub",
    "mul",
    "complex_add",
    "complex_mul",
    "real_complex_mul",
    "scale",
    "complex_scale",
    "matmul",
    "relu",
    "square",
    "sum",
    "mean",
    "sum_axis",
    "mean_axis",
    "softmax",
    "reshape",
    "gather",
    "slice",
    "concat",
    "avg_pool",
    "rfft",
    "irfft",
];

fn op_gradients(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut suite = Suite::new("op gradients", GRAD_TOL);
    for op in OPS {
        for trial in 0..trials {
            let case = make_op_case(op, rng);
            let outcome = check_store(&case.store, |t, s| (case.build)(t, s), DEFAULT_STEP);
            suite.record(|| format!("{op} (trial {trial})"), outcome);
        }
    }
    suite.finish()
}

fn perturb(model: &mut Model, rng: &mut ChaCha8Rng, scale: f64) -> Result<()> {
    let ids: Vec<_> = model.store().iter().map(|p| p.id).collect();
    for id in ids {
        let mut v = model.store().value(id).clone();
        let c: Vec<f64> = v.components().iter().map(|x| x + scale * rng.gen_range(-1.0..1.0)).collect();
        v.set_components(&c)?;
        model.store_mut().set_value(id, v)?;
    }
    Ok(())
}

fn model_loss(model: &Model, rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = model.config();
    let b = 2;
    let d = cfg.channels;
    let x = real(rng, &[b, d, cfg.input_len()]);
    let y = real(rng, &[b, d, cfg.horizon]);
    let starts: Vec<u64> = (0..b).map(|_| rng.gen_range(0..1000)).collect();
    check_store(
        model.store(),
        |t, s| model.squared_error(t, s, &x, &y, &starts, (b * d * cfg.horizon) as f64),
        DEFAULT_STEP,
    )
}

fn model_gradients(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut suite = Suite::new("model gradients", GRAD_TOL);
    let windows = [WindowKind::Rect, WindowKind::Hann, WindowKind::Hamming];
    for trial in 0..trials {
        let cfg = ModelConfig {
            cycle_len: rng.gen_range(2..=5),
            segment: SegmentConfig {
                win_len: 4,
                stride: 4,
                window: windows[trial % 3],
            },
            post_filter: trial % 2 == 1,
            ffn: FfnConfig {
                hidden: 4,
                linear_only: false,
            },
            inst_norm: trial % 4 != 3,
            ..ModelConfig::new(2, 12, rng.gen_range(2..=6))
        };
        let outcome = Model::new(cfg, trial as u64).and_then(|mut m| {
            perturb(&mut m, rng, 0.3)?;
            model_loss(&m, rng)
        });
        suite.record(|| format!("single-scale model (trial {trial})"), outcome);
    }
    for trial in 0..trials {
        let cfg = ModelConfig {
            cycle_len: 2,
            segment: SegmentConfig {
                win_len: 2,
                stride: 2,
                window: WindowKind::Rect,
            },
            ffn: FfnConfig {
                hidden: 3,
                linear_only: false,
            },
            weekly: Some(WeeklyConfig {
                lookback: 12,
                pool_kernel: 2,
                cycle_len: 3,
            }),
            ..ModelConfig::new(1, 4, 2)
        };
        let outcome = Model::new(cfg, 100 + trial as u64).and_then(|mut m| {
            perturb(&mut m, rng, 0.3)?;
            model_loss(&m, rng)
        });
        suite.record(|| format!("multiscale model (trial {trial})"), outcome);
    }
    suite.finish()
}

fn direct_dft(x: &[f64]) -> Vec<Complex64> {
    let n = x.len();
    (0..bin_count(n))
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(t, &v)| {
                    let a = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                    Complex64::new(v * a.cos(), v * a.sin())
                })
                .sum()
        })
        .collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn fft_round_trip(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("fft round trip", ROUND_TRIP_TOL);
    for n in 1..=32 {
        let x = uniform(rng, n);
        suite.record(
            || format!("n={n}"),
            spectral::rfft(&x)
                .and_then(|s| spectral::irfft(&s, n))
                .map(|y| max_abs_diff(&x, &y)),
        );
    }
    suite.finish()
}

fn fft_identities(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("fft identities", IDENTITY_TOL);
    for n in 1..=32 {
        let x = uniform(rng, n);
        let h = uniform(rng, n);
        suite.record(
            || format!("direct transform n={n}"),
            spectral::rfft(&x).map(|s| {
                s.bins()
                    .iter()
                    .zip(direct_dft(&x))
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max)
            }),
        );
        suite.record(
            || format!("parseval n={n}"),
            spectral::rfft(&x).map(|s| {
                let time: f64 = x.iter().map(|v| v * v).sum();
                let freq: f64 = s
                    .bins()
                    .iter()
                    .enumerate()
                    .map(|(k, z)| if k == 0 || 2 * k == n { 1.0 } else { 2.0 } * z.norm_sqr())
                    .sum::<f64>()
                    / n as f64;
                (time - freq).abs() / time.max(1.0)
            }),
        );
        suite.record(
            || format!("convolution theorem n={n}"),
            circular_convolve(&x, &h).map(|y| {
                let direct: Vec<f64> = (0..n)
                    .map(|i| (0..n).map(|j| x[j] * h[(i + n - j) % n]).sum())
                    .collect();
                max_abs_diff(&y, &direct)
            }),
        );
    }
    suite.finish()
}

fn corrupted_rfft_adjoint(grad: &[Complex64], n: usize) -> Vec<f64> {
    let conj: Vec<Complex64> = grad.iter().map(|z| z.conj()).collect();
    spectral::rfft_adjoint_rows(&conj, n)
}

fn real_inner(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

fn rfft_adjoint(rng: &mut ChaCha8Rng, fault: Option<Fault>) -> SuiteResult {
    let mut suite = Suite::new("rfft adjoint", IDENTITY_TOL);
    let adjoint: fn(&[Complex64], usize) -> Vec<f64> = match fault {
        Some(Fault::RfftAdjoint) => corrupted_rfft_adjoint,
        None => spectral::rfft_adjoint_rows,
    };
    for n in 1..=32 {
        let x = uniform(rng, 3 * n);
        let y = complex(rng, &[3 * bin_count(n)]);
        let fx = spectral::rfft_rows(&x, n);
        let lhs = real_inner(&fx, y.data());
        let rhs: f64 = x.iter().zip(adjoint(y.data(), n)).map(|(a, b)| a * b).sum();
        suite.record(|| format!("<F x, y> = <x, F* y> at n={n}"), Ok((lhs - rhs).abs() / lhs.abs().max(1.0)));
    }
    suite.finish()
}

fn irfft_adjoint(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("irfft adjoint", IDENTITY_TOL);
    for n in 1..=32 {
        let y = complex(rng, &[3 * bin_count(n)]);
        let g = uniform(rng, 3 * n);
        let lhs: f64 = spectral::irfft_rows(y.data(), n).iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs = real_inner(y.data(), &spectral::irfft_adjoint_rows(&g, n));
        suite.record(|| format!("<G y, g> = <y, G* g> at n={n}"), Ok((lhs - rhs).abs() / lhs.abs().max(1.0)));
    }
    suite.finish()
}

fn segmentation(rng: &mut ChaCha8Rng) -> SuiteResult {
    let mut suite = Suite::new("segmentation", IDENTITY_TOL);
    for l in 1..=16 {
        for wl in (1..=l).filter(|w| l % w == 0) {
            let d = rng.gen_range(1..=3);
            let r = real(rng, &[l, d]);
            let cfg = SegmentConfig {
                win_len: wl,
                stride: wl,
                window: WindowKind::Rect,
            };
            let outcome = segment_and_pad(&r, &cfg).and_then(segment_spectra).and_then(|bank| {
                let s = bank.count();
                let mut sum = vec![0.0; l * d];
                for seg in bank.segments.data().chunks_exact(l * d) {
                    sum.iter_mut().zip(seg).for_each(|(a, b)| *a += b);
                }
                if sum != r.data() {
                    return Ok(f64::INFINITY);
                }
                let spectra = bank.spectra.unwrap();
                let k = bin_count(l);
                let mut total = vec![Complex64::new(0.0, 0.0); k * d];
                for seg in spectra.data().chunks_exact(k * d) {
                    total.iter_mut().zip(seg).for_each(|(a, b)| *a += b);
                }
                let rows = crate::layout::time_major_to_rows(&r)?;
                let full = spectral::rfft_rows(rows.data(), l);
                debug_assert_eq!(s, l / wl);
                Ok((0..k * d)
                    .map(|i| (total[i] - full[(i % d) * k + i / d]).norm())
                    .fold(0.0, f64::max))
            });
            suite.record(|| format!("L={l} seg_len={wl}"), outcome);
        }
    }
    suite.finish()
}

fn softmax_fusion(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut suite = Suite::new("softmax and fusion", SOFTMAX_TOL);
    for trial in 0..trials {
        let s = rng.gen_range(1..=6);
        let k = rng.gen_range(1..=9);
        let theta = RealArray::new(
            vec![s, k],
            (0..s * k).map(|_| rng.gen_range(-20.0..20.0)).collect(),
        )
        .unwrap();
        suite.record(
            || format!("segment weights (trial {trial})"),
            segment_weights(&theta).map(|w| {
                (0..k)
                    .map(|j| ((0..s).map(|i| w.data()[i * k + j]).sum::<f64>() - 1.0).abs())
                    .fold(0.0, f64::max)
            }),
        );

        let (t0, t1) = (rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0));
        let mut store = ParamStore::new();
        let fw = FusionWeights::init(&mut store);
        let set = |store: &mut ParamStore, id, v| store.set_value(id, RealArray::scalar(v).into());
        let outcome = set(&mut store, fw.theta0, t0)
            .and_then(|_| set(&mut store, fw.theta1, t1))
            .and_then(|_| fw.probabilities(&store))
            .map(|(p0, p1)| if p0 > 0.0 && p1 > 0.0 { (p0 + p1 - 1.0).abs() } else { f64::INFINITY });
        suite.record(|| format!("fusion weights (trial {trial})"), outcome);

        let a = real(rng, &[2, 3, 4]);
        let b = real(rng, &[2, 3, 4]);
        suite.record(
            || format!("fusion convexity (trial {trial})"),
            fuse(&a, &b, t0, t1).map(|f| {
                let outside = f.data().iter().zip(a.data().iter().zip(b.data())).any(|(v, (x, y))| {
                    *v < x.min(*y) - SOFTMAX_TOL || *v > x.max(*y) + SOFTMAX_TOL
                });
                if outside {
                    f64::INFINITY
                } else {
                    0.0
                }
            }),
        );
    }
    suite.finish()
}

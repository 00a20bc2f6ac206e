//! Cycle component: a learnable `(W, D)` periodic basis replicated by phase,
//! with a learnable complex filter applied to the forecast-side cycle.
//!
//! Tape-level helpers work on `(batch, channel, time)` tensors; the free
//! functions mirror them on single `(time, channel)` windows.

use std::sync::Arc;

use num_complex::Complex64;

use crate::autodiff::{ComplexArray, RealArray, Tape, Var};
use crate::error::{Error, Result};
use crate::layout::{rows_to_time_major, time_major_to_rows};
use crate::spectral::bin_count;

/// Position inside the cycle of the first lookback step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase(usize);

impl Phase {
    pub fn new(value: usize, cycle_len: usize) -> Result<Self> {
        if cycle_len == 0 || value >= cycle_len {
            return Err(Error::invalid(format!(
                "phase {value} outside [0, {cycle_len})"
            )));
        }
        Ok(Self(value))
    }

    /// Phase of an absolute sample index.
    pub fn from_index(index: u64, cycle_len: usize) -> Self {
        Self((index % cycle_len as u64) as usize)
    }

    pub fn value(self) -> usize {
        self.0
    }
}

/// Initial basis: all zeros.
pub fn zero_basis(cycle_len: usize, channels: usize) -> RealArray {
    RealArray::zeros(vec![cycle_len, channels])
}

/// Identity cycle filter `1 + 0j`, stored channel-major as `(D, H/2 + 1)`.
pub fn identity_filter(horizon: usize, channels: usize) -> ComplexArray {
    ComplexArray::filled(vec![channels, bin_count(horizon)], Complex64::new(1.0, 0.0))
}

/// `out[i, d] = q[(phase + i) mod W, d]` for `i < n`.
pub fn replicate(q: &RealArray, phase: Phase, n: usize) -> Result<RealArray> {
    let (w, d) = basis_dims(q)?;
    if n == 0 {
        return Err(Error::invalid("replicate length must be at least 1"));
    }
    if phase.value() >= w {
        return Err(Error::invalid(format!("phase {} outside [0, {w})", phase.value())));
    }
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = (phase.value() + i) % w;
        out.extend_from_slice(&q.data()[row * d..(row + 1) * d]);
    }
    RealArray::new(vec![n, d], out)
}

/// `IFFT(FFT(c) * theta)` along time for a `(H, D)` forecast cycle.
pub fn filter_cycle(c_future: &RealArray, theta: &ComplexArray) -> Result<RealArray> {
    if c_future.shape().len() != 2 {
        return Err(Error::shape("filter_cycle", c_future.shape(), theta.shape()));
    }
    let (h, d) = (c_future.shape()[0], c_future.shape()[1]);
    if theta.shape() != [d, bin_count(h)] {
        return Err(Error::shape("filter_cycle", c_future.shape(), theta.shape()));
    }
    let rows = time_major_to_rows(c_future)?;
    let mut tape = Tape::new();
    let c = tape.constant(rows.reshape(vec![1, d, h])?);
    let t = tape.constant(theta.clone());
    let out = filter_on_tape(&mut tape, c, t, h)?;
    let flat = tape.real(out)?.reshape(vec![d, h])?;
    rows_to_time_major(&flat)
}

/// `r = x - c` elementwise on `(L, D)` windows.
pub fn extract_residual(x: &RealArray, c_hist: &RealArray) -> Result<RealArray> {
    elementwise("extract_residual", x, c_hist, |a, b| a - b)
}

/// `x_hat = r_pred + c_filtered` elementwise on `(H, D)` windows.
pub fn reconstruct(r_pred: &RealArray, c_filtered: &RealArray) -> Result<RealArray> {
    elementwise("reconstruct", r_pred, c_filtered, |a, b| a + b)
}

fn elementwise(
    op: &'static str,
    a: &RealArray,
    b: &RealArray,
    f: impl Fn(f64, f64) -> f64,
) -> Result<RealArray> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    RealArray::new(a.shape().to_vec(), data)
}

fn basis_dims(q: &RealArray) -> Result<(usize, usize)> {
    match q.shape() {
        [w, d] if *w > 0 && *d > 0 => Ok((*w, *d)),
        other => Err(Error::invalid(format!(
            "cycle basis must have shape (W, D) with W, D >= 1, got {other:?}"
        ))),
    }
}

/// Gathers the basis `(W, D)` into a `(B, D, n)` cycle starting at
/// absolute sample `start[b] + offset` for each batch row.
pub(crate) fn replicate_on_tape(
    tape: &mut Tape,
    q: Var,
    starts: &[u64],
    offset: usize,
    n: usize,
) -> Result<Var> {
    let (w, d) = match tape.shape(q)? {
        [w, d] => (*w, *d),
        other => return Err(Error::invalid(format!("cycle basis shape {other:?}"))),
    };
    let mut index = Vec::with_capacity(starts.len() * d * n);
    for &s in starts {
        let phase = Phase::from_index(s + offset as u64, w).value();
        for ch in 0..d {
            index.extend((0..n).map(|i| ((phase + i) % w) * d + ch));
        }
    }
    tape.gather(q, Arc::new(index), &[starts.len(), d, n])
}

/// `(B, D, H)` cycle times the `(D, H/2+1)` filter in the frequency domain.
pub(crate) fn filter_on_tape(tape: &mut Tape, c: Var, theta: Var, horizon: usize) -> Result<Var> {
    let spec = tape.rfft(c)?;
    let shaped = tape.complex_mul(spec, theta)?;
    tape.irfft(shaped, horizon)
}

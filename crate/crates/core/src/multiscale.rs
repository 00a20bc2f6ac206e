//! Two-scale forecasting: a base-cycle branch on the recent lookback and a
//! weekly branch on an average-pooled long lookback, fused by softmax weights.

use crate::autodiff::{ParamId, ParamStore, RealArray, Tape, Var};
use crate::error::{Error, Result};

/// Non-overlapping mean pooling along time of an `(N, D)` window.
pub fn avg_pool(x: &RealArray, k: usize) -> Result<RealArray> {
    let [n, d] = *x.shape() else {
        return Err(Error::invalid(format!("avg_pool expects (N, D), got {:?}", x.shape())));
    };
    if k == 0 || n % k != 0 {
        return Err(Error::invalid(format!("pool kernel k={k} does not divide N={n}")));
    }
    let mut out = vec![0.0; (n / k) * d];
    for i in 0..n / k {
        for ch in 0..d {
            let s: f64 = (0..k).map(|j| x.data()[(i * k + j) * d + ch]).sum();
            out[i * d + ch] = s / k as f64;
        }
    }
    RealArray::new(vec![n / k, d], out)
}

/// Coarse horizon produced by the weekly branch before upsampling.
pub fn coarse_horizon(horizon: usize, k: usize) -> usize {
    horizon.div_ceil(k)
}

/// `(Hc, H)` nearest-neighbour upsampling matrix: column `t` copies coarse step `t / k`.
pub fn repeat_upsampler(horizon: usize, k: usize) -> RealArray {
    let hc = coarse_horizon(horizon, k);
    let mut w = RealArray::zeros(vec![hc, horizon]);
    for t in 0..horizon {
        w.data_mut()[(t / k) * horizon + t] = 1.0;
    }
    w
}

/// Branch mixing logits `theta0`, `theta1`, each stored with shape `(1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionWeights {
    pub theta0: ParamId,
    pub theta1: ParamId,
}

impl FusionWeights {
    pub fn init(store: &mut ParamStore) -> Self {
        Self {
            theta0: store.add("fusion.theta0", RealArray::zeros(vec![1])),
            theta1: store.add("fusion.theta1", RealArray::zeros(vec![1])),
        }
    }

    /// `(w0, w1) = softmax(theta0, theta1)` as a `(2)` tape value.
    pub fn weights(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let t0 = tape.param(store, self.theta0);
        let t1 = tape.param(store, self.theta1);
        let both = tape.concat(t0, t1, 0)?;
        tape.softmax(both, 0)
    }

    /// Mixing weights evaluated outside any training pass.
    pub fn probabilities(&self, store: &ParamStore) -> Result<(f64, f64)> {
        let mut tape = Tape::new();
        let w = self.weights(&mut tape, store)?;
        let w = tape.real(w)?.data();
        Ok((w[0], w[1]))
    }

    /// `pred0 * w0 + pred1 * w1` for equally shaped tape values.
    pub fn fuse_on_tape(&self, tape: &mut Tape, store: &ParamStore, pred0: Var, pred1: Var) -> Result<Var> {
        let (s0, s1) = (tape.shape(pred0)?.to_vec(), tape.shape(pred1)?.to_vec());
        if s0 != s1 {
            return Err(Error::shape("fuse", &s0, &s1));
        }
        let w = self.weights(tape, store)?;
        let w0 = tape.slice(w, 0, 0, 1)?;
        let w1 = tape.slice(w, 0, 1, 1)?;
        let a = tape.mul(pred0, w0)?;
        let b = tape.mul(pred1, w1)?;
        tape.add(a, b)
    }
}

/// Convex combination of two `(H, D)` predictions with logits `(theta0, theta1)`.
pub fn fuse(pred0: &RealArray, pred1: &RealArray, theta0: f64, theta1: f64) -> Result<RealArray> {
    if pred0.shape() != pred1.shape() {
        return Err(Error::shape("fuse", pred0.shape(), pred1.shape()));
    }
    let mut store = ParamStore::new();
    let w = FusionWeights::init(&mut store);
    store.set_value(w.theta0, RealArray::scalar(theta0).into())?;
    store.set_value(w.theta1, RealArray::scalar(theta1).into())?;
    let mut tape = Tape::new();
    let a = tape.constant(pred0.clone());
    let b = tape.constant(pred1.clone());
    let out = w.fuse_on_tape(&mut tape, &store, a, b)?;
    Ok(tape.real(out)?.clone())
}

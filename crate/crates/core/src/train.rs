//! Adam, the training loop with best-validation checkpointing, and evaluation.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, RealArray, Tape, Value};
use crate::data::{make_batch, sample_windows, Batch, Splits};
use crate::error::{Error, Result};
use crate::model::Model;

/// Windows per tape; gradients of chunks are summed in chunk order.
pub const CHUNK: usize = 32;

/// Mixed into the seed so the shuffle stream differs from the init stream.
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c_6531;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            batch_size: 256,
            epochs: 30,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: store
                .iter()
                .map(|p| {
                    let n = p.value.scalar_count();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        for (id, g) in grads.iter() {
            if !g.all_finite() {
                let name = &store.get(id).name;
                return Err(Error::NonFinite(format!("gradient of parameter {} ({name})", id.0)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|p| p.id).collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).map(Value::components);
            let (m, v) = &mut self.moments[slot];
            let value = store.value_mut(id);
            let mut p = value.components();
            for i in 0..p.len() {
                let gi = g.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            value.set_components(&p)?;
        }
        Ok(())
    }
}

/// Loss and summed gradients of `sum((pred - y)^2) / denom` over `batch`,
/// evaluated chunk by chunk in parallel.
pub fn batch_gradients(model: &Model, store: &ParamStore, batch: &Batch, denom: f64) -> Result<(f64, Gradients)> {
    let chunks: Vec<Range<usize>> = (0..batch.len())
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(batch.len()))
        .collect();
    let parts: Vec<Result<(f64, Gradients)>> = chunks
        .into_par_iter()
        .map(|r| {
            let b = batch.slice(r)?;
            let mut tape = Tape::new();
            let loss = model.squared_error(&mut tape, store, &b.x, &b.y, &b.starts, denom)?;
            let value = tape.real(loss)?.data()[0];
            Ok((value, tape.backward(loss)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Gradients::default();
    for part in parts {
        let (l, g) = part?;
        total += l;
        grads.merge(g);
    }
    Ok((total, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Windows drawn from a standardized `(T, D)` matrix for one task.
#[derive(Clone, Debug)]
pub struct Task<'a> {
    pub values: &'a RealArray,
    pub origin_index: u64,
    pub splits: Splits,
    /// Model input length (the long lookback for two-branch models).
    pub input_len: usize,
    pub horizon: usize,
}

impl Task<'_> {
    pub fn windows(&self, range: Range<usize>) -> Result<Vec<usize>> {
        sample_windows(range, self.input_len, self.horizon, 1)
    }

    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        make_batch(self.values, self.origin_index, starts, self.input_len, self.horizon)
    }
}

/// Forecasts for every window starting in `starts`, `(N, D, H)`.
pub fn predict_windows(model: &Model, task: &Task, starts: &[usize], batch_size: usize) -> Result<RealArray> {
    let parts: Vec<Result<RealArray>> = starts
        .par_chunks(batch_size.clamp(1, CHUNK))
        .map(|s| {
            let b = task.batch(s)?;
            model.predict(&b.x, &b.starts)
        })
        .collect();
    let mut data = Vec::new();
    for p in parts {
        data.extend(p?.into_data());
    }
    let d = task.values.shape()[1];
    RealArray::new(vec![starts.len(), d, task.horizon], data)
}

/// MSE and MAE over every (window, step, channel) triple of `range`.
pub fn evaluate(model: &Model, task: &Task, range: Range<usize>) -> Result<Metrics> {
    let starts = task.windows(range)?;
    if starts.is_empty() {
        return Err(Error::Data("evaluation range holds no windows".into()));
    }
    let parts: Vec<Result<(f64, f64, usize)>> = starts
        .par_chunks(CHUNK)
        .map(|s| {
            let b = task.batch(s)?;
            let p = model.predict(&b.x, &b.starts)?;
            let (mut se, mut ae) = (0.0, 0.0);
            for (a, y) in p.data().iter().zip(b.y.data()) {
                se += (a - y).powi(2);
                ae += (a - y).abs();
            }
            Ok((se, ae, p.len()))
        })
        .collect();
    let (mut se, mut ae, mut n) = (0.0, 0.0, 0usize);
    for part in parts {
        let (s, a, c) = part?;
        se += s;
        ae += a;
        n += c;
    }
    Ok(Metrics {
        mse: se / n as f64,
        mae: ae / n as f64,
    })
}

/// MSE/MAE of explicit predictions against targets.
pub fn metrics(pred: &RealArray, target: &RealArray) -> Result<Metrics> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metrics", pred.shape(), target.shape()));
    }
    if pred.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (a, y) in pred.data().iter().zip(target.data()) {
        se += (a - y).powi(2);
        ae += (a - y).abs();
    }
    Ok(Metrics { mse: se / n, mae: ae / n })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,train_mse,val_mse\n");
        for r in &self.history {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_mse, r.val_mse));
        }
        s
    }
}

/// Runs `cfg.epochs` epochs of shuffled mini-batch Adam and leaves `model`
/// holding the parameters with the lowest validation MSE.
pub fn train(model: &mut Model, task: &Task, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size and epochs must be at least 1".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("learning rate {} must be finite and >= 0", cfg.lr)));
    }
    let mut order = task.windows(task.splits.train.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM);
    let mut adam = Adam::new(model.store());
    let d = task.values.shape()[1];
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut se, mut count) = (0.0, 0usize);
        for (bi, starts) in order.chunks(cfg.batch_size).enumerate() {
            let batch = task.batch(starts)?;
            let denom = (starts.len() * d * task.horizon) as f64;
            let (loss, grads) = batch_gradients(model, model.store(), &batch, denom)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch}, batch {bi}")));
            }
            se += loss * denom;
            count += denom as usize;
            adam.step(model.store_mut(), &grads, cfg.lr)?;
        }
        let val = evaluate(model, task, task.splits.val.clone())?.mse;
        if !val.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_mse: se / count as f64,
            val_mse: val,
        });
        if best.as_ref().is_none_or(|b| val < b.1) {
            best = Some((epoch, val, model.store().clone()));
        }
    }
    let (best_epoch, best_val, store) = best.unwrap();
    *model.store_mut() = store;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
    })
}

/// Caps rayon's global pool at `FREQCYCLE_THREADS` when set. Returns the pool size.
pub fn init_thread_pool() -> Result<usize> {
    if let Ok(v) = std::env::var("FREQCYCLE_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("FREQCYCLE_THREADS={v:?} is not a positive integer")))?;
        // a pool already built by an earlier call keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

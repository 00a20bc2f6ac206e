//! Central finite differences used as an independent gradient oracle.

use super::array::Value;
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;

/// `(f(p + h e_i) - f(p - h e_i)) / 2h` for every real component of `point`.
/// Complex entries perturb their real and imaginary parts independently.
pub fn finite_difference_grad<F>(mut f: F, point: &Value, h: f64) -> Result<Value>
where
    F: FnMut(&Value) -> Result<f64>,
{
    if h.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let base = point.components();
    let mut probe = point.clone();
    let mut grad = vec![0.0; base.len()];
    let mut shifted = base.clone();
    for i in 0..base.len() {
        shifted[i] = base[i] + h;
        probe.set_components(&shifted)?;
        let up = f(&probe)?;
        shifted[i] = base[i] - h;
        probe.set_components(&shifted)?;
        let down = f(&probe)?;
        shifted[i] = base[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned {up} / {down} while probing component {i}"
            )));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    let mut out = point.zeros_like();
    out.set_components(&grad)?;
    Ok(out)
}

/// `|a - b| / max(1, |a|, |b|)`, maximized over components.
pub fn max_relative_error(a: &Value, b: &Value) -> f64 {
    a.components()
        .iter()
        .zip(b.components())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// Compares backward gradients of `loss` against finite differences for
/// every parameter in `store`; returns the worst relative error found.
pub fn check_store<F>(store: &ParamStore, loss: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let mut worst: f64 = 0.0;
    for p in store.iter() {
        let analytic = grads.get(p.id).cloned().unwrap_or_else(|| p.value.zeros_like());
        let numeric = finite_difference_grad(
            |v| scalar_loss_with(store, p.id, v, &loss),
            &p.value,
            h,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn scalar_loss_with<F>(store: &ParamStore, id: ParamId, value: &Value, loss: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut probe = store.clone();
    probe.set_value(id, value.clone())?;
    let mut tape = Tape::new();
    let l = loss(&mut tape, &probe)?;
    Ok(tape.real(l)?.data()[0])
}

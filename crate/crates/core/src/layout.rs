//! Conversions between `(time, channel)` windows and channel-major rows.

use crate::autodiff::{ComplexArray, RealArray};
use crate::error::{Error, Result};

/// `(N, D)` -> `(D, N)`.
pub fn time_major_to_rows(x: &RealArray) -> Result<RealArray> {
    transpose2(x)
}

/// `(D, N)` -> `(N, D)`.
pub fn rows_to_time_major(x: &RealArray) -> Result<RealArray> {
    transpose2(x)
}

fn transpose2(x: &RealArray) -> Result<RealArray> {
    let [r, c] = *x.shape() else {
        return Err(Error::invalid(format!("expected a 2-D array, got {:?}", x.shape())));
    };
    let d = x.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    RealArray::new(vec![c, r], out)
}

/// Swaps the last two axes of a 3-D complex array.
pub fn swap_last_complex(x: &ComplexArray) -> Result<ComplexArray> {
    let [a, r, c] = *x.shape() else {
        return Err(Error::invalid(format!("expected a 3-D array, got {:?}", x.shape())));
    };
    let d = x.data();
    let mut out = d.to_vec();
    for s in 0..a {
        for i in 0..r {
            for j in 0..c {
                out[s * r * c + j * r + i] = d[s * r * c + i * c + j];
            }
        }
    }
    ComplexArray::new(vec![a, c, r], out)
}

/// Swaps the last two axes of a 3-D real array.
pub fn swap_last_real(x: &RealArray) -> Result<RealArray> {
    let [a, r, c] = *x.shape() else {
        return Err(Error::invalid(format!("expected a 3-D array, got {:?}", x.shape())));
    };
    let d = x.data();
    let mut out = d.to_vec();
    for s in 0..a {
        for i in 0..r {
            for j in 0..c {
                out[s * r * c + j * r + i] = d[s * r * c + i * c + j];
            }
        }
    }
    RealArray::new(vec![a, c, r], out)
}

//! Real-input discrete Fourier transforms, circular convolution and
//! analysis windows.
//!
//! The forward transform is unnormalized and the inverse carries `1/N`:
//!
//! ```text
//! X[k] = sum_n x[n] exp(-j 2 pi k n / N),        k = 0..=N/2
//! x[n] = (1/N) sum_k X[k] exp(+j 2 pi k n / N)   (conjugate-symmetric extension)
//! ```
//!
//! Row-wise kernels (`*_rows`) operate on contiguous rows of length `n` and
//! back the differentiable `rfft`/`irfft` tape ops, including their adjoints.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Number of bins kept by a real transform of length `n`.
pub fn bin_count(n: usize) -> usize {
    n / 2 + 1
}

/// Half spectrum of a real sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    bins: Vec<Complex64>,
    origin_length: usize,
}

impl Spectrum {
    /// Wraps bins produced elsewhere. The bin count must equal `n/2 + 1`, and
    /// the DC bin (and the Nyquist bin for even `n`) must be real.
    pub fn new(bins: Vec<Complex64>, origin_length: usize) -> Result<Self> {
        if origin_length == 0 || bins.len() != bin_count(origin_length) {
            return Err(Error::invalid(format!(
                "{} bins cannot describe a real sequence of length {origin_length}",
                bins.len()
            )));
        }
        if bins[0].im != 0.0 {
            return Err(Error::invalid("DC bin must have zero imaginary part"));
        }
        if origin_length % 2 == 0 && bins[origin_length / 2].im != 0.0 {
            return Err(Error::invalid("Nyquist bin must have zero imaginary part"));
        }
        Ok(Self {
            bins,
            origin_length,
        })
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }
}

/// Forward transform of one real sequence.
pub fn rfft(x: &[f64]) -> Result<Spectrum> {
    if x.is_empty() {
        return Err(Error::invalid("rfft of an empty sequence"));
    }
    Ok(Spectrum {
        bins: rfft_rows(x, x.len()),
        origin_length: x.len(),
    })
}

/// Inverse transform back to a real sequence of length `n`.
pub fn irfft(spectrum: &Spectrum, n: usize) -> Result<Vec<f64>> {
    if spectrum.origin_length != n {
        return Err(Error::invalid(format!(
            "spectrum of a length-{} sequence cannot be inverted to length {n}",
            spectrum.origin_length
        )));
    }
    Ok(irfft_rows(&spectrum.bins, n))
}

/// Circular convolution computed through the frequency domain.
pub fn circular_convolve(x: &[f64], h: &[f64]) -> Result<Vec<f64>> {
    if x.len() != h.len() {
        return Err(Error::shape("circular_convolve", &[x.len()], &[h.len()]));
    }
    if x.is_empty() {
        return Err(Error::invalid("circular_convolve of empty sequences"));
    }
    let n = x.len();
    let fx = rfft_rows(x, n);
    let fh = rfft_rows(h, n);
    let prod: Vec<Complex64> = fx.iter().zip(&fh).map(|(a, b)| a * b).collect();
    Ok(irfft_rows(&prod, n))
}

/// Row-wise forward transform: `data` holds `data.len() / n` rows of length `n`.
pub fn rfft_rows(data: &[f64], n: usize) -> Vec<Complex64> {
    assert!(n > 0 && data.len() % n == 0);
    let k = bin_count(n);
    let rows = data.len() / n;
    let fft = forward_plan(n);
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(rows * k);
    for row in buf.chunks_exact_mut(n) {
        fft.process_with_scratch(row, &mut scratch);
        row[0].im = 0.0;
        if n % 2 == 0 {
            row[n / 2].im = 0.0;
        }
        out.extend_from_slice(&row[..k]);
    }
    out
}

/// `N * irfft`: evaluates `Re(X0) + 2 sum_mid Re(Xk e^{j..}) + [N even] Re(X_{N/2}) (-1)^n`.
fn synthesize_rows(data: &[Complex64], n: usize, mid_weight: f64) -> Vec<f64> {
    let k = bin_count(n);
    assert!(data.len() % k == 0);
    let ifft = inverse_plan(n);
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    let mut full = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Vec::with_capacity(data.len() / k * n);
    for row in data.chunks_exact(k) {
        full[0] = Complex64::new(row[0].re, 0.0);
        for j in 1..k {
            let z = row[j] * (mid_weight / 2.0);
            if 2 * j == n {
                full[j] = Complex64::new(row[j].re, 0.0);
            } else {
                full[j] = z;
                full[n - j] = z.conj();
            }
        }
        ifft.process_with_scratch(&mut full, &mut scratch);
        out.extend(full.iter().map(|z| z.re));
    }
    out
}

/// Row-wise inverse transform of half spectra (`n/2 + 1` bins per row).
pub fn irfft_rows(data: &[Complex64], n: usize) -> Vec<f64> {
    let inv = 1.0 / n as f64;
    let mut out = synthesize_rows(data, n, 2.0);
    for v in &mut out {
        *v *= inv;
    }
    out
}

/// Transpose of [`rfft_rows`] viewed as a real-linear map from `R^n` to
/// `R^{2K}` (real and imaginary parts of each bin as independent outputs).
pub fn rfft_adjoint_rows(grad: &[Complex64], n: usize) -> Vec<f64> {
    synthesize_rows(grad, n, 1.0)
}

/// Transpose of [`irfft_rows`]: `(c_k / N) * rfft(g)` with `c_k = 2` for
/// interior bins and `1` for DC and Nyquist.
pub fn irfft_adjoint_rows(grad: &[f64], n: usize) -> Vec<Complex64> {
    let k = bin_count(n);
    let inv = 1.0 / n as f64;
    let mut out = rfft_rows(grad, n);
    for row in out.chunks_exact_mut(k) {
        for (j, z) in row.iter_mut().enumerate() {
            let c = if j == 0 || 2 * j == n { 1.0 } else { 2.0 };
            *z *= c * inv;
        }
    }
    out
}

/// Analysis window family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Rect,
    Hann,
    Hamming,
}

impl FromStr for WindowKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rect" | "rectangular" => Ok(WindowKind::Rect),
            "hann" => Ok(WindowKind::Hann),
            "hamming" => Ok(WindowKind::Hamming),
            other => Err(Error::invalid(format!(
                "unknown window kind {other:?} (expected rect, hann or hamming)"
            ))),
        }
    }
}

impl fmt::Display for WindowKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WindowKind::Rect => "rect",
            WindowKind::Hann => "hann",
            WindowKind::Hamming => "hamming",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub kind: WindowKind,
    pub length: usize,
}

/// Window coefficients using the `N - 1` denominator; length one is `[1]`.
pub fn make_window(spec: WindowSpec) -> Result<Vec<f64>> {
    let n = spec.length;
    if n == 0 {
        return Err(Error::invalid("window length must be at least 1"));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let denom = (n - 1) as f64;
    let coeffs = (0..n)
        .map(|i| {
            let c = (2.0 * std::f64::consts::PI * i as f64 / denom).cos();
            match spec.kind {
                WindowKind::Rect => 1.0,
                WindowKind::Hann => 0.5 * (1.0 - c),
                WindowKind::Hamming => 0.54 - 0.46 * c,
            }
        })
        .collect();
    Ok(coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// Direct summation of the forward transform.
    fn dft_oracle(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..bin_count(n))
            .map(|k| {
                x.iter().enumerate().fold(c(0.0, 0.0), |acc, (t, &v)| {
                    let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    acc + c(v * ang.cos(), v * ang.sin())
                })
            })
            .collect()
    }

    fn conv_oracle(x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|i| (0..n).map(|m| x[m] * h[(i + n - m) % n]).sum())
            .collect()
    }

    fn close(a: Complex64, b: Complex64, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn constant_and_impulse() {
        let s = rfft(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(close(s.bins()[0], c(4.0, 0.0), 1e-12));
        assert!(close(s.bins()[1], c(0.0, 0.0), 1e-12));
        assert!(close(s.bins()[2], c(0.0, 0.0), 1e-12));
        let s = rfft(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        for b in s.bins() {
            assert!(close(*b, c(1.0, 0.0), 1e-12));
        }
    }

    #[test]
    fn sine_spectrum_and_its_inverse() {
        let s = rfft(&[0.0, 1.0, 0.0, -1.0]).unwrap();
        let expected = [c(0.0, 0.0), c(0.0, -2.0), c(0.0, 0.0)];
        for (a, b) in s.bins().iter().zip(&expected) {
            assert!(close(*a, *b, 1e-12));
        }
        let back = irfft(&Spectrum::new(expected.to_vec(), 4).unwrap(), 4).unwrap();
        for (a, b) in back.iter().zip([0.0, 1.0, 0.0, -1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let dc = Spectrum::new(vec![c(4.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)], 4).unwrap();
        assert_eq!(irfft(&dc, 4).unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn error_paths() {
        assert!(rfft(&[]).is_err());
        let s = rfft(&[1.0, 2.0, 3.0]).unwrap();
        assert!(irfft(&s, 4).is_err());
        assert!(Spectrum::new(vec![c(1.0, 0.0); 2], 4).is_err());
        assert!(Spectrum::new(vec![c(1.0, 1.0), c(0.0, 0.0), c(0.0, 0.0)], 4).is_err());
        assert!(circular_convolve(&[1.0, 2.0], &[1.0]).is_err());
        assert!("triangle".parse::<WindowKind>().is_err());
    }

    #[test]
    fn convolution_examples() {
        let y = circular_convolve(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert!((y[0] - 3.0).abs() < 1e-12 && (y[1] - 3.0).abs() < 1e-12);
        let x = [0.3, -1.2, 2.5, 0.7, 4.0];
        let y = circular_convolve(&x, &[1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn window_examples() {
        let spec = |kind, length| WindowSpec { kind, length };
        assert_eq!(make_window(spec(WindowKind::Rect, 4)).unwrap(), vec![1.0; 4]);
        let h = make_window(spec(WindowKind::Hann, 3)).unwrap();
        assert!(h[0].abs() < 1e-15 && (h[1] - 1.0).abs() < 1e-15 && h[2].abs() < 1e-15);
        let h = make_window(spec(WindowKind::Hamming, 3)).unwrap();
        assert!((h[0] - 0.08).abs() < 1e-15 && (h[1] - 1.0).abs() < 1e-15 && (h[2] - 0.08).abs() < 1e-15);
        for kind in [WindowKind::Rect, WindowKind::Hann, WindowKind::Hamming] {
            assert_eq!(make_window(spec(kind, 1)).unwrap(), vec![1.0]);
        }
        assert!(make_window(spec(WindowKind::Rect, 0)).is_err());
    }

    proptest! {
        #[test]
        fn matches_direct_summation(x in prop::collection::vec(-10.0f64..10.0, 1..40)) {
            let s = rfft(&x).unwrap();
            for (a, b) in s.bins().iter().zip(dft_oracle(&x)) {
                prop_assert!(close(*a, b, 1e-9));
            }
        }

        #[test]
        fn round_trip(x in prop::collection::vec(-10.0f64..10.0, 4..=16)) {
            let back = irfft(&rfft(&x).unwrap(), x.len()).unwrap();
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn parseval(x in prop::collection::vec(-10.0f64..10.0, 1..64)) {
            let n = x.len();
            let s = rfft(&x).unwrap();
            let mut energy = 0.0;
            for (k, b) in s.bins().iter().enumerate() {
                let w = if k == 0 || 2 * k == n { 1.0 } else { 2.0 };
                energy += w * b.norm_sqr();
            }
            let time: f64 = x.iter().map(|v| v * v).sum();
            prop_assert!((time - energy / n as f64).abs() <= 1e-9 * time.max(1.0));
        }

        #[test]
        fn linearity(
            pair in (1usize..32).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            )),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let (x, y) = pair;
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (sx, sy, sm) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&mix).unwrap());
            for k in 0..sm.bins().len() {
                prop_assert!(close(sm.bins()[k], sx.bins()[k] * a + sy.bins()[k] * b, 1e-10));
            }
        }

        #[test]
        fn convolution_theorem(
            pair in (2usize..=32).prop_flat_map(|n| (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(-5.0f64..5.0, n),
            ))
        ) {
            let (x, h) = pair;
            let fast = circular_convolve(&x, &h).unwrap();
            for (a, b) in fast.iter().zip(conv_oracle(&x, &h)) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn window_symmetry_and_range(n in 1usize..64) {
            for kind in [WindowKind::Rect, WindowKind::Hann, WindowKind::Hamming] {
                let w = make_window(WindowSpec { kind, length: n }).unwrap();
                for i in 0..n {
                    prop_assert!((w[i] - w[n - 1 - i]).abs() < 1e-12);
                    prop_assert!((-1e-15..=1.0 + 1e-15).contains(&w[i]));
                }
            }
        }

        #[test]
        fn adjoint_inner_product(
            n in 1usize..=16,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = bin_count(n);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<Complex64> = (0..k).map(|_| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
            let ju = rfft_rows(&u, n);
            let lhs: f64 = ju.iter().zip(&v).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            let jtv = rfft_adjoint_rows(&v, n);
            let rhs: f64 = u.iter().zip(&jtv).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10);

            // irfft ignores the imaginary part of DC/Nyquist, so its adjoint test uses v as-is.
            let iv = irfft_rows(&v, n);
            let lhs: f64 = iv.iter().zip(&u).map(|(a, b)| a * b).sum();
            let itu = irfft_adjoint_rows(&u, n);
            let rhs: f64 = itu.iter().zip(&v).map(|(a, b)| a.re * b.re + a.im * b.im).sum();
            prop_assert!((lhs - rhs).abs() <= 1e-10);
        }
    }
}

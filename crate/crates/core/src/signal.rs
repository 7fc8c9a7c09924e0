//! Analytic signal of real channel data.

use ndarray::{Array3, Axis as NdAxis};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::error::{Result, UmiError};
use crate::field::{AnalyticCube, RawCube};

/// Shortest trace accepted by [`analytic_signal`].
pub const MIN_SAMPLES: usize = 8;

/// FFT-based analytic signal along the time axis of `(u, θ, t)` data.
///
/// Negative frequencies are zeroed and positive ones doubled, so the DC and
/// Nyquist bins carry half the weight of the rest and the real part of the
/// output reproduces the input. A cosine maps to `exp(+iωt)`.
pub fn analytic_signal(raw: &RawCube) -> Result<AnalyticCube> {
    let (nu, nth, nt) = raw.data.dim();
    if nt < MIN_SAMPLES {
        return Err(UmiError::InvalidInput(format!(
            "time axis has {nt} samples, at least {MIN_SAMPLES} are required"
        )));
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return Err(UmiError::InvalidInput("non-finite sample in channel data".into()));
    }
    let (fwd, inv) = plans(nt);
    let mut out = Array3::<Complex64>::zeros((nu, nth, nt));
    out.axis_iter_mut(NdAxis(0))
        .into_par_iter()
        .zip(raw.data.axis_iter(NdAxis(0)).into_par_iter())
        .for_each(|(mut dst, src)| {
            let mut buf = vec![Complex64::new(0.0, 0.0); nt];
            let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
            for th in 0..nth {
                for (b, s) in buf.iter_mut().zip(src.index_axis(NdAxis(0), th).iter()) {
                    *b = Complex64::new(*s, 0.0);
                }
                one_sided_with(&mut buf, &*fwd, &*inv, &mut scratch);
                dst.index_axis_mut(NdAxis(0), th).iter_mut().zip(&buf).for_each(|(d, b)| *d = *b);
            }
        });
    Ok(AnalyticCube { data: out, sampling_frequency: raw.sampling_frequency, t0: raw.t0 })
}

/// Analytic signal of a single real trace.
pub fn analytic_trace(trace: &[f64]) -> Result<Vec<Complex64>> {
    if trace.len() < MIN_SAMPLES {
        return Err(UmiError::InvalidInput(format!(
            "trace has {} samples, at least {MIN_SAMPLES} are required",
            trace.len()
        )));
    }
    if trace.iter().any(|v| !v.is_finite()) {
        return Err(UmiError::InvalidInput("non-finite sample in trace".into()));
    }
    let mut buf: Vec<Complex64> = trace.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    one_sided(&mut buf);
    Ok(buf)
}

/// Projects a complex trace onto its one-sided spectrum in place.
///
/// Applying it to the real part of an analytic trace returns that trace.
pub fn one_sided(buf: &mut [Complex64]) {
    let (fwd, inv) = plans(buf.len());
    let mut scratch = vec![Complex64::new(0.0, 0.0); fwd.get_inplace_scratch_len().max(inv.get_inplace_scratch_len())];
    one_sided_with(buf, &*fwd, &*inv, &mut scratch);
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    let mut planner = FftPlanner::new();
    (planner.plan_fft_forward(n), planner.plan_fft_inverse(n))
}

fn one_sided_with(buf: &mut [Complex64], fwd: &dyn Fft<f64>, inv: &dyn Fft<f64>, scratch: &mut [Complex64]) {
    let n = buf.len();
    fwd.process_with_scratch(buf, scratch);
    let half = n / 2;
    // bins 1..ceil(n/2) doubled; Nyquist (even n) and DC keep unit weight
    let last_pos = if n % 2 == 0 { half - 1 } else { half };
    for b in buf.iter_mut().take(last_pos + 1).skip(1) {
        *b *= 2.0;
    }
    for b in buf.iter_mut().skip(half + 1) {
        *b = Complex64::new(0.0, 0.0);
    }
    inv.process_with_scratch(buf, scratch);
    let scale = 1.0 / n as f64;
    for b in buf.iter_mut() {
        *b *= scale;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Direct DFT oracle: H(k) = 2X(k) for 0<k<n/2, X(k) at 0 and n/2, 0 otherwise.
    fn dft_oracle(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        let spec: Vec<Complex64> = (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(t, &v)| v * Complex64::from_polar(1.0, -2.0 * PI * (k * t) as f64 / n as f64))
                    .sum()
            })
            .collect();
        let w: Vec<f64> = (0..n)
            .map(|k| {
                if k == 0 || (n % 2 == 0 && k == n / 2) {
                    1.0
                } else if k < (n + 1) / 2 {
                    2.0
                } else {
                    0.0
                }
            })
            .collect();
        (0..n)
            .map(|t| {
                (0..n)
                    .map(|k| spec[k] * w[k] * Complex64::from_polar(1.0, 2.0 * PI * (k * t) as f64 / n as f64))
                    .sum::<Complex64>()
                    / n as f64
            })
            .collect()
    }

    #[test]
    fn cosine_becomes_complex_exponential() {
        let n = 256;
        let f = 16.0 / n as f64;
        let x: Vec<f64> = (0..n).map(|t| (2.0 * PI * f * t as f64).cos()).collect();
        let a = analytic_trace(&x).unwrap();
        for (t, v) in a.iter().enumerate() {
            assert!((v.norm() - 1.0).abs() < 1e-6);
            let e = Complex64::from_polar(1.0, 2.0 * PI * f * t as f64);
            assert!((v - e).norm() < 1e-9);
        }
    }

    #[test]
    fn zero_cube_stays_zero() {
        let raw = RawCube { data: Array3::zeros((2, 3, 16)), sampling_frequency: 1.0, t0: 0.0, truncated: 0 };
        let a = analytic_signal(&raw).unwrap();
        assert!(a.data.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn random_trace_matches_direct_dft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [64usize, 65] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = analytic_trace(&x).unwrap();
            let o = dft_oracle(&x);
            for t in 0..n {
                assert!((a[t].re - x[t]).abs() < 1e-9);
                assert!((a[t] - o[t]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn cube_and_trace_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = Array3::from_shape_fn((2, 2, 40), |_| rng.random_range(-1.0..1.0));
        let raw = RawCube { data: data.clone(), sampling_frequency: 1.0, t0: 0.0, truncated: 0 };
        let a = analytic_signal(&raw).unwrap();
        let row: Vec<f64> = data.slice(ndarray::s![1, 0, ..]).to_vec();
        let b = analytic_trace(&row).unwrap();
        for t in 0..40 {
            assert!((a.data[[1, 0, t]] - b[t]).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_short_and_non_finite() {
        assert!(analytic_trace(&[0.0; 7]).is_err());
        let mut x = vec![0.0; 16];
        x[3] = f64::NAN;
        assert!(analytic_trace(&x).is_err());
    }
}

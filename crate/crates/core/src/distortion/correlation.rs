//! Correlation matrices of local distortion windows.

use ndarray::Array2;
use num_complex::Complex64;

use super::{finish_law, hermitian_eigen, AberrationLaw, LawOptions, LocalDistortion};
use crate::beamform::Side;
use crate::error::{Result, UmiError};
use crate::field::{Axis, ComplexMatrix2D};

/// C = D′D′† / N_in over the dual axis of a window, or its phase-only
/// normalization δĈ.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub matrix: ComplexMatrix2D,
    pub normalized: bool,
    pub n_in: usize,
    pub side: Side,
    pub center: [f64; 2],
}

impl CorrelationMatrix {
    /// Wraps a Gram matrix Σ d d† accumulated over `n_in` focal points.
    pub fn from_gram(gram: Array2<Complex64>, dual: &Axis, n_in: usize, side: Side, center: [f64; 2]) -> Result<Self> {
        if n_in == 0 {
            return Err(UmiError::EmptyWindow);
        }
        let values = gram / Complex64::new(n_in as f64, 0.0);
        Ok(Self {
            matrix: ComplexMatrix2D::new(values, dual.clone(), dual.clone(), None)?,
            normalized: false,
            n_in,
            side,
            center,
        })
    }

    pub fn dim(&self) -> usize {
        self.matrix.values.nrows()
    }
}

pub fn correlation_matrix(local: &LocalDistortion) -> Result<CorrelationMatrix> {
    let d = &local.data;
    let gram = d.dot(&d.t().mapv(|v| v.conj()));
    CorrelationMatrix::from_gram(gram, &local.dual, local.n_in(), local.side, local.center)
}

/// Coherence length of the dual-basis field and the derived aperture counts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationWidth {
    /// FWHM of the lag profile of |C| (dual-axis units).
    pub coherence_length: f64,
    /// Extent Δu of the support.
    pub aperture: f64,
    /// M_δ = Δu / δu_in.
    pub m_delta: f64,
    /// Effective aperture δu_c = Δu √(ln N_in) / M_δ.
    pub effective_aperture: f64,
}

/// Lag profile of |C| averaged along diagonals of the support, its
/// half-maximum width and the derived aperture figures.
pub fn correlation_width(c: &CorrelationMatrix, support_fraction: f64) -> Result<CorrelationWidth> {
    let v = &c.matrix.values;
    let n = c.dim();
    let coords = &c.matrix.rows.coords;
    if n < 2 {
        return Err(UmiError::InvalidInput("correlation matrix needs at least two entries".into()));
    }
    let spacing = (coords[n - 1] - coords[0]).abs() / (n - 1) as f64;
    let diag_max = (0..n).map(|i| v[[i, i]].re).fold(0.0, f64::max);
    let support: Vec<usize> = (0..n).filter(|&i| diag_max > 0.0 && v[[i, i]].re >= support_fraction * diag_max).collect();
    let (lo, hi) = match (support.first(), support.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(UmiError::Numerical("correlation matrix has no energy".into())),
    };
    let aperture = (hi - lo + 1) as f64 * spacing;
    let profile: Vec<f64> = (0..=hi - lo)
        .map(|d| {
            let vals: Vec<f64> = (lo..=hi - d).map(|i| v[[i, i + d]].norm()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    let coherence_length = match half_crossing(&profile) {
        Some(h) => 2.0 * h * spacing,
        None => aperture,
    };
    let m_delta = aperture / coherence_length;
    let effective_aperture = aperture * (c.n_in as f64).ln().max(0.0).sqrt() / m_delta;
    Ok(CorrelationWidth { coherence_length, aperture, m_delta, effective_aperture })
}

/// First lag (fractional, linear interpolation) where `p` falls to half of p[0].
pub(crate) fn half_crossing(p: &[f64]) -> Option<f64> {
    let half = 0.5 * p.first().copied()?;
    if !(half > 0.0) {
        return None;
    }
    p.windows(2).enumerate().find_map(|(i, w)| {
        (w[1] <= half && w[0] > half).then(|| i as f64 + (w[0] - half) / (w[0] - w[1]))
    })
}

/// δĈ = δC / |δC| entrywise; entries below `guard` times the median diagonal
/// and rows outside the support are zeroed.
pub fn normalized_correlation(dc: &CorrelationMatrix, opts: &LawOptions) -> CorrelationMatrix {
    let v = &dc.matrix.values;
    let n = dc.dim();
    let mut diag: Vec<f64> = (0..n).map(|i| v[[i, i]].re).collect();
    let diag_max = diag.iter().copied().fold(0.0, f64::max);
    let inside: Vec<bool> = diag.iter().map(|&d| diag_max > 0.0 && d >= opts.support_fraction * diag_max).collect();
    diag.sort_by(f64::total_cmp);
    let median = if n == 0 { 0.0 } else { diag[n / 2] };
    let floor = opts.guard * median;
    let values = Array2::from_shape_fn((n, n), |(i, j)| {
        let c = v[[i, j]];
        let m = c.norm();
        if !inside[i] || !inside[j] || m <= floor || m == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            c / m
        }
    });
    CorrelationMatrix {
        matrix: ComplexMatrix2D { values, ..dc.matrix.clone() },
        normalized: true,
        n_in: dc.n_in,
        side: dc.side,
        center: dc.center,
    }
}

/// Leading eigenvector of δĈ as a phase law; invalid when the leading
/// eigenvalue does not stand out or the top two are nearly degenerate.
pub fn residual_phase_law(c_hat: &CorrelationMatrix, opts: &LawOptions) -> AberrationLaw {
    let v = &c_hat.matrix.values;
    let (vals, vecs) = hermitian_eigen(v);
    let energy: Vec<f64> = v.rows().into_iter().map(|r| r.iter().map(|x| x.norm_sqr()).sum()).collect();
    let sv: Vec<f64> = vals.iter().map(|l| l.max(0.0)).collect();
    let gap_ok = match (vals.first(), vals.get(1)) {
        (Some(&a), Some(&b)) => a > 0.0 && (a - b) >= opts.min_gap * a,
        (Some(&a), None) => a > 0.0,
        _ => false,
    };
    let valid = gap_ok && super::dominant(&vals, opts.validity_ratio);
    let rows = &c_hat.matrix.rows;
    finish_law(&vecs[0], &energy, sv, valid, rows.basis, c_hat.side, c_hat.center, &rows.coords, opts)
}

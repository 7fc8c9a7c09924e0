//! Distortion matrices, local windows and the estimation of aberration laws
//! from their singular vectors or from (normalized) correlation matrices.

mod correlation;
mod ramp;

use nalgebra::{DMatrix, Dyn, SymmetricEigen, SVD};
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::beamform::{DualReflectionMatrix, OperatorKind, PropagationOperator, Side};
use crate::config::ImageGrid;
use crate::error::{Result, UmiError};
use crate::field::{Axis, Basis, ComplexMatrix2D};

pub use correlation::{
    correlation_matrix, correlation_width, normalized_correlation, residual_phase_law, CorrelationMatrix,
    CorrelationWidth,
};
pub use ramp::{ramp_kernel_rate, ramp_removal};

/// Wavefront left after removing the ideal geometric one, stored as
/// `(dual index, focused index)` whatever the side it was measured on.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionMatrix {
    pub matrix: ComplexMatrix2D,
    pub side: Side,
}

impl DistortionMatrix {
    pub fn basis(&self) -> Basis {
        self.matrix.rows.basis
    }
}

/// D = dual ∘ conj(geom), with `geom` the reference operator of the dual
/// basis (a Q-kind operator for the transducer basis, T₀ for plane waves).
pub fn build_distortion(dual: &DualReflectionMatrix, geom: &PropagationOperator) -> Result<DistortionMatrix> {
    let basis = dual.dual_basis();
    let kind_ok = match basis {
        Basis::Transducer => matches!(geom.kind, OperatorKind::Q0 | OperatorKind::Q1 | OperatorKind::Q2),
        Basis::PlaneWave => geom.kind == OperatorKind::T0,
        Basis::Focused => false,
    };
    if !kind_ok {
        return Err(UmiError::InvalidInput(format!("{:?} operator cannot reference the {basis:?} basis", geom.kind)));
    }
    dual.matrix.check_depth(geom.depth())?;
    // canonical orientation: dual rows, focused columns
    let m = match dual.side {
        Side::Output => dual.matrix.clone(),
        Side::Input => dual.matrix.transposed(),
    };
    m.rows.same_as(&geom.matrix.rows)?;
    m.cols.same_as(&geom.matrix.cols)?;
    let values = &m.values * &geom.matrix.values.mapv(|v| v.conj());
    Ok(DistortionMatrix { matrix: ComplexMatrix2D::new(values, m.rows, m.cols, m.depth)?, side: dual.side })
}

/// Columns of a depth stack of distortion matrices inside a boxcar window.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDistortion {
    /// Window centre (x, z) in mm.
    pub center: [f64; 2],
    /// Half-widths (Δx, Δz) of the boxcar in mm.
    pub half_extent: [f64; 2],
    /// Member focal points as (depth index, lateral index).
    pub members: Vec<(usize, usize)>,
    /// `(dual, member)` submatrix.
    pub data: Array2<Complex64>,
    pub dual: Axis,
    pub side: Side,
    /// Number of independent resolution cells in the window.
    pub n_independent: f64,
}

impl LocalDistortion {
    pub fn n_in(&self) -> usize {
        self.members.len()
    }
}

/// Selects the focal points with |x − x_p| < Δx and |z − z_p| < Δz.
///
/// `stack` holds one distortion matrix per grid depth. `resolution` is
/// (δx₀, δz₀) and sets the independent-cell count.
pub fn extract_local(
    stack: &[DistortionMatrix],
    grid: &ImageGrid,
    center: [f64; 2],
    half_extent: [f64; 2],
    resolution: [f64; 2],
) -> Result<LocalDistortion> {
    if stack.len() != grid.nz() {
        return Err(UmiError::Shape(format!("{} distortion slices for {} depths", stack.len(), grid.nz())));
    }
    let first = stack.first().ok_or(UmiError::EmptyWindow)?;
    let mut members = Vec::new();
    for (iz, &z) in grid.z.iter().enumerate() {
        if (z - center[1]).abs() >= half_extent[1] {
            continue;
        }
        for (ix, &x) in grid.x.iter().enumerate() {
            if (x - center[0]).abs() < half_extent[0] {
                members.push((iz, ix));
            }
        }
    }
    if members.is_empty() {
        return Err(UmiError::EmptyWindow);
    }
    let nd = first.matrix.rows.len();
    let mut data = Array2::zeros((nd, members.len()));
    for (c, &(iz, ix)) in members.iter().enumerate() {
        let slice = &stack[iz];
        slice.matrix.rows.same_as(&first.matrix.rows)?;
        data.column_mut(c).assign(&slice.matrix.values.column(ix));
    }
    let area = members.len() as f64 * grid.dx() * grid.dz();
    Ok(LocalDistortion {
        center,
        half_extent,
        members,
        data,
        dual: first.matrix.rows.clone(),
        side: first.side,
        n_independent: area / (resolution[0] * resolution[1]),
    })
}

/// Thresholds used when turning a singular vector into a phase law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LawOptions {
    /// Leading σ² must reach this multiple of the median σ².
    pub validity_ratio: f64,
    /// Dual indices whose energy falls below this fraction of the maximum are
    /// outside the support and keep a zero phase.
    pub support_fraction: f64,
    /// Minimum relative gap between the two leading eigenvalues of δĈ.
    pub min_gap: f64,
    /// δC entries below this fraction of the median diagonal are zeroed.
    pub guard: f64,
}

impl Default for LawOptions {
    fn default() -> Self {
        Self { validity_ratio: 2.0, support_fraction: 0.1, min_gap: 0.01, guard: 1e-3 }
    }
}

/// Phase-only estimate of an aberration transmittance in a dual basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AberrationLaw {
    pub basis: Basis,
    pub side: Side,
    pub center: [f64; 2],
    pub coords: Vec<f64>,
    /// Phase (rad) in (−π, π], piston removed over the support.
    pub phase: Vec<f64>,
    pub support: Vec<bool>,
    /// Singular values, descending.
    pub singular_values: Vec<f64>,
    pub valid: bool,
    pub ramp_corrected: bool,
    /// Set when the ramp estimate had a competing peak within 3 dB.
    pub ambiguous: bool,
    /// Lateral shift removed by the ramp correction (mm).
    pub shift: f64,
}

impl AberrationLaw {
    pub fn flat(basis: Basis, side: Side, center: [f64; 2], coords: Vec<f64>) -> Self {
        let n = coords.len();
        Self {
            basis,
            side,
            center,
            coords,
            phase: vec![0.0; n],
            support: vec![true; n],
            singular_values: Vec::new(),
            valid: true,
            ramp_corrected: false,
            ambiguous: false,
            shift: 0.0,
        }
    }

    /// Unit-modulus transmittance exp(i·phase).
    pub fn transmittance(&self) -> Vec<Complex64> {
        self.phase.iter().map(|&p| Complex64::from_polar(1.0, p)).collect()
    }

    pub fn conjugate(&self) -> Self {
        let mut out = self.clone();
        for p in &mut out.phase {
            *p = wrap(-*p);
        }
        out
    }

    /// RMS of the phase over the support.
    pub fn rms(&self) -> f64 {
        let v: Vec<f64> = self.phase.iter().zip(&self.support).filter(|(_, s)| **s).map(|(p, _)| *p).collect();
        if v.is_empty() {
            return 0.0;
        }
        (v.iter().map(|p| p * p).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap(p: f64) -> f64 {
    let w = p.sin().atan2(p.cos());
    if w <= -std::f64::consts::PI {
        w + 2.0 * std::f64::consts::PI
    } else {
        w
    }
}

/// Full complex SVD whose recomposition is checked against `m`.
///
/// nalgebra's implicit-shift iteration can return a wrong factorization of a
/// rank-deficient square matrix at tight tolerances. When the residual
/// exceeds 1e-10 of ‖m‖ the adjoint is decomposed instead, then a looser
/// tolerance is tried. `None` when no attempt reproduces `m`.
pub fn checked_svd(m: &DMatrix<Complex64>) -> Option<SVD<Complex64, Dyn, Dyn>> {
    let scale = m.norm();
    let good = |s: &SVD<Complex64, Dyn, Dyn>| s.clone().recompose().is_ok_and(|r| (r - m).norm() <= 1e-10 * scale.max(f64::MIN_POSITIVE));
    for eps in [f64::EPSILON, 1e-14] {
        if let Some(s) = m.clone().try_svd(true, true, eps, 10_000).filter(good) {
            return Some(s);
        }
        if let Some(a) = m.adjoint().try_svd(true, true, eps, 10_000) {
            let s = SVD { u: a.v_t.map(|v| v.adjoint()), v_t: a.u.map(|u| u.adjoint()), singular_values: a.singular_values };
            if good(&s) {
                return Some(s);
            }
        }
    }
    None
}

/// Leading-singular-vector estimate Û₁ = U₁/|U₁| of a local window.
///
/// SVD failure yields an invalid flat law rather than an error.
pub fn svd_phase_law(local: &LocalDistortion, opts: &LawOptions) -> Result<AberrationLaw> {
    if local.n_in() < 2 {
        return Err(UmiError::InvalidInput(format!("window has {} member(s), at least two are required", local.n_in())));
    }
    if local.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(UmiError::InvalidInput("distortion window holds non-finite entries".into()));
    }
    let (nd, nm) = local.data.dim();
    let m = DMatrix::from_fn(nd, nm, |i, j| local.data[[i, j]]);
    let energy: Vec<f64> = local.data.rows().into_iter().map(|r| r.iter().map(|v| v.norm_sqr()).sum()).collect();
    let flat = || AberrationLaw {
        valid: false,
        ..AberrationLaw::flat(local.dual.basis, local.side, local.center, local.dual.coords.clone())
    };
    let Some(svd) = checked_svd(&m) else {
        return Ok(flat());
    };
    let u = svd.u.expect("left vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let lead: Vec<Complex64> = u.column(order[0]).iter().copied().collect();
    let valid = dominant(&sv.iter().map(|s| s * s).collect::<Vec<_>>(), opts.validity_ratio);
    Ok(finish_law(&lead, &energy, sv, valid, local.dual.basis, local.side, local.center, &local.dual.coords, opts))
}

/// Same estimate from the Gram matrix G = D′D′† by Hermitian
/// eigendecomposition; σᵢ = √λᵢ.
pub fn gram_phase_law(gram: &Array2<Complex64>, dual: &Axis, side: Side, center: [f64; 2], opts: &LawOptions) -> AberrationLaw {
    let (vals, vecs) = hermitian_eigen(gram);
    let sv: Vec<f64> = vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    let energy: Vec<f64> = (0..gram.nrows()).map(|i| gram[[i, i]].re).collect();
    let valid = vals.first().is_some_and(|l| *l > 0.0) && dominant(&vals, opts.validity_ratio);
    finish_law(&vecs[0], &energy, sv, valid, dual.basis, side, center, &dual.coords, opts)
}

/// Eigenvalues (descending) and matching eigenvectors of a Hermitian matrix.
pub fn hermitian_eigen(m: &Array2<Complex64>) -> (Vec<f64>, Vec<Vec<Complex64>>) {
    let n = m.nrows();
    let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[[i, j]] + m[[j, i]].conj()));
    let e = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let vals = order.iter().map(|&i| e.eigenvalues[i]).collect();
    let vecs = order.iter().map(|&i| e.eigenvectors.column(i).iter().copied().collect()).collect();
    (vals, vecs)
}

fn dominant(power: &[f64], ratio: f64) -> bool {
    if power.is_empty() {
        return false;
    }
    if power.len() == 1 {
        return power[0] > 0.0;
    }
    let mut sorted = power.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { 0.5 * (sorted[mid - 1] + sorted[mid]) } else { sorted[mid] };
    power[0] > 0.0 && power[0] >= ratio * median
}

#[allow(clippy::too_many_arguments)]
fn finish_law(
    lead: &[Complex64],
    energy: &[f64],
    singular_values: Vec<f64>,
    valid: bool,
    basis: Basis,
    side: Side,
    center: [f64; 2],
    coords: &[f64],
    opts: &LawOptions,
) -> AberrationLaw {
    let emax = energy.iter().copied().fold(0.0, f64::max);
    let support: Vec<bool> = energy.iter().map(|&e| emax > 0.0 && e >= opts.support_fraction * emax).collect();
    let phase = phase_only(lead, &support);
    AberrationLaw {
        basis,
        side,
        center,
        coords: coords.to_vec(),
        phase,
        support,
        singular_values,
        valid,
        ramp_corrected: false,
        ambiguous: false,
        shift: 0.0,
    }
}

/// Phase of `v` on the support with the circular mean removed; zero outside.
pub fn phase_only(v: &[Complex64], support: &[bool]) -> Vec<f64> {
    let mean: Complex64 = v
        .iter()
        .zip(support)
        .filter(|(_, s)| **s)
        .map(|(x, _)| if x.norm() > 0.0 { x / x.norm() } else { Complex64::new(0.0, 0.0) })
        .sum();
    let piston = if mean.norm() > 0.0 { mean.arg() } else { 0.0 };
    v.iter()
        .zip(support)
        .map(|(x, s)| if *s && x.norm() > 0.0 { wrap(x.arg() - piston) } else { 0.0 })
        .collect()
}

/// Trust test N_in ≥ exp((δx_in/δx₀)²) for a window.
pub fn convergence_gate(n_independent: f64, width_ratio: f64) -> bool {
    n_independent >= (width_ratio * width_ratio).exp()
}

//! Propagation operators between the focused, plane-wave and transducer bases.
//!
//! All operators live on a periodic lateral grid: the transducer axis reuses
//! the focal-plane coordinates and the wavenumber axis is the matching DFT
//! grid, so `T₀T₀† = N·I` and `Q₀†Q₀` is the projector onto propagating
//! waves.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::AcquisitionConfig;
use crate::error::{Result, UmiError};
use crate::field::{Axis, Basis, ComplexMatrix2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OperatorKind {
    /// Fourier operator exp(i k x).
    T0,
    /// Plane-wave propagator, diagonal in k.
    P,
    /// Free-space transmission matrix between focal plane and array.
    Q0,
    /// Geometric operator carrying one estimated law.
    Q1,
    /// Geometric operator carrying two or more composed laws.
    Q2,
}

/// Matrix mapping focal-plane fields to a dual basis (rows) from the focused
/// basis (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOperator {
    pub kind: OperatorKind,
    pub matrix: ComplexMatrix2D,
    /// `B†B = gram · (projector)`: N for Fourier-type operators, 1 for Q.
    pub gram: f64,
}

impl PropagationOperator {
    pub fn dual_basis(&self) -> Basis {
        self.matrix.rows.basis
    }

    pub fn depth(&self) -> Option<f64> {
        self.matrix.depth
    }
}

/// DFT wavenumber grid for `n` samples at spacing `dx`: `(m − n/2)·2π/(n dx)`.
pub fn k_axis(n: usize, dx: f64) -> Vec<f64> {
    let dk = 2.0 * std::f64::consts::PI / (n as f64 * dx);
    (0..n).map(|m| (m as f64 - (n / 2) as f64) * dk).collect()
}

/// T₀(k, x) = exp(i k x).
pub fn build_t0(x_axis: &[f64], k: &[f64]) -> Result<PropagationOperator> {
    if x_axis.is_empty() || k.is_empty() {
        return Err(UmiError::InvalidInput("operator axes must be non-empty".into()));
    }
    let values = Array2::from_shape_fn((k.len(), x_axis.len()), |(i, j)| Complex64::from_polar(1.0, k[i] * x_axis[j]));
    Ok(PropagationOperator {
        kind: OperatorKind::T0,
        matrix: ComplexMatrix2D::new(
            values,
            Axis::new(Basis::PlaneWave, k.to_vec()),
            Axis::new(Basis::Focused, x_axis.to_vec()),
            None,
        )?,
        gram: x_axis.len() as f64,
    })
}

/// Plane-wave propagator over depth `z` at wavenumber `kc`; zero for
/// evanescent components.
pub fn propagator(k: &[f64], kc: f64, z: f64) -> Vec<Complex64> {
    k.iter()
        .map(|&kx| {
            let q = kc * kc - kx * kx;
            if q < 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::from_polar(1.0, q.sqrt() * z)
            }
        })
        .collect()
}

/// Diagonal operator P(k) at depth `z`.
pub fn build_p(k: &[f64], z: f64, config: &AcquisitionConfig) -> Result<PropagationOperator> {
    if !(z > 0.0) {
        return Err(UmiError::Geometry(format!("depth {z} mm must be positive")));
    }
    let p = propagator(k, config.wavenumber(), z);
    let mut values = Array2::zeros((k.len(), k.len()));
    for (i, v) in p.into_iter().enumerate() {
        values[[i, i]] = v;
    }
    Ok(PropagationOperator {
        kind: OperatorKind::P,
        matrix: ComplexMatrix2D::new(
            values,
            Axis::new(Basis::PlaneWave, k.to_vec()),
            Axis::new(Basis::PlaneWave, k.to_vec()),
            Some(z),
        )?,
        gram: 1.0,
    })
}

/// Q₀ = T₀⁻¹ · diag(P) · T₀ at depth `z` on the uniform lateral axis
/// `x_axis`, with the transducer axis equal to `x_axis`.
///
/// The product is circulant, so it is evaluated from its first row.
pub fn build_q0(z: f64, x_axis: &[f64], config: &AcquisitionConfig) -> Result<PropagationOperator> {
    if !(z > 0.0) {
        return Err(UmiError::Geometry(format!("depth {z} mm must be positive")));
    }
    let n = x_axis.len();
    if n == 0 {
        return Err(UmiError::InvalidInput("operator axes must be non-empty".into()));
    }
    let dx = if n > 1 { x_axis[1] - x_axis[0] } else { 1.0 };
    let k = k_axis(n, dx);
    let p = propagator(&k, config.wavenumber(), z);
    // kernel(d) = (1/N) Σ_k P(k) exp(i k d dx), lag d = (x − u)/dx mod N
    let kernel: Vec<Complex64> = (0..n)
        .map(|d| {
            k.iter()
                .zip(&p)
                .map(|(kx, pk)| pk * Complex64::from_polar(1.0, kx * d as f64 * dx))
                .sum::<Complex64>()
                / n as f64
        })
        .collect();
    let values = Array2::from_shape_fn((n, n), |(iu, ix)| kernel[(ix + n - iu) % n]);
    Ok(PropagationOperator {
        kind: OperatorKind::Q0,
        matrix: ComplexMatrix2D::new(
            values,
            Axis::new(Basis::Transducer, x_axis.to_vec()),
            Axis::new(Basis::Focused, x_axis.to_vec()),
            Some(z),
        )?,
        gram: 1.0,
    })
}

/// Free-space geometric wavefront exp(i k_c √((u − x)² + z²)) between the
/// transducer axis `u_axis` and the focal axis `x_axis`.
///
/// It serves as the reference removed from transducer-basis fields when
/// building distortion matrices: unlike the periodic [`build_q0`], it has no
/// image sources one lateral period away.
pub fn free_space_q0(z: f64, u_axis: &[f64], x_axis: &[f64], config: &AcquisitionConfig) -> Result<PropagationOperator> {
    if !(z > 0.0) {
        return Err(UmiError::Geometry(format!("depth {z} mm must be positive")));
    }
    let kc = config.wavenumber();
    let values = Array2::from_shape_fn((u_axis.len(), x_axis.len()), |(i, j)| {
        let d = u_axis[i] - x_axis[j];
        Complex64::from_polar(1.0, kc * (d * d + z * z).sqrt())
    });
    Ok(PropagationOperator {
        kind: OperatorKind::Q0,
        matrix: ComplexMatrix2D::new(
            values,
            Axis::new(Basis::Transducer, u_axis.to_vec()),
            Axis::new(Basis::Focused, x_axis.to_vec()),
            Some(z),
        )?,
        gram: 1.0,
    })
}

/// Paraxial (Fresnel) transmission kernel exp(i k_c z) exp(i k_c (u − x)² / 2z).
pub fn fresnel_kernel(u: f64, x: f64, z: f64, kc: f64) -> Complex64 {
    Complex64::from_polar(1.0, kc * z + kc * (u - x) * (u - x) / (2.0 * z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn axis(n: usize, dx: f64) -> Vec<f64> {
        (0..n).map(|i| (i as f64 - n as f64 / 2.0 + 0.5) * dx).collect()
    }

    #[test]
    fn t0_zero_row_and_unitarity() {
        let x = axis(64, 0.2);
        let k = k_axis(64, 0.2);
        let t = build_t0(&x, &k).unwrap();
        let zero = k.iter().position(|v| *v == 0.0).unwrap();
        assert!(t.matrix.values.row(zero).iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-15));
        let m = &t.matrix.values;
        let g = m.dot(&m.t().mapv(|v| v.conj())) / 64.0;
        for ((i, j), v) in g.indexed_iter() {
            let e = if i == j { 1.0 } else { 0.0 };
            assert!((v - Complex64::new(e, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn t0_column_phase_slope_is_k_spacing() {
        let dx = 0.25;
        let x = axis(32, dx);
        let k = k_axis(32, dx);
        let t = build_t0(&x, &k).unwrap();
        let dk = 2.0 * std::f64::consts::PI / (32.0 * dx);
        for j in 0..32 {
            for i in 0..31 {
                let step = (t.matrix.values[[i + 1, j]] / t.matrix.values[[i, j]]).arg();
                let expect = (dk * x[j]).sin().atan2((dk * x[j]).cos());
                assert!((step - expect).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn propagator_normal_incidence_and_evanescent_zero() {
        let c = AcquisitionConfig::desk();
        let kc = c.wavenumber();
        let p = propagator(&[0.0, 1.1 * kc, 0.5 * kc], kc, 12.0);
        assert!((p[0] - Complex64::from_polar(1.0, kc * 12.0)).norm() < 1e-12);
        assert_eq!(p[1], Complex64::new(0.0, 0.0));
        assert!((p[2].norm() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn q0_is_a_projector_on_propagating_waves() {
        let c = AcquisitionConfig::desk();
        let x = axis(96, 0.15625);
        let q = build_q0(20.0, &x, &c).unwrap();
        let m = &q.matrix.values;
        let g = m.t().mapv(|v| v.conj()).dot(m);
        let g2 = g.dot(&g);
        assert!((&g2 - &g).iter().map(|v| v.norm()).fold(0.0, f64::max) < 1e-10);
        // band-limited field keeps its energy
        let k = k_axis(96, 0.15625);
        let kc = c.wavenumber();
        let t = build_t0(&x, &k).unwrap();
        let spec: Vec<Complex64> = k.iter().map(|kx| if kx.abs() < 0.5 * kc { Complex64::new(1.0, kx.sin()) } else { Complex64::new(0.0, 0.0) }).collect();
        let field = t.matrix.values.t().mapv(|v| v.conj()).dot(&ndarray::Array1::from(spec)) / 96.0;
        let out = m.dot(&field);
        let e_in: f64 = field.iter().map(|v| v.norm_sqr()).sum();
        let e_out: f64 = out.iter().map(|v| v.norm_sqr()).sum();
        assert!((e_in - e_out).abs() < 1e-10 * e_in);
    }

    #[test]
    fn composed_q0_matches_fresnel_in_paraxial_cell() {
        // wide grid so periodic images are far from the cell
        let c = AcquisitionConfig::desk();
        let dx = 0.15625;
        let x = axis(2048, dx);
        let z = 15.0;
        let q = build_q0(z, &x, &c).unwrap();
        let kc = c.wavenumber();
        let centre = 1024;
        let mut diffs = Vec::new();
        for du in -6i64..=6 {
            let iu = (centre as i64 + du) as usize;
            let a = q.matrix.values[[iu, centre]];
            let f = fresnel_kernel(x[iu], x[centre], z, kc);
            diffs.push((a * f.conj()).arg());
        }
        // common phase (2D point-source prefactor) removed
        let mean = diffs.iter().map(|d| Complex64::from_polar(1.0, *d)).sum::<Complex64>().arg();
        for d in diffs {
            let r = Complex64::from_polar(1.0, d - mean).arg();
            assert!(r.abs() < 0.1, "phase mismatch {r}");
        }
    }

    #[test]
    fn q0_rejects_non_positive_depth() {
        let c = AcquisitionConfig::desk();
        assert!(build_q0(0.0, &axis(8, 0.1), &c).is_err());
    }
}

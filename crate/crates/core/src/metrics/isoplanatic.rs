//! Decomposition of an aberration atlas into isoplanatic patches.

use nalgebra::DMatrix;
use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::ImageGrid;
use crate::distortion::checked_svd;
use crate::error::{Result, UmiError};

/// Input and output laws estimated around one window centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasColumn {
    pub center: [f64; 2],
    /// Transmit-side phase (rad).
    pub input: Vec<f64>,
    /// Receive-side phase (rad).
    pub output: Vec<f64>,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoplanaticDecomposition {
    /// s_p, descending.
    pub singular_values: Vec<f64>,
    /// ŝ_p = s_p / Σ s.
    pub normalized: Vec<f64>,
    /// Transmit half of each A_p.
    pub input_laws: Vec<Vec<Complex64>>,
    /// Receive half of each A_p.
    pub output_laws: Vec<Vec<Complex64>>,
    /// Window centres kept, in column order.
    pub centers: Vec<[f64; 2]>,
    /// I_p over the kept window centres.
    pub patch_vectors: Vec<Vec<Complex64>>,
    /// I_p interpolated to the grid, `(z, x)`, for the leading components.
    pub patch_maps: Vec<Array2<Complex64>>,
    /// H = −Σ ŝ log₂ ŝ (bits).
    pub entropy: f64,
    /// Invalid columns left out.
    pub dropped: usize,
}

/// Number of leading components rendered as maps.
pub const RENDERED_PATCHES: usize = 8;

/// SVD of the stacked phase-only matrix [exp(iφ_in); exp(iφ_out)] whose
/// columns are window centres.
pub fn isoplanatic_svd(atlas: &[AtlasColumn], grid: &ImageGrid) -> Result<IsoplanaticDecomposition> {
    let kept: Vec<&AtlasColumn> = atlas.iter().filter(|c| c.valid).collect();
    let dropped = atlas.len() - kept.len();
    let first = kept.first().ok_or(UmiError::InvalidInput("atlas has no valid window".into()))?;
    let (n_in, n_out) = (first.input.len(), first.output.len());
    if kept.iter().any(|c| c.input.len() != n_in || c.output.len() != n_out) {
        return Err(UmiError::Shape("atlas laws differ in length".into()));
    }
    let rows = n_in + n_out;
    let m = DMatrix::from_fn(rows, kept.len(), |i, j| {
        let c = kept[j];
        let p = if i < n_in { c.input[i] } else { c.output[i - n_in] };
        Complex64::from_polar(1.0, p)
    });
    let svd = checked_svd(&m).ok_or(UmiError::Numerical("atlas SVD did not converge".into()))?;
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let singular_values: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let total: f64 = singular_values.iter().sum();
    let normalized: Vec<f64> = singular_values.iter().map(|s| if total > 0.0 { s / total } else { 0.0 }).collect();
    let input_laws = order.iter().map(|&p| u.column(p).iter().take(n_in).copied().collect()).collect();
    let output_laws = order.iter().map(|&p| u.column(p).iter().skip(n_in).copied().collect()).collect();
    // I_p = conj of the right singular vector so that M = Σ s_p A_p I_p†
    let patch_vectors: Vec<Vec<Complex64>> =
        order.iter().map(|&p| vt.row(p).iter().map(|v| v.conj()).collect()).collect();
    let centers: Vec<[f64; 2]> = kept.iter().map(|c| c.center).collect();
    let patch_maps = patch_vectors.iter().take(RENDERED_PATCHES).map(|v| render(&centers, v, grid)).collect();
    Ok(IsoplanaticDecomposition {
        entropy: entropy(&singular_values),
        singular_values,
        normalized,
        input_laws,
        output_laws,
        centers,
        patch_vectors,
        patch_maps,
        dropped,
    })
}

/// Shannon entropy (bits) of a spectrum normalized to unit sum.
pub fn entropy(spectrum: &[f64]) -> f64 {
    let total: f64 = spectrum.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    spectrum
        .iter()
        .map(|s| s / total)
        .filter(|p| *p > 0.0)
        .map(|p| -p * p.log2())
        .sum::<f64>()
        .max(0.0)
}

/// Bilinear interpolation of values on a lattice of centres; lattice nodes
/// without a value count as zero and pixels beyond the lattice are clamped.
fn render(centers: &[[f64; 2]], values: &[Complex64], grid: &ImageGrid) -> Array2<Complex64> {
    let unique = |k: usize| {
        let mut v: Vec<f64> = centers.iter().map(|c| c[k]).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
        v
    };
    let (xs, zs) = (unique(0), unique(1));
    let mut lattice = Array2::<Complex64>::zeros((zs.len(), xs.len()));
    let find = |axis: &[f64], v: f64| axis.iter().position(|a| (a - v).abs() < 1e-9).expect("centre on lattice");
    for (c, v) in centers.iter().zip(values) {
        lattice[[find(&zs, c[1]), find(&xs, c[0])]] = *v;
    }
    let locate = |axis: &[f64], v: f64| -> (usize, usize, f64) {
        if axis.len() == 1 || v <= axis[0] {
            return (0, 0, 0.0);
        }
        if v >= axis[axis.len() - 1] {
            let l = axis.len() - 1;
            return (l, l, 0.0);
        }
        let i = axis.partition_point(|a| *a <= v) - 1;
        (i, i + 1, (v - axis[i]) / (axis[i + 1] - axis[i]))
    };
    Array2::from_shape_fn((grid.nz(), grid.nx()), |(iz, ix)| {
        let (z0, z1, fz) = locate(&zs, grid.z[iz]);
        let (x0, x1, fx) = locate(&xs, grid.x[ix]);
        lattice[[z0, x0]] * ((1.0 - fz) * (1.0 - fx))
            + lattice[[z0, x1]] * ((1.0 - fz) * fx)
            + lattice[[z1, x0]] * (fz * (1.0 - fx))
            + lattice[[z1, x1]] * (fz * fx)
    })
}

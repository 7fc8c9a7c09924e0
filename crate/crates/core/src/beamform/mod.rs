//! Focused reflection matrices: delay-and-sum construction, the adaptive
//! confocal filter and projections onto the plane-wave and transducer bases.

mod das;
mod operators;
mod project;

use ndarray::{Array2, Array3, ArrayView2, Axis as NdAxis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::config::{AcquisitionConfig, ImageGrid};
use crate::error::{Result, UmiError};
use crate::field::{Axis, Basis, ComplexMatrix2D};
use crate::optics::ideal_resolution;

pub use das::{das_focus, Apodization};
pub use operators::{
    build_p, build_q0, build_t0, free_space_q0, fresnel_kernel, k_axis, propagator, OperatorKind,
    PropagationOperator,
};
pub use project::{inverse_project, project, DualReflectionMatrix, Side};

/// Processing stage of a focused reflection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixVariant {
    Raw,
    Filtered,
    Corrected,
}

/// R(x_out, x_in, z) stacked over depth as `(z, x_out, x_in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusedReflectionMatrix {
    pub grid: ImageGrid,
    pub variant: MatrixVariant,
    pub data: Array3<Complex64>,
    /// Entries with |x_out − x_in| above this width (mm) are masked.
    pub mask_width: Option<f64>,
    /// Delay-and-sum contributions that fell outside the record.
    pub dropped: usize,
}

impl FocusedReflectionMatrix {
    pub fn nz(&self) -> usize {
        self.data.dim().0
    }

    pub fn at_depth(&self, iz: usize) -> ArrayView2<'_, Complex64> {
        self.data.index_axis(NdAxis(0), iz)
    }

    /// Depth slice as a labelled (x_out, x_in) matrix.
    pub fn slice(&self, iz: usize) -> ComplexMatrix2D {
        let x = Axis::new(Basis::Focused, self.grid.x.clone());
        ComplexMatrix2D::new(self.at_depth(iz).to_owned(), x.clone(), x, Some(self.grid.z[iz]))
            .expect("slice matches grid")
    }

    /// Diagonal R(x, x, z) as a `(z, x)` array.
    pub fn diagonal(&self) -> Array2<Complex64> {
        let (nz, nx, _) = self.data.dim();
        Array2::from_shape_fn((nz, nx), |(iz, ix)| self.data[[iz, ix, ix]])
    }

    pub fn with_variant(mut self, variant: MatrixVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// R′ = R̄ · exp(−|x_out − x_in|² / (2 l_c²)), with l_c taken at the midpoint
/// pixel (averaged over the two neighbours when the midpoint falls between
/// pixels). `lc` is indexed `(z, x)`; infinite values disable the filter.
pub fn confocal_filter(r: &FocusedReflectionMatrix, lc: &Array2<f64>) -> Result<FocusedReflectionMatrix> {
    let (nz, nx, _) = r.data.dim();
    if lc.dim() != (nz, nx) {
        return Err(UmiError::Shape(format!("l_c map is {:?}, expected ({nz}, {nx})", lc.dim())));
    }
    if lc.iter().any(|v| !(*v > 0.0)) {
        return Err(UmiError::InvalidInput("l_c must be positive everywhere".into()));
    }
    let x = &r.grid.x;
    let mut out = r.clone();
    out.variant = MatrixVariant::Filtered;
    for ((iz, i, j), v) in out.data.indexed_iter_mut() {
        if i == j {
            continue;
        }
        let l = 0.5 * (lc[[iz, (i + j) / 2]] + lc[[iz, (i + j + 1) / 2]]);
        let d = x[i] - x[j];
        *v *= (-d * d / (2.0 * l * l)).exp();
    }
    Ok(out)
}

/// Confocal filter widths: the measured input-output resolution where it is
/// known (finite entries of `width`, `(z, x)`), else `factor`·δx₀(r).
pub fn adaptive_lc(width: &Array2<f64>, grid: &ImageGrid, config: &AcquisitionConfig, factor: f64) -> Result<Array2<f64>> {
    if width.dim() != (grid.nz(), grid.nx()) {
        return Err(UmiError::Shape(format!("width map is {:?}, grid is ({}, {})", width.dim(), grid.nz(), grid.nx())));
    }
    if !(factor > 0.0) {
        return Err(UmiError::InvalidInput("filter factor must be positive".into()));
    }
    let mut out = Array2::zeros(width.dim());
    for ((iz, ix), v) in out.indexed_iter_mut() {
        let w = width[[iz, ix]];
        *v = if w.is_finite() && w > 0.0 { w } else { factor * ideal_resolution(grid.x[ix], grid.z[iz], config)? };
    }
    Ok(out)
}

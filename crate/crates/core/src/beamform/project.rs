//! Change of basis on one side of a focused reflection matrix.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::PropagationOperator;
use crate::error::{Result, UmiError};
use crate::field::{Basis, ComplexMatrix2D};

/// Which index of the reflection matrix a projection acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    /// Receive index (rows).
    Output,
    /// Transmit index (columns).
    Input,
}

/// Reflection matrix with one focused axis and one dual (k or u) axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DualReflectionMatrix {
    pub matrix: ComplexMatrix2D,
    /// Side carrying the dual axis.
    pub side: Side,
}

impl DualReflectionMatrix {
    pub fn dual_basis(&self) -> Basis {
        match self.side {
            Side::Output => self.matrix.rows.basis,
            Side::Input => self.matrix.cols.basis,
        }
    }
}

/// Output side: `B × R`; input side: `R × Bᵀ`.
pub fn project(r: &ComplexMatrix2D, side: Side, op: &PropagationOperator) -> Result<DualReflectionMatrix> {
    r.rows.expect(Basis::Focused)?;
    r.cols.expect(Basis::Focused)?;
    r.check_depth(op.depth())?;
    let b = &op.matrix;
    b.cols.expect(Basis::Focused)?;
    let matrix = match side {
        Side::Output => {
            b.cols.same_as(&r.rows)?;
            ComplexMatrix2D::new(b.values.dot(&r.values), b.rows.clone(), r.cols.clone(), r.depth)?
        }
        Side::Input => {
            b.cols.same_as(&r.cols)?;
            ComplexMatrix2D::new(r.values.dot(&b.values.t()), r.rows.clone(), b.rows.clone(), r.depth)?
        }
    };
    Ok(DualReflectionMatrix { matrix, side })
}

/// Back to the focused basis through `B† / g` (output) or `B* / g` on the
/// right (input), `g` the operator's Gram scale. Exact inverse when `B` is
/// square and `B B† = g I`; otherwise the projection onto its range.
pub fn inverse_project(d: &DualReflectionMatrix, op: &PropagationOperator) -> Result<ComplexMatrix2D> {
    let b = &op.matrix;
    d.matrix.check_depth(op.depth())?;
    if op.gram <= 0.0 {
        return Err(UmiError::Numerical("operator Gram scale must be positive".into()));
    }
    let g = Complex64::new(1.0 / op.gram, 0.0);
    match d.side {
        Side::Output => {
            b.rows.same_as(&d.matrix.rows)?;
            let adj = b.values.t().mapv(|v| v.conj());
            ComplexMatrix2D::new(adj.dot(&d.matrix.values) * g, b.cols.clone(), d.matrix.cols.clone(), d.matrix.depth)
        }
        Side::Input => {
            b.rows.same_as(&d.matrix.cols)?;
            let conj = b.values.mapv(|v| v.conj());
            ComplexMatrix2D::new(d.matrix.values.dot(&conj) * g, d.matrix.rows.clone(), b.cols.clone(), d.matrix.depth)
        }
    }
}

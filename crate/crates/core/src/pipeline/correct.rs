//! Estimated propagation operators and phase-only corrections.

use ndarray::Array2;
use num_complex::Complex64;

use crate::beamform::{OperatorKind, PropagationOperator, Side};
use crate::distortion::AberrationLaw;
use crate::error::{Result, UmiError};
use crate::field::{Basis, ComplexMatrix2D};

/// B₁ = B₀ ∘ Û₁ ∘ Û₂ ∘ …, each law applied along the dual rows.
///
/// Q₀ becomes Q₁ (one law) or Q₂ (several); T₀ keeps its kind.
pub fn build_estimator(geom: &PropagationOperator, laws: &[&AberrationLaw]) -> Result<PropagationOperator> {
    let rows = &geom.matrix.rows;
    let mut t = vec![Complex64::new(1.0, 0.0); rows.len()];
    for law in laws {
        if law.basis != rows.basis {
            return Err(UmiError::BasisMismatch { expected: rows.basis, found: law.basis });
        }
        if law.coords.len() != rows.len() || law.coords.iter().zip(&rows.coords).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(UmiError::Shape("law coordinates differ from the operator rows".into()));
        }
        t.iter_mut().zip(law.transmittance()).for_each(|(a, b)| *a *= b);
    }
    let kind = match (geom.kind, laws.len()) {
        (OperatorKind::Q0 | OperatorKind::Q1 | OperatorKind::Q2, 0) => geom.kind,
        (OperatorKind::Q0, 1) => OperatorKind::Q1,
        (OperatorKind::Q0 | OperatorKind::Q1 | OperatorKind::Q2, _) => OperatorKind::Q2,
        (OperatorKind::T0, _) => OperatorKind::T0,
        (OperatorKind::P, _) => {
            return Err(UmiError::InvalidInput("the plane-wave propagator cannot carry a law".into()));
        }
    };
    let mut values = geom.matrix.values.clone();
    for (mut row, f) in values.rows_mut().into_iter().zip(&t) {
        row.mapv_inplace(|v| v * f);
    }
    Ok(PropagationOperator { kind, matrix: ComplexMatrix2D { values, ..geom.matrix.clone() }, gram: geom.gram })
}

/// B₀ ∘ L with a per-column transmittance `L` (dual rows × focal pixels),
/// used when the law varies across the image.
pub fn blended_estimator(geom: &PropagationOperator, transmittance: &Array2<Complex64>) -> Result<PropagationOperator> {
    if transmittance.dim() != geom.matrix.shape() {
        return Err(UmiError::Shape(format!(
            "transmittance is {:?}, operator is {:?}",
            transmittance.dim(),
            geom.matrix.shape()
        )));
    }
    let kind = match geom.kind {
        OperatorKind::T0 => OperatorKind::T0,
        OperatorKind::P => return Err(UmiError::InvalidInput("the plane-wave propagator cannot carry a law".into())),
        _ => OperatorKind::Q2,
    };
    let values = &geom.matrix.values * transmittance;
    Ok(PropagationOperator { kind, matrix: ComplexMatrix2D { values, ..geom.matrix.clone() }, gram: geom.gram })
}

fn check_pair(r: &ComplexMatrix2D, b0: &PropagationOperator, b1: &PropagationOperator) -> Result<()> {
    r.rows.expect(Basis::Focused)?;
    r.cols.expect(Basis::Focused)?;
    r.check_depth(b0.depth())?;
    r.check_depth(b1.depth())?;
    b0.matrix.rows.same_as(&b1.matrix.rows)?;
    b0.matrix.cols.same_as(&b1.matrix.cols)?;
    if b0.gram <= 0.0 {
        return Err(UmiError::Numerical("operator Gram scale must be positive".into()));
    }
    Ok(())
}

/// R_c = B₁† B₀ R / g.
pub fn apply_output_correction(r: &ComplexMatrix2D, b0: &PropagationOperator, b1: &PropagationOperator) -> Result<ComplexMatrix2D> {
    check_pair(r, b0, b1)?;
    b0.matrix.cols.same_as(&r.rows)?;
    let dual = b0.matrix.values.dot(&r.values);
    let adj = b1.matrix.values.t().mapv(|v| v.conj());
    let values = adj.dot(&dual) * Complex64::new(1.0 / b0.gram, 0.0);
    ComplexMatrix2D::new(values, r.rows.clone(), r.cols.clone(), r.depth)
}

/// R_c = R B₀ᵀ B₁* / g.
pub fn apply_input_correction(r: &ComplexMatrix2D, b0: &PropagationOperator, b1: &PropagationOperator) -> Result<ComplexMatrix2D> {
    check_pair(r, b0, b1)?;
    b0.matrix.cols.same_as(&r.cols)?;
    let dual = r.values.dot(&b0.matrix.values.t());
    let conj = b1.matrix.values.mapv(|v| v.conj());
    let values = dual.dot(&conj) * Complex64::new(1.0 / b0.gram, 0.0);
    ComplexMatrix2D::new(values, r.rows.clone(), r.cols.clone(), r.depth)
}

pub fn apply_correction(side: Side, r: &ComplexMatrix2D, b0: &PropagationOperator, b1: &PropagationOperator) -> Result<ComplexMatrix2D> {
    match side {
        Side::Output => apply_output_correction(r, b0, b1),
        Side::Input => apply_input_correction(r, b0, b1),
    }
}

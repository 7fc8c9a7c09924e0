//! Tagged complex containers shared by every stage.

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UmiError};

/// Closed set of bases a matrix axis can live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    /// Lateral focal-point position x (mm).
    Focused,
    /// Transverse wavenumber k_x (rad/mm).
    PlaneWave,
    /// Transducer (or virtual transducer) position u (mm).
    Transducer,
}

/// Coordinate vector carrying its basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub basis: Basis,
    pub coords: Vec<f64>,
}

impl Axis {
    pub fn new(basis: Basis, coords: Vec<f64>) -> Self {
        Self { basis, coords }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn expect(&self, basis: Basis) -> Result<()> {
        if self.basis == basis {
            Ok(())
        } else {
            Err(UmiError::BasisMismatch { expected: basis, found: self.basis })
        }
    }

    /// Same basis and coordinates.
    pub fn same_as(&self, other: &Axis) -> Result<()> {
        other.expect(self.basis)?;
        if self.coords.len() != other.coords.len()
            || self
                .coords
                .iter()
                .zip(&other.coords)
                .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs()))
        {
            return Err(UmiError::Shape(format!(
                "axis coordinates differ ({} vs {} entries)",
                self.coords.len(),
                other.coords.len()
            )));
        }
        Ok(())
    }
}

/// Dense complex matrix with labelled axes and an optional depth tag.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix2D {
    pub values: Array2<Complex64>,
    pub rows: Axis,
    pub cols: Axis,
    pub depth: Option<f64>,
}

impl ComplexMatrix2D {
    pub fn new(values: Array2<Complex64>, rows: Axis, cols: Axis, depth: Option<f64>) -> Result<Self> {
        if values.nrows() != rows.len() || values.ncols() != cols.len() {
            return Err(UmiError::Shape(format!(
                "values are {}x{} but axes are {}x{}",
                values.nrows(),
                values.ncols(),
                rows.len(),
                cols.len()
            )));
        }
        Ok(Self { values, rows, cols, depth })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.values.nrows(), self.values.ncols())
    }

    /// Transposed copy with swapped axes.
    pub fn transposed(&self) -> Self {
        Self {
            values: self.values.t().to_owned(),
            rows: self.cols.clone(),
            cols: self.rows.clone(),
            depth: self.depth,
        }
    }

    pub fn check_depth(&self, other: Option<f64>) -> Result<()> {
        match (self.depth, other) {
            (Some(a), Some(b)) if (a - b).abs() > 1e-9 => {
                Err(UmiError::Shape(format!("depth {a} mm does not match {b} mm")))
            }
            _ => Ok(()),
        }
    }
}

/// Real channel data indexed (receive element, transmit angle, time sample).
#[derive(Debug, Clone, PartialEq)]
pub struct RawCube {
    pub data: Array3<f64>,
    pub sampling_frequency: f64,
    /// Time of sample 0 (s).
    pub t0: f64,
    /// Echo contributions that fell outside the record.
    pub truncated: usize,
}

/// Analytic (one-sided spectrum) channel data indexed (u_out, θ_in, t).
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticCube {
    pub data: Array3<Complex64>,
    pub sampling_frequency: f64,
    pub t0: f64,
}

impl AnalyticCube {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn time(&self, n: usize) -> f64 {
        self.t0 + n as f64 / self.sampling_frequency
    }
}

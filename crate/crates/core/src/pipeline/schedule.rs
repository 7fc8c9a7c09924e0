//! Correction schedule.

use serde::{Deserialize, Serialize};

use crate::beamform::Side;
use crate::error::{Result, UmiError};
use crate::field::Basis;

/// Factorization used to extract a law from a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvdType {
    /// Leading singular vector of the distortion matrix.
    Distortion,
    /// Leading eigenvector of the normalized correlation matrix δĈ.
    NormalizedCorrelation,
}

/// One step: a receive correction followed by a transmit correction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleStep {
    /// 1-based position in the schedule.
    pub index: usize,
    /// Confocal filter width in units of δx₀ where no measured width exists.
    pub filter_factor: f64,
    /// Full window widths (Δx, Δz) in mm.
    pub window: [f64; 2],
    pub transmit_basis: Basis,
    pub receive_basis: Basis,
    pub svd_type: SvdType,
}

impl ScheduleStep {
    pub fn basis(&self, side: Side) -> Basis {
        match side {
            Side::Output => self.receive_basis,
            Side::Input => self.transmit_basis,
        }
    }
}

/// The four-step schedule: shrinking windows, alternating bases, distortion
/// SVD first and normalized correlation last.
pub fn default_schedule() -> Vec<ScheduleStep> {
    use Basis::{PlaneWave as K, Transducer as U};
    let rows = [
        (10.0, [10.0, 20.0], K, U, SvdType::Distortion),
        (10.0, [7.5, 15.0], U, K, SvdType::Distortion),
        (8.0, [5.0, 10.0], K, U, SvdType::NormalizedCorrelation),
        (6.0, [3.0, 7.5], U, K, SvdType::NormalizedCorrelation),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(n, window, tx, rx, svd_type))| ScheduleStep {
            index: i + 1,
            filter_factor: n,
            window,
            transmit_basis: tx,
            receive_basis: rx,
            svd_type,
        })
        .collect()
}

/// Checks bases, positive windows that never grow, and consecutive indices.
pub fn validate_schedule(schedule: &[ScheduleStep]) -> Result<()> {
    for (i, s) in schedule.iter().enumerate() {
        if s.index != i + 1 {
            return Err(UmiError::InvalidInput(format!("step {} has index {}", i + 1, s.index)));
        }
        if !(s.filter_factor > 0.0) || !(s.window[0] > 0.0 && s.window[1] > 0.0) {
            return Err(UmiError::InvalidInput(format!("step {} needs a positive filter factor and window", s.index)));
        }
        for b in [s.transmit_basis, s.receive_basis] {
            if b == Basis::Focused {
                return Err(UmiError::InvalidInput(format!("step {} uses the focused basis for correction", s.index)));
            }
        }
        if i > 0 {
            let p = &schedule[i - 1];
            if s.window[0] > p.window[0] || s.window[1] > p.window[1] {
                return Err(UmiError::InvalidInput(format!("window grows at step {}", s.index)));
            }
        }
    }
    Ok(())
}

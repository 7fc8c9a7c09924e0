//! Diffraction-limited resolution, collection angle and the aliasing bound.

use serde::{Deserialize, Serialize};

use crate::config::AcquisitionConfig;
use crate::error::{Result, UmiError};

/// Half-angle subtended by the array at a focal point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollectionAngle {
    /// β(r) in radians, after the optional steering clip.
    pub beta: f64,
    /// Aperture extent Δu = 2 z tan β (mm).
    pub aperture_extent: f64,
}

/// β(r) = min(atan(max_e |u_e − x| / z), clip).
pub fn collection_angle(x: f64, z: f64, config: &AcquisitionConfig) -> Result<CollectionAngle> {
    if !(z > 0.0) || !x.is_finite() {
        return Err(UmiError::Geometry(format!("focal point ({x}, {z}) mm must have z > 0")));
    }
    let offset = config
        .element_positions()
        .iter()
        .map(|u| (u - x).abs())
        .fold(0.0, f64::max);
    let mut beta = (offset / z).atan();
    if let Some(clip) = config.max_steering_angle {
        beta = beta.min(clip.abs());
    }
    Ok(CollectionAngle { beta, aperture_extent: 2.0 * z * beta.tan() })
}

/// δx₀(r) = λ_c / (2 sin β(r)) in mm.
pub fn ideal_resolution(x: f64, z: f64, config: &AcquisitionConfig) -> Result<f64> {
    let beta = collection_angle(x, z, config)?.beta;
    if beta <= 0.0 {
        return Err(UmiError::Geometry("collection angle is zero".into()));
    }
    Ok(config.wavelength() / (2.0 * beta.sin()))
}

/// Δx_max = λ_max / (2 δθ) in mm, with λ_max = c₀ / f_min.
pub fn aliasing_bound(config: &AcquisitionConfig) -> Result<f64> {
    let step = config.angle_step().ok_or(UmiError::UndefinedBound)?;
    let lambda_max = config.speed() / config.min_frequency;
    Ok(lambda_max / (2.0 * step))
}

//! Acquisition parameters and the imaging grid.
//!
//! Units: lengths in millimetres, times in seconds, frequencies in hertz and
//! sound speed in metres per second. Wavenumbers are in rad/mm.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UmiError};

/// Linear-array plane-wave acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub num_elements: usize,
    /// Element pitch (mm).
    pub pitch: f64,
    pub center_frequency: f64,
    pub sampling_frequency: f64,
    /// Beamforming sound speed c0 (m/s).
    pub sound_speed: f64,
    /// Steering angles (rad), strictly increasing with a uniform step.
    pub transmit_angles: Vec<f64>,
    /// Record length (s).
    pub record_duration: f64,
    /// Number of half periods of the emitted burst.
    pub pulse_cycles: usize,
    /// Lower band edge used by the aliasing bound (Hz).
    #[serde(default = "default_min_frequency")]
    pub min_frequency: f64,
    /// Optional clip applied to the collection half-angle (rad).
    #[serde(default)]
    pub max_steering_angle: Option<f64>,
}

fn default_min_frequency() -> f64 {
    2.0e6
}

impl AcquisitionConfig {
    /// Desk-scale default: 64 elements at 0.3 mm, 33 angles over ±20°, 4 MHz.
    pub fn desk() -> Self {
        Self {
            num_elements: 64,
            pitch: 0.3,
            center_frequency: 4.0e6,
            sampling_frequency: 40.0e6,
            sound_speed: 1540.0,
            transmit_angles: uniform_angles(33, 20f64.to_radians()),
            record_duration: 72e-6,
            pulse_cycles: 3,
            min_frequency: 2.0e6,
            max_steering_angle: Some(20f64.to_radians()),
        }
    }

    /// Probe and sequence of the in-vivo acquisition the method was shown on:
    /// 192 elements at 0.2 mm, 101 angles over ±25°, 7.5 MHz, 1580 m/s.
    pub fn wide_probe() -> Self {
        Self {
            num_elements: 192,
            pitch: 0.2,
            center_frequency: 7.5e6,
            sampling_frequency: 40.0e6,
            sound_speed: 1580.0,
            transmit_angles: uniform_angles(101, 25f64.to_radians()),
            record_duration: 80e-6,
            pulse_cycles: 3,
            min_frequency: 2.0e6,
            max_steering_angle: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UmiError::InvalidInput(m.to_string()));
        if self.num_elements == 0 {
            return bad("num_elements must be positive");
        }
        if !(self.pitch > 0.0 && self.pitch.is_finite()) {
            return bad("pitch must be positive");
        }
        if !(self.sound_speed > 0.0 && self.sound_speed.is_finite()) {
            return bad("sound_speed must be positive");
        }
        if !(self.center_frequency > 0.0) {
            return bad("center_frequency must be positive");
        }
        if !(self.sampling_frequency > 2.0 * self.center_frequency) {
            return bad("sampling_frequency must exceed twice the center frequency");
        }
        if !(self.record_duration > 0.0) {
            return bad("record_duration must be positive");
        }
        if !(self.min_frequency > 0.0) {
            return bad("min_frequency must be positive");
        }
        if self.transmit_angles.is_empty() {
            return bad("at least one transmit angle is required");
        }
        if self.transmit_angles.iter().any(|a| !a.is_finite()) {
            return bad("transmit angles must be finite");
        }
        if self.transmit_angles.len() >= 2 {
            let step = self.transmit_angles[1] - self.transmit_angles[0];
            if step <= 0.0 {
                return bad("transmit angles must be strictly increasing");
            }
            for w in self.transmit_angles.windows(2) {
                let d = w[1] - w[0];
                if d <= 0.0 {
                    return bad("transmit angles must be strictly increasing");
                }
                if (d - step).abs() > 1e-9 * step.abs().max(1e-12) + 1e-12 {
                    return bad("transmit angles must have a uniform step");
                }
            }
        }
        Ok(())
    }

    /// Sound speed in mm/s.
    pub fn speed(&self) -> f64 {
        self.sound_speed * 1e3
    }

    pub fn wavelength(&self) -> f64 {
        self.speed() / self.center_frequency
    }

    /// Central wavenumber k_c (rad/mm).
    pub fn wavenumber(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.wavelength()
    }

    pub fn angular_frequency(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.center_frequency
    }

    /// Element centres (mm), symmetric about x = 0.
    pub fn element_positions(&self) -> Vec<f64> {
        let n = self.num_elements as f64;
        (0..self.num_elements)
            .map(|i| (i as f64 - (n - 1.0) / 2.0) * self.pitch)
            .collect()
    }

    /// Distance between the outermost element centres (mm).
    pub fn aperture(&self) -> f64 {
        (self.num_elements.saturating_sub(1)) as f64 * self.pitch
    }

    pub fn num_samples(&self) -> usize {
        (self.record_duration * self.sampling_frequency).round() as usize
    }

    /// Uniform angular step, if defined.
    pub fn angle_step(&self) -> Option<f64> {
        if self.transmit_angles.len() < 2 {
            None
        } else {
            Some(self.transmit_angles[1] - self.transmit_angles[0])
        }
    }

    /// Duration of the emitted burst (s).
    pub fn pulse_duration(&self) -> f64 {
        self.pulse_cycles as f64 / (2.0 * self.center_frequency)
    }

    /// Axial resolution c0 · (pulse duration) / 2 (mm).
    pub fn axial_resolution(&self) -> f64 {
        self.speed() * self.pulse_duration() / 2.0
    }
}

/// `n` uniformly spaced angles spanning `[-max, max]`.
pub fn uniform_angles(n: usize, max: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n)
        .map(|i| -max + 2.0 * max * i as f64 / (n - 1) as f64)
        .collect()
}

/// Uniform rectilinear grid of focal points (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

impl ImageGrid {
    pub fn new(x0: f64, dx: f64, nx: usize, z0: f64, dz: f64, nz: usize) -> Result<Self> {
        let grid = Self {
            x: (0..nx).map(|i| x0 + dx * i as f64).collect(),
            z: (0..nz).map(|i| z0 + dz * i as f64).collect(),
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Desk default: 192 lateral pixels over 30 mm centred on the array,
    /// 80 depths from 5 mm at 0.5 mm.
    pub fn desk() -> Self {
        let nx = 192;
        let dx = 30.0 / nx as f64;
        Self::new(-15.0 + dx / 2.0, dx, nx, 5.0, 0.5, 80).expect("valid desk grid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() || self.z.is_empty() {
            return Err(UmiError::Geometry("grid axes must be non-empty".into()));
        }
        for axis in [&self.x, &self.z] {
            if axis.len() >= 2 {
                let d = axis[1] - axis[0];
                if !(d > 0.0) {
                    return Err(UmiError::Geometry("grid spacing must be positive".into()));
                }
                for (i, v) in axis.iter().enumerate() {
                    let expect = axis[0] + d * i as f64;
                    if (v - expect).abs() > 1e-9 * (1.0 + expect.abs()) {
                        return Err(UmiError::Geometry("grid spacing must be uniform".into()));
                    }
                }
            }
        }
        if self.z.iter().any(|&z| !(z > 0.0)) {
            return Err(UmiError::Geometry("all depths must be positive".into()));
        }
        Ok(())
    }

    pub fn nx(&self) -> usize {
        self.x.len()
    }

    pub fn nz(&self) -> usize {
        self.z.len()
    }

    pub fn dx(&self) -> f64 {
        if self.x.len() < 2 {
            1.0
        } else {
            self.x[1] - self.x[0]
        }
    }

    pub fn dz(&self) -> f64 {
        if self.z.len() < 2 {
            1.0
        } else {
            self.z[1] - self.z[0]
        }
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.dx(), self.dz())
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        let (dx, dz) = self.spacing();
        x >= self.x[0] - dx / 2.0
            && x <= self.x[self.nx() - 1] + dx / 2.0
            && z >= self.z[0] - dz / 2.0
            && z <= self.z[self.nz() - 1] + dz / 2.0
    }

    /// Index of the pixel nearest to `x` (clamped).
    pub fn nearest_x(&self, x: f64) -> usize {
        nearest(&self.x, x)
    }

    pub fn nearest_z(&self, z: f64) -> usize {
        nearest(&self.z, z)
    }
}

fn nearest(axis: &[f64], v: f64) -> usize {
    if axis.len() < 2 {
        return 0;
    }
    let d = axis[1] - axis[0];
    let i = ((v - axis[0]) / d).round();
    i.clamp(0.0, (axis.len() - 1) as f64) as usize
}

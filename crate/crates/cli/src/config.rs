//! Run configuration read by `umi simulate` and echoed into every container.

use std::path::Path;

use serde::{Deserialize, Serialize};
use umi_core::beamform::Apodization;
use umi_core::phantom::{gaussian_screen, AberratorSpec, Layer, MultipleScatteringNoiseSpec, PhantomSpec, PulseSpec};
use umi_core::pipeline::{default_schedule, validate_schedule, PipelineOptions, ScheduleStep};
use umi_core::{AcquisitionConfig, ImageGrid};

use crate::error::{CliError, Result};

/// JSON schema of [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run-config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "AcquisitionConfig::desk")]
    pub acquisition: AcquisitionConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_phantom")]
    pub phantom: PhantomSpec,
    #[serde(default)]
    pub aberrator: AberratorConfig,
    #[serde(default)]
    pub noise: Option<MultipleScatteringNoiseSpec>,
    #[serde(default)]
    pub apodization: Apodization,
    #[serde(default = "default_schedule")]
    pub schedule: Vec<ScheduleStep>,
    #[serde(default)]
    pub pipeline: PipelineOptions,
    #[serde(default)]
    pub reference: ReferenceSpec,
    #[serde(default)]
    pub output: OutputOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            acquisition: AcquisitionConfig::desk(),
            grid: GridSpec::default(),
            phantom: default_phantom(),
            aberrator: AberratorConfig::default(),
            noise: None,
            apodization: Apodization::default(),
            schedule: default_schedule(),
            pipeline: PipelineOptions::default(),
            reference: ReferenceSpec::default(),
            output: OutputOptions::default(),
        }
    }
}

fn default_phantom() -> PhantomSpec {
    PhantomSpec::speckle([-15.0, 15.0], [3.0, 47.0], 7)
}

/// Uniform focal grid (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub x0: f64,
    pub dx: f64,
    pub nx: usize,
    pub z0: f64,
    pub dz: f64,
    pub nz: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        let g = ImageGrid::desk();
        Self { x0: g.x[0], dx: g.dx(), nx: g.nx(), z0: g.z[0], dz: g.dz(), nz: g.nz() }
    }
}

impl GridSpec {
    pub fn build(&self) -> Result<ImageGrid> {
        Ok(ImageGrid::new(self.x0, self.dx, self.nx, self.z0, self.dz, self.nz)?)
    }

    /// Parses `x0,dx,nx,z0,dz,nz`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || CliError::Validation(format!("--grid expects x0,dx,nx,z0,dz,nz, got {s:?}"));
        if parts.len() != 6 {
            return Err(bad());
        }
        let f = |i: usize| parts[i].parse::<f64>().map_err(|_| bad());
        let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        Ok(Self { x0: f(0)?, dx: f(1)?, nx: n(2)?, z0: f(3)?, dz: f(4)?, nz: n(5)? })
    }
}

/// Aberrator as written in a config: any fixed aberrator, or a seeded random
/// transducer-plane screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum AberratorConfig {
    None,
    TransducerScreen {
        phase: Vec<f64>,
        #[serde(default)]
        amplitude: Option<Vec<f64>>,
    },
    PlaneWaveScreen {
        phase: Vec<f64>,
    },
    LayeredC {
        layers: Vec<Layer>,
        bottom_speed: f64,
    },
    /// Gaussian-correlated screen with exactly `rms` radians over the elements.
    GaussianScreen {
        rms: f64,
        /// Correlation length (mm).
        correlation_length: f64,
        seed: u64,
    },
}

impl Default for AberratorConfig {
    fn default() -> Self {
        AberratorConfig::GaussianScreen { rms: 1.0, correlation_length: 3.0, seed: 5 }
    }
}

impl AberratorConfig {
    pub fn resolve(&self, config: &AcquisitionConfig) -> Result<AberratorSpec> {
        let spec = match self.clone() {
            AberratorConfig::None => AberratorSpec::None,
            AberratorConfig::TransducerScreen { phase, amplitude } => AberratorSpec::TransducerScreen { phase, amplitude },
            AberratorConfig::PlaneWaveScreen { phase } => AberratorSpec::PlaneWaveScreen { phase },
            AberratorConfig::LayeredC { layers, bottom_speed } => AberratorSpec::LayeredC { layers, bottom_speed },
            AberratorConfig::GaussianScreen { rms, correlation_length, seed } => {
                if !(rms >= 0.0 && rms.is_finite()) || !(correlation_length >= 0.0 && correlation_length.is_finite()) {
                    return Err(CliError::Validation(
                        "aberrator: rms and correlation_length must be finite and non-negative".into(),
                    ));
                }
                AberratorSpec::TransducerScreen { phase: gaussian_screen(config, rms, correlation_length, seed), amplitude: None }
            }
        };
        spec.validate(config).map_err(|e| CliError::Validation(format!("aberrator: {e}")))?;
        Ok(spec)
    }
}

/// Aberration-free simulation that provides the reference widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSpec {
    /// Phantom seed of the reference run.
    pub seed: u64,
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        Self { seed: 1001 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputOptions {
    /// Displayed dynamic range of log-compressed images (dB).
    pub dynamic_range_db: f64,
}

impl Default for OutputOptions {
    fn default() -> Self {
        Self { dynamic_range_db: 40.0 }
    }
}

fn field(name: &'static str) -> impl Fn(umi_core::UmiError) -> CliError {
    move |e| CliError::Validation(format!("{name}: {e}"))
}

impl RunConfig {
    /// Parses JSON text; errors name the offending field and position.
    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            CliError::Validation(format!("{origin}:{}:{}: {}: {inner}", inner.line(), inner.column(), e.path()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path.display().to_string()))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_value(v: &serde_json::Value) -> Result<Self> {
        let cfg: RunConfig = serde_path_to_error::deserialize(v.clone())
            .map_err(|e| CliError::Validation(format!("embedded config: {}: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks everything serde cannot: physical ranges and cross-field shapes.
    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate().map_err(field("acquisition"))?;
        self.grid.build().map_err(|e| CliError::Validation(format!("grid: {e}")))?;
        self.aberrator.resolve(&self.acquisition)?;
        PulseSpec::from_config(&self.acquisition).validate().map_err(field("acquisition.pulse_cycles"))?;
        self.apodization.validate().map_err(field("apodization"))?;
        validate_schedule(&self.schedule).map_err(field("schedule"))?;
        if let Some(n) = &self.noise {
            if n.power_db.is_nan() || n.power_db == f64::INFINITY {
                return Err(CliError::Validation("noise.power_db must be finite".into()));
            }
        }
        let p = &self.pipeline.profile;
        if !(p.cell[0] > 0.0 && p.cell[1] > 0.0 && p.lag_half_width > 0.0) {
            return Err(CliError::Validation("pipeline.profile: cell and lag_half_width must be positive".into()));
        }
        if !(self.output.dynamic_range_db > 0.0) {
            return Err(CliError::Validation("output.dynamic_range_db must be positive".into()));
        }
        Ok(())
    }
}

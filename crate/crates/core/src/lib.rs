//! Ultrasound matrix imaging on a desk: synthetic plane-wave channel data,
//! focused reflection matrices, distortion-matrix estimation of local
//! aberration laws and their iterative correction.

pub mod beamform;
pub mod config;
pub mod distortion;
pub mod error;
pub mod field;
pub mod metrics;
pub mod optics;
pub mod phantom;
pub mod pipeline;
pub mod signal;

pub use config::{AcquisitionConfig, ImageGrid};
pub use error::{Result, UmiError};
pub use field::{AnalyticCube, Axis, Basis, ComplexMatrix2D, RawCube};

#[doc = include_str!("../../../book/src/introduction.md")]
mod chapter_introduction {}
#[doc = include_str!("../../../book/src/acquisition.md")]
mod chapter_acquisition {}
#[doc = include_str!("../../../book/src/focused-matrix.md")]
mod chapter_focused_matrix {}
#[doc = include_str!("../../../book/src/dual-bases.md")]
mod chapter_dual_bases {}
#[doc = include_str!("../../../book/src/distortion.md")]
mod chapter_distortion {}
#[doc = include_str!("../../../book/src/focusing-factor.md")]
mod chapter_focusing_factor {}
#[doc = include_str!("../../../book/src/correction.md")]
mod chapter_correction {}
#[doc = include_str!("../../../book/src/isoplanatic.md")]
mod chapter_isoplanatic {}

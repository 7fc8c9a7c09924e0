//! Record of every estimated law and their composition at a focal point.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::estimate::{DualFrame, WindowEstimate};
use super::windows::WindowLayout;
use crate::beamform::Side;
use crate::config::AcquisitionConfig;
use crate::error::Result;
use crate::field::Basis;
use crate::metrics::{median, AtlasColumn};
use crate::phantom::{ground_truth_law, AberratorSpec};

/// Laws of one substep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstepRecord {
    pub step: usize,
    pub side: Side,
    pub frame: DualFrame,
    pub layout: WindowLayout,
    pub estimates: Vec<WindowEstimate>,
    /// Set when the step was undone.
    pub rolled_back: bool,
}

impl SubstepRecord {
    /// Blended transmittance over all frame rows at (x, z).
    pub fn transmittance_at(&self, x: f64, z: f64) -> Vec<Complex64> {
        let w = self.layout.weights(x, z);
        if w.is_empty() {
            return self.frame.expand(None);
        }
        let mut t = vec![Complex64::new(0.0, 0.0); self.frame.coords.len()];
        for (win, c) in w {
            let e = &self.estimates[win];
            let tw = self.frame.expand(e.usable().then_some(&e.law));
            t.iter_mut().zip(tw).for_each(|(a, b)| *a += b * c);
        }
        t
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AberrationAtlas {
    pub substeps: Vec<SubstepRecord>,
}

impl AberrationAtlas {
    pub fn kept(&self) -> impl Iterator<Item = &SubstepRecord> {
        self.substeps.iter().filter(|r| !r.rolled_back)
    }

    /// One column per window of the last kept step: accumulated transmit and
    /// receive phases at the elements.
    pub fn columns(&self, config: &AcquisitionConfig) -> Vec<AtlasColumn> {
        let Some(last) = self.kept().last().map(|r| r.step) else {
            return Vec::new();
        };
        let records: Vec<&SubstepRecord> = self.kept().filter(|r| r.step == last).collect();
        let layout = &records[0].layout;
        (0..layout.len())
            .map(|w| {
                let center = layout.center(w);
                let phase = |side| accumulated_law(self, side, center, config).iter().map(|v| v.arg()).collect();
                AtlasColumn {
                    center,
                    input: phase(Side::Input),
                    output: phase(Side::Output),
                    valid: records.iter().all(|r| r.estimates[w].usable()),
                }
            })
            .collect()
    }
}

/// Linear interpolation of a transmittance on a uniform axis; 1 outside.
fn interpolate(coords: &[f64], t: &[Complex64], v: f64) -> Complex64 {
    let n = coords.len();
    if n == 0 || v < coords[0] || v > coords[n - 1] {
        return Complex64::new(1.0, 0.0);
    }
    if n == 1 {
        return t[0];
    }
    let step = coords[1] - coords[0];
    let f = (v - coords[0]) / step;
    let i = (f.floor() as usize).min(n - 2);
    let a = f - i as f64;
    t[i] * (1.0 - a) + t[i + 1] * a
}

/// Wavenumber of the ray joining element `u` to the focal point (x, z).
fn ray_wavenumber(u: f64, x: f64, z: f64, kc: f64) -> f64 {
    let d = x - u;
    kc * d / (d * d + z * z).sqrt()
}

/// Product of every kept law on `side` at `point`, expressed on the
/// elements; plane-wave laws are read along the ray through each element.
/// Unit modulus wherever the product is non-zero.
pub fn accumulated_law(atlas: &AberrationAtlas, side: Side, point: [f64; 2], config: &AcquisitionConfig) -> Vec<Complex64> {
    let elements = config.element_positions();
    let kc = config.wavenumber();
    let [x, z] = point;
    let mut acc = vec![Complex64::new(1.0, 0.0); elements.len()];
    for r in atlas.kept().filter(|r| r.side == side) {
        let t = r.transmittance_at(x, z);
        for (a, &u) in acc.iter_mut().zip(&elements) {
            let c = match r.frame.basis {
                Basis::PlaneWave => ray_wavenumber(u, x, z, kc),
                _ => u,
            };
            *a *= interpolate(&r.frame.coords, &t, c);
        }
    }
    acc.iter().map(|v| if v.norm() > 0.0 { v / v.norm() } else { Complex64::new(1.0, 0.0) }).collect()
}

/// Half-angle of the steering cone: the configured clip, else the
/// f-number-1 receive cone.
pub fn steering_cone(config: &AcquisitionConfig) -> f64 {
    config.max_steering_angle.unwrap_or(0.5f64.atan()).abs()
}

/// Elements within the steering cone of a focal point.
pub fn aperture_mask(point: [f64; 2], config: &AcquisitionConfig) -> Vec<bool> {
    let cone = steering_cone(config);
    let reach = point[1] * cone.tan();
    config.element_positions().iter().map(|u| (u - point[0]).abs() <= reach).collect()
}

/// RMS (rad) of arg(estimate · exp(−i truth)) over `mask` once the best
/// piston and linear tilt in `coords` are removed. `None` for fewer than
/// three masked entries or a non-finite truth.
pub fn law_error(estimate: &[Complex64], truth: &[f64], coords: &[f64], mask: &[bool]) -> Option<f64> {
    let idx: Vec<usize> = (0..estimate.len()).filter(|&i| mask[i] && truth[i].is_finite()).collect();
    if idx.len() < 3 {
        return None;
    }
    let diff: Vec<Complex64> = idx
        .iter()
        .map(|&i| {
            let e = estimate[i];
            let u = if e.norm() > 0.0 { e / e.norm() } else { Complex64::new(1.0, 0.0) };
            u * Complex64::from_polar(1.0, -truth[i])
        })
        .collect();
    let c: Vec<f64> = idx.iter().map(|&i| coords[i]).collect();
    let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let spacing = c.windows(2).map(|w| (w[1] - w[0]).abs()).filter(|d| *d > 0.0).fold(span, f64::min);
    let coherence = |a: f64| diff.iter().zip(&c).map(|(d, x)| d * Complex64::from_polar(1.0, -a * x)).sum::<Complex64>().norm();
    let limit = PI / spacing;
    let step = PI / (8.0 * span);
    let n = (limit / step).ceil() as i64;
    let mut best = (0.0, coherence(0.0));
    for i in -n..=n {
        let a = i as f64 * step;
        let v = coherence(a);
        if v > best.1 {
            best = (a, v);
        }
    }
    // golden-section refinement around the grid maximum
    let (mut a, mut b) = (best.0 - step, best.0 + step);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..60 {
        let (x1, x2) = (b - g * (b - a), a + g * (b - a));
        if coherence(x1) > coherence(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    let slope = 0.5 * (a + b);
    let piston = diff.iter().zip(&c).map(|(d, x)| d * Complex64::from_polar(1.0, -slope * x)).sum::<Complex64>().arg();
    let sq: f64 = diff
        .iter()
        .zip(&c)
        .map(|(d, x)| (d * Complex64::from_polar(1.0, -slope * x - piston)).arg().powi(2))
        .sum();
    Some((sq / idx.len() as f64).sqrt())
}

/// Median over `centers` of the accumulated-law error on `side` against the
/// transducer-plane ground truth.
pub fn oracle_law_error(
    atlas: &AberrationAtlas,
    oracle: &AberratorSpec,
    side: Side,
    centers: &[[f64; 2]],
    config: &AcquisitionConfig,
) -> Result<Option<f64>> {
    let elements = config.element_positions();
    let mut errors = Vec::with_capacity(centers.len());
    for &c in centers {
        let truth = ground_truth_law(oracle, config, Basis::Transducer, c[0], c[1])?;
        let est = accumulated_law(atlas, side, c, config);
        if let Some(e) = law_error(&est, &truth.phase, &elements, &aperture_mask(c, config)) {
            errors.push(e);
        }
    }
    Ok(median(errors))
}

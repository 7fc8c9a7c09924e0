//! Synthetic single-scattering channel data with known aberrators.
//!
//! Each scatterer contributes `Re[a · p(t − τ_in − τ_out)]` to every
//! (receive element, transmit angle) channel, where `p` is a tapered burst
//! and the times of flight are computed in the true medium. Transmission is
//! modelled along the ray leaving the array at `u* = x − z tan θ`, so a
//! transducer-plane screen delays the plane wave by its value at `u*` and the
//! echo by its value at the receiving element.

use ndarray::{Array3, Axis as NdAxis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::config::AcquisitionConfig;
use crate::error::{Result, UmiError};
use crate::field::{Basis, RawCube};

/// Tapered burst: a cosine at f_c under a Hann envelope spanning
/// `half_periods + taper_half_periods` half periods, centred on t = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseSpec {
    pub half_periods: usize,
    #[serde(default = "default_taper")]
    pub taper_half_periods: f64,
}

fn default_taper() -> f64 {
    1.0
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self { half_periods: 3, taper_half_periods: 1.0 }
    }
}

impl PulseSpec {
    pub fn from_config(config: &AcquisitionConfig) -> Self {
        Self { half_periods: config.pulse_cycles, ..Self::default() }
    }

    /// Envelope length (s).
    pub fn support(&self, fc: f64) -> f64 {
        (self.half_periods as f64 + self.taper_half_periods) / (2.0 * fc)
    }

    /// Complex burst `env(t)·exp(iω_c t)`; its real part is the emitted pulse.
    pub fn complex_at(&self, t: f64, fc: f64) -> Complex64 {
        let l = self.support(fc);
        if t.abs() > l / 2.0 {
            return Complex64::new(0.0, 0.0);
        }
        let env = (PI * t / l).cos().powi(2);
        Complex64::from_polar(env, 2.0 * PI * fc * t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.half_periods == 0 || !(self.taper_half_periods >= 0.0) {
            return Err(UmiError::InvalidInput("pulse needs at least one half period".into()));
        }
        Ok(())
    }
}

/// A scatterer with complex reflectivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: Complex64,
}

/// Rectangle with its own speckle variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleRegion {
    pub x_range: [f64; 2],
    pub z_range: [f64; 2],
    pub variance: f64,
}

/// Circular-Gaussian reflectivity sampled on a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeckleSpec {
    pub x_range: [f64; 2],
    pub z_range: [f64; 2],
    pub dx: f64,
    pub dz: f64,
    /// Background variance of γ.
    pub variance: f64,
    /// Later regions override earlier ones and the background.
    #[serde(default)]
    pub regions: Vec<SpeckleRegion>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointScatterer {
    pub x: f64,
    pub z: f64,
    pub amplitude: Complex64,
}

/// Horizontal specular reflector sampled every `spacing` mm across `x_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecularInterface {
    pub depth: f64,
    pub amplitude: f64,
    pub x_range: [f64; 2],
    pub spacing: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    #[serde(default)]
    pub speckle: Option<SpeckleSpec>,
    #[serde(default)]
    pub point_scatterers: Vec<PointScatterer>,
    #[serde(default)]
    pub specular_interfaces: Vec<SpecularInterface>,
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    /// Uniform speckle over `x_range × z_range` at sub-wavelength sampling.
    pub fn speckle(x_range: [f64; 2], z_range: [f64; 2], seed: u64) -> Self {
        Self {
            speckle: Some(SpeckleSpec { x_range, z_range, dx: 0.16, dz: 0.2, variance: 1.0, regions: Vec::new() }),
            seed,
            ..Self::default()
        }
    }

    /// Materialises the reflectivity. Same seed, same scatterers, bit for bit.
    pub fn scatterers(&self) -> Result<Vec<Scatterer>> {
        let mut out = Vec::new();
        if let Some(s) = &self.speckle {
            if !(s.dx > 0.0 && s.dz > 0.0) || s.variance < 0.0 || s.regions.iter().any(|r| r.variance < 0.0) {
                return Err(UmiError::InvalidInput("speckle needs positive sampling and non-negative variance".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let nx = ((s.x_range[1] - s.x_range[0]) / s.dx).floor() as usize + 1;
            let nz = ((s.z_range[1] - s.z_range[0]) / s.dz).floor() as usize + 1;
            for iz in 0..nz {
                let z = s.z_range[0] + iz as f64 * s.dz;
                for ix in 0..nx {
                    let x = s.x_range[0] + ix as f64 * s.dx;
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    let mut var = s.variance;
                    for r in &s.regions {
                        if x >= r.x_range[0] && x <= r.x_range[1] && z >= r.z_range[0] && z <= r.z_range[1] {
                            var = r.variance;
                        }
                    }
                    if var > 0.0 {
                        let sd = (var / 2.0).sqrt();
                        out.push(Scatterer { x, z, amplitude: Complex64::new(re * sd, im * sd) });
                    }
                }
            }
        }
        for p in &self.point_scatterers {
            out.push(Scatterer { x: p.x, z: p.z, amplitude: p.amplitude });
        }
        for f in &self.specular_interfaces {
            if !(f.spacing > 0.0) {
                return Err(UmiError::InvalidInput("interface spacing must be positive".into()));
            }
            let n = ((f.x_range[1] - f.x_range[0]) / f.spacing).floor() as usize + 1;
            for i in 0..n {
                out.push(Scatterer {
                    x: f.x_range[0] + i as f64 * f.spacing,
                    z: f.depth,
                    amplitude: Complex64::new(f.amplitude, 0.0),
                });
            }
        }
        for s in &out {
            if !(s.z > 0.0) || !s.x.is_finite() || !s.amplitude.re.is_finite() || !s.amplitude.im.is_finite() {
                return Err(UmiError::InvalidInput(format!("scatterer at ({}, {}) is invalid", s.x, s.z)));
            }
        }
        Ok(out)
    }
}

/// Horizontal layer of the true medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    /// Thickness (mm).
    pub thickness: f64,
    /// True sound speed (m/s).
    pub speed: f64,
}

/// Known aberrator between the array and the medium.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum AberratorSpec {
    None,
    /// Phase screen in the transducer plane, one value per element (rad).
    TransducerScreen {
        phase: Vec<f64>,
        #[serde(default)]
        amplitude: Option<Vec<f64>>,
    },
    /// Phase per transmit angle (rad); echoes see it at their arrival angle.
    PlaneWaveScreen { phase: Vec<f64> },
    /// Stack of layers from the surface down; `bottom_speed` fills the rest.
    LayeredC { layers: Vec<Layer>, bottom_speed: f64 },
}

impl AberratorSpec {
    pub fn validate(&self, config: &AcquisitionConfig) -> Result<()> {
        let bad = |m: String| Err(UmiError::InvalidInput(m));
        match self {
            AberratorSpec::None => Ok(()),
            AberratorSpec::TransducerScreen { phase, amplitude } => {
                if phase.len() != config.num_elements {
                    return bad(format!("screen has {} values for {} elements", phase.len(), config.num_elements));
                }
                if phase.iter().any(|p| !p.is_finite()) {
                    return bad("screen phase must be finite".into());
                }
                if let Some(a) = amplitude {
                    if a.len() != config.num_elements || a.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                        return bad("screen amplitude must lie in (0, 1] per element".into());
                    }
                }
                Ok(())
            }
            AberratorSpec::PlaneWaveScreen { phase } => {
                if phase.len() != config.transmit_angles.len() || phase.iter().any(|p| !p.is_finite()) {
                    return bad("plane-wave screen needs one finite phase per angle".into());
                }
                Ok(())
            }
            AberratorSpec::LayeredC { layers, bottom_speed } => {
                if !(*bottom_speed > 0.0) || layers.iter().any(|l| !(l.speed > 0.0) || !(l.thickness >= 0.0)) {
                    return bad("layer speeds must be positive and thicknesses non-negative".into());
                }
                Ok(())
            }
        }
    }
}

/// Gaussian-correlated random screen with correlation `exp(−d²/2ℓ²)`,
/// zero mean and exactly the requested RMS (rad) over the elements.
pub fn gaussian_screen(config: &AcquisitionConfig, rms: f64, corr_len: f64, seed: u64) -> Vec<f64> {
    let n = config.num_elements;
    let sd = corr_len / std::f64::consts::SQRT_2 / config.pitch;
    let pad = (4.0 * sd).ceil() as usize + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..n + 2 * pad).map(|_| rng.sample(StandardNormal)).collect();
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            if sd <= 0.0 {
                return white[i + pad];
            }
            (0..=2 * pad)
                .map(|j| {
                    let d = j as f64 - pad as f64;
                    white[i + j] * (-0.5 * d * d / (sd * sd)).exp()
                })
                .sum()
        })
        .collect();
    let mean = out.iter().sum::<f64>() / n as f64;
    out.iter_mut().for_each(|v| *v -= mean);
    let r = (out.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if r > 0.0 {
        out.iter_mut().for_each(|v| *v *= rms / r);
    }
    out
}

/// Layer thicknesses crossed between the surface and depth `z`.
fn segments(layers: &[Layer], bottom_speed: f64, z: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(layers.len() + 1);
    let mut top = 0.0;
    for l in layers {
        if top >= z {
            break;
        }
        let h = l.thickness.min(z - top);
        if h > 0.0 {
            out.push((h, l.speed * 1e3));
        }
        top += l.thickness;
    }
    if z > top {
        out.push((z - top, bottom_speed * 1e3));
    }
    out
}

/// Plane wave with horizontal slowness `p` (s/mm) reaching (x, z): returns
/// the arrival time and the lateral offset of the ray back to the surface.
fn layered_plane_wave(segs: &[(f64, f64)], p: f64, x: f64) -> Option<(f64, f64)> {
    let mut t = p * x;
    let mut offset = 0.0;
    for &(h, c) in segs {
        let q = 1.0 / (c * c) - p * p;
        if q <= 0.0 {
            return None;
        }
        t += h * q.sqrt();
        offset += h * p * c / (1.0 - p * p * c * c).sqrt();
    }
    Some((t, offset))
}

/// Two-point travel time through horizontal layers for a lateral offset `d`.
fn layered_two_point(segs: &[(f64, f64)], d: f64) -> f64 {
    let d = d.abs();
    let cmax = segs.iter().map(|s| s.1).fold(0.0, f64::max);
    if d == 0.0 {
        return segs.iter().map(|&(h, c)| h / c).sum();
    }
    // lateral reach X(q), q = p·cmax ∈ [0, 1), is increasing; bracketed Newton
    let reach = |q: f64| -> (f64, f64) {
        let p = q / cmax;
        let mut x = 0.0;
        let mut dx = 0.0;
        for &(h, c) in segs {
            let s = p * c;
            let r = (1.0 - s * s).sqrt();
            x += h * s / r;
            dx += h * (c / cmax) / (r * r * r);
        }
        (x, dx)
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    let mut q = 0.5;
    for _ in 0..100 {
        let (x, dx) = reach(q);
        let f = x - d;
        if f.abs() < 1e-12 * (1.0 + d) {
            break;
        }
        if f > 0.0 {
            hi = q;
        } else {
            lo = q;
        }
        let step = q - f / dx;
        q = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-16 {
            break;
        }
    }
    let p = q / cmax;
    let mut t = p * d;
    for &(h, c) in segs {
        t += h * (1.0 / (c * c) - p * p).max(0.0).sqrt();
    }
    t
}

/// Linear interpolation of a per-element law at a continuous position.
/// `None` outside the physical aperture.
fn element_value(values: &[f64], positions: &[f64], pitch: f64, u: f64) -> Option<f64> {
    let n = positions.len();
    if u < positions[0] - pitch / 2.0 || u > positions[n - 1] + pitch / 2.0 {
        return None;
    }
    let f = ((u - positions[0]) / pitch).clamp(0.0, (n - 1) as f64);
    let i = (f.floor() as usize).min(n.saturating_sub(2));
    if n == 1 {
        return Some(values[0]);
    }
    let w = f - i as f64;
    Some(values[i] * (1.0 - w) + values[i + 1] * w)
}

/// Linear interpolation over transmit angles, clamped at the ends.
fn angle_value(values: &[f64], angles: &[f64], a: f64) -> f64 {
    let n = angles.len();
    if n == 1 || a <= angles[0] {
        return values[0];
    }
    if a >= angles[n - 1] {
        return values[n - 1];
    }
    let step = angles[1] - angles[0];
    let f = (a - angles[0]) / step;
    let i = (f.floor() as usize).min(n - 2);
    let w = f - i as f64;
    values[i] * (1.0 - w) + values[i + 1] * w
}

/// Per-leg delays and amplitudes for one scatterer.
struct Legs {
    /// (delay s, amplitude) per transmit angle, `None` if not illuminated.
    tx: Vec<Option<(f64, f64)>>,
    /// (delay s, amplitude) per receive element.
    rx: Vec<(f64, f64)>,
}

fn legs(s: &Scatterer, aberrator: &AberratorSpec, config: &AcquisitionConfig, positions: &[f64]) -> Legs {
    let c0 = config.speed();
    let wc = config.angular_frequency();
    let pitch = config.pitch;
    let unit = vec![1.0; positions.len()];
    let (screen, amp): (Option<&[f64]>, &[f64]) = match aberrator {
        AberratorSpec::TransducerScreen { phase, amplitude } => {
            (Some(phase.as_slice()), amplitude.as_deref().unwrap_or(&unit))
        }
        _ => (None, &unit),
    };
    let segs = match aberrator {
        AberratorSpec::LayeredC { layers, bottom_speed } => Some(segments(layers, *bottom_speed, s.z)),
        _ => None,
    };
    let tx = config
        .transmit_angles
        .iter()
        .enumerate()
        .map(|(it, &th)| {
            let (t, ustar) = match &segs {
                Some(sg) => {
                    let p = th.sin() / c0;
                    let (t, off) = layered_plane_wave(sg, p, s.x)?;
                    (t, s.x - off)
                }
                None => ((s.x * th.sin() + s.z * th.cos()) / c0, s.x - s.z * th.tan()),
            };
            let a = element_value(amp, positions, pitch, ustar)?;
            let mut delay = t;
            if let Some(ph) = screen {
                delay += element_value(ph, positions, pitch, ustar)? / wc;
            }
            if let AberratorSpec::PlaneWaveScreen { phase } = aberrator {
                delay += phase[it] / wc;
            }
            Some((delay, a))
        })
        .collect();
    let rx = positions
        .iter()
        .enumerate()
        .map(|(iu, &u)| {
            let d = s.x - u;
            let mut delay = match &segs {
                Some(sg) => layered_two_point(sg, d),
                None => (d * d + s.z * s.z).sqrt() / c0,
            };
            if let Some(ph) = screen {
                delay += ph[iu] / wc;
            }
            if let AberratorSpec::PlaneWaveScreen { phase } = aberrator {
                let r = (d * d + s.z * s.z).sqrt();
                delay += angle_value(phase, &config.transmit_angles, (d / r).asin()) / wc;
            }
            (delay, amp[iu])
        })
        .collect();
    Legs { tx, rx }
}

/// Born single-scattering synthesis of real RF data `(u_out, θ_in, t)`.
///
/// Samples start at t = 0, the instant the unsteered wavefront leaves the
/// array centre. Echo placements reaching past the record are counted in
/// [`RawCube::truncated`].
pub fn synthesize_raw(
    phantom: &PhantomSpec,
    aberrator: &AberratorSpec,
    pulse: &PulseSpec,
    config: &AcquisitionConfig,
) -> Result<RawCube> {
    config.validate()?;
    pulse.validate()?;
    aberrator.validate(config)?;
    let scatterers = phantom.scatterers()?;
    if scatterers.is_empty() {
        return Err(UmiError::EmptyPhantom);
    }
    let positions = config.element_positions();
    let nu = config.num_elements;
    let nth = config.transmit_angles.len();
    let nt = config.num_samples();
    let fs = config.sampling_frequency;
    let fc = config.center_frequency;
    let half = pulse.support(fc) / 2.0;

    let all_legs: Vec<Legs> = scatterers.par_iter().map(|s| legs(s, aberrator, config, &positions)).collect();

    let mut data = Array3::<f64>::zeros((nu, nth, nt));
    let truncated: usize = data
        .axis_iter_mut(NdAxis(0))
        .into_par_iter()
        .enumerate()
        .map(|(iu, mut chan)| {
            let mut lost = 0usize;
            let step_c = Complex64::from_polar(1.0, 2.0 * PI * fc / fs);
            let step_e = Complex64::from_polar(1.0, PI / (half * fs));
            for (s, lg) in scatterers.iter().zip(&all_legs) {
                let (rx_delay, rx_amp) = lg.rx[iu];
                for (it, tx) in lg.tx.iter().enumerate() {
                    let Some((tx_delay, tx_amp)) = *tx else { continue };
                    let t_arr = tx_delay + rx_delay;
                    let n_lo = ((t_arr - half) * fs).ceil();
                    let n_hi = ((t_arr + half) * fs).floor();
                    if n_lo < 0.0 || n_hi >= nt as f64 {
                        lost += 1;
                    }
                    let lo = n_lo.max(0.0) as usize;
                    if n_hi < 0.0 || lo >= nt {
                        continue;
                    }
                    let hi = (n_hi as usize).min(nt - 1);
                    let a = s.amplitude * (tx_amp * rx_amp);
                    let t_first = lo as f64 / fs - t_arr;
                    // carrier and envelope phasors advanced by recurrence
                    let mut car = a * Complex64::from_polar(1.0, 2.0 * PI * fc * t_first);
                    let mut env = Complex64::from_polar(1.0, PI * t_first / half);
                    let mut trace = chan.index_axis_mut(NdAxis(0), it);
                    for n in lo..=hi {
                        trace[n] += car.re * 0.5 * (1.0 + env.re);
                        car *= step_c;
                        env *= step_e;
                    }
                }
            }
            lost
        })
        .sum();
    Ok(RawCube { data, sampling_frequency: fs, t0: 0.0, truncated })
}

/// Statistical surrogate for the multiple-scattering background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultipleScatteringNoiseSpec {
    /// Noise power relative to the signal RMS (dB); `-inf` disables it.
    pub power_db: f64,
    /// Lateral correlation length across elements (mm); defaults to one wavelength.
    #[serde(default)]
    pub correlation_length: Option<f64>,
    pub seed: u64,
}

/// Adds band-passed, laterally correlated Gaussian noise at `power_db`
/// relative to the RMS of `raw`.
pub fn add_ms_noise(
    raw: &RawCube,
    spec: &MultipleScatteringNoiseSpec,
    pulse: &PulseSpec,
    config: &AcquisitionConfig,
) -> Result<RawCube> {
    if spec.power_db.is_nan() || spec.power_db == f64::INFINITY {
        return Err(UmiError::InvalidInput("noise power must be finite or -inf".into()));
    }
    if spec.power_db == f64::NEG_INFINITY {
        return Ok(raw.clone());
    }
    let corr = spec.correlation_length.unwrap_or_else(|| config.wavelength());
    if !(corr >= 0.0) {
        return Err(UmiError::InvalidInput("correlation length must be non-negative".into()));
    }
    let (nu, nth, nt) = raw.data.dim();
    let fs = raw.sampling_frequency;
    let fc = config.center_frequency;

    // amplitude response of the burst, unit peak
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nt);
    let inv = planner.plan_fft_inverse(nt);
    let mut resp: Vec<Complex64> = (0..nt)
        .map(|n| {
            let t = if n <= nt / 2 { n as f64 } else { n as f64 - nt as f64 } / fs;
            Complex64::new(pulse.complex_at(t, fc).re, 0.0)
        })
        .collect();
    fwd.process(&mut resp);
    let peak = resp.iter().map(|v| v.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let gain: Vec<f64> = resp.iter().map(|v| v.norm() / peak).collect();

    let mut noise = Array3::<f64>::zeros((nu, nth, nt));
    noise
        .axis_iter_mut(NdAxis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(iu, mut chan)| {
            let mut buf = vec![Complex64::new(0.0, 0.0); nt];
            for it in 0..nth {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream((iu * nth + it) as u64);
                for b in buf.iter_mut() {
                    *b = Complex64::new(rng.sample(StandardNormal), 0.0);
                }
                fwd.process(&mut buf);
                buf.iter_mut().zip(&gain).for_each(|(b, g)| *b *= *g);
                inv.process(&mut buf);
                chan.index_axis_mut(NdAxis(0), it).iter_mut().zip(&buf).for_each(|(d, b)| *d = b.re);
            }
        });

    let sd = corr / std::f64::consts::SQRT_2 / config.pitch;
    if sd > 0.0 {
        let reach = (4.0 * sd).ceil() as isize;
        let kernel: Vec<f64> = (-reach..=reach).map(|d| (-0.5 * (d * d) as f64 / (sd * sd)).exp()).collect();
        let src = noise.clone();
        noise.indexed_iter_mut().for_each(|((iu, it, n), v)| {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let u = iu as isize + j as isize - reach;
                if u >= 0 && (u as usize) < nu {
                    acc += k * src[[u as usize, it, n]];
                }
            }
            *v = acc;
        });
    }

    let rms = |a: &Array3<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len().max(1) as f64).sqrt();
    let signal = rms(&raw.data);
    let current = rms(&noise);
    let target = signal * 10f64.powf(spec.power_db / 20.0);
    let scale = if current > 0.0 { target / current } else { 0.0 };
    let mut out = raw.clone();
    out.data.zip_mut_with(&noise, |o, n| *o += scale * n);
    Ok(out)
}

/// Expected one-way aberration phase seen from a focal point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLaw {
    pub basis: Basis,
    /// Element positions (mm) or transmit angles (rad).
    pub coords: Vec<f64>,
    /// Phase (rad), `NaN` where the point sees no contribution.
    pub phase: Vec<f64>,
}

/// Ground-truth law at (x_p, z_p), piston removed.
///
/// Transducer basis is sampled at the elements, plane-wave basis at the
/// transmit angles.
pub fn ground_truth_law(
    aberrator: &AberratorSpec,
    config: &AcquisitionConfig,
    basis: Basis,
    x_p: f64,
    z_p: f64,
) -> Result<PhaseLaw> {
    if basis == Basis::Focused {
        return Err(UmiError::BasisMismatch { expected: Basis::Transducer, found: basis });
    }
    if !(z_p > 0.0) {
        return Err(UmiError::Geometry("focal depth must be positive".into()));
    }
    aberrator.validate(config)?;
    let positions = config.element_positions();
    let wc = config.angular_frequency();
    let c0 = config.speed();
    let coords = match basis {
        Basis::Transducer => positions.clone(),
        _ => config.transmit_angles.clone(),
    };
    let mut phase: Vec<f64> = match (aberrator, basis) {
        (AberratorSpec::None, _) => vec![0.0; coords.len()],
        (AberratorSpec::TransducerScreen { phase, .. }, Basis::Transducer) => phase.clone(),
        (AberratorSpec::TransducerScreen { phase, .. }, _) => coords
            .iter()
            .map(|&th| element_value(phase, &positions, config.pitch, x_p - z_p * th.tan()).unwrap_or(f64::NAN))
            .collect(),
        (AberratorSpec::PlaneWaveScreen { phase }, Basis::Transducer) => coords
            .iter()
            .map(|&u| {
                let d = x_p - u;
                angle_value(phase, &config.transmit_angles, (d / (d * d + z_p * z_p).sqrt()).asin())
            })
            .collect(),
        (AberratorSpec::PlaneWaveScreen { phase }, _) => phase.clone(),
        (AberratorSpec::LayeredC { layers, bottom_speed }, Basis::Transducer) => {
            let segs = segments(layers, *bottom_speed, z_p);
            coords
                .iter()
                .map(|&u| {
                    let d = x_p - u;
                    wc * (layered_two_point(&segs, d) - (d * d + z_p * z_p).sqrt() / c0)
                })
                .collect()
        }
        (AberratorSpec::LayeredC { layers, bottom_speed }, _) => {
            let segs = segments(layers, *bottom_speed, z_p);
            coords
                .iter()
                .map(|&th| {
                    let p = th.sin() / c0;
                    match layered_plane_wave(&segs, p, 0.0) {
                        Some((t, _)) => wc * (t - z_p * th.cos() / c0),
                        None => f64::NAN,
                    }
                })
                .collect()
        }
    };
    let finite: Vec<f64> = phase.iter().copied().filter(|v| v.is_finite()).collect();
    if !finite.is_empty() {
        let mean = finite.iter().sum::<f64>() / finite.len() as f64;
        phase.iter_mut().for_each(|v| *v -= mean);
    }
    Ok(PhaseLaw { basis, coords, phase })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro_config() -> AcquisitionConfig {
        AcquisitionConfig {
            num_elements: 3,
            pitch: 0.5,
            center_frequency: 4e6,
            sampling_frequency: 40e6,
            sound_speed: 1540.0,
            transmit_angles: vec![-0.1, 0.1],
            record_duration: 30e-6,
            pulse_cycles: 3,
            min_frequency: 2e6,
            max_steering_angle: None,
        }
    }

    fn points(pts: &[(f64, f64, Complex64)]) -> PhantomSpec {
        PhantomSpec {
            point_scatterers: pts.iter().map(|&(x, z, a)| PointScatterer { x, z, amplitude: a }).collect(),
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn micro_scene_matches_path_sum_oracle() {
        let c = micro_config();
        let screen = vec![0.3, -0.2, 0.5];
        let ab = AberratorSpec::TransducerScreen { phase: screen.clone(), amplitude: None };
        let pts = [(0.2, 8.0, Complex64::new(1.0, 0.5)), (-0.3, 12.0, Complex64::new(-0.7, 0.2))];
        let raw = synthesize_raw(&points(&pts), &ab, &PulseSpec::default(), &c).unwrap();
        let pulse = PulseSpec::default();
        let u = c.element_positions();
        let c0 = c.speed();
        let wc = c.angular_frequency();
        let interp = |x: f64| -> f64 {
            // linear in element index
            let f = ((x - u[0]) / c.pitch).clamp(0.0, 2.0);
            let i = (f.floor() as usize).min(1);
            screen[i] * (1.0 - (f - i as f64)) + screen[i + 1] * (f - i as f64)
        };
        let mut max_err: f64 = 0.0;
        for iu in 0..3 {
            for (it, &th) in c.transmit_angles.iter().enumerate() {
                for n in 0..c.num_samples() {
                    let t = n as f64 / c.sampling_frequency;
                    let mut v = 0.0;
                    for &(x, z, a) in &pts {
                        let ustar = x - z * th.tan();
                        if ustar < u[0] - 0.25 || ustar > u[2] + 0.25 {
                            continue;
                        }
                        let tin = (x * th.sin() + z * th.cos()) / c0 + interp(ustar) / wc;
                        let tout = ((x - u[iu]).powi(2) + z * z).sqrt() / c0 + screen[iu] / wc;
                        v += (a * pulse.complex_at(t - tin - tout, c.center_frequency)).re;
                    }
                    max_err = max_err.max((v - raw.data[[iu, it, n]]).abs());
                }
            }
        }
        assert!(max_err < 1e-9, "max deviation {max_err}");
    }

    #[test]
    fn on_axis_echo_peaks_at_round_trip() {
        let mut c = micro_config();
        c.num_elements = 5;
        c.transmit_angles = vec![0.0];
        let z = 10.0;
        let raw = synthesize_raw(&points(&[(0.0, z, Complex64::new(1.0, 0.0))]), &AberratorSpec::None, &PulseSpec::default(), &c)
            .unwrap();
        let trace = raw.data.slice(ndarray::s![2, 0, ..]);
        let (imax, _) = trace.iter().enumerate().fold((0, f64::MIN), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        let expect = 2.0 * z / c.speed() * c.sampling_frequency;
        assert!((imax as f64 - expect).abs() <= 1.0, "{imax} vs {expect}");
    }

    #[test]
    fn piston_screen_is_a_global_delay() {
        let c = micro_config();
        let ph = 2.0 * PI * c.center_frequency * 2.0 / c.sampling_frequency; // two samples per leg
        let ab = AberratorSpec::TransducerScreen { phase: vec![ph; 3], amplitude: None };
        let ph0 = points(&[(0.1, 9.0, Complex64::new(1.0, 0.0))]);
        let a = synthesize_raw(&ph0, &AberratorSpec::None, &PulseSpec::default(), &c).unwrap();
        let b = synthesize_raw(&ph0, &ab, &PulseSpec::default(), &c).unwrap();
        for iu in 0..3 {
            for it in 0..2 {
                for n in 0..c.num_samples() - 4 {
                    assert!((a.data[[iu, it, n]] - b.data[[iu, it, n + 4]]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_phantom_is_an_error() {
        let r = synthesize_raw(&PhantomSpec::default(), &AberratorSpec::None, &PulseSpec::default(), &micro_config());
        assert_eq!(r.unwrap_err(), UmiError::EmptyPhantom);
    }

    #[test]
    fn late_echo_is_counted() {
        let mut c = micro_config();
        c.record_duration = 5e-6;
        c.transmit_angles = vec![0.0];
        let r = synthesize_raw(&points(&[(0.0, 10.0, Complex64::new(1.0, 0.0))]), &AberratorSpec::None, &PulseSpec::default(), &c)
            .unwrap();
        assert!(r.truncated > 0);
    }

    #[test]
    fn pulse_spectrum_peaks_near_center_frequency() {
        let p = PulseSpec::default();
        let fc = 4e6;
        let fs = 400e6;
        let n = 1 << 14;
        let mut buf: Vec<Complex64> =
            (0..n).map(|i| Complex64::new(p.complex_at((i as f64 - n as f64 / 2.0) / fs, fc).re, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let (k, _) = buf[..n / 2].iter().enumerate().fold((0, 0.0), |b, (i, v)| if v.norm() > b.1 { (i, v.norm()) } else { b });
        let f = k as f64 * fs / n as f64;
        assert!((f / fc - 1.0).abs() < 0.1, "peak at {f}");
        assert!((p.complex_at(0.0, fc).re - 1.0).abs() < 1e-15);
    }

    #[test]
    fn speckle_is_reproducible() {
        let a = PhantomSpec::speckle([-2.0, 2.0], [5.0, 7.0], 11).scatterers().unwrap();
        let b = PhantomSpec::speckle([-2.0, 2.0], [5.0, 7.0], 11).scatterers().unwrap();
        let c = PhantomSpec::speckle([-2.0, 2.0], [5.0, 7.0], 12).scatterers().unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn screen_statistics() {
        let c = AcquisitionConfig::desk();
        let s = gaussian_screen(&c, 1.0, 3.0, 5);
        let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        assert!(s.iter().sum::<f64>().abs() < 1e-9);
        // neighbouring elements are strongly correlated at a 10-element length
        let lag1: f64 = s.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (s.len() - 1) as f64;
        assert!(lag1 > 0.8);
    }

    fn noise_spec(db: f64) -> MultipleScatteringNoiseSpec {
        MultipleScatteringNoiseSpec { power_db: db, correlation_length: None, seed: 9 }
    }

    fn small_raw() -> (RawCube, AcquisitionConfig) {
        let mut c = micro_config();
        c.num_elements = 8;
        let ph = PhantomSpec::speckle([-1.0, 1.0], [8.0, 10.0], 2);
        (synthesize_raw(&ph, &AberratorSpec::None, &PulseSpec::default(), &c).unwrap(), c)
    }

    #[test]
    fn noise_off_is_identity_and_zero_db_matches_rms() {
        let (raw, c) = small_raw();
        let p = PulseSpec::default();
        assert_eq!(add_ms_noise(&raw, &noise_spec(f64::NEG_INFINITY), &p, &c).unwrap(), raw);
        let noisy = add_ms_noise(&raw, &noise_spec(0.0), &p, &c).unwrap();
        let n = &noisy.data - &raw.data;
        let rms = |a: &Array3<f64>| (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms(&n) / rms(&raw.data) - 1.0).abs() < 0.05);
        assert_eq!(add_ms_noise(&raw, &noise_spec(0.0), &p, &c).unwrap(), noisy);
    }

    #[test]
    fn ground_truth_screen_and_uniform_layers() {
        let c = AcquisitionConfig::desk();
        let s = gaussian_screen(&c, 1.0, 3.0, 1);
        let ab = AberratorSpec::TransducerScreen { phase: s.clone(), amplitude: None };
        let g = ground_truth_law(&ab, &c, Basis::Transducer, 3.0, 20.0).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        for (a, b) in g.phase.iter().zip(&s) {
            assert!((a - (b - mean)).abs() < 1e-12);
        }
        let flat = AberratorSpec::LayeredC { layers: vec![Layer { thickness: 10.0, speed: 1540.0 }], bottom_speed: 1540.0 };
        for basis in [Basis::Transducer, Basis::PlaneWave] {
            let g = ground_truth_law(&flat, &c, basis, 0.0, 25.0).unwrap();
            assert!(g.phase.iter().all(|v| v.abs() < 1e-9));
        }
        let none = ground_truth_law(&AberratorSpec::None, &c, Basis::PlaneWave, 0.0, 25.0).unwrap();
        assert!(none.phase.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_layer_law_is_parabolic_in_slowness() {
        // quadratic coefficient in sin θ against a finely integrated ray delay
        let c = AcquisitionConfig::desk();
        let c1 = 1540.0 / 1.03;
        let ab = AberratorSpec::LayeredC { layers: vec![Layer { thickness: 15.0, speed: c1 }], bottom_speed: 1540.0 };
        let z = 30.0;
        let g = ground_truth_law(&ab, &c, Basis::PlaneWave, 0.0, z).unwrap();
        let wc = c.angular_frequency();
        let c0 = c.speed();
        let oracle = |th: f64| -> f64 {
            // midpoint-rule integral of the vertical slowness
            let p = th.sin() / c0;
            let n = 20000;
            let mut t = 0.0;
            for i in 0..n {
                let zz = (i as f64 + 0.5) * z / n as f64;
                let cc = if zz < 15.0 { c1 * 1e3 } else { c0 };
                t += (z / n as f64) * (1.0 / (cc * cc) - p * p).sqrt();
            }
            wc * (t - z * th.cos() / c0)
        };
        let fit = |ys: &[f64]| -> f64 {
            let xs: Vec<f64> = c.transmit_angles.iter().map(|t| t.sin()).collect();
            quadratic_coefficient(&xs, ys)
        };
        let o: Vec<f64> = c.transmit_angles.iter().map(|&t| oracle(t)).collect();
        let (a, b) = (fit(&g.phase), fit(&o));
        assert!((a / b - 1.0).abs() < 0.05, "{a} vs {b}");
    }

    fn quadratic_coefficient(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let s = |p: i32| x.iter().map(|v| v.powi(p)).sum::<f64>();
        let sy = |p: i32| x.iter().zip(y).map(|(v, w)| v.powi(p) * w).sum::<f64>();
        let m = nalgebra::Matrix3::new(n, s(1), s(2), s(1), s(2), s(3), s(2), s(3), s(4));
        let r = nalgebra::Vector3::new(sy(0), sy(1), sy(2));
        (m.lu().solve(&r).unwrap())[2]
    }

    #[test]
    fn layered_two_point_matches_straight_ray_in_uniform_medium() {
        let segs = segments(&[Layer { thickness: 5.0, speed: 1500.0 }], 1500.0, 20.0);
        let t = layered_two_point(&segs, 7.0);
        assert!((t - (49.0f64 + 400.0).sqrt() / 1.5e6).abs() < 1e-15);
    }

    #[test]
    fn layered_two_point_obeys_fermat() {
        // brute-force minimisation over the crossing point
        let segs = segments(&[Layer { thickness: 8.0, speed: 1450.0 }], 1560.0, 25.0);
        let d = 6.0;
        let t = layered_two_point(&segs, d);
        let mut best = f64::MAX;
        for i in 0..=200000 {
            let xc = d * i as f64 / 200000.0;
            let tt = (xc * xc + 64.0).sqrt() / 1.45e6 + ((d - xc).powi(2) + 17.0f64.powi(2)).sqrt() / 1.56e6;
            best = best.min(tt);
        }
        assert!((t - best).abs() < 1e-13, "{t} vs {best}");
    }
}

//! Delay-and-sum construction of the focused reflection matrix.

use ndarray::{Array2, Array3, Axis as NdAxis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{FocusedReflectionMatrix, MatrixVariant};
use crate::config::{AcquisitionConfig, ImageGrid};
use crate::error::{Result, UmiError};
use crate::field::AnalyticCube;
use crate::optics::aliasing_bound;

/// Receive aperture rule: elements with |u − x_out| ≤ z / (2 f#) contribute
/// with unit weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Apodization {
    pub fnumber: f64,
}

impl Default for Apodization {
    fn default() -> Self {
        Self { fnumber: 1.0 }
    }
}

impl Apodization {
    pub fn validate(&self) -> Result<()> {
        if !(self.fnumber > 0.0) || !self.fnumber.is_finite() {
            return Err(UmiError::InvalidInput(format!("f-number {} must be positive", self.fnumber)));
        }
        Ok(())
    }

    /// Lateral half-width of the receive aperture at depth `z` (mm).
    pub fn half_width(&self, z: f64) -> f64 {
        z / (2.0 * self.fnumber)
    }
}

/// Builds R̄(x_out, x_in, z) from analytic channel data.
///
/// For every depth, transmit angle and output pixel the receive sum over
/// elements is formed once on the transmit-time axis, then read at each input
/// pixel's transmit delay. Interpolation is linear on the demodulated signal
/// and the carrier is restored exactly. Entries with |x_out − x_in| beyond the
/// aliasing bound are zero; contributions whose required time lies outside
/// the record are dropped and counted.
///
/// The returned matrix follows the exp(+i k r) propagation convention, so an
/// extra path delay τ appears as a phase of +ω_c τ.
pub fn das_focus(
    analytic: &AnalyticCube,
    grid: &ImageGrid,
    config: &AcquisitionConfig,
    apodization: &Apodization,
) -> Result<FocusedReflectionMatrix> {
    config.validate()?;
    grid.validate()?;
    apodization.validate()?;
    let (nu, nth, nt) = analytic.dims();
    if nu != config.num_elements || nth != config.transmit_angles.len() {
        return Err(UmiError::Shape(format!(
            "channel data is {nu}x{nth} but the acquisition has {} elements and {} angles",
            config.num_elements,
            config.transmit_angles.len()
        )));
    }
    if nt < 2 {
        return Err(UmiError::InvalidInput("record needs at least two samples".into()));
    }
    let fs = analytic.sampling_frequency;
    let t0 = analytic.t0;
    let omega = config.angular_frequency();
    let speed = config.speed();
    let mask_width = aliasing_bound(config).ok();

    // demodulated samples b = s · exp(−i ω_c t_n)
    let mut base = analytic.data.clone();
    base.axis_iter_mut(NdAxis(2)).enumerate().for_each(|(n, mut plane)| {
        let rot = Complex64::from_polar(1.0, -omega * (t0 + n as f64 / fs));
        plane.mapv_inplace(|v| v * rot);
    });
    let base = base.as_standard_layout().to_owned();

    let elements = config.element_positions();
    let nx = grid.nx();
    let dx = grid.dx();
    let x = &grid.x;
    let ctx = Ctx { base: &base, fs, t0, nt, omega, speed, elements: &elements, x, dx, mask_width };

    let slices: Vec<(Array2<Complex64>, usize)> =
        grid.z.par_iter().map(|&z| ctx.depth(z, config, apodization)).collect();

    let mut data = Array3::zeros((grid.nz(), nx, nx));
    let mut dropped = 0usize;
    for (iz, (m, d)) in slices.into_iter().enumerate() {
        data.index_axis_mut(NdAxis(0), iz).assign(&m);
        dropped += d;
    }
    Ok(FocusedReflectionMatrix { grid: grid.clone(), variant: MatrixVariant::Raw, data, mask_width, dropped })
}

struct Ctx<'a> {
    base: &'a Array3<Complex64>,
    fs: f64,
    t0: f64,
    nt: usize,
    omega: f64,
    speed: f64,
    elements: &'a [f64],
    x: &'a [f64],
    dx: f64,
    mask_width: Option<f64>,
}

impl Ctx<'_> {
    fn depth(&self, z: f64, config: &AcquisitionConfig, apod: &Apodization) -> (Array2<Complex64>, usize) {
        let nx = self.x.len();
        let fs = self.fs;
        let last = (self.nt - 1) as f64;
        let mut out = Array2::<Complex64>::zeros((nx, nx));
        let mut dropped = 0usize;
        let half = apod.half_width(z);
        let mut acc: Vec<Complex64> = Vec::new();

        for (it, &theta) in config.transmit_angles.iter().enumerate() {
            let (s, c) = theta.sin_cos();
            // transmit delay of pixel j, in samples from the record start
            let p_of = |j: usize| ((self.x[j] * s + z * c) / self.speed - self.t0) * fs;
            let dp = self.dx * s / self.speed * fs;
            for io in 0..nx {
                let xo = self.x[io];
                let (ja, jb) = self.input_range(io);
                if ja > jb {
                    continue;
                }
                let (pa, pb) = (p_of(ja), p_of(jb));
                let l_min = pa.min(pb).floor() as i64;
                let l_max = pa.max(pb).ceil() as i64 + 1;
                let len = (l_max - l_min + 1) as usize;
                acc.clear();
                acc.resize(len, Complex64::new(0.0, 0.0));
                let mut any = false;
                for (iu, &u) in self.elements.iter().enumerate() {
                    if (u - xo).abs() > half {
                        continue;
                    }
                    let r = ((u - xo) * (u - xo) + z * z).sqrt();
                    let tau = r / self.speed;
                    let rot = Complex64::from_polar(1.0, self.omega * tau);
                    let off = tau * fs;
                    let fl = off.floor();
                    let frac = off - fl;
                    let (w0, w1) = (rot * (1.0 - frac), rot * frac);
                    // sample index of acc[l] is l_min + l + fl
                    let shift = l_min + fl as i64;
                    let l_lo = (-shift).max(0);
                    let l_hi = (self.nt as i64 - 2 - shift).min(len as i64 - 1);
                    dropped += count_outside(p_of(ja) + off, dp, jb - ja + 1, last);
                    if l_lo > l_hi {
                        continue;
                    }
                    any = true;
                    let trace = self.base.slice(ndarray::s![iu, it, ..]);
                    let trace = trace.as_slice().expect("contiguous trace");
                    let start = (shift + l_lo) as usize;
                    let n = (l_hi - l_lo + 1) as usize;
                    let dst = &mut acc[l_lo as usize..l_lo as usize + n];
                    let src = &trace[start..start + n + 1];
                    for (k, a) in dst.iter_mut().enumerate() {
                        *a += w0 * src[k] + w1 * src[k + 1];
                    }
                }
                if !any {
                    continue;
                }
                let mut row = out.row_mut(io);
                for j in ja..=jb {
                    let p = p_of(j) - l_min as f64;
                    let k = p.floor();
                    let f = p - k;
                    let k = k as usize;
                    if k + 1 >= len {
                        continue;
                    }
                    let v = acc[k] * (1.0 - f) + acc[k + 1] * f;
                    let t = self.t0 + (p + l_min as f64) / fs;
                    row[j] += v * Complex64::from_polar(1.0, self.omega * t);
                }
            }
        }
        out.mapv_inplace(|v| v.conj());
        (out, dropped)
    }

    /// Inclusive input-pixel range inside the aliasing mask around `io`.
    fn input_range(&self, io: usize) -> (usize, usize) {
        let nx = self.x.len();
        match self.mask_width {
            None => (0, nx - 1),
            Some(w) => {
                let reach = (w / self.dx + 1e-9).floor() as usize;
                (io.saturating_sub(reach), (io + reach).min(nx - 1))
            }
        }
    }
}

/// Number of j in 0..n whose position p0 + j·dp lies outside [0, last].
fn count_outside(p0: f64, dp: f64, n: usize, last: f64) -> usize {
    let inside = |p: f64| (0.0..=last).contains(&p);
    if dp == 0.0 {
        return if inside(p0) { 0 } else { n };
    }
    // inside for j in [ceil(a), floor(b)] with a, b the crossing indices
    let (a, b) = if dp > 0.0 { ((0.0 - p0) / dp, (last - p0) / dp) } else { ((last - p0) / dp, (0.0 - p0) / dp) };
    let lo = a.ceil().max(0.0);
    let hi = b.floor().min(n as f64 - 1.0);
    let kept = if hi >= lo { (hi - lo) as usize + 1 } else { 0 };
    n - kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{synthesize_raw, AberratorSpec, PhantomSpec, PointScatterer, PulseSpec};
    use crate::signal::analytic_signal;

    fn small_config() -> AcquisitionConfig {
        let mut c = AcquisitionConfig::desk();
        c.num_elements = 32;
        c.transmit_angles = crate::config::uniform_angles(9, 15f64.to_radians());
        c.record_duration = 30e-6;
        c
    }

    fn point_cube(c: &AcquisitionConfig, x: f64, z: f64) -> AnalyticCube {
        let phantom = PhantomSpec {
            speckle: None,
            point_scatterers: vec![PointScatterer { x, z, amplitude: Complex64::new(1.0, 0.0) }],
            specular_interfaces: vec![],
            seed: 1,
        };
        let raw = synthesize_raw(&phantom, &AberratorSpec::None, &PulseSpec::from_config(c), c).unwrap();
        analytic_signal(&raw).unwrap()
    }

    #[test]
    fn count_outside_matches_enumeration() {
        for &(p0, dp, n, last) in &[(-3.2, 0.7, 20, 9.0), (12.0, -0.9, 30, 10.0), (5.0, 0.0, 4, 9.0), (-1.0, 0.0, 4, 9.0), (2.0, 0.3, 10, 100.0)] {
            let direct = (0..n).filter(|&j| {
                let p = p0 + j as f64 * dp;
                !(0.0..=last).contains(&p)
            }).count();
            assert_eq!(count_outside(p0, dp, n, last), direct);
        }
    }

    #[test]
    fn zero_cube_gives_zero_matrix() {
        let c = small_config();
        let grid = ImageGrid::new(-3.0, 0.2, 31, 8.0, 0.5, 3).unwrap();
        let cube = AnalyticCube { data: Array3::zeros((32, 9, c.num_samples())), sampling_frequency: c.sampling_frequency, t0: 0.0 };
        let r = das_focus(&cube, &grid, &c, &Apodization::default()).unwrap();
        assert!(r.data.iter().all(|v| v.norm() == 0.0));
        assert_eq!(r.dropped, 0);
    }

    #[test]
    fn linearity() {
        let c = small_config();
        let grid = ImageGrid::new(-2.0, 0.25, 17, 9.0, 0.5, 3).unwrap();
        let cube = point_cube(&c, 0.4, 10.0);
        let a = Complex64::new(-1.5, 2.0);
        let mut scaled = cube.clone();
        scaled.data.mapv_inplace(|v| v * a);
        let r1 = das_focus(&cube, &grid, &c, &Apodization::default()).unwrap();
        let r2 = das_focus(&scaled, &grid, &c, &Apodization::default()).unwrap();
        let scale = r1.data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        for (p, q) in r1.data.iter().zip(r2.data.iter()) {
            // the output is conjugated, so complex scaling appears conjugated
            assert!((p * a.conj() - q).norm() < 1e-9 * scale);
        }
    }

    #[test]
    fn point_scatterer_peaks_on_the_diagonal_near_it() {
        let c = small_config();
        let grid = ImageGrid::new(-2.0, 0.1, 41, 9.0, 0.25, 9).unwrap();
        let cube = point_cube(&c, 0.3, 10.0);
        let r = das_focus(&cube, &grid, &c, &Apodization::default()).unwrap();
        let mut best = (0.0, 0, 0, 0);
        for ((iz, i, j), v) in r.data.indexed_iter() {
            if v.norm() > best.0 {
                best = (v.norm(), iz, i, j);
            }
        }
        let (_, iz, i, j) = best;
        assert_eq!(i, j);
        assert!((grid.x[i] - 0.3).abs() <= 0.1 + 1e-9);
        assert!((grid.z[iz] - 10.0).abs() <= 0.25 + 1e-9);
    }

    #[test]
    fn time_shift_moves_image_in_depth() {
        let c = small_config();
        let grid = ImageGrid::new(-1.0, 0.1, 21, 8.0, 0.05, 81).unwrap();
        let cube = point_cube(&c, 0.0, 10.0);
        let shift = 0.5e-6;
        let mut shifted = cube.clone();
        shifted.t0 += shift;
        let peak_depth = |r: &FocusedReflectionMatrix| {
            let mut best = (0.0, 0);
            for iz in 0..grid.nz() {
                let v = r.data[[iz, 10, 10]].norm();
                if v > best.0 {
                    best = (v, iz);
                }
            }
            grid.z[best.1]
        };
        let a = peak_depth(&das_focus(&cube, &grid, &c, &Apodization::default()).unwrap());
        let b = peak_depth(&das_focus(&shifted, &grid, &c, &Apodization::default()).unwrap());
        let expect = c.speed() * shift / 2.0;
        assert!(((b - a) - expect).abs() <= grid.dz() + 1e-9, "shift {} vs {}", b - a, expect);
    }

    #[test]
    fn short_record_drops_contributions() {
        let mut c = small_config();
        c.record_duration = 8e-6;
        let grid = ImageGrid::new(-1.0, 0.5, 5, 9.0, 1.0, 2).unwrap();
        let cube = AnalyticCube { data: Array3::zeros((32, 9, c.num_samples())), sampling_frequency: c.sampling_frequency, t0: 0.0 };
        let r = das_focus(&cube, &grid, &c, &Apodization::default()).unwrap();
        assert!(r.dropped > 0);
    }

    #[test]
    fn aliasing_mask_zeroes_far_entries() {
        let mut c = small_config();
        c.transmit_angles = crate::config::uniform_angles(9, 40f64.to_radians());
        let bound = aliasing_bound(&c).unwrap();
        let grid = ImageGrid::new(-6.0, 0.25, 49, 10.0, 0.5, 2).unwrap();
        let cube = point_cube(&c, 0.0, 10.0);
        let r = das_focus(&cube, &grid, &c, &Apodization::default()).unwrap();
        assert_eq!(r.mask_width, Some(bound));
        for ((_, i, j), v) in r.data.indexed_iter() {
            if (grid.x[i] - grid.x[j]).abs() > bound + 1e-9 {
                assert_eq!(v.norm(), 0.0);
            }
        }
    }

    #[test]
    fn rejects_mismatched_cube() {
        let c = small_config();
        let grid = ImageGrid::new(-1.0, 0.5, 5, 9.0, 1.0, 2).unwrap();
        let cube = AnalyticCube { data: Array3::zeros((3, 9, 64)), sampling_frequency: c.sampling_frequency, t0: 0.0 };
        assert!(das_focus(&cube, &grid, &c, &Apodization::default()).is_err());
    }
}

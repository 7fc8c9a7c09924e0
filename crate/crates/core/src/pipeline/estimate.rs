//! Per-window law estimation from tile-accumulated Gram matrices.

use ndarray::{s, Array2, Axis as NdAxis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use super::schedule::SvdType;
use super::atlas::steering_cone;
use super::windows::WindowLayout;
use crate::beamform::{build_q0, build_t0, free_space_q0, k_axis, FocusedReflectionMatrix, PropagationOperator, Side};
use crate::config::{AcquisitionConfig, ImageGrid};
use crate::distortion::{
    convergence_gate, gram_phase_law, normalized_correlation, ramp_removal, residual_phase_law, AberrationLaw,
    CorrelationMatrix, LawOptions,
};
use crate::error::{Result, UmiError};
use crate::field::{Axis, Basis, ComplexMatrix2D};
use crate::metrics::FMap;
use crate::optics::ideal_resolution;

/// Rows of a dual basis: all rows of the periodic operator, and the subset
/// where laws are estimated: under the array, propagating wavenumbers on
/// receive, transmitted wavenumbers on transmit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualFrame {
    pub basis: Basis,
    /// Coordinates of every operator row.
    pub coords: Vec<f64>,
    /// Indices of the analysed rows.
    pub rows: Vec<usize>,
}

impl DualFrame {
    pub fn new(basis: Basis, side: Side, grid: &ImageGrid, config: &AcquisitionConfig) -> Result<Self> {
        let (coords, keep): (Vec<f64>, Box<dyn Fn(f64) -> bool>) = match basis {
            Basis::Transducer => {
                let e = config.element_positions();
                let lo = e.iter().copied().fold(f64::INFINITY, f64::min) - 0.5 * config.pitch;
                let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 0.5 * config.pitch;
                (grid.x.clone(), Box::new(move |u| u >= lo && u <= hi))
            }
            Basis::PlaneWave => {
                let kc = config.wavenumber();
                let k = k_axis(grid.nx(), grid.dx());
                let limit = match side {
                    Side::Output => kc,
                    Side::Input => {
                        let steer = config.transmit_angles.iter().fold(0f64, |m, t| m.max(t.abs()));
                        let dk = if k.len() > 1 { (k[1] - k[0]).abs() } else { 0.0 };
                        (kc * steer.sin() + 0.5 * dk).min(kc)
                    }
                };
                (k, Box::new(move |k: f64| k.abs() <= limit))
            }
            Basis::Focused => return Err(UmiError::BasisMismatch { expected: Basis::Transducer, found: basis }),
        };
        let rows: Vec<usize> = (0..coords.len()).filter(|&i| keep(coords[i])).collect();
        if rows.is_empty() {
            return Err(UmiError::Geometry("no analysed rows in the dual basis".into()));
        }
        Ok(Self { basis, coords, rows })
    }

    pub fn analysed_coords(&self) -> Vec<f64> {
        self.rows.iter().map(|&i| self.coords[i]).collect()
    }

    /// Periodic operator B₀ over all rows at depth `z`.
    pub fn geometric(&self, z: f64, grid: &ImageGrid, config: &AcquisitionConfig) -> Result<PropagationOperator> {
        match self.basis {
            Basis::Transducer => build_q0(z, &grid.x, config),
            _ => {
                let t0 = build_t0(&grid.x, &self.coords)?;
                Ok(PropagationOperator { matrix: ComplexMatrix2D { depth: Some(z), ..t0.matrix }, ..t0 })
            }
        }
    }

    /// Reference wavefront removed from the analysed rows: the free-space
    /// transmission for the transducer basis, T₀ for plane waves.
    pub fn reference(&self, z: f64, grid: &ImageGrid, config: &AcquisitionConfig) -> Result<Array2<Complex64>> {
        let coords = self.analysed_coords();
        Ok(match self.basis {
            Basis::Transducer => free_space_q0(z, &coords, &grid.x, config)?.matrix.values,
            _ => build_t0(&grid.x, &coords)?.matrix.values,
        })
    }

    /// Expands a law on the analysed rows to all rows, flat elsewhere.
    pub fn expand(&self, law: Option<&AberrationLaw>) -> Vec<Complex64> {
        let mut t = vec![Complex64::new(1.0, 0.0); self.coords.len()];
        if let Some(l) = law {
            for (&i, p) in self.rows.iter().zip(l.transmittance()) {
                t[i] = p;
            }
        }
        t
    }
}

/// Law estimated in one window, with the trust test that decides whether
/// it is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowEstimate {
    pub law: AberrationLaw,
    /// Focal points in the window.
    pub n_in: usize,
    /// Independent resolution cells N_in.
    pub n_independent: f64,
    /// δx_in / δx₀ used by the trust test.
    pub width_ratio: f64,
    pub passed_gate: bool,
    /// Every focal point of the window lies in the insonified field.
    pub covered: bool,
}

impl WindowEstimate {
    pub fn usable(&self) -> bool {
        self.law.valid && self.passed_gate && self.covered
    }
}

pub(crate) struct SubstepSpec<'a> {
    pub frame: &'a DualFrame,
    pub side: Side,
    pub svd_type: SvdType,
    pub layout: &'a WindowLayout,
    pub law: &'a LawOptions,
    pub ramp: bool,
    /// Pixels `(z, x)` with a non-vanishing raw confocal intensity.
    pub insonified: &'a Array2<bool>,
}

fn ranges(axis: &[f64], layout: &WindowLayout, a: usize) -> Vec<Range<usize>> {
    let mut out = vec![0..0; layout.tiles[a]];
    let mut start = 0;
    for t in 0..layout.tiles[a] {
        let mut end = start;
        while end < axis.len() && layout.tile_of(a, axis[end]) == t {
            end += 1;
        }
        out[t] = start..end;
        start = end;
    }
    out
}

/// Distortion field d = (B₀ R′)[analysed rows] ∘ conj(reference) with the
/// dual index first.
pub(crate) fn distortion_slice(
    r: &FocusedReflectionMatrix,
    iz: usize,
    frame: &DualFrame,
    side: Side,
    config: &AcquisitionConfig,
) -> Result<Array2<Complex64>> {
    let z = r.grid.z[iz];
    let b0 = frame.geometric(z, &r.grid, config)?.matrix.values.select(NdAxis(0), &frame.rows);
    let slice = r.at_depth(iz);
    let mut d = match side {
        Side::Output => b0.dot(&slice),
        Side::Input => b0.dot(&slice.t()),
    };
    let reference = frame.reference(z, &r.grid, config)?;
    d.zip_mut_with(&reference, |a, b| *a *= b.conj());
    Ok(d)
}

/// Analysed rows that some focal point of a window reaches inside the
/// steering cone: elements within z·tan(cone) laterally, or wavenumbers
/// between the extreme ray directions from the window to the array.
pub(crate) fn reachable_rows(axis: &Axis, layout: &WindowLayout, center: [f64; 2], grid: &ImageGrid, config: &AcquisitionConfig) -> Vec<bool> {
    let clamp = |v: f64, a: &[f64]| v.clamp(a[0], a[a.len() - 1]);
    let x = [clamp(center[0] - 0.5 * layout.size[0], &grid.x), clamp(center[0] + 0.5 * layout.size[0], &grid.x)];
    let z = [clamp(center[1] - 0.5 * layout.size[1], &grid.z), clamp(center[1] + 0.5 * layout.size[1], &grid.z)];
    let cone = steering_cone(config);
    match axis.basis {
        Basis::Transducer => {
            let reach = z[1] * cone.tan();
            axis.coords.iter().map(|&u| u >= x[0] - reach && u <= x[1] + reach).collect()
        }
        _ => {
            let e = config.element_positions();
            let u = [e[0], e[e.len() - 1]];
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for xi in x {
                for ui in u {
                    for zi in z {
                        let d = xi - ui;
                        let s = d / (d * d + zi * zi).sqrt();
                        lo = lo.min(s);
                        hi = hi.max(s);
                    }
                }
            }
            let limit = cone.sin();
            let (lo, hi) = (lo.max(-limit), hi.min(limit));
            let kc = config.wavenumber();
            let half_step = if axis.coords.len() > 1 { 0.5 * (axis.coords[1] - axis.coords[0]).abs() } else { 0.0 };
            axis.coords.iter().map(|&k| k >= kc * lo - half_step && k <= kc * hi + half_step).collect()
        }
    }
}

/// Laws of every window in `layout`, z-major.
pub(crate) fn estimate_substep(
    filtered: &FocusedReflectionMatrix,
    spec: &SubstepSpec,
    config: &AcquisitionConfig,
    fmap: &FMap,
) -> Result<Vec<WindowEstimate>> {
    let grid = &filtered.grid;
    let layout = spec.layout;
    let x_tiles = ranges(&grid.x, layout, 0);
    let z_tiles = ranges(&grid.z, layout, 1);
    let na = spec.frame.rows.len();
    let axis = Axis::new(spec.frame.basis, spec.frame.analysed_coords());
    let kc = config.wavenumber();
    let dz0 = config.axial_resolution();
    let fallback_ratio = fmap.median_f().filter(|f| *f > 0.0).map_or(1.0, |f| 1.0 / f);
    let dark: Vec<Vec<bool>> = z_tiles
        .iter()
        .map(|zr| {
            x_tiles
                .iter()
                .map(|xr| zr.clone().any(|iz| xr.clone().any(|ix| !spec.insonified[[iz, ix]])))
                .collect()
        })
        .collect();

    let tile_row = |tz: usize| -> Result<Vec<Array2<Complex64>>> {
        let per_depth: Vec<Vec<Array2<Complex64>>> = z_tiles[tz]
            .clone()
            .into_par_iter()
            .map(|iz| {
                let d = distortion_slice(filtered, iz, spec.frame, spec.side, config)?;
                Ok(x_tiles
                    .iter()
                    .map(|cols| {
                        let dt = d.slice(s![.., cols.clone()]);
                        dt.dot(&dt.t().mapv(|v| v.conj()))
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        let mut acc = vec![Array2::<Complex64>::zeros((na, na)); x_tiles.len()];
        for grams in per_depth {
            acc.iter_mut().zip(grams).for_each(|(a, g)| *a += &g);
        }
        Ok(acc)
    };

    let mut rows: Vec<Option<Vec<Array2<Complex64>>>> = vec![None; z_tiles.len()];
    let mut out = Vec::with_capacity(layout.len());
    for wz in 0..layout.z.len() {
        let zr = layout.window_tiles(1, wz);
        for (t, row) in rows.iter_mut().enumerate() {
            if t < zr.start {
                *row = None;
            } else if zr.contains(&t) && row.is_none() {
                *row = Some(tile_row(t)?);
            }
        }
        let z_count: usize = zr.clone().map(|t| z_tiles[t].len()).sum();
        let estimates: Vec<WindowEstimate> = (0..layout.x.len())
            .into_par_iter()
            .map(|wx| {
                let xr = layout.window_tiles(0, wx);
                let mut gram = Array2::<Complex64>::zeros((na, na));
                for tz in zr.clone() {
                    let row = rows[tz].as_ref().expect("tile row computed");
                    for tx in xr.clone() {
                        gram += &row[tx];
                    }
                }
                let x_count: usize = xr.clone().map(|t| x_tiles[t].len()).sum();
                let covered = !zr.clone().any(|tz| xr.clone().any(|tx| dark[tz][tx]));
                let n_in = x_count * z_count;
                let center = [layout.x[wx], layout.z[wz]];
                let reach = reachable_rows(&axis, layout, center, grid, config);
                let mut law = window_law(&gram, &axis, &reach, spec.side, center, n_in, spec.svd_type, spec.law)?;
                if spec.ramp {
                    law = ramp_removal(&law, center[1], kc);
                }
                let dx0 = ideal_resolution(center[0], center[1].max(grid.z[0]), config)?;
                let n_independent = n_in as f64 * grid.dx() * grid.dz() / (dx0 * dz0);
                let width_ratio = fmap.f_at(center[0], center[1]).filter(|f| *f > 0.0).map_or(fallback_ratio, |f| 1.0 / f);
                Ok(WindowEstimate {
                    passed_gate: convergence_gate(n_independent, width_ratio),
                    law,
                    n_in,
                    n_independent,
                    width_ratio,
                    covered,
                })
            })
            .collect::<Result<_>>()?;
        out.extend(estimates);
    }
    Ok(out)
}

/// Law from a window Gram matrix, with the eigenproblem restricted to the
/// reachable rows holding at least the support fraction of their peak energy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn window_law(
    gram: &Array2<Complex64>,
    axis: &Axis,
    reachable: &[bool],
    side: Side,
    center: [f64; 2],
    n_in: usize,
    svd_type: SvdType,
    opts: &LawOptions,
) -> Result<AberrationLaw> {
    let n = gram.nrows();
    let energy: Vec<f64> = (0..n).map(|i| if reachable[i] { gram[[i, i]].re } else { 0.0 }).collect();
    let emax = energy.iter().copied().fold(0.0, f64::max);
    let mut out = AberrationLaw { valid: false, ..AberrationLaw::flat(axis.basis, side, center, axis.coords.clone()) };
    if !(emax > 0.0) || n_in < 2 {
        out.support = vec![false; n];
        return Ok(out);
    }
    let idx: Vec<usize> = (0..n).filter(|&i| reachable[i] && energy[i] >= opts.support_fraction * emax).collect();
    let sub = Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| gram[[idx[a], idx[b]]]);
    let sub_axis = Axis::new(axis.basis, idx.iter().map(|&i| axis.coords[i]).collect());
    let law = match svd_type {
        SvdType::Distortion => gram_phase_law(&sub, &sub_axis, side, center, opts),
        SvdType::NormalizedCorrelation => {
            let c = CorrelationMatrix::from_gram(sub, &sub_axis, n_in, side, center)?;
            residual_phase_law(&normalized_correlation(&c, opts), opts)
        }
    };
    out.support = vec![false; n];
    for (a, &i) in idx.iter().enumerate() {
        out.phase[i] = law.phase[a];
        out.support[i] = law.support[a];
    }
    out.singular_values = law.singular_values;
    out.valid = law.valid;
    Ok(out)
}

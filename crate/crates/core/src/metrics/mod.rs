//! Focusing quality: common-midpoint profiles, focusing factor, contrast,
//! confocal images and the isoplanatic decomposition of an aberration atlas.

mod isoplanatic;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::beamform::FocusedReflectionMatrix;
use crate::config::{AcquisitionConfig, ImageGrid};
use crate::error::{Result, UmiError};
use crate::optics::ideal_resolution;

pub use isoplanatic::{entropy, isoplanatic_svd, AtlasColumn, IsoplanaticDecomposition};

/// Why a profile or map cell carries no estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    /// No confocal enhancement over background, or no half-maximum crossing.
    NoPeak,
    /// Confocal peak less than the required prominence over background.
    LowSnr,
    /// Every coefficient of the band is masked or outside the grid.
    Masked,
}

/// Mean antidiagonal intensity I(Δx) around a midpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmpProfile {
    pub center: [f64; 2],
    /// Lags x_out − x_in (mm), symmetric about zero.
    pub lags: Vec<f64>,
    pub intensity: Vec<f64>,
    pub background: f64,
    pub status: Option<InvalidReason>,
}

impl CmpProfile {
    pub fn is_valid(&self) -> bool {
        self.status.is_none()
    }

    fn zero_index(&self) -> usize {
        self.lags.len() / 2
    }

    /// I at lag `dx` by linear interpolation, averaging both signs.
    pub fn at(&self, dx: f64) -> f64 {
        let step = self.lags[1] - self.lags[0];
        let c = self.zero_index() as f64;
        let sample = |pos: f64| {
            let pos = pos.clamp(0.0, (self.lags.len() - 1) as f64);
            let i = pos.floor() as usize;
            let f = pos - i as f64;
            if i + 1 < self.lags.len() {
                self.intensity[i] * (1.0 - f) + self.intensity[i + 1] * f
            } else {
                self.intensity[i]
            }
        };
        0.5 * (sample(c + dx / step) + sample(c - dx / step))
    }

    /// Full width (mm) where the background-subtracted profile falls to
    /// `level` times its value at zero lag.
    pub fn width_at(&self, level: f64) -> Option<f64> {
        let c = self.zero_index();
        let step = self.lags[1] - self.lags[0];
        let p: Vec<f64> = self.intensity.iter().map(|v| v - self.background).collect();
        let peak = p[c];
        if !(peak > 0.0) {
            return None;
        }
        let target = level * peak;
        let side = |dir: i64| -> Option<f64> {
            let mut i = c as i64;
            loop {
                let j = i + dir;
                if j < 0 || j >= p.len() as i64 {
                    return None;
                }
                let (a, b) = (p[i as usize], p[j as usize]);
                if b <= target {
                    return Some(((i - c as i64).abs() as f64 + (a - target) / (a - b)) * step);
                }
                i = j;
            }
        };
        Some(side(1)? + side(-1)?)
    }

    /// Width at half the peak intensity.
    pub fn fwhm(&self) -> Option<f64> {
        self.width_at(0.5)
    }
}

/// Averaging cell and lag range of CMP measurements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileOptions {
    /// Lateral and axial size (mm) of the midpoint neighbourhood.
    pub cell: [f64; 2],
    /// Largest |Δx| (mm) in the profile.
    pub lag_half_width: f64,
    /// Outer fraction of the lag axis used for the background median.
    pub background_fraction: f64,
    /// Minimum I(0)/background (dB) for a valid estimate.
    pub min_prominence_db: f64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { cell: [2.5, 2.0], lag_half_width: 5.0, background_fraction: 0.2, min_prominence_db: 3.0 }
    }
}

/// CMP profile over the midpoints (z, x) with |x − x_m| ≤ cell_x/2 and
/// |z − z_m| ≤ cell_z/2; a zero cell uses the nearest pixel only.
pub fn cmp_profile(r: &FocusedReflectionMatrix, center: [f64; 2], opts: &ProfileOptions) -> Result<CmpProfile> {
    let grid = &r.grid;
    if !grid.contains(center[0], center[1]) {
        return Err(UmiError::Geometry(format!("midpoint ({}, {}) mm lies outside the grid", center[0], center[1])));
    }
    let dx = grid.dx();
    let half_lag = (opts.lag_half_width / dx).round().max(1.0) as i64;
    let nx = grid.nx() as i64;
    let xs = members(&grid.x, center[0], opts.cell[0] / 2.0);
    let zs = members(&grid.z, center[1], opts.cell[1] / 2.0);
    let mask = r.mask_width.unwrap_or(f64::INFINITY);
    let n = (2 * half_lag + 1) as usize;
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for &iz in &zs {
        let slice = r.at_depth(iz);
        for &m in &xs {
            for l in -half_lag..=half_lag {
                if (l as f64 * dx).abs() > mask + 1e-9 {
                    continue;
                }
                let i = m as i64 + (l + 1).div_euclid(2);
                let j = i - l;
                if i < 0 || j < 0 || i >= nx || j >= nx {
                    continue;
                }
                let k = (l + half_lag) as usize;
                sum[k] += slice[[i as usize, j as usize]].norm_sqr();
                count[k] += 1;
            }
        }
    }
    let lags: Vec<f64> = (-half_lag..=half_lag).map(|l| l as f64 * dx).collect();
    let c = half_lag as usize;
    if count[c] == 0 {
        return Ok(CmpProfile { center, lags, intensity: vec![0.0; n], background: 0.0, status: Some(InvalidReason::Masked) });
    }
    let intensity: Vec<f64> = sum.iter().zip(&count).map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 }).collect();
    let cut = (1.0 - opts.background_fraction) * half_lag as f64;
    let mut outer: Vec<f64> = (0..n)
        .filter(|&k| count[k] > 0 && ((k as i64 - half_lag).abs() as f64) >= cut)
        .map(|k| intensity[k])
        .collect();
    outer.sort_by(f64::total_cmp);
    let background = if outer.is_empty() { 0.0 } else { median_sorted(&outer) };
    let mut profile = CmpProfile { center, lags, intensity, background, status: None };
    let peak = profile.intensity[c];
    profile.status = if !(peak > background) || profile.fwhm().is_none() {
        Some(InvalidReason::NoPeak)
    } else if 10.0 * (peak / background).log10() < opts.min_prominence_db {
        Some(InvalidReason::LowSnr)
    } else {
        None
    };
    Ok(profile)
}

fn members(axis: &[f64], c: f64, half: f64) -> Vec<usize> {
    let inside: Vec<usize> = (0..axis.len()).filter(|&i| (axis[i] - c).abs() <= half + 1e-9).collect();
    if !inside.is_empty() {
        return inside;
    }
    let nearest = (0..axis.len()).min_by(|&a, &b| (axis[a] - c).abs().total_cmp(&(axis[b] - c).abs()));
    nearest.into_iter().collect()
}

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median of the finite entries, `None` when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(median_sorted(&v))
}

/// Regular lattice of measurement cells tiling a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellLayout {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub size: [f64; 2],
}

impl CellLayout {
    pub fn new(grid: &ImageGrid, size: [f64; 2]) -> Self {
        let centers = |axis: &[f64], step: f64, size: f64| {
            let lo = axis[0] - step / 2.0;
            let hi = axis[axis.len() - 1] + step / 2.0;
            let n = ((hi - lo) / size).floor().max(1.0) as usize;
            let used = n as f64 * size;
            let start = lo + (hi - lo - used) / 2.0 + size / 2.0;
            (0..n).map(|i| start + i as f64 * size).collect::<Vec<_>>()
        };
        Self { x: centers(&grid.x, grid.dx(), size[0]), z: centers(&grid.z, grid.dz(), size[1]), size }
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.z.len(), self.x.len())
    }

    /// Cell index of a pixel (nearest centre).
    pub fn cell_of(&self, x: f64, z: f64) -> (usize, usize) {
        let near = |axis: &[f64], v: f64| {
            (0..axis.len()).min_by(|&a, &b| (axis[a] - v).abs().total_cmp(&(axis[b] - v).abs())).unwrap_or(0)
        };
        (near(&self.z, z), near(&self.x, x))
    }
}

/// Widths of an aberration-free matrix on the same cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub cells: CellLayout,
    /// Reference FWHM (mm) per cell, NaN where unmeasurable.
    pub width: Array2<f64>,
}

impl ReferenceTable {
    pub fn from_matrix(r: &FocusedReflectionMatrix, opts: &ProfileOptions) -> Result<Self> {
        let cells = CellLayout::new(&r.grid, opts.cell);
        let mut width = Array2::from_elem(cells.dim(), f64::NAN);
        for (iz, &z) in cells.z.iter().enumerate() {
            for (ix, &x) in cells.x.iter().enumerate() {
                let p = cmp_profile(r, [x, z], opts)?;
                if p.is_valid() {
                    width[[iz, ix]] = p.fwhm().unwrap_or(f64::NAN);
                }
            }
        }
        Ok(Self { cells, width })
    }
}

/// Per-cell focusing factor and widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FMap {
    pub cells: CellLayout,
    /// F = w_ref / w̄, NaN where invalid.
    pub f: Array2<f64>,
    /// Intensity FWHM w̄ (mm).
    pub width: Array2<f64>,
    /// Full width at a quarter of the peak intensity (−6 dB in amplitude).
    pub width_quarter: Array2<f64>,
    /// 10 log10(I(0)/I(δx₀)) on the raw profile (dB).
    pub contrast: Array2<f64>,
    pub status: Array2<Option<InvalidReason>>,
}

impl FMap {
    pub fn median_f(&self) -> Option<f64> {
        median(self.f.iter().copied())
    }

    pub fn median_width(&self) -> Option<f64> {
        median(self.width.iter().copied())
    }

    pub fn median_contrast(&self) -> Option<f64> {
        median(self.contrast.iter().copied())
    }

    pub fn valid_fraction(&self) -> f64 {
        self.f.iter().filter(|v| v.is_finite()).count() as f64 / self.f.len().max(1) as f64
    }

    /// w̄ of the containing cell for every pixel (NaN where invalid).
    pub fn pixel_width(&self, grid: &ImageGrid) -> Array2<f64> {
        Array2::from_shape_fn((grid.nz(), grid.nx()), |(iz, ix)| {
            let (cz, cx) = self.cells.cell_of(grid.x[ix], grid.z[iz]);
            if self.f[[cz, cx]].is_finite() {
                self.width[[cz, cx]]
            } else {
                f64::NAN
            }
        })
    }

    /// F of the cell containing (x, z), if valid.
    pub fn f_at(&self, x: f64, z: f64) -> Option<f64> {
        let (cz, cx) = self.cells.cell_of(x, z);
        Some(self.f[[cz, cx]]).filter(|v| v.is_finite())
    }
}

pub fn f_map(r: &FocusedReflectionMatrix, reference: &ReferenceTable, config: &AcquisitionConfig, opts: &ProfileOptions) -> Result<FMap> {
    let cells = CellLayout::new(&r.grid, opts.cell);
    if cells != reference.cells {
        return Err(UmiError::Shape("reference table was built on different cells".into()));
    }
    let dim = cells.dim();
    let mut out = FMap {
        f: Array2::from_elem(dim, f64::NAN),
        width: Array2::from_elem(dim, f64::NAN),
        width_quarter: Array2::from_elem(dim, f64::NAN),
        contrast: Array2::from_elem(dim, f64::NAN),
        status: Array2::from_elem(dim, None),
        cells,
    };
    for iz in 0..dim.0 {
        for ix in 0..dim.1 {
            let (x, z) = (out.cells.x[ix], out.cells.z[iz]);
            let p = cmp_profile(r, [x, z], opts)?;
            if let Ok(d0) = ideal_resolution(x, z, config) {
                if p.intensity[p.zero_index()] > 0.0 {
                    out.contrast[[iz, ix]] = contrast(&p, d0);
                }
            }
            if let Some(reason) = p.status {
                out.status[[iz, ix]] = Some(reason);
                continue;
            }
            let w = p.fwhm().expect("valid profile has a width");
            out.width[[iz, ix]] = w;
            out.width_quarter[[iz, ix]] = p.width_at(0.25).unwrap_or(f64::NAN);
            let w_ref = reference.width[[iz, ix]];
            if w_ref.is_finite() {
                out.f[[iz, ix]] = w_ref / w;
            } else {
                out.status[[iz, ix]] = Some(InvalidReason::NoPeak);
            }
        }
    }
    Ok(out)
}

/// 10 log10(I(0)/I(δx₀)) on the raw profile; +∞ when I(δx₀) vanishes.
pub fn contrast(profile: &CmpProfile, resolution: f64) -> f64 {
    let i0 = profile.intensity[profile.zero_index()];
    let i1 = profile.at(resolution);
    if i1 <= 0.0 {
        return f64::INFINITY;
    }
    10.0 * (i0 / i1).log10()
}

/// |R(r, r)|² as a `(z, x)` map.
pub fn confocal_image(r: &FocusedReflectionMatrix) -> Array2<f64> {
    r.diagonal().mapv(|v| v.norm_sqr())
}

/// Log compression to dB relative to the maximum, floored at −`range`.
pub fn to_db(image: &Array2<f64>, range: f64) -> Array2<f64> {
    let max = image.iter().copied().fold(0.0, f64::max);
    image.mapv(|v| if max > 0.0 && v > 0.0 { (10.0 * (v / max).log10()).max(-range) } else { -range })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamform::MatrixVariant;
    use ndarray::Array3;
    use num_complex::Complex64;

    fn matrix(grid: &ImageGrid, f: impl Fn(usize, usize, usize) -> Complex64) -> FocusedReflectionMatrix {
        let nx = grid.nx();
        FocusedReflectionMatrix {
            grid: grid.clone(),
            variant: MatrixVariant::Raw,
            data: Array3::from_shape_fn((grid.nz(), nx, nx), |(z, i, j)| f(z, i, j)),
            mask_width: None,
            dropped: 0,
        }
    }

    fn opts() -> ProfileOptions {
        ProfileOptions { cell: [1.0, 1.0], lag_half_width: 2.0, ..ProfileOptions::default() }
    }

    #[test]
    fn diagonal_matrix_profile() {
        let grid = ImageGrid::new(-3.0, 0.1, 61, 10.0, 0.5, 5).unwrap();
        let r = matrix(&grid, |_, i, j| if i == j { Complex64::new(2.0, 0.0) } else { Complex64::new(0.0, 0.0) });
        let p = cmp_profile(&r, [0.0, 11.0], &opts()).unwrap();
        let c = p.lags.len() / 2;
        assert_eq!(p.intensity[c], 4.0);
        assert!(p.intensity.iter().enumerate().all(|(k, v)| k == c || *v == 0.0));
    }

    #[test]
    fn constant_matrix_profile_is_flat() {
        let grid = ImageGrid::new(-3.0, 0.1, 61, 10.0, 0.5, 5).unwrap();
        let r = matrix(&grid, |_, _, _| Complex64::new(0.0, 3.0));
        let p = cmp_profile(&r, [0.0, 11.0], &opts()).unwrap();
        assert!(p.intensity.iter().all(|v| (v - 9.0).abs() < 1e-12));
        assert_eq!(p.status, Some(InvalidReason::NoPeak));
    }

    #[test]
    fn profile_matches_naive_double_loop() {
        let grid = ImageGrid::new(-2.0, 0.2, 21, 10.0, 0.5, 4).unwrap();
        let r = matrix(&grid, |z, i, j| Complex64::new((i * 3 + j) as f64 % 7.0 + z as f64, (i as f64 - j as f64).sin()));
        let o = ProfileOptions { cell: [0.6, 1.0], lag_half_width: 1.0, ..ProfileOptions::default() };
        let center = [0.0, 10.75];
        let p = cmp_profile(&r, center, &o).unwrap();
        for (k, &lag) in p.lags.iter().enumerate() {
            let (mut s, mut n) = (0.0, 0);
            for iz in 0..grid.nz() {
                if (grid.z[iz] - center[1]).abs() > 0.5 + 1e-9 {
                    continue;
                }
                for i in 0..grid.nx() {
                    for j in 0..grid.nx() {
                        let d = grid.x[i] - grid.x[j];
                        // midpoint pixel: floor of the average index, rounded toward the upper pixel
                        let m = (i + j) / 2;
                        if (d - lag).abs() < 1e-9 && (grid.x[m] - center[0]).abs() <= 0.3 + 1e-9 {
                            s += r.data[[iz, i, j]].norm_sqr();
                            n += 1;
                        }
                    }
                }
            }
            assert!((p.intensity[k] - s / n as f64).abs() < 1e-12, "lag {lag}");
        }
    }

    fn gaussian_matrix(grid: &ImageGrid, sigma: f64, floor: f64) -> FocusedReflectionMatrix {
        let x = grid.x.clone();
        matrix(grid, move |_, i, j| {
            let d = x[i] - x[j];
            Complex64::new(((-d * d / (2.0 * sigma * sigma)).exp() + floor).sqrt(), 0.0)
        })
    }

    #[test]
    fn gaussian_contrast_and_width() {
        let grid = ImageGrid::new(-6.0, 0.05, 241, 10.0, 0.5, 3).unwrap();
        let s = 0.4;
        let r = gaussian_matrix(&grid, s, 0.0);
        let o = ProfileOptions { cell: [0.5, 0.5], lag_half_width: 4.0, ..ProfileOptions::default() };
        let p = cmp_profile(&r, [0.0, 10.5], &o).unwrap();
        // I(Δx) = exp(−Δx²/2σ²)
        let d0 = 0.3;
        let expect = 10.0 * (d0 * d0 / (2.0 * s * s)) * std::f64::consts::LOG10_E;
        assert!((contrast(&p, d0) - expect).abs() < 0.1);
        let fwhm = 2.0 * (2.0 * 2f64.ln()).sqrt() * s;
        assert!((p.fwhm().unwrap() - fwhm).abs() < 0.01);
    }

    #[test]
    fn equal_levels_give_zero_contrast_and_vanishing_level_infinite() {
        let p = CmpProfile { center: [0.0, 1.0], lags: vec![-0.1, 0.0, 0.1], intensity: vec![1.0, 1.0, 1.0], background: 0.0, status: None };
        assert_eq!(contrast(&p, 0.1), 0.0);
        let q = CmpProfile { intensity: vec![0.0, 1.0, 0.0], ..p };
        assert_eq!(contrast(&q, 0.1), f64::INFINITY);
    }

    #[test]
    fn self_referenced_f_is_one_and_scale_free() {
        let c = AcquisitionConfig::desk();
        let grid = ImageGrid::new(-4.0, 0.1, 81, 10.0, 0.5, 9).unwrap();
        let r = gaussian_matrix(&grid, 0.3, 0.02);
        let o = ProfileOptions { cell: [2.0, 2.0], lag_half_width: 3.0, ..ProfileOptions::default() };
        let table = ReferenceTable::from_matrix(&r, &o).unwrap();
        let f = f_map(&r, &table, &c, &o).unwrap();
        assert!((f.median_f().unwrap() - 1.0).abs() < 1e-12);
        let mut scaled = r.clone();
        scaled.data.mapv_inplace(|v| v * 7.0);
        let g = f_map(&scaled, &table, &c, &o).unwrap();
        for (a, b) in f.f.iter().zip(g.f.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // wider spot halves F
        let wide = gaussian_matrix(&grid, 0.6, 0.02);
        let h = f_map(&wide, &table, &c, &o).unwrap();
        assert!((h.median_f().unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn zeroed_diagonal_band_has_no_peak() {
        let c = AcquisitionConfig::desk();
        let grid = ImageGrid::new(-4.0, 0.1, 81, 10.0, 0.5, 9).unwrap();
        let o = ProfileOptions { cell: [2.0, 2.0], lag_half_width: 3.0, ..ProfileOptions::default() };
        let table = ReferenceTable::from_matrix(&gaussian_matrix(&grid, 0.3, 0.02), &o).unwrap();
        let mut r = gaussian_matrix(&grid, 0.3, 0.02);
        for ((_, i, j), v) in r.data.indexed_iter_mut() {
            if (i as i64 - j as i64).abs() <= 2 {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        let f = f_map(&r, &table, &c, &o).unwrap();
        assert!(f.status.iter().all(|s| *s == Some(InvalidReason::NoPeak)));
        assert!(f.median_f().is_none());
    }

    #[test]
    fn low_prominence_is_flagged() {
        let grid = ImageGrid::new(-4.0, 0.1, 81, 10.0, 0.5, 3).unwrap();
        let r = gaussian_matrix(&grid, 0.3, 1.5);
        let o = ProfileOptions { cell: [2.0, 1.0], lag_half_width: 3.0, ..ProfileOptions::default() };
        assert_eq!(cmp_profile(&r, [0.0, 10.5], &o).unwrap().status, Some(InvalidReason::LowSnr));
    }

    #[test]
    fn confocal_image_of_identity_is_unit() {
        let grid = ImageGrid::new(0.0, 0.1, 6, 10.0, 0.5, 2).unwrap();
        let r = matrix(&grid, |_, i, j| if i == j { Complex64::new(0.0, 1.0) } else { Complex64::new(5.0, 0.0) });
        assert!(confocal_image(&r).iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let db = to_db(&confocal_image(&r), 60.0);
        assert!(db.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cell_layout_tiles_grid() {
        let grid = ImageGrid::desk();
        let cells = CellLayout::new(&grid, [2.5, 2.0]);
        assert_eq!(cells.dim(), (20, 12));
        assert!((cells.x[0] + 13.75).abs() < 1e-9);
    }
}

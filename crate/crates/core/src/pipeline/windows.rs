//! Overlapping analysis windows, their tiles and raised-cosine blending.

use ndarray::{Array3, Axis as NdAxis};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::Range;

use crate::beamform::{FocusedReflectionMatrix, MatrixVariant, Side};
use crate::config::ImageGrid;
use crate::error::{Result, UmiError};

/// Windows of full size Δ on a stride Δ/4, each made of 4×4 tiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowLayout {
    /// Full widths (Δx, Δz) in mm.
    pub size: [f64; 2],
    /// Tile edges start here (mm), half a pixel before the first sample.
    pub origin: [f64; 2],
    /// Tile size (mm) along x and z.
    pub stride: [f64; 2],
    /// Tile count along x and z.
    pub tiles: [usize; 2],
    /// Window centres along x and z.
    pub x: Vec<f64>,
    pub z: Vec<f64>,
}

/// Tiles spanned by one window.
pub const TILES_PER_WINDOW: usize = 4;

impl WindowLayout {
    pub fn new(grid: &ImageGrid, size: [f64; 2]) -> Result<Self> {
        if !(size[0] > 0.0 && size[1] > 0.0) {
            return Err(UmiError::InvalidInput(format!("window size {size:?} must be positive")));
        }
        let (dx, dz) = grid.spacing();
        let origin = [grid.x[0] - 0.5 * dx, grid.z[0] - 0.5 * dz];
        let extent = [grid.nx() as f64 * dx, grid.nz() as f64 * dz];
        let stride = [size[0] / 4.0, size[1] / 4.0];
        let mut tiles = [0; 2];
        let mut centers: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for a in 0..2 {
            tiles[a] = ((extent[a] / stride[a]) - 1e-9).ceil().max(1.0) as usize;
            centers[a] = if tiles[a] < TILES_PER_WINDOW {
                vec![origin[a] + 0.5 * extent[a]]
            } else {
                (0..=tiles[a] - TILES_PER_WINDOW).map(|w| origin[a] + (w as f64 + 2.0) * stride[a]).collect()
            };
        }
        let [x, z] = centers;
        Ok(Self { size, origin, stride, tiles, x, z })
    }

    /// Number of windows along (z, x).
    pub fn dim(&self) -> (usize, usize) {
        (self.z.len(), self.x.len())
    }

    pub fn len(&self) -> usize {
        self.x.len() * self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat window index, z-major.
    pub fn index(&self, wz: usize, wx: usize) -> usize {
        wz * self.x.len() + wx
    }

    pub fn center(&self, index: usize) -> [f64; 2] {
        let n = self.x.len();
        [self.x[index % n], self.z[index / n]]
    }

    /// Tile holding a coordinate along axis `a` (0 = x, 1 = z).
    pub fn tile_of(&self, a: usize, v: f64) -> usize {
        let t = ((v - self.origin[a]) / self.stride[a]).floor();
        (t.max(0.0) as usize).min(self.tiles[a] - 1)
    }

    /// Tiles covered by window `w` along axis `a`.
    pub fn window_tiles(&self, a: usize, w: usize) -> Range<usize> {
        if self.tiles[a] < TILES_PER_WINDOW {
            0..self.tiles[a]
        } else {
            w..w + TILES_PER_WINDOW
        }
    }

    /// Raised-cosine weight cos²(π d / Δ) for |d| < Δ/2.
    pub fn taper(&self, a: usize, d: f64) -> f64 {
        let half = 0.5 * self.size[a];
        if d.abs() >= half {
            0.0
        } else {
            (PI * d / self.size[a]).cos().powi(2)
        }
    }

    /// Normalized blending weights at (x, z): pairs (window, c_w) with
    /// Σ c_w = 1, empty where no window reaches the point.
    pub fn weights(&self, x: f64, z: f64) -> Vec<(usize, f64)> {
        let wx: Vec<(usize, f64)> = self
            .x
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, if self.x.len() == 1 { 1.0 } else { self.taper(0, x - c) }))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let wz: Vec<(usize, f64)> = self
            .z
            .iter()
            .enumerate()
            .map(|(i, &c)| (i, if self.z.len() == 1 { 1.0 } else { self.taper(1, z - c) }))
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let mut out = Vec::with_capacity(wx.len() * wz.len());
        for &(iz, a) in &wz {
            for &(ix, b) in &wx {
                out.push((self.index(iz, ix), a * b));
            }
        }
        let total: f64 = out.iter().map(|(_, w)| w).sum();
        if total > 0.0 {
            out.iter_mut().for_each(|(_, w)| *w /= total);
        }
        out
    }
}

/// Overlap-add of per-window corrected matrices: every output row (output
/// side) or input column (input side) at pixel (x, z) is the weighted sum of
/// the window matrices. Invalid windows and uncovered pixels take the rows of
/// `previous`; the count of uncovered pixels is returned.
pub fn stitch_windows(
    windows: &[FocusedReflectionMatrix],
    valid: &[bool],
    layout: &WindowLayout,
    side: Side,
    previous: &FocusedReflectionMatrix,
) -> Result<(FocusedReflectionMatrix, usize)> {
    if windows.len() != layout.len() || valid.len() != layout.len() {
        return Err(UmiError::Shape(format!("{} windows for a layout of {}", windows.len(), layout.len())));
    }
    if windows.iter().any(|w| w.data.dim() != previous.data.dim()) {
        return Err(UmiError::Shape("window matrices differ in shape".into()));
    }
    let grid = &previous.grid;
    let (nz, nx, _) = previous.data.dim();
    let mut data = Array3::<Complex64>::zeros(previous.data.dim());
    let mut uncovered = 0;
    for iz in 0..nz {
        for ix in 0..nx {
            let weights = layout.weights(grid.x[ix], grid.z[iz]);
            if weights.is_empty() {
                uncovered += 1;
            }
            let mut lane = match side {
                Side::Output => data.index_axis_mut(NdAxis(0), iz).index_axis_move(NdAxis(0), ix),
                Side::Input => data.index_axis_mut(NdAxis(0), iz).index_axis_move(NdAxis(1), ix),
            };
            let source = |m: &FocusedReflectionMatrix| match side {
                Side::Output => m.data.index_axis(NdAxis(0), iz).index_axis_move(NdAxis(0), ix).to_owned(),
                Side::Input => m.data.index_axis(NdAxis(0), iz).index_axis_move(NdAxis(1), ix).to_owned(),
            };
            if weights.is_empty() {
                lane.assign(&source(previous));
                continue;
            }
            for (w, c) in weights {
                let m = if valid[w] { &windows[w] } else { previous };
                lane.scaled_add(Complex64::new(c, 0.0), &source(m));
            }
        }
    }
    let out = FocusedReflectionMatrix {
        grid: grid.clone(),
        variant: MatrixVariant::Corrected,
        data,
        mask_width: previous.mask_width,
        dropped: previous.dropped,
    };
    Ok((out, uncovered))
}

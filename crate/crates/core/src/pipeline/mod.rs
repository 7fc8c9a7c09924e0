//! Iterative local aberration correction: per step, a receive and a transmit
//! substep each filter the current matrix, estimate one law per window,
//! blend the laws across windows and apply them as a phase-only correction.

mod atlas;
mod correct;
mod estimate;
mod schedule;
mod windows;

use ndarray::{Array2, Array3, Axis as NdAxis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamform::{adaptive_lc, confocal_filter, FocusedReflectionMatrix, MatrixVariant, Side};
use crate::config::AcquisitionConfig;
use crate::distortion::LawOptions;
use crate::error::Result;
use crate::metrics::{confocal_image, f_map, median, FMap, ProfileOptions, ReferenceTable};
use crate::phantom::AberratorSpec;

pub use atlas::{accumulated_law, aperture_mask, law_error, oracle_law_error, AberrationAtlas, SubstepRecord};
pub use correct::{
    apply_correction, apply_input_correction, apply_output_correction, blended_estimator, build_estimator,
};
pub use estimate::{DualFrame, WindowEstimate};
pub use schedule::{default_schedule, validate_schedule, ScheduleStep, SvdType};
pub use windows::{stitch_windows, WindowLayout, TILES_PER_WINDOW};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineOptions {
    pub law: LawOptions,
    pub profile: ProfileOptions,
    /// Remove the phase ramp of off-centre virtual sources.
    pub ramp_removal: bool,
    /// A step is undone when the median F drops by more than this.
    pub rollback_tolerance: f64,
    /// Known aberrator, used only to log law errors.
    #[serde(default)]
    pub oracle: Option<AberratorSpec>,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            law: LawOptions::default(),
            profile: ProfileOptions::default(),
            ramp_removal: true,
            rollback_tolerance: 0.05,
            oracle: None,
        }
    }
}

/// Summary of one step; step 0 describes the input matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub median_f: Option<f64>,
    /// Median intensity FWHM of the CMP profiles (mm).
    pub median_fwhm: Option<f64>,
    pub median_contrast_db: Option<f64>,
    pub valid_cells: f64,
    pub windows: usize,
    /// Windows whose law was applied, receive then transmit.
    pub applied: [usize; 2],
    /// Windows rejected by the trust test, receive then transmit.
    pub gated: [usize; 2],
    /// Pixels reached by no window.
    pub uncovered: usize,
    /// Median receive-law error against the oracle (rad).
    pub law_error: Option<f64>,
    pub rolled_back: bool,
}

impl StepLog {
    fn new(step: usize, fmap: &FMap) -> Self {
        Self {
            step,
            median_f: fmap.median_f(),
            median_fwhm: fmap.median_width(),
            median_contrast_db: fmap.median_contrast(),
            valid_cells: fmap.valid_fraction(),
            windows: 0,
            applied: [0; 2],
            gated: [0; 2],
            uncovered: 0,
            law_error: None,
            rolled_back: false,
        }
    }
}

/// Result of a schedule run.
#[derive(Debug, Clone)]
pub struct CorrectionState {
    /// Corrected matrix, always the raw matrix transformed by the kept
    /// phase-only corrections.
    pub matrix: FocusedReflectionMatrix,
    pub atlas: AberrationAtlas,
    /// F maps before correction and after every step.
    pub f_history: Vec<FMap>,
    pub log: Vec<StepLog>,
}

/// Runs `schedule` on the raw matrix `raw`.
pub fn run_schedule(
    raw: &FocusedReflectionMatrix,
    reference: &ReferenceTable,
    config: &AcquisitionConfig,
    schedule: &[ScheduleStep],
    options: &PipelineOptions,
) -> Result<CorrectionState> {
    validate_schedule(schedule)?;
    let grid = &raw.grid;
    let mut current = raw.clone();
    let mut fmap = f_map(&current, reference, config, &options.profile)?;
    let mut atlas = AberrationAtlas::default();
    let mut f_history = vec![fmap.clone()];
    let mut log = vec![StepLog::new(0, &fmap)];
    let insonified = insonified_field(raw);

    for step in schedule {
        let before = (current.clone(), fmap.clone());
        let layout = WindowLayout::new(grid, step.window)?;
        let mut entry = StepLog { windows: layout.len(), ..StepLog::new(step.index, &fmap) };
        for (s, side) in [Side::Output, Side::Input].into_iter().enumerate() {
            let frame = DualFrame::new(step.basis(side), side, grid, config)?;
            let lc = adaptive_lc(&fmap.pixel_width(grid), grid, config, step.filter_factor)?;
            let filtered = confocal_filter(&current, &lc)?;
            let spec = estimate::SubstepSpec {
                frame: &frame,
                side,
                svd_type: step.svd_type,
                layout: &layout,
                law: &options.law,
                ramp: options.ramp_removal,
                insonified: &insonified,
            };
            let estimates = estimate::estimate_substep(&filtered, &spec, config, &fmap)?;
            drop(filtered);
            let record = SubstepRecord { step: step.index, side, frame, layout: layout.clone(), estimates, rolled_back: false };
            let (corrected, uncovered) = apply_record(&current, &record, config)?;
            entry.applied[s] = record.estimates.iter().filter(|e| e.usable()).count();
            entry.gated[s] = record.estimates.iter().filter(|e| e.law.valid && !e.passed_gate).count();
            entry.uncovered += uncovered;
            current = corrected;
            fmap = f_map(&current, reference, config, &options.profile)?;
            atlas.substeps.push(record);
        }
        let (m0, m1) = (before.1.median_f(), fmap.median_f());
        let dropped = match (m0, m1) {
            (Some(a), Some(b)) => b < a - options.rollback_tolerance,
            (Some(_), None) => true,
            _ => false,
        };
        if dropped {
            (current, fmap) = before;
            let n = atlas.substeps.len();
            atlas.substeps[n - 2..].iter_mut().for_each(|r| r.rolled_back = true);
            entry.rolled_back = true;
        }
        let after = StepLog::new(step.index, &fmap);
        entry.median_f = after.median_f;
        entry.median_fwhm = after.median_fwhm;
        entry.median_contrast_db = after.median_contrast_db;
        entry.valid_cells = after.valid_cells;
        if let Some(oracle) = &options.oracle {
            let centers: Vec<[f64; 2]> = (0..layout.len()).map(|w| layout.center(w)).collect();
            entry.law_error = oracle_law_error(&atlas, oracle, Side::Output, &centers, config)?;
        }
        f_history.push(fmap.clone());
        log.push(entry);
    }
    current.variant = MatrixVariant::Corrected;
    Ok(CorrectionState { matrix: current, atlas, f_history, log })
}

/// Pixels whose raw confocal intensity exceeds 1e-9 of the median; the rest
/// lie outside the field any transmit-receive pair reaches.
pub fn insonified_field(raw: &FocusedReflectionMatrix) -> Array2<bool> {
    let image = confocal_image(raw);
    let floor = 1e-9 * median(image.iter().copied()).unwrap_or(0.0);
    image.mapv(|v| v > floor)
}

/// Applies the blended law of a substep to every depth of `r`; returns the
/// corrected matrix and the number of pixels no window reached.
pub fn apply_record(
    r: &FocusedReflectionMatrix,
    record: &SubstepRecord,
    config: &AcquisitionConfig,
) -> Result<(FocusedReflectionMatrix, usize)> {
    let grid = &r.grid;
    let window_t: Vec<Vec<Complex64>> = record
        .estimates
        .iter()
        .map(|e| record.frame.expand(e.usable().then_some(&e.law)))
        .collect();
    let nrows = record.frame.coords.len();
    let slices: Vec<(Array2<Complex64>, usize)> = (0..grid.nz())
        .into_par_iter()
        .map(|iz| {
            let z = grid.z[iz];
            let b0 = record.frame.geometric(z, grid, config)?;
            let mut uncovered = 0;
            let mut t = Array2::from_elem((nrows, grid.nx()), Complex64::new(1.0, 0.0));
            for (ix, &x) in grid.x.iter().enumerate() {
                let w = record.layout.weights(x, z);
                if w.is_empty() {
                    uncovered += 1;
                    continue;
                }
                let mut col = t.column_mut(ix);
                col.fill(Complex64::new(0.0, 0.0));
                for (win, c) in w {
                    col.iter_mut().zip(&window_t[win]).for_each(|(a, b)| *a += b * c);
                }
            }
            let b1 = blended_estimator(&b0, &t)?;
            let out = apply_correction(record.side, &r.slice(iz), &b0, &b1)?;
            Ok((out.values, uncovered))
        })
        .collect::<Result<_>>()?;
    let mut data = Array3::<Complex64>::zeros(r.data.dim());
    let mut uncovered = 0;
    for (iz, (s, u)) in slices.into_iter().enumerate() {
        data.index_axis_mut(NdAxis(0), iz).assign(&s);
        uncovered += u;
    }
    Ok((FocusedReflectionMatrix { data, variant: MatrixVariant::Corrected, ..r.clone() }, uncovered))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ImageGrid;
    use crate::distortion::AberrationLaw;
    use crate::field::Basis;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ImageGrid, AcquisitionConfig) {
        let mut c = AcquisitionConfig::desk();
        c.num_elements = 24;
        (ImageGrid::new(-4.0, 0.25, 32, 8.0, 0.5, 12).unwrap(), c)
    }

    fn random_matrix(grid: &ImageGrid, seed: u64) -> FocusedReflectionMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array3::from_shape_fn((grid.nz(), grid.nx(), grid.nx()), |_| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        FocusedReflectionMatrix { grid: grid.clone(), variant: MatrixVariant::Raw, data, mask_width: None, dropped: 0 }
    }

    fn record(grid: &ImageGrid, config: &AcquisitionConfig, side: Side, basis: Basis, size: [f64; 2], seed: u64) -> SubstepRecord {
        let frame = DualFrame::new(basis, side, grid, config).unwrap();
        let layout = WindowLayout::new(grid, size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = frame.analysed_coords();
        let estimates = (0..layout.len())
            .map(|w| {
                let law = AberrationLaw {
                    phase: coords.iter().map(|_| rng.random_range(-2.0..2.0)).collect(),
                    ..AberrationLaw::flat(basis, side, layout.center(w), coords.clone())
                };
                WindowEstimate { law, n_in: 100, n_independent: 100.0, width_ratio: 1.0, passed_gate: true, covered: true }
            })
            .collect();
        SubstepRecord { step: 1, side, frame, layout, estimates, rolled_back: false }
    }

    #[test]
    fn insonified_field_marks_only_silent_pixels() {
        let (g, _) = small();
        let mut r = random_matrix(&g, 4);
        r.data[[2, 5, 5]] = Complex64::new(0.0, 0.0);
        r.data[[7, 0, 0]] = Complex64::new(1e-9, 0.0);
        let lit = insonified_field(&r);
        assert!(!lit[[2, 5]] && !lit[[7, 0]]);
        assert_eq!(lit.iter().filter(|v| !**v).count(), 2);
    }

    #[test]
    fn blended_correction_equals_stitched_window_corrections() {
        let (g, c) = small();
        let r = random_matrix(&g, 1);
        for (side, basis) in [(Side::Output, Basis::Transducer), (Side::Input, Basis::PlaneWave)] {
            let rec = record(&g, &c, side, basis, [3.0, 3.0], 2);
            let (blended, uncovered) = apply_record(&r, &rec, &c).unwrap();
            assert_eq!(uncovered, 0);
            // each window alone, applied everywhere, then overlap-added
            let singles: Vec<FocusedReflectionMatrix> = (0..rec.layout.len())
                .map(|w| {
                    let mut one = rec.clone();
                    one.layout = WindowLayout::new(&g, [100.0, 100.0]).unwrap();
                    one.estimates = vec![rec.estimates[w].clone()];
                    apply_record(&r, &one, &c).unwrap().0
                })
                .collect();
            let (stitched, _) = stitch_windows(&singles, &vec![true; singles.len()], &rec.layout, side, &r).unwrap();
            let diff = blended.data.iter().zip(stitched.data.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(diff < 1e-10, "{side:?} {diff}");
        }
    }

    #[test]
    fn unusable_windows_apply_no_law() {
        let (g, c) = small();
        let r = random_matrix(&g, 3);
        let mut rec = record(&g, &c, Side::Output, Basis::Transducer, [3.0, 3.0], 4);
        rec.estimates.iter_mut().for_each(|e| e.passed_gate = false);
        let (a, _) = apply_record(&r, &rec, &c).unwrap();
        rec.estimates.iter_mut().for_each(|e| {
            e.passed_gate = true;
            e.law.phase.iter_mut().for_each(|p| *p = 0.0);
        });
        let (b, _) = apply_record(&r, &rec, &c).unwrap();
        assert!(a.data.iter().zip(b.data.iter()).all(|(x, y)| (x - y).norm() < 1e-12));
    }

    #[test]
    fn flat_record_is_idempotent_after_one_pass() {
        let (g, c) = small();
        let r = random_matrix(&g, 5);
        for (side, basis) in [(Side::Output, Basis::PlaneWave), (Side::Input, Basis::Transducer)] {
            let mut rec = record(&g, &c, side, basis, [3.0, 3.0], 6);
            rec.estimates.iter_mut().for_each(|e| e.law.phase.iter_mut().for_each(|p| *p = 0.0));
            let (once, _) = apply_record(&r, &rec, &c).unwrap();
            let (twice, _) = apply_record(&once, &rec, &c).unwrap();
            let diff = once.data.iter().zip(twice.data.iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(diff < 1e-10);
        }
    }
}

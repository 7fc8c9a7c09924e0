//! The subcommands. Each reads one container (or a config), runs library
//! operations and writes a new container.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use umi_core::beamform::{das_focus, FocusedReflectionMatrix, MatrixVariant};
use umi_core::metrics::{
    cmp_profile, confocal_image, contrast, f_map, isoplanatic_svd, to_db, AtlasColumn, CellLayout, FMap, ProfileOptions,
    ReferenceTable,
};
use umi_core::optics::ideal_resolution;
use umi_core::phantom::{add_ms_noise, ground_truth_law, synthesize_raw, AberratorSpec, PulseSpec};
use umi_core::pipeline::{run_schedule, AberrationAtlas, ScheduleStep, StepLog, WindowLayout};
use umi_core::signal::analytic_signal;
use umi_core::{Basis, ImageGrid, RawCube};

use crate::config::{GridSpec, RunConfig};
use crate::container::{AxisMeta, Container, Writer};
use crate::error::{CliError, Result};
use crate::export::{csv_bytes, gray_png, json_lines, pretty_json};

pub const STEPLOG: &str = "steplog.jsonl";
pub const ATLAS: &str = "atlas.json";
pub const SUMMARY: &str = "summary.json";

fn open_kind(dir: &Path, kinds: &[&str]) -> Result<Container> {
    let c = Container::open(dir)?;
    if !kinds.contains(&c.manifest.kind.as_str()) {
        return Err(CliError::Validation(format!(
            "{} is a {} container, expected {}",
            dir.display(),
            c.manifest.kind,
            kinds.join(" or ")
        )));
    }
    Ok(c)
}

fn grid_axes(grid: &ImageGrid) -> (AxisMeta, AxisMeta) {
    (AxisMeta::listed("z", "mm", &grid.z), AxisMeta::listed("x", "mm", &grid.x))
}

fn cell_axes(cells: &CellLayout) -> Vec<AxisMeta> {
    vec![AxisMeta::listed("cell_z", "mm", &cells.z), AxisMeta::listed("cell_x", "mm", &cells.x)]
}

fn put_map(w: &mut Writer, name: &str, axes: Vec<AxisMeta>, map: &Array2<f64>) -> Result<()> {
    let (a, b) = map.dim();
    w.put_f32(name, &[a, b], axes, map.iter().copied())
}

fn put_matrix(w: &mut Writer, name: &str, r: &FocusedReflectionMatrix) -> Result<()> {
    let (nz, nx, _) = r.data.dim();
    let (z, x) = grid_axes(&r.grid);
    let axes = vec![z, AxisMeta { name: "x_out".into(), ..x.clone() }, AxisMeta { name: "x_in".into(), ..x }];
    w.put_c64(name, &[nz, nx, nx], axes, r.data.iter().copied())?;
    let (z, x) = grid_axes(&r.grid);
    put_map(w, &format!("confocal_{}", name.trim_start_matches("focused_")), vec![z, x], &confocal_image(r))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct MatrixMeta {
    mask_width: Option<f64>,
    dropped: usize,
}

fn load_matrix(c: &Container, name: &str, grid: &ImageGrid, variant: MatrixVariant) -> Result<FocusedReflectionMatrix> {
    let (shape, values) = c.get_c64(name)?;
    let (nz, nx) = (grid.nz(), grid.nx());
    if shape != [nz, nx, nx] {
        return Err(CliError::Validation(format!("array {name} has shape {shape:?}, the grid needs [{nz}, {nx}, {nx}]")));
    }
    let data = Array3::from_shape_vec((nz, nx, nx), values.iter().map(|v| Complex64::new(v.re as f64, v.im as f64)).collect())
        .expect("shape checked");
    let meta: MatrixMeta = c.meta("matrix")?;
    Ok(FocusedReflectionMatrix { grid: grid.clone(), variant, data, mask_width: meta.mask_width, dropped: meta.dropped })
}

fn load_reference(c: &Container, grid: &ImageGrid, opts: &ProfileOptions) -> Result<ReferenceTable> {
    let cells = CellLayout::new(grid, opts.cell);
    let (shape, values) = c.get_f32("reference_width")?;
    if shape != [cells.z.len(), cells.x.len()] {
        return Err(CliError::Validation(format!("reference_width has shape {shape:?}, the cell layout needs {:?}", cells.dim())));
    }
    let width = Array2::from_shape_vec(cells.dim(), values.iter().map(|&v| v as f64).collect()).expect("shape checked");
    Ok(ReferenceTable { cells, width })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RfMeta {
    sampling_frequency: f64,
    t0: f64,
    truncated: usize,
}

/// Channel data plus ground-truth laws at the window centres of the last
/// schedule step.
pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<Container> {
    cfg.validate()?;
    let acq = &cfg.acquisition;
    let aberrator = cfg.aberrator.resolve(acq)?;
    let pulse = PulseSpec::from_config(acq);
    let mut raw = synthesize_raw(&cfg.phantom, &aberrator, &pulse, acq)?;
    if let Some(noise) = &cfg.noise {
        raw = add_ms_noise(&raw, noise, &pulse, acq)?;
    }
    let mut w = Writer::create(out, "simulate", cfg.to_value(), None)?;
    let (nu, nth, nt) = raw.data.dim();
    let axes = vec![
        AxisMeta::listed("element", "mm", &acq.element_positions()),
        AxisMeta::listed("angle", "rad", &acq.transmit_angles),
        AxisMeta::uniform("time", "s", raw.t0, 1.0 / raw.sampling_frequency),
    ];
    w.put_f32("rf", &[nu, nth, nt], axes, raw.data.iter().copied())?;
    w.meta("rf", RfMeta { sampling_frequency: raw.sampling_frequency, t0: raw.t0, truncated: raw.truncated })?;
    w.meta("aberrator", &aberrator)?;

    if let Some(last) = cfg.schedule.last() {
        let grid = cfg.grid.build()?;
        let layout = WindowLayout::new(&grid, last.window)?;
        let centers: Vec<[f64; 2]> = (0..layout.len()).map(|i| layout.center(i)).collect();
        let nw = centers.len();
        let centre_axes = |second: AxisMeta| vec![AxisMeta::index("window"), second];
        w.put_f32("truth_centers", &[nw, 2], centre_axes(AxisMeta::index("x_z")), centers.iter().flatten().copied())?;
        for (name, basis, coords, unit) in [
            ("truth_transducer", Basis::Transducer, acq.element_positions(), "mm"),
            ("truth_plane_wave", Basis::PlaneWave, acq.transmit_angles.clone(), "rad"),
        ] {
            let mut values = Vec::with_capacity(nw * coords.len());
            for c in &centers {
                values.extend(ground_truth_law(&aberrator, acq, basis, c[0], c[1])?.phase);
            }
            let axis = AxisMeta::listed(if unit == "mm" { "element" } else { "angle" }, unit, &coords);
            w.put_f32(name, &[nw, coords.len()], centre_axes(axis), values)?;
        }
    }
    w.finish()
}

fn load_rf(c: &Container, cfg: &RunConfig) -> Result<RawCube> {
    let (shape, values) = c.get_f32("rf")?;
    let acq = &cfg.acquisition;
    if shape.len() != 3 || shape[0] != acq.num_elements || shape[1] != acq.transmit_angles.len() {
        return Err(CliError::Validation(format!("rf has shape {shape:?}, which does not fit the acquisition")));
    }
    let meta: RfMeta = c.meta("rf")?;
    let data = Array3::from_shape_vec((shape[0], shape[1], shape[2]), values.iter().map(|&v| v as f64).collect())
        .expect("shape checked");
    Ok(RawCube { data, sampling_frequency: meta.sampling_frequency, t0: meta.t0, truncated: meta.truncated })
}

/// Focused reflection matrix of the channel data, and the reference widths
/// of an aberration-free simulation of the same phantom kind.
pub fn beamform(input: &Path, out: &Path, grid: Option<GridSpec>, fnumber: Option<f64>) -> Result<Container> {
    let src = open_kind(input, &["simulate"])?;
    let mut cfg = RunConfig::from_value(&src.manifest.config)?;
    if let Some(g) = grid {
        cfg.grid = g;
    }
    if let Some(f) = fnumber {
        cfg.apodization.fnumber = f;
    }
    cfg.validate()?;
    let acq = &cfg.acquisition;
    let grid = cfg.grid.build()?;
    let raw = load_rf(&src, &cfg)?;
    let mut r = das_focus(&analytic_signal(&raw)?, &grid, acq, &cfg.apodization)?;
    // downstream stages see the stored single-precision values
    r.data.mapv_inplace(|v| Complex64::new(v.re as f32 as f64, v.im as f32 as f64));

    let mut phantom = cfg.phantom.clone();
    phantom.seed = cfg.reference.seed;
    let reference_rf = synthesize_raw(&phantom, &AberratorSpec::None, &PulseSpec::from_config(acq), acq)?;
    let reference = das_focus(&analytic_signal(&reference_rf)?, &grid, acq, &cfg.apodization)?;
    let table = ReferenceTable::from_matrix(&reference, &cfg.pipeline.profile)?;
    if !table.width.iter().any(|v| v.is_finite()) {
        return Err(CliError::Numerical("no cell of the reference image has a measurable width".into()));
    }

    let mut w = Writer::create(out, "beamform", cfg.to_value(), Some(&src))?;
    put_matrix(&mut w, "focused_raw", &r)?;
    put_map(&mut w, "reference_width", cell_axes(&table.cells), &table.width)?;
    w.meta("matrix", MatrixMeta { mask_width: r.mask_width, dropped: r.dropped })?;
    w.finish()
}

/// Per-substep view of the atlas without the law vectors, which are stored
/// as arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubstepSummary {
    pub step: usize,
    pub side: umi_core::beamform::Side,
    pub basis: Basis,
    pub rolled_back: bool,
    pub window_size: [f64; 2],
    pub windows: Vec<WindowSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindowSummary {
    pub center: [f64; 2],
    pub valid: bool,
    pub passed_gate: bool,
    pub covered: bool,
    pub ramp_corrected: bool,
    pub ambiguous: bool,
    pub shift: f64,
    pub n_in: usize,
    pub width_ratio: f64,
}

fn put_atlas(w: &mut Writer, atlas: &AberrationAtlas, cfg: &RunConfig) -> Result<()> {
    let mut summary = Vec::new();
    for (i, rec) in atlas.substeps.iter().enumerate() {
        let nw = rec.estimates.len();
        let coords = rec.estimates.first().map_or(&rec.frame.coords, |e| &e.law.coords);
        if rec.estimates.iter().any(|e| e.law.coords != *coords) {
            return Err(CliError::Validation(format!("substep {i}: windows disagree on the analysed rows")));
        }
        let unit = if rec.frame.basis == Basis::PlaneWave { "rad/mm" } else { "mm" };
        let axes = vec![AxisMeta::index("window"), AxisMeta::listed("dual", unit, coords)];
        let phase = rec.estimates.iter().flat_map(|e| e.law.phase.iter().zip(&e.law.support).map(|(p, s)| if *s { *p } else { f64::NAN }));
        w.put_f32(&format!("law_{i}_phase"), &[nw, coords.len()], axes, phase)?;
        let m = rec.estimates.iter().map(|e| e.law.singular_values.len()).max().unwrap_or(0);
        let spectrum = rec.estimates.iter().flat_map(|e| (0..m).map(|k| e.law.singular_values.get(k).copied().unwrap_or(f64::NAN)));
        w.put_f32(&format!("law_{i}_spectrum"), &[nw, m], vec![AxisMeta::index("window"), AxisMeta::index("component")], spectrum)?;
        summary.push(SubstepSummary {
            step: rec.step,
            side: rec.side,
            basis: rec.frame.basis,
            rolled_back: rec.rolled_back,
            window_size: rec.layout.size,
            windows: rec
                .estimates
                .iter()
                .map(|e| WindowSummary {
                    center: e.law.center,
                    valid: e.law.valid,
                    passed_gate: e.passed_gate,
                    covered: e.covered,
                    ramp_corrected: e.law.ramp_corrected,
                    ambiguous: e.law.ambiguous,
                    shift: e.law.shift,
                    n_in: e.n_in,
                    width_ratio: e.width_ratio,
                })
                .collect(),
        });
    }
    w.put_file(ATLAS, &pretty_json(&summary)?)?;

    let columns = atlas.columns(&cfg.acquisition);
    if let Some(first) = columns.first() {
        let nw = columns.len();
        let ne = first.input.len();
        let elements = AxisMeta::listed("element", "mm", &cfg.acquisition.element_positions());
        let axes = || vec![AxisMeta::index("window"), elements.clone()];
        w.put_f32("atlas_input", &[nw, ne], axes(), columns.iter().flat_map(|c| c.input.clone()))?;
        w.put_f32("atlas_output", &[nw, ne], axes(), columns.iter().flat_map(|c| c.output.clone()))?;
        w.put_f32("atlas_centers", &[nw, 2], vec![AxisMeta::index("window"), AxisMeta::index("x_z")], columns.iter().flat_map(|c| c.center))?;
        w.put_f32("atlas_valid", &[nw], vec![AxisMeta::index("window")], columns.iter().map(|c| if c.valid { 1.0 } else { 0.0 }))?;
    }
    Ok(())
}

/// Runs the correction schedule. `steps` keeps only the first steps;
/// `schedule` replaces the configured one.
pub fn correct(input: &Path, out: &Path, steps: Option<usize>, schedule: Option<Vec<ScheduleStep>>) -> Result<Container> {
    let src = open_kind(input, &["beamform"])?;
    let mut cfg = RunConfig::from_value(&src.manifest.config)?;
    if let Some(s) = schedule {
        cfg.schedule = s;
    }
    if let Some(n) = steps {
        if n > cfg.schedule.len() {
            return Err(CliError::Validation(format!("--steps {n} exceeds the {} steps of the schedule", cfg.schedule.len())));
        }
        cfg.schedule.truncate(n);
    }
    if cfg.pipeline.oracle.is_none() {
        let known = cfg.aberrator.resolve(&cfg.acquisition)?;
        if known != AberratorSpec::None {
            cfg.pipeline.oracle = Some(known);
        }
    }
    cfg.validate()?;
    let grid = cfg.grid.build()?;
    let raw = load_matrix(&src, "focused_raw", &grid, MatrixVariant::Raw)?;
    let table = load_reference(&src, &grid, &cfg.pipeline.profile)?;
    let state = run_schedule(&raw, &table, &cfg.acquisition, &cfg.schedule, &cfg.pipeline)?;

    let mut w = Writer::create(out, "correct", cfg.to_value(), Some(&src))?;
    put_matrix(&mut w, "focused_corrected", &state.matrix)?;
    w.meta("matrix", MatrixMeta { mask_width: state.matrix.mask_width, dropped: state.matrix.dropped })?;
    for (k, fmap) in state.f_history.iter().enumerate() {
        put_map(&mut w, &format!("f_step{k}"), cell_axes(&fmap.cells), &fmap.f)?;
        put_map(&mut w, &format!("fwhm_step{k}"), cell_axes(&fmap.cells), &fmap.width)?;
    }
    w.put_file(STEPLOG, &json_lines(&state.log)?)?;
    put_atlas(&mut w, &state.atlas, &cfg)?;
    w.finish()
}

/// Median summary of one F map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSummary {
    pub median_f: Option<f64>,
    pub median_fwhm: Option<f64>,
    pub median_contrast_db: Option<f64>,
    pub valid_cells: f64,
}

/// CMP measurement over one rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaSummary {
    /// x0, z0, width, height (mm).
    pub area: [f64; 4],
    pub reference_fwhm: Option<f64>,
    pub fwhm: Option<f64>,
    pub fwhm_quarter: Option<f64>,
    pub focusing_factor: Option<f64>,
    pub contrast_db: Option<f64>,
    pub status: Option<umi_core::metrics::InvalidReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoplanaticSummary {
    pub singular_values: Vec<f64>,
    pub normalized: Vec<f64>,
    pub entropy_bits: f64,
    pub windows: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    /// Keyed by matrix: `raw`, and `corrected` when present.
    pub images: std::collections::BTreeMap<String, ImageSummary>,
    pub areas: std::collections::BTreeMap<String, AreaSummary>,
    pub isoplanatic: Option<IsoplanaticSummary>,
    /// Why no decomposition was made.
    pub isoplanatic_note: Option<String>,
}

#[derive(Serialize)]
struct CellRow {
    z: f64,
    x: f64,
    reference_fwhm: f64,
    f: f64,
    fwhm: f64,
    fwhm_quarter: f64,
    contrast_db: f64,
    status: String,
}

fn cell_rows(fmap: &FMap, table: &ReferenceTable) -> Vec<CellRow> {
    let mut rows = Vec::new();
    for (iz, &z) in fmap.cells.z.iter().enumerate() {
        for (ix, &x) in fmap.cells.x.iter().enumerate() {
            let status = match fmap.status[[iz, ix]] {
                Some(r) => serde_json::to_value(r).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                None => "ok".into(),
            };
            rows.push(CellRow {
                z,
                x,
                reference_fwhm: table.width[[iz, ix]],
                f: fmap.f[[iz, ix]],
                fwhm: fmap.width[[iz, ix]],
                fwhm_quarter: fmap.width_quarter[[iz, ix]],
                contrast_db: fmap.contrast[[iz, ix]],
                status,
            });
        }
    }
    rows
}

#[derive(Serialize)]
struct ProfileRow {
    lag: f64,
    intensity: f64,
}

#[derive(Serialize)]
struct SpectrumRow {
    substep: usize,
    window: usize,
    component: usize,
    singular_value: f64,
}

/// Leading singular values kept per window in `spectra.csv`.
const SPECTRUM_ROWS: usize = 8;

fn area_summary(
    r: &FocusedReflectionMatrix,
    table: &ReferenceTable,
    area: [f64; 4],
    cfg: &RunConfig,
) -> Result<(AreaSummary, Vec<ProfileRow>)> {
    let [x0, z0, dx, dz] = area;
    let center = [x0 + dx / 2.0, z0 + dz / 2.0];
    let opts = ProfileOptions { cell: [dx, dz], ..cfg.pipeline.profile };
    let p = cmp_profile(r, center, &opts)?;
    let inside = |v: f64, lo: f64, len: f64| v >= lo && v <= lo + len;
    let mut refs: Vec<f64> = Vec::new();
    for (iz, &z) in table.cells.z.iter().enumerate() {
        for (ix, &x) in table.cells.x.iter().enumerate() {
            let w = table.width[[iz, ix]];
            if inside(x, x0, dx) && inside(z, z0, dz) && w.is_finite() {
                refs.push(w);
            }
        }
    }
    refs.sort_by(f64::total_cmp);
    let reference_fwhm = (!refs.is_empty()).then(|| refs[refs.len() / 2]);
    let fwhm = if p.is_valid() { p.fwhm() } else { None };
    let d0 = ideal_resolution(center[0], center[1], &cfg.acquisition)?;
    let i0 = p.intensity[p.lags.len() / 2];
    let summary = AreaSummary {
        area,
        reference_fwhm,
        fwhm,
        fwhm_quarter: if p.is_valid() { p.width_at(0.25) } else { None },
        focusing_factor: reference_fwhm.zip(fwhm).map(|(a, b)| a / b),
        contrast_db: (i0 > 0.0).then(|| contrast(&p, d0)).filter(|c| c.is_finite()),
        status: p.status,
    };
    let rows = p.lags.iter().zip(&p.intensity).map(|(&lag, &intensity)| ProfileRow { lag, intensity }).collect();
    Ok((summary, rows))
}

/// Images, per-cell tables, optional area measurement and the isoplanatic
/// decomposition of a beamform or correct container.
pub fn metrics(input: &Path, out: &Path, area: Option<[f64; 4]>) -> Result<Container> {
    let src = open_kind(input, &["beamform", "correct"])?;
    let cfg = RunConfig::from_value(&src.manifest.config)?;
    let grid = cfg.grid.build()?;
    let bf = src.ancestor("beamform")?;
    let table = load_reference(&bf, &grid, &cfg.pipeline.profile)?;
    let mut matrices = vec![("raw", load_matrix(&bf, "focused_raw", &grid, MatrixVariant::Raw)?)];
    if src.has("focused_corrected") {
        matrices.push(("corrected", load_matrix(&src, "focused_corrected", &grid, MatrixVariant::Corrected)?));
    }
    if let Some([_, _, dx, dz]) = area {
        if !(dx > 0.0 && dz > 0.0) {
            return Err(CliError::Validation("--area needs a positive width and height".into()));
        }
    }

    let mut w = Writer::create(out, "metrics", cfg.to_value(), Some(&src))?;
    let mut summary = MetricsSummary {
        images: Default::default(),
        areas: Default::default(),
        isoplanatic: None,
        isoplanatic_note: None,
    };
    let range = cfg.output.dynamic_range_db;
    for (label, r) in &matrices {
        let fmap = f_map(r, &table, &cfg.acquisition, &cfg.pipeline.profile)?;
        summary.images.insert(
            label.to_string(),
            ImageSummary {
                median_f: fmap.median_f(),
                median_fwhm: fmap.median_width(),
                median_contrast_db: fmap.median_contrast(),
                valid_cells: fmap.valid_fraction(),
            },
        );
        let db = to_db(&confocal_image(r), range);
        let (z, x) = grid_axes(&grid);
        put_map(&mut w, &format!("image_db_{label}"), vec![z, x], &db)?;
        put_map(&mut w, &format!("f_{label}"), cell_axes(&fmap.cells), &fmap.f)?;
        w.put_file(&format!("image_{label}.png"), &gray_png(&db, -range, 0.0)?)?;
        w.put_file(&format!("f_{label}.png"), &gray_png(&fmap.f, 0.0, 1.0)?)?;
        w.put_file(&format!("cells_{label}.csv"), &csv_bytes(&cell_rows(&fmap, &table))?)?;
        if let Some(a) = area {
            let (s, rows) = area_summary(r, &table, a, &cfg)?;
            summary.areas.insert(label.to_string(), s);
            w.put_file(&format!("area_profile_{label}.csv"), &csv_bytes(&rows)?)?;
        }
    }

    if src.has("atlas_input") {
        let (shape, input) = src.get_f32("atlas_input")?;
        let (_, output) = src.get_f32("atlas_output")?;
        let (_, centers) = src.get_f32("atlas_centers")?;
        let (_, valid) = src.get_f32("atlas_valid")?;
        let ne = shape[1];
        let columns: Vec<AtlasColumn> = (0..shape[0])
            .map(|i| AtlasColumn {
                center: [centers[2 * i] as f64, centers[2 * i + 1] as f64],
                input: input[i * ne..(i + 1) * ne].iter().map(|&v| v as f64).collect(),
                output: output[i * ne..(i + 1) * ne].iter().map(|&v| v as f64).collect(),
                valid: valid[i] > 0.5,
            })
            .collect();
        match isoplanatic_svd(&columns, &grid) {
            Ok(d) => {
                for (p, map) in d.patch_maps.iter().enumerate() {
                    let mag = map.mapv(|v| v.norm());
                    let peak = mag.iter().copied().fold(0.0, f64::max);
                    let (z, x) = grid_axes(&grid);
                    put_map(&mut w, &format!("patch_{p}"), vec![z, x], &mag)?;
                    w.put_file(&format!("patch_{p}.png"), &gray_png(&mag, 0.0, peak)?)?;
                }
                summary.isoplanatic = Some(IsoplanaticSummary {
                    singular_values: d.singular_values.clone(),
                    normalized: d.normalized.clone(),
                    entropy_bits: d.entropy,
                    windows: d.centers.len(),
                    dropped: d.dropped,
                });
            }
            Err(umi_core::UmiError::InvalidInput(m)) => summary.isoplanatic_note = Some(m),
            Err(e) => return Err(e.into()),
        }
        let substeps = src
            .manifest
            .arrays
            .keys()
            .filter_map(|k| k.strip_prefix("law_")?.strip_suffix("_spectrum")?.parse::<usize>().ok())
            .max()
            .map_or(0, |m| m + 1);
        let mut rows = Vec::new();
        for s in 0..substeps {
            let (shape, spectrum) = src.get_f32(&format!("law_{s}_spectrum"))?;
            for win in 0..shape[0] {
                for k in 0..shape[1].min(SPECTRUM_ROWS) {
                    let v = spectrum[win * shape[1] + k];
                    if v.is_finite() {
                        rows.push(SpectrumRow { substep: s, window: win, component: k, singular_value: v as f64 });
                    }
                }
            }
        }
        w.put_file("spectra.csv", &csv_bytes(&rows)?)?;
    } else {
        summary.isoplanatic_note = Some("no correction was applied".into());
    }
    w.put_file(SUMMARY, &pretty_json(&summary)?)?;
    w.finish()
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.digits$}"))
}

/// Markdown step table with the focusing factor, the focal-spot width and
/// the contrast of every step.
pub fn step_table(log: &[StepLog]) -> String {
    let mut s = String::from("| Step | F | w (mm) | Contrast (dB) | Applied (rx/tx) | Rolled back |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for e in log {
        let name = if e.step == 0 { "Initial".to_string() } else { e.step.to_string() };
        let applied = if e.step == 0 { "-".to_string() } else { format!("{}/{}", e.applied[0], e.applied[1]) };
        let _ = writeln!(
            s,
            "| {name} | {} | {} | {} | {applied} | {} |",
            cell(e.median_f, 3),
            cell(e.median_fwhm, 3),
            cell(e.median_contrast_db, 2),
            if e.rolled_back { "yes" } else { "no" }
        );
    }
    s
}

pub fn read_steplog(c: &Container) -> Result<Vec<StepLog>> {
    let bytes = c.file(STEPLOG)?;
    let text = String::from_utf8(bytes).map_err(|_| CliError::Validation("step log is not UTF-8".into()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Validation(format!("{STEPLOG}:{}: {e}", i + 1))))
        .collect()
}

/// Markdown summary of a correct or metrics container. Written to `out`, or
/// to `report.md` inside the input directory.
pub fn report(input: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let src = open_kind(input, &["correct", "metrics"])?;
    let cfg = RunConfig::from_value(&src.manifest.config)?;
    let corr = src.ancestor("correct")?;
    let log = read_steplog(&corr)?;
    let path = out.map_or_else(|| input.join("report.md"), Path::to_path_buf);
    let acq = &cfg.acquisition;

    let mut s = String::from("# Matrix imaging report\n\n");
    let _ = writeln!(s, "- Tool version: {}", src.manifest.tool_version);
    let _ = writeln!(
        s,
        "- Array: {} elements at {} mm, {:.1} MHz, {} transmit angles",
        acq.num_elements,
        acq.pitch,
        acq.center_frequency / 1e6,
        acq.transmit_angles.len()
    );
    let _ = writeln!(s, "- Grid: {} x {} pixels, {} steps run", cfg.grid.nx, cfg.grid.nz, cfg.schedule.len());
    let _ = writeln!(s, "- Correction container: `{}` ({})\n", corr.dir.display(), &corr.manifest_sha256[..12]);
    s.push_str("## Steps\n\nMedians over the valid cells of the focusing factor F, the intensity FWHM w of the common-midpoint profile and the confocal-to-background contrast at one resolution cell.\n\n");
    s.push_str(&step_table(&log));

    if src.manifest.kind == "metrics" {
        let summary: MetricsSummary = serde_json::from_slice(&src.file(SUMMARY)?)
            .map_err(|e| CliError::Validation(format!("{SUMMARY}: {e}")))?;
        let link = |name: &str| {
            let target = src.dir.join(name);
            match path.parent() {
                Some(p) if p == src.dir => name.to_string(),
                _ => target.display().to_string(),
            }
        };
        s.push_str("\n## Images\n\n");
        for label in ["raw", "corrected"].into_iter().filter(|l| summary.images.contains_key(*l)) {
            let _ = writeln!(s, "![{label} confocal image]({})\n", link(&format!("image_{label}.png")));
        }
        if !summary.areas.is_empty() {
            s.push_str("## Area\n\n| Matrix | F | w (mm) | Contrast (dB) |\n|---|---|---|---|\n");
            for (label, a) in &summary.areas {
                let _ = writeln!(s, "| {label} | {} | {} | {} |", cell(a.focusing_factor, 3), cell(a.fwhm, 3), cell(a.contrast_db, 2));
            }
        }
        if let Some(iso) = &summary.isoplanatic {
            s.push_str("\n## Isoplanatic patches\n\n");
            let _ = writeln!(s, "Entropy {:.3} bits over {} windows ({} dropped).\n", iso.entropy_bits, iso.windows, iso.dropped);
            let shown = iso.normalized.iter().take(5).map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ");
            let _ = writeln!(s, "Leading normalized singular values: {shown}\n");
            let _ = writeln!(s, "![first patch]({})", link("patch_0.png"));
        } else if let Some(note) = &summary.isoplanatic_note {
            let _ = writeln!(s, "\nNo isoplanatic decomposition: {note}.");
        }
    }
    std::fs::write(&path, s).map_err(CliError::io(path.display().to_string()))?;
    Ok(path)
}

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use serde_json::json;
use tempfile::TempDir;
use umi_cli::commands::{self, MetricsSummary};
use umi_cli::container::Container;
use umi_cli::RunConfig;

/// Eight elements, nine angles and a small grid: seconds per stage.
fn small_config() -> serde_json::Value {
    let angles: Vec<f64> = (0..9).map(|i| (-20.0f64 + 5.0 * i as f64).to_radians()).collect();
    json!({
        "acquisition": {
            "num_elements": 8, "pitch": 0.3, "center_frequency": 4.0e6, "sampling_frequency": 40.0e6,
            "sound_speed": 1540.0, "transmit_angles": angles, "record_duration": 3.0e-5, "pulse_cycles": 3
        },
        "grid": { "x0": -3.0, "dx": 0.15, "nx": 41, "z0": 6.0, "dz": 0.5, "nz": 17 },
        "phantom": { "speckle": { "x_range": [-5, 5], "z_range": [4, 16], "dx": 0.16, "dz": 0.2, "variance": 1.0 }, "seed": 3 },
        "aberrator": { "variant": "gaussian_screen", "rms": 0.5, "correlation_length": 0.6, "seed": 2 },
        "schedule": [
            { "index": 1, "filter_factor": 10, "window": [6.0, 8.0], "transmit_basis": "plane_wave",
              "receive_basis": "transducer", "svd_type": "distortion" },
            { "index": 2, "filter_factor": 8, "window": [3.0, 4.0], "transmit_basis": "transducer",
              "receive_basis": "plane_wave", "svd_type": "normalized_correlation" }
        ],
        "pipeline": {
            "law": { "validity_ratio": 2.0, "support_fraction": 0.1, "min_gap": 0.01, "guard": 0.001 },
            "profile": { "cell": [1.5, 2.0], "lag_half_width": 2.0, "background_fraction": 0.2, "min_prominence_db": 3.0 },
            "ramp_removal": true, "rollback_tolerance": 0.05
        },
        "reference": { "seed": 11 }
    })
}

fn config() -> RunConfig {
    RunConfig::from_json(&small_config().to_string(), "small").unwrap()
}

struct Run {
    _root: TempDir,
    sim: std::path::PathBuf,
    bf: std::path::PathBuf,
    corr: std::path::PathBuf,
    met: std::path::PathBuf,
}

fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let p = |s: &str| root.path().join(s);
        commands::simulate(&config(), &p("sim")).unwrap();
        commands::beamform(&p("sim"), &p("bf"), None, None).unwrap();
        commands::correct(&p("bf"), &p("corr"), None, None).unwrap();
        commands::metrics(&p("corr"), &p("met"), Some([-1.5, 8.0, 3.0, 4.0])).unwrap();
        Run { sim: p("sim"), bf: p("bf"), corr: p("corr"), met: p("met"), _root: root }
    })
}

fn array_hashes(dir: &Path) -> Vec<(String, String)> {
    let c = Container::open(dir).unwrap();
    c.manifest.arrays.iter().map(|(k, v)| (k.clone(), v.sha256.clone())).collect()
}

#[test]
fn simulate_writes_rf_and_truth() {
    let c = Container::open(&run().sim).unwrap();
    c.verify().unwrap();
    assert!(run().sim.join("rf.bin").is_file());
    let rf = c.entry("rf").unwrap();
    assert_eq!(rf.shape[..2], [8, 9]);
    assert_eq!(rf.byte_length, 4 * rf.shape.iter().product::<usize>() as u64);
    assert!(c.has("truth_transducer") && c.has("truth_plane_wave"));
    assert_eq!(RunConfig::from_value(&c.manifest.config).unwrap(), config());
    assert!(c.manifest.tool_version.starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn same_seed_gives_identical_containers() {
    let dir = tempfile::tempdir().unwrap();
    commands::simulate(&config(), &dir.path().join("again")).unwrap();
    assert_eq!(array_hashes(&run().sim), array_hashes(&dir.path().join("again")));
    let a = std::fs::read(run().sim.join("manifest.json")).unwrap();
    let b = std::fs::read(dir.path().join("again/manifest.json")).unwrap();
    assert_eq!(a, b);

    let mut other = config();
    other.phantom.seed = 4;
    commands::simulate(&other, &dir.path().join("other")).unwrap();
    assert_ne!(array_hashes(&run().sim)[0], array_hashes(&dir.path().join("other"))[0]);
}

#[test]
fn downstream_stages_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    commands::correct(&run().bf, &dir.path().join("corr"), None, None).unwrap();
    assert_eq!(array_hashes(&run().corr), array_hashes(&dir.path().join("corr")));
}

#[test]
fn reloaded_arrays_equal_the_written_ones() {
    let c = Container::open(&run().sim).unwrap();
    let (shape, rf) = c.get_f32("rf").unwrap();
    let cfg = config();
    let aberrator = cfg.aberrator.resolve(&cfg.acquisition).unwrap();
    let pulse = umi_core::phantom::PulseSpec::from_config(&cfg.acquisition);
    let raw = umi_core::phantom::synthesize_raw(&cfg.phantom, &aberrator, &pulse, &cfg.acquisition).unwrap();
    assert_eq!(shape, raw.data.shape());
    assert!(raw.data.iter().zip(&rf).all(|(a, b)| *a as f32 == *b));
}

#[test]
fn containers_record_their_parents() {
    let corr = Container::open(&run().corr).unwrap();
    let bf = corr.parent().unwrap().unwrap();
    assert_eq!(bf.manifest.kind, "beamform");
    assert_eq!(corr.ancestor("simulate").unwrap().dir, run().sim);
    let cfg = RunConfig::from_value(&corr.manifest.config).unwrap();
    assert!(cfg.pipeline.oracle.is_some());
}

#[test]
fn zero_steps_pass_the_raw_matrix_through() {
    let dir = tempfile::tempdir().unwrap();
    let c = commands::correct(&run().bf, &dir.path().join("c0"), Some(0), None).unwrap();
    let bf = Container::open(&run().bf).unwrap();
    assert_eq!(c.entry("focused_corrected").unwrap().sha256, bf.entry("focused_raw").unwrap().sha256);
    assert_eq!(c.entry("confocal_corrected").unwrap().sha256, bf.entry("confocal_raw").unwrap().sha256);
    let log = commands::read_steplog(&c).unwrap();
    assert_eq!(log.len(), 1);
    let m = commands::metrics(&dir.path().join("c0"), &dir.path().join("m0"), None).unwrap();
    let s: MetricsSummary = serde_json::from_slice(&m.file("summary.json").unwrap()).unwrap();
    assert_eq!(s.images["raw"], s.images["corrected"]);
}

#[test]
fn correction_log_and_metrics_are_consistent() {
    let corr = Container::open(&run().corr).unwrap();
    let log = commands::read_steplog(&corr).unwrap();
    assert_eq!(log.len(), 3);
    let met = Container::open(&run().met).unwrap();
    met.verify().unwrap();
    let s: MetricsSummary = serde_json::from_slice(&met.file("summary.json").unwrap()).unwrap();
    let (first, last) = (&log[0], log.last().unwrap());
    let close = |a: Option<f64>, b: Option<f64>| match (a, b) {
        (Some(a), Some(b)) => (a - b).abs() < 1e-3 * a.abs().max(1.0),
        (None, None) => true,
        _ => false,
    };
    // the metrics stage re-measures from single-precision arrays
    assert!(close(s.images["raw"].median_f, first.median_f), "{:?} vs {:?}", s.images["raw"], first);
    assert!(close(s.images["corrected"].median_f, last.median_f), "{:?} vs {:?}", s.images["corrected"], last);
    assert!(s.areas.contains_key("raw") && s.areas.contains_key("corrected"));
    for f in ["image_raw.png", "image_corrected.png", "cells_raw.csv", "spectra.csv", "area_profile_raw.csv"] {
        assert!(met.manifest.files.contains_key(f), "{f}");
    }
}

#[test]
fn report_table_has_the_step_columns() {
    let path = commands::report(&run().met, None).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    assert!(text.contains("| Step | F | w (mm) | Contrast (dB) |"), "{text}");
    assert!(text.contains("| Initial |"));
    assert!(text.contains("| 2 |"));
    assert!(text.contains("image_corrected.png"));
}

#[test]
fn grid_and_fnumber_flags_reach_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let grid = umi_cli::config::GridSpec::parse("-1.5,0.15,21,8,0.5,9").unwrap();
    let c = commands::beamform(&run().sim, &dir.path().join("bf"), Some(grid), Some(1.5)).unwrap();
    let cfg = RunConfig::from_value(&c.manifest.config).unwrap();
    assert_eq!(cfg.grid, grid);
    assert_eq!(cfg.apodization.fnumber, 1.5);
    assert_eq!(c.entry("focused_raw").unwrap().shape, vec![9, 21, 21]);
}

fn umi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_umi")).args(args).env("UMI_THREADS", "1").output().unwrap()
}

#[test]
fn exit_codes_separate_validation_from_success() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\n  \"grid\": {\"x0\": 0, \"dx\": -1, \"nx\": 4, \"z0\": 5, \"dz\": 0.5, \"nz\": 3}\n}").unwrap();
    let out = umi(&["simulate", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("grid"));

    let typo = dir.path().join("typo.json");
    std::fs::write(&typo, "{\n  \"phantom\": {\"seeed\": 1}\n}").unwrap();
    let out = umi(&["simulate", "--config", typo.to_str().unwrap(), "--out", dir.path().join("y").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("typo.json:2:") && err.contains("seeed"), "{err}");

    let out = umi(&["correct", "--input", run().sim.to_str().unwrap(), "--out", dir.path().join("z").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = umi(&["correct", "--input", run().bf.to_str().unwrap(), "--out", dir.path().join("z").to_str().unwrap(), "--steps", "9"]);
    assert_eq!(out.status.code(), Some(2));

    let out = umi(&["report", "--input", run().corr.to_str().unwrap(), "--out", dir.path().join("r.md").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = umi(&["schema"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout), umi_cli::config::SCHEMA);
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // a phantom far below the grid leaves the reference image without a measurable width
    let mut cfg = small_config();
    cfg["phantom"] = json!({ "point_scatterers": [{ "x": 0.0, "z": 22.0, "amplitude": [1.0, 0.0] }] });
    cfg["acquisition"]["record_duration"] = json!(4.0e-5);
    let path = dir.path().join("far.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    let sim = dir.path().join("sim");
    let out = umi(&["simulate", "--config", path.to_str().unwrap(), "--out", sim.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = umi(&["beamform", "--input", sim.to_str().unwrap(), "--out", dir.path().join("bf").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

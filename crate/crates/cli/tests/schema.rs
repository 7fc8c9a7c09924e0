use std::collections::BTreeSet;

use serde_json::{json, Value};
use umi_cli::config::{AberratorConfig, RunConfig, SCHEMA};
use umi_core::phantom::{AberratorSpec, Layer, MultipleScatteringNoiseSpec, PointScatterer, SpeckleRegion, SpecularInterface};

fn schema() -> Value {
    serde_json::from_str(SCHEMA).unwrap()
}

/// Configs that between them serialize every optional field and variant.
fn samples() -> Vec<RunConfig> {
    let base = RunConfig::default();
    let ne = base.acquisition.num_elements;
    let na = base.acquisition.transmit_angles.len();
    let mut full = base.clone();
    full.noise = Some(MultipleScatteringNoiseSpec { power_db: -10.0, correlation_length: Some(0.4), seed: 3 });
    let speckle = full.phantom.speckle.as_mut().unwrap();
    speckle.regions.push(SpeckleRegion { x_range: [-2.0, 2.0], z_range: [20.0, 25.0], variance: 0.0 });
    full.phantom.point_scatterers.push(PointScatterer { x: 0.0, z: 30.0, amplitude: num_complex::Complex64::new(5.0, 1.0) });
    full.phantom.specular_interfaces.push(SpecularInterface { depth: 35.0, amplitude: 2.0, x_range: [-10.0, 10.0], spacing: 0.1 });
    full.pipeline.oracle = Some(AberratorSpec::PlaneWaveScreen { phase: vec![0.1; na] });
    let variants = [
        AberratorConfig::None,
        AberratorConfig::TransducerScreen { phase: vec![0.2; ne], amplitude: Some(vec![0.5; ne]) },
        AberratorConfig::PlaneWaveScreen { phase: vec![0.0; na] },
        AberratorConfig::LayeredC { layers: vec![Layer { thickness: 10.0, speed: 1450.0 }], bottom_speed: 1540.0 },
    ];
    let mut out = vec![base, full];
    for v in variants {
        let mut c = RunConfig::default();
        c.aberrator = v;
        out.push(c);
    }
    out
}

#[test]
fn serialized_configs_satisfy_the_schema() {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    for c in samples() {
        let v = serde_json::to_value(&c).unwrap();
        let errors: Vec<String> = validator.iter_errors(&v).map(|e| format!("{} at {}", e, e.instance_path())).collect();
        assert!(errors.is_empty(), "{errors:?}");
        assert!(RunConfig::from_value(&v).is_ok());
    }
}

#[test]
fn schema_and_parser_agree_on_rejections() {
    let validator = jsonschema::validator_for(&schema()).unwrap();
    let cases = [
        json!({"grid": {"x0": 0, "dx": 0.1, "nx": 4, "z0": 5, "dz": 0.5, "nz": 3, "extra": 1}}),
        json!({"aberrator": {"variant": "gaussian_screen", "rms": 1.0, "seed": 1}}),
        json!({"aberrator": {"variant": "wedge"}}),
        json!({"schedule": [{"index": 1, "filter_factor": 10, "window": [5, 5], "transmit_basis": "focused",
                              "receive_basis": "transducer", "svd_type": "distortion"}]}),
        json!({"seeds": 3}),
    ];
    for c in cases {
        assert!(!validator.is_valid(&c), "schema accepted {c}");
        assert!(RunConfig::from_json(&c.to_string(), "case").is_err(), "parser accepted {c}");
    }
    assert!(validator.is_valid(&json!({})));
}

fn resolve<'a>(root: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => resolve(root, root.pointer(r.trim_start_matches('#')).unwrap()),
        None => node,
    }
}

fn schema_objects(root: &Value, node: &Value, out: &mut Vec<BTreeSet<String>>) {
    let node = resolve(root, node);
    match node {
        Value::Object(map) => {
            if let Some(Value::Object(props)) = map.get("properties") {
                if map.get("additionalProperties") == Some(&Value::Bool(false)) {
                    out.push(props.keys().cloned().collect());
                }
            }
            for (k, v) in map {
                if k != "$defs" {
                    schema_objects(root, v, out);
                }
            }
        }
        Value::Array(items) => items.iter().for_each(|v| schema_objects(root, v, out)),
        _ => {}
    }
}

fn value_objects(v: &Value, out: &mut BTreeSet<BTreeSet<String>>) {
    match v {
        Value::Object(map) => {
            out.insert(map.keys().cloned().collect());
            map.values().for_each(|v| value_objects(v, out));
        }
        Value::Array(items) => items.iter().for_each(|v| value_objects(v, out)),
        _ => {}
    }
}

#[test]
fn every_schema_object_matches_a_serialized_object() {
    let root = schema();
    let mut objects = Vec::new();
    schema_objects(&root, &root, &mut objects);
    let mut serialized = BTreeSet::new();
    for c in samples() {
        value_objects(&serde_json::to_value(&c).unwrap(), &mut serialized);
    }
    assert!(objects.len() > 20);
    for keys in &objects {
        assert!(serialized.contains(keys), "schema object {keys:?} is never produced by the config type");
    }
}

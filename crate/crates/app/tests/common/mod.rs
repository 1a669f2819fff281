#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::Value;
use ttg_core::scenario::{Dataset, ProbeSet};
use ttg_core::train::{TrainConfig, Trainer};

/// A saved dataset and a briefly trained checkpoint in a temp dir.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub data: PathBuf,
    pub ckpt: PathBuf,
    pub dataset: Dataset,
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        timesteps: 10,
        widths: [4, 8],
        groups: 2,
        max_steps: Some(2),
        ..TrainConfig::default()
    }
}

pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("model.ck");
    let dataset = ProbeSet::build(0).unwrap().dataset;
    dataset.save(&data).unwrap();
    let mut t = Trainer::new(tiny_config(), &dataset).unwrap();
    t.run(2, Some(&ckpt), |_| {}).unwrap();
    Fixture {
        dir,
        data,
        ckpt,
        dataset,
    }
}

pub fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    jsonschema::validator_for(&s).unwrap()
}

pub fn assert_valid(name: &str, v: &Value) {
    let errors: Vec<String> = schema(name).iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name}: {errors:?}\n{v}");
}

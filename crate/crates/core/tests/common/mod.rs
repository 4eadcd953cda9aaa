#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maskvar"));
    c.env_remove("MASKVAR_SEED");
    c
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn maskvar")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn schema_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"))
}

/// Panics with every validation error if `v` does not match the schema.
pub fn assert_schema(name: &str, v: &Value) {
    let text = std::fs::read_to_string(schema_path(name)).unwrap();
    let schema: Value = serde_json::from_str(&text).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(v).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}\n{v}");
}

pub fn assert_jsonl_schema(name: &str, text: &str) {
    for line in text.lines() {
        assert_schema(name, &serde_json::from_str(line).unwrap());
    }
}

/// Small but real training overrides.
pub const SHORT: &[&str] = &[
    "--override",
    "total_steps=24",
    "--override",
    "warmup_steps=4",
    "--override",
    "eval_interval=8",
    "--override",
    "checkpoint_interval=12",
    "--override",
    "batch_size=8",
    "--override",
    "eval_sentences=32",
    "--override",
    "train_sentences=128",
];

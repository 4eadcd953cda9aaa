mod common;

use std::fs;

use common::*;
use serde_json::Value;

fn train_into(dir: &std::path::Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec!["train", "--output", dir.to_str().unwrap()];
    args.extend_from_slice(SHORT);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn zero_steps_leaves_an_empty_metrics_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&["train", "--override", "total_steps=0", "--output", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(out.join("metrics.jsonl")).unwrap().len(), 0);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_schema("summary", &summary);
    assert_eq!(summary["steps"], 0);
}

#[test]
fn same_seed_gives_byte_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(train_into(&a, &["--seed", "5"]).status.code(), Some(0));
    assert_eq!(train_into(&b, &["--seed", "5"]).status.code(), Some(0));
    let ma = fs::read(a.join("metrics.jsonl")).unwrap();
    assert!(!ma.is_empty());
    assert_eq!(ma, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(fs::read(a.join("final.mvar")).unwrap(), fs::read(b.join("final.mvar")).unwrap());
    let text = String::from_utf8(ma).unwrap();
    assert_eq!(text.lines().count(), 24);
    assert_jsonl_schema("metrics", &text);
    let summary: Value = serde_json::from_str(&fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_schema("summary", &summary);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    assert_eq!(train_into(&full, &[]).status.code(), Some(0));
    let ckpt = full.join("checkpoints").join("step-12.mvar");
    let o = train_into(&part, &["--resume", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read(full.join("final.mvar")).unwrap(), fs::read(part.join("final.mvar")).unwrap());
    let full_lines: Vec<String> = fs::read_to_string(full.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    let part_lines: Vec<String> = fs::read_to_string(part.join("metrics.jsonl")).unwrap().lines().map(String::from).collect();
    assert_eq!(part_lines, full_lines[12..]);
}

#[test]
fn baseline_flag_pins_uniform_masking() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("base");
    assert_eq!(train_into(&out, &["--baseline-uniform"]).status.code(), Some(0));
    for line in fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines() {
        let m: Value = serde_json::from_str(line).unwrap();
        assert_eq!(m["explore_p"], 1.0);
        assert_eq!(m["mean_ratio"], 1.0);
        assert_eq!(m["mapnet_grad_norm"], 0.0);
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env");
    let o = bin()
        .env("MASKVAR_SEED", "42")
        .args(["train", "--override", "total_steps=0", "--output", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 42);
    let o = bin()
        .env("MASKVAR_SEED", "42")
        .args(["train", "--seed", "3", "--override", "total_steps=0", "--output", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 3);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "batch_size = 0\n").unwrap();
    let o = run(&["train", "--config", cfg.to_str().unwrap(), "--output", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let o = run(&["train", "--override", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("colour"));

    let o = run(&["train", "--config", dir.path().join("missing.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["--threads", "0", "oracle", "decomposition"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn eval_reports_the_checkpoint_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(train_into(&out, &[]).status.code(), Some(0));
    let o = run(&["eval", "--checkpoint", out.join("final.mvar").to_str().unwrap(), "--override", "eval_sentences=32"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_schema("eval", &v);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(v["eval_loss"], summary["final_eval_loss"]);
}

#[test]
fn exact_audit_closes_the_decomposition() {
    let o = run(&["audit-variance", "--sentences", "3", "--k", "2", "--override", "grammar_min_len=6", "--override", "grammar_max_len=8"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_schema("audit", &v);
    for key in ["uniform", "mapnet", "optimal"] {
        let r = &v[key];
        let (total, residual) = (r["total"].as_f64().unwrap(), r["residual"].as_f64().unwrap());
        assert!(residual.abs() <= 1e-10 * total, "{key}: {r}");
    }
    let mask = |k: &str| v[k]["mask_term"].as_f64().unwrap();
    assert!(mask("optimal") <= mask("uniform"));
    assert!(mask("optimal") <= mask("mapnet"));
}

#[test]
fn exact_audit_over_the_cap_points_to_mc() {
    let o = run(&["audit-variance", "--sentences", "1", "--k", "5", "--override", "grammar_min_len=24"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Monte Carlo"), "{}", stderr(&o));
    let o = run(&["audit-variance", "--sentences", "2", "--k", "5", "--mode", "mc", "--samples", "8", "--override", "grammar_min_len=24"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_schema("audit", &v);
    assert!(v["optimal"].is_null());
    assert!(v["uniform"]["stderr"].is_object());
}

#[test]
fn zero_samples_is_empty_output() {
    let o = run(&["sample-masks", "--count", "0"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
}

#[test]
fn sampled_masks_carry_labels_and_validate() {
    let o = run(&["sample-masks", "--count", "20", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 20);
    assert_jsonl_schema("sample_masks", &text);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let n = v["tokens"].as_array().unwrap().len();
        assert_eq!(v["labels"].as_array().unwrap().len(), n);
        assert_eq!(v["proposal"].as_array().unwrap().len(), n);
        assert_eq!(v["plan"]["source"], "proposal");
    }
    assert_eq!(run(&["sample-masks", "--count", "20", "--seed", "9"]).stdout, o.stdout);
}

#[test]
fn uniform_sampling_selects_positions_evenly() {
    // fixed-length sentences so every position has the same chance
    let draws = 4000;
    let o = run(&[
        "sample-masks",
        "--count",
        &draws.to_string(),
        "--explore-p",
        "1",
        "--override",
        "grammar_min_len=10",
        "--override",
        "grammar_max_len=10",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut counts = [0u32; 10];
    for line in stdout(&o).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["plan"]["source"], "uniform");
        for p in v["plan"]["positions"].as_array().unwrap() {
            counts[p.as_u64().unwrap() as usize] += 1;
        }
    }
    // K = 2 of 10 positions per draw
    let p = 0.2;
    let mean = draws as f64 * p;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
}

#[test]
fn oracle_suites_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oracle.json");
    let o = run(&["oracle", "decomposition", "--output", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_schema("oracle", &v);
    assert_eq!(v[0]["passed"], true);

    let o = run(&["oracle", "unbiasedness"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_schema("oracle", &v);
    let info: Vec<&Value> = v[0]["checks"].as_array().unwrap().iter().filter(|c| c["informational"] == true).collect();
    assert!(!info.is_empty());
    assert!(info.iter().all(|c| c["passed"] == true));

    let o = run(&["oracle", "optimality"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("scalar toy"));
}

#[test]
fn trained_proposal_prefers_content_and_noise() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--seed",
        "3",
        "--override",
        "total_steps=800",
        "--override",
        "warmup_steps=50",
        "--override",
        "batch_size=8",
        "--override",
        "eval_interval=0",
        "--override",
        "train_sentences=1024",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = out.join("final.mvar");
    let o = run(&["sample-masks", "--checkpoint", ckpt.to_str().unwrap(), "--count", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (mut picked, mut seen) = ([0u32; 2], [0u32; 2]);
    for line in stdout(&o).lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        let labels = v["labels"].as_array().unwrap();
        let slot = |i: usize| usize::from(labels[i] != "FUNCTION");
        for i in 0..labels.len() {
            seen[slot(i)] += 1;
        }
        for p in v["plan"]["positions"].as_array().unwrap() {
            picked[slot(p.as_u64().unwrap() as usize)] += 1;
        }
    }
    let rate = |s: usize| f64::from(picked[s]) / f64::from(seen[s]);
    assert!(rate(1) > rate(0), "CONTENT/NOISE {} vs FUNCTION {}", rate(1), rate(0));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deltaforge::{load_tensor_map, save_tensor_map, Tensor, TensorMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deltaforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn write(dir: &Path, name: &str, entries: &[(&str, Vec<usize>, Vec<f32>)]) -> PathBuf {
    let mut tm = TensorMap::new();
    for (n, s, v) in entries {
        tm.insert(*n, Tensor::from_f32(s.clone(), v.clone()).unwrap())
            .unwrap();
    }
    let p = dir.join(name);
    save_tensor_map(&tm, &p).unwrap();
    p
}

fn random(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn pair(dir: &Path) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pre = random(&mut rng, 600, 1.0);
    let sft: Vec<f32> = pre
        .iter()
        .zip(random(&mut rng, 600, 0.01))
        .map(|(a, b)| a + b)
        .collect();
    let bias = random(&mut rng, 20, 1.0);
    write(
        dir,
        "pre.safetensors",
        &[("w", vec![20, 30], pre), ("b", vec![20], bias.clone())],
    );
    write(
        dir,
        "sft.safetensors",
        &[("w", vec![20, 30], sft), ("b", vec![20], bias)],
    );
}

fn values(path: &Path, name: &str) -> Vec<f64> {
    load_tensor_map(path)
        .unwrap()
        .get(name)
        .unwrap()
        .to_f64_vec()
}

#[test]
fn delta_then_apply_reproduces_sft() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    pair(d);
    ok(
        d,
        &[
            "delta",
            "--sft",
            "sft.safetensors",
            "--pre",
            "pre.safetensors",
            "-o",
            "d.safetensors",
        ],
    );
    ok(
        d,
        &[
            "apply",
            "--pre",
            "pre.safetensors",
            "--delta",
            "d.safetensors",
            "-o",
            "back.safetensors",
        ],
    );
    let sft = load_tensor_map(d.join("sft.safetensors")).unwrap();
    let back = load_tensor_map(d.join("back.safetensors")).unwrap();
    let pre = load_tensor_map(d.join("pre.safetensors")).unwrap();
    for name in ["w", "b"] {
        let (s, b, p) = (get32(&sft, name), get32(&back, name), get32(&pre, name));
        for i in 0..s.len() {
            let ulp = s[i].abs().max(p[i].abs()) * f32::EPSILON;
            assert!((s[i] - b[i]).abs() <= ulp, "{name}[{i}]");
        }
    }
}

fn get32(tm: &TensorMap, name: &str) -> Vec<f32> {
    tm.get(name).unwrap().values::<f32>().into_owned()
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "a.safetensors", &[("layer.w", vec![2, 2], vec![0.0; 4])]);
    write(d, "b.safetensors", &[("layer.w", vec![4], vec![0.0; 4])]);
    let err = fails(
        d,
        &[
            "--on-mismatch",
            "error",
            "delta",
            "--sft",
            "a.safetensors",
            "--pre",
            "b.safetensors",
            "-o",
            "d.safetensors",
        ],
    );
    assert!(err.contains("layer.w"), "{err}");
    assert!(!d.join("d.safetensors").exists());
}

#[test]
fn stats_verdicts_and_csv() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(
        d,
        "small.safetensors",
        &[("w", vec![3], vec![-0.0048, 0.001, 0.0047])],
    );
    write(d, "zero.safetensors", &[("w", vec![4], vec![0.0; 4])]);
    write(
        d,
        "ramp.safetensors",
        &[("w", vec![11], (0..=10).map(|v| v as f32).collect())],
    );
    let out = ok(d, &["stats", "small.safetensors"]);
    assert!(out.contains("verdict: applicable"), "{out}");
    let out = ok(d, &["stats", "zero.safetensors"]);
    assert!(out.contains("verdict: applicable"), "{out}");
    let out = ok(d, &["stats", "ramp.safetensors", "--csv", "ramp.csv"]);
    assert!(out.contains("verdict: inapplicable"), "{out}");
    let csv = std::fs::read_to_string(d.join("ramp.csv")).unwrap();
    assert!(
        csv.lines()
            .nth(1)
            .unwrap()
            .starts_with("w,11,0,1,2,3,4,5,6,7,8,9,10,10"),
        "{csv}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&ok(d, &["stats", "zero.safetensors", "--json"])).unwrap();
    assert_eq!(json["applicability"]["verdict"], "applicable");
}

#[test]
fn stats_rejects_empty_delta() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "empty.safetensors", &[]);
    fails(d, &["stats", "empty.safetensors"]);
}

#[test]
fn dare_zero_rate_returns_model_bits() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    pair(d);
    ok(
        d,
        &[
            "dare",
            "--sft",
            "sft.safetensors",
            "--pre",
            "pre.safetensors",
            "--drop-rate",
            "0",
            "--emit",
            "model",
            "-o",
            "m.safetensors",
        ],
    );
    assert_eq!(
        std::fs::read(d.join("m.safetensors")).unwrap(),
        std::fs::read(d.join("sft.safetensors")).unwrap()
    );
}

#[test]
fn dare_sparsity_on_a_million_elements() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let n = 1_000_000;
    write(
        d,
        "d.safetensors",
        &[("big", vec![1000, 1000], vec![1.0; n])],
    );
    let args = [
        "--seed",
        "3",
        "dare",
        "--delta",
        "d.safetensors",
        "--drop-rate",
        "0.99",
        "-o",
    ];
    ok(d, &[&args[..], &["a.safetensors"]].concat());
    ok(d, &[&args[..], &["b.safetensors"]].concat());
    let kept = values(&d.join("a.safetensors"), "big")
        .iter()
        .filter(|&&v| v != 0.0)
        .count() as f64;
    let sigma = (n as f64 * 0.99 * 0.01).sqrt();
    assert!((kept - 0.01 * n as f64).abs() <= 4.0 * sigma, "kept {kept}");
    assert_eq!(
        std::fs::read(d.join("a.safetensors")).unwrap(),
        std::fs::read(d.join("b.safetensors")).unwrap()
    );
}

#[test]
fn dare_rejects_rate_one() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "d.safetensors", &[("w", vec![1], vec![1.0])]);
    let err = fails(
        d,
        &[
            "dare",
            "--delta",
            "d.safetensors",
            "--drop-rate",
            "1",
            "-o",
            "o.safetensors",
        ],
    );
    assert!(err.contains("[0, 1)"), "{err}");
}

#[test]
fn dare_mask_and_finetuned_target() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    pair(d);
    ok(
        d,
        &[
            "dare",
            "--sft",
            "sft.safetensors",
            "--pre",
            "pre.safetensors",
            "--drop-rate",
            "0.5",
            "--mask-out",
            "mask.safetensors",
            "-o",
            "dd.safetensors",
        ],
    );
    let mask = values(&d.join("mask.safetensors"), "w");
    let dropped = values(&d.join("dd.safetensors"), "w");
    for (m, v) in mask.iter().zip(&dropped) {
        assert!(*m == 1.0 || *v == 0.0);
    }
    ok(
        d,
        &[
            "dare",
            "--sft",
            "sft.safetensors",
            "--on",
            "finetuned",
            "--emit",
            "model",
            "--drop-rate",
            "0.1",
            "-o",
            "f.safetensors",
        ],
    );
    let zeros = values(&d.join("f.safetensors"), "w")
        .iter()
        .filter(|&&v| v == 0.0)
        .count();
    assert!(zeros > 0 && zeros < 200);
}

#[test]
fn prune_keeps_largest() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(
        d,
        "d.safetensors",
        &[("w", vec![4], vec![0.1, -0.4, 0.3, 0.2])],
    );
    ok(
        d,
        &[
            "prune",
            "--delta",
            "d.safetensors",
            "--drop-rate",
            "0.5",
            "-o",
            "p.safetensors",
        ],
    );
    assert_eq!(
        values(&d.join("p.safetensors"), "w"),
        [0.0, -0.4f32 as f64, 0.3f32 as f64, 0.0]
    );
}

fn recipe(dir: &Path, name: &str, json: serde_json::Value) -> String {
    std::fs::write(dir.join(name), json.to_string()).unwrap();
    name.to_string()
}

#[test]
fn merge_average_and_report() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "a.safetensors", &[("w", vec![3], vec![1.0, 2.0, 3.0])]);
    write(d, "b.safetensors", &[("w", vec![3], vec![3.0, 2.0, -1.0])]);
    let r = recipe(
        d,
        "avg.json",
        serde_json::json!({"method": "average", "model_paths": ["a.safetensors", "b.safetensors"]}),
    );
    ok(d, &["merge", &r, "-o", "m.safetensors"]);
    assert_eq!(values(&d.join("m.safetensors"), "w"), [2.0, 2.0, 1.0]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(d.join("m.safetensors.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["method"], "average");
    assert_eq!(report["models"], 2);
}

#[test]
fn merge_ties_example() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    write(d, "base.safetensors", &[("w", vec![3], vec![0.0; 3])]);
    write(d, "a.safetensors", &[("w", vec![3], vec![0.9, -0.1, 0.5])]);
    write(d, "b.safetensors", &[("w", vec![3], vec![-0.8, 0.3, 0.4])]);
    let make = |ratio: f64| {
        serde_json::json!({
            "method": "ties",
            "backbone_path": "base.safetensors",
            "model_paths": ["a.safetensors", "b.safetensors"],
            "lambda": 1.0,
            "ties": {"retain_ratio": ratio},
            "output": {"dtype": "f64"}
        })
    };
    let close =
        |got: Vec<f64>, want: [f64; 3]| got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-6);
    let full = recipe(d, "full.json", make(1.0));
    ok(d, &["merge", &full, "-o", "full.safetensors"]);
    let got = values(&d.join("full.safetensors"), "w");
    assert!(close(got.clone(), [0.9, 0.3, 0.45]), "{got:?}");
    let trimmed = recipe(d, "trim.json", make(2.0 / 3.0));
    ok(d, &["merge", &trimmed, "-o", "trim.safetensors"]);
    let got = values(&d.join("trim.safetensors"), "w");
    assert!(close(got.clone(), [0.9, 0.0, 0.45]), "{got:?}");
}

#[test]
fn merge_errors() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let r = recipe(
        d,
        "bad.json",
        serde_json::json!({"method": "slerp", "model_paths": ["a", "b"]}),
    );
    let err = fails(d, &["merge", &r, "-o", "m.safetensors"]);
    assert!(
        err.contains("average, task_arithmetic, fisher, regmean, ties"),
        "{err}"
    );
    let r = recipe(
        d,
        "worse.json",
        serde_json::json!({"method": "task_arithmetic", "model_paths": ["a"], "lambda": -1.0}),
    );
    let err = fails(d, &["merge", &r, "-o", "m.safetensors"]);
    assert!(
        err.contains("backbone_path") && err.contains("lambda") && err.contains("model_paths"),
        "{err}"
    );
}

fn calibrated(d: &Path) -> String {
    ok(d, &["calibrate", "--out-dir", "cal"]);
    recipe(
        d,
        "ta.json",
        serde_json::json!({
            "method": "task_arithmetic",
            "backbone_path": "cal/pretrained.safetensors",
            "model_paths": ["cal/finetuned_0.safetensors", "cal/finetuned_1.safetensors"],
            "lambda": 1.0,
            "dare": {"drop_rate": 0.5, "seed": 0}
        }),
    )
}

#[test]
fn sweep_single_cell_matches_merge() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let r = calibrated(d);
    let base = recipe(
        d,
        "plain.json",
        serde_json::json!({
            "method": "task_arithmetic",
            "backbone_path": "cal/pretrained.safetensors",
            "model_paths": ["cal/finetuned_0.safetensors", "cal/finetuned_1.safetensors"],
            "lambda": 1.0
        }),
    );
    ok(
        d,
        &[
            "sweep",
            &r,
            "-o",
            "s.csv",
            "--drop-rates",
            "0",
            "--lambdas",
            "1.0",
            "--seeds",
            "7",
            "--probe",
            "cal/probe.safetensors",
            "--save-models",
            "cells",
        ],
    );
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2, "{csv}");
    ok(d, &["merge", &base, "-o", "m.safetensors"]);
    let merged = load_tensor_map(d.join("m.safetensors")).unwrap();
    let cell = std::fs::read_dir(d.join("cells"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    let cell = load_tensor_map(cell).unwrap();
    for (name, t) in merged.iter() {
        assert_eq!(
            t.to_f64_vec(),
            cell.get(name).unwrap().to_f64_vec(),
            "{name}"
        );
    }
}

#[test]
fn sweep_default_grid_and_drift_direction() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let r = calibrated(d);
    ok(
        d,
        &[
            "sweep",
            &r,
            "-o",
            "grid.csv",
            "--lambdas",
            "0.5,1.0",
            "--seeds",
            "1,2",
        ],
    );
    let csv = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 11 * 2 * 2);

    let seeds: Vec<String> = (0..20).map(|s| s.to_string()).collect();
    ok(
        d,
        &[
            "sweep",
            &r,
            "-o",
            "drift.csv",
            "--drop-rates",
            "0.9",
            "--variants",
            "dare,drop_only",
            "--lambdas",
            "0.5,1.0",
            "--seeds",
            &seeds.join(","),
            "--probe",
            "cal/probe_0.safetensors",
        ],
    );
    let mut reader = csv::Reader::from_path(d.join("drift.csv")).unwrap();
    let mut sums = std::collections::BTreeMap::<(String, String), f64>::new();
    for row in reader.records() {
        let row = row.unwrap();
        *sums
            .entry((row[2].to_string(), row[3].to_string()))
            .or_default() += row[5].parse::<f64>().unwrap();
    }
    for lambda in ["0.5", "1"] {
        let dare = sums[&("dare".to_string(), lambda.to_string())];
        let drop_only = sums[&("drop_only".to_string(), lambda.to_string())];
        assert!(dare < drop_only, "lambda {lambda}: {dare} vs {drop_only}");
    }
}

#[test]
fn inspect_lists_tensors() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    pair(d);
    let out = ok(d, &["inspect", "pre.safetensors"]);
    assert!(
        out.contains("[20, 30]") && out.contains("2 tensors, 620 elements"),
        "{out}"
    );
    let json: serde_json::Value =
        serde_json::from_str(&ok(d, &["inspect", "pre.safetensors", "--json"])).unwrap();
    assert_eq!(json["numel"], 620);
}

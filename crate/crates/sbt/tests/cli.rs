//! End-to-end tests of the command-line binary: artifacts, determinism,
//! and the exit-code contract (0 success, 2 usage, 3 data, 4 numerical).

use std::fmt::Write as _;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sbt"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary should launch")
}

fn write_train_csv(path: &Path, n: usize) {
    let mut text = String::from("x1,x2,y\n");
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..n {
        let a = next();
        let b = next();
        let y = (3.0 * a).sin() + 2.0 * b;
        let _ = writeln!(text, "{},{},{}", 10.0 * a, b - 0.5, y);
    }
    std::fs::write(path, text).unwrap();
}

fn write_constant_csv(path: &Path, n: usize, c: f64) {
    let mut text = String::from("x1,x2,y\n");
    let mut state = 42u64;
    let mut next = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..n {
        let _ = writeln!(text, "{},{},{}", next(), next(), c);
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn fit_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_train_csv(&data, 50);

    let fit_args = |out: &Path| {
        vec![
            "fit".to_string(),
            data.display().to_string(),
            "--out".into(),
            out.display().to_string(),
            "--ntree".into(),
            "5".into(),
            "--nmcmc".into(),
            "20".into(),
            "--burn".into(),
            "10".into(),
            "--seed".into(),
            "3".into(),
            "--tc".into(),
            "2".into(),
        ]
    };

    let out1 = dir.path().join("run1");
    let status = bin().args(fit_args(&out1)).status().unwrap();
    assert!(status.success());
    for name in ["model.txt", "manifest.json", "diagnostics.csv"] {
        assert!(out1.join(name).exists(), "missing artifact {name}");
    }

    let out2 = dir.path().join("run2");
    assert!(bin().args(fit_args(&out2)).status().unwrap().success());
    let dump1 = std::fs::read(out1.join("model.txt")).unwrap();
    let dump2 = std::fs::read(out2.join("model.txt")).unwrap();
    assert_eq!(dump1, dump2, "same config and seed must give identical dumps");

    let out3 = dir.path().join("run3");
    let mut args = fit_args(&out3);
    let pos = args.iter().position(|a| a == "--seed").unwrap();
    args[pos + 1] = "4".into();
    assert!(bin().args(args).status().unwrap().success());
    let dump3 = std::fs::read(out3.join("model.txt")).unwrap();
    assert_ne!(dump1, dump3, "different seeds should give different dumps");

    let manifest = std::fs::read_to_string(out1.join("manifest.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(parsed["spec_version"], 1);
    assert_eq!(parsed["n"], 50);
    assert_eq!(parsed["d"], 2);
    assert_eq!(parsed["x_names"], serde_json::json!(["x1", "x2"]));
    assert_eq!(parsed["y_name"], "y");
    let sizes = parsed["shard_sizes_per_sample"].as_array().unwrap();
    assert_eq!(sizes.len(), 10);
    for sample in sizes {
        let total: u64 = sample.as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum();
        assert_eq!(total, 50);
    }

    let diag = std::fs::read_to_string(out1.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("iteration,tu_accepted,shard,shard_size,tree_moves_accepted\n"));
    assert_eq!(diag.lines().count(), 1 + 20 * 4, "20 iterations x 4 shards plus header");
}

#[test]
fn predict_recovers_constant_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_constant_csv(&data, 40, 3.25);
    let out = dir.path().join("fit");
    let status = run(&[
        "fit",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ntree",
        "5",
        "--nmcmc",
        "30",
        "--burn",
        "15",
    ]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));

    let grid = dir.path().join("grid.csv");
    std::fs::write(&grid, "x1,x2\n0.37,0.61\n").unwrap();
    let model = out.join("model.txt");
    let predict = |seed: &str| {
        let out = run(&[
            "predict",
            model.to_str().unwrap(),
            grid.to_str().unwrap(),
            "--ndraws",
            "2",
            "--seed",
            seed,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };

    let csv = predict("11");
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "header plus one grid row");
    assert_eq!(lines[0], "mean,lo95,hi95");
    let mean: f64 = lines[1].split(',').next().unwrap().parse().unwrap();
    assert!((mean - 3.25).abs() < 1e-6, "constant model should predict 3.25, got {mean}");

    assert_eq!(csv, predict("11"), "same seed must reproduce the CSV");
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_train_csv(&data, 30);
    let out = dir.path().join("out");
    let cases: Vec<Vec<&str>> = vec![
        vec!["fit", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--model", "gp"],
        vec!["fit", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ntreeh", "2"],
        vec![
            "fit",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--nmcmc",
            "5",
            "--burn",
            "5",
        ],
        vec!["fit", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--tc", "0"],
        vec!["fit", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--no-such-flag"],
        vec!["fit", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--y-col", "zz"],
        vec!["design", "--n", "9", "--b", "3", "--lower", "1,1,1"],
        vec!["nonsense"],
    ];
    for case in cases {
        let result = run(&case);
        assert_eq!(
            result.status.code(),
            Some(2),
            "expected usage exit for {case:?}, stderr: {}",
            String::from_utf8_lossy(&result.stderr)
        );
    }
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let missing = dir.path().join("missing.csv");
    let result = run(&["fit", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(3));

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,y\n1.0,2.0\noops,3.0\n").unwrap();
    let result = run(&["fit", bad.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(result.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("row 2") && stderr.contains("x1"), "{stderr}");

    // dimension mismatch between grid and model
    let data = dir.path().join("train.csv");
    write_train_csv(&data, 48);
    let fitdir = dir.path().join("fit");
    assert!(run(&[
        "fit",
        data.to_str().unwrap(),
        "--out",
        fitdir.to_str().unwrap(),
        "--ntree",
        "3",
        "--nmcmc",
        "10",
        "--burn",
        "5",
    ])
    .status
    .success());
    let grid = dir.path().join("grid.csv");
    std::fs::write(&grid, "x1\n0.5\n").unwrap();
    let result = run(&[
        "predict",
        fitdir.join("model.txt").to_str().unwrap(),
        grid.to_str().unwrap(),
    ]);
    assert_eq!(result.status.code(), Some(3));
}

#[test]
fn infeasible_design_exits_four() {
    let result = run(&["design", "--n", "5", "--b", "3", "--lower", "4,4,4", "--upper", "9,9,9"]);
    assert_eq!(result.status.code(), Some(4));
    assert!(!String::from_utf8_lossy(&result.stderr).is_empty());
}

#[test]
fn design_reports_balanced_allocation_as_json() {
    let result = run(&["design", "--n", "10", "--b", "3"]);
    assert!(result.status.success());
    let parsed: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    assert_eq!(parsed["criterion"], "phi");
    assert_eq!(parsed["n"], 10);
    assert_eq!(parsed["B"], 3);
    assert_eq!(parsed["allocation"], serde_json::json!([3, 3, 4]));
    assert!((parsed["value"].as_f64().unwrap() - 0.036).abs() < 1e-15);

    let result = run(&["design", "--n", "10", "--b", "3", "--criterion", "minmax"]);
    let parsed: serde_json::Value = serde_json::from_slice(&result.stdout).unwrap();
    let third: f64 = 1.0 / 3.0;
    assert!((parsed["value"].as_f64().unwrap() - third).abs() < 1e-15);
}

#[test]
fn design_sim_emits_seeded_csv() {
    let result = run(&["design-sim", "--n", "40", "--b", "2", "--batches", "6", "--seed", "9"]);
    assert!(result.status.success());
    let text = String::from_utf8(result.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0], "batch_index,phi");
    for (i, line) in lines[1..].iter().enumerate() {
        let mut parts = line.split(',');
        assert_eq!(parts.next().unwrap(), i.to_string());
        let phi: f64 = parts.next().unwrap().parse().unwrap();
        assert!((0.0..=0.25).contains(&phi), "phi for B=2 is at most 1/4, got {phi}");
    }

    let again = run(&["design-sim", "--n", "40", "--b", "2", "--batches", "6", "--seed", "9"]);
    assert_eq!(text, String::from_utf8(again.stdout).unwrap());
}

#[test]
fn compatibility_flags_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("train.csv");
    write_train_csv(&data, 40);
    let out = dir.path().join("out");
    let result = run(&[
        "fit",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--ntree",
        "3",
        "--nmcmc",
        "10",
        "--burn",
        "5",
        "--randshard",
        "--shardpsplit",
        "0.8",
        "--pbd",
        "0.6,0.4",
        "--probchv",
        "0.2",
        "--probchvh",
        "0.3",
        "--ntreeh",
        "1",
        "--alpha",
        "0.4",
        "--min-leaf",
        "3",
        "--nmin",
        "5",
        "--sigma",
        "0.5",
    ]);
    assert!(result.status.success(), "{}", String::from_utf8_lossy(&result.stderr));
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("probchvh"), "ignored flag should warn: {stderr}");
}

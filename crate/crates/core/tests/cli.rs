use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn tasml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tasml"))
        .args(args)
        .env("TASML_THREADS", "2")
        .output()
        .expect("spawn tasml")
}

fn write_config(dir: &Path, steps: usize) -> String {
    let cfg = json!({
        "name": "cli",
        "source": {"kind": "synthetic", "generator": {"d": 12, "informative_dims": 3, "classes_per_split": 8}},
        "n_train": 30,
        "n_test": 3,
        "seeds": [0, 1],
        "output_dir": dir.join("out"),
        "tasml": {"sigma": "median", "eta": 1e-3, "init_steps": 20, "top_m": 4, "steps": steps},
        "ablation_steps": 8,
        "bench_tasks": 2
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_results_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 6);
    let out = tasml(&["run", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(
        results.lines().next().unwrap(),
        "experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s"
    );
    let traces = fs::read_to_string(dir.path().join("out/traces.csv")).unwrap();
    // header + seeds * tasks * (J + 1)
    assert_eq!(traces.lines().count(), 1 + 2 * 3 * 7);
}

#[test]
fn rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4);
    assert!(tasml(&["run", &cfg]).status.success());
    let first = fs::read(dir.path().join("out/results.csv")).unwrap();
    assert!(tasml(&["run", &cfg]).status.success());
    assert_eq!(first, fs::read(dir.path().join("out/results.csv")).unwrap());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 4);
    assert!(tasml(&["run", &cfg]).status.success());
    let first = fs::read(dir.path().join("out/results.csv")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tasml"))
        .args(["run", &cfg])
        .env("TASML_THREADS", "1")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(first, fs::read(dir.path().join("out/results.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"name": "x", "source": {"kind": "synthetic"}, "n_train": 0, "n_test": 1}"#).unwrap();
    let out = tasml(&["run", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_train"));

    fs::write(&bad, r#"{"name": "x", "bogus": 1}"#).unwrap();
    assert_eq!(tasml(&["run", bad.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(tasml(&["run", "/definitely/missing.json"]).status.code(), Some(2));

    let cfg = write_config(dir.path(), 2);
    assert_eq!(tasml(&["ablate", "--which", "nope", &cfg]).status.code(), Some(2));
    let out = Command::new(env!("CARGO_BIN_EXE_tasml"))
        .args(["run", &cfg])
        .env("TASML_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "name": "emb",
        "source": {"kind": "embeddings", "train": dir.path().join("none.bin"), "test": dir.path().join("none.bin"), "ways": 2, "shots": 1},
        "n_train": 2,
        "n_test": 1
    });
    let path = dir.path().join("c.json");
    fs::write(&path, cfg.to_string()).unwrap();
    assert_eq!(tasml(&["run", path.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn ablate_bench_and_gen_tasks_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let out = tasml(&["ablate", "--which", "topm", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(dir.path().join("out/ablate-topm/results.csv")).unwrap();
    assert!(results.contains("m_ref=30000"));

    assert!(tasml(&["bench", &cfg]).status.success());
    assert!(dir.path().join("out/bench.json").exists());

    let emb = dir.path().join("tasks.bin");
    let out = tasml(&["gen-tasks", &cfg, "--out", emb.to_str().unwrap()]);
    assert!(out.status.success());
    assert_eq!(&fs::read(&emb).unwrap()[..8], b"TASKEMB1");
}

#[test]
fn help_documents_csv_columns() {
    let out = tasml(&["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("experiment,variant,seed,mean_acc_pct,std_acc_pct,steps_per_sec,wall_s"));
    assert!(text.contains("experiment,variant,seed,task,step,objective,query_acc_pct"));
    assert!(text.contains("TASML_THREADS"));
}

#[test]
fn aggregate_rows_summarize_the_seed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let raw = fs::read_to_string(dir.path().join("config.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&raw).unwrap();
    v["seeds"] = json!([0, 1, 2]);
    fs::write(&cfg, v.to_string()).unwrap();
    assert!(tasml(&["run", &cfg]).status.success());
    let results = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    for variant in ["tasml", "unconditional"] {
        let rows: Vec<Vec<&str>> = results
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|c| c[1] == variant)
            .collect();
        let per_seed: Vec<f64> = rows.iter().filter(|c| c[2] != "all").map(|c| c[3].parse().unwrap()).collect();
        assert_eq!(per_seed.len(), 3);
        let all = rows.iter().find(|c| c[2] == "all").unwrap();
        let mean = per_seed.iter().sum::<f64>() / 3.0;
        let std = (per_seed.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((all[3].parse::<f64>().unwrap() - mean).abs() < 1e-3, "{variant} mean");
        assert!((all[4].parse::<f64>().unwrap() - std).abs() < 1e-3, "{variant} std");
    }
}

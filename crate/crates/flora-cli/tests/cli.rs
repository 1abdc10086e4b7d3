//! End-to-end tests of the `flora` binary: exit codes, CSV shapes and the
//! metadata header row.

use std::path::PathBuf;
use std::process::{Command, Output};

fn flora() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flora"))
}

fn tmpdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("flora-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_meta_header(path: &PathBuf, seed: u64) {
    let text = std::fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap();
    assert!(
        first.starts_with(&format!("# seed={seed} config_hash=")),
        "missing metadata header in {}: `{first}`",
        path.display()
    );
    assert!(first.contains("version="));
}

#[test]
fn calibrate_synthetic_recovers_coefficients() {
    let dir = tmpdir("synth");
    let fit_path = dir.join("fit.csv");
    let out = flora()
        .args([
            "calibrate",
            "--d",
            "64,128,256",
            "--r",
            "1,2,4,8",
            "--synthetic",
            "c1=5e-9,c2=1e-9",
            "--seed",
            "3",
            "--out",
        ])
        .arg(&fit_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_meta_header(&fit_path, 3);
    let text = std::fs::read_to_string(&fit_path).unwrap();
    let get = |key: &str| -> f64 {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!((get("c1") / 5e-9 - 1.0).abs() < 0.01, "c1 {}", get("c1"));
    assert!((get("c2") / 1e-9 - 1.0).abs() < 0.01, "c2 {}", get("c2"));
}

#[test]
fn calibrate_missing_grid_is_usage_error() {
    let out = flora().args(["calibrate", "--out", "/tmp/x.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

#[test]
fn calibrate_unwritable_output_is_exit_two() {
    let out = flora()
        .args([
            "calibrate",
            "--d",
            "32",
            "--r",
            "1",
            "--synthetic",
            "c1=5,c2=1",
            "--out",
            "/nonexistent-dir/fit.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("cannot write output"));
}

#[test]
fn bench_throughput_writes_table_and_summary() {
    let dir = tmpdir("bench");
    let table = dir.join("table.csv");
    let out = flora()
        .args([
            "bench",
            "throughput",
            "--ranks",
            "1-4",
            "--d",
            "64",
            "--c1",
            "1e-7",
            "--c2",
            "1e-8",
            "--n",
            "40",
            "--len",
            "5,50",
            "--seed",
            "11",
            "--out",
        ])
        .arg(&table)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_meta_header(&table, 11);
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 8, "2 strategies × 4 ranks:\n{text}");
    assert!(rows.iter().all(|r| r.starts_with("flora,") || r.starts_with("bmm_lora,")));
    assert!(stderr(&out).contains("predicted crossover rank"));
}

#[test]
fn bench_latency_requires_rate_and_orders_inflections() {
    let dir = tmpdir("lat");
    let out = flora()
        .args([
            "bench", "latency", "--ranks", "1-2", "--d", "64", "--c1", "1e-7", "--c2", "1e-8",
            "--out", "/tmp/unused.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let table = dir.join("lat.csv");
    let out = flora()
        .args([
            "bench",
            "latency",
            "--ranks",
            "1-3",
            "--d",
            "64",
            "--c1",
            "2e-7",
            "--c2",
            "1e-7",
            "--rate",
            "8",
            "--rate",
            "15",
            "--n",
            "30",
            "--len",
            "5,40",
            "--seed",
            "5",
            "--out",
        ])
        .arg(&table)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 12, "2 strategies × 3 ranks × 2 rates:\n{text}");
    assert!(rows.iter().any(|r| r.contains(",8,")));
    assert!(rows.iter().any(|r| r.contains(",15,")));
}

#[test]
fn simulate_requires_seed_and_runs_with_env_seed() {
    let dir = tmpdir("sim");
    let metrics = dir.join("m.csv");
    // no seed anywhere: usage error from clap
    let out = flora()
        .args([
            "simulate", "--strategy", "flora", "--rank", "1", "--c1", "1e-7", "--c2", "1e-8",
            "--d", "64", "--n", "10", "--len", "5,20", "--out",
        ])
        .arg(&metrics)
        .env_remove("FLORA_SEED")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));

    // seed via FLORA_SEED
    let out = flora()
        .args([
            "simulate", "--strategy", "flora", "--rank", "1", "--c1", "1e-7", "--c2", "1e-8",
            "--d", "64", "--n", "10", "--len", "5,20", "--out",
        ])
        .arg(&metrics)
        .env("FLORA_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_meta_header(&metrics, 21);
}

#[test]
fn simulate_reads_workload_files_and_writes_trace() {
    let dir = tmpdir("simwl");
    let workload = dir.join("w.csv");
    std::fs::write(
        &workload,
        "id,adapter_id,prompt_len,output_len,arrival_time\n0,0,3,5,0\n1,1,4,6,0.25\n",
    )
    .unwrap();
    let metrics = dir.join("m.csv");
    let trace = dir.join("t.csv");
    let out = flora()
        .args([
            "simulate",
            "--workload",
        ])
        .arg(&workload)
        .args([
            "--strategy", "bmm_lora", "--rank", "2", "--c1", "1e-6", "--c2", "1e-7", "--d", "32",
            "--seed", "4", "--out",
        ])
        .arg(&metrics)
        .arg("--trace")
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let trace_text = std::fs::read_to_string(&trace).unwrap();
    // two requests, one row each after the meta and column headers
    assert_eq!(trace_text.lines().count(), 4, "{trace_text}");
    assert!(stderr(&out).contains("2 completed"));
}

#[test]
fn train_writes_monotone_trace_and_adapter() {
    let dir = tmpdir("train");
    let trace = dir.join("loss.csv");
    let adapter = dir.join("student.flra");
    let out = flora()
        .args([
            "train", "--kind", "flora", "--steps", "400", "--batch", "32", "--seed", "8", "--out",
        ])
        .arg(&trace)
        .arg("--save-adapter")
        .arg(&adapter)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_meta_header(&trace, 8);
    let text = std::fs::read_to_string(&trace).unwrap();
    let losses: Vec<f64> = text
        .lines()
        .skip(2)
        .map(|l| l.split_once(',').unwrap().1.parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 400);
    assert!(losses.last().unwrap() < losses.first().unwrap());
    assert!(adapter.exists());
    assert!(stderr(&out).contains("held-out mse"));
}

#[test]
fn adapter_create_inspect_verify_round_trip() {
    let dir = tmpdir("adapter");
    let path = dir.join("a.flra");
    let out = flora()
        .args(["adapter", "create", "--kind", "flora", "--d", "64", "--k", "64", "--r", "1",
               "--seed", "2", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let out = flora().args(["adapter", "inspect"]).arg(&path).output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    for expected in ["kind,flora", "d,64", "k,64", "r,1", "dtype,f64", "reduction,sum"] {
        assert!(text.contains(expected), "inspect output missing `{expected}`:\n{text}");
    }

    let out = flora().args(["adapter", "verify"]).arg(&path).output().unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("no-op at init: PASS"));
}

#[test]
fn adapter_verify_rejects_corrupted_payload() {
    let dir = tmpdir("corrupt");
    let path = dir.join("bad.flra");
    let out = flora()
        .args(["adapter", "create", "--kind", "lora", "--d", "8", "--k", "8", "--r", "2",
               "--seed", "1", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());

    // inject a NaN into the payload
    let mut bytes = std::fs::read(&path).unwrap();
    let offset = 21 + 8 * 3;
    bytes[offset..offset + 8].copy_from_slice(&f64::NAN.to_le_bytes());
    std::fs::write(&path, &bytes).unwrap();

    let out = flora().args(["adapter", "verify"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert!(
        err.contains("offset") || err.contains("element"),
        "failure should name the corrupt location: {err}"
    );
}

#[test]
fn inspect_matches_creation_flags_for_ia3_f32() {
    let dir = tmpdir("ia3");
    let path = dir.join("s.flra");
    let out = flora()
        .args(["adapter", "create", "--kind", "ia3", "--d", "16", "--k", "24", "--dtype", "f32",
               "--seed", "9", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let out = flora().args(["adapter", "inspect"]).arg(&path).output().unwrap();
    let text = stdout(&out);
    for expected in ["kind,ia3", "d,0", "k,24", "r,0", "dtype,f32"] {
        assert!(text.contains(expected), "inspect output missing `{expected}`:\n{text}");
    }
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tmpdir("config");
    let config = dir.join("serve.conf");
    std::fs::write(
        &config,
        "# serving settings\nstrategy = flora\nrank = 2\nd = 64\nc1 = 1e-7\nc2 = 1e-8\nn = 12\nlen = 5,20\nmax_batched_tokens = 512\n",
    )
    .unwrap();
    let metrics = dir.join("m.csv");
    let out = flora()
        .args(["simulate", "--config"])
        .arg(&config)
        .args(["--seed", "6", "--out"])
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().nth(2).unwrap().starts_with("flora,2,"), "{text}");

    // an explicit flag overrides the config entry
    let out = flora()
        .args(["simulate", "--config"])
        .arg(&config)
        .args(["--rank", "4", "--seed", "6", "--out"])
        .arg(&metrics)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&metrics).unwrap();
    assert!(text.lines().nth(2).unwrap().starts_with("flora,4,"), "{text}");

    let train_config = dir.join("train.conf");
    std::fs::write(&train_config, "kind = lora\nsteps = 50\nbatch = 16\n").unwrap();
    let trace = dir.join("loss.csv");
    let out = flora()
        .args(["train", "--config"])
        .arg(&train_config)
        .args(["--seed", "2", "--out"])
        .arg(&trace)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_eq!(std::fs::read_to_string(&trace).unwrap().lines().count(), 52);
}

#[test]
fn malformed_config_is_usage_error() {
    let dir = tmpdir("badconfig");
    let config = dir.join("bad.conf");
    std::fs::write(&config, "strategy flora\n").unwrap();
    let out = flora()
        .args(["simulate", "--config"])
        .arg(&config)
        .args(["--seed", "1", "--out", "/tmp/x.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
}

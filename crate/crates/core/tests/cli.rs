use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "version": 1,
  "model": {"kind": "hmm", "n_hidden": 3, "vocab_size": 4, "seed": 5},
  "prompt_len": 2,
  "gen_len": 8,
  "decode": {"tau": 0.9, "branch_budget": 2, "seed": 0},
  "repetitions": 2,
  "sweep": {"k": [0, 2], "devices": [1, 2]}
}"#;

fn lopa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lopa")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn decode_prints_tokens_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let out_dir = dir.path().join("out");
    let out = lopa(&["decode", "--config", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["generated"].as_array().unwrap().len(), 8);
    assert_eq!(v["tokens"], 8);
    assert!(out_dir.join("trace.json").exists());

    let sim = lopa(&[
        "simulate-bp",
        "--trace",
        out_dir.join("trace.json").to_str().unwrap(),
        "--devices",
        "4",
        "--protocol",
        "single-phase",
    ]);
    assert_eq!(sim.status.code(), Some(0));
    let s: serde_json::Value = serde_json::from_slice(&sim.stdout).unwrap();
    assert_eq!(s["forwards"], v["forwards"]);
    assert_eq!(s["consistency"]["committed_divergences"], 0);
}

#[test]
fn bench_and_sweep_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let a = dir.path().join("a");
    let out = lopa(&["bench", "--config", &cfg, "--out-dir", a.to_str().unwrap(), "--format", "csv,svg"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(a.join("suite.csv").exists() && a.join("tpf_vs_k.svg").exists());
    assert!(!a.join("suite.json").exists());
    let csv = std::fs::read_to_string(a.join("suite.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);

    let b = dir.path().join("b");
    let out = lopa(&[
        "sweep", "--config", &cfg, "--out-dir", b.to_str().unwrap(), "--k", "0,1,4", "--devices", "1,4",
        "--format", "csv", "--protocol", "single-phase",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(b.join("suite.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2 * 2);
    assert!(csv.lines().nth(1).unwrap().contains("single-phase"));
}

#[test]
fn oracle_passes_on_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", TINY);
    let out = lopa(&["oracle", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("violations: 0"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "u.json", &TINY.replace("\"repetitions\"", "\"repetitionz\""));
    let out = lopa(&["bench", "--config", &unknown]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("repetitionz"));

    let bad_tau = write_config(dir.path(), "t.json", &TINY.replace("\"tau\": 0.9", "\"tau\": 1.5"));
    let out = lopa(&["decode", "--config", &bad_tau]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("decode"));

    let out = lopa(&["bench", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = lopa(&["sweep", "--config", &write_config(dir.path(), "c.json", TINY), "--devices", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        lopa::bench::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}

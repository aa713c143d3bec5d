use std::process::Command;

use multicoding_cli::{cmd_run, cmd_sweep, AdversaryKind, ExperimentConfig, RETRY_ENV};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_multicoding"));
    c.env_remove(RETRY_ENV);
    c
}

fn lines(out: &[u8]) -> Vec<serde_json::Value> {
    String::from_utf8_lossy(out).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn run_emits_header_trials_and_summary() {
    let out = bin()
        .args(["run", "--graph", "directed-cycle:3", "--T", "2", "--trials", "5", "--adversary", "random", "--rate", "0.05"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v = lines(&out.stdout);
    assert_eq!(v.len(), 7);
    assert_eq!(v[0]["schema_version"], 1);
    assert_eq!(v[0]["config"]["graph"], "directed-cycle:3");
    assert_eq!(v[0]["manifest"]["compiler"], "rs");
    for (i, t) in v[1..6].iter().enumerate() {
        assert_eq!(t["trial"], i);
        assert!(t["flips"].as_u64().unwrap() <= (0.05 * 3.0 * 45.0) as u64);
    }
    assert_eq!(v[6]["summary"]["trials"], 5);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.conf");
    std::fs::write(&cfg, "# experiment\ngraph = complete:3\nT = 1\ntrials = 4\ncompiler = none\n").unwrap();
    let out = bin().args(["run", "--config", cfg.to_str().unwrap(), "--trials", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = lines(&out.stdout);
    assert_eq!(v[0]["config"]["trials"], 2);
    assert_eq!(v[0]["config"]["compiler"], "none");
    assert!(v[0]["manifest"].is_null());
    assert_eq!(v[3]["summary"]["success_rate"], 1.0);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "graph = complete:3\nwidth = 4\n").unwrap();
    let out = bin().args(["run", "--config", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("width: unknown key"));

    let out = bin().args(["run", "--adversary", "alt-reality"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("adversary: alt-reality needs compiler gv"));
    let out = bin().args(["run", "--rate", "1.5", "--adversary", "random"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("rate: "));
}

#[test]
fn metrics_rejects_arcless_files_and_labels_med() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.txt");
    std::fs::write(&empty, "# no arcs\nn 3\n").unwrap();
    let out = bin().args(["metrics", "--graph", empty.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());

    let path = dir.path().join("path.txt");
    std::fs::write(&path, "0 1\n1 2\n").unwrap();
    let out = bin().args(["metrics", "--graph", path.to_str().unwrap()]).output().unwrap();
    let v = &lines(&out.stdout)[0];
    assert_eq!((v["n"].as_u64(), v["m"].as_u64()), (Some(3), Some(2)));
    assert_eq!(v["signal_diameter"], 2);
    assert_eq!(v["med_method"], "exact");
}

#[test]
fn retry_budget_comes_from_the_environment() {
    let out = bin()
        .env(RETRY_ENV, "3")
        .args(["run", "--graph", "complete:4", "--compiler", "undirected", "--T", "1", "--trials", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(lines(&out.stdout)[0]["config"]["retry_budget"], 3);
    let out = bin().env(RETRY_ENV, "lots").args(["run"]).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains(RETRY_ENV));
}

#[test]
fn library_runs_are_byte_identical() {
    let cfg = ExperimentConfig {
        graph: "random-digraph:4:0.5".into(),
        adversary: AdversaryKind::Random,
        rate: Some(0.02),
        rounds: 3,
        trials: 8,
        seed: 99,
        ..Default::default()
    };
    let go = || {
        let mut buf = Vec::new();
        cmd_run(&cfg, &mut buf).unwrap();
        buf
    };
    assert_eq!(go(), go());
    let other = ExperimentConfig { seed: 100, ..cfg.clone() };
    let mut buf = Vec::new();
    cmd_run(&other, &mut buf).unwrap();
    assert_ne!(buf, go());
}

#[test]
fn sweep_writes_commented_csv() {
    let cfg = ExperimentConfig {
        graph: "bidirected-path:3".into(),
        adversary: AdversaryKind::Random,
        rounds: 2,
        trials: 4,
        rates: vec![0.0, 0.2],
        ..Default::default()
    };
    let mut buf = Vec::new();
    let rows = cmd_sweep(&cfg, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut it = text.lines();
    assert_eq!(it.next(), Some("# schema_version=1"));
    assert!(it.next().unwrap().starts_with("# config={"));
    assert_eq!(it.next(), Some("rate,trials,successes,success_rate,mean_flips,max_global_rate,max_per_edge_rate"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].success_rate, 1.0);
    assert!(rows[1].mean_flips > 0.0);
}

#[test]
fn instrumentation_csvs_are_written_per_trial() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        graph: "directed-path:3".into(),
        rounds: 2,
        trials: 3,
        instrument: Some(dir.path().to_str().unwrap().into()),
        ..Default::default()
    };
    let mut buf = Vec::new();
    cmd_run(&cfg, &mut buf).unwrap();
    for i in 0..3 {
        let text = std::fs::read_to_string(dir.path().join(format!("trial-{i}.csv"))).unwrap();
        assert!(text.starts_with("party,step,RP,B,AT,Y"));
    }
}

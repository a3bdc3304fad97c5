//! The `intraslice` binary: every subcommand end to end, and its exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_intraslice")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn subcommands_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let dense = d.join("dense.islc");
    let config = d.join("run.json");
    std::fs::write(&config, r#"{"calib": {"num_samples": 8, "seq_len": 32}}"#).unwrap();

    ok(&["train-toy", "--steps", "5", "--out", s(&dense)]);
    assert!(ok(&["eval-ppl", "--checkpoint", s(&dense)]).trim().parse::<f64>().unwrap() > 1.0);

    let pruned = d.join("pruned");
    let stdout = ok(&[
        "prune", "--checkpoint", s(&dense), "--config", s(&config), "--sparsity", "0.3", "--lambda-b", "0.8",
        "--seed", "1", "--no-repropagate", "--iterate-ffn", "on", "--out", s(&pruned),
    ]);
    assert!(stdout.contains("sparsity 0.3"), "{stdout}");
    for f in ["pruned.islc", "report.json", "transforms.json"] {
        assert!(pruned.join(f).exists(), "{f}");
    }
    let log = pruned.join("transforms.json");
    ok(&["fuse-check", "--original", s(&dense), "--transforms", s(&log), "--pruned", s(&pruned.join("pruned.islc"))]);

    let stem = d.join("ranks");
    ok(&[
        "rank-profile", "--checkpoint", s(&dense), "--layers", "0,1", "--sparsity", "0.5", "--mode", "inter",
        "--config", s(&config), "--out", s(&stem),
    ]);
    let csv = std::fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert!(csv.starts_with("layer,metric,variant,value") && csv.contains("inter_probe"));
    ok(&["rank-profile", "--checkpoint", s(&dense), "--mode", "intra", "--config", s(&config), "--out", s(&stem)]);

    for kind in ["random", "magnitude"] {
        let out = d.join(format!("{kind}.islc"));
        ok(&["baseline", "--checkpoint", s(&dense), "--kind", kind, "--config", s(&config), "--out", s(&out)]);
        assert!(out.exists());
    }

    // Configuration errors exit with 2.
    let bad = d.join("bad.json");
    std::fs::write(&bad, r#"{"sparsity": 0.3, "colour": 1}"#).unwrap();
    for args in [
        vec!["prune", "--checkpoint", s(&dense), "--sparsity", "1.5", "--out", s(&pruned)],
        vec!["prune", "--checkpoint", s(&dense), "--config", s(&bad), "--out", s(&pruned)],
        vec!["eval-ppl", "--checkpoint", s(&d.join("missing.islc"))],
        // A pruned checkpoint cannot be pruned again.
        vec!["prune", "--checkpoint", s(&pruned.join("pruned.islc")), "--out", s(&d.join("again"))],
    ] {
        assert_eq!(code(&run(&args)), 2, "{args:?}");
    }

    // A tampered transforms log is a numerical failure: exit 3.
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&log).unwrap()).unwrap();
    for x in v["layers"][0]["ffn"]["qr"]["data"].as_array_mut().unwrap() {
        *x = serde_json::json!(x.as_f64().unwrap() + 0.05);
    }
    let tampered = d.join("tampered.json");
    std::fs::write(&tampered, v.to_string()).unwrap();
    let out = run(&["fuse-check", "--original", s(&dense), "--transforms", s(&tampered), "--pruned", s(&pruned.join("pruned.islc"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

use std::path::Path;
use std::process::{Command, Output};

fn fedhlm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedhlm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = fedhlm(&["run", "--out-dir", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("mode=fedhlm tokens=18000 "), "{stdout}");

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
    let trace = std::fs::read_to_string(out.join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 18_000);
    let clients = std::fs::read_to_string(out.join("clients.csv")).unwrap();
    assert_eq!(clients.lines().count(), 21);

    // the echoed config reproduces the run byte for byte
    let again = dir.path().join("again");
    let o = fedhlm(&[
        "run",
        "--config",
        arg(&out.join("config.toml")),
        "--out-dir",
        arg(&again),
    ]);
    assert!(o.status.success());
    for f in ["metrics.csv", "trace.jsonl", "clients.csv", "config.toml"] {
        assert_eq!(
            std::fs::read(out.join(f)).unwrap(),
            std::fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[partition]\ndirichlet_alpha = -1.0\n").unwrap();
    let o = fedhlm(&[
        "run",
        "--config",
        arg(&cfg),
        "--out-dir",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dirichlet_alpha"));

    let o = fedhlm(&["run", "--config", arg(&dir.path().join("missing.toml"))]);
    assert_eq!(o.status.code(), Some(2));

    std::fs::write(&cfg, "[peer]\nsimilarity_treshold = 0.9\n").unwrap();
    let o = fedhlm(&["run", "--config", arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));

    let o = fedhlm(&["baseline", "--mode", "fedhlm"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "rounds = 1\n").unwrap();
    let o = fedhlm(&[
        "run",
        "--config",
        arg(&cfg),
        "--out-dir",
        arg(&blocker.join("sub")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn baseline_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "rounds = 3\n").unwrap();

    let o = fedhlm(&[
        "baseline",
        "--config",
        arg(&cfg),
        "--mode",
        "rand",
        "--out-dir",
        arg(&dir.path().join("b")),
    ]);
    assert!(o.status.success());
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(
        stdout.contains("mode=rand") && stdout.contains("p2p=0 edge=0"),
        "{stdout}"
    );

    let sweep = dir.path().join("s");
    let o = fedhlm(&[
        "sweep",
        "--config",
        arg(&cfg),
        "--values",
        "10,0.1",
        "--out-dir",
        arg(&sweep),
    ]);
    assert!(o.status.success());
    let table = std::fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(sweep.join("alpha_0.1").join("metrics.csv").exists());

    let cost = dir.path().join("c");
    let o = fedhlm(&["cost", "--out-dir", arg(&cost)]);
    assert!(o.status.success());
    let policy = std::fs::read_to_string(cost.join("cost_policy.csv")).unwrap();
    assert_eq!(policy.lines().count(), 1 + 4 * 21);
    let curve = std::fs::read_to_string(cost.join("cache_curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 1 + 7);
}

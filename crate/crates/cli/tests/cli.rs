use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn drpi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drpi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_env_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"kind": "garnet", "n_states": 8, "n_actions": 3, "branching": 2, "gamma": 0.9, "seed": 7}"#,
    )
    .unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        let o = drpi(&["gen-env", "--spec", path(&spec), "--out", path(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn run_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = drpi(&[
        "run",
        "--config",
        path(&config("cliff_dr_mpi.json")),
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for artifact in ["run.csv", "summary.json", "curves.svg"] {
        assert!(out.join(artifact).is_file(), "missing {artifact}");
    }
    let svg = dir.path().join("eps.svg");
    let o = drpi(&[
        "plot",
        "--csv",
        path(&out.join("run.csv")),
        "--cols",
        "eps_max,delta_sup",
        "--out",
        path(&svg),
        "--linear",
    ]);
    assert!(o.status.success());
    assert!(std::fs::read_to_string(&svg).unwrap().contains("eps_max"));

    let o = drpi(&[
        "plot",
        "--csv",
        path(&out.join("run.csv")),
        "--cols",
        "nope",
        "--out",
        path(&svg),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn every_shipped_config_parses() {
    for entry in std::fs::read_dir(config("")).unwrap() {
        let text = std::fs::read_to_string(entry.unwrap().path()).unwrap();
        drpi::harness::ExperimentConfig::from_json(&text).unwrap();
    }
}

#[test]
fn verify_reports_pass_lines() {
    let o = drpi(&["verify", "--suite", "taylor", "--seed", "3"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")), "{stdout}");
}

#[test]
fn unknown_suite_is_rejected() {
    let o = drpi(&["verify", "--suite", "everything"]);
    assert!(!o.status.success());
}

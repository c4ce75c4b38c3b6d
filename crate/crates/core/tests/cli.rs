use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fibersim::cli::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fibersim"))
}

fn default_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.cfg")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

#[test]
fn verify_default_config_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "verify",
        "--config",
        default_config().to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{table}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(table.contains("l0_skew_adjoint"));
    assert!(!table.contains("FAIL"));
    let m = RunManifest::from_json(&fs::read_to_string(dir.path().join("manifest.json")).unwrap())
        .unwrap();
    assert!(m.failed_checks().is_empty());
}

#[test]
fn verify_reports_broken_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(default_config()).unwrap().replace(
        "beam.lambda = bump",
        "beam.lambda = tabulated\nbeam.lambda_table = 0.2,0.4,0.1,0",
    );
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, text).unwrap();
    let out = run(&[
        "verify",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda_invariants"));
}

#[test]
fn config_errors_name_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("e.cfg");
    fs::write(
        &cfg,
        "beam.l=1\nbeam.b=1\ntime.T=1\ntime.dt=0.3\ngrid.n=16\n",
    )
    .unwrap();
    let out = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("line 4") && err.contains("time.dt") && err.contains("dt must divide T"),
        "{err}"
    );
}

#[test]
fn simulate_is_byte_stable_and_honours_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.cfg");
    fs::write(
        &cfg,
        "beam.l=1\nbeam.b=1\ngrid.n=6\ntime.T=0.01\ntime.dt=0.001\nrun.observables=1:3:u,1:1:v\n",
    )
    .unwrap();
    let go = |name: &str, seed: &str| -> PathBuf {
        let out = dir.path().join(name);
        let o = run(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--paths",
            "3",
            "--seed",
            seed,
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = go("a", "5");
    let b = go("b", "5");
    let c = go("c", "6");
    for f in ["trajectory.csv", "observables.csv", "statistics.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_ne!(
        fs::read(a.join("observables.csv")).unwrap(),
        fs::read(c.join("observables.csv")).unwrap()
    );

    let traj = fs::read_to_string(a.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("path,t,s,channel,u,v"));
    // 3 paths, 11 time points, 8 nodes, 3 channels
    assert_eq!(lines.count(), 3 * 11 * 8 * 3);
    let obs = fs::read_to_string(a.join("observables.csv")).unwrap();
    assert_eq!(obs.lines().next(), Some("path,t,observable_id,value"));
    assert_eq!(obs.lines().count() - 1, 3 * 11 * 2);

    let m = RunManifest::from_json(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m.seed, 5);
    assert!(m.config.contains("run.N=3"));
    assert!(m.config.contains("noise.seed=5"));
}

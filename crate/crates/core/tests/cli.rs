//! The `avguard` binary: exit codes, config handling and the artifact
//! contract of a command directory.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use avguard::harness::{ExperimentConfig, RunManifest};

fn avguard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avguard")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn default_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml").to_string_lossy().into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("cfg.toml");
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn shipped_config_is_the_default() {
    let cfg = ExperimentConfig::load(Path::new(&default_config())).unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&avguard(&["--help"])), 0);
    assert_eq!(code(&avguard(&["--version"])), 0);
}

#[test]
fn usage_errors_are_config_errors() {
    assert_eq!(code(&avguard(&[])), 2);
    assert_eq!(code(&avguard(&["fly", "--config", &default_config()])), 2);
    assert_eq!(code(&avguard(&["sim-baseline"])), 2);
}

#[test]
fn bad_config_files_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    assert_eq!(code(&avguard(&["sim-baseline", "--config", missing.to_str().unwrap()])), 2);

    let cases = [
        ("[sim]\nn_vehicles = ", "line"),
        ("threads = 1\n\n[sim]\nn_vehicels = 21\n", "line 4"),
        ("[sim]\nn_vehicles = 0\n", "n_vehicles"),
        ("[seeds]\nsim = 1\n[sim]\nseed = 2\n", "seed"),
    ];
    for (body, needle) in cases {
        let cfg = write_config(dir.path(), body);
        let out = avguard(&["sim-baseline", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(code(&out), 2, "{body:?}: {}", stderr(&out));
        assert!(stderr(&out).contains(needle), "{body:?}: {}", stderr(&out));
    }
}

#[test]
fn bad_seed_overrides_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    for o in ["nosuchseed=3", "sim", "sim=-1", "sim=abc"] {
        let out = avguard(&["sim-baseline", "--config", &default_config(), "--out", dir.path().to_str().unwrap(), "--seed-override", o]);
        assert_eq!(code(&out), 2, "{o}: {}", stderr(&out));
    }
}

#[test]
fn defend_without_learned_noise_is_a_stage_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = avguard(&["defend", "--config", &default_config(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("learn-noise"), "{}", stderr(&out));
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn sim_baseline_artifacts_are_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = avguard(&["sim-baseline", "--config", &default_config(), "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out.join("sim-baseline")
    };
    let a = run("a");
    assert_eq!(
        listing(&a),
        ["manifest.toml", "speed_benign.svg", "speed_no_av.svg", "trajectory_benign.csv", "trajectory_no_av.csv"]
    );
    let manifest = RunManifest::read(&a.join("manifest.toml")).unwrap();
    let mut listed = manifest.files().into_iter().map(str::to_owned).collect::<Vec<_>>();
    listed.push("manifest.toml".into());
    listed.sort();
    assert_eq!(listed, listing(&a));
    assert_eq!(manifest.config, ExperimentConfig { out_dir: dir.path().join("a"), ..ExperimentConfig::default() });
    assert!(manifest.checks.iter().all(|c| c.passed));

    let b = run("b");
    for f in ["trajectory_benign.csv", "trajectory_no_av.csv"] {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn failed_checks_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[checks]\nmin_wave_std = 100.0\n");
    let out = avguard(&["sim-baseline", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL no-AV stop-and-go waves"));
}

#[test]
fn seed_override_changes_the_episode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = default_config();
    let run = |sub: &str, extra: &[&str]| {
        let out = dir.path().join(sub);
        let mut args = vec!["sim-baseline", "--config", &cfg, "--out", out.to_str().unwrap()];
        args.extend(extra);
        assert_eq!(code(&avguard(&args)), 0);
        fs::read(out.join("sim-baseline/trajectory_no_av.csv")).unwrap()
    };
    assert!(run("a", &[]) != run("b", &["--seed-override", "sim=1"]));
}

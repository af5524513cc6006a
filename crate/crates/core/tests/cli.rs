mod common;

use std::path::Path;
use std::process::{Command, Output};

fn rydlock(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rydlock")).args(args).output().unwrap()
}

fn write_cfg(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn malformed_config_fails_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let out_s = out.to_str().unwrap();
    for (name, text) in [
        ("broken.cfg", "[servo\nduration_s = "),
        ("unknown.cfg", "[servo]\nduraton_s = 10.0\n"),
        ("negative.cfg", "[scheme]\ngamma3_hz = -1.0\n"),
    ] {
        let cfg = write_cfg(tmp.path(), name, text);
        for cmd in ["scan", "run", "transfer"] {
            let o = rydlock(&[cmd, "--config", &cfg, "--out", out_s]);
            assert_eq!(o.status.code(), Some(1), "{cmd} {name}: {}", stderr(&o));
            assert!(stderr(&o).starts_with("error: "));
            assert!(!out.exists(), "{cmd} {name} left outputs behind");
        }
    }
}

#[test]
fn unreadable_config_is_a_config_error() {
    let o = rydlock(&["scan", "--config", "/nonexistent/none.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot read"));
}

#[test]
fn single_transfer_level_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = common::scenario_path("transfer_ch1.cfg");
    let o = rydlock(&[
        "transfer",
        "--config",
        cfg.to_str().unwrap(),
        "--levels",
        "1e6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn high_level_scan_warns_but_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::scenario_path("scan_95F.cfg");
    let o = rydlock(&["scan", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("beyond demonstrated range"));
    for f in ["error_curve_axis3.csv", "lineshape_axis3.csv", "scan_summary.txt", "config_echo.txt"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let summary = std::fs::read_to_string(tmp.path().join("scan_summary.txt")).unwrap();
    assert!(summary.contains("beyond demonstrated range"));
}

#[test]
fn quiet_run_then_adev_of_its_counter_file() {
    let tmp = tempfile::tempdir().unwrap();
    let run_dir = tmp.path().join("run");
    let cfg = common::scenario_path("quiet.cfg");
    let o = rydlock(&["run", "--config", cfg.to_str().unwrap(), "--out", run_dir.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let adev = std::fs::read_to_string(run_dir.join("adev_ch3.csv")).unwrap();
    for line in adev.lines().skip(1) {
        let sigma: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(sigma, 0.0);
    }

    let adev_dir = tmp.path().join("adev");
    let o = rydlock(&[
        "adev",
        "--input",
        run_dir.join("counter.csv").to_str().unwrap(),
        "--out",
        adev_dir.to_str().unwrap(),
        "--max-tau",
        "16",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let again = std::fs::read_to_string(adev_dir.join("adev_ch3.csv")).unwrap();
    assert_eq!(again.lines().count(), 6);
}

#[test]
fn strict_run_exits_two_on_lock_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        "lost.cfg",
        "[servo]\nduration_s = 3.0\n[servo.ch3]\ninitial_offset_hz = 4e7\n[analysis]\nadev = false\n",
    );
    let out = tmp.path().join("out");
    let o = rydlock(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("lock lost"));
    let o = rydlock(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--strict"]);
    assert_eq!(o.status.code(), Some(2));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("ch3.lock_acquired = false"));
}

#[test]
fn seed_override_must_fit_in_toml_integer() {
    let cfg = common::scenario_path("quiet.cfg");
    let o = rydlock(&["run", "--config", cfg.to_str().unwrap(), "--seed", "18446744073709551615"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"));
}

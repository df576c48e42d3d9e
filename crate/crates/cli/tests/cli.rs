use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn burstlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_burstlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn bad_parameters_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = burstlab(&["simulate", "s", "--frames", "0", "--patch", "32"], dir.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_frames"));
    assert_eq!(code(&burstlab(&["simulate"], dir.path())), 2);
    assert_eq!(code(&burstlab(&["project", "a.pfm", "b.pfm", "--mode", "sideways"], dir.path())), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("typo.cfg"), "sim.frames = 3\n").unwrap();
    fs::write(dir.path().join("garbled.cfg"), "sim.n_frames three\n").unwrap();
    for cfg in ["typo.cfg", "garbled.cfg"] {
        let out = burstlab(&["--config", cfg, "simulate", "s", "--patch", "32"], dir.path());
        assert_eq!(code(&out), 2, "{cfg}");
    }
}

#[test]
fn missing_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&burstlab(&["fuse", "nowhere", "out.pfm"], dir.path())), 3);
    assert_eq!(code(&burstlab(&["metrics", "a.pfm", "b.pfm"], dir.path())), 3);
    fs::create_dir(dir.path().join("empty")).unwrap();
    assert_eq!(code(&burstlab(&["dataset", "empty", "data"], dir.path())), 3);
}

#[test]
fn divergence_exits_4_with_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out = burstlab(
        &["distill", "--out", "trace.csv", "--size", "16", "--steps", "50", "--lr", "1e6"],
        dir.path(),
    );
    assert_eq!(code(&out), 4);
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2, "{trace}");
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "sim.n_frames = 3\nsim.sr_factor = 2\nsim.patch = 32\n").unwrap();
    let out = burstlab(&["--config", "run.cfg", "simulate", "s", "--frames", "2"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("s/burst/burst.json")).unwrap()).unwrap();
    assert_eq!(meta["n_frames"], 2);
    assert_eq!(meta["height"], 16);
}

#[test]
fn fuse_recovers_simulated_scene() {
    let dir = tempfile::tempdir().unwrap();
    let sim = burstlab(
        &["simulate", "s", "--patch", "64", "--frames", "6", "--sr", "2", "--noiseless", "--seed", "9"],
        dir.path(),
    );
    assert_eq!(code(&sim), 0, "{}", String::from_utf8_lossy(&sim.stderr));
    assert_eq!(code(&burstlab(&["fuse", "s/burst", "fused.pfm"], dir.path())), 0);
    let out = burstlab(&["metrics", "s/gt.pfm", "fused.pfm", "--json", "m.json"], dir.path());
    assert_eq!(code(&out), 0);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    let psnr = m["psnr"].as_f64().unwrap();
    assert!(psnr > 33.0, "psnr {psnr}");
}

#[test]
fn ablate_hf_reports_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let out = burstlab(&["ablate-hf", "ab", "--size", "32", "--steps", "50"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("ab/report.json")).unwrap()).unwrap();
    assert_eq!(report["ordering_holds"], true);
    for mode in ["data_only", "naive_vsd", "hf_vsd"] {
        assert!(dir.path().join(format!("ab/trace_{mode}.csv")).exists(), "{mode}");
    }
}

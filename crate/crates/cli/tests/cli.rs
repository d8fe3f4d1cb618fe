use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use aft_cli::Scenario;

fn small() -> Scenario {
    let mut s = Scenario::default();
    s.trajectory.n_sequences = 1;
    s.trajectory.n_frames = 3;
    s
}

fn write_scenario(dir: &Path, scenario: &Scenario) -> std::path::PathBuf {
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(scenario).unwrap()).unwrap();
    path
}

fn aft(dir: &Path, scenario: &Scenario, args: &[&str], out: &str) -> Output {
    let path = write_scenario(dir, scenario);
    Command::new(env!("CARGO_BIN_EXE_aft"))
        .args(args)
        .arg("--scenario")
        .arg(&path)
        .arg("--out")
        .arg(dir.join(out))
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_viewpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small();
    s.camera.viewpoint = "overhead".into();
    let o = aft(dir.path(), &s, &["track"], "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown viewpoint 'overhead'"), "{}", stderr(&o));
}

#[test]
fn single_partition_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small();
    s.reference.partitions = 1;
    let o = aft(dir.path(), &s, &["build-reference"], "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("partitions"), "{}", stderr(&o));
}

#[test]
fn missing_model_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small();
    s.reference.model = Some(dir.path().join("absent.aftm"));
    let o = aft(dir.path(), &s, &["track"], "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.aftm"), "{}", stderr(&o));
}

#[test]
fn unknown_ablation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = aft(dir.path(), &small(), &["track", "--ablate", "no-partitions"], "out");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown ablation"), "{}", stderr(&o));
}

#[test]
fn strict_mode_exits_3_on_tracking_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small();
    s.noise.dropout = 0.999;
    let lenient = aft(dir.path(), &s, &["track"], "lenient");
    assert!(lenient.status.success(), "{}", stderr(&lenient));
    let strict = aft(dir.path(), &s, &["track", "--strict"], "strict");
    assert_eq!(strict.status.code(), Some(3), "{}", stderr(&strict));
    // Results are still written before the exit.
    assert!(dir.path().join("strict/frames.jsonl").is_file());
}

#[test]
fn replay_of_exported_frames_matches_tracking() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = small();
    s.export_frames = true;
    let tracked = aft(dir.path(), &s, &["track"], "track");
    assert!(tracked.status.success(), "{}", stderr(&tracked));
    let frames = dir.path().join("track/frames");
    let replayed = aft(dir.path(), &s, &["replay", "--frames", frames.to_str().unwrap()], "replay");
    assert!(replayed.status.success(), "{}", stderr(&replayed));
    for name in ["frames.jsonl", "summary.json"] {
        let a = fs::read_to_string(dir.path().join("track").join(name)).unwrap();
        let b = fs::read_to_string(dir.path().join("replay").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn ablation_flags_are_echoed_in_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = aft(dir.path(), &small(), &["track", "--ablate", "geometry-only,no-descriptor-update"], "out");
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let flags = &summary["scenario"]["pipeline"]["ablation"];
    assert_eq!(flags["geometry_only"], true);
    assert_eq!(flags["no_descriptor_update"], true);
    assert_eq!(flags["direct_ik"], false);
}

#[test]
fn build_reference_writes_model_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let o = aft(dir.path(), &small(), &["build-reference"], "out");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("out/model.aftm").is_file());
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out/model.json")).unwrap()).unwrap();
    assert_eq!(sidecar["scenario"]["seed"], 1);

    // A saved model can stand in for the built one.
    let mut s = small();
    s.reference.model = Some(dir.path().join("out/model.aftm"));
    let a = aft(dir.path(), &s, &["track"], "from_file");
    let b = aft(dir.path(), &small(), &["track"], "built");
    assert!(a.status.success() && b.status.success());
    let lines = |d: &str| {
        fs::read_to_string(dir.path().join(d).join("frames.jsonl")).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>()
    };
    assert_eq!(lines("from_file"), lines("built"));
}

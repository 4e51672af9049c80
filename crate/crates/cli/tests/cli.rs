use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vsyn::forensics::{read_events, AlarmKind};
use vsyn::synopsis::SynopsisManifest;
use vsyn::synthgen::{AgentSpec, SceneScript};
use vsyn::RunSummary;

fn vsyn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vsyn")).args(args).output().expect("spawn vsyn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn walker(y: f64, start: u64, end: u64) -> AgentSpec {
    AgentSpec {
        size: [16, 12],
        start: [4.0, y],
        velocity: [2.0, 0.0],
        start_frame: start,
        end_frame: end,
        level: 220.0,
        texture: 30.0,
    }
}

/// Renders `script` through the hidden `synthgen` subcommand.
fn render(dir: &Path, name: &str, script: &SceneScript) -> std::path::PathBuf {
    let script_path = dir.join(format!("{name}.json"));
    fs::write(&script_path, script.to_json().unwrap()).unwrap();
    let out = dir.join(name);
    let r = vsyn(&["--quiet", "synthgen", s(&script_path), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    out
}

fn two_walkers(frames: u64) -> SceneScript {
    let mut sc = SceneScript::new(160, 96, frames, 18.0);
    sc.seed = 4;
    sc.background.texture = 20.0;
    sc.agents = vec![walker(10.0, 110, 170), walker(60.0, 130, 180)];
    sc
}

#[test]
fn help_lists_the_documented_flags() {
    let top = vsyn(&["--help"]);
    assert_eq!(code(&top), 0);
    let text = String::from_utf8_lossy(&top.stdout);
    for cmd in ["synopsize", "forgery", "camera-monitor", "anomaly", "trespass", "eval", "--config", "--quiet"] {
        assert!(text.contains(cmd), "top-level help lacks {cmd}");
    }
    assert!(!text.contains("synthgen"));
    let syn = String::from_utf8_lossy(&vsyn(&["synopsize", "--help"]).stdout).into_owned();
    for flag in ["--out", "--cluster-size", "--min-area-frac", "--bg-history", "--tracks-out", "--sequential"] {
        assert!(syn.contains(flag), "synopsize help lacks {flag}");
    }
    let fg = String::from_utf8_lossy(&vsyn(&["forgery", "--help"]).stdout).into_owned();
    assert!(fg.contains("--fail-on-alarm"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&vsyn(&["synopsize", "in", "--out", s(&out), "--cluster-size", "0"])), 2);
    assert_eq!(code(&vsyn(&["frobnicate"])), 2);
    let missing = vsyn(&["synopsize", s(&dir.path().join("nope")), "--out", s(&out)]);
    assert_eq!(code(&missing), 1);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("error"));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"synopsis": {"clustersize": 3}}"#).unwrap();
    assert_eq!(code(&vsyn(&["--config", s(&bad), "synopsize", "in", "--out", s(&out)])), 1);
}

#[test]
fn synopsize_writes_frames_manifest_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let input = render(dir.path(), "scene", &two_walkers(200));
    let out = dir.path().join("syn");
    let tracks = dir.path().join("tracks.json");
    let r = vsyn(&["synopsize", s(&input), "--out", s(&out), "--cluster-size", "2", "--tracks-out", s(&tracks)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let stderr = String::from_utf8_lossy(&r.stderr);
    assert!(stderr.contains("FPS") && stderr.contains("FR"), "{stderr}");

    let manifest: SynopsisManifest = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.summary.tov, 200);
    assert_eq!(manifest.summary.tubes, 2);
    let frames = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(frames as u64, manifest.summary.tsv);

    let summary: RunSummary = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.frames, 200);
    assert_eq!(summary.frame_reduction, Some(manifest.summary.fr));
    assert!((summary.fps - summary.frames as f64 / summary.seconds).abs() < 1e-9 * summary.fps.max(1.0));

    // The tracks score perfectly against the generator's own annotations.
    let report = dir.path().join("report.json");
    let curve = dir.path().join("curve.csv");
    let annotations = input.join("annotations.json");
    let r = vsyn(&[
        "--quiet", "eval", "--detections", s(&tracks), "--annotations", s(&annotations), "--out", s(&report), "--curve", s(&curve),
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(report["average_precision"].as_f64().unwrap() > 0.9);
    assert!(fs::read_to_string(&curve).unwrap().starts_with("i,precision,recall\n"));
}

#[test]
fn eval_of_annotations_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let input = render(dir.path(), "scene", &two_walkers(180));
    let annotations = input.join("annotations.json");
    let report = dir.path().join("r.json");
    let r = vsyn(&["--quiet", "eval", "--detections", s(&annotations), "--annotations", s(&annotations), "--out", s(&report)]);
    assert_eq!(code(&r), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(report["average_precision"].as_f64(), Some(1.0));
}

#[test]
fn synopsize_is_reproducible_across_execution_modes() {
    let dir = tempfile::tempdir().unwrap();
    let input = render(dir.path(), "scene", &two_walkers(200));
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&vsyn(&["-q", "synopsize", s(&input), "--out", s(&a)])), 0);
    assert_eq!(code(&vsyn(&["-q", "synopsize", s(&input), "--out", s(&b), "--sequential"])), 0);
    let manifest = |d: &Path| {
        let m: SynopsisManifest = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
        m.without_timing()
    };
    assert_eq!(manifest(&a), manifest(&b));
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in names.iter().filter(|n| n.to_string_lossy().ends_with(".pgm")) {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
}

#[test]
fn forgery_scan_of_a_clean_pan_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SceneScript::new(160, 120, 120, 18.0);
    sc.seed = 8;
    sc.background.texture = 40.0;
    sc.background.pan = [2.0, 0.0];
    let input = render(dir.path(), "pan", &sc);
    let alarms = dir.path().join("alarms.jsonl");
    let r = vsyn(&["forgery", s(&input), "--out", s(&alarms), "--fail-on-alarm"]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(fs::read_to_string(&alarms).unwrap(), "");
}

#[test]
fn trespass_alarm_sets_exit_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SceneScript::new(160, 96, 200, 18.0);
    sc.seed = 5;
    sc.background.texture = 20.0;
    sc.agents = vec![walker(40.0, 110, 170)];
    let input = render(dir.path(), "scene", &sc);
    let zones = dir.path().join("zones.json");
    fs::write(&zones, r#"[{"id": "gate", "points": [[60, 30], [110, 30], [110, 70], [60, 70]]}]"#).unwrap();
    let alarms = dir.path().join("alarms.jsonl");
    let args = ["trespass", s(&input), "--zones", s(&zones), "--out", s(&alarms)];
    assert_eq!(code(&vsyn(&args)), 0);
    let events = read_events(&fs::read_to_string(&alarms).unwrap()).unwrap();
    assert!(!events.is_empty() && events.iter().all(|e| e.kind == AlarmKind::Trespass));
    let mut strict = args.to_vec();
    strict.push("--fail-on-alarm");
    assert_eq!(code(&vsyn(&strict)), 3);
}

#[test]
fn anomaly_test_rejects_a_matrix_of_another_size() {
    let dir = tempfile::tempdir().unwrap();
    let train = render(dir.path(), "train", &SceneScript::new(64, 48, 12, 18.0));
    let test = render(dir.path(), "test", &SceneScript::new(80, 48, 12, 18.0));
    let matrix = dir.path().join("matrix.json");
    assert_eq!(code(&vsyn(&["-q", "anomaly", "train", s(&train), "--out", s(&matrix)])), 0);
    let alarms = dir.path().join("a.jsonl");
    assert_eq!(code(&vsyn(&["-q", "anomaly", "test", s(&train), "--matrix", s(&matrix), "--out", s(&alarms)])), 0);
    let r = vsyn(&["-q", "anomaly", "test", s(&test), "--matrix", s(&matrix), "--out", s(&alarms)]);
    assert_eq!(code(&r), 1);
}

#[test]
fn camera_monitor_reports_a_covered_lens() {
    use vsyn::synthgen::{EditKind, EditSpec};
    let dir = tempfile::tempdir().unwrap();
    let mut sc = SceneScript::new(96, 72, 200, 18.0);
    sc.seed = 6;
    sc.background.texture = 20.0;
    sc.edits = vec![EditSpec { kind: EditKind::Occlude, start: 150, len: 20, at: None, level: Some(0) }];
    let input = render(dir.path(), "scene", &sc);
    let alarms = dir.path().join("a.jsonl");
    let r = vsyn(&["camera-monitor", s(&input), "--out", s(&alarms), "--fail-on-alarm"]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    let events = read_events(&fs::read_to_string(&alarms).unwrap()).unwrap();
    assert!(events.iter().any(|e| e.kind == AlarmKind::CameraTamper && e.start_frame >= 150));
}

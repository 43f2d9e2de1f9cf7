use std::path::Path;
use std::process::{Command, Output};

use apc::synth::Benchmark;
use apc::{save_scene, Frame, ObjectAbstraction, SceneAbstraction, Vec3};
use serde_json::Value;

fn apc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_apc"))
        .args(args)
        .env_remove("APC_VLM_BASE_URL")
        .env_remove("APC_VISION_BASE_URL")
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generate a benchmark and keep its first `n` items.
fn small_bench(dir: &Path, task: &str, n: usize) -> std::path::PathBuf {
    let out = apc(&["gen", "--task", task, "--seed", "3", "--out", s(dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let path = dir.join("benchmark.json");
    let mut bench = Benchmark::load(&path).unwrap();
    bench.items.truncate(n);
    bench.save(&path).unwrap();
    path
}

#[test]
fn gen_writes_a_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let out = apc(&["gen", "--task", "closer", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("wrote 300 items"));
    let bench = Benchmark::load(&dir.path().join("benchmark.json")).unwrap();
    assert_eq!(bench.items.len(), 300);
    assert_eq!(bench.seed, Some(0));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = apc(&["gen", "--task", "closer", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn help_exits_cleanly() {
    let out = apc(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("probe"));
}

#[test]
fn run_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let bench = small_bench(dir.path(), "leftright", 6);
    let run_dir = dir.path().join("run");
    let out = apc(&["run", "--bench", s(&bench), "--mode", "numerical", "--jobs", "2", "--out", s(&run_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).contains("leftright"), "{}", stdout(&out));

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["benchmark"]["items"], 6);
    assert_eq!(manifest["pipeline"]["mode"], "numerical");
    assert_eq!(manifest["started_unix"], 1_700_000_000u64);

    let report_dir = dir.path().join("report");
    let results = run_dir.join("results.jsonl");
    let out = apc(&["report", "--results", s(&results), "--out", s(&report_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(stdout(&out).lines().any(|l| l.starts_with("all ")), "{}", stdout(&out));
    assert!(report_dir.join("curve.csv").exists());
}

#[test]
fn replay_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let bench = small_bench(dir.path(), "visibility", 4);
    let rec = dir.path().join("rec");
    let out = apc(&["run", "--bench", s(&bench), "--out", s(&rec)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let d = dir.path().join(name);
        // SOURCE_DATE_EPOCH differs from the recording, yet timestamps match
        let out = Command::new(env!("CARGO_BIN_EXE_apc"))
            .args(["run", "--bench", s(&bench), "--replay", s(&rec), "--out", s(&d)])
            .env("SOURCE_DATE_EPOCH", if name == "a" { "1800000000" } else { "1900000000" })
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        files.push((std::fs::read(d.join("results.jsonl")).unwrap(), std::fs::read(d.join("manifest.json")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0].0, std::fs::read(rec.join("results.jsonl")).unwrap());
}

#[test]
fn hidden_subject_exits_with_item_failure() {
    let dir = tempfile::tempdir().unwrap();
    let path = small_bench(dir.path(), "leftright", 1);
    let mut bench: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    {
        let scene = &mut bench["items"][0]["scene"];
        let reference = scene["reference"].as_str().unwrap().to_string();
        let subject = scene["subjects"][0].as_str().unwrap().to_string();
        let cam: Vec<f64> = serde_json::from_value(scene["camera"]["position"].clone()).unwrap();
        let objects = scene["objects"].as_array_mut().unwrap();
        let r: Vec<f64> = serde_json::from_value(
            objects.iter().find(|o| o["label"] == reference.as_str()).unwrap()["position"].clone(),
        )
        .unwrap();
        // same camera ray as the reference, half again as far: fully occluded
        let behind: Vec<f64> = (0..3).map(|i| cam[i] + 1.5 * (r[i] - cam[i])).collect();
        let o = objects.iter_mut().find(|o| o["label"] == subject.as_str()).unwrap();
        o["position"] = serde_json::json!(behind);
    }
    std::fs::write(&path, serde_json::to_string_pretty(&bench).unwrap()).unwrap();

    let run_dir = dir.path().join("run");
    let out = apc(&["run", "--bench", s(&path), "--out", s(&run_dir)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[E_ITEMS]"), "{}", stderr(&out));
    let line = std::fs::read_to_string(run_dir.join("results.jsonl")).unwrap();
    let record: Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    let failure = record["perms"][0]["failure"].as_str().unwrap();
    assert!(failure.starts_with("mask_empty"), "{failure}");
}

#[test]
fn render_a_scene_file() {
    let dir = tempfile::tempdir().unwrap();
    let scene = SceneAbstraction::new(
        vec![
            ObjectAbstraction::new("viewer", Vec3::new(0.0, 0.0, 3.0), -Vec3::z()),
            ObjectAbstraction::new("mug", Vec3::new(1.0, 0.0, 2.0), Vec3::x()),
            ObjectAbstraction::camera(),
        ],
        Frame::CameraEgocentric,
    )
    .unwrap();
    let path = dir.path().join("scene.json");
    std::fs::write(&path, save_scene(&scene)).unwrap();
    let out = apc(&["render", "--scene", s(&path), "--ref", "viewer", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let first = apc::render::PALETTE[0].name();
    assert!(stdout(&out).contains(&format!("{first} box: mug")), "{}", stdout(&out));
    let png = std::fs::read(dir.path().join("render.png")).unwrap();
    assert!(png.starts_with(b"\x89PNG"));

    let out = apc(&["render", "--scene", s(&path), "--ref", "giraffe", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[E_CONFIG]"), "{}", stderr(&out));
}

#[test]
fn configuration_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = apc(&["probe", "--sweep", "10", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[E_CONFIG]"), "{}", stderr(&out));

    let bad = dir.path().join("config.json");
    std::fs::write(&bad, "{\"mode\": \"sideways\"}").unwrap();
    let bench = small_bench(dir.path(), "closer", 1);
    let out = apc(&["run", "--bench", s(&bench), "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));

    let out = apc(&["run", "--bench", s(&bench), "--backend", "http", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[E_BACKEND]"), "{}", stderr(&out));

    let out = apc(&["run", "--bench", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

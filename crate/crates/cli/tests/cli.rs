use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ouro_cli::{run, Provenance, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME};
use ouro_core::evalkit::read_report;
use ouro_core::imageio::save_png;
use ouro_core::sceneforge::{render_pan, sample_scene, SceneConfig};
use serde_json::Value;

fn ouro(args: &[&str]) -> i32 {
    run(std::iter::once("ouro").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

const TINY: &str = r#"{"steps": 3, "batch_size": 2, "model": {"base_width": 4, "depth": 2, "embed_dim": 4}}"#;

/// A 16 px city-like dataset plus one trained checkpoint per direction.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        assert_eq!(ouro(&["gen-data", "--profile", "city-like", "--count", "3", "--res", "16", "--seed", "3", "--out", s(&data), "--quiet"]), EXIT_OK);
        fs::write(root.join("cfg.json"), TINY).unwrap();
        for d in ["rgb2x", "x2rgb"] {
            let out = root.join(d);
            let code = ouro(&["train", "--direction", d, "--config", s(&root.join("cfg.json")), "--data", s(&data), "--out", s(&out), "--quiet"]);
            assert_eq!(code, EXIT_OK);
        }
        Self { _dir: dir, root }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn record(&self) -> PathBuf {
        let split = self.path("data/train");
        let mut ids: Vec<_> = fs::read_dir(&split).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
        ids.sort();
        ids.remove(0)
    }
}

#[test]
fn self_evaluation_exits_zero_with_cap_values() {
    let f = Fixture::new();
    let split = f.path("data/train");
    let out = f.path("eval/report.json");
    assert_eq!(ouro(&["eval", "--pred", s(&split), "--gt", s(&split), "--out", s(&out), "--quiet"]), EXIT_OK);
    let r = read_report(&out).unwrap();
    assert_eq!(r.channels["albedo"].metrics["psnr"].value(), Some(99.0));
    assert!(f.path("eval/report.provenance.json").is_file());

    let plots = f.path("plots");
    assert_eq!(ouro(&["report", s(&out), "--plots", s(&plots), "--quiet"]), EXIT_OK);
    assert!(plots.join("psnr.png").is_file() && plots.join("table.txt").is_file());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(ouro(&["eval", "--bogus"]), EXIT_INVALID);
    assert_eq!(ouro(&["frobnicate"]), EXIT_INVALID);
    assert_eq!(ouro(&["--help"]), EXIT_OK);
    let out = Command::new(env!("CARGO_BIN_EXE_ouro")).args(["infer", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(EXIT_INVALID));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ouro"))
        .args(["infer", "--ckpt", "missing", "--input", "x.png", "--out"])
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));
}

#[test]
fn infer_spends_one_evaluation_per_map_and_is_deterministic() {
    let f = Fixture::new();
    let rec = f.record();
    let (a, b) = (f.path("inf-a"), f.path("inf-b"));
    for out in [&a, &b] {
        let code = ouro(&["infer", "--ckpt", s(&f.path("rgb2x/final")), "--input", s(&rec.join("rgb.otns")), "--tokens", "albedo,normal", "--seed", "9", "--out", s(out), "--quiet"]);
        assert_eq!(code, EXIT_OK);
    }
    let summary = json(&a.join("infer.json"));
    assert_eq!(summary["evaluations"], 2);
    for name in ["albedo.otns", "normal.otns", "albedo.png", "normal.png"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    assert!(!a.join("roughness.otns").exists());

    let x = f.path("inf-x");
    assert_eq!(ouro(&["infer", "--ckpt", s(&f.path("x2rgb/final")), "--input", s(&rec), "--out", s(&x), "--quiet"]), EXIT_OK);
    assert_eq!(json(&x.join("infer.json"))["evaluations"], 1);
    assert!(x.join("rgb.otns").is_file());
}

#[test]
fn direction_and_prompt_must_agree() {
    let f = Fixture::new();
    let rec = f.record();
    let code = ouro(&["infer", "--ckpt", s(&f.path("x2rgb/final")), "--input", s(&rec), "--tokens", "albedo", "--out", s(&f.path("o1")), "--quiet"]);
    assert_eq!(code, EXIT_INVALID);
    let code = ouro(&["infer", "--ckpt", s(&f.path("rgb2x/final")), "--input", s(&rec), "--caption", "a cat", "--out", s(&f.path("o2")), "--quiet"]);
    assert_eq!(code, EXIT_INVALID);
    let code = ouro(&["train-cycle", "--inv", s(&f.path("x2rgb/final")), "--fwd", s(&f.path("x2rgb/final")), "--data", s(&f.path("data")), "--out", s(&f.path("o3")), "--quiet"]);
    assert_eq!(code, EXIT_INVALID);
}

#[test]
fn bad_configs_are_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"count": 2, "colour": "red"}"#).unwrap();
    let out = dir.path().join("data");
    assert_eq!(ouro(&["gen-data", "--config", s(&cfg), "--out", s(&out), "--quiet"]), EXIT_INVALID);
    assert!(!out.exists());
    assert_eq!(ouro(&["gen-data", "--profile", "moon", "--out", s(&out), "--quiet"]), EXIT_INVALID);
    assert_eq!(ouro(&["gen-data", "--count", "2", "--quiet"]), EXIT_INVALID);
    fs::write(&cfg, r#"{"steps": 0}"#).unwrap();
    assert_eq!(ouro(&["train", "--direction", "rgb2x", "--config", s(&cfg), "--data", s(&out), "--out", s(&out), "--quiet"]), EXIT_INVALID);
    assert!(!out.exists());
}

#[test]
fn provenance_replays_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(ouro(&["gen-data", "--profile", "wild", "--count", "2", "--res", "16", "--seed", "11", "--out", s(&a), "--quiet"]), EXIT_OK);
    let prov: Provenance = serde_json::from_slice(&fs::read(a.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov.command, "gen-data");
    assert_eq!(prov.status, "ok");
    assert_eq!(prov.config["seed"], 11);
    assert_eq!(ouro(&["gen-data", "--config", s(&a.join("provenance.json")), "--out", s(&b), "--quiet"]), EXIT_OK);
    let ids: Vec<_> = fs::read_dir(a.join("train")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(ids.len(), 2);
    for id in ids {
        for f in ["rgb.otns", "meta.json"] {
            assert_eq!(fs::read(a.join("train").join(&id).join(f)).unwrap(), fs::read(b.join("train").join(&id).join(f)).unwrap());
        }
    }
    assert_eq!(ouro(&["train", "--config", s(&a.join("provenance.json")), "--out", s(&b), "--quiet"]), EXIT_INVALID);
}

#[test]
fn training_commands_write_logs_and_checkpoints() {
    let f = Fixture::new();
    let log = fs::read_to_string(f.path("rgb2x/train.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(f.path("rgb2x/final/meta.json").is_file());

    let resumed = f.path("rgb2x-more");
    let cfg = f.path("cfg.json");
    let code = ouro(&["train", "--direction", "rgb2x", "--config", s(&cfg), "--data", s(&f.path("data")), "--steps", "5", "--resume", s(&f.path("rgb2x/final")), "--out", s(&resumed), "--quiet"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_to_string(resumed.join("train.log.jsonl")).unwrap().lines().count(), 2);

    let wild = f.path("wild");
    assert_eq!(ouro(&["gen-data", "--profile", "wild", "--count", "2", "--res", "16", "--out", s(&wild), "--quiet"]), EXIT_OK);
    let cyc = f.path("cycle");
    let code = ouro(&[
        "train-cycle", "--inv", s(&f.path("rgb2x/final")), "--fwd", s(&f.path("x2rgb/final")), "--config", s(&cfg),
        "--data", s(&f.path("data")), "--wild", s(&wild), "--wild-ratio", "0.5", "--steps", "2", "--out", s(&cyc), "--quiet",
    ]);
    assert_eq!(code, EXIT_OK);
    assert!(cyc.join("final/rgb2x/meta.json").is_file() && cyc.join("final/x2rgb/meta.json").is_file());
    let kinds: Vec<String> = fs::read_to_string(cyc.join("train.log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["kind"].as_str().unwrap().to_string())
        .collect();
    assert!(kinds.contains(&"wild".to_string()) && kinds.contains(&"annotated".to_string()));
}

#[test]
fn video_outputs_mirror_numerically_ordered_frames() {
    let f = Fixture::new();
    let frames = f.path("frames");
    fs::create_dir_all(&frames).unwrap();
    let spec = sample_scene(4, &SceneConfig::default()).unwrap();
    for (i, r) in render_pan::<f32>(&spec, 11, 16, 0.02).unwrap().iter().enumerate() {
        save_png(r.rgb.data(), frames.join(format!("frame_{i}.png"))).unwrap();
    }
    let out = f.path("video");
    let code = ouro(&["infer-video", "--ckpt", s(&f.path("rgb2x/final")), "--frames", s(&frames), "--task", "albedo", "--window", "4", "--stride", "2", "--out", s(&out), "--quiet"]);
    assert_eq!(code, EXIT_OK);
    let summary = json(&out.join("video.json"));
    let order: Vec<String> = summary["frames"].as_array().unwrap().iter().map(|p| p.as_str().unwrap().rsplit('/').next().unwrap().to_string()).collect();
    assert_eq!(order[2], "frame_2.png");
    assert_eq!(order[10], "frame_10.png");
    for i in 0..11 {
        assert!(out.join(format!("frame_{i}.otns")).is_file());
    }
    assert_eq!(summary["windows"].as_array().unwrap().len(), 5);
    assert_eq!(summary["evaluations"], 20);
    let code = ouro(&["infer-video", "--ckpt", s(&f.path("x2rgb/final")), "--frames", s(&frames), "--out", s(&out), "--quiet"]);
    assert_eq!(code, EXIT_INVALID);
}

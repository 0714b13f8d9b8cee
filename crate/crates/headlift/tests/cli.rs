use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use headlift::checkpoint::Checkpoint;
use headlift::core::gaussian::{build_template, Camera};
use headlift::core::image::Image;
use headlift::core::model::{Model, ModelConfig};
use headlift::formats::{self, CameraJson};
use serde_json::{json, Value};

fn headlift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headlift"))
        .args(args)
        .env_remove("HEADLIFT_CHECKPOINT")
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture dataset at the tiny model's input size.
fn dataset(dir: &Path) -> PathBuf {
    let root = dir.join("data");
    ok(headlift(&[
        "fixtures",
        "--out",
        s(&root),
        "--size",
        "32",
        "--gaussians",
        "500",
    ]));
    root.join("manifest.json")
}

fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.hlta");
    Checkpoint::of(&Model::new(&ModelConfig::tiny()).unwrap(), None)
        .save(&p)
        .unwrap();
    p
}

fn write_config(dir: &Path, name: &str, v: Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn input_view(dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join("data/real000/view0.png"),
        dir.join("data/real000/view0_mask.png"),
    )
}

#[test]
fn train_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = headlift(&[
        "train",
        "--phase",
        "base",
        "--config",
        s(&dir.path().join("nope.json")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
    let bad = write_config(dir.path(), "bad.json", json!({ "dataset": "m.json" }));
    assert_eq!(
        headlift(&["train", "--phase", "base", "--config", s(&bad)])
            .status
            .code(),
        Some(2)
    );
    let negative = write_config(
        dir.path(),
        "neg.json",
        json!({ "dataset": "m.json", "output_dir": "o", "train": { "optimizer": { "lr": -1.0 } } }),
    );
    let out = headlift(&["train", "--phase", "base", "--config", s(&negative)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_phases_write_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let zero = write_config(
        dir.path(),
        "zero.json",
        json!({ "dataset": s(&manifest), "output_dir": "zero", "model": "tiny", "train": { "steps": 0 } }),
    );
    ok(headlift(&[
        "train",
        "--phase",
        "base",
        "--config",
        s(&zero),
    ]));
    assert!(dir.path().join("zero/base_final.hlta").exists());

    let base = write_config(
        dir.path(),
        "base.json",
        json!({
            "dataset": s(&manifest), "output_dir": "base", "model": "tiny",
            "train": { "steps": 4, "checkpoint_every": 2, "loss": "base_lpips_l1" }
        }),
    );
    ok(headlift(&[
        "train",
        "--phase",
        "base",
        "--config",
        s(&base),
    ]));
    let metrics = std::fs::read_to_string(dir.path().join("base/metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 3);
    assert_eq!(lines[0]["phase"], "base");
    assert!(lines[0]["terms"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(dir.path().join("base/base_step000002.hlta").exists());
    let base_ckpt = dir.path().join("base/base_final.hlta");
    let trained = Checkpoint::load(&base_ckpt).unwrap();
    assert_eq!(trained.state.as_ref().unwrap().step, 4);

    let refiner = write_config(
        dir.path(),
        "refiner.json",
        json!({
            "dataset": s(&manifest), "output_dir": "refiner", "init_checkpoint": s(&base_ckpt),
            "train": { "steps": 2, "loss": "refiner" }
        }),
    );
    ok(headlift(&[
        "train",
        "--phase",
        "refiner",
        "--config",
        s(&refiner),
    ]));
    let refined = Checkpoint::load(&dir.path().join("refiner/refiner_final.hlta")).unwrap();
    assert_eq!(
        refined.to_model().unwrap().base_hash(),
        trained.to_model().unwrap().base_hash()
    );

    let edit_bad = write_config(
        dir.path(),
        "edit_bad.json",
        json!({ "dataset": s(&manifest), "output_dir": "edit", "init_checkpoint": s(&base_ckpt), "train": { "steps": 1 } }),
    );
    assert_eq!(
        headlift(&["train", "--phase", "edit", "--config", s(&edit_bad)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn reconstruct_writes_an_even_orbit() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let ckpt = tiny_checkpoint(dir.path());
    let (image, mask) = input_view(dir.path());
    let run = |out: &Path, frames: &str| {
        ok(headlift(&[
            "reconstruct",
            "--image",
            s(&image),
            "--mask",
            s(&mask),
            "--checkpoint",
            s(&ckpt),
            "--orbit",
            s(out),
            "--frames",
            frames,
        ]))
    };
    let a = dir.path().join("a");
    run(&a, "8");
    for i in 0..8 {
        let cam: CameraJson = formats::read_json(&a.join(format!("frame_{i:03}.json"))).unwrap();
        assert_eq!(
            cam.to_camera().unwrap(),
            Camera::orbit(45.0 * i as f64, 0.0, 2.7, 32, 32)
        );
        assert!(a.join(format!("frame_{i:03}.png")).exists());
    }
    assert!(!a.join("frame_008.png").exists());
    let b = dir.path().join("b");
    run(&b, "8");
    for i in 0..8 {
        let name = format!("frame_{i:03}.png");
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap()
        );
    }
    let one = dir.path().join("one");
    run(&one, "1");
    assert_eq!(std::fs::read_dir(&one).unwrap().count(), 2);
    assert_eq!(
        std::fs::read(one.join("frame_000.png")).unwrap(),
        std::fs::read(a.join("frame_000.png")).unwrap()
    );
}

#[test]
fn reconstruct_batch_and_empty_foreground() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = tiny_checkpoint(dir.path());
    let frames = dir.path().join("frames");
    let head = Image::filled(32, 32, &[0.6, 0.4, 0.3]);
    formats::write_png(&frames.join("f0.png"), &head).unwrap();
    formats::write_png(&frames.join("f1.png"), &head).unwrap();
    let out = dir.path().join("out");
    ok(headlift(&[
        "reconstruct",
        "--image",
        s(&frames),
        "--checkpoint",
        s(&ckpt),
        "--orbit",
        s(&out),
        "--frames",
        "2",
    ]));
    assert!(out.join("f0/frame_001.png").exists() && out.join("f1/frame_000.json").exists());

    let green = dir.path().join("green.png");
    formats::write_png(&green, &Image::filled(32, 32, &[0.0, 1.0, 0.0])).unwrap();
    let r = headlift(&[
        "reconstruct",
        "--image",
        s(&green),
        "--checkpoint",
        s(&ckpt),
        "--orbit",
        s(&out),
        "--frames",
        "1",
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn viz_decoder_emits_k_plus_one_layers() {
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path());
    let ckpt = tiny_checkpoint(dir.path());
    let (image, mask) = input_view(dir.path());
    let viz = dir.path().join("viz");
    ok(headlift(&[
        "viz-decoder",
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&viz),
    ]));
    let k = ModelConfig::tiny().decoder.layers;
    assert_eq!(std::fs::read_dir(&viz).unwrap().count(), k + 1);
    let orbit = dir.path().join("orbit");
    ok(headlift(&[
        "reconstruct",
        "--image",
        s(&image),
        "--mask",
        s(&mask),
        "--checkpoint",
        s(&ckpt),
        "--orbit",
        s(&orbit),
        "--frames",
        "1",
        "--no-refine",
    ]));
    assert_eq!(
        std::fs::read(viz.join(format!("layer_{k}.png"))).unwrap(),
        std::fs::read(orbit.join("frame_000.png")).unwrap()
    );
}

#[test]
fn oracle_eval_reports_sentinels() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dataset(dir.path());
    let ckpt = tiny_checkpoint(dir.path());
    let out = dir.path().join("eval");
    ok(headlift(&[
        "eval",
        "--oracle",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&manifest),
        "--out",
        s(&out),
    ]));
    let v: Value = formats::read_json(&out.join("metrics.json")).unwrap();
    assert_eq!(v["aggregate"]["psnr"], "inf");
    assert_eq!(v["aggregate"]["feature_distance"], 0.0);
    assert_eq!(v["aggregate"]["identity"], "n/a");
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",inf,")));

    let model_out = dir.path().join("eval_model");
    ok(headlift(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--dataset",
        s(&manifest),
        "--protocol",
        "extreme",
        "--out",
        s(&model_out),
    ]));
    let v: Value = formats::read_json(&model_out.join("metrics.json")).unwrap();
    assert_eq!(v["protocol"], "extreme");
    assert!(v["aggregate"]["psnr"].as_f64().is_some_and(f64::is_finite));
}

#[test]
fn export_template_formats() {
    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("t.json");
    let bin_path = dir.path().join("t.bin");
    ok(headlift(&[
        "export-template",
        "--model",
        "tiny",
        "--out",
        s(&json_path),
    ]));
    ok(headlift(&[
        "export-template",
        "--model",
        "tiny",
        "--format",
        "bin",
        "--out",
        s(&bin_path),
    ]));
    let cfg = ModelConfig::tiny();
    let want = build_template(cfg.num_patches, cfg.template_seed).unwrap();
    let j: formats::TemplateJson = formats::read_json(&json_path).unwrap();
    assert_eq!(j.to_template().unwrap(), want);
    assert_eq!(
        formats::decode_template_bin(&std::fs::read(&bin_path).unwrap()).unwrap(),
        want
    );
}

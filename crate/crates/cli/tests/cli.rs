use std::path::Path;
use std::process::{Command, Output};

use dynsplat::pipeline::{generate_scene, save_checkpoint, Stage, TrainConfig, TrainState};

fn dynsplat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynsplat")).args(args).output().expect("spawn dynsplat")
}

fn small_config() -> TrainConfig {
    let mut c = TrainConfig::default();
    for kv in [
        "scene.width=16",
        "scene.height=16",
        "scene.frames=9",
        "scene.cameras=2",
        "scene.init_points=80",
        "global_iters=4",
        "local_iters=4",
        "log_every=2",
        "densify_until=0",
        "tia_from=1",
        "tia_until=4",
        "tia_period=2",
    ] {
        c.apply_override(kv).unwrap();
    }
    c
}

/// Writes the config and a local-stage checkpoint whose deformation is exactly zero.
fn zero_deform_checkpoint(dir: &Path) -> (String, String) {
    let c = small_config();
    let cfg = dir.join("small.cfg");
    std::fs::write(&cfg, c.to_text()).unwrap();
    let scene = generate_scene(&c.scene).unwrap();
    let mut state = TrainState::new(&scene, &c).unwrap();
    state.begin_local(&scene).unwrap();
    state.model.zero_deformation();
    assert_eq!(state.stage, Stage::Local);
    let ck = dir.join("zero.mdgs");
    save_checkpoint(&ck, &state, &scene.cameras).unwrap();
    (cfg.display().to_string(), ck.display().to_string())
}

#[test]
fn eval_prints_one_json_line() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, ck) = zero_deform_checkpoint(dir.path());
    let out = dynsplat(&["eval", &ck, &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1);
    let v: serde_json::Value = serde_json::from_str(text.trim()).unwrap();
    assert!(v["psnr"].as_f64().unwrap().is_finite());
    assert!(v["ssim"].as_f64().unwrap() <= 1.0);
    assert!(v["storage_bytes"].as_u64().unwrap() > 0);
    let frames = v["per_frame"].as_array().unwrap();
    // frame 4 is the only held-out frame of 9, seen by 2 cameras
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0]["frame"], 4);
}

#[test]
fn zero_deformation_render_matches_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ck) = zero_deform_checkpoint(dir.path());
    for cam in ["0", "1"] {
        let deformed = dir.path().join(format!("d{cam}.ppm"));
        let canonical = dir.path().join(format!("c{cam}.ppm"));
        let a = dynsplat(&["render", &ck, "--time", "0", "--camera", cam, "--out", deformed.to_str().unwrap()]);
        assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
        let b = dynsplat(&[
            "render",
            &ck,
            "--time",
            "0",
            "--camera",
            cam,
            "--global",
            "--out",
            canonical.to_str().unwrap(),
        ]);
        assert!(b.status.success());
        assert_eq!(std::fs::read(&deformed).unwrap(), std::fs::read(&canonical).unwrap());
    }
}

#[test]
fn train_writes_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, small_config().to_text()).unwrap();
    let run = dir.path().join("run");
    let out = dynsplat(&[
        "train",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--set",
        "checkpoint_every=2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics.tsv", "intervals.tsv", "global.mdgs", "local.mdgs", "ckpt_local_000002.mdgs"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let chart = dir.path().join("iv.png");
    let p = dynsplat(&["plot-intervals", run.join("intervals.tsv").to_str().unwrap(), "--out", chart.to_str().unwrap()]);
    assert!(p.status.success(), "{}", String::from_utf8_lossy(&p.stderr));
    assert!(chart.exists());
}

#[test]
fn gen_scene_writes_frames() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.cfg");
    std::fs::write(&spec, "width = 8\nheight = 8\nframes = 3\ncameras = 2\n").unwrap();
    let out_dir = dir.path().join("scene");
    let out = dynsplat(&["gen-scene", spec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("points.ply").exists());
    assert!(out_dir.join("frame002_cam1.png").exists());
}

#[test]
fn bad_invocations_fail_cleanly() {
    let out = dynsplat(&["train", "x.cfg", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());

    let out = dynsplat(&["eval", "/definitely/missing.mdgs", "/definitely/missing.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    let out = dynsplat(&["train", "/definitely/missing.cfg"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

//! Command-level behaviour: artifacts, exit codes and reproducibility.

use std::path::Path;

use clap::Parser;
use fusionfield::cli::{run, Cli, CommandResult, FileConfig};
use fusionfield::encoding::HashGridConfig;
use fusionfield::scenedata::{load_dataset, read_pfm, read_png};

fn cli(args: &[&str]) -> CommandResult {
    let mut argv = vec!["fusionfield"];
    argv.extend_from_slice(args);
    run(&Cli::try_parse_from(argv).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = FileConfig::default();
    let grid = HashGridConfig {
        levels: 2,
        table_size_log2: 8,
        base_resolution: 4,
        ..HashGridConfig::default()
    };
    cfg.train.field.sigma_grid = grid;
    cfg.train.field.color_grid = grid;
    cfg.train.field.sigma_hidden = 8;
    cfg.train.field.color_hidden = 8;
    cfg.train.ogm.resolution = 16;
    cfg.train.samples_per_ray = 8;
    cfg.train.lidar_batch = 32;
    cfg.train.camera_batch = 32;
    cfg.train.stage1_iters = 3;
    cfg.train.stage2_iters = 2;
    cfg.train.stage3_iters = 4;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn gen_scene_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = cli(&["gen-scene", "--preset", "desk-kitti", "--out", s(out)]);
        assert_eq!(r.exit_code, 0, "{}", r.summary);
    }
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.cameras.len(), 6);
    assert_eq!(ds.scans.len(), 2);
    assert!(ds.cameras.iter().all(|c| c.lidar_mask.as_ref().is_some_and(|m| m.data.iter().any(|&v| v))));
    for rel in ["manifest.toml", "images/cam_003.png", "depth/cam_003.pfm", "masks/cam_003.png", "lidar/scan_001.bin"] {
        assert_eq!(std::fs::read(a.join(rel)).unwrap(), std::fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn train_render_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("scene");
    let config = tiny_config(root);
    assert_eq!(cli(&["gen-scene", "--preset", "desk-kitti", "--out", s(&data)]).exit_code, 0);

    let out = root.join("run");
    let r = cli(&["--config", s(&config), "train", "--dataset", s(&data), "--out", s(&out)]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);
    for f in [
        "checkpoint_stage1.ffck",
        "checkpoint_stage2.ffck",
        "checkpoint_stage3.ffck",
        "checkpoint_final.ffck",
        "train_log.jsonl",
        "ogm.bin",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("train_log.jsonl.partial").exists());
    let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 9);
    let (dims, values) = fusionfield::ogm::OccupancyGrid::read_export(&out.join("ogm.bin")).unwrap();
    assert_eq!(dims, [16, 16, 16]);
    assert_eq!(values.len(), 16 * 16 * 16);

    let ckpt = out.join("checkpoint_final.ffck");
    let prefix = root.join("view");
    let r = cli(&[
        "render", "--checkpoint", s(&ckpt), "--manifest", s(&data), "--frame", "4", "--out", s(&prefix),
    ]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);
    let img = read_png(&root.join("view.png")).unwrap();
    let depth = read_pfm(&root.join("view.pfm")).unwrap();
    assert_eq!((img.width, img.height), (320, 176));
    assert_eq!((depth.width, depth.height), (320, 176));

    let r = cli(&[
        "render", "--checkpoint", s(&ckpt), "--out", s(&root.join("posed")), "--pose", "-1", "0", "0", "0.2", "0",
        "-1", "0", "1.6", "0", "0", "1", "0",
    ]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);

    let report = root.join("metrics").join("report.txt");
    let r = cli(&[
        "eval", "--checkpoint", s(&ckpt), "--dataset", s(&data), "--report", s(&report), "--views",
        s(&root.join("views")),
    ]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);
    let text = std::fs::read_to_string(&report).unwrap();
    for key in ["psnr", "mssim", "silog", "abs_err_rel", "sq_err_rel", "[mean]"] {
        assert!(text.contains(key), "report lacks {key}");
    }
    let csv = std::fs::read_to_string(root.join("metrics").join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 + 1);
    assert!(root.join("views").join("cam_005.pfm").exists());
}

#[test]
fn bad_inputs_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let missing = root.join("missing");
    let r = cli(&["train", "--dataset", s(&missing), "--out", s(&root.join("o"))]);
    assert_eq!(r.exit_code, 2, "{}", r.summary);

    let garbage = root.join("garbage.ffck");
    std::fs::write(&garbage, b"definitely not a checkpoint").unwrap();
    let r = cli(&["render", "--checkpoint", s(&garbage), "--out", s(&root.join("x")), "--manifest", "m", "--frame", "0"]);
    assert_eq!(r.exit_code, 2, "{}", r.summary);

    // A dataset whose frames are all training frames cannot be evaluated.
    let data = root.join("scene");
    assert_eq!(cli(&["gen-scene", "--preset", "desk-kitti", "--out", s(&data)]).exit_code, 0);
    let manifest = data.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap().replace("split = \"test\"", "split = \"train\"");
    std::fs::write(&manifest, text).unwrap();
    let config = tiny_config(root);
    let out = root.join("run");
    let r = cli(&["--config", s(&config), "train", "--dataset", s(&data), "--out", s(&out)]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);
    let r = cli(&[
        "eval", "--checkpoint", s(&out.join("checkpoint_final.ffck")), "--dataset", s(&data), "--report",
        s(&root.join("r.txt")),
    ]);
    assert_eq!(r.exit_code, 2, "{}", r.summary);
    assert!(r.summary.contains("no test frames"));
}

#[test]
fn uniform_sampler_flag_is_recorded_in_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("scene");
    assert_eq!(cli(&["gen-scene", "--preset", "desk-kitti", "--out", s(&data)]).exit_code, 0);
    let config = tiny_config(root);
    let out = root.join("run");
    let r = cli(&[
        "--config", s(&config), "train", "--dataset", s(&data), "--out", s(&out), "--sampler", "uniform",
        "--stage3-iters", "1",
    ]);
    assert_eq!(r.exit_code, 0, "{}", r.summary);
    let state = fusionfield::trainer::TrainState::load(&out.join("checkpoint_final.ffck")).unwrap();
    assert_eq!(state.config.sampler, fusionfield::trainer::SamplerKind::Uniform);
    assert_eq!(state.progress.iteration, 6);
}

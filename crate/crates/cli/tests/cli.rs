#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::brute_force_mask;
use epiray::epipolar::DeltaRule;
use epiray::geometry::{axis_angle, CameraIntrinsics, CameraPose};
use epiray::io::*;
use epiray::metrics::Trajectory;
use epiray::toydiff::{AblationConfig, ModelSize, Motion, SceneConfig};
use nalgebra::Vector3;
use serde_json::Value;
use tempfile::TempDir;

fn epiray(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiray"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Pose file of a camera-to-world trajectory, intrinsics `f = c = 0.5`.
fn write_pose_file(dir: &Path, traj: &Trajectory<f64>) -> PathBuf {
    let records = traj
        .poses()
        .iter()
        .enumerate()
        .map(|(i, c2w)| PoseFileRecord::from_pose(i as i64, [0.5; 4], &c2w.inverse()))
        .collect();
    let path = dir.join("poses.txt");
    let file = PoseFile {
        header: Some("https://example.com/clip".into()),
        records,
        warnings: vec![],
    };
    std::fs::write(&path, serialize_pose_file(&file)).unwrap();
    path
}

#[test]
fn mask_density_matches_brute_force() {
    let dir = TempDir::new().unwrap();
    // generic poses: a symmetric orbit puts pixel centres exactly at distance delta
    let traj = synth_trajectory(SynthKind::RandomSmooth, 4, 7).unwrap();
    let poses = write_pose_file(dir.path(), &traj);
    let out = dir.path().join("masks");
    let o = epiray(&[
        "mask",
        s(&poses),
        "--out",
        s(&out),
        "--frames",
        "4",
        "--stride",
        "1",
        "--resolutions",
        "4x4,2x2",
        "--registers",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("masks.epim").is_file());
    assert!(out.join("level0_4x4_query00.pgm").is_file());

    let file = parse_pose_file(&std::fs::read_to_string(&poses).unwrap()).unwrap();
    let frames: Vec<_> = file
        .records
        .iter()
        .map(|r| r.frame(256, 256).unwrap())
        .collect();
    let meta = read_json(&out.join("mask_meta.json"));
    for (li, (h, w)) in [(4, 4), (2, 2)].into_iter().enumerate() {
        let delta = DeltaRule::HalfCellDiagonal.delta(h, w);
        let density = (0..4)
            .map(|i| {
                let rows = brute_force_mask(&frames, i, h, w, delta, 2);
                let on = rows.iter().flatten().filter(|&&b| b).count();
                on as f64 / (rows.len() * rows[0].len()) as f64
            })
            .sum::<f64>()
            / 4.0;
        let got = meta["levels"][li]["density"].as_f64().unwrap();
        assert!(
            (got - density).abs() < 1e-12,
            "level {li}: {got} vs {density}"
        );
    }
}

#[test]
fn unbounded_delta_keeps_everything() {
    let dir = TempDir::new().unwrap();
    let poses = write_pose_file(
        dir.path(),
        &synth_trajectory(SynthKind::Dolly, 3, 0).unwrap(),
    );
    let out = dir.path().join("m");
    let o = epiray(&[
        "mask",
        s(&poses),
        "--out",
        s(&out),
        "--frames",
        "3",
        "--stride",
        "1",
        "--resolutions",
        "4x4",
        "--delta",
        "max",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        read_json(&out.join("mask_meta.json"))["levels"][0]["density"].as_f64(),
        Some(1.0)
    );

    let bad = epiray(&[
        "mask",
        s(&poses),
        "--out",
        s(&out),
        "--frames",
        "3",
        "--stride",
        "1",
        "--delta",
        "-1",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn missing_pose_file_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.txt");
    for cmd in ["mask", "plucker"] {
        let o = epiray(&[cmd, s(&missing), "--out", s(&dir.path().join("o"))]);
        assert_eq!(o.status.code(), Some(2), "{cmd}");
        assert!(stderr(&o).contains("nope.txt"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn too_short_clip_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let poses = write_pose_file(
        dir.path(),
        &synth_trajectory(SynthKind::Dolly, 10, 0).unwrap(),
    );
    let o = epiray(&["mask", s(&poses), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("121"), "{}", stderr(&o));
}

#[test]
fn plucker_of_cameras_at_the_origin() {
    let dir = TempDir::new().unwrap();
    let still = Trajectory::new(vec![CameraPose::identity(); 2]).unwrap();
    let poses = write_pose_file(dir.path(), &still);
    let out = dir.path().join("p");
    let o = epiray(&[
        "plucker",
        s(&poses),
        "--out",
        s(&out),
        "--frames",
        "2",
        "--stride",
        "1",
        "--h",
        "3",
        "--w",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("plucker.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame,row,col,m_x,m_y,m_z,d_x,d_y,d_z"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2 * 15);
    for r in &rows {
        assert!(r[3..6].iter().all(|&m| m == 0.0));
        let d = Vector3::new(r[6], r[7], r[8]);
        assert!((d.norm() - 1.0).abs() < 1e-12);
    }
    let bin = std::fs::read(out.join("plucker.bin")).unwrap();
    assert_eq!(&bin[..4], b"PLKR");
    assert_eq!(bin.len(), 20 + 2 * 15 * 6 * 8);

    let zero = epiray(&[
        "plucker",
        s(&poses),
        "--out",
        s(&out),
        "--frames",
        "2",
        "--stride",
        "1",
        "--h",
        "0",
    ]);
    assert_eq!(zero.status.code(), Some(2));
}

fn write_trial(dir: &Path, traj: &Trajectory<f64>, names: &[String]) -> PathBuf {
    let k = CameraIntrinsics::new(200.0, 200.0, 128.0, 128.0, 256, 256).unwrap();
    let model = SfmModel::from_trajectory(traj, &k, PinholeModel::SimplePinhole, names).unwrap();
    model.write_dir(&dir.join("sparse/0"), None).unwrap();
    dir.to_path_buf()
}

fn summary(out: &Path) -> Value {
    read_json(&out.join("metrics.json"))["summary"].clone()
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let dir = TempDir::new().unwrap();
    let traj = synth_trajectory(SynthKind::RandomSmooth, 16, 4).unwrap();
    let gt = dir.path().join("gt.json");
    write_trajectory_json(&gt, &traj).unwrap();
    let trial = write_trial(&dir.path().join("t0"), &traj, &frame_names("{:03}.png", 16));
    let out = dir.path().join("out");
    let o = epiray(&[
        "eval",
        "--gt",
        s(&gt),
        "--trial",
        s(&trial),
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mean = &summary(&out)["dataset_mean"];
    for k in ["rot_err", "trans_err", "cam_mc"] {
        assert!(mean[k].as_f64().unwrap() < 1e-9, "{k} = {}", mean[k]);
    }
    assert!(String::from_utf8_lossy(&o.stdout).contains("samples=1 trials=1 failed_trials=0"));
}

#[test]
fn eval_accumulates_rotation_offsets() {
    let dir = TempDir::new().unwrap();
    let n = 17;
    let gt = synth_trajectory(SynthKind::Dolly, n, 0).unwrap();
    let est = Trajectory::new(
        gt.poses()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let angle = if i == 0 { 0.0 } else { 0.1 };
                CameraPose::new(axis_angle(Vector3::z(), angle), p.translation).unwrap()
            })
            .collect(),
    )
    .unwrap();
    let gt_path = dir.path().join("gt.json");
    write_trajectory_json(&gt_path, &gt).unwrap();
    let trial = write_trial(&dir.path().join("t0"), &est, &frame_names("{:03}.png", n));
    let out = dir.path().join("out");
    let o = epiray(&[
        "eval",
        "--gt",
        s(&gt_path),
        "--trial",
        s(&trial),
        "--out",
        s(&out),
        "--frames",
        "17",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mean = &summary(&out)["dataset_mean"];
    assert!(
        (mean["rot_err"].as_f64().unwrap() - 1.6).abs() < 1e-9,
        "{mean}"
    );
    assert!(mean["trans_err"].as_f64().unwrap() < 1e-9);
}

#[test]
fn eval_skips_failed_trials() {
    let dir = TempDir::new().unwrap();
    let traj = synth_trajectory(SynthKind::Orbit, 16, 0).unwrap();
    let poses = write_pose_file(dir.path(), &traj);
    let names = frame_names("{:03}.png", 16);
    let mut args: Vec<String> = vec![
        "eval".into(),
        "--gt".into(),
        s(&poses).into(),
        "--stride".into(),
        "1".into(),
    ];
    for i in 0..3 {
        args.extend([
            "--trial".into(),
            s(&write_trial(
                &dir.path().join(format!("ok{i}")),
                &traj,
                &names,
            ))
            .into(),
        ]);
    }
    let mut short = names.clone();
    short[3] = "elsewhere.png".into();
    args.extend([
        "--trial".into(),
        s(&write_trial(&dir.path().join("partial"), &traj, &short)).into(),
    ]);
    args.extend([
        "--trial".into(),
        s(&dir.path().join("never_written")).into(),
    ]);
    let out = dir.path().join("out");
    args.extend(["--out".into(), s(&out).into()]);
    let o = epiray(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    let sum = summary(&out);
    assert_eq!(sum["n_trials"], 5);
    assert_eq!(sum["n_failed_trials"], 2);
    assert!(sum["dataset_mean"]["cam_mc"].as_f64().unwrap() < 1e-9);
    assert!(stderr(&o).contains("003.png"));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains("failed")).count(), 2);
}

#[test]
fn eval_with_every_trial_failing_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let traj = synth_trajectory(SynthKind::Dolly, 16, 0).unwrap();
    let gt = dir.path().join("gt.json");
    write_trajectory_json(&gt, &traj).unwrap();
    let o = epiray(&[
        "eval",
        "--gt",
        s(&gt),
        "--trial",
        s(&dir.path().join("none")),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

fn ablation_config(dir: &Path) -> PathBuf {
    let cfg = AblationConfig {
        seed: 2,
        variants: vec!["epipolar".into(), "temporal".into()],
        steps: 5,
        eval_every: 5,
        lr: 1e-2,
        n_train_scenes: 2,
        n_val_scenes: 1,
        n_val_draws: 2,
        scene: SceneConfig {
            frames: 3,
            h: 3,
            w: 3,
            channels: 2,
            n_points: 20,
            motion: Motion::Large,
        },
        model: ModelSize {
            channels: 4,
            n_heads: 2,
            n_registers: 1,
        },
        high_noise_from: 0.7,
    };
    let path = dir.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn ablate_with_zero_steps() {
    let dir = TempDir::new().unwrap();
    let cfg = ablation_config(dir.path());
    let out = dir.path().join("out");
    let o = epiray(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
        "--steps",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["ordering"].as_array().unwrap().len(), 2);
    for v in summary["variants"].as_array().unwrap() {
        assert_eq!(v["initial_high_noise"], v["final_high_noise"]);
    }
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 2);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ordering"));
}

#[test]
fn ablate_rejects_unknown_variants() {
    let dir = TempDir::new().unwrap();
    let cfg = ablation_config(dir.path());
    let o = epiray(&[
        "ablate",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("o")),
        "--variants",
        "epipolar,sparse",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sparse"));
}

#[test]
fn glomap_args_print_pinned_intrinsics() {
    let o = epiray(&["glomap-args", "--fx", "200", "--cx", "128", "--cy", "128"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.lines().count(), 4);
    assert!(text.contains("SIMPLE_PINHOLE") && text.contains("200,128,128"));
    assert!(text.contains("glomap mapper"));

    let o = epiray(&["glomap-args"]);
    assert_eq!(o.status.code(), Some(2));
}

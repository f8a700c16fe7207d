mod common;

use approx::assert_relative_eq;
use common::*;
use epiray::geometry::{CameraIntrinsics, CameraPose};
use epiray::io::*;
use epiray::metrics::{evaluate, Trajectory};
use epiray::Error;
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

#[test]
fn pose_file_examples() {
    let text = "https://example.com/clip\n\n0 0.5 0.5 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 0\n";
    let f = parse_pose_file(text).unwrap();
    assert_eq!(f.header.as_deref(), Some("https://example.com/clip"));
    assert_eq!(f.records.len(), 1);
    assert_eq!(f.records[0], PoseFileRecord::identity(0, [0.5; 4]));
    assert!(f.warnings.is_empty());

    let k = f.records[0].denormalized(640, 360).unwrap();
    assert_eq!((k.fx, k.fy, k.cx, k.cy), (320.0, 180.0, 320.0, 180.0));
    let crop = f.records[0].center_cropped(640, 360, 256).unwrap();
    assert_relative_eq!(crop.cx, 128.0, epsilon = 1e-12);
    assert_relative_eq!(crop.cy, 128.0, epsilon = 1e-12);

    assert!(parse_pose_file("").unwrap().records.is_empty());
    match parse_pose_file("0 1 2 3\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
    assert!(parse_pose_file("0 0.5 0.5 0.5 0.5 0 0 1 0 0 0 0 1 0 0 0 0 1 nan\n").is_err());
}

#[test]
fn skewed_rotation_warns() {
    let f = parse_pose_file("0 0.5 0.5 0.5 0.5 0 0 1.1 0 0 0 0 1 0 0 0 0 1 0\n").unwrap();
    assert_eq!(f.warnings.len(), 1);
    assert_eq!(f.warnings[0].line, 1);
}

#[test]
fn pose_file_round_trip_is_exact() {
    let mut r = rng(1);
    let records = (0..32)
        .map(|i| {
            PoseFileRecord::from_pose(i * 33_366, [0.48, 0.85, 0.5, 0.5], &random_pose(&mut r))
        })
        .collect();
    let file = PoseFile {
        header: Some("https://example.com/v".into()),
        records,
        warnings: vec![],
    };
    let back = parse_pose_file(&serialize_pose_file(&file)).unwrap();
    assert_eq!(back, file);
}

const CAMS: &str = "# header\n1 PINHOLE 256 256 200 210 128 128\n";

#[test]
fn sfm_examples() {
    let m = parse_sfm_model(CAMS, "1 1 0 0 0 0 0 0 1 a.png\n\n").unwrap();
    assert_eq!(m.images[&1].pose(), CameraPose::identity());

    let h = std::f64::consts::FRAC_1_SQRT_2;
    let text = format!("1 {h} 0 0 {h} 1 2 3 1 a.png\n\n");
    let m = parse_sfm_model(CAMS, &text).unwrap();
    let rz90 = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    assert_relative_eq!(m.images[&1].pose().rotation, rz90, epsilon = 1e-12);
    assert_eq!(m.images[&1].pose().translation, Vector3::new(1.0, 2.0, 3.0));

    let empty = parse_sfm_model("# only\n# comments\n", "# nothing\n").unwrap();
    assert!(empty.images.is_empty() && empty.cameras.is_empty());
    assert!(parse_sfm_model("1 OPENCV 256 256 1 2 3 4 5 6 7 8\n", "").is_err());
    assert!(parse_sfm_model("1 PINHOLE 256 256 200 128 128\n", "").is_err());
}

#[test]
fn sfm_names_follow_expected_order() {
    let images =
        "2 1 0 0 0 0 0 2 1 b.png\n\n1 1 0 0 0 0 0 1 1 a.png\n\n3 1 0 0 0 0 0 3 1 c.png\n\n";
    let m = parse_sfm_model(CAMS, images).unwrap();
    let names: Vec<String> = ["a.png", "b.png", "c.png"].map(String::from).to_vec();
    let t = to_trajectory(&m, &names).unwrap();
    // camera centers are -T for identity rotations
    let z: Vec<f64> = t.poses().iter().map(|p| p.translation.z).collect();
    assert_eq!(z, vec![-1.0, -2.0, -3.0]);

    let more: Vec<String> = ["a.png", "d.png"].map(String::from).to_vec();
    match to_trajectory(&m, &more) {
        Err(Error::Unregistered { missing }) => assert_eq!(missing, vec!["d.png".to_string()]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn quaternion_round_trip() {
    let mut r = rng(2);
    for _ in 0..500 {
        let rot = random_rotation(&mut r);
        let q = rotation_to_quaternion(&rot);
        assert!(q[0] >= 0.0);
        assert_relative_eq!(quaternion_to_rotation(q), rot, epsilon = 1e-12);
        assert_relative_eq!(quat_matrix(q[0], q[1], q[2], q[3]), rot, epsilon = 1e-12);
    }
}

#[test]
fn sfm_write_parse_convert() {
    let dir = tempfile::tempdir().unwrap();
    let k = CameraIntrinsics::new(200.0, 210.0, 128.0, 127.0, 256, 256).unwrap();
    for kind in SynthKind::ALL {
        let traj = synth_trajectory(kind, 16, 3).unwrap();
        let names = frame_names("{:03}.png", 16);
        let model = SfmModel::from_trajectory(&traj, &k, PinholeModel::Pinhole, &names).unwrap();
        let path = dir.path().join(kind.name());
        model.write_dir(&path, None).unwrap();
        let back = read_sfm_model(&path).unwrap();
        assert_eq!(back.cameras[&1].intrinsics, k);
        let est = to_trajectory(&back, &names).unwrap();
        for (a, b) in est.poses().iter().zip(traj.poses()) {
            assert_relative_eq!(a.rotation, b.rotation, epsilon = 1e-6);
            assert_relative_eq!(a.translation, b.translation, epsilon = 1e-6);
        }
        let m = evaluate(&traj, &est).unwrap();
        assert!(
            m.rot_err < 1e-6 && m.trans_err < 1e-6 && m.cam_mc < 1e-6,
            "{kind:?} {m:?}"
        );
    }
}

#[test]
fn simple_pinhole_needs_square_pixels() {
    let traj = synth_trajectory(SynthKind::Dolly, 4, 0).unwrap();
    let k = CameraIntrinsics::new(200.0, 210.0, 128.0, 127.0, 256, 256).unwrap();
    let names = frame_names("{}.png", 4);
    assert!(SfmModel::from_trajectory(&traj, &k, PinholeModel::SimplePinhole, &names).is_err());
    assert!(SfmModel::from_trajectory(&traj, &k, PinholeModel::Pinhole, &names[..3]).is_err());
}

#[test]
fn strided_sampling() {
    assert_eq!(
        sample_strided(100, 2, 16, 0).unwrap(),
        (0..16).map(|i| 2 * i).collect::<Vec<_>>()
    );
    assert_eq!(sample_strided(31, 2, 16, 0).unwrap().last(), Some(&30));
    match sample_strided(30, 2, 16, 0) {
        Err(Error::Range(msg)) => assert!(msg.contains("31"), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert!(sample_strided(100, 0, 16, 0).is_err());
    assert_eq!(
        StrideSampler::new(3, 4, 1).unwrap().sample(11).unwrap(),
        vec![1, 4, 7, 10]
    );
}

#[test]
fn frame_name_templates() {
    assert_eq!(
        frame_names("{:03}.png", 3),
        vec!["000.png", "001.png", "002.png"]
    );
    assert_eq!(frame_names("f{}.jpg", 2), vec!["f0.jpg", "f1.jpg"]);
}

#[test]
fn synthetic_trajectories() {
    let dolly = synth_trajectory(SynthKind::Dolly, 16, 0).unwrap();
    assert_relative_eq!(
        dolly.poses()[15].translation,
        Vector3::new(0.0, 0.0, 1.5),
        epsilon = 1e-12
    );
    for kind in SynthKind::ALL {
        let t = synth_trajectory(kind, 16, 9).unwrap();
        assert_eq!(t.poses()[0], CameraPose::identity(), "{kind:?}");
        assert_eq!(kind.name().parse::<SynthKind>().unwrap(), kind);
    }
    let a = synth_trajectory(SynthKind::RandomSmooth, 16, 5).unwrap();
    let b = synth_trajectory(SynthKind::RandomSmooth, 16, 5).unwrap();
    let c = synth_trajectory(SynthKind::RandomSmooth, 16, 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(synth_trajectory(SynthKind::Orbit, 1, 0).is_err());
    assert!("spiral".parse::<SynthKind>().is_err());
}

#[test]
fn trajectory_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let t = synth_trajectory(SynthKind::Orbit, 8, 0).unwrap();
    write_trajectory_json(&path, &t).unwrap();
    let back = read_trajectory_json(&path).unwrap();
    for (a, b) in back.poses().iter().zip(t.poses()) {
        assert_relative_eq!(a.rotation, b.rotation, epsilon = 1e-15);
        assert_relative_eq!(a.translation, b.translation, epsilon = 1e-15);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"R\"") && text.contains("\"T\""));
}

#[test]
fn glomap_commands_pin_intrinsics() {
    let k = CameraIntrinsics::new(200.0, 200.0, 128.0, 128.0, 256, 256).unwrap();
    let cmds = glomap_invocations("/ws", "/ws/images", &k);
    assert!(cmds
        .iter()
        .any(|c| c.contains("SIMPLE_PINHOLE") && c.contains("200,128,128")));
    assert!(cmds.iter().any(|c| c.starts_with("glomap mapper")));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn quantized_models_stay_close(seed in any::<u64>(), precision in 8usize..12) {
        let traj = synth_trajectory(SynthKind::RandomSmooth, 16, seed).unwrap();
        let k = CameraIntrinsics::new(200.0, 200.0, 128.0, 128.0, 256, 256).unwrap();
        let names = frame_names("{:03}.png", 16);
        let model = SfmModel::from_trajectory(&traj, &k, PinholeModel::SimplePinhole, &names).unwrap();
        let back = parse_sfm_model(&model.cameras_text(Some(precision)), &model.images_text(Some(precision))).unwrap();
        let est: Trajectory<f64> = to_trajectory(&back, &names).unwrap();
        let m = evaluate(&traj, &est).unwrap();
        prop_assert!(m.rot_err < 1e-4 && m.trans_err < 1e-4 && m.cam_mc < 1e-4);
    }
}

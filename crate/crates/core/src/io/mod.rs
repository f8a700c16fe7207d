//! File formats and fixture generators. Everything here works in `f64`.
//!
//! Only text SfM models are read; the mapper itself is never executed, but
//! [`glomap_invocations`] prints the command lines used to produce them.

mod pose_file;
mod sfm;
mod synth;

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

pub use pose_file::{
    parse_pose_file, read_pose_file, serialize_pose_file, PoseFile, PoseFileRecord, PoseWarning,
    POSE_FIELDS, POSE_WARN_TOL,
};
pub use sfm::{
    locate_model, parse_sfm_model, quaternion_to_rotation, read_sfm_model, rotation_to_quaternion,
    to_trajectory, PinholeModel, SfmCamera, SfmImage, SfmModel,
};
pub use synth::{
    sample_strided, synth_trajectory, StrideSampler, SynthKind, DEFAULT_CLIP_FRAMES, DOLLY_STEP,
    ORBIT_RADIUS, ORBIT_SWEEP, PAN_STEP_DEG,
};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::metrics::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFrameJson {
    /// Row-major rotation.
    #[serde(rename = "R")]
    pub r: [f64; 9],
    #[serde(rename = "T")]
    pub t: [f64; 3],
}

/// `{"frames": [{"R": [9], "T": [3]}, …]}` holding camera-to-world poses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryJson {
    pub frames: Vec<TrajectoryFrameJson>,
}

impl TrajectoryJson {
    pub fn from_trajectory(t: &Trajectory<f64>) -> Self {
        let frames = t
            .poses()
            .iter()
            .map(|p| {
                let mut r = [0.0; 9];
                for i in 0..3 {
                    for j in 0..3 {
                        r[i * 3 + j] = p.rotation[(i, j)];
                    }
                }
                TrajectoryFrameJson {
                    r,
                    t: [p.translation.x, p.translation.y, p.translation.z],
                }
            })
            .collect();
        Self { frames }
    }

    pub fn to_trajectory(&self) -> Result<Trajectory<f64>> {
        Trajectory::from_estimated(
            self.frames
                .iter()
                .map(|f| {
                    CameraPose::new_unchecked(
                        Matrix3::from_row_slice(&f.r),
                        Vector3::new(f.t[0], f.t[1], f.t[2]),
                    )
                })
                .collect(),
        )
    }
}

pub fn write_trajectory_json(path: &Path, t: &Trajectory<f64>) -> Result<()> {
    let text = serde_json::to_string_pretty(&TrajectoryJson::from_trajectory(t))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_trajectory_json(path: &Path) -> Result<Trajectory<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str::<TrajectoryJson>(&text)?.to_trajectory()
}

/// Default frame names, `000.png`, `001.png`, …
pub fn frame_names(template: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| render_name(template, i)).collect()
}

/// Replaces `{}` with the index or `{:0W}` with the index zero-padded to `W`.
fn render_name(template: &str, i: usize) -> String {
    if let Some(start) = template.find("{:0") {
        if let Some(len) = template[start..].find('}') {
            if let Ok(width) = template[start + 3..start + len].parse::<usize>() {
                return format!(
                    "{}{:0width$}{}",
                    &template[..start],
                    i,
                    &template[start + len + 1..]
                );
            }
        }
    }
    template.replacen("{}", &i.to_string(), 1)
}

/// Feature extraction, exhaustive matching, global mapping and text export
/// with intrinsics held fixed at `k`.
pub fn glomap_invocations(
    workspace: &str,
    image_dir: &str,
    k: &CameraIntrinsics<f64>,
) -> Vec<String> {
    let db = format!("{workspace}/database.db");
    let sparse = format!("{workspace}/sparse");
    let (model, params) = if k.fx == k.fy {
        ("SIMPLE_PINHOLE", format!("{},{},{}", k.fx, k.cx, k.cy))
    } else {
        ("PINHOLE", format!("{},{},{},{}", k.fx, k.fy, k.cx, k.cy))
    };
    vec![
        format!(
            "colmap feature_extractor --database_path {db} --image_path {image_dir} \
             --ImageReader.single_camera 1 --ImageReader.camera_model {model} \
             --ImageReader.camera_params {params} \
             --SiftExtraction.estimate_affine_shape 1 --SiftExtraction.domain_size_pooling 1"
        ),
        format!(
            "colmap exhaustive_matcher --database_path {db} \
             --SiftMatching.guided_matching 1 --SiftMatching.max_num_matches 65536"
        ),
        format!(
            "glomap mapper --database_path {db} --image_path {image_dir} --output_path {sparse} \
             --BundleAdjustment.optimize_intrinsics 0 --RelPoseEstimation.max_epipolar_error 4"
        ),
        format!("colmap model_converter --input_path {sparse}/0 --output_path {sparse}/0 --output_type TXT"),
    ]
}

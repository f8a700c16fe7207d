//! Synthetic multi-view feature grids with known geometry.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, plucker_grids, CameraFrame, CameraIntrinsics, CameraPose};
use crate::metrics::Trajectory;

/// Depth of the scene center in front of the first camera.
pub const SCENE_DEPTH: f64 = 4.0;
/// Half-width of the cube points are drawn from.
pub const SCENE_HALF_EXTENT: f64 = 1.5;
const MIN_DEPTH: f64 = 0.1;
const MAX_POINT_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub h: usize,
    pub w: usize,
    pub frames: Vec<CameraFrame<f64>>,
    pub points: Vec<Vector3<f64>>,
    /// `n_points × c`
    pub features: DMatrix<f64>,
    /// One `hw × c` grid per frame, row-major pixels, zero background.
    pub grids: Vec<DMatrix<f64>>,
    /// Index of the point splatted at each pixel of each frame.
    pub visibility: Vec<Vec<Option<usize>>>,
}

impl SyntheticScene {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn channels(&self) -> usize {
        self.features.ncols()
    }

    /// Frame grids stacked into `N·hw × c` tokens.
    pub fn tokens(&self) -> DMatrix<f64> {
        let hw = self.h * self.w;
        let mut z = DMatrix::zeros(self.grids.len() * hw, self.channels());
        for (i, g) in self.grids.iter().enumerate() {
            z.rows_mut(i * hw, hw).copy_from(g);
        }
        z
    }

    /// Plücker embeddings stacked into `N·hw × 6`.
    pub fn plucker(&self) -> DMatrix<f64> {
        let grids = plucker_grids(&self.frames, self.h, self.w);
        let rows: Vec<[f64; 6]> = grids.iter().flat_map(|g| g.channel_rows()).collect();
        DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c])
    }
}

/// Square-pixel pinhole with focal length equal to the grid width.
pub fn toy_intrinsics(h: usize, w: usize) -> CameraIntrinsics<f64> {
    CameraIntrinsics::new(
        w as f64,
        w as f64,
        w as f64 / 2.0,
        h as f64 / 2.0,
        w as u32,
        h as u32,
    )
    .expect("positive grid size")
}

/// Each point carries a fixed Gaussian feature vector splatted to the
/// pixel containing its projection, nearest point winning.
pub fn make_synthetic_scene(
    n_points: usize,
    trajectory: &Trajectory<f64>,
    h: usize,
    w: usize,
    c: usize,
    seed: u64,
) -> Result<SyntheticScene> {
    if h == 0 || w == 0 || c == 0 || n_points == 0 {
        return Err(Error::InvalidArgument(
            "scene sizes must be positive".into(),
        ));
    }
    let k = toy_intrinsics(h, w);
    let frames: Vec<CameraFrame<f64>> = trajectory
        .poses()
        .iter()
        .map(|c2w| CameraFrame::new(k, c2w.inverse()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = trajectory.poses()[0].transform_point(&Vector3::new(0.0, 0.0, SCENE_DEPTH));
    let mut points = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let mut tries = 0;
        loop {
            let offset =
                Vector3::from_fn(|_, _| rng.random_range(-SCENE_HALF_EXTENT..SCENE_HALF_EXTENT));
            let x = center + offset;
            if frames
                .iter()
                .all(|f| f.pose.transform_point(&x).z > MIN_DEPTH)
            {
                points.push(x);
                break;
            }
            tries += 1;
            if tries > MAX_POINT_RETRIES {
                return Err(Error::InvalidArgument(
                    "no point lies in front of every camera".into(),
                ));
            }
        }
    }
    let features = DMatrix::from_fn(n_points, c, |_, _| rng.sample::<f64, _>(StandardNormal));

    let hw = h * w;
    let mut grids = Vec::with_capacity(frames.len());
    let mut visibility = Vec::with_capacity(frames.len());
    for f in &frames {
        let mut depth = vec![f64::INFINITY; hw];
        let mut owner = vec![None; hw];
        for (pi, x) in points.iter().enumerate() {
            let Some((uv, z)) = f.project(x) else {
                continue;
            };
            let (col, row) = (uv.x.floor(), uv.y.floor());
            if col < 0.0 || row < 0.0 || col >= w as f64 || row >= h as f64 {
                continue;
            }
            let p = row as usize * w + col as usize;
            if z < depth[p] {
                depth[p] = z;
                owner[p] = Some(pi);
            }
        }
        let mut g = DMatrix::zeros(hw, c);
        for (p, o) in owner.iter().enumerate() {
            if let Some(pi) = o {
                g.row_mut(p).copy_from(&features.row(*pi));
            }
        }
        grids.push(g);
        visibility.push(owner);
    }
    Ok(SyntheticScene {
        h,
        w,
        frames,
        points,
        features,
        grids,
        visibility,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    /// Orbit around the scene center with a seeded sweep of 60–120°.
    Large,
    /// Every frame at the first pose.
    Static,
}

/// Camera-to-world trajectory starting at the identity.
pub fn scene_trajectory(motion: Motion, n: usize, seed: u64) -> Result<Trajectory<f64>> {
    match motion {
        Motion::Static => Trajectory::new(vec![CameraPose::identity(); n]),
        Motion::Large => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
            let axis = Vector3::new(
                rng.random_range(-0.3..0.3),
                1.0,
                rng.random_range(-0.3..0.3),
            )
            .normalize();
            let sweep = rng.random_range(60f64..120.0).to_radians()
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let target = Vector3::new(0.0, 0.0, SCENE_DEPTH);
            let poses = (0..n)
                .map(|i| {
                    let r = axis_angle(axis, sweep * i as f64 / (n - 1).max(1) as f64);
                    CameraPose::new_unchecked(r, target - r * target)
                })
                .collect();
            Trajectory::new(poses)
        }
    }
}

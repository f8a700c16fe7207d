//! Frame sampling and synthetic camera trajectories.

use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{axis_angle, CameraPose};
use crate::metrics::Trajectory;

pub const DEFAULT_CLIP_FRAMES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrideSampler {
    pub stride: usize,
    pub n_frames: usize,
    pub start: usize,
}

impl StrideSampler {
    pub fn new(stride: usize, n_frames: usize, start: usize) -> Result<Self> {
        if stride == 0 || n_frames == 0 {
            return Err(Error::InvalidArgument(
                "stride and n_frames must be at least 1".into(),
            ));
        }
        Ok(Self {
            stride,
            n_frames,
            start,
        })
    }

    pub fn sample(&self, total: usize) -> Result<Vec<usize>> {
        sample_strided(total, self.stride, self.n_frames, self.start)
    }
}

/// `[start, start + stride, …]` of length `n`, all below `total`.
pub fn sample_strided(total: usize, stride: usize, n: usize, start: usize) -> Result<Vec<usize>> {
    if stride == 0 || n == 0 {
        return Err(Error::InvalidArgument(
            "stride and n must be at least 1".into(),
        ));
    }
    let last = (n - 1)
        .checked_mul(stride)
        .and_then(|s| s.checked_add(start))
        .ok_or_else(|| Error::Range("sample span overflows".into()))?;
    if last >= total {
        return Err(Error::Range(format!(
            "{n} frames at stride {stride} from {start} need {} frames, clip has {total}",
            last + 1
        )));
    }
    Ok((0..n).map(|i| start + i * stride).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Orbit,
    Dolly,
    Pan,
    RandomSmooth,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::Orbit,
        SynthKind::Dolly,
        SynthKind::Pan,
        SynthKind::RandomSmooth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Orbit => "orbit",
            SynthKind::Dolly => "dolly",
            SynthKind::Pan => "pan",
            SynthKind::RandomSmooth => "random_smooth",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown trajectory kind `{s}` (orbit, dolly, pan, random_smooth)"
                ))
            })
    }
}

pub const DOLLY_STEP: f64 = 0.1;
pub const PAN_STEP_DEG: f64 = 2.0;
pub const ORBIT_RADIUS: f64 = 4.0;
/// Total orbit sweep in radians.
pub const ORBIT_SWEEP: f64 = std::f64::consts::FRAC_PI_2;

/// Camera-to-world poses with the first pose at the identity. Only
/// `RandomSmooth` consumes the seed.
pub fn synth_trajectory(kind: SynthKind, n: usize, seed: u64) -> Result<Trajectory<f64>> {
    if n < 2 {
        return Err(Error::InvalidArgument("a trajectory needs n >= 2".into()));
    }
    let poses: Vec<CameraPose<f64>> = match kind {
        SynthKind::Dolly => (0..n)
            .map(|i| {
                CameraPose::new_unchecked(
                    Matrix3::identity(),
                    Vector3::new(0.0, 0.0, DOLLY_STEP * i as f64),
                )
            })
            .collect(),
        SynthKind::Pan => (0..n)
            .map(|i| {
                let a = (PAN_STEP_DEG * i as f64).to_radians();
                CameraPose::new_unchecked(axis_angle(Vector3::y(), a), Vector3::zeros())
            })
            .collect(),
        SynthKind::Orbit => {
            // Circle around a target straight ahead of the first camera,
            // always looking at it.
            let target = Vector3::new(0.0, 0.0, ORBIT_RADIUS);
            (0..n)
                .map(|i| {
                    let phi = ORBIT_SWEEP * i as f64 / (n - 1) as f64;
                    let center = target + ORBIT_RADIUS * Vector3::new(phi.sin(), 0.0, -phi.cos());
                    let z = (target - center).normalize();
                    let y = Vector3::y();
                    let x = y.cross(&z);
                    let r = Matrix3::from_columns(&[x, y, z]);
                    CameraPose::new_unchecked(r, center)
                })
                .collect()
        }
        SynthKind::RandomSmooth => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let jitter = Normal::new(0.0, 1.0).expect("unit normal");
            let mut draw = |s: f64| {
                Vector3::new(
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                ) * s
            };
            let mut vel = draw(0.05);
            let mut omega = draw(0.02);
            let mut pose = CameraPose::identity();
            let mut out = vec![pose];
            for _ in 1..n {
                vel = 0.8 * vel + draw(0.02);
                omega = 0.8 * omega + draw(0.01);
                let step_r = match omega.try_normalize(1e-15) {
                    Some(axis) => axis_angle(axis, omega.norm()),
                    None => Matrix3::identity(),
                };
                pose = CameraPose::new_unchecked(
                    pose.rotation * step_r,
                    pose.translation + pose.rotation * vel,
                );
                out.push(pose);
            }
            out
        }
    };
    Trajectory::new(poses)
}

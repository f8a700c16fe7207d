//! Camera-controllability metrics over canonicalized camera-to-world trajectories.
//!
//! Trajectories are re-expressed relative to their first camera and scaled so
//! the furthest camera sits at unit distance before RotErr, TransErr and CamMC
//! are accumulated over frames. Multi-trial results are averaged per sample
//! over successful trials only, then over samples.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, CameraPose};
use crate::scalar::Real;

/// Rotation tolerance accepted by [`Trajectory::new`].
pub const TRAJECTORY_ORTHONORMAL_TOL: f64 = 1e-5;
/// Furthest-camera distances below this leave translations unscaled.
pub const STATIC_SCALE_EPS: f64 = 1e-9;

/// Ordered camera-to-world poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T: Real> {
    poses: Vec<CameraPose<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn new(poses: Vec<CameraPose<T>>) -> Result<Self> {
        if poses.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a trajectory needs at least 2 poses, got {}",
                poses.len()
            )));
        }
        for (i, p) in poses.iter().enumerate() {
            if !(p.orthonormality_error() < T::lit(TRAJECTORY_ORTHONORMAL_TOL))
                || p.rotation.determinant() <= T::zero()
            {
                return Err(Error::InvalidArgument(format!(
                    "pose {i} rotation is not orthonormal"
                )));
            }
            if !p.translation.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "pose {i} translation is not finite"
                )));
            }
        }
        Ok(Self { poses })
    }

    /// Projects every rotation onto SO(3) first; meant for estimated poses
    /// read back from limited-precision text.
    pub fn from_estimated(poses: Vec<CameraPose<T>>) -> Result<Self> {
        let fixed = poses
            .into_iter()
            .map(|p| CameraPose::new_unchecked(nearest_rotation(&p.rotation), p.translation))
            .collect();
        Self::new(fixed)
    }

    /// Builds a camera-to-world trajectory from world-to-camera poses.
    pub fn from_world_to_camera(poses: &[CameraPose<T>]) -> Result<Self> {
        Self::new(poses.iter().map(CameraPose::inverse).collect())
    }

    pub fn poses(&self) -> &[CameraPose<T>] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Applies `world` on the left of every pose (a change of world frame).
    pub fn transformed(&self, world: &CameraPose<T>) -> Self {
        Self {
            poses: self.poses.iter().map(|p| world.compose(p)).collect(),
        }
    }

    /// Multiplies every translation by `s`.
    pub fn scaled(&self, s: T) -> Self {
        Self {
            poses: self
                .poses
                .iter()
                .map(|p| CameraPose::new_unchecked(p.rotation, p.translation * s))
                .collect(),
        }
    }

    pub fn canonicalize(&self) -> Self {
        canonicalize(self)
    }
}

/// Expresses every pose relative to the first and divides translations by
/// the largest camera distance from the first camera.
pub fn canonicalize<T: Real>(t: &Trajectory<T>) -> Trajectory<T> {
    let first_inv = t.poses[0].inverse();
    let mut poses: Vec<CameraPose<T>> = t.poses.iter().map(|p| first_inv.compose(p)).collect();
    poses[0] = CameraPose::identity();
    let scale = poses
        .iter()
        .map(|p| p.translation.norm())
        .fold(T::zero(), |a, b| if b > a { b } else { a });
    if scale >= T::lit(STATIC_SCALE_EPS) {
        for p in &mut poses {
            p.translation /= scale;
        }
    }
    Trajectory { poses }
}

/// Ground truth and estimate of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair<T: Real> {
    pub gt: Trajectory<T>,
    pub est: Trajectory<T>,
}

impl<T: Real> TrajectoryPair<T> {
    /// Canonicalizes both trajectories.
    pub fn canonicalized(gt: &Trajectory<T>, est: &Trajectory<T>) -> Result<Self> {
        Self::check_lengths(gt, est)?;
        Ok(Self {
            gt: canonicalize(gt),
            est: canonicalize(est),
        })
    }

    /// Pairs trajectories that are already in canonical form.
    pub fn from_canonical(gt: Trajectory<T>, est: Trajectory<T>) -> Result<Self> {
        Self::check_lengths(&gt, &est)?;
        Ok(Self { gt, est })
    }

    fn check_lengths(gt: &Trajectory<T>, est: &Trajectory<T>) -> Result<()> {
        if gt.len() != est.len() {
            return Err(Error::Shape(format!(
                "ground truth has {} poses, estimate {}",
                gt.len(),
                est.len()
            )));
        }
        Ok(())
    }

    fn frames(&self) -> impl Iterator<Item = (&CameraPose<T>, &CameraPose<T>)> {
        self.gt.poses.iter().zip(&self.est.poses)
    }
}

/// Geodesic angle between two rotations, `acos((tr(R̃ Rᵀ) − 1) / 2)`.
///
/// Evaluated as `atan2(sin, cos)` with the sine taken from the antisymmetric
/// part of `R̃ Rᵀ`; `acos` loses about half the digits near zero.
pub fn rotation_angle<T: Real>(est: &Matrix3<T>, gt: &Matrix3<T>) -> T {
    let m = est * gt.transpose();
    let two = T::lit(2.0);
    let cos = (m.trace() - T::one()) / two;
    let axis = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    );
    (axis.norm() / two).atan2(cos)
}

/// Accumulated rotation error in radians.
pub fn rot_err<T: Real>(pair: &TrajectoryPair<T>) -> T {
    pair.frames()
        .map(|(gt, est)| rotation_angle(&est.rotation, &gt.rotation))
        .fold(T::zero(), |a, b| a + b)
}

/// Sum of camera-position distances.
pub fn trans_err<T: Real>(pair: &TrajectoryPair<T>) -> T {
    pair.frames()
        .map(|(gt, est)| (est.translation - gt.translation).norm())
        .fold(T::zero(), |a, b| a + b)
}

/// Sum of Frobenius norms of the `3×4` pose differences.
pub fn cam_mc<T: Real>(pair: &TrajectoryPair<T>) -> T {
    pair.frames()
        .map(|(gt, est)| {
            let dr = (est.rotation - gt.rotation).norm_squared();
            let dt = (est.translation - gt.translation).norm_squared();
            (dr + dt).sqrt()
        })
        .fold(T::zero(), |a, b| a + b)
}

/// The three metrics of one trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub rot_err: f64,
    pub trans_err: f64,
    pub cam_mc: f64,
}

impl TrialMetrics {
    fn mean_of(items: &[TrialMetrics]) -> Option<Self> {
        if items.is_empty() {
            return None;
        }
        let n = items.len() as f64;
        Some(Self {
            rot_err: items.iter().map(|m| m.rot_err).sum::<f64>() / n,
            trans_err: items.iter().map(|m| m.trans_err).sum::<f64>() / n,
            cam_mc: items.iter().map(|m| m.cam_mc).sum::<f64>() / n,
        })
    }
}

/// Canonicalizes both trajectories and evaluates all three metrics.
pub fn evaluate<T: Real>(gt: &Trajectory<T>, est: &Trajectory<T>) -> Result<TrialMetrics> {
    let pair = TrajectoryPair::canonicalized(gt, est)?;
    Ok(TrialMetrics {
        rot_err: rot_err(&pair).as_f64(),
        trans_err: trans_err(&pair).as_f64(),
        cam_mc: cam_mc(&pair).as_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrialOutcome {
    Success(TrialMetrics),
    Failed { reason: String },
}

impl TrialOutcome {
    pub fn failed(reason: impl Into<String>) -> Self {
        TrialOutcome::Failed {
            reason: reason.into(),
        }
    }

    pub fn metrics(&self) -> Option<&TrialMetrics> {
        match self {
            TrialOutcome::Success(m) => Some(m),
            TrialOutcome::Failed { .. } => None,
        }
    }
}

/// All trials of one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTrials {
    pub sample_id: String,
    pub trials: Vec<TrialOutcome>,
}

/// Per-sample mean over successful trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sample_id: String,
    pub rot_err: f64,
    pub trans_err: f64,
    pub cam_mc: f64,
    pub n_trials_used: usize,
    pub per_trial: Vec<TrialMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleAggregate {
    /// Samples with at least one successful trial.
    pub reports: Vec<MetricReport>,
    /// Samples whose every trial failed.
    pub failed_samples: Vec<String>,
    /// Mean over `reports`; `None` when every sample failed.
    pub dataset_mean: Option<TrialMetrics>,
    pub n_samples: usize,
    pub n_trials: usize,
    pub n_failed_trials: usize,
    pub trial_failure_rate: f64,
    pub sample_failure_rate: f64,
}

/// Sample-wise aggregation that ignores failed trials.
pub fn aggregate(samples: &[SampleTrials]) -> Result<SampleAggregate> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut reports = Vec::new();
    let mut failed_samples = Vec::new();
    let (mut n_trials, mut n_failed) = (0, 0);
    for sample in samples {
        let ok: Vec<TrialMetrics> = sample
            .trials
            .iter()
            .filter_map(|t| t.metrics().copied())
            .collect();
        n_trials += sample.trials.len();
        n_failed += sample.trials.len() - ok.len();
        match TrialMetrics::mean_of(&ok) {
            Some(mean) => reports.push(MetricReport {
                sample_id: sample.sample_id.clone(),
                rot_err: mean.rot_err,
                trans_err: mean.trans_err,
                cam_mc: mean.cam_mc,
                n_trials_used: ok.len(),
                per_trial: ok,
            }),
            None => failed_samples.push(sample.sample_id.clone()),
        }
    }
    let means: Vec<TrialMetrics> = reports
        .iter()
        .map(|r| TrialMetrics {
            rot_err: r.rot_err,
            trans_err: r.trans_err,
            cam_mc: r.cam_mc,
        })
        .collect();
    Ok(SampleAggregate {
        dataset_mean: TrialMetrics::mean_of(&means),
        n_samples: samples.len(),
        n_trials,
        n_failed_trials: n_failed,
        trial_failure_rate: if n_trials == 0 {
            0.0
        } else {
            n_failed as f64 / n_trials as f64
        },
        sample_failure_rate: failed_samples.len() as f64 / samples.len() as f64,
        reports,
        failed_samples,
    })
}

/// CSV with columns `sample_id,trial,rot_err,trans_err,cam_mc,status`;
/// failed trials leave the metric cells empty.
pub fn write_metrics_csv<W: Write>(samples: &[SampleTrials], writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    csv.write_record([
        "sample_id",
        "trial",
        "rot_err",
        "trans_err",
        "cam_mc",
        "status",
    ])
    .map_err(wrap)?;
    for s in samples {
        for (i, t) in s.trials.iter().enumerate() {
            let trial = i.to_string();
            match t {
                TrialOutcome::Success(m) => csv
                    .write_record([
                        s.sample_id.as_str(),
                        &trial,
                        &m.rot_err.to_string(),
                        &m.trans_err.to_string(),
                        &m.cam_mc.to_string(),
                        "ok",
                    ])
                    .map_err(wrap)?,
                TrialOutcome::Failed { reason } => csv
                    .write_record([
                        s.sample_id.as_str(),
                        &trial,
                        "",
                        "",
                        "",
                        &format!("failed: {reason}"),
                    ])
                    .map_err(wrap)?,
            }
        }
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use nalgebra::Vector3;

    fn line_trajectory(n: usize) -> Trajectory<f64> {
        Trajectory::new(
            (0..n)
                .map(|i| {
                    CameraPose::new_unchecked(
                        axis_angle(Vector3::y(), 0.05 * i as f64),
                        Vector3::new(0.2 * i as f64, 0.0, 0.1 * i as f64),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn identical_is_zero() {
        let t = line_trajectory(16);
        let m = evaluate(&t, &t).unwrap();
        assert_eq!((m.rot_err, m.trans_err, m.cam_mc), (0.0, 0.0, 0.0));
    }

    #[test]
    fn axis_angle_offset_accumulates() {
        let gt = line_trajectory(16);
        let off = axis_angle(Vector3::new(1.0, -2.0, 0.5), 0.1);
        let est = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| CameraPose::new_unchecked(p.rotation * off, p.translation))
                .collect(),
        )
        .unwrap();
        let pair = TrajectoryPair::from_canonical(gt, est).unwrap();
        assert!((rot_err(&pair) - 1.6).abs() < 1e-9);
    }

    #[test]
    fn constant_translation_offset() {
        let gt = line_trajectory(16);
        let est = Trajectory::new(
            gt.poses()
                .iter()
                .map(|p| {
                    CameraPose::new_unchecked(
                        p.rotation,
                        p.translation + Vector3::new(0.1, 0.0, 0.0),
                    )
                })
                .collect(),
        )
        .unwrap();
        let pair = TrajectoryPair::from_canonical(gt, est).unwrap();
        assert!((trans_err(&pair) - 1.6).abs() < 1e-12);
        assert!((cam_mc(&pair) - 1.6).abs() < 1e-12);
        assert_eq!(rot_err(&pair), 0.0);
    }

    #[test]
    fn canonical_form() {
        let t = line_trajectory(16).canonicalize();
        assert_eq!(t.poses()[0], CameraPose::identity());
        let max = t
            .poses()
            .iter()
            .map(|p| p.translation.norm())
            .fold(0.0, f64::max);
        assert!((max - 1.0).abs() < 1e-12);
        let again = t.canonicalize();
        for (a, b) in t.poses().iter().zip(again.poses()) {
            assert!((a.rotation - b.rotation).norm() < 1e-9);
            assert!((a.translation - b.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn static_camera_keeps_unit_scale() {
        let p =
            CameraPose::new_unchecked(axis_angle(Vector3::x(), 0.3), Vector3::new(1.0, 2.0, 3.0));
        let t = Trajectory::new(vec![p, p, p]).unwrap().canonicalize();
        assert!(t.poses().iter().all(|q| q.translation.norm() < 1e-12));
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::<f64>::new(vec![CameraPose::identity()]).is_err());
        let bad = CameraPose::new_unchecked(Matrix3::identity() * 1.1, Vector3::zeros());
        assert!(Trajectory::new(vec![CameraPose::identity(), bad]).is_err());
        let fixed = Trajectory::from_estimated(vec![CameraPose::identity(), bad]).unwrap();
        assert!(fixed.poses()[1].orthonormality_error() < 1e-12);
    }

    #[test]
    fn aggregation_examples() {
        let m = |v: f64| {
            TrialOutcome::Success(TrialMetrics {
                rot_err: v,
                trans_err: v,
                cam_mc: v,
            })
        };
        let agg = aggregate(&[SampleTrials {
            sample_id: "a".into(),
            trials: vec![m(2.0), m(4.0), TrialOutcome::failed("unregistered frame")],
        }])
        .unwrap();
        assert_eq!(agg.reports[0].rot_err, 3.0);
        assert_eq!(agg.reports[0].n_trials_used, 2);

        let agg = aggregate(&[
            SampleTrials {
                sample_id: "a".into(),
                trials: vec![m(3.0)],
            },
            SampleTrials {
                sample_id: "b".into(),
                trials: vec![m(5.0)],
            },
            SampleTrials {
                sample_id: "c".into(),
                trials: vec![TrialOutcome::failed("x")],
            },
        ])
        .unwrap();
        assert_eq!(agg.dataset_mean.unwrap().cam_mc, 4.0);
        assert_eq!(agg.failed_samples, vec!["c".to_string()]);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let samples = [SampleTrials {
            sample_id: "s0".into(),
            trials: vec![
                TrialOutcome::Success(TrialMetrics {
                    rot_err: 0.5,
                    trans_err: 1.0,
                    cam_mc: 1.5,
                }),
                TrialOutcome::failed("missing"),
            ],
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&samples, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "sample_id,trial,rot_err,trans_err,cam_mc,status\ns0,0,0.5,1,1.5,ok\ns0,1,,,,failed: missing\n"
        );
    }
}

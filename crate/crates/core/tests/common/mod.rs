//! Random fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use epiray::geometry::{CameraFrame, CameraIntrinsics, CameraPose};
use epiray::toydiff::{standard_normal, GradTape, Var};
use nalgebra::{DMatrix, Matrix3, Vector3, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Uniform rotation from a normalized Gaussian quaternion, expanded by the
/// textbook formula.
pub fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q = Vector4::new(gauss(rng), gauss(rng), gauss(rng), gauss(rng)).normalize();
    quat_matrix(q[0], q[1], q[2], q[3])
}

pub fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> Matrix3<f64> {
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Rotation about `axis` by Rodrigues' formula.
pub fn rodrigues(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let k = axis.normalize();
    let kx = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Matrix3::identity() + kx * angle.sin() + kx * kx * (1.0 - angle.cos())
}

/// Geodesic angle between two rotations through the quaternion of `a bᵀ`
/// (Shepperd's branch selection), `2·atan2(‖v‖, |w|)`.
pub fn quaternion_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a * b.transpose();
    let tr = m.trace();
    let (w, v) = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        (
            0.25 * s,
            Vector3::new(
                m[(2, 1)] - m[(1, 2)],
                m[(0, 2)] - m[(2, 0)],
                m[(1, 0)] - m[(0, 1)],
            ) / s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        (
            (m[(2, 1)] - m[(1, 2)]) / s,
            Vector3::new(
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            ),
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        (
            (m[(0, 2)] - m[(2, 0)]) / s,
            Vector3::new(
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            ),
        )
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        (
            (m[(1, 0)] - m[(0, 1)]) / s,
            Vector3::new(
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            ),
        )
    };
    2.0 * v.norm().atan2(w.abs())
}

pub fn random_vector(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(gauss(rng), gauss(rng), gauss(rng)) * scale
}

pub fn random_pose(rng: &mut impl Rng) -> CameraPose<f64> {
    CameraPose::new(random_rotation(rng), random_vector(rng, 1.0)).unwrap()
}

pub fn random_intrinsics(rng: &mut impl Rng) -> CameraIntrinsics<f64> {
    let (w, h) = (rng.random_range(64..512u32), rng.random_range(64..512u32));
    let fx = rng.random_range(0.5..2.0) * w as f64;
    let fy = fx * rng.random_range(0.8..1.25);
    CameraIntrinsics::new(
        fx,
        fy,
        w as f64 * rng.random_range(0.3..0.7),
        h as f64 * rng.random_range(0.3..0.7),
        w,
        h,
    )
    .unwrap()
}

pub fn random_frame(rng: &mut impl Rng) -> CameraFrame<f64> {
    CameraFrame::new(random_intrinsics(rng), random_pose(rng))
}

/// Cameras scattered around a common look-at target so that points near the
/// target are visible from all of them.
pub fn looking_at_origin(rng: &mut impl Rng, n: usize) -> Vec<CameraFrame<f64>> {
    let k = random_intrinsics(rng);
    (0..n)
        .map(|_| {
            let center = random_vector(rng, 1.0).normalize() * rng.random_range(3.0..6.0);
            let forward = (-center).normalize();
            let up_hint = if forward.y.abs() < 0.9 {
                Vector3::y()
            } else {
                Vector3::x()
            };
            let right = up_hint.cross(&forward).normalize();
            let down = forward.cross(&right);
            let r = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
            CameraFrame::new(k, CameraPose::new(r, -r * center).unwrap())
        })
        .collect()
}

/// Pixel projection by explicit `K (R x + T)` with perspective division.
pub fn project(frame: &CameraFrame<f64>, x: &Vector3<f64>) -> (f64, f64, f64) {
    let c = frame.pose.rotation * x + frame.pose.translation;
    let k = &frame.intrinsics;
    (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy, c.z)
}

/// Homogeneous image of `x` (no division) under camera `frame` rescaled to `w`×`h`.
fn homogeneous_image(
    frame: &CameraFrame<f64>,
    x: &Vector3<f64>,
    w: usize,
    h: usize,
) -> Vector3<f64> {
    let k = &frame.intrinsics;
    let (sx, sy) = (w as f64 / k.width as f64, h as f64 / k.height as f64);
    let kk = Matrix3::new(
        k.fx * sx,
        0.0,
        k.cx * sx,
        0.0,
        k.fy * sy,
        k.cy * sy,
        0.0,
        0.0,
        1.0,
    );
    kk * (frame.pose.rotation * x + frame.pose.translation)
}

/// Epipolar mask by brute force: the line of query pixel `p` in frame `j`
/// is the join of the images of two points on the back-projected ray, and
/// every key pixel center is thresholded against it.
pub fn brute_force_mask(
    frames: &[CameraFrame<f64>],
    i: usize,
    h: usize,
    w: usize,
    delta: f64,
    r: usize,
) -> Vec<Vec<bool>> {
    let n = frames.len();
    let hw = h * w;
    let fi = &frames[i];
    let k = &fi.intrinsics;
    let (sx, sy) = (w as f64 / k.width as f64, h as f64 / k.height as f64);
    let center_i = -fi.pose.rotation.transpose() * fi.pose.translation;
    let mut rows = vec![vec![false; n * hw + r]; hw];
    for (p, row) in rows.iter_mut().enumerate() {
        let (u, v) = ((p % w) as f64 + 0.5, (p / w) as f64 + 0.5);
        let cam_dir = Vector3::new(
            (u - k.cx * sx) / (k.fx * sx),
            (v - k.cy * sy) / (k.fy * sy),
            1.0,
        );
        let world_dir = fi.pose.rotation.transpose() * cam_dir;
        for (j, fj) in frames.iter().enumerate() {
            let block = &mut row[j * hw..(j + 1) * hw];
            let center_j = -fj.pose.rotation.transpose() * fj.pose.translation;
            if j == i || (center_i - center_j).norm() < 1e-6 {
                block.fill(true);
                continue;
            }
            let a = homogeneous_image(fj, &(center_i + world_dir), w, h);
            let b = homogeneous_image(fj, &(center_i + world_dir * 7.0), w, h);
            let line = a.cross(&b);
            let norm = (line.x * line.x + line.y * line.y).sqrt();
            if norm < 1e-12 {
                block.fill(true);
                continue;
            }
            for (q, bit) in block.iter_mut().enumerate() {
                let (x, y) = ((q % w) as f64 + 0.5, (q / w) as f64 + 0.5);
                *bit = ((line.x * x + line.y * y + line.z) / norm).abs() < delta;
            }
        }
        row[n * hw..].fill(true);
    }
    rows
}

/// Row-wise dense softmax of `logits` with `-inf` at masked entries.
pub fn softmax_rows(logits: &[Vec<f64>], mask: &[Vec<bool>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .zip(mask)
        .map(|(row, keep)| {
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(&l, _)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row
                .iter()
                .zip(keep)
                .map(|(&l, &k)| if k { (l - max).exp() } else { 0.0 })
                .collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Central finite differences of `f` at `x`, step `h`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            xs[i] = x[i] + h;
            let fp = f(&xs);
            xs[i] = x[i] - h;
            let fm = f(&xs);
            xs[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-6)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-6)
}

/// Relative error between the tape gradient and central differences (step
/// `h`) of `mse(op(inputs), target)` over every input entry, with a fixed
/// random target.
pub fn tape_gradient_error(
    inputs: &[DMatrix<f64>],
    h: f64,
    seed: u64,
    op: impl Fn(&mut GradTape, &[Var]) -> Var,
) -> f64 {
    let run = |xs: &[DMatrix<f64>], target: Option<&DMatrix<f64>>| {
        let mut tape = GradTape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
        let out = op(&mut tape, &vars);
        let (r, c) = tape.value(out).shape();
        let target = target.cloned().unwrap_or_else(|| DMatrix::zeros(r, c));
        let loss = tape.mse(out, &target).unwrap();
        (tape, vars, loss, (r, c))
    };
    let (_, _, _, (r, c)) = run(inputs, None);
    let target = standard_normal(r, c, &mut rng(seed));
    let (tape, vars, loss, _) = run(inputs, Some(&target));
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| grads.wrt(v).iter().copied().collect::<Vec<_>>())
        .collect();

    let flat: Vec<f64> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
    let numeric = finite_difference(&flat, h, |xs| {
        let mut at = 0;
        let rebuilt: Vec<DMatrix<f64>> = inputs
            .iter()
            .map(|x| {
                let m = DMatrix::from_column_slice(x.nrows(), x.ncols(), &xs[at..at + x.len()]);
                at += x.len();
                m
            })
            .collect();
        let (tape, _, loss, _) = run(&rebuilt, Some(&target));
        tape.value(loss)[(0, 0)]
    });
    relative_error(&numeric, &analytic)
}

//! Per-clip camera files: an optional URL header followed by one line per
//! frame with 19 whitespace-separated fields
//! `timestamp fx fy cx cy 0 0 r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3`.
//! Intrinsics are normalized by image width/height; the pose is world-to-camera.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{nearest_rotation, CameraFrame, CameraIntrinsics, CameraPose};

pub const POSE_FIELDS: usize = 19;
/// Rotation blocks further than this from orthonormal produce a warning.
pub const POSE_WARN_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct PoseFileRecord {
    pub timestamp: i64,
    /// Normalized `(fx, fy, cx, cy)`.
    pub intrinsics: [f64; 4],
    pub reserved: [f64; 2],
    /// Row-major `[R | T]`, world-to-camera.
    pub pose: [f64; 12],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseWarning {
    pub line: usize,
    pub orthonormality_error: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PoseFile {
    pub header: Option<String>,
    pub records: Vec<PoseFileRecord>,
    pub warnings: Vec<PoseWarning>,
}

impl PoseFileRecord {
    pub fn identity(timestamp: i64, intrinsics: [f64; 4]) -> Self {
        Self {
            timestamp,
            intrinsics,
            reserved: [0.0; 2],
            pose: [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    pub fn from_pose(timestamp: i64, intrinsics: [f64; 4], pose: &CameraPose<f64>) -> Self {
        let mut p = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                p[r * 4 + c] = pose.rotation[(r, c)];
            }
            p[r * 4 + 3] = pose.translation[r];
        }
        Self {
            timestamp,
            intrinsics,
            reserved: [0.0; 2],
            pose: p,
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.pose[r * 4 + c])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.pose[3], self.pose[7], self.pose[11])
    }

    pub fn orthonormality_error(&self) -> f64 {
        CameraPose::new_unchecked(self.rotation(), self.translation()).orthonormality_error()
    }

    /// World-to-camera pose; the rotation is projected onto SO(3) when it is
    /// not already orthonormal to rounding.
    pub fn camera_pose(&self) -> CameraPose<f64> {
        let raw = CameraPose::new_unchecked(self.rotation(), self.translation());
        if raw.orthonormality_error() > 1e-12 {
            CameraPose::new_unchecked(nearest_rotation(&raw.rotation), raw.translation)
        } else {
            raw
        }
    }

    /// Pixel intrinsics for a `width × height` image.
    pub fn denormalized(&self, width: u32, height: u32) -> Result<CameraIntrinsics<f64>> {
        let [fx, fy, cx, cy] = self.intrinsics;
        let (w, h) = (width as f64, height as f64);
        CameraIntrinsics::new(fx * w, fy * h, cx * w, cy * h, width, height)
    }

    /// Intrinsics after resizing a `src_w × src_h` frame so its short side is
    /// `size`, then center-cropping to `size × size`.
    pub fn center_cropped(
        &self,
        src_w: u32,
        src_h: u32,
        size: u32,
    ) -> Result<CameraIntrinsics<f64>> {
        if src_w == 0 || src_h == 0 || size == 0 {
            return Err(Error::InvalidArgument("crop sizes must be positive".into()));
        }
        let s = size as f64 / src_w.min(src_h) as f64;
        let (rw, rh) = (src_w as f64 * s, src_h as f64 * s);
        let [fx, fy, cx, cy] = self.intrinsics;
        let off_x = (rw - size as f64) / 2.0;
        let off_y = (rh - size as f64) / 2.0;
        CameraIntrinsics::new(
            fx * rw,
            fy * rh,
            cx * rw - off_x,
            cy * rh - off_y,
            size,
            size,
        )
    }

    pub fn frame(&self, width: u32, height: u32) -> Result<CameraFrame<f64>> {
        let mut f = CameraFrame::new(self.denormalized(width, height)?, self.camera_pose());
        f.timestamp = Some(self.timestamp);
        Ok(f)
    }

    fn write_line(&self, out: &mut String) {
        write!(out, "{}", self.timestamp).unwrap();
        for v in self
            .intrinsics
            .iter()
            .chain(&self.reserved)
            .chain(&self.pose)
        {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
}

fn looks_numeric(tok: &str) -> bool {
    tok.parse::<f64>().is_ok()
}

pub fn parse_pose_file(text: &str) -> Result<PoseFile> {
    let mut out = PoseFile::default();
    let mut seen_content = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if !seen_content && !looks_numeric(toks[0]) {
            out.header = Some(line.to_string());
            seen_content = true;
            continue;
        }
        seen_content = true;
        if toks.len() != POSE_FIELDS {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {POSE_FIELDS} fields, found {}", toks.len()),
            });
        }
        let timestamp = toks[0].parse::<i64>().map_err(|e| Error::Parse {
            line: line_no,
            msg: format!("timestamp `{}`: {e}", toks[0]),
        })?;
        let mut vals = [0.0; POSE_FIELDS - 1];
        for (slot, tok) in vals.iter_mut().zip(&toks[1..]) {
            *slot = tok.parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                msg: format!("field `{tok}`: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite field `{tok}`"),
                });
            }
        }
        let rec = PoseFileRecord {
            timestamp,
            intrinsics: vals[0..4].try_into().unwrap(),
            reserved: vals[4..6].try_into().unwrap(),
            pose: vals[6..18].try_into().unwrap(),
        };
        let err = rec.orthonormality_error();
        if err > POSE_WARN_TOL {
            out.warnings.push(PoseWarning {
                line: line_no,
                orthonormality_error: err,
            });
        }
        out.records.push(rec);
    }
    Ok(out)
}

pub fn read_pose_file(path: &Path) -> Result<PoseFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_pose_file(&text)
}

/// Shortest round-trip float formatting, so `parse(serialize(x)) == x`.
pub fn serialize_pose_file(file: &PoseFile) -> String {
    let mut out = String::new();
    if let Some(h) = &file.header {
        out.push_str(h);
        out.push('\n');
    }
    for r in &file.records {
        r.write_line(&mut out);
    }
    out
}

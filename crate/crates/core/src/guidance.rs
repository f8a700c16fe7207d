//! Multiple classifier-free guidance over camera and image/text conditions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// The three noise predictions needed for two-signal guidance, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePrediction<T> {
    /// `ε(z_t, c_camera, ∅)`: image and text dropped jointly.
    pub eps_cam_only: Vec<T>,
    /// `ε(z_t, c_camera, c_img&txt)`
    pub eps_full: Vec<T>,
    /// `ε(z_t, ∅, c_img&txt)`
    pub eps_no_cam: Vec<T>,
}

impl<T: Real> GuidancePrediction<T> {
    pub fn new(eps_cam_only: Vec<T>, eps_full: Vec<T>, eps_no_cam: Vec<T>) -> Result<Self> {
        if eps_cam_only.len() != eps_full.len() || eps_full.len() != eps_no_cam.len() {
            return Err(Error::Shape(format!(
                "prediction sizes differ: {}, {}, {}",
                eps_cam_only.len(),
                eps_full.len(),
                eps_no_cam.len()
            )));
        }
        let all = eps_cam_only.iter().chain(&eps_full).chain(&eps_no_cam);
        if !all.into_iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("predictions must be finite".into()));
        }
        Ok(Self {
            eps_cam_only,
            eps_full,
            eps_no_cam,
        })
    }

    pub fn len(&self) -> usize {
        self.eps_full.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_full.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceScales<T> {
    pub s_img_txt: T,
    pub s_camera: T,
}

impl Default for GuidanceScales<f64> {
    /// Image/text scale 7.5 with camera scale 1.0.
    fn default() -> Self {
        Self {
            s_img_txt: 7.5,
            s_camera: 1.0,
        }
    }
}

/// `ε̂ = ε_cam + s_img&txt (ε_full − ε_cam) + s_camera (ε_full − ε_no_cam)`.
pub fn combine<T: Real>(pred: &GuidancePrediction<T>, s: &GuidanceScales<T>) -> Vec<T> {
    pred.eps_cam_only
        .iter()
        .zip(&pred.eps_full)
        .zip(&pred.eps_no_cam)
        .map(|((&cam, &full), &no_cam)| {
            cam + s.s_img_txt * (full - cam) + s.s_camera * (full - no_cam)
        })
        .collect()
}

/// Single-signal guidance `ε_u + s (ε_c − ε_u)`.
pub fn classifier_free<T: Real>(uncond: &[T], cond: &[T], scale: T) -> Result<Vec<T>> {
    if uncond.len() != cond.len() {
        return Err(Error::Shape(format!(
            "{} vs {} elements",
            uncond.len(),
            cond.len()
        )));
    }
    Ok(uncond
        .iter()
        .zip(cond)
        .map(|(&u, &c)| u + scale * (c - u))
        .collect())
}

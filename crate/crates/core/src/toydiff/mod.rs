//! Desk-scale diffusion harness for comparing cross-frame attention variants.
//!
//! Latents are synthetic multi-view feature grids, noised with a cosine
//! schedule and denoised by a single temporal camera block trained with plain
//! gradient descent on the noise-prediction loss. Gradients come from a small
//! reverse-mode tape covering only the operations the model uses. All of this
//! is `f64`-only.

mod ablation;
mod model;
mod scene;
mod tape;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

pub use ablation::{
    ablation_run, write_curves_csv, AblationConfig, AblationReport, Checkpoint, ModelSize,
    SceneConfig, TBucket, VariantResult,
};
pub use model::{AttentionVariant, DenoiseInput, ModelConfig, ToyDenoiser, COND_INPUTS};
pub use scene::{make_synthetic_scene, scene_trajectory, toy_intrinsics, Motion, SyntheticScene};
pub use tape::{GradTape, Gradients, Var};

use crate::error::{Error, Result};

/// `α(t)` with `σ(t) = √(1 − α(t)²)`.
pub trait NoiseSchedule {
    fn alpha(&self, t: f64) -> f64;

    fn sigma(&self, t: f64) -> f64 {
        let a = self.alpha(t);
        (1.0 - a * a).max(0.0).sqrt()
    }
}

/// `α(t) = cos(πt/2)`, `σ(t) = sin(πt/2)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosineSchedule;

impl NoiseSchedule for CosineSchedule {
    fn alpha(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).cos()
    }

    fn sigma(&self, t: f64) -> f64 {
        (std::f64::consts::FRAC_PI_2 * t).sin()
    }
}

fn check_t(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::Range(format!("diffusion time {t} outside [0, 1]")))
    }
}

/// `z_t = α(t) z_0 + σ(t) ε`
pub fn forward_noise(
    schedule: &impl NoiseSchedule,
    z0: &DMatrix<f64>,
    t: f64,
    eps: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_t(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "latent {:?} vs noise {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    Ok(z0 * schedule.alpha(t) + eps * schedule.sigma(t))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Noise-prediction loss of an arbitrary predictor `(z_t, α, σ) ↦ ε̂`.
pub fn noise_prediction_loss(
    schedule: &impl NoiseSchedule,
    predict: impl FnOnce(&DMatrix<f64>, f64, f64) -> DMatrix<f64>,
    z0: &DMatrix<f64>,
    t: f64,
    eps: &DMatrix<f64>,
) -> Result<f64> {
    let z_t = forward_noise(schedule, z0, t, eps)?;
    let pred = predict(&z_t, schedule.alpha(t), schedule.sigma(t));
    if pred.shape() != eps.shape() {
        return Err(Error::Shape("prediction shape differs from noise".into()));
    }
    let loss = (pred - eps).norm_squared() / eps.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "noise_prediction_loss",
        });
    }
    Ok(loss)
}

/// One noised training example with its camera conditioning.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub z0: &'a DMatrix<f64>,
    pub plucker: &'a DMatrix<f64>,
    pub masks: &'a crate::attention::CameraBlockMasks,
}

/// Loss and parameter gradients of `model` at time `t` with noise `eps`.
pub fn diffusion_loss(
    schedule: &impl NoiseSchedule,
    model: &ToyDenoiser,
    ex: &Example<'_>,
    t: f64,
    eps: &DMatrix<f64>,
) -> Result<(f64, Vec<DMatrix<f64>>)> {
    let z_t = forward_noise(schedule, ex.z0, t, eps)?;
    let input = DenoiseInput {
        z_t: &z_t,
        alpha: schedule.alpha(t),
        sigma: schedule.sigma(t),
        scales: None,
        plucker: ex.plucker,
        masks: ex.masks,
    };
    model.loss_and_grad(&input, eps)
}

/// Loss without gradients, through the generic forward pass.
pub fn evaluate_loss(
    schedule: &impl NoiseSchedule,
    model: &ToyDenoiser,
    ex: &Example<'_>,
    t: f64,
    eps: &DMatrix<f64>,
) -> Result<f64> {
    let z_t = forward_noise(schedule, ex.z0, t, eps)?;
    let input = DenoiseInput {
        z_t: &z_t,
        alpha: schedule.alpha(t),
        sigma: schedule.sigma(t),
        scales: None,
        plucker: ex.plucker,
        masks: ex.masks,
    };
    let pred = model.predict(&input)?;
    let loss = (pred - eps).norm_squared() / eps.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            op: "evaluate_loss",
        });
    }
    Ok(loss)
}

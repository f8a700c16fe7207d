//! Training every attention variant on identical data and comparing
//! validation losses.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::CameraBlockMasks;
use crate::error::{Error, Result};

use super::model::{AttentionVariant, ModelConfig, ToyDenoiser};
use super::scene::{make_synthetic_scene, scene_trajectory, Motion, SyntheticScene};
use super::{diffusion_loss, evaluate_loss, standard_normal, CosineSchedule, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub frames: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub n_points: usize,
    pub motion: Motion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub channels: usize,
    pub n_heads: usize,
    pub n_registers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub seed: u64,
    pub variants: Vec<String>,
    pub steps: usize,
    pub eval_every: usize,
    pub lr: f64,
    pub n_train_scenes: usize,
    pub n_val_scenes: usize,
    /// Noise draws per validation scene and bucket.
    pub n_val_draws: usize,
    pub scene: SceneConfig,
    pub model: ModelSize,
    /// Lower edge of the high-noise bucket; its upper edge is 1.
    #[serde(default = "default_high_noise")]
    pub high_noise_from: f64,
}

fn default_high_noise() -> f64 {
    0.7
}

/// A run is diverged once its training loss exceeds this multiple of the
/// initial full-range validation loss.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

impl AblationConfig {
    pub fn parsed_variants(&self) -> Result<Vec<AttentionVariant>> {
        if self.variants.is_empty() {
            return Err(Error::InvalidArgument("no variants requested".into()));
        }
        self.variants.iter().map(|v| v.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.parsed_variants()?;
        let s = &self.scene;
        let positive = [
            ("scene.frames", s.frames),
            ("scene.h", s.h),
            ("scene.w", s.w),
            ("scene.channels", s.channels),
            ("scene.n_points", s.n_points),
            ("model.channels", self.model.channels),
            ("model.n_heads", self.model.n_heads),
            ("n_train_scenes", self.n_train_scenes),
            ("n_val_scenes", self.n_val_scenes),
            ("n_val_draws", self.n_val_draws),
            ("eval_every", self.eval_every),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
        if s.frames < 2 {
            return Err(Error::InvalidArgument(
                "scene.frames must be at least 2".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.high_noise_from) {
            return Err(Error::InvalidArgument(
                "high_noise_from must lie in [0, 1)".into(),
            ));
        }
        if !self.model.channels.is_multiple_of(self.model.n_heads) {
            return Err(Error::InvalidArgument(
                "model.channels must split evenly into heads".into(),
            ));
        }
        Ok(())
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_channels: self.scene.channels,
            channels: self.model.channels,
            n_heads: self.model.n_heads,
            n_registers: self.model.n_registers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TBucket {
    /// `t ∈ [high_noise_from, 1]`
    HighNoise,
    /// `t ∈ [0, 1]`
    Full,
}

impl TBucket {
    pub fn name(self) -> &'static str {
        match self {
            TBucket::HighNoise => "high_noise",
            TBucket::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub high_noise: f64,
    pub full: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: AttentionVariant,
    pub n_params: usize,
    pub checkpoints: Vec<Checkpoint>,
    /// Training loss of every step.
    pub train_losses: Vec<f64>,
    /// Step at which training diverged, if it did.
    pub diverged_at: Option<usize>,
    pub mean_mask_density: f64,
}

impl VariantResult {
    pub fn initial(&self) -> &Checkpoint {
        &self.checkpoints[0]
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints
            .last()
            .expect("at least the initial checkpoint")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub results: Vec<VariantResult>,
    /// Non-diverged variants sorted by final high-noise validation loss.
    pub ordering: Vec<AttentionVariant>,
}

impl AblationReport {
    pub fn result(&self, v: AttentionVariant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }
}

struct PreparedScene {
    scene: SyntheticScene,
    z0: DMatrix<f64>,
    plucker: DMatrix<f64>,
}

struct ValDraw {
    scene: usize,
    t: f64,
    eps: DMatrix<f64>,
    bucket: TBucket,
}

fn prepare_scenes(cfg: &AblationConfig, count: usize, stream: u64) -> Result<Vec<PreparedScene>> {
    let s = &cfg.scene;
    (0..count)
        .map(|i| {
            let scene_seed = cfg
                .seed
                .wrapping_mul(1_000_003)
                .wrapping_add(stream * 100_000 + i as u64);
            let traj = scene_trajectory(s.motion, s.frames, scene_seed)?;
            let scene = make_synthetic_scene(s.n_points, &traj, s.h, s.w, s.channels, scene_seed)?;
            Ok(PreparedScene {
                z0: scene.tokens(),
                plucker: scene.plucker(),
                scene,
            })
        })
        .collect()
}

fn validation_draws(cfg: &AblationConfig, scenes: &[PreparedScene]) -> Vec<ValDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed0f7a11);
    let k = cfg.n_val_draws;
    let mut out = Vec::new();
    for (si, sc) in scenes.iter().enumerate() {
        for bucket in [TBucket::HighNoise, TBucket::Full] {
            let lo = if bucket == TBucket::HighNoise {
                cfg.high_noise_from
            } else {
                0.0
            };
            for j in 0..k {
                let t = lo + (1.0 - lo) * (j as f64 + 0.5) / k as f64;
                let eps = standard_normal(sc.z0.nrows(), sc.z0.ncols(), &mut rng);
                out.push(ValDraw {
                    scene: si,
                    t,
                    eps,
                    bucket,
                });
            }
        }
    }
    out
}

fn validate_model(
    model: &ToyDenoiser,
    scenes: &[PreparedScene],
    masks: &[CameraBlockMasks],
    draws: &[ValDraw],
    step: usize,
) -> Result<Checkpoint> {
    let (mut hi, mut n_hi, mut full, mut n_full) = (0.0, 0, 0.0, 0);
    for d in draws {
        let sc = &scenes[d.scene];
        let ex = Example {
            z0: &sc.z0,
            plucker: &sc.plucker,
            masks: &masks[d.scene],
        };
        let l = evaluate_loss(&CosineSchedule, model, &ex, d.t, &d.eps)?;
        match d.bucket {
            TBucket::HighNoise => {
                hi += l;
                n_hi += 1;
            }
            TBucket::Full => {
                full += l;
                n_full += 1;
            }
        }
    }
    Ok(Checkpoint {
        step,
        high_noise: hi / n_hi as f64,
        full: full / n_full as f64,
    })
}

fn run_variant(
    cfg: &AblationConfig,
    variant: AttentionVariant,
    train: &[PreparedScene],
    val: &[PreparedScene],
    draws: &[ValDraw],
) -> Result<VariantResult> {
    let mut model = ToyDenoiser::init(variant, cfg.model_config(), cfg.seed)?;
    let (h, w) = (cfg.scene.h, cfg.scene.w);
    let train_masks = train
        .iter()
        .map(|s| model.masks(&s.scene.frames, h, w))
        .collect::<Result<Vec<_>>>()?;
    let val_masks = val
        .iter()
        .map(|s| model.masks(&s.scene.frames, h, w))
        .collect::<Result<Vec<_>>>()?;
    let density = train_masks
        .iter()
        .flat_map(|m| m.cross_frame.iter().map(|x| x.density()))
        .sum::<f64>()
        / (train_masks.len() * cfg.scene.frames) as f64;

    let initial = validate_model(&model, val, &val_masks, draws, 0)?;
    let limit = DIVERGENCE_FACTOR * initial.full;
    let mut checkpoints = vec![initial];
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let mut diverged_at = None;
    // Identical across variants: same seed, same draw sequence.
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xda7a));
    for step in 1..=cfg.steps {
        let si = data_rng.random_range(0..train.len());
        let t: f64 = data_rng.random_range(0.0..=1.0);
        let sc = &train[si];
        let eps = standard_normal(sc.z0.nrows(), sc.z0.ncols(), &mut data_rng);
        let ex = Example {
            z0: &sc.z0,
            plucker: &sc.plucker,
            masks: &train_masks[si],
        };
        let outcome = diffusion_loss(&CosineSchedule, &model, &ex, t, &eps);
        let (loss, grads) = match outcome {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => {
                diverged_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        train_losses.push(loss);
        if loss > limit {
            diverged_at = Some(step);
            break;
        }
        model.apply_gradients(&grads, cfg.lr)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            match validate_model(&model, val, &val_masks, draws, step) {
                Ok(c) => checkpoints.push(c),
                Err(Error::NonFinite { .. }) => {
                    diverged_at = Some(step);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(VariantResult {
        variant,
        n_params: model.n_params(),
        checkpoints,
        train_losses,
        diverged_at,
        mean_mask_density: density,
    })
}

/// Trains each requested variant from the same initialization on the same
/// data sequence and records validation losses at fixed checkpoints.
pub fn ablation_run(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let variants = cfg.parsed_variants()?;
    let train = prepare_scenes(cfg, cfg.n_train_scenes, 1)?;
    let val = prepare_scenes(cfg, cfg.n_val_scenes, 2)?;
    let draws = validation_draws(cfg, &val);
    let results = variants
        .iter()
        .map(|&v| run_variant(cfg, v, &train, &val, &draws))
        .collect::<Result<Vec<_>>>()?;
    let mut ranked: Vec<&VariantResult> =
        results.iter().filter(|r| r.diverged_at.is_none()).collect();
    ranked.sort_by(|a, b| a.last().high_noise.total_cmp(&b.last().high_noise));
    let ordering = ranked.iter().map(|r| r.variant).collect();
    Ok(AblationReport {
        config: cfg.clone(),
        results,
        ordering,
    })
}

/// Columns `step,variant,t_bucket,loss`.
pub fn write_curves_csv<W: Write>(report: &AblationReport, writer: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let wrap = |e: csv::Error| Error::InvalidArgument(format!("csv: {e}"));
    csv.write_record(["step", "variant", "t_bucket", "loss"])
        .map_err(wrap)?;
    for r in &report.results {
        for c in &r.checkpoints {
            for (bucket, loss) in [(TBucket::HighNoise, c.high_noise), (TBucket::Full, c.full)] {
                csv.write_record([
                    c.step.to_string(),
                    r.variant.name().to_string(),
                    bucket.name().to_string(),
                    loss.to_string(),
                ])
                .map_err(wrap)?;
            }
        }
    }
    csv.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

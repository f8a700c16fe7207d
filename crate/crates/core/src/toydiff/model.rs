//! Toy noise predictor: input map, one temporal camera block, output map.

use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, CameraBlockMasks, Linear, TemporalCameraBlock};
use crate::epipolar::{build_mask, reference_frame_mask, DeltaRule, EpipolarMask};
use crate::error::{Error, Result};
use crate::geometry::CameraFrame;
use crate::guidance::GuidanceScales;
use crate::mask::BoolMatrix;

use super::tape::{GradTape, Gradients, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// Epipolar masks against every frame.
    Epipolar,
    /// Epipolar mask against frame 0 only.
    ReferenceOnly,
    /// Every token of every frame.
    Full,
    /// Same pixel location across frames.
    Temporal,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::Epipolar,
        AttentionVariant::ReferenceOnly,
        AttentionVariant::Full,
        AttentionVariant::Temporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Epipolar => "epipolar",
            AttentionVariant::ReferenceOnly => "reference_only",
            AttentionVariant::Full => "full",
            AttentionVariant::Temporal => "temporal",
        }
    }

    /// Cross-frame masks of this variant, one per query frame.
    pub fn masks(
        self,
        frames: &[CameraFrame<f64>],
        h: usize,
        w: usize,
        n_registers: usize,
    ) -> Result<CameraBlockMasks> {
        let n = frames.len();
        let delta = DeltaRule::HalfCellDiagonal.delta(h, w);
        let cross = (0..n)
            .map(|i| match self {
                AttentionVariant::Epipolar => build_mask(frames, i, h, w, delta, n_registers),
                AttentionVariant::ReferenceOnly => {
                    reference_frame_mask(frames, i, h, w, delta, n_registers)
                }
                AttentionVariant::Full => Ok(EpipolarMask::full(h, w, n, n_registers, i)),
                AttentionVariant::Temporal => {
                    Ok(EpipolarMask::same_location(h, w, n, n_registers, i))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        CameraBlockMasks::new(cross)
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AttentionVariant::ALL.iter().map(|v| v.name()).collect();
                Error::InvalidArgument(format!(
                    "unknown variant `{s}`; valid variants: {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// Hidden width `d`.
    pub channels: usize,
    pub n_heads: usize,
    pub n_registers: usize,
}

/// Extra per-token inputs: `α`, `σ` and the two guidance scales, the
/// latter zero unless supplied.
pub const COND_INPUTS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    pub variant: AttentionVariant,
    pub config: ModelConfig,
    pub linear_in: Linear<f64>,
    pub block: TemporalCameraBlock<f64>,
    pub linear_out: Linear<f64>,
}

/// Noised tokens and the conditioning they are denoised under.
#[derive(Debug, Clone, Copy)]
pub struct DenoiseInput<'a> {
    /// `N·hw × c`
    pub z_t: &'a DMatrix<f64>,
    pub alpha: f64,
    pub sigma: f64,
    pub scales: Option<GuidanceScales<f64>>,
    /// `N·hw × 6`
    pub plucker: &'a DMatrix<f64>,
    pub masks: &'a CameraBlockMasks,
}

impl DenoiseInput<'_> {
    fn features(&self) -> DMatrix<f64> {
        let (n, c) = self.z_t.shape();
        let s = self.scales.unwrap_or(GuidanceScales {
            s_img_txt: 0.0,
            s_camera: 0.0,
        });
        let extra = [self.alpha, self.sigma, s.s_img_txt, s.s_camera];
        DMatrix::from_fn(n, c + COND_INPUTS, |r, j| {
            if j < c {
                self.z_t[(r, j)]
            } else {
                extra[j - c]
            }
        })
    }
}

/// Output-map gain; small so the initial prediction sits near zero.
const OUT_GAIN: f64 = 0.1;

impl ToyDenoiser {
    pub fn init(variant: AttentionVariant, config: ModelConfig, seed: u64) -> Result<Self> {
        if config.latent_channels == 0 || config.channels == 0 || config.n_heads == 0 {
            return Err(Error::InvalidArgument(
                "model sizes must be positive".into(),
            ));
        }
        if !config.channels.is_multiple_of(config.n_heads) {
            return Err(Error::InvalidArgument(format!(
                "{} channels do not split into {} heads",
                config.channels, config.n_heads
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            variant,
            config,
            linear_in: Linear::init(
                config.latent_channels + COND_INPUTS,
                config.channels,
                1.0,
                &mut rng,
            ),
            block: TemporalCameraBlock::init(
                config.channels,
                config.n_heads,
                config.n_registers,
                &mut rng,
            ),
            linear_out: Linear::init(config.channels, config.latent_channels, OUT_GAIN, &mut rng),
        })
    }

    pub fn masks(
        &self,
        frames: &[CameraFrame<f64>],
        h: usize,
        w: usize,
    ) -> Result<CameraBlockMasks> {
        self.variant.masks(frames, h, w, self.config.n_registers)
    }

    /// Every trainable matrix, in a fixed order shared with
    /// [`ToyDenoiser::params_mut`] and the gradient output.
    pub fn params(&self) -> Vec<&DMatrix<f64>> {
        let b = &self.block;
        let mut out = vec![&self.linear_in.weight, &self.linear_in.bias];
        out.extend([&b.plucker_proj.weight, &b.plucker_proj.bias]);
        for n in [&b.norm_x, &b.norm_p] {
            out.extend([&n.gamma, &n.beta]);
        }
        out.extend([&b.inject.weight, &b.inject.bias]);
        out.extend([&b.norm_epi.gamma, &b.norm_epi.beta]);
        push_attn(&mut out, &b.epi_attn);
        out.extend([&b.registers.keys, &b.registers.values]);
        for (n, a) in [(&b.norm_sa1, &b.sa1), (&b.norm_sa2, &b.sa2)] {
            out.extend([&n.gamma, &n.beta]);
            push_attn(&mut out, a);
        }
        out.extend([&b.norm_ff.gamma, &b.norm_ff.beta]);
        out.extend([
            &b.ffn.up.weight,
            &b.ffn.up.bias,
            &b.ffn.down.weight,
            &b.ffn.down.bias,
        ]);
        out.extend([&self.linear_out.weight, &self.linear_out.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let b = &mut self.block;
        let mut out = vec![&mut self.linear_in.weight, &mut self.linear_in.bias];
        out.extend([&mut b.plucker_proj.weight, &mut b.plucker_proj.bias]);
        out.extend([
            &mut b.norm_x.gamma,
            &mut b.norm_x.beta,
            &mut b.norm_p.gamma,
            &mut b.norm_p.beta,
        ]);
        out.extend([&mut b.inject.weight, &mut b.inject.bias]);
        out.extend([&mut b.norm_epi.gamma, &mut b.norm_epi.beta]);
        push_attn_mut(&mut out, &mut b.epi_attn);
        out.extend([&mut b.registers.keys, &mut b.registers.values]);
        out.extend([&mut b.norm_sa1.gamma, &mut b.norm_sa1.beta]);
        push_attn_mut(&mut out, &mut b.sa1);
        out.extend([&mut b.norm_sa2.gamma, &mut b.norm_sa2.beta]);
        push_attn_mut(&mut out, &mut b.sa2);
        out.extend([&mut b.norm_ff.gamma, &mut b.norm_ff.beta]);
        out.extend([
            &mut b.ffn.up.weight,
            &mut b.ffn.up.bias,
            &mut b.ffn.down.weight,
            &mut b.ffn.down.bias,
        ]);
        out.extend([&mut self.linear_out.weight, &mut self.linear_out.bias]);
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    /// Plain forward pass through the generic layers.
    pub fn predict(&self, input: &DenoiseInput<'_>) -> Result<DMatrix<f64>> {
        let x = self.linear_in.forward(&input.features());
        let x = self.block.forward(&x, input.plucker, input.masks)?;
        Ok(self.linear_out.forward(&x))
    }

    /// Records the forward pass on `tape`; returns the prediction and the
    /// parameter leaves in [`ToyDenoiser::params`] order.
    pub fn predict_on_tape(
        &self,
        tape: &mut GradTape,
        input: &DenoiseInput<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let leaves = self
            .params()
            .into_iter()
            .map(|m| tape.leaf(m.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut p = leaves.iter().copied();
        let mut next = || p.next().expect("parameter order");
        let masks = input.masks;
        let eps = self.block.norm_x.eps;

        let feats = tape.leaf(input.features())?;
        let rays = tape.leaf(input.plucker.clone())?;
        let lin_in = (next(), next());
        let x = linear(tape, feats, lin_in)?;

        let proj = (next(), next());
        let norm_x = (next(), next());
        let norm_p = (next(), next());
        let inject = (next(), next());
        let pr = linear(tape, rays, proj)?;
        let xn = tape.layer_norm(x, norm_x.0, norm_x.1, eps)?;
        let pn = tape.layer_norm(pr, norm_p.0, norm_p.1, eps)?;
        let sum = tape.add(xn, pn)?;
        let inj = linear(tape, sum, inject)?;
        let mut x = tape.add(x, inj)?;

        let norm_epi = (next(), next());
        let epi = AttnVars::take(&mut next, self.block.epi_attn.n_heads);
        let regs = (next(), next());
        let xn = tape.layer_norm(x, norm_epi.0, norm_epi.1, eps)?;
        let y = epi.forward_frames(tape, xn, &masks.cross_frame, Some(regs))?;
        x = tape.add(x, y)?;

        for n_heads in [self.block.sa1.n_heads, self.block.sa2.n_heads] {
            let norm = (next(), next());
            let attn = AttnVars::take(&mut next, n_heads);
            let xn = tape.layer_norm(x, norm.0, norm.1, eps)?;
            let y = attn.forward_same_location(tape, xn, masks.n_frames())?;
            x = tape.add(x, y)?;
        }

        let norm_ff = (next(), next());
        let up = (next(), next());
        let down = (next(), next());
        let xn = tape.layer_norm(x, norm_ff.0, norm_ff.1, eps)?;
        let hdn = linear(tape, xn, up)?;
        let hdn = tape.silu(hdn)?;
        let y = linear(tape, hdn, down)?;
        x = tape.add(x, y)?;

        let lin_out = (next(), next());
        let out = linear(tape, x, lin_out)?;
        Ok((out, leaves))
    }

    /// Mean squared error against `target` and its gradient for every
    /// parameter, in [`ToyDenoiser::params`] order.
    pub fn loss_and_grad(
        &self,
        input: &DenoiseInput<'_>,
        target: &DMatrix<f64>,
    ) -> Result<(f64, Vec<DMatrix<f64>>)> {
        let mut tape = GradTape::new();
        let (pred, leaves) = self.predict_on_tape(&mut tape, input)?;
        let loss = tape.mse(pred, target)?;
        let grads: Gradients = tape.backward(loss)?;
        Ok((
            tape.value(loss)[(0, 0)],
            leaves.iter().map(|&v| grads.wrt(v)).collect(),
        ))
    }

    /// `θ ← θ − lr · g`
    pub fn apply_gradients(&mut self, grads: &[DMatrix<f64>], lr: f64) -> Result<()> {
        let params = self.params_mut();
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.into_iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Shape("gradient shape differs from parameter".into()));
            }
            *p -= g * lr;
        }
        Ok(())
    }
}

fn push_attn<'a>(out: &mut Vec<&'a DMatrix<f64>>, a: &'a AttentionParams<f64>) {
    for l in [&a.q, &a.k, &a.v, &a.o] {
        out.extend([&l.weight, &l.bias]);
    }
}

fn push_attn_mut<'a>(out: &mut Vec<&'a mut DMatrix<f64>>, a: &'a mut AttentionParams<f64>) {
    for l in [&mut a.q, &mut a.k, &mut a.v, &mut a.o] {
        out.extend([&mut l.weight, &mut l.bias]);
    }
}

fn linear(tape: &mut GradTape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

struct AttnVars {
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    n_heads: usize,
}

impl AttnVars {
    fn take(next: &mut impl FnMut() -> Var, n_heads: usize) -> Self {
        Self {
            q: (next(), next()),
            k: (next(), next()),
            v: (next(), next()),
            o: (next(), next()),
            n_heads,
        }
    }

    fn forward_frames(
        &self,
        tape: &mut GradTape,
        x: Var,
        masks: &[EpipolarMask],
        regs: Option<(Var, Var)>,
    ) -> Result<Var> {
        let n = masks.len();
        let hw = tape.value(x).nrows() / n;
        let q = linear(tape, x, self.q)?;
        let mut k = linear(tape, x, self.k)?;
        let mut v = linear(tape, x, self.v)?;
        if let Some((rk, rv)) = regs {
            if tape.value(rk).nrows() > 0 {
                k = tape.vstack(&[k, rk])?;
                v = tape.vstack(&[v, rv])?;
            }
        }
        let hd = tape.value(q).ncols() / self.n_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut k_heads = Vec::with_capacity(self.n_heads);
        let mut v_heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            k_heads.push(tape.cols(k, h * hd, hd)?);
            v_heads.push(tape.cols(v, h * hd, hd)?);
        }
        let mut frames = Vec::with_capacity(n);
        for (i, mask) in masks.iter().enumerate() {
            let bits: &BoolMatrix = &mask.bits;
            let q_i = tape.rows(q, i * hw, hw)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for h in 0..self.n_heads {
                let qh = tape.cols(q_i, h * hd, hd)?;
                let logits = tape.matmul_t(qh, k_heads[h])?;
                let logits = tape.scale(logits, scale)?;
                let wts = tape.masked_softmax(logits, bits)?;
                heads.push(tape.matmul(wts, v_heads[h])?);
            }
            frames.push(if heads.len() == 1 {
                heads[0]
            } else {
                tape.hstack(&heads)?
            });
        }
        let all = tape.vstack(&frames)?;
        linear(tape, all, self.o)
    }

    fn forward_same_location(&self, tape: &mut GradTape, x: Var, n_frames: usize) -> Result<Var> {
        let q = linear(tape, x, self.q)?;
        let k = linear(tape, x, self.k)?;
        let v = linear(tape, x, self.v)?;
        let heads = tape.same_location_attention(q, k, v, n_frames, self.n_heads)?;
        linear(tape, heads, self.o)
    }
}

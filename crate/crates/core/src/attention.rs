//! Masked attention kernels and the transformer blocks that host them.
//!
//! Masked positions are excluded from the softmax entirely, which is the
//! exact limit of adding `−∞` to their logits: their weights are exactly zero
//! and a fully masked row is a contract error.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::epipolar::EpipolarMask;
use crate::error::{Error, Result};
use crate::mask::BoolMatrix;
use crate::scalar::Real;

/// Query rows of one frame against keys and values of all frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInput<T: Real> {
    /// `hw × c`
    pub q: DMatrix<T>,
    /// `N·hw × c`
    pub k: DMatrix<T>,
    /// `N·hw × c`
    pub v: DMatrix<T>,
    /// Channel count used in the `√d` normalizer.
    pub head_dim: usize,
}

impl<T: Real> AttentionInput<T> {
    pub fn new(q: DMatrix<T>, k: DMatrix<T>, v: DMatrix<T>) -> Self {
        let head_dim = q.ncols();
        Self { q, k, v, head_dim }
    }
}

/// Learnable key/value slots appended after the frame tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RegisterTokens<T: Real> {
    pub keys: DMatrix<T>,
    pub values: DMatrix<T>,
}

impl<T: Real> RegisterTokens<T> {
    pub fn empty(channels: usize) -> Self {
        Self {
            keys: DMatrix::zeros(0, channels),
            values: DMatrix::zeros(0, channels),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T: Real> {
    pub out: DMatrix<T>,
    /// Row-stochastic attention weights, kept only on request.
    pub weights: Option<DMatrix<T>>,
}

/// Row-wise softmax over the attendable entries of `logits`; masked entries
/// become exactly zero.
pub fn masked_softmax<T: Real>(logits: &DMatrix<T>, mask: &BoolMatrix) -> Result<DMatrix<T>> {
    if logits.nrows() != mask.rows() || logits.ncols() != mask.cols() {
        return Err(Error::Shape(format!(
            "logits are {}x{} but mask is {}x{}",
            logits.nrows(),
            logits.ncols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let mut out = DMatrix::zeros(logits.nrows(), logits.ncols());
    for r in 0..logits.nrows() {
        let row_mask = mask.row(r);
        let mut max: Option<T> = None;
        for (c, &keep) in row_mask.iter().enumerate() {
            if keep {
                let l = logits[(r, c)];
                max = Some(match max {
                    Some(m) if m >= l => m,
                    _ => l,
                });
            }
        }
        let max = max.ok_or(Error::EmptyMaskRow { row: r })?;
        let mut sum = T::zero();
        for (c, &keep) in row_mask.iter().enumerate() {
            if keep {
                let e = (logits[(r, c)] - max).exp();
                out[(r, c)] = e;
                sum += e;
            }
        }
        for (c, &keep) in row_mask.iter().enumerate() {
            if keep {
                out[(r, c)] /= sum;
            }
        }
    }
    Ok(out)
}

/// `softmax(q kᵀ / √head_dim, mask) · v` against a plain boolean mask.
pub fn attend<T: Real>(
    q: &DMatrix<T>,
    keys: &DMatrix<T>,
    values: &DMatrix<T>,
    head_dim: usize,
    mask: &BoolMatrix,
    keep_weights: bool,
) -> Result<AttentionOutput<T>> {
    if q.ncols() != keys.ncols() || keys.nrows() != values.nrows() {
        return Err(Error::Shape(format!(
            "q is {}x{}, keys {}x{}, values {}x{}",
            q.nrows(),
            q.ncols(),
            keys.nrows(),
            keys.ncols(),
            values.nrows(),
            values.ncols()
        )));
    }
    let scale = T::one() / T::lit(head_dim as f64).sqrt();
    let logits = (q * keys.transpose()) * scale;
    let weights = masked_softmax(&logits, mask)?;
    let out = &weights * values;
    Ok(AttentionOutput {
        out,
        weights: keep_weights.then_some(weights),
    })
}

fn with_registers<T: Real>(frames: &DMatrix<T>, regs: &DMatrix<T>) -> Result<DMatrix<T>> {
    if regs.nrows() > 0 && regs.ncols() != frames.ncols() {
        return Err(Error::Shape(format!(
            "register width {} does not match token width {}",
            regs.ncols(),
            frames.ncols()
        )));
    }
    let mut out = DMatrix::zeros(frames.nrows() + regs.nrows(), frames.ncols());
    out.rows_mut(0, frames.nrows()).copy_from(frames);
    if regs.nrows() > 0 {
        out.rows_mut(frames.nrows(), regs.nrows()).copy_from(regs);
    }
    Ok(out)
}

/// Epipolar attention: frame tokens plus registers, restricted by `mask`.
pub fn masked_attention<T: Real>(
    input: &AttentionInput<T>,
    regs: &RegisterTokens<T>,
    mask: &EpipolarMask,
    keep_weights: bool,
) -> Result<AttentionOutput<T>> {
    if mask.rows() != input.q.nrows() || mask.cols() != input.k.nrows() + regs.len() {
        return Err(Error::Shape(format!(
            "mask is {}x{} for {} queries and {} keys",
            mask.rows(),
            mask.cols(),
            input.q.nrows(),
            input.k.nrows() + regs.len()
        )));
    }
    let keys = with_registers(&input.k, &regs.keys)?;
    let values = with_registers(&input.v, &regs.values)?;
    attend(
        &input.q,
        &keys,
        &values,
        input.head_dim,
        &mask.bits,
        keep_weights,
    )
}

fn grid_counts<T: Real>(input: &AttentionInput<T>) -> Result<(usize, usize)> {
    let hw = input.q.nrows();
    if hw == 0 || !input.k.nrows().is_multiple_of(hw) {
        return Err(Error::Shape(format!(
            "{} key rows is not a multiple of {} query rows",
            input.k.nrows(),
            hw
        )));
    }
    Ok((hw, input.k.nrows() / hw))
}

/// Same-location attention: query pixel `p` sees pixel `p` of every frame.
pub fn temporal_attention<T: Real>(
    input: &AttentionInput<T>,
    regs: &RegisterTokens<T>,
    keep_weights: bool,
) -> Result<AttentionOutput<T>> {
    let (hw, n) = grid_counts(input)?;
    let mask = EpipolarMask::same_location(hw, 1, n, regs.len(), 0);
    masked_attention(input, regs, &mask, keep_weights)
}

/// 3D full attention over every token of every frame.
pub fn full_attention<T: Real>(
    input: &AttentionInput<T>,
    regs: &RegisterTokens<T>,
    keep_weights: bool,
) -> Result<AttentionOutput<T>> {
    let (hw, n) = grid_counts(input)?;
    let mask = EpipolarMask::full(hw, 1, n, regs.len(), 0);
    masked_attention(input, regs, &mask, keep_weights)
}

/// Multi-head attention where token `i·hw + p` attends to tokens
/// `j·hw + p` of every frame `j`, evaluated one pixel location at a time.
/// Equals [`AttentionParams::forward_frames`] under same-location masks
/// without registers. Returns the head outputs and, per location and head,
/// the `n_frames × n_frames` weights.
pub fn same_location_heads<T: Real>(
    q: &DMatrix<T>,
    k: &DMatrix<T>,
    v: &DMatrix<T>,
    n_frames: usize,
    n_heads: usize,
) -> Result<(DMatrix<T>, Vec<DMatrix<T>>)> {
    let tokens = q.nrows();
    if n_frames == 0
        || !tokens.is_multiple_of(n_frames)
        || k.shape() != q.shape()
        || v.shape() != q.shape()
    {
        return Err(Error::Shape(format!(
            "q {}x{}, k {}x{}, v {}x{} over {n_frames} frames",
            q.nrows(),
            q.ncols(),
            k.nrows(),
            k.ncols(),
            v.nrows(),
            v.ncols()
        )));
    }
    if n_heads == 0 || !q.ncols().is_multiple_of(n_heads) {
        return Err(Error::Shape(format!(
            "{} channels over {n_heads} heads",
            q.ncols()
        )));
    }
    let hw = tokens / n_frames;
    let hd = q.ncols() / n_heads;
    let all = BoolMatrix::filled(n_frames, n_frames, true);
    let mut out = DMatrix::zeros(tokens, q.ncols());
    let mut weights = Vec::with_capacity(hw * n_heads);
    let gather = |m: &DMatrix<T>, p: usize, c: usize| {
        DMatrix::from_fn(n_frames, hd, |i, j| m[(i * hw + p, c + j)])
    };
    for p in 0..hw {
        for h in 0..n_heads {
            let c = h * hd;
            let head = attend(
                &gather(q, p, c),
                &gather(k, p, c),
                &gather(v, p, c),
                hd,
                &all,
                true,
            )?;
            for i in 0..n_frames {
                for j in 0..hd {
                    out[(i * hw + p, c + j)] = head.out[(i, j)];
                }
            }
            weights.push(head.weights.expect("weights were requested"));
        }
    }
    Ok((out, weights))
}

fn random_matrix<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

/// Affine map `y = x W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    /// `in × out`
    pub weight: DMatrix<T>,
    /// `1 × out`
    pub bias: DMatrix<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: DMatrix::zeros(inputs, outputs),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    /// Gaussian weights with standard deviation `gain / √inputs`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: random_matrix(inputs, outputs, gain / (inputs.max(1) as f64).sqrt(), rng),
            bias: DMatrix::zeros(1, outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }
}

/// Layer normalization over the channel axis with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Real> {
    pub gamma: DMatrix<T>,
    pub beta: DMatrix<T>,
    pub eps: T,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> LayerNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: DMatrix::from_element(1, channels, T::one()),
            beta: DMatrix::zeros(1, channels),
            eps: T::lit(LAYER_NORM_EPS),
        }
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let c = T::lit(x.ncols() as f64);
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / c;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .fold(T::zero(), |a, b| a + b)
                / c;
            let inv = T::one() / (var + self.eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gamma[(0, j)] + self.beta[(0, j)];
            }
        }
        y
    }
}

/// `x ↦ x·σ(x)`
pub fn silu<T: Real>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

/// Position-wise two-layer MLP with SiLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T: Real> {
    pub up: Linear<T>,
    pub down: Linear<T>,
}

impl<T: Real> FeedForward<T> {
    pub fn init<R: Rng + ?Sized>(channels: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::init(channels, hidden, 1.0, rng),
            down: Linear::init(hidden, channels, 1.0, rng),
        }
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        self.down.forward(&self.up.forward(x).map(silu))
    }
}

/// Projections of one attention layer; heads split the channel axis evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T: Real> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub n_heads: usize,
}

impl<T: Real> AttentionParams<T> {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        context: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            n_heads >= 1 && channels.is_multiple_of(n_heads),
            "channels must split evenly across heads"
        );
        Self {
            q: Linear::init(channels, channels, 1.0, rng),
            k: Linear::init(context, channels, 1.0, rng),
            v: Linear::init(context, channels, 1.0, rng),
            o: Linear::init(channels, channels, 1.0, rng),
            n_heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.q.outputs() / self.n_heads
    }

    /// Multi-head attention of `queries` over `context` with one boolean
    /// mask shared by all heads; registers are already projected.
    pub fn forward(
        &self,
        queries: &DMatrix<T>,
        context: &DMatrix<T>,
        mask: &BoolMatrix,
        regs: &RegisterTokens<T>,
    ) -> Result<DMatrix<T>> {
        let q = self.q.forward(queries);
        let k = with_registers(&self.k.forward(context), &regs.keys)?;
        let v = with_registers(&self.v.forward(context), &regs.values)?;
        let heads = self.multi_head(&q, &k, &v, mask)?;
        Ok(self.o.forward(&heads))
    }

    fn multi_head(
        &self,
        q: &DMatrix<T>,
        k: &DMatrix<T>,
        v: &DMatrix<T>,
        mask: &BoolMatrix,
    ) -> Result<DMatrix<T>> {
        let hd = self.head_dim();
        let mut out = DMatrix::zeros(q.nrows(), q.ncols());
        for h in 0..self.n_heads {
            let cols = h * hd;
            let head = attend(
                &q.columns(cols, hd).into_owned(),
                &k.columns(cols, hd).into_owned(),
                &v.columns(cols, hd).into_owned(),
                hd,
                mask,
                false,
            )?;
            out.columns_mut(cols, hd).copy_from(&head.out);
        }
        Ok(out)
    }

    /// Attention where each frame's queries see all frames through that
    /// frame's mask; `x` stacks `N` frames of `hw` tokens.
    pub fn forward_frames(
        &self,
        x: &DMatrix<T>,
        masks: &[EpipolarMask],
        regs: &RegisterTokens<T>,
        mut weights_out: Option<&mut Vec<DMatrix<T>>>,
    ) -> Result<DMatrix<T>> {
        let n = masks.len();
        if n == 0 || !x.nrows().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "{} tokens cannot split into {n} frames",
                x.nrows()
            )));
        }
        let hw = x.nrows() / n;
        let q = self.q.forward(x);
        let k = with_registers(&self.k.forward(x), &regs.keys)?;
        let v = with_registers(&self.v.forward(x), &regs.values)?;
        let hd = self.head_dim();
        let mut heads = DMatrix::zeros(x.nrows(), q.ncols());
        for (i, mask) in masks.iter().enumerate() {
            if mask.rows() != hw || mask.cols() != k.nrows() {
                return Err(Error::Shape(format!(
                    "mask {i} is {}x{}, expected {hw}x{}",
                    mask.rows(),
                    mask.cols(),
                    k.nrows()
                )));
            }
            let q_i = q.rows(i * hw, hw).into_owned();
            for h in 0..self.n_heads {
                let cols = h * hd;
                let head = attend(
                    &q_i.columns(cols, hd).into_owned(),
                    &k.columns(cols, hd).into_owned(),
                    &v.columns(cols, hd).into_owned(),
                    hd,
                    &mask.bits,
                    weights_out.is_some() && h == 0,
                )?;
                heads
                    .view_mut((i * hw, cols), (hw, hd))
                    .copy_from(&head.out);
                if let (Some(ws), Some(w)) = (weights_out.as_deref_mut(), head.weights) {
                    ws.push(w);
                }
            }
        }
        Ok(self.o.forward(&heads))
    }

    /// Self-attention across frames at each pixel location; `x` stacks
    /// `n_frames` frames of equal size.
    pub fn forward_same_location(&self, x: &DMatrix<T>, n_frames: usize) -> Result<DMatrix<T>> {
        let (heads, _) = same_location_heads(
            &self.q.forward(x),
            &self.k.forward(x),
            &self.v.forward(x),
            n_frames,
            self.n_heads,
        )?;
        Ok(self.o.forward(&heads))
    }
}

/// Spatial transformer block: self-attention, cross-attention to context
/// tokens and a feed-forward layer, each as a pre-normalized residual branch.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialBlock<T: Real> {
    pub norm_self: LayerNorm<T>,
    pub self_attn: AttentionParams<T>,
    pub norm_cross: LayerNorm<T>,
    pub cross_attn: AttentionParams<T>,
    pub norm_ff: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

impl<T: Real> SpatialBlock<T> {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        context: usize,
        n_heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_self: LayerNorm::new(channels),
            self_attn: AttentionParams::init(channels, channels, n_heads, rng),
            norm_cross: LayerNorm::new(channels),
            cross_attn: AttentionParams::init(channels, context, n_heads, rng),
            norm_ff: LayerNorm::new(channels),
            ffn: FeedForward::init(channels, 4 * channels, rng),
        }
    }

    /// Zeroes the output projection of every branch, turning the block into
    /// the identity map.
    pub fn zero_branches(&mut self) {
        for lin in [
            &mut self.self_attn.o,
            &mut self.cross_attn.o,
            &mut self.ffn.down,
        ] {
            lin.weight.fill(T::zero());
            lin.bias.fill(T::zero());
        }
    }

    /// `x`: `hw × c` tokens of one frame, `context`: `m × c_ctx` tokens.
    pub fn forward(&self, x: &DMatrix<T>, context: &DMatrix<T>) -> Result<DMatrix<T>> {
        let empty = RegisterTokens::empty(x.ncols());
        let mut x = x.clone();
        let xn = self.norm_self.forward(&x);
        x += self.self_attn.forward(
            &xn,
            &xn,
            &BoolMatrix::filled(x.nrows(), x.nrows(), true),
            &empty,
        )?;
        let xn = self.norm_cross.forward(&x);
        x += self.cross_attn.forward(
            &xn,
            context,
            &BoolMatrix::filled(x.nrows(), context.nrows(), true),
            &empty,
        )?;
        x += self.ffn.forward(&self.norm_ff.forward(&x));
        Ok(x)
    }
}

/// Cross-frame masks consumed by [`TemporalCameraBlock`], one per query
/// frame. The temporal self-attention layers need no masks.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraBlockMasks {
    pub cross_frame: Vec<EpipolarMask>,
}

impl CameraBlockMasks {
    pub fn new(cross_frame: Vec<EpipolarMask>) -> Result<Self> {
        let first = cross_frame
            .first()
            .ok_or_else(|| Error::InvalidArgument("no cross-frame masks".into()))?;
        let (h, w, n, r) = (first.h, first.w, first.n_frames, first.n_registers);
        if cross_frame.len() != n {
            return Err(Error::Shape(format!(
                "{} masks for {n} frames",
                cross_frame.len()
            )));
        }
        for (i, m) in cross_frame.iter().enumerate() {
            if (m.h, m.w, m.n_frames, m.n_registers) != (h, w, n, r) || m.query_frame != i {
                return Err(Error::Shape(format!(
                    "mask {i} does not match the mask set layout"
                )));
            }
        }
        Ok(Self { cross_frame })
    }

    pub fn n_frames(&self) -> usize {
        self.cross_frame.len()
    }

    pub fn hw(&self) -> usize {
        self.cross_frame[0].hw()
    }

    pub fn n_registers(&self) -> usize {
        self.cross_frame[0].n_registers
    }
}

/// Temporal block with camera control: Plücker injection, epipolar
/// attention with registers, two temporal self-attentions and a
/// feed-forward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalCameraBlock<T: Real> {
    pub plucker_proj: Linear<T>,
    pub norm_x: LayerNorm<T>,
    pub norm_p: LayerNorm<T>,
    pub inject: Linear<T>,
    pub norm_epi: LayerNorm<T>,
    pub epi_attn: AttentionParams<T>,
    pub registers: RegisterTokens<T>,
    pub norm_sa1: LayerNorm<T>,
    pub sa1: AttentionParams<T>,
    pub norm_sa2: LayerNorm<T>,
    pub sa2: AttentionParams<T>,
    pub norm_ff: LayerNorm<T>,
    pub ffn: FeedForward<T>,
}

/// Intermediate values of a block forward pass, for tests and debugging.
#[derive(Debug, Clone, Default)]
pub struct BlockTrace<T: Real> {
    /// Epipolar attention weights (first head) of each query frame.
    pub epipolar_weights: Vec<DMatrix<T>>,
}

pub const PLUCKER_CHANNELS: usize = 6;

impl<T: Real> TemporalCameraBlock<T> {
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        n_heads: usize,
        n_registers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            plucker_proj: Linear::init(PLUCKER_CHANNELS, channels, 1.0, rng),
            norm_x: LayerNorm::new(channels),
            norm_p: LayerNorm::new(channels),
            inject: Linear::init(channels, channels, 1.0, rng),
            norm_epi: LayerNorm::new(channels),
            epi_attn: AttentionParams::init(channels, channels, n_heads, rng),
            registers: RegisterTokens {
                keys: random_matrix(n_registers, channels, 1.0, rng),
                values: random_matrix(n_registers, channels, 1.0, rng),
            },
            norm_sa1: LayerNorm::new(channels),
            sa1: AttentionParams::init(channels, channels, n_heads, rng),
            norm_sa2: LayerNorm::new(channels),
            sa2: AttentionParams::init(channels, channels, n_heads, rng),
            norm_ff: LayerNorm::new(channels),
            ffn: FeedForward::init(channels, 4 * channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.inject.outputs()
    }

    pub fn zero_branches(&mut self) {
        for lin in [
            &mut self.inject,
            &mut self.epi_attn.o,
            &mut self.sa1.o,
            &mut self.sa2.o,
            &mut self.ffn.down,
        ] {
            lin.weight.fill(T::zero());
            lin.bias.fill(T::zero());
        }
    }

    /// `x`: `N·hw × c` tokens, `plucker`: `N·hw × 6` ray embeddings.
    pub fn forward(
        &self,
        x: &DMatrix<T>,
        plucker: &DMatrix<T>,
        masks: &CameraBlockMasks,
    ) -> Result<DMatrix<T>> {
        self.forward_traced(x, plucker, masks, None)
    }

    pub fn forward_traced(
        &self,
        x: &DMatrix<T>,
        plucker: &DMatrix<T>,
        masks: &CameraBlockMasks,
        trace: Option<&mut BlockTrace<T>>,
    ) -> Result<DMatrix<T>> {
        let tokens = masks.n_frames() * masks.hw();
        if x.nrows() != tokens || plucker.nrows() != tokens || plucker.ncols() != PLUCKER_CHANNELS {
            return Err(Error::Shape(format!(
                "expected {tokens} tokens with 6 ray channels, got x {}x{} and rays {}x{}",
                x.nrows(),
                x.ncols(),
                plucker.nrows(),
                plucker.ncols()
            )));
        }
        if masks.n_registers() != self.registers.len() {
            return Err(Error::Shape(format!(
                "masks reserve {} register columns, block has {} registers",
                masks.n_registers(),
                self.registers.len()
            )));
        }
        let mut x = x.clone();

        let p = self.plucker_proj.forward(plucker);
        x += self
            .inject
            .forward(&(self.norm_x.forward(&x) + self.norm_p.forward(&p)));

        let weights = trace.map(|t| &mut t.epipolar_weights);
        x += self.epi_attn.forward_frames(
            &self.norm_epi.forward(&x),
            &masks.cross_frame,
            &self.registers,
            weights,
        )?;

        let n = masks.n_frames();
        x += self
            .sa1
            .forward_same_location(&self.norm_sa1.forward(&x), n)?;
        x += self
            .sa2
            .forward_same_location(&self.norm_sa2.forward(&x), n)?;

        x += self.ffn.forward(&self.norm_ff.forward(&x));
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_scalar_example() {
        // weights e¹/(e¹+e²), e²/(e¹+e²) on values 10, 20
        let input = AttentionInput::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[10.0, 20.0]),
        );
        let mask = EpipolarMask::full(1, 1, 2, 0, 0);
        let out = masked_attention(&input, &RegisterTokens::empty(1), &mask, false).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        let expected = (10.0 * e1 + 20.0 * e2) / (e1 + e2);
        assert_relative_eq!(out.out[(0, 0)], expected, epsilon = 1e-12);
        assert_relative_eq!(out.out[(0, 0)], 17.3105857863, epsilon = 1e-9);
    }

    #[test]
    fn one_hot_mask_selects_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = AttentionInput::<f64>::new(
            random_matrix(4, 3, 1.0, &mut rng),
            random_matrix(8, 3, 1.0, &mut rng),
            random_matrix(8, 3, 1.0, &mut rng),
        );
        let mut mask = EpipolarMask::same_location(4, 1, 2, 0, 0);
        mask.bits = BoolMatrix::from_fn(4, 8, |r, c| c == (r * 3 + 1) % 8);
        let out = masked_attention(&input, &RegisterTokens::empty(3), &mask, false).unwrap();
        for r in 0..4 {
            let t = (r * 3 + 1) % 8;
            assert_eq!(out.out.row(r), input.v.row(t));
        }
    }

    #[test]
    fn temporal_single_frame_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = random_matrix::<f64, _>(4, 2, 1.0, &mut rng);
        let input = AttentionInput::new(
            random_matrix(4, 2, 1.0, &mut rng),
            random_matrix(4, 2, 1.0, &mut rng),
            v.clone(),
        );
        let out = temporal_attention(&input, &RegisterTokens::empty(2), false).unwrap();
        assert_eq!(out.out, v);
    }

    #[test]
    fn identical_keys_give_uniform_weights() {
        let input = AttentionInput::new(
            DMatrix::from_element(4, 2, 0.3),
            DMatrix::from_element(8, 2, 0.7),
            DMatrix::from_fn(8, 2, |r, c| (r + c) as f64),
        );
        let regs = RegisterTokens {
            keys: DMatrix::from_element(2, 2, 0.7),
            values: DMatrix::zeros(2, 2),
        };
        let out = full_attention(&input, &regs, true).unwrap();
        for w in out.weights.unwrap().iter() {
            assert_relative_eq!(*w, 0.1, epsilon = 1e-15);
        }
    }

    #[test]
    fn empty_row_is_rejected() {
        let input = AttentionInput::new(
            DMatrix::<f64>::zeros(1, 1),
            DMatrix::zeros(2, 1),
            DMatrix::zeros(2, 1),
        );
        let mut mask = EpipolarMask::full(1, 1, 2, 0, 0);
        mask.bits = BoolMatrix::filled(1, 2, false);
        assert!(matches!(
            masked_attention(&input, &RegisterTokens::empty(1), &mask, false),
            Err(Error::EmptyMaskRow { row: 0 })
        ));
    }

    #[test]
    fn shape_errors() {
        let input = AttentionInput::new(
            DMatrix::<f64>::zeros(2, 1),
            DMatrix::zeros(3, 1),
            DMatrix::zeros(3, 1),
        );
        assert!(matches!(
            temporal_attention(&input, &RegisterTokens::empty(1), false),
            Err(Error::Shape(_))
        ));
        let mask = EpipolarMask::full(2, 1, 2, 0, 0);
        assert!(masked_attention(&input, &RegisterTokens::empty(1), &mask, false).is_err());
    }

    #[test]
    fn zeroed_spatial_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut block = SpatialBlock::<f64>::init(4, 3, 2, &mut rng);
        let x = random_matrix(6, 4, 1.0, &mut rng);
        let ctx = random_matrix(5, 3, 1.0, &mut rng);
        let y = block.forward(&x, &ctx).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!((y.clone() - &x).norm() > 1e-3);
        block.zero_branches();
        assert_eq!(block.forward(&x, &ctx).unwrap(), x);
    }

    #[test]
    fn spatial_block_single_token_by_hand() {
        // One token, one context token, c = 1: every softmax is over a single
        // entry, so each attention branch returns its value projection.
        let lin = |w: f64, b: f64| Linear {
            weight: DMatrix::from_element(1, 1, w),
            bias: DMatrix::from_element(1, 1, b),
        };
        let attn = |wv: f64, bv: f64, wo: f64, bo: f64| AttentionParams {
            q: lin(1.0, 0.0),
            k: lin(1.0, 0.0),
            v: lin(wv, bv),
            o: lin(wo, bo),
            n_heads: 1,
        };
        let norm = |g: f64, b: f64| LayerNorm {
            gamma: DMatrix::from_element(1, 1, g),
            beta: DMatrix::from_element(1, 1, b),
            eps: LAYER_NORM_EPS,
        };
        let block = SpatialBlock {
            norm_self: norm(2.0, 0.5),
            self_attn: attn(1.5, 0.1, 2.0, -0.2),
            norm_cross: norm(1.0, -1.0),
            cross_attn: attn(0.5, 0.0, 1.0, 0.3),
            norm_ff: norm(1.0, 0.25),
            ffn: FeedForward {
                up: lin(2.0, 0.0),
                down: lin(0.5, 0.1),
            },
        };
        let x0 = 0.7;
        let ctx = 3.0;
        // single-channel layer norm outputs beta
        let x1 = x0 + (1.5 * 0.5 + 0.1) * 2.0 - 0.2;
        let x2 = x1 + (0.5 * ctx) * 1.0 + 0.3;
        let u = 2.0 * 0.25;
        let x3 = x2 + 0.5 * (u / (1.0 + f64::exp(-u))) + 0.1;
        let y = block
            .forward(
                &DMatrix::from_element(1, 1, x0),
                &DMatrix::from_element(1, 1, ctx),
            )
            .unwrap();
        assert_relative_eq!(y[(0, 0)], x3, epsilon = 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::<f64>::new(5);
        let x = DMatrix::from_fn(3, 5, |r, c| (r * 7 + c * c) as f64);
        let y = ln.forward(&x);
        for row in y.row_iter() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 5.0;
            assert_relative_eq!(var, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn same_location_path_matches_masked_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let attn = AttentionParams::<f64>::init(4, 4, 2, &mut rng);
        let (h, w, n) = (2, 3, 4);
        let x = random_matrix::<f64, _>(n * h * w, 4, 1.0, &mut rng);
        let masks: Vec<_> = (0..n)
            .map(|i| EpipolarMask::same_location(h, w, n, 0, i))
            .collect();
        let dense = attn
            .forward_frames(&x, &masks, &RegisterTokens::empty(4), None)
            .unwrap();
        let fast = attn.forward_same_location(&x, n).unwrap();
        assert_relative_eq!(dense, fast, epsilon = 1e-12);
    }
}

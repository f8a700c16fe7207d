//! Epipolar geometry and the discretized attention masks built from it.
//!
//! Mask layout: one row per query pixel of frame `i` (row-major over the
//! `h`×`w` grid), columns ordered frame `0..N` each row-major, followed by
//! `R` register columns that are always attendable.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{relative_pose, CameraFrame, CameraIntrinsics, CameraPose};
use crate::mask::BoolMatrix;
use crate::scalar::Real;

/// Relative translations shorter than this are treated as pure rotation.
pub const MIN_BASELINE: f64 = 1e-6;
/// Lines with `√(A² + B²)` below this are reported invalid.
pub const MIN_LINE_NORM: f64 = 1e-12;

/// Cross-product matrix `[t]ₓ`, so that `[t]ₓ v = t × v`.
pub fn skew<T: Real>(t: &Vector3<T>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, -t.z, t.y, t.z, z, -t.x, -t.y, t.x, z)
}

/// `E = [T]ₓ R` for a relative pose `i → j`.
pub fn essential_matrix<T: Real>(rel: &CameraPose<T>) -> Matrix3<T> {
    skew(&rel.translation) * rel.rotation
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix<T: Real> {
    pub f: Matrix3<T>,
    pub from_frame: usize,
    pub to_frame: usize,
}

/// `F = K_j⁻ᵀ E K_i⁻¹`; both calibrations must already be at feature resolution.
pub fn fundamental_matrix<T: Real>(
    k_i: &CameraIntrinsics<T>,
    k_j: &CameraIntrinsics<T>,
    rel: &CameraPose<T>,
) -> FundamentalMatrix<T> {
    let e = essential_matrix(rel);
    FundamentalMatrix {
        f: k_j.inverse_matrix().transpose() * e * k_i.inverse_matrix(),
        from_frame: 0,
        to_frame: 0,
    }
}

/// Fundamental matrix from frame `i` to frame `j` with both cameras rescaled to `w`×`h`.
pub fn fundamental_between<T: Real>(
    frames: &[CameraFrame<T>],
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> FundamentalMatrix<T> {
    let fi = frames[i].at_resolution(w as u32, h as u32);
    let fj = frames[j].at_resolution(w as u32, h as u32);
    let rel = relative_pose(&fi, &fj);
    FundamentalMatrix {
        from_frame: i,
        to_frame: j,
        ..fundamental_matrix(&fi.intrinsics, &fj.intrinsics, &rel)
    }
}

/// Line `a·x + b·y + c = 0` with `a² + b² = 1` when valid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine<T> {
    pub a: T,
    pub b: T,
    pub c: T,
    pub valid: bool,
}

/// Epipolar line in frame `j` of pixel `(u, v)` in frame `i`.
pub fn epipolar_line<T: Real>(f: &FundamentalMatrix<T>, u: T, v: T) -> EpipolarLine<T> {
    let l = f.f * Vector3::new(u, v, T::one());
    let norm = (l.x * l.x + l.y * l.y).sqrt();
    if !(norm >= T::lit(MIN_LINE_NORM)) {
        return EpipolarLine {
            a: l.x,
            b: l.y,
            c: l.z,
            valid: false,
        };
    }
    EpipolarLine {
        a: l.x / norm,
        b: l.y / norm,
        c: l.z / norm,
        valid: true,
    }
}

/// Signed distance from `(u, v)` to a normalized line.
///
/// # Panics
///
/// When `line` is not valid.
pub fn point_line_distance<T: Real>(line: &EpipolarLine<T>, u: T, v: T) -> T {
    assert!(line.valid, "distance to an invalid epipolar line");
    line.a * u + line.b * v + line.c
}

/// Attention mask of one query frame at one feature resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpipolarMask {
    pub bits: BoolMatrix,
    pub h: usize,
    pub w: usize,
    pub n_frames: usize,
    pub n_registers: usize,
    pub query_frame: usize,
}

impl EpipolarMask {
    fn with_blocks(
        h: usize,
        w: usize,
        n_frames: usize,
        n_registers: usize,
        query_frame: usize,
        fill: bool,
    ) -> Self {
        let hw = h * w;
        let mut bits = BoolMatrix::filled(hw, n_frames * hw + n_registers, fill);
        for p in 0..hw {
            for r in 0..n_registers {
                bits.set(p, n_frames * hw + r, true);
            }
        }
        Self {
            bits,
            h,
            w,
            n_frames,
            n_registers,
            query_frame,
        }
    }

    /// Every column attendable.
    pub fn full(
        h: usize,
        w: usize,
        n_frames: usize,
        n_registers: usize,
        query_frame: usize,
    ) -> Self {
        Self::with_blocks(h, w, n_frames, n_registers, query_frame, true)
    }

    /// Query pixel `p` sees pixel `p` of every frame plus the registers.
    pub fn same_location(
        h: usize,
        w: usize,
        n_frames: usize,
        n_registers: usize,
        query_frame: usize,
    ) -> Self {
        let mut m = Self::with_blocks(h, w, n_frames, n_registers, query_frame, false);
        let hw = h * w;
        for p in 0..hw {
            for j in 0..n_frames {
                m.bits.set(p, j * hw + p, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.bits.rows()
    }

    pub fn cols(&self) -> usize {
        self.bits.cols()
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn get(&self, query_pixel: usize, column: usize) -> bool {
        self.bits.get(query_pixel, column)
    }

    /// Bits of the row of `query_pixel` restricted to frame `j`.
    pub fn frame_block(&self, query_pixel: usize, j: usize) -> &[bool] {
        let hw = self.hw();
        &self.bits.row(query_pixel)[j * hw..(j + 1) * hw]
    }

    pub fn density(&self) -> f64 {
        self.bits.density()
    }

    /// Registers set on every row and shape consistent with `(h, w, N, R)`.
    pub fn check_invariants(&self) -> Result<()> {
        let hw = self.hw();
        if self.rows() != hw || self.cols() != self.n_frames * hw + self.n_registers {
            return Err(Error::Shape(format!(
                "mask is {}x{}, expected {}x{}",
                self.rows(),
                self.cols(),
                hw,
                self.n_frames * hw + self.n_registers
            )));
        }
        for p in 0..hw {
            let row = self.bits.row(p);
            if !row[self.n_frames * hw..].iter().all(|&b| b) {
                return Err(Error::InvalidArgument(format!(
                    "row {p} has a masked register column"
                )));
            }
            if row.iter().filter(|&&b| b).count() < self.n_registers.max(1) {
                return Err(Error::EmptyMaskRow { row: p });
            }
        }
        Ok(())
    }
}

fn pixel_center<T: Real>(index: usize) -> T {
    T::lit(index as f64 + 0.5)
}

/// Writes the epipolar block of target frame `j` into `mask`.
fn fill_epipolar_block<T: Real>(
    mask: &mut EpipolarMask,
    scaled: &[CameraFrame<T>],
    i: usize,
    j: usize,
    delta: T,
) {
    let (h, w) = (mask.h, mask.w);
    let hw = h * w;
    let rel = relative_pose(&scaled[i], &scaled[j]);
    if rel.translation.norm() < T::lit(MIN_BASELINE) {
        for p in 0..hw {
            mask.bits.row_mut(p)[j * hw..(j + 1) * hw].fill(true);
        }
        return;
    }
    let f = fundamental_matrix(&scaled[i].intrinsics, &scaled[j].intrinsics, &rel);
    for p in 0..hw {
        let line = epipolar_line(&f, pixel_center(p % w), pixel_center(p / w));
        let block = &mut mask.bits.row_mut(p)[j * hw..(j + 1) * hw];
        if !line.valid {
            block.fill(true);
            continue;
        }
        for (q, bit) in block.iter_mut().enumerate() {
            let d = point_line_distance(&line, pixel_center(q % w), pixel_center(q / w));
            *bit = d.abs() < delta;
        }
    }
}

fn validate_mask_args<T: Real>(
    frames: &[CameraFrame<T>],
    query: usize,
    h: usize,
    w: usize,
    delta: T,
) -> Result<()> {
    if query >= frames.len() {
        return Err(Error::InvalidArgument(format!(
            "query frame {query} out of range for {} frames",
            frames.len()
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!(
            "feature grid must be nonempty ({h}x{w})"
        )));
    }
    if !(delta > T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "delta must be positive, got {delta}"
        )));
    }
    Ok(())
}

fn rescale_all<T: Real>(frames: &[CameraFrame<T>], h: usize, w: usize) -> Vec<CameraFrame<T>> {
    frames
        .iter()
        .map(|f| f.at_resolution(w as u32, h as u32))
        .collect()
}

/// Epipolar attention mask of query frame `query` against all frames.
///
/// A key pixel of frame `j ≠ query` is attendable when its center lies
/// strictly closer than `delta` feature pixels to the epipolar line of the
/// query pixel. The self block, pure-rotation pairs and invalid lines fall
/// back to all-true blocks.
pub fn build_mask<T: Real>(
    frames: &[CameraFrame<T>],
    query: usize,
    h: usize,
    w: usize,
    delta: T,
    n_registers: usize,
) -> Result<EpipolarMask> {
    validate_mask_args(frames, query, h, w, delta)?;
    let scaled = rescale_all(frames, h, w);
    Ok(build_mask_scaled(&scaled, query, h, w, delta, n_registers))
}

fn build_mask_scaled<T: Real>(
    scaled: &[CameraFrame<T>],
    query: usize,
    h: usize,
    w: usize,
    delta: T,
    n_registers: usize,
) -> EpipolarMask {
    let n = scaled.len();
    let hw = h * w;
    let mut mask = EpipolarMask::with_blocks(h, w, n, n_registers, query, false);
    for j in 0..n {
        if j == query {
            for p in 0..hw {
                mask.bits.row_mut(p)[j * hw..(j + 1) * hw].fill(true);
            }
        } else {
            fill_epipolar_block(&mut mask, scaled, query, j, delta);
        }
    }
    mask
}

/// Epipolar constraint against the reference frame (frame 0) only.
///
/// The frame-0 block is epipolar, the self block all-true, every other frame
/// block all-false; registers stay attendable.
pub fn reference_frame_mask<T: Real>(
    frames: &[CameraFrame<T>],
    query: usize,
    h: usize,
    w: usize,
    delta: T,
    n_registers: usize,
) -> Result<EpipolarMask> {
    validate_mask_args(frames, query, h, w, delta)?;
    let scaled = rescale_all(frames, h, w);
    let hw = h * w;
    let mut mask = EpipolarMask::with_blocks(h, w, frames.len(), n_registers, query, false);
    for p in 0..hw {
        mask.bits.row_mut(p)[query * hw..(query + 1) * hw].fill(true);
    }
    if query != 0 {
        fill_epipolar_block(&mut mask, &scaled, query, 0, delta);
    }
    Ok(mask)
}

/// How the distance threshold is chosen at each feature resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
#[derive(Default)]
pub enum DeltaRule {
    /// Half the diagonal of one feature cell, `√2 / 2` feature pixels.
    #[default]
    HalfCellDiagonal,
    /// Half the diagonal of the whole feature grid, `√(h² + w²) / 2`.
    HalfGridDiagonal,
    /// The same threshold (in feature pixels) at every level.
    Fixed(f64),
    /// No threshold: every epipolar block is dense.
    Unbounded,
}

impl DeltaRule {
    pub fn delta(&self, h: usize, w: usize) -> f64 {
        match *self {
            DeltaRule::HalfCellDiagonal => std::f64::consts::SQRT_2 / 2.0,
            DeltaRule::HalfGridDiagonal => ((h * h + w * w) as f64).sqrt() / 2.0,
            DeltaRule::Fixed(d) => d,
            DeltaRule::Unbounded => f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskLevel {
    pub h: usize,
    pub w: usize,
    pub delta: f64,
    /// One mask per query frame.
    pub masks: Vec<EpipolarMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpipolarMaskSet {
    pub n_frames: usize,
    pub n_registers: usize,
    pub levels: Vec<MaskLevel>,
}

/// Masks for every query frame at every `(h, w)` in `resolutions`.
pub fn build_mask_set<T: Real>(
    frames: &[CameraFrame<T>],
    resolutions: &[(usize, usize)],
    delta_rule: DeltaRule,
    n_registers: usize,
) -> Result<EpipolarMaskSet> {
    if resolutions.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one resolution is required".into(),
        ));
    }
    if frames.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one frame is required".into(),
        ));
    }
    let mut levels = Vec::with_capacity(resolutions.len());
    for &(h, w) in resolutions {
        let delta = delta_rule.delta(h, w);
        let delta_t = if delta.is_infinite() {
            T::max_value().unwrap_or_else(|| T::lit(f64::MAX))
        } else {
            T::lit(delta)
        };
        validate_mask_args(frames, 0, h, w, delta_t)?;
        let scaled = rescale_all(frames, h, w);
        let masks = (0..frames.len())
            .map(|i| build_mask_scaled(&scaled, i, h, w, delta_t, n_registers))
            .collect();
        levels.push(MaskLevel { h, w, delta, masks });
    }
    Ok(EpipolarMaskSet {
        n_frames: frames.len(),
        n_registers,
        levels,
    })
}

pub const EPIM_MAGIC: &[u8; 4] = b"EPIM";
pub const EPIM_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Packs bits LSB-first into bytes, zero-padding the last byte.
fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        if b {
            byte |= 1 << n;
        }
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

impl EpipolarMaskSet {
    /// Serializes to the portable `EPIM` binary layout.
    ///
    /// All integers are little-endian `u32`. Header: magic `EPIM`, version,
    /// `h` and `w` of the first level, `N`, `R`, level count. Each level then
    /// stores its own `h`, `w` followed by the bits of query frames `0..N`,
    /// each `(h·w) × (N·h·w + R)` row-major, packed LSB-first and padded to
    /// a byte boundary at the end of the level.
    pub fn to_epim_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(EPIM_MAGIC);
        put_u32(&mut out, EPIM_VERSION);
        let (h0, w0) = self.levels.first().map_or((0, 0), |l| (l.h, l.w));
        put_u32(&mut out, h0 as u32);
        put_u32(&mut out, w0 as u32);
        put_u32(&mut out, self.n_frames as u32);
        put_u32(&mut out, self.n_registers as u32);
        put_u32(&mut out, self.levels.len() as u32);
        for level in &self.levels {
            put_u32(&mut out, level.h as u32);
            put_u32(&mut out, level.w as u32);
            pack_bits(
                level
                    .masks
                    .iter()
                    .flat_map(|m| m.bits.bits().iter().copied()),
                &mut out,
            );
        }
        out
    }

    pub fn write_epim<W: Write>(&self, mut writer: W) -> std::io::Result<()> {
        writer.write_all(&self.to_epim_bytes())
    }

    /// Parses the `EPIM` layout written by [`EpipolarMaskSet::to_epim_bytes`].
    ///
    /// Per-level thresholds are not stored and come back as `NaN`.
    pub fn read_epim<R: Read>(mut reader: R) -> Result<Self> {
        let mut buf = Vec::new();
        reader
            .read_to_end(&mut buf)
            .map_err(|e| Error::io("<epim>", e))?;
        let mut cursor = Cursor { buf: &buf, pos: 0 };
        if cursor.bytes(4)? != EPIM_MAGIC {
            return Err(Error::Parse {
                line: 0,
                msg: "bad EPIM magic".into(),
            });
        }
        let version = cursor.u32()?;
        if version != EPIM_VERSION {
            return Err(Error::Parse {
                line: 0,
                msg: format!("unsupported EPIM version {version}"),
            });
        }
        let _h0 = cursor.u32()?;
        let _w0 = cursor.u32()?;
        let n = cursor.u32()? as usize;
        let r = cursor.u32()? as usize;
        let n_levels = cursor.u32()? as usize;
        let mut levels = Vec::with_capacity(n_levels);
        for _ in 0..n_levels {
            let h = cursor.u32()? as usize;
            let w = cursor.u32()? as usize;
            let hw = h * w;
            let per_mask = hw * (n * hw + r);
            let total = per_mask * n;
            let bytes = cursor.bytes(total.div_ceil(8))?;
            let bit = |k: usize| bytes[k / 8] >> (k % 8) & 1 == 1;
            let masks = (0..n)
                .map(|i| EpipolarMask {
                    bits: BoolMatrix::from_bits(
                        hw,
                        n * hw + r,
                        (0..per_mask).map(|k| bit(i * per_mask + k)).collect(),
                    ),
                    h,
                    w,
                    n_frames: n,
                    n_registers: r,
                    query_frame: i,
                })
                .collect();
            levels.push(MaskLevel {
                h,
                w,
                delta: f64::NAN,
                masks,
            });
        }
        Ok(Self {
            n_frames: n,
            n_registers: r,
            levels,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                line: 0,
                msg: "truncated EPIM stream".into(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Binary PGM (`P5`) of a whole mask: one image row per query pixel, one
/// column per key (registers included); attendable entries are white.
pub fn write_pgm<W: Write>(mask: &EpipolarMask, mut writer: W) -> std::io::Result<()> {
    write!(writer, "P5\n{} {}\n255\n", mask.cols(), mask.rows())?;
    let pixels: Vec<u8> = mask
        .bits
        .bits()
        .iter()
        .map(|&b| if b { 255 } else { 0 })
        .collect();
    writer.write_all(&pixels)
}

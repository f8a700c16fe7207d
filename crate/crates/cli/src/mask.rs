use std::io::BufWriter;
use std::path::PathBuf;

use clap::Args;
use epiray::epipolar::{build_mask_set, write_pgm, DeltaRule};
use serde::{Deserialize, Serialize};

use crate::common::*;

#[derive(Debug, Args)]
pub struct MaskArgs {
    /// Camera pose file (19 fields per line).
    pub pose_file: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with defaults for any of the options below.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub start: Option<usize>,
    /// Comma-separated feature grids, e.g. `32x32,16x16`.
    #[arg(long)]
    pub resolutions: Option<String>,
    /// Threshold in feature pixels, or `max` for an unbounded threshold.
    /// Defaults to half a cell diagonal at every level.
    #[arg(long)]
    pub delta: Option<String>,
    #[arg(long)]
    pub registers: Option<usize>,
    /// Image size the normalized intrinsics refer to.
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
    /// Query frames to write PGM previews for.
    #[arg(long, value_delimiter = ',')]
    pub preview_frames: Option<Vec<usize>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFileConfig {
    frames: Option<usize>,
    stride: Option<usize>,
    start: Option<usize>,
    resolutions: Option<String>,
    delta: Option<String>,
    registers: Option<usize>,
    width: Option<u32>,
    height: Option<u32>,
    preview_frames: Option<Vec<usize>>,
}

#[derive(Debug, Serialize)]
struct Effective {
    pose_file: PathBuf,
    frames: usize,
    stride: usize,
    start: usize,
    resolutions: Vec<(usize, usize)>,
    delta: DeltaRule,
    registers: usize,
    width: u32,
    height: u32,
    preview_frames: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct LevelSummary {
    h: usize,
    w: usize,
    delta: f64,
    density: f64,
}

#[derive(Debug, Serialize)]
struct MaskMeta {
    config: Effective,
    source_indices: Vec<usize>,
    levels: Vec<LevelSummary>,
}

pub const DEFAULT_RESOLUTIONS: &str = "32x32,16x16,8x8,4x4";
pub const DEFAULT_REGISTERS: usize = 4;

fn parse_delta(s: Option<String>) -> CliResult<DeltaRule> {
    match s.as_deref() {
        None => Ok(DeltaRule::HalfCellDiagonal),
        Some("max") => Ok(DeltaRule::Unbounded),
        Some(v) => {
            let d: f64 = v.parse().map_err(|_| {
                CliError::usage(format!("--delta expects a number or `max`, got `{v}`"))
            })?;
            if !(d > 0.0) {
                return Err(CliError::usage("--delta must be positive"));
            }
            Ok(DeltaRule::Fixed(d))
        }
    }
}

pub fn run(args: MaskArgs) -> CliResult<()> {
    let file: MaskFileConfig = load_config(args.config.as_ref())?;
    let cfg = Effective {
        pose_file: args.pose_file.clone(),
        frames: pick(args.frames, file.frames, 16),
        stride: pick(args.stride, file.stride, 8),
        start: pick(args.start, file.start, 0),
        resolutions: parse_resolutions(&pick(
            args.resolutions,
            file.resolutions,
            DEFAULT_RESOLUTIONS.to_string(),
        ))?,
        delta: parse_delta(args.delta.or(file.delta))?,
        registers: pick(args.registers, file.registers, DEFAULT_REGISTERS),
        width: pick(args.width, file.width, 256),
        height: pick(args.height, file.height, 256),
        preview_frames: pick(args.preview_frames, file.preview_frames, vec![0]),
    };
    if let Some(&bad) = cfg.preview_frames.iter().find(|&&f| f >= cfg.frames) {
        return Err(CliError::usage(format!(
            "preview frame {bad} outside 0..{}",
            cfg.frames
        )));
    }
    let clip = load_clip(
        &cfg.pose_file,
        &ClipSelection {
            n_frames: cfg.frames,
            stride: cfg.stride,
            start: cfg.start,
            width: cfg.width,
            height: cfg.height,
        },
    )?;
    let set = build_mask_set(&clip.frames, &cfg.resolutions, cfg.delta, cfg.registers)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("masks.epim"), set.to_epim_bytes())?;
    let mut levels = Vec::new();
    for (li, level) in set.levels.iter().enumerate() {
        let density =
            level.masks.iter().map(|m| m.density()).sum::<f64>() / level.masks.len() as f64;
        println!(
            "level {li} {}x{} delta={} density={density:.6}",
            level.h, level.w, level.delta
        );
        for &q in &cfg.preview_frames {
            let path = args
                .out
                .join(format!("level{li}_{}x{}_query{q:02}.pgm", level.h, level.w));
            let f = std::fs::File::create(&path)
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
            write_pgm(&level.masks[q], BufWriter::new(f))
                .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
        }
        levels.push(LevelSummary {
            h: level.h,
            w: level.w,
            delta: level.delta,
            density,
        });
    }
    write_json(
        &args.out.join("mask_meta.json"),
        &MaskMeta {
            config: cfg,
            source_indices: clip.indices,
            levels,
        },
    )
}

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;
use epiray::geometry::plucker_grids;
use serde::{Deserialize, Serialize};

use crate::common::*;

#[derive(Debug, Args)]
pub struct PluckerArgs {
    pub pose_file: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid rows.
    #[arg(long)]
    pub h: Option<usize>,
    /// Grid columns.
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub start: Option<usize>,
    #[arg(long)]
    pub width: Option<u32>,
    #[arg(long)]
    pub height: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluckerFileConfig {
    h: Option<usize>,
    w: Option<usize>,
    frames: Option<usize>,
    stride: Option<usize>,
    start: Option<usize>,
    width: Option<u32>,
    height: Option<u32>,
}

#[derive(Debug, Serialize)]
struct Effective {
    pose_file: PathBuf,
    h: usize,
    w: usize,
    frames: usize,
    stride: usize,
    start: usize,
    width: u32,
    height: u32,
}

/// Binary dump header magic; followed by u32 LE version, N, h, w and then
/// `N·h·w·6` little-endian f64 values `(m, d)` in frame, row, column order.
pub const PLKR_MAGIC: &[u8; 4] = b"PLKR";
pub const PLKR_VERSION: u32 = 1;
const INVARIANT_TOL: f64 = 1e-9;

pub fn run(args: PluckerArgs) -> CliResult<()> {
    let file: PluckerFileConfig = load_config(args.config.as_ref())?;
    let cfg = Effective {
        pose_file: args.pose_file.clone(),
        h: pick(args.h, file.h, 32),
        w: pick(args.w, file.w, 32),
        frames: pick(args.frames, file.frames, 16),
        stride: pick(args.stride, file.stride, 8),
        start: pick(args.start, file.start, 0),
        width: pick(args.width, file.width, 256),
        height: pick(args.height, file.height, 256),
    };
    if cfg.h == 0 || cfg.w == 0 {
        return Err(CliError::usage("grid size h and w must be positive"));
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
    let grids = plucker_grids(&clip.frames, cfg.h, cfg.w);
    for g in &grids {
        g.check_invariants(INVARIANT_TOL)?;
    }

    let mut bin = Vec::with_capacity(20 + grids.len() * cfg.h * cfg.w * 48);
    bin.extend_from_slice(PLKR_MAGIC);
    for v in [PLKR_VERSION, grids.len() as u32, cfg.h as u32, cfg.w as u32] {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    let mut csv = String::from("frame,row,col,m_x,m_y,m_z,d_x,d_y,d_z\n");
    for (f, g) in grids.iter().enumerate() {
        for (p, ch) in g.channel_rows().iter().enumerate() {
            write!(csv, "{f},{},{}", p / cfg.w, p % cfg.w).unwrap();
            for v in ch {
                bin.extend_from_slice(&v.to_le_bytes());
                write!(csv, ",{v}").unwrap();
            }
            csv.push('\n');
        }
    }
    create_dir(&args.out)?;
    write_file(&args.out.join("plucker.bin"), bin)?;
    write_file(&args.out.join("plucker.csv"), csv)?;
    write_json(&args.out.join("plucker_meta.json"), &cfg)?;
    println!("wrote {} frames of {}x{} rays", grids.len(), cfg.h, cfg.w);
    Ok(())
}

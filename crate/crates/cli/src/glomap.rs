use std::path::PathBuf;

use clap::Args;
use epiray::geometry::CameraIntrinsics;
use epiray::io::{glomap_invocations, read_pose_file};

use crate::common::*;

#[derive(Debug, Args)]
pub struct GlomapArgs {
    /// Directory receiving the database and sparse model.
    #[arg(long, default_value = "workspace")]
    pub workspace: String,
    /// Directory holding the generated frames.
    #[arg(long, default_value = "workspace/images")]
    pub images: String,
    /// Take intrinsics from the first record of this pose file.
    #[arg(long, conflicts_with_all = ["fx", "fy", "cx", "cy"])]
    pub poses: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub width: u32,
    #[arg(long, default_value_t = 256)]
    pub height: u32,
    #[arg(long)]
    pub fx: Option<f64>,
    #[arg(long)]
    pub fy: Option<f64>,
    #[arg(long)]
    pub cx: Option<f64>,
    #[arg(long)]
    pub cy: Option<f64>,
}

pub fn run(args: GlomapArgs) -> CliResult<()> {
    let k = match &args.poses {
        Some(path) => {
            require_file(path)?;
            let file = read_pose_file(path)?;
            let first = file
                .records
                .first()
                .ok_or_else(|| CliError::usage(format!("{}: no pose records", path.display())))?;
            first.denormalized(args.width, args.height)?
        }
        None => {
            let (fx, cx, cy) = match (args.fx, args.cx, args.cy) {
                (Some(fx), Some(cx), Some(cy)) => (fx, cx, cy),
                _ => {
                    return Err(CliError::usage(
                        "give --poses or all of --fx, --cx, --cy (and optionally --fy)",
                    ))
                }
            };
            CameraIntrinsics::new(fx, args.fy.unwrap_or(fx), cx, cy, args.width, args.height)?
        }
    };
    for cmd in glomap_invocations(&args.workspace, &args.images, &k) {
        println!("{cmd}");
    }
    Ok(())
}

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use epiray::geometry::CameraFrame;
use epiray::io::{read_pose_file, sample_strided};
use serde::de::DeserializeOwned;

/// Failure carrying the process exit status.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<epiray::Error> for CliError {
    fn from(e: epiray::Error) -> Self {
        use epiray::Error as E;
        let code = match &e {
            E::InvalidArgument(_)
            | E::Shape(_)
            | E::Parse { .. }
            | E::UnknownCameraModel(_)
            | E::DanglingCamera { .. }
            | E::Range(_)
            | E::Json(_) => 2,
            E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!(
            "file not found: {}",
            path.display()
        )))
    }
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

pub fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    write_file(path, text + "\n")
}

/// Reads an optional JSON config file of per-command defaults.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&PathBuf>) -> CliResult<C> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    require_file(path)?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// Flag, then config file, then built-in default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

pub struct ClipSelection {
    pub n_frames: usize,
    pub stride: usize,
    pub start: usize,
    pub width: u32,
    pub height: u32,
}

pub struct LoadedClip {
    pub indices: Vec<usize>,
    pub frames: Vec<CameraFrame<f64>>,
}

/// Parses a pose file, samples frames and denormalizes intrinsics;
/// orthonormality warnings go to stderr.
pub fn load_clip(path: &Path, sel: &ClipSelection) -> CliResult<LoadedClip> {
    require_file(path)?;
    let file = read_pose_file(path)?;
    for w in &file.warnings {
        eprintln!(
            "warning: {}:{}: rotation off orthonormal by {:.3e}",
            path.display(),
            w.line,
            w.orthonormality_error
        );
    }
    if file.records.is_empty() {
        return Err(CliError::usage(format!(
            "{}: no pose records",
            path.display()
        )));
    }
    let indices = sample_strided(file.records.len(), sel.stride, sel.n_frames, sel.start)?;
    let frames = indices
        .iter()
        .map(|&i| file.records[i].frame(sel.width, sel.height))
        .collect::<epiray::Result<Vec<_>>>()?;
    Ok(LoadedClip { indices, frames })
}

/// `"32x32,16x16"` → `[(32, 32), (16, 16)]` as `(h, w)`.
pub fn parse_resolutions(s: &str) -> CliResult<Vec<(usize, usize)>> {
    s.split(',')
        .map(|part| {
            let (h, w) = part
                .trim()
                .split_once(['x', 'X'])
                .ok_or_else(|| CliError::usage(format!("resolution `{part}` is not HxW")))?;
            let h: usize = h
                .parse()
                .map_err(|_| CliError::usage(format!("bad height in `{part}`")))?;
            let w: usize = w
                .parse()
                .map_err(|_| CliError::usage(format!("bad width in `{part}`")))?;
            if h == 0 || w == 0 {
                return Err(CliError::usage(format!(
                    "resolution `{part}` must be positive"
                )));
            }
            Ok((h, w))
        })
        .collect()
}

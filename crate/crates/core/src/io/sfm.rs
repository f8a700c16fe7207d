//! COLMAP/GLOMAP text models (`cameras.txt`, `images.txt`).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, CameraPose};
use crate::metrics::Trajectory;

/// Which pinhole parameterization a camera line used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PinholeModel {
    /// `f cx cy`
    SimplePinhole,
    /// `fx fy cx cy`
    Pinhole,
}

impl PinholeModel {
    pub fn name(self) -> &'static str {
        match self {
            PinholeModel::SimplePinhole => "SIMPLE_PINHOLE",
            PinholeModel::Pinhole => "PINHOLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmCamera {
    pub id: u32,
    pub model: PinholeModel,
    pub intrinsics: CameraIntrinsics<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SfmImage {
    pub id: u32,
    /// Unit quaternion `(w, x, y, z)`, world-to-camera.
    pub qvec: [f64; 4],
    pub tvec: Vector3<f64>,
    pub camera_id: u32,
    pub name: String,
}

impl SfmImage {
    pub fn pose(&self) -> CameraPose<f64> {
        CameraPose::new_unchecked(quaternion_to_rotation(self.qvec), self.tvec)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SfmModel {
    pub cameras: BTreeMap<u32, SfmCamera>,
    pub images: BTreeMap<u32, SfmImage>,
}

/// Rotation matrix of a (not necessarily unit) quaternion `(w, x, y, z)`.
pub fn quaternion_to_rotation(q: [f64; 4]) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// Unit quaternion `(w, x, y, z)` with `w ≥ 0`.
pub fn rotation_to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let uq = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let q = uq.quaternion();
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    [s * q.w, s * q.i, s * q.j, s * q.k]
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()))
}

fn is_skippable(line: &str) -> bool {
    line.is_empty() || line.starts_with('#')
}

fn num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| Error::Parse {
        line,
        msg: format!("{what} `{tok}`: {e}"),
    })
}

fn parse_cameras(text: &str) -> Result<BTreeMap<u32, SfmCamera>> {
    let mut cameras = BTreeMap::new();
    for (line, l) in content_lines(text) {
        if is_skippable(l) {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 4 {
            return Err(Error::Parse {
                line,
                msg: "camera line needs CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]".into(),
            });
        }
        let id: u32 = num(toks[0], line, "camera id")?;
        let width: u32 = num(toks[2], line, "width")?;
        let height: u32 = num(toks[3], line, "height")?;
        let params = toks[4..]
            .iter()
            .map(|t| num::<f64>(t, line, "camera parameter"))
            .collect::<Result<Vec<_>>>()?;
        let (model, [fx, fy, cx, cy]) = match (toks[1], params.len()) {
            ("SIMPLE_PINHOLE", 3) => (
                PinholeModel::SimplePinhole,
                [params[0], params[0], params[1], params[2]],
            ),
            ("PINHOLE", 4) => (
                PinholeModel::Pinhole,
                [params[0], params[1], params[2], params[3]],
            ),
            ("SIMPLE_PINHOLE" | "PINHOLE", n) => {
                return Err(Error::Parse {
                    line,
                    msg: format!(
                        "{} takes {} parameters, found {n}",
                        toks[1],
                        if toks[1] == "PINHOLE" { 4 } else { 3 }
                    ),
                })
            }
            (other, _) => return Err(Error::UnknownCameraModel(other.to_string())),
        };
        let intrinsics =
            CameraIntrinsics::new(fx, fy, cx, cy, width, height).map_err(|e| Error::Parse {
                line,
                msg: e.to_string(),
            })?;
        if cameras
            .insert(
                id,
                SfmCamera {
                    id,
                    model,
                    intrinsics,
                },
            )
            .is_some()
        {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate camera id {id}"),
            });
        }
    }
    Ok(cameras)
}

fn parse_images(text: &str) -> Result<BTreeMap<u32, SfmImage>> {
    let mut images = BTreeMap::new();
    let mut lines = content_lines(text);
    while let Some((line, l)) = lines.next() {
        if is_skippable(l) {
            continue;
        }
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 10 {
            return Err(Error::Parse {
                line,
                msg: "image line needs IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME".into(),
            });
        }
        let id: u32 = num(toks[0], line, "image id")?;
        let mut q = [0.0; 4];
        for (k, slot) in q.iter_mut().enumerate() {
            *slot = num(toks[1 + k], line, "quaternion")?;
        }
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(Error::Parse {
                line,
                msg: "degenerate quaternion".into(),
            });
        }
        q.iter_mut().for_each(|v| *v /= norm);
        let t = Vector3::new(
            num(toks[5], line, "translation")?,
            num(toks[6], line, "translation")?,
            num(toks[7], line, "translation")?,
        );
        let camera_id: u32 = num(toks[8], line, "camera id")?;
        // Names may contain spaces.
        let name = toks[9..].join(" ");
        if images
            .insert(
                id,
                SfmImage {
                    id,
                    qvec: q,
                    tvec: t,
                    camera_id,
                    name,
                },
            )
            .is_some()
        {
            return Err(Error::Parse {
                line,
                msg: format!("duplicate image id {id}"),
            });
        }
        // The observation line that follows is ignored, even when empty.
        lines.next();
    }
    Ok(images)
}

pub fn parse_sfm_model(cameras_text: &str, images_text: &str) -> Result<SfmModel> {
    let cameras = parse_cameras(cameras_text)?;
    let images = parse_images(images_text)?;
    for img in images.values() {
        if !cameras.contains_key(&img.camera_id) {
            return Err(Error::DanglingCamera {
                image_id: img.id,
                camera_id: img.camera_id,
            });
        }
    }
    Ok(SfmModel { cameras, images })
}

/// Finds `cameras.txt`/`images.txt` in `dir` or `dir/sparse/0`.
pub fn locate_model(dir: &Path) -> Option<(PathBuf, PathBuf)> {
    [
        dir.to_path_buf(),
        dir.join("sparse").join("0"),
        dir.join("0"),
    ]
    .into_iter()
    .map(|d| (d.join("cameras.txt"), d.join("images.txt")))
    .find(|(c, i)| c.is_file() && i.is_file())
}

pub fn read_sfm_model(dir: &Path) -> Result<SfmModel> {
    let (c, i) = locate_model(dir).ok_or_else(|| {
        Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no cameras.txt/images.txt"),
        )
    })?;
    let ct = std::fs::read_to_string(&c).map_err(|e| Error::io(&c, e))?;
    let it = std::fs::read_to_string(&i).map_err(|e| Error::io(&i, e))?;
    parse_sfm_model(&ct, &it)
}

impl SfmModel {
    /// A single shared camera plus one image per camera-to-world pose.
    pub fn from_trajectory(
        traj: &Trajectory<f64>,
        intrinsics: &CameraIntrinsics<f64>,
        model: PinholeModel,
        names: &[String],
    ) -> Result<Self> {
        if names.len() != traj.len() {
            return Err(Error::Shape(format!(
                "{} names for {} poses",
                names.len(),
                traj.len()
            )));
        }
        if model == PinholeModel::SimplePinhole && intrinsics.fx != intrinsics.fy {
            return Err(Error::InvalidArgument(
                "SIMPLE_PINHOLE needs fx == fy".into(),
            ));
        }
        let mut cameras = BTreeMap::new();
        cameras.insert(
            1,
            SfmCamera {
                id: 1,
                model,
                intrinsics: *intrinsics,
            },
        );
        let images = traj
            .poses()
            .iter()
            .zip(names)
            .enumerate()
            .map(|(i, (c2w, name))| {
                let w2c = c2w.inverse();
                let id = i as u32 + 1;
                (
                    id,
                    SfmImage {
                        id,
                        qvec: rotation_to_quaternion(&w2c.rotation),
                        tvec: w2c.translation,
                        camera_id: 1,
                        name: name.clone(),
                    },
                )
            })
            .collect();
        Ok(Self { cameras, images })
    }

    /// `precision` fixes the number of decimals; `None` writes shortest
    /// round-trip values.
    pub fn cameras_text(&self, precision: Option<usize>) -> String {
        let fmt = |v: f64| match precision {
            Some(p) => format!("{v:.p$}"),
            None => format!("{v}"),
        };
        let mut out = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
        writeln!(out, "# Number of cameras: {}", self.cameras.len()).unwrap();
        for c in self.cameras.values() {
            let k = &c.intrinsics;
            let params = match c.model {
                PinholeModel::SimplePinhole => vec![k.fx, k.cx, k.cy],
                PinholeModel::Pinhole => vec![k.fx, k.fy, k.cx, k.cy],
            };
            let params: Vec<String> = params.into_iter().map(fmt).collect();
            writeln!(
                out,
                "{} {} {} {} {}",
                c.id,
                c.model.name(),
                k.width,
                k.height,
                params.join(" ")
            )
            .unwrap();
        }
        out
    }

    pub fn images_text(&self, precision: Option<usize>) -> String {
        let fmt = |v: f64| match precision {
            Some(p) => format!("{v:.p$}"),
            None => format!("{v}"),
        };
        let mut out = String::from(
            "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
        );
        writeln!(out, "# Number of images: {}", self.images.len()).unwrap();
        for im in self.images.values() {
            let nums: Vec<String> = im
                .qvec
                .iter()
                .chain(im.tvec.iter())
                .map(|&v| fmt(v))
                .collect();
            writeln!(
                out,
                "{} {} {} {}",
                im.id,
                nums.join(" "),
                im.camera_id,
                im.name
            )
            .unwrap();
            out.push('\n');
        }
        out
    }

    pub fn write_dir(&self, dir: &Path, precision: Option<usize>) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let c = dir.join("cameras.txt");
        std::fs::write(&c, self.cameras_text(precision)).map_err(|e| Error::io(&c, e))?;
        let i = dir.join("images.txt");
        std::fs::write(&i, self.images_text(precision)).map_err(|e| Error::io(&i, e))?;
        Ok(())
    }

    pub fn camera_models(&self) -> Vec<PinholeModel> {
        self.cameras.values().map(|c| c.model).collect()
    }
}

/// Camera-to-world trajectory in `expected_names` order. Any missing or
/// ambiguous name fails the whole trial.
pub fn to_trajectory(model: &SfmModel, expected_names: &[String]) -> Result<Trajectory<f64>> {
    let mut by_name: HashMap<&str, Vec<&SfmImage>> = HashMap::new();
    for im in model.images.values() {
        by_name.entry(im.name.as_str()).or_default().push(im);
    }
    let mut missing = Vec::new();
    let mut poses = Vec::with_capacity(expected_names.len());
    for name in expected_names {
        match by_name.get(name.as_str()).map(Vec::as_slice) {
            Some([im]) => poses.push(im.pose().inverse()),
            Some(_) => missing.push(format!("{name} (registered more than once)")),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::Unregistered { missing });
    }
    Trajectory::from_estimated(poses)
}

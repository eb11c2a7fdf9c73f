//! Sparse SfM models in the COLMAP layout.
//!
//! A model directory holds `cameras`, `images` and `points3D` files, either
//! all binary (`.bin`, little-endian) or all text (`.txt`). Records keep the
//! order they had on disk and every numeric field is stored exactly as read,
//! so writing back an unmodified model reproduces the input byte for byte.
//!
//! Dangling references (an observation naming a missing point, a track naming
//! a missing image, an image naming a missing camera) do not fail parsing.
//! They are returned as [`IntegrityIssue`]s next to the model. Writing with
//! [`IntegrityPolicy::Strict`] refuses such a model.

mod binary;
mod text;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose, ProjectionError, SceneBounds};

#[derive(Debug, Error)]
pub enum ColmapError {
    #[error("missing model file {0}")]
    MissingFile(PathBuf),
    #[error("{file}: record starting at byte {offset} is truncated")]
    TruncatedRecord { file: PathBuf, offset: u64 },
    #[error("{file}: unknown camera model {model} for camera {camera_id}")]
    UnknownCameraModel {
        file: PathBuf,
        camera_id: u32,
        model: String,
    },
    #[error("{file}: camera {camera_id} is invalid: {reason}")]
    InvalidCamera {
        file: PathBuf,
        camera_id: u32,
        reason: String,
    },
    #[error("{file}: duplicate id {id}")]
    DuplicateId { file: PathBuf, id: u64 },
    #[error("{file}:{line}: {message}")]
    Malformed {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{file}: {count} unexpected trailing bytes")]
    TrailingBytes { file: PathBuf, count: usize },
    #[error("model has {} dangling references, first: {}", .0.len(), .0[0])]
    IntegrityViolation(Vec<IntegrityIssue>),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ColmapError>;

/// Camera models with their COLMAP ids and parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
    Radial,
    OpenCv,
    OpenCvFisheye,
    FullOpenCv,
    Fov,
    SimpleRadialFisheye,
    RadialFisheye,
    ThinPrismFisheye,
}

const ALL_MODELS: [CameraModel; 11] = [
    CameraModel::SimplePinhole,
    CameraModel::Pinhole,
    CameraModel::SimpleRadial,
    CameraModel::Radial,
    CameraModel::OpenCv,
    CameraModel::OpenCvFisheye,
    CameraModel::FullOpenCv,
    CameraModel::Fov,
    CameraModel::SimpleRadialFisheye,
    CameraModel::RadialFisheye,
    CameraModel::ThinPrismFisheye,
];

impl CameraModel {
    pub fn id(self) -> i32 {
        ALL_MODELS.iter().position(|m| *m == self).unwrap() as i32
    }

    pub fn from_id(id: i32) -> Option<Self> {
        usize::try_from(id).ok().and_then(|i| ALL_MODELS.get(i).copied())
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
            CameraModel::Radial => "RADIAL",
            CameraModel::OpenCv => "OPENCV",
            CameraModel::OpenCvFisheye => "OPENCV_FISHEYE",
            CameraModel::FullOpenCv => "FULL_OPENCV",
            CameraModel::Fov => "FOV",
            CameraModel::SimpleRadialFisheye => "SIMPLE_RADIAL_FISHEYE",
            CameraModel::RadialFisheye => "RADIAL_FISHEYE",
            CameraModel::ThinPrismFisheye => "THIN_PRISM_FISHEYE",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        ALL_MODELS.iter().copied().find(|m| m.name() == name)
    }

    pub fn num_params(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
            CameraModel::SimpleRadial => 4,
            CameraModel::Radial => 5,
            CameraModel::OpenCv => 8,
            CameraModel::OpenCvFisheye => 8,
            CameraModel::FullOpenCv => 12,
            CameraModel::Fov => 5,
            CameraModel::SimpleRadialFisheye => 4,
            CameraModel::RadialFisheye => 5,
            CameraModel::ThinPrismFisheye => 12,
        }
    }

    /// Models whose first parameters are `f, cx, cy` rather than `fx, fy, cx, cy`.
    pub fn single_focal(self) -> bool {
        matches!(
            self,
            CameraModel::SimplePinhole
                | CameraModel::SimpleRadial
                | CameraModel::Radial
                | CameraModel::SimpleRadialFisheye
                | CameraModel::RadialFisheye
        )
    }

    pub fn is_pinhole(self) -> bool {
        matches!(self, CameraModel::SimplePinhole | CameraModel::Pinhole)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl Camera {
    pub fn pinhole(camera_id: u32, k: &Intrinsics) -> Self {
        Self {
            camera_id,
            model: CameraModel::Pinhole,
            width: k.width as u64,
            height: k.height as u64,
            params: vec![k.fx, k.fy, k.cx, k.cy],
        }
    }

    pub fn fx(&self) -> f64 {
        self.params[0]
    }

    pub fn fy(&self) -> f64 {
        if self.model.single_focal() {
            self.params[0]
        } else {
            self.params[1]
        }
    }

    pub fn cx(&self) -> f64 {
        self.params[if self.model.single_focal() { 1 } else { 2 }]
    }

    pub fn cy(&self) -> f64 {
        self.params[if self.model.single_focal() { 2 } else { 3 }]
    }

    /// Pinhole intrinsics; other models are rejected rather than approximated.
    pub fn intrinsics(&self) -> std::result::Result<Intrinsics, ProjectionError> {
        if !self.model.is_pinhole() {
            return Err(ProjectionError::UnsupportedCamera(self.model.name().into()));
        }
        Ok(Intrinsics::new(
            self.width as u32,
            self.height as u32,
            self.fx(),
            self.fy(),
            self.cx(),
            self.cy(),
        ))
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.params.len() != self.model.num_params() {
            return Err(format!(
                "{} expects {} parameters, got {}",
                self.model.name(),
                self.model.num_params(),
                self.params.len()
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err("zero image dimension".into());
        }
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err("non-positive focal length".into());
        }
        let (cx, cy) = (self.cx(), self.cy());
        if !(0.0..=self.width as f64).contains(&cx) || !(0.0..=self.height as f64).contains(&cy) {
            return Err("principal point outside the image".into());
        }
        Ok(())
    }
}

/// A 2D feature; `point3d_id` is `None` for the `-1` sentinel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub y: f64,
    pub point3d_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: u32,
    pub camera_id: u32,
    /// World-to-camera rotation as `(w, x, y, z)`, stored as read.
    pub qvec: [f64; 4],
    /// World-to-camera translation.
    pub tvec: [f64; 3],
    pub name: String,
    pub observations: Vec<Observation>,
}

impl ImageRecord {
    pub fn pose(&self) -> Pose {
        Pose::from_quaternion(self.qvec, self.tvec)
    }

    pub fn center(&self) -> Point3<f64> {
        self.pose().center()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TrackElement {
    pub image_id: u32,
    pub point2d_idx: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point3D {
    pub point_id: u64,
    pub xyz: [f64; 3],
    pub color: [u8; 3],
    pub error: f64,
    pub track: Vec<TrackElement>,
}

impl Point3D {
    pub fn position(&self) -> Point3<f64> {
        Point3::new(self.xyz[0], self.xyz[1], self.xyz[2])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseModel {
    pub cameras: IndexMap<u32, Camera>,
    pub images: IndexMap<u32, ImageRecord>,
    pub points: IndexMap<u64, Point3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntegrityIssue {
    ImageMissingCamera {
        image_id: u32,
        camera_id: u32,
    },
    ObservationMissingPoint {
        image_id: u32,
        observation: usize,
        point_id: u64,
    },
    TrackMissingImage {
        point_id: u64,
        image_id: u32,
    },
    TrackBadObservation {
        point_id: u64,
        image_id: u32,
        point2d_idx: u32,
    },
    DegenerateTrack {
        point_id: u64,
        length: usize,
    },
    NonUnitQuaternion {
        image_id: u32,
        norm: f64,
    },
}

impl IntegrityIssue {
    /// Dangling references block strict writes; the rest are advisory.
    pub fn is_dangling(&self) -> bool {
        matches!(
            self,
            IntegrityIssue::ImageMissingCamera { .. }
                | IntegrityIssue::ObservationMissingPoint { .. }
                | IntegrityIssue::TrackMissingImage { .. }
                | IntegrityIssue::TrackBadObservation { .. }
        )
    }
}

impl std::fmt::Display for IntegrityIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            IntegrityIssue::ImageMissingCamera {
                image_id,
                camera_id,
            } => write!(f, "image {image_id} references missing camera {camera_id}"),
            IntegrityIssue::ObservationMissingPoint {
                image_id,
                observation,
                point_id,
            } => write!(
                f,
                "image {image_id} observation {observation} references missing point {point_id}"
            ),
            IntegrityIssue::TrackMissingImage { point_id, image_id } => {
                write!(f, "point {point_id} track references missing image {image_id}")
            }
            IntegrityIssue::TrackBadObservation {
                point_id,
                image_id,
                point2d_idx,
            } => write!(
                f,
                "point {point_id} track references observation {point2d_idx} outside image {image_id}"
            ),
            IntegrityIssue::DegenerateTrack { point_id, length } => {
                write!(f, "point {point_id} has a track of length {length}")
            }
            IntegrityIssue::NonUnitQuaternion { image_id, norm } => {
                write!(f, "image {image_id} quaternion has norm {norm}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFormat {
    Binary,
    Text,
    Auto,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IntegrityPolicy {
    /// Refuse models with dangling references.
    #[default]
    Strict,
    /// Re-emit whatever is in memory, dangling references included.
    Passthrough,
}

/// A parsed model together with the integrity issues found in it.
#[derive(Debug, Clone)]
pub struct ParsedModel {
    pub model: SparseModel,
    pub issues: Vec<IntegrityIssue>,
}

const FILES: [&str; 3] = ["cameras", "images", "points3D"];

fn resolve_format(dir: &Path, format: ModelFormat) -> Result<ModelFormat> {
    let has = |ext: &str| FILES.iter().all(|f| dir.join(format!("{f}.{ext}")).is_file());
    match format {
        ModelFormat::Auto if has("bin") => Ok(ModelFormat::Binary),
        ModelFormat::Auto if has("txt") => Ok(ModelFormat::Text),
        ModelFormat::Auto => {
            let ext = if dir.join("cameras.txt").is_file() {
                "txt"
            } else {
                "bin"
            };
            Err(missing_file(dir, ext))
        }
        ModelFormat::Binary if !has("bin") => Err(missing_file(dir, "bin")),
        ModelFormat::Text if !has("txt") => Err(missing_file(dir, "txt")),
        f => Ok(f),
    }
}

fn missing_file(dir: &Path, ext: &str) -> ColmapError {
    let path = FILES
        .iter()
        .map(|f| dir.join(format!("{f}.{ext}")))
        .find(|p| !p.is_file())
        .unwrap_or_else(|| dir.join(format!("cameras.{ext}")));
    ColmapError::MissingFile(path)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ColmapError::MissingFile(path.to_path_buf())
        } else {
            ColmapError::IoFailure {
                path: path.to_path_buf(),
                source,
            }
        }
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| ColmapError::IoFailure {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a model directory. Every file is fully decoded before the model is
/// assembled, so a truncated file never yields a partial model.
pub fn parse_sparse_model(dir: &Path, format: ModelFormat) -> Result<ParsedModel> {
    let format = resolve_format(dir, format)?;
    let model = match format {
        ModelFormat::Binary => {
            let path = |f: &str| dir.join(format!("{f}.bin"));
            let cameras = binary::decode_cameras(&read_file(&path("cameras"))?, &path("cameras"))?;
            let images = binary::decode_images(&read_file(&path("images"))?, &path("images"))?;
            let points = binary::decode_points(&read_file(&path("points3D"))?, &path("points3D"))?;
            SparseModel {
                cameras,
                images,
                points,
            }
        }
        ModelFormat::Text => {
            let path = |f: &str| dir.join(format!("{f}.txt"));
            let cameras = text::decode_cameras(&read_file(&path("cameras"))?, &path("cameras"))?;
            let images = text::decode_images(&read_file(&path("images"))?, &path("images"))?;
            let points = text::decode_points(&read_file(&path("points3D"))?, &path("points3D"))?;
            SparseModel {
                cameras,
                images,
                points,
            }
        }
        ModelFormat::Auto => unreachable!("resolved above"),
    };
    let issues = model.validate();
    for issue in &issues {
        log::warn!("{}: {issue}", dir.display());
    }
    Ok(ParsedModel { model, issues })
}

/// Writes a model with [`IntegrityPolicy::Strict`].
pub fn write_sparse_model(model: &SparseModel, dir: &Path, format: ModelFormat) -> Result<()> {
    write_sparse_model_with(model, dir, format, IntegrityPolicy::Strict)
}

pub fn write_sparse_model_with(
    model: &SparseModel,
    dir: &Path,
    format: ModelFormat,
    policy: IntegrityPolicy,
) -> Result<()> {
    if policy == IntegrityPolicy::Strict {
        let dangling: Vec<_> = model
            .validate()
            .into_iter()
            .filter(IntegrityIssue::is_dangling)
            .collect();
        if !dangling.is_empty() {
            return Err(ColmapError::IntegrityViolation(dangling));
        }
    }
    std::fs::create_dir_all(dir).map_err(|source| ColmapError::IoFailure {
        path: dir.to_path_buf(),
        source,
    })?;
    let (ext, files) = match format {
        ModelFormat::Binary | ModelFormat::Auto => (
            "bin",
            [
                binary::encode_cameras(&model.cameras),
                binary::encode_images(&model.images),
                binary::encode_points(&model.points),
            ],
        ),
        ModelFormat::Text => (
            "txt",
            [
                text::encode_cameras(&model.cameras),
                text::encode_images(&model.images),
                text::encode_points(&model.points),
            ],
        ),
    };
    for (name, bytes) in FILES.iter().zip(files.iter()) {
        write_file(&dir.join(format!("{name}.{ext}")), bytes)?;
    }
    Ok(())
}

/// Summary statistics; `bounds` is `None` for a model without points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelStats {
    pub num_cameras: usize,
    pub num_images: usize,
    pub num_points: usize,
    pub num_observations: usize,
    pub mean_reproj_error: f64,
    pub mean_track_length: f64,
    pub bounds: Option<SceneBounds>,
}

pub fn model_stats(model: &SparseModel) -> ModelStats {
    let mut error_sum = 0.0;
    let mut track_sum = 0usize;
    let mut bounds = SceneBounds::empty();
    for p in model.points.values() {
        error_sum += p.error;
        track_sum += p.track.len();
        bounds.extend(&p.position());
    }
    let n = model.points.len();
    ModelStats {
        num_cameras: model.cameras.len(),
        num_images: model.images.len(),
        num_points: n,
        num_observations: model.images.values().map(|i| i.observations.len()).sum(),
        mean_reproj_error: if n > 0 { error_sum / n as f64 } else { 0.0 },
        mean_track_length: if n > 0 {
            track_sum as f64 / n as f64
        } else {
            0.0
        },
        bounds: (n > 0).then_some(bounds),
    }
}

impl SparseModel {
    /// Every integrity issue, each reported once, in file order.
    pub fn validate(&self) -> Vec<IntegrityIssue> {
        let mut issues = Vec::new();
        for img in self.images.values() {
            if !self.cameras.contains_key(&img.camera_id) {
                issues.push(IntegrityIssue::ImageMissingCamera {
                    image_id: img.image_id,
                    camera_id: img.camera_id,
                });
            }
            let norm = img.qvec.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                issues.push(IntegrityIssue::NonUnitQuaternion {
                    image_id: img.image_id,
                    norm,
                });
            }
            for (i, obs) in img.observations.iter().enumerate() {
                if let Some(pid) = obs.point3d_id {
                    if !self.points.contains_key(&pid) {
                        issues.push(IntegrityIssue::ObservationMissingPoint {
                            image_id: img.image_id,
                            observation: i,
                            point_id: pid,
                        });
                    }
                }
            }
        }
        for p in self.points.values() {
            for el in &p.track {
                match self.images.get(&el.image_id) {
                    None => issues.push(IntegrityIssue::TrackMissingImage {
                        point_id: p.point_id,
                        image_id: el.image_id,
                    }),
                    Some(img) if el.point2d_idx as usize >= img.observations.len() => {
                        issues.push(IntegrityIssue::TrackBadObservation {
                            point_id: p.point_id,
                            image_id: el.image_id,
                            point2d_idx: el.point2d_idx,
                        })
                    }
                    Some(_) => {}
                }
            }
            if p.track.len() < 2 {
                issues.push(IntegrityIssue::DegenerateTrack {
                    point_id: p.point_id,
                    length: p.track.len(),
                });
            }
        }
        issues
    }

    pub fn camera_of(&self, image_id: u32) -> Option<&Camera> {
        self.images
            .get(&image_id)
            .and_then(|img| self.cameras.get(&img.camera_id))
    }

    /// Distinct image ids in a point's track, ascending.
    pub fn track_images(&self, point_id: u64) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .points
            .get(&point_id)
            .map(|p| p.track.iter().map(|t| t.image_id).collect())
            .unwrap_or_default();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Sub-model restricted to the given images and points. Tracks lose
    /// entries for dropped images; observations of dropped points become
    /// sentinels so observation indices stay valid.
    pub fn subset(&self, image_ids: &HashSet<u32>, point_ids: &HashSet<u64>) -> SparseModel {
        let images: IndexMap<u32, ImageRecord> = self
            .images
            .values()
            .filter(|img| image_ids.contains(&img.image_id))
            .map(|img| {
                let mut img = img.clone();
                for obs in &mut img.observations {
                    if obs.point3d_id.is_some_and(|p| !point_ids.contains(&p)) {
                        obs.point3d_id = None;
                    }
                }
                (img.image_id, img)
            })
            .collect();
        let camera_ids: HashSet<u32> = images.values().map(|i| i.camera_id).collect();
        let cameras = self
            .cameras
            .iter()
            .filter(|(id, _)| camera_ids.contains(id))
            .map(|(id, c)| (*id, c.clone()))
            .collect();
        let points = self
            .points
            .values()
            .filter(|p| point_ids.contains(&p.point_id))
            .map(|p| {
                let mut p = p.clone();
                p.track.retain(|t| images.contains_key(&t.image_id));
                (p.point_id, p)
            })
            .collect();
        SparseModel {
            cameras,
            images,
            points,
        }
    }

    /// Applies a rigid world transform to points and camera poses.
    pub fn transformed(&self, iso: &Isometry3<f64>) -> SparseModel {
        let mut out = self.clone();
        for p in out.points.values_mut() {
            let q = iso * p.position();
            p.xyz = [q.x, q.y, q.z];
        }
        let r = iso.rotation.to_rotation_matrix();
        for img in out.images.values_mut() {
            let pose = img.pose();
            let rot = pose.rotation * r.transpose();
            let t = pose.translation - rot * iso.translation.vector;
            let new = Pose::new(rot, t);
            img.qvec = new.quaternion();
            img.tvec = new.translation.into();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model() -> SparseModel {
        let mut m = SparseModel::default();
        m.cameras.insert(
            1,
            Camera {
                camera_id: 1,
                model: CameraModel::Pinhole,
                width: 100,
                height: 80,
                params: vec![90.0, 91.0, 50.0, 40.0],
            },
        );
        for (id, tx) in [(1u32, 0.0), (2, -1.0)] {
            m.images.insert(
                id,
                ImageRecord {
                    image_id: id,
                    camera_id: 1,
                    qvec: [1.0, 0.0, 0.0, 0.0],
                    tvec: [tx, 0.0, 0.0],
                    name: format!("img_{id}.jpg"),
                    observations: vec![
                        Observation {
                            x: 50.0 + 10.0 * tx,
                            y: 40.0,
                            point3d_id: Some(7),
                        },
                        Observation {
                            x: 1.5,
                            y: 2.25,
                            point3d_id: None,
                        },
                    ],
                },
            );
        }
        m.points.insert(
            7,
            Point3D {
                point_id: 7,
                xyz: [0.0, 0.0, 9.0],
                color: [10, 20, 30],
                error: 0.5,
                track: vec![
                    TrackElement {
                        image_id: 1,
                        point2d_idx: 0,
                    },
                    TrackElement {
                        image_id: 2,
                        point2d_idx: 0,
                    },
                ],
            },
        );
        m
    }

    #[test]
    fn model_ids_round_trip() {
        for m in ALL_MODELS {
            assert_eq!(CameraModel::from_id(m.id()), Some(m));
            assert_eq!(CameraModel::from_name(m.name()), Some(m));
        }
        assert_eq!(CameraModel::from_id(11), None);
        assert_eq!(CameraModel::from_id(-1), None);
    }

    #[test]
    fn radial_cameras_are_carried_but_not_projected() {
        let cam = Camera {
            camera_id: 3,
            model: CameraModel::SimpleRadial,
            width: 10,
            height: 10,
            params: vec![8.0, 5.0, 5.0, 0.01],
        };
        assert!(cam.check().is_ok());
        assert_eq!(cam.fy(), 8.0);
        assert!(matches!(
            cam.intrinsics(),
            Err(ProjectionError::UnsupportedCamera(_))
        ));
    }

    #[test]
    fn stats_examples() {
        let mut m = SparseModel::default();
        let s = model_stats(&m);
        assert_eq!((s.num_images, s.num_points), (0, 0));
        assert_eq!(s.mean_reproj_error, 0.0);
        assert!(s.bounds.is_none());

        for (id, xyz, err) in [(1u64, [0.0, 0.0, 0.0], 1.0), (2, [2.0, 4.0, 6.0], 3.0)] {
            m.points.insert(
                id,
                Point3D {
                    point_id: id,
                    xyz,
                    color: [0; 3],
                    error: err,
                    track: vec![],
                },
            );
        }
        let s = model_stats(&m);
        assert_eq!(s.mean_reproj_error, 2.0);
        let b = s.bounds.unwrap();
        assert_eq!(b.min, [0.0, 0.0, 0.0]);
        assert_eq!(b.max, [2.0, 4.0, 6.0]);
    }

    #[test]
    fn validate_reports_each_dangling_reference_once() {
        let mut m = tiny_model();
        assert!(m.validate().is_empty());
        m.images[0].observations[1].point3d_id = Some(99);
        m.images[1].observations.push(Observation {
            x: 0.0,
            y: 0.0,
            point3d_id: Some(99),
        });
        m.points[0].track.push(TrackElement {
            image_id: 42,
            point2d_idx: 0,
        });
        let issues = m.validate();
        let dangling: Vec<_> = issues.iter().filter(|i| i.is_dangling()).collect();
        assert_eq!(dangling.len(), 3);
        assert!(issues.contains(&IntegrityIssue::TrackMissingImage {
            point_id: 7,
            image_id: 42
        }));
    }

    #[test]
    fn degenerate_track_is_flagged_not_dropped() {
        let mut m = tiny_model();
        m.points[0].track.truncate(1);
        let issues = m.validate();
        assert_eq!(
            issues,
            vec![IntegrityIssue::DegenerateTrack {
                point_id: 7,
                length: 1
            }]
        );
        assert_eq!(m.points.len(), 1);
    }

    #[test]
    fn strict_write_rejects_dangling_model() {
        let mut m = tiny_model();
        m.points[0].track[1].image_id = 5;
        let dir = tempfile::tempdir().unwrap();
        let err = write_sparse_model(&m, dir.path(), ModelFormat::Binary).unwrap_err();
        assert!(matches!(err, ColmapError::IntegrityViolation(v) if v.len() == 1));
        write_sparse_model_with(&m, dir.path(), ModelFormat::Binary, IntegrityPolicy::Passthrough)
            .unwrap();
    }

    #[test]
    fn text_example_counts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("cameras.txt"),
            "# Camera list\n1 PINHOLE 100 80 90 91 50 40\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("images.txt"),
            "# Image list\n1 1 0 0 0 0 0 0 1 a.jpg\n50 40 7\n2 1 0 0 0 -1 0 0 1 b.jpg\n40 40 7\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("points3D.txt"),
            "# 3D point list\n7 0 0 9 10 20 30 0.5 1 0 2 0\n",
        )
        .unwrap();
        let parsed = parse_sparse_model(dir.path(), ModelFormat::Auto).unwrap();
        let m = &parsed.model;
        assert_eq!((m.cameras.len(), m.images.len(), m.points.len()), (1, 2, 1));
        assert!(parsed.issues.is_empty());
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_sparse_model(&tiny_model(), dir.path(), ModelFormat::Binary).unwrap();
        std::fs::remove_file(dir.path().join("points3D.bin")).unwrap();
        let err = parse_sparse_model(dir.path(), ModelFormat::Binary).unwrap_err();
        assert!(matches!(err, ColmapError::MissingFile(p) if p.ends_with("points3D.bin")));
        let err = parse_sparse_model(dir.path(), ModelFormat::Auto).unwrap_err();
        assert!(matches!(err, ColmapError::MissingFile(_)));
    }

    #[test]
    fn empty_model_writes_zero_records() {
        let dir = tempfile::tempdir().unwrap();
        write_sparse_model(&SparseModel::default(), dir.path(), ModelFormat::Binary).unwrap();
        for f in FILES {
            let bytes = std::fs::read(dir.path().join(format!("{f}.bin"))).unwrap();
            assert_eq!(bytes, 0u64.to_le_bytes());
        }
        let parsed = parse_sparse_model(dir.path(), ModelFormat::Auto).unwrap();
        assert_eq!(parsed.model, SparseModel::default());
    }

    #[test]
    fn subset_drops_foreign_references() {
        let m = tiny_model();
        let sub = m.subset(&HashSet::from([1]), &HashSet::from([7]));
        assert_eq!(sub.images.len(), 1);
        assert_eq!(sub.points[0].track.len(), 1);
        assert!(sub.validate().iter().all(|i| !i.is_dangling()));
    }

    #[test]
    fn rigid_transform_preserves_projections() {
        let m = tiny_model();
        let iso = Isometry3::new(
            nalgebra::Vector3::new(1.0, -2.0, 0.5),
            nalgebra::Vector3::new(0.1, 0.4, -0.2),
        );
        let t = m.transformed(&iso);
        for (a, b) in m.images.values().zip(t.images.values()) {
            let pa = a.pose().to_camera(&m.points[0].position());
            let pb = b.pose().to_camera(&t.points[0].position());
            assert!((pa - pb).norm() < 1e-9);
        }
    }
}

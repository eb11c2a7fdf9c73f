//! Multi-view depth kernel: ray depth aggregation, cross-view depth
//! consistency, weighted depth fusion, adaptive densification windows,
//! back-projection, normal consistency and loss composition.

use std::path::Path;

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::Camera;
use crate::geometry::{Intrinsics, Pose, ProjectionError};
use crate::pfm::{FloatImage, PfmError};

#[derive(Debug, Error)]
pub enum DepthError {
    #[error("pixel projects outside the source image or behind the source camera")]
    OutOfSourceFrustum,
    #[error("source depth is invalid around the projected pixel")]
    InvalidSourceDepth,
    #[error("reference pixel ({0}, {1}) has no valid depth")]
    InvalidReferenceDepth(usize, usize),
    #[error("normal vector has zero length")]
    ZeroNormal,
    #[error("loss term {0} is not finite")]
    NonFinite(&'static str),
    #[error("ray samples: {0}")]
    InvalidSamples(String),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Pfm(#[from] PfmError),
}

/// One sample along a camera ray.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaySample {
    pub depth: f64,
    pub weight: f64,
    pub transmittance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaySamples {
    samples: Vec<RaySample>,
    pub epsilon: f64,
}

impl RaySamples {
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(samples: Vec<RaySample>) -> Result<Self, DepthError> {
        Self::with_epsilon(samples, Self::DEFAULT_EPSILON)
    }

    pub fn with_epsilon(samples: Vec<RaySample>, epsilon: f64) -> Result<Self, DepthError> {
        if !(epsilon > 0.0) {
            return Err(DepthError::InvalidSamples("epsilon must be > 0".into()));
        }
        if samples.windows(2).any(|w| !(w[0].depth <= w[1].depth)) {
            return Err(DepthError::InvalidSamples("depths must be ascending".into()));
        }
        for s in &samples {
            if !(s.weight >= 0.0) {
                return Err(DepthError::InvalidSamples("weights must be >= 0".into()));
            }
            if !(0.0..=1.0).contains(&s.transmittance) {
                return Err(DepthError::InvalidSamples(
                    "transmittance must lie in [0, 1]".into(),
                ));
            }
        }
        Ok(Self { samples, epsilon })
    }

    pub fn samples(&self) -> &[RaySample] {
        &self.samples
    }
}

/// `sum(w z) / (sum(w) + eps)`.
pub fn ray_depth_mean(rays: &RaySamples) -> f64 {
    let (num, den) = rays
        .samples
        .iter()
        .fold((0.0, 0.0), |(n, d), s| (n + s.weight * s.depth, d + s.weight));
    num / (den + rays.epsilon)
}

/// Deepest sample still more than half visible; `None` if there is none.
pub fn ray_depth_median(rays: &RaySamples) -> Option<f64> {
    rays.samples
        .iter()
        .filter(|s| s.transmittance > 0.5)
        .map(|s| s.depth)
        .reduce(f64::max)
}

/// Per-pixel camera-frame depth with a validity mask. Pixel `(col, row)` is
/// stored at `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Values that are not finite and positive are marked invalid.
    pub fn new(intrinsics: Intrinsics, pose: Pose, values: Vec<f64>) -> Result<Self, DepthError> {
        let n = intrinsics.pixel_count();
        if values.len() != n {
            return Err(DepthError::DimensionMismatch {
                expected: n,
                got: values.len(),
            });
        }
        let valid = values.iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Ok(Self {
            intrinsics,
            pose,
            values,
            valid,
        })
    }

    pub fn from_camera(camera: &Camera, pose: Pose, values: Vec<f64>) -> Result<Self, DepthError> {
        Self::new(camera.intrinsics()?, pose, values)
    }

    pub fn filled(intrinsics: Intrinsics, pose: Pose, depth: f64) -> Self {
        Self::new(intrinsics, pose, vec![depth; intrinsics.pixel_count()])
            .expect("length matches by construction")
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, col: usize, row: usize) -> Option<f64> {
        let i = row * self.width() + col;
        self.valid[i].then(|| self.values[i])
    }

    pub fn is_valid(&self, col: usize, row: usize) -> bool {
        self.valid[row * self.width() + col]
    }

    pub fn invalidate(&mut self, col: usize, row: usize) {
        let i = row * self.width() + col;
        self.valid[i] = false;
        self.values[i] = 0.0;
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Bilinear interpolation at a continuous pixel position, using only the
    /// valid neighbours and renormalizing their weights.
    pub fn sample_bilinear(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = (self.width() as i64, self.height() as i64);
        let (c0, r0) = (u.floor() as i64, v.floor() as i64);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let mut num = 0.0;
        let mut den = 0.0;
        for (dc, dr, wt) in [
            (0, 0, (1.0 - fu) * (1.0 - fv)),
            (1, 0, fu * (1.0 - fv)),
            (0, 1, (1.0 - fu) * fv),
            (1, 1, fu * fv),
        ] {
            let (c, r) = (c0 + dc, r0 + dr);
            if c < 0 || r < 0 || c >= w || r >= h || wt == 0.0 {
                continue;
            }
            if let Some(d) = self.get(c as usize, r as usize) {
                num += wt * d;
                den += wt;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// World point seen at pixel `(col, row)`, if the pixel is valid.
    pub fn world_point(&self, col: usize, row: usize) -> Option<Point3<f64>> {
        let d = self.get(col, row)?;
        Some(
            self.pose
                .to_world(&self.intrinsics.unproject(col as f64, row as f64, d)),
        )
    }

    pub fn to_pfm(&self) -> FloatImage {
        FloatImage {
            width: self.width(),
            height: self.height(),
            channels: 1,
            data: self
                .values
                .iter()
                .zip(&self.valid)
                .map(|(d, ok)| if *ok { *d as f32 } else { 0.0 })
                .collect(),
        }
    }

    pub fn from_pfm(img: &FloatImage, intrinsics: Intrinsics, pose: Pose) -> Result<Self, DepthError> {
        if img.channels != 1 || img.width != intrinsics.width as usize || img.height != intrinsics.height as usize {
            return Err(DepthError::DimensionMismatch {
                expected: intrinsics.pixel_count(),
                got: img.width * img.height * img.channels,
            });
        }
        Self::new(intrinsics, pose, img.data.iter().map(|v| *v as f64).collect())
    }

    pub fn write_pfm(&self, path: &Path) -> Result<(), DepthError> {
        Ok(self.to_pfm().write(path)?)
    }
}

/// Camera-frame unit normals with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalMap {
    pub width: usize,
    pub height: usize,
    normals: Vec<Vector3<f64>>,
    valid: Vec<bool>,
}

impl NormalMap {
    /// Normalizes every vector; zero or non-finite vectors become invalid.
    pub fn new(width: usize, height: usize, normals: Vec<Vector3<f64>>) -> Result<Self, DepthError> {
        if normals.len() != width * height {
            return Err(DepthError::DimensionMismatch {
                expected: width * height,
                got: normals.len(),
            });
        }
        let mut valid = Vec::with_capacity(normals.len());
        let normals = normals
            .into_iter()
            .map(|n| {
                let len = n.norm();
                let ok = len > 0.0 && len.is_finite();
                valid.push(ok);
                if ok {
                    n / len
                } else {
                    Vector3::zeros()
                }
            })
            .collect();
        Ok(Self {
            width,
            height,
            normals,
            valid,
        })
    }

    pub fn get(&self, col: usize, row: usize) -> Option<Vector3<f64>> {
        let i = row * self.width + col;
        self.valid[i].then(|| self.normals[i])
    }

    pub fn to_pfm(&self) -> FloatImage {
        FloatImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self
                .normals
                .iter()
                .flat_map(|n| [n.x as f32, n.y as f32, n.z as f32])
                .collect(),
        }
    }

    pub fn from_pfm(img: &FloatImage) -> Result<Self, DepthError> {
        if img.channels != 3 {
            return Err(DepthError::DimensionMismatch {
                expected: img.width * img.height * 3,
                got: img.data.len(),
            });
        }
        let normals = img
            .data
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
            .collect();
        Self::new(img.width, img.height, normals)
    }
}

/// How a sampled source depth is compared with the reference depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthTransfer {
    /// Lift the sampled source depth to a world point and take its
    /// reference-frame depth.
    #[default]
    ReferenceFrame,
    /// Compare the raw source depth value.
    Raw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub sigma: f64,
    /// Sources with a larger depth error are dropped; defaults to `3 * sigma`.
    pub max_error: Option<f64>,
    pub k: f64,
    pub window_eps: f64,
    /// Use `exp(-E^2 / sigma^2)` instead of `exp(-E / sigma^2)`.
    pub squared_error: bool,
    pub transfer: DepthTransfer,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0,
            max_error: None,
            k: 0.01,
            window_eps: 1e-4,
            squared_error: false,
            transfer: DepthTransfer::ReferenceFrame,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), DepthError> {
        let bad = |m: &str| Err(DepthError::InvalidConfig(m.to_string()));
        if !(self.sigma > 0.0) {
            return bad("sigma must be > 0");
        }
        if !(self.k > 0.0) {
            return bad("k must be > 0");
        }
        if !(self.window_eps > 0.0) {
            return bad("window_eps must be > 0");
        }
        if let Some(m) = self.max_error {
            if !(m >= 0.0) {
                return bad("max_error must be >= 0");
            }
        }
        Ok(())
    }

    pub fn effective_max_error(&self) -> f64 {
        self.max_error.unwrap_or(3.0 * self.sigma)
    }

    pub fn weight(&self, error: f64) -> f64 {
        let e = if self.squared_error { error * error } else { error };
        (-e / (self.sigma * self.sigma)).exp()
    }
}

/// A reference pixel carried into a source view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reprojection {
    pub src_pixel: (f64, f64),
    /// Source depth expressed per the transfer mode.
    pub src_depth: f64,
    pub error: f64,
}

pub fn depth_reprojection_error(
    reference: &DepthMap,
    source: &DepthMap,
    pixel: (usize, usize),
    transfer: DepthTransfer,
) -> Result<Reprojection, DepthError> {
    let (col, row) = pixel;
    let d_ref = reference
        .get(col, row)
        .ok_or(DepthError::InvalidReferenceDepth(col, row))?;
    let world = reference
        .pose
        .to_world(&reference.intrinsics.unproject(col as f64, row as f64, d_ref));
    let cam = source.pose.to_camera(&world);
    let (u, v) = source
        .intrinsics
        .project(&cam)
        .map_err(|_| DepthError::OutOfSourceFrustum)?;
    if !source.intrinsics.contains(u, v) {
        return Err(DepthError::OutOfSourceFrustum);
    }
    let d_src = source
        .sample_bilinear(u, v)
        .ok_or(DepthError::InvalidSourceDepth)?;
    let src_depth = match transfer {
        DepthTransfer::Raw => d_src,
        DepthTransfer::ReferenceFrame => {
            let lifted = source.pose.to_world(&source.intrinsics.unproject(u, v, d_src));
            reference.pose.to_camera(&lifted).z
        }
    };
    Ok(Reprojection {
        src_pixel: (u, v),
        src_depth,
        error: (d_ref - src_depth).abs(),
    })
}

/// Fused depth with per-pixel aggregate weight and per-source errors.
#[derive(Debug, Clone)]
pub struct FusedDepth {
    pub depth: DepthMap,
    pub weight: Vec<f64>,
    /// `errors[source][pixel]`; `None` where the source could not be compared.
    pub errors: Vec<Vec<Option<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionStats {
    pub pixels: usize,
    pub valid_fraction: f64,
    pub mean_weight: f64,
    pub mean_error: f64,
}

impl FusedDepth {
    pub fn stats(&self) -> FusionStats {
        let n = self.weight.len();
        let valid: Vec<f64> = self.weight.iter().copied().filter(|w| *w > 0.0).collect();
        let errs: Vec<f64> = self.errors.iter().flatten().flatten().copied().collect();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        FusionStats {
            pixels: n,
            valid_fraction: if n == 0 { 0.0 } else { valid.len() as f64 / n as f64 },
            mean_weight: mean(&valid),
            mean_error: mean(&errs),
        }
    }
}

/// Consistency-weighted fusion of source depths into the reference view.
pub fn fuse_depth(
    reference: &DepthMap,
    sources: &[DepthMap],
    cfg: &FusionConfig,
) -> Result<FusedDepth, DepthError> {
    cfg.validate()?;
    let (w, h) = (reference.width(), reference.height());
    let max_error = cfg.effective_max_error();
    let rows: Vec<Vec<(f64, f64, Vec<Option<f64>>)>> = (0..h)
        .into_par_iter()
        .map(|row| {
            (0..w)
                .map(|col| {
                    let mut num = 0.0;
                    let mut den = 0.0;
                    let mut errs = Vec::with_capacity(sources.len());
                    if !reference.is_valid(col, row) {
                        errs.resize(sources.len(), None);
                        return (0.0, 0.0, errs);
                    }
                    for src in sources {
                        match depth_reprojection_error(reference, src, (col, row), cfg.transfer) {
                            Ok(r) => {
                                errs.push(Some(r.error));
                                if r.error <= max_error {
                                    let wt = cfg.weight(r.error);
                                    num += wt * r.src_depth;
                                    den += wt;
                                }
                            }
                            Err(_) => errs.push(None),
                        }
                    }
                    if den > 0.0 {
                        (num / den, den, errs)
                    } else {
                        (0.0, 0.0, errs)
                    }
                })
                .collect()
        })
        .collect();

    let n = w * h;
    let mut values = Vec::with_capacity(n);
    let mut weight = Vec::with_capacity(n);
    let mut errors = vec![Vec::with_capacity(n); sources.len()];
    for (d, wt, errs) in rows.into_iter().flatten() {
        values.push(d);
        weight.push(wt);
        for (k, e) in errs.into_iter().enumerate() {
            errors[k].push(e);
        }
    }
    let depth = DepthMap::new(reference.intrinsics, reference.pose, values)?;
    Ok(FusedDepth {
        depth,
        weight,
        errors,
    })
}

/// Mean gradient magnitude over all `h * w` pixels. Central differences
/// where both neighbours are valid, one-sided otherwise; invalid pixels
/// contribute 0.
pub fn mean_depth_gradient(depth: &DepthMap) -> f64 {
    let (w, h) = (depth.width(), depth.height());
    if w * h == 0 {
        return 0.0;
    }
    let diff = |here: f64, prev: Option<f64>, next: Option<f64>| match (prev, next) {
        (Some(p), Some(n)) => 0.5 * (n - p),
        (None, Some(n)) => n - here,
        (Some(p), None) => here - p,
        (None, None) => 0.0,
    };
    let mut total = 0.0;
    for row in 0..h {
        for col in 0..w {
            let Some(d) = depth.get(col, row) else {
                continue;
            };
            let left = (col > 0).then(|| depth.get(col - 1, row)).flatten();
            let right = (col + 1 < w).then(|| depth.get(col + 1, row)).flatten();
            let up = (row > 0).then(|| depth.get(col, row - 1)).flatten();
            let down = (row + 1 < h).then(|| depth.get(col, row + 1)).flatten();
            let gx = diff(d, left, right);
            let gy = diff(d, up, down);
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / (w * h) as f64
}

/// Centered rectangle of pixels eligible for densification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub col0: usize,
    pub row0: usize,
    pub width: usize,
    pub height: usize,
}

impl Window {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        col >= self.col0 && col < self.col0 + self.width && row >= self.row0 && row < self.row0 + self.height
    }

    pub fn centered(img_w: usize, img_h: usize, width: usize, height: usize) -> Self {
        Self {
            col0: (img_w - width) / 2,
            row0: (img_h - height) / 2,
            width,
            height,
        }
    }
}

/// Unclamped window size `k / (g + eps) * (h, w) / 2`.
pub fn raw_window_size(g: f64, h: usize, w: usize, k: f64, eps: f64) -> (f64, f64) {
    let f = k / (g + eps);
    (f * h as f64 / 2.0, f * w as f64 / 2.0)
}

/// `(height, width)` rounded half up and clamped to `[1, h] x [1, w]`.
pub fn window_size(g: f64, h: usize, w: usize, k: f64, eps: f64) -> (usize, usize) {
    let (rh, rw) = raw_window_size(g, h, w, k, eps);
    let round = |x: f64, hi: usize| {
        let r = (x + 0.5).floor();
        if r.is_nan() {
            1
        } else {
            (r.max(1.0).min(hi.max(1) as f64)) as usize
        }
    };
    (round(rh, h), round(rw, w))
}

pub fn adaptive_window(depth: &DepthMap, cfg: &FusionConfig) -> Window {
    let g = mean_depth_gradient(depth);
    let (h, w) = (depth.height(), depth.width());
    let (wh, ww) = window_size(g, h, w, cfg.k, cfg.window_eps);
    Window::centered(w, h, ww, wh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowPoint {
    pub position: Point3<f64>,
    pub pixel: (usize, usize),
    pub color: Option<[u8; 3]>,
}

/// World points for every valid pixel inside the window, row-major order.
pub fn backproject_window(
    depth: &DepthMap,
    window: &Window,
    colors: Option<&image::RgbImage>,
) -> Result<Vec<WindowPoint>, DepthError> {
    if let Some(img) = colors {
        if img.width() as usize != depth.width() || img.height() as usize != depth.height() {
            return Err(DepthError::DimensionMismatch {
                expected: depth.intrinsics.pixel_count(),
                got: (img.width() * img.height()) as usize,
            });
        }
    }
    let mut out = Vec::new();
    for row in window.row0..window.row0 + window.height {
        for col in window.col0..window.col0 + window.width {
            if let Some(p) = depth.world_point(col, row) {
                out.push(WindowPoint {
                    position: p,
                    pixel: (col, row),
                    color: colors.map(|img| img.get_pixel(col as u32, row as u32).0),
                });
            }
        }
    }
    Ok(out)
}

/// `1 - cos` of the angle between the two vectors.
pub fn normal_consistency_error(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64, DepthError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(DepthError::ZeroNormal);
    }
    Ok(1.0 - a.dot(b) / (na * nb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), DepthError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(DepthError::InvalidConfig("alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn compose_loss(
    e_depth: f64,
    e_normal: f64,
    l_geo: f64,
    l_rgb: f64,
    w: &LossWeights,
) -> Result<f64, DepthError> {
    for (name, v) in [
        ("e_depth", e_depth),
        ("e_normal", e_normal),
        ("l_geo", l_geo),
        ("l_rgb", l_rgb),
    ] {
        if !v.is_finite() {
            return Err(DepthError::NonFinite(name));
        }
    }
    Ok(w.alpha * e_depth + w.beta * e_normal + l_geo + l_rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rays(v: &[(f64, f64, f64)]) -> RaySamples {
        RaySamples::new(
            v.iter()
                .map(|&(depth, weight, transmittance)| RaySample {
                    depth,
                    weight,
                    transmittance,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ray_mean_examples() {
        assert!((ray_depth_mean(&rays(&[(1.0, 0.5, 1.0), (3.0, 0.5, 1.0)])) - 2.0).abs() < 1e-7);
        assert_eq!(ray_depth_mean(&rays(&[(5.0, 1.0, 1.0)])), 5.0 / (1.0 + 1e-8));
        assert_eq!(ray_depth_mean(&rays(&[(1.0, 0.0, 1.0), (2.0, 0.0, 1.0)])), 0.0);
        assert_eq!(ray_depth_mean(&rays(&[])), 0.0);
    }

    #[test]
    fn ray_median_examples() {
        let r = rays(&[(1.0, 1.0, 0.9), (2.0, 1.0, 0.6), (3.0, 1.0, 0.4)]);
        assert_eq!(ray_depth_median(&r), Some(2.0));
        assert_eq!(ray_depth_median(&rays(&[(7.0, 1.0, 1.0)])), Some(7.0));
        assert_eq!(ray_depth_median(&rays(&[(1.0, 1.0, 0.5), (2.0, 1.0, 0.1)])), None);
    }

    #[test]
    fn samples_are_validated() {
        let bad = RaySamples::new(vec![
            RaySample { depth: 2.0, weight: 1.0, transmittance: 1.0 },
            RaySample { depth: 1.0, weight: 1.0, transmittance: 1.0 },
        ]);
        assert!(matches!(bad, Err(DepthError::InvalidSamples(_))));
    }

    fn k16() -> Intrinsics {
        Intrinsics::new(16, 16, 20.0, 20.0, 7.5, 7.5)
    }

    fn translated(x: f64) -> Pose {
        // camera center at (x, 0, 0), looking down +z
        Pose::new(nalgebra::Rotation3::identity(), Vector3::new(-x, 0.0, 0.0))
    }

    #[test]
    fn identical_views_have_zero_error() {
        let a = DepthMap::filled(k16(), Pose::identity(), 4.0);
        for (col, row) in [(0, 0), (7, 8), (15, 15)] {
            let r = depth_reprojection_error(&a, &a, (col, row), DepthTransfer::ReferenceFrame).unwrap();
            assert_eq!(r.error, 0.0);
        }
    }

    #[test]
    fn plane_seen_from_translated_camera() {
        let a = DepthMap::filled(k16(), Pose::identity(), 5.0);
        let b = DepthMap::filled(k16(), translated(0.3), 5.0);
        let r = depth_reprojection_error(&a, &b, (8, 8), DepthTransfer::ReferenceFrame).unwrap();
        assert!(r.error < 1e-5);
        // 0.3 m baseline at 5 m with f = 20 px shifts the pixel by 1.2 px
        assert!((r.src_pixel.0 - (8.0 - 1.2)).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_gives_offset_error() {
        let a = DepthMap::filled(k16(), Pose::identity(), 4.0);
        let b = DepthMap::filled(k16(), Pose::identity(), 4.25);
        for mode in [DepthTransfer::Raw, DepthTransfer::ReferenceFrame] {
            let r = depth_reprojection_error(&a, &b, (3, 9), mode).unwrap();
            assert!((r.error - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn frustum_and_validity_errors() {
        let a = DepthMap::filled(k16(), Pose::identity(), 4.0);
        let far = DepthMap::filled(k16(), translated(100.0), 4.0);
        assert!(matches!(
            depth_reprojection_error(&a, &far, (8, 8), DepthTransfer::Raw),
            Err(DepthError::OutOfSourceFrustum)
        ));
        let empty = DepthMap::filled(k16(), Pose::identity(), 0.0);
        assert!(matches!(
            depth_reprojection_error(&a, &empty, (8, 8), DepthTransfer::Raw),
            Err(DepthError::InvalidSourceDepth)
        ));
    }

    #[test]
    fn bilinear_skips_invalid_neighbours() {
        let mut m = DepthMap::filled(Intrinsics::new(2, 2, 1.0, 1.0, 0.5, 0.5), Pose::identity(), 2.0);
        m.invalidate(1, 1);
        assert_eq!(m.sample_bilinear(0.5, 0.5), Some(2.0));
        m.invalidate(0, 0);
        m.invalidate(1, 0);
        m.invalidate(0, 1);
        assert_eq!(m.sample_bilinear(0.5, 0.5), None);
    }

    #[test]
    fn fusion_of_consistent_sources() {
        let r = DepthMap::filled(k16(), Pose::identity(), 3.0);
        let srcs = vec![r.clone(), r.clone(), r.clone()];
        let f = fuse_depth(&r, &srcs, &FusionConfig::default()).unwrap();
        assert!(f.depth.values().iter().all(|d| *d == 3.0));
        assert!(f.weight.iter().all(|w| *w == 3.0));
        assert_eq!(f.stats().valid_fraction, 1.0);
    }

    #[test]
    fn fusion_weights_follow_exponential() {
        // reference at 2; sources sample 2 and 4, errors 0 and 2 = sigma^2
        let cfg = FusionConfig {
            sigma: 2f64.sqrt(),
            ..Default::default()
        };
        let r = DepthMap::filled(k16(), Pose::identity(), 2.0);
        let s0 = DepthMap::filled(k16(), Pose::identity(), 2.0);
        let s1 = DepthMap::filled(k16(), Pose::identity(), 4.0);
        let f = fuse_depth(&r, &[s0, s1], &cfg).unwrap();
        let e = (-1.0f64).exp();
        let expected = (1.0 * 2.0 + e * 4.0) / (1.0 + e);
        assert!((f.depth.get(4, 4).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn out_of_frustum_everywhere_invalidates() {
        let r = DepthMap::filled(k16(), Pose::identity(), 2.0);
        let far = DepthMap::filled(k16(), translated(1000.0), 2.0);
        let f = fuse_depth(&r, &[far.clone(), far.clone(), far], &FusionConfig::default()).unwrap();
        assert_eq!(f.depth.valid_count(), 0);
    }

    #[test]
    fn gradient_examples() {
        assert_eq!(mean_depth_gradient(&DepthMap::filled(k16(), Pose::identity(), 2.0)), 0.0);
        let k4 = Intrinsics::new(4, 4, 1.0, 1.0, 1.5, 1.5);
        let c = 0.3;
        let ramp: Vec<f64> = (0..16).map(|i| c * ((i % 4) as f64 + 1.0)).collect();
        let g = mean_depth_gradient(&DepthMap::new(k4, Pose::identity(), ramp).unwrap());
        assert!((g - c).abs() < 1e-12);
        let one = Intrinsics::new(1, 1, 1.0, 1.0, 0.0, 0.0);
        assert_eq!(mean_depth_gradient(&DepthMap::filled(one, Pose::identity(), 5.0)), 0.0);
    }

    #[test]
    fn window_examples() {
        assert_eq!(window_size(0.0, 100, 100, 0.01, 1e-4), (100, 100));
        assert_eq!(window_size(0.0099, 100, 100, 0.01, 1e-4), (50, 50));
        let w = Window::centered(100, 100, 50, 50);
        assert_eq!((w.col0, w.row0), (25, 25));
        assert!(w.contains(25, 74) && !w.contains(75, 50));
        // half rounds up
        assert_eq!(window_size(0.0099, 5, 5, 0.01, 1e-4), (3, 3));
    }

    #[test]
    fn backprojection_examples() {
        let k = Intrinsics::new(9, 9, 10.0, 10.0, 4.0, 4.0);
        let d = DepthMap::filled(k, Pose::identity(), 6.0);
        let w = Window::centered(9, 9, 1, 1);
        let pts = backproject_window(&d, &w, None).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].position, Point3::new(0.0, 0.0, 6.0));
        assert_eq!(pts[0].pixel, (4, 4));
        let full = backproject_window(&d, &Window::centered(9, 9, 9, 9), None).unwrap();
        assert_eq!(full.len(), 81);
    }

    #[test]
    fn backprojection_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let k = Intrinsics::new(32, 24, 30.0, 31.0, 15.2, 11.7);
        let pose = Pose::look_at(&Point3::new(1.0, 2.0, -3.0), &Point3::origin(), &Vector3::y());
        let values: Vec<f64> = (0..k.pixel_count()).map(|_| rng.random_range(1.0..10.0)).collect();
        let d = DepthMap::new(k, pose, values).unwrap();
        let pts = backproject_window(&d, &Window::centered(32, 24, 32, 24), None).unwrap();
        for p in pts {
            let (u, v) = k.project(&pose.to_camera(&p.position)).unwrap();
            assert!((u - p.pixel.0 as f64).abs() < 1e-6 && (v - p.pixel.1 as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn normal_error_examples() {
        let x = Vector3::x();
        assert_eq!(normal_consistency_error(&x, &x).unwrap(), 0.0);
        assert_eq!(normal_consistency_error(&x, &-x).unwrap(), 2.0);
        assert_eq!(normal_consistency_error(&x, &Vector3::y()).unwrap(), 1.0);
        assert!(matches!(
            normal_consistency_error(&x, &Vector3::zeros()),
            Err(DepthError::ZeroNormal)
        ));
    }

    #[test]
    fn loss_examples() {
        let w = LossWeights::default();
        assert!((compose_loss(1.0, 1.0, 0.0, 0.0, &w).unwrap() - 0.11).abs() < 1e-15);
        assert_eq!(compose_loss(0.0, 0.0, 0.0, 0.0, &w).unwrap(), 0.0);
        assert!(matches!(
            compose_loss(f64::NAN, 0.0, 0.0, 0.0, &w),
            Err(DepthError::NonFinite("e_depth"))
        ));
    }

    #[test]
    fn pfm_round_trip_of_maps() {
        let k = Intrinsics::new(3, 2, 1.0, 1.0, 1.0, 0.5);
        let d = DepthMap::new(k, Pose::identity(), vec![1.0, 0.0, 2.5, -1.0, 3.0, 4.0]).unwrap();
        let back = DepthMap::from_pfm(&FloatImage::decode(&d.to_pfm().encode().unwrap()).unwrap(), k, Pose::identity()).unwrap();
        assert_eq!(back.valid_count(), 4);
        assert_eq!(back.get(2, 0), Some(2.5));
        let n = NormalMap::new(2, 1, vec![Vector3::new(0.0, 0.0, 2.0), Vector3::zeros()]).unwrap();
        let back = NormalMap::from_pfm(&n.to_pfm()).unwrap();
        assert_eq!(back.get(0, 0), Some(Vector3::z()));
        assert_eq!(back.get(1, 0), None);
    }

    proptest! {
        #[test]
        fn fused_depth_is_convex_combination(
            depths in prop::collection::vec(1.0f64..3.0, 3),
            reference in 1.0f64..3.0,
        ) {
            let r = DepthMap::filled(k16(), Pose::identity(), reference);
            let srcs: Vec<_> = depths.iter().map(|d| DepthMap::filled(k16(), Pose::identity(), *d)).collect();
            let f = fuse_depth(&r, &srcs, &FusionConfig::default()).unwrap();
            let lo = depths.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = depths.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = f.depth.get(5, 5).unwrap();
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }

        #[test]
        fn mean_is_scale_invariant_up_to_eps(
            // the bound holds while both weight sums are at least 1
            d in prop::collection::vec((0.1f64..10.0, 1.0f64..5.0), 1..10),
            s in 1.0f64..10.0,
        ) {
            let mut d = d;
            d.sort_by(|a, b| a.0.total_cmp(&b.0));
            let a = rays(&d.iter().map(|&(z, w)| (z, w, 1.0)).collect::<Vec<_>>());
            let b = rays(&d.iter().map(|&(z, w)| (z, w * s, 1.0)).collect::<Vec<_>>());
            let zmax = d.iter().map(|e| e.0).fold(0.0, f64::max);
            prop_assert!((ray_depth_mean(&a) - ray_depth_mean(&b)).abs() <= 1e-8 * zmax);
        }

        #[test]
        fn normal_error_symmetric_and_scale_free(
            a in prop::array::uniform3(-1.0f64..1.0),
            b in prop::array::uniform3(-1.0f64..1.0),
            s in 0.1f64..10.0,
        ) {
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            prop_assume!(a.norm() > 1e-3 && b.norm() > 1e-3);
            let e = normal_consistency_error(&a, &b).unwrap();
            prop_assert_eq!(e, normal_consistency_error(&b, &a).unwrap());
            prop_assert!((e - normal_consistency_error(&(a * s), &b).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&e));
        }

        #[test]
        fn window_shrinks_with_gradient(g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
            let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
            let a = raw_window_size(lo, 64, 48, 0.01, 1e-4);
            let b = raw_window_size(hi, 64, 48, 0.01, 1e-4);
            prop_assert!(a.0 >= b.0 && a.1 >= b.1);
        }
    }
}

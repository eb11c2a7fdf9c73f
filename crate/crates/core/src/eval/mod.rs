//! Reconstruction evaluation: overlap cropping, ICP alignment, surface
//! sampling, threshold precision/recall/F1, image metrics and DSM output.

pub mod dsm;
pub mod icp;
pub mod image_metrics;
pub mod kdtree;

use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SceneBounds;
use crate::mesh::Mesh;

pub use dsm::{generate_dsm, Dsm, DSM_NO_DATA};
pub use icp::{icp_align, IcpConfig, IcpResult};
pub use image_metrics::{psnr, ssim, Image, RenderScores, PSNR_CAP_DB};
pub use kdtree::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("the two point sets do not overlap")]
    NoOverlap,
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("cannot sample an empty mesh")]
    EmptyMesh,
    #[error("empty point set: {0}")]
    EmptyInput(&'static str),
    #[error("image dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("i/o: {0}")]
    Io(String),
}

/// A distance threshold, either in scene units or as a fraction of the
/// crop box diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    Relative(f64),
}

impl Threshold {
    pub fn resolve(&self, crop: &SceneBounds) -> f64 {
        match *self {
            Threshold::Absolute(t) => t,
            Threshold::Relative(f) => f * crop.diagonal(),
        }
    }

    fn value(&self) -> f64 {
        match *self {
            Threshold::Absolute(t) | Threshold::Relative(t) => t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub thresholds: Vec<Threshold>,
    pub sample_count: usize,
    pub icp_max_iter: usize,
    pub icp_tolerance: f64,
    pub align: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![Threshold::Absolute(0.5), Threshold::Absolute(1.0)],
            sample_count: 500_000,
            icp_max_iter: 50,
            icp_tolerance: 1e-6,
            align: true,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.thresholds.is_empty() {
            return Err(EvalError::InvalidConfig("at least one threshold is required".into()));
        }
        for t in &self.thresholds {
            if !(t.value() > 0.0 && t.value().is_finite()) {
                return Err(EvalError::InvalidConfig(format!("threshold must be positive, got {t:?}")));
            }
        }
        if self.sample_count == 0 {
            return Err(EvalError::InvalidConfig("sample_count must be positive".into()));
        }
        if !(self.icp_tolerance >= 0.0) {
            return Err(EvalError::InvalidConfig("icp_tolerance must be non-negative".into()));
        }
        Ok(())
    }

    fn icp(&self) -> IcpConfig {
        IcpConfig {
            max_iter: self.icp_max_iter,
            tolerance: self.icp_tolerance,
            ..IcpConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub threshold: Threshold,
    /// The threshold in scene units.
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scores: Vec<ThresholdScore>,
    /// Row-major 4x4 rigid transform applied to the reconstruction.
    pub alignment: [[f64; 4]; 4],
    pub icp_iterations: usize,
    pub icp_initial_rms: f64,
    pub icp_final_rms: f64,
    pub rec_samples: usize,
    pub gt_samples: usize,
    pub rec_cropped: usize,
    pub gt_cropped: usize,
    pub crop_box: SceneBounds,
}

/// Intersects the two bounding boxes and keeps the points of each set that
/// fall inside it.
pub fn overlap_crop(
    rec: &[Point3<f64>],
    gt: &[Point3<f64>],
) -> Result<(Vec<Point3<f64>>, Vec<Point3<f64>>, SceneBounds), EvalError> {
    if rec.is_empty() {
        return Err(EvalError::EmptyInput("reconstruction"));
    }
    if gt.is_empty() {
        return Err(EvalError::EmptyInput("ground truth"));
    }
    let b = SceneBounds::from_points(rec).intersection(&SceneBounds::from_points(gt));
    if b.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    let keep = |pts: &[Point3<f64>]| pts.iter().copied().filter(|p| b.contains(p)).collect::<Vec<_>>();
    let (r, g) = (keep(rec), keep(gt));
    if r.is_empty() || g.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    Ok((r, g, b))
}

/// Area-weighted uniform samples on the surface, reproducible per seed.
pub fn sample_mesh_points(mesh: &Mesh, n: usize, seed: u64) -> Result<Vec<Point3<f64>>, EvalError> {
    let mut cumulative = Vec::with_capacity(mesh.triangles.len());
    let mut total = 0.0;
    for t in 0..mesh.triangles.len() {
        total += mesh.triangle_area(t);
        cumulative.push(total);
    }
    if mesh.triangles.is_empty() || total <= 0.0 {
        return Err(EvalError::EmptyMesh);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let target = rng.random::<f64>() * total;
        let t = cumulative.partition_point(|&c| c <= target).min(cumulative.len() - 1);
        let [a, b, c] = mesh.triangle(t);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        out.push(Point3::from(a.coords * (1.0 - s) + b.coords * (s * (1.0 - r2)) + c.coords * (s * r2)));
    }
    Ok(out)
}

/// Distance from each query to its nearest neighbour in the tree.
pub fn nearest_distances(queries: &[Point3<f64>], tree: &KdTree) -> Vec<f64> {
    queries
        .par_iter()
        .map(|q| tree.nearest_distance(q).unwrap_or(f64::INFINITY))
        .collect()
}

fn fraction_below(d: &[f64], tau: f64) -> f64 {
    if d.is_empty() {
        return 0.0;
    }
    d.iter().filter(|&&x| x < tau).count() as f64 / d.len() as f64
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision (reconstruction within `tau` of ground truth), recall (ground
/// truth within `tau` of the reconstruction) and their harmonic mean.
pub fn precision_recall_f1(rec: &[Point3<f64>], gt: &[Point3<f64>], tau: f64) -> (f64, f64, f64) {
    let d_rec = nearest_distances(rec, &KdTree::new(gt.to_vec()));
    let d_gt = nearest_distances(gt, &KdTree::new(rec.to_vec()));
    let (p, r) = (fraction_below(&d_rec, tau), fraction_below(&d_gt, tau));
    (p, r, f1_score(p, r))
}

/// Scores a reconstructed point set against ground-truth points: crop to the
/// common box, align with ICP, then compute precision, recall and F1 for
/// every configured threshold.
pub fn evaluate_points(rec: &[Point3<f64>], gt: &[Point3<f64>], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let (rec_c, gt_c, crop) = overlap_crop(rec, gt)?;
    let gt_tree = KdTree::new(gt_c.clone());
    let (alignment, icp) = if cfg.align {
        let r = icp::icp_align_tree(&rec_c, &gt_tree, &cfg.icp())?;
        (r.transform, Some(r))
    } else {
        (nalgebra::Isometry3::identity(), None)
    };
    let aligned: Vec<Point3<f64>> = rec_c.iter().map(|p| alignment * p).collect();
    let d_rec = nearest_distances(&aligned, &gt_tree);
    let d_gt = nearest_distances(&gt_c, &KdTree::new(aligned));
    let scores = cfg
        .thresholds
        .iter()
        .map(|t| {
            let tau = t.resolve(&crop);
            let (p, r) = (fraction_below(&d_rec, tau), fraction_below(&d_gt, tau));
            ThresholdScore {
                threshold: *t,
                tau,
                precision: p,
                recall: r,
                f1: f1_score(p, r),
            }
        })
        .collect();
    let h = alignment.to_homogeneous();
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = h[(i, j)];
        }
    }
    Ok(EvalReport {
        scores,
        alignment: m,
        icp_iterations: icp.as_ref().map_or(0, |r| r.iterations),
        icp_initial_rms: icp.as_ref().map_or(0.0, |r| r.initial_rms),
        icp_final_rms: icp.as_ref().map_or(0.0, |r| r.final_rms),
        rec_samples: rec.len(),
        gt_samples: gt.len(),
        rec_cropped: rec_c.len(),
        gt_cropped: gt_c.len(),
        crop_box: crop,
    })
}

/// Samples `cfg.sample_count` points on the mesh and evaluates them.
pub fn evaluate_mesh(rec: &Mesh, gt: &[Point3<f64>], cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let samples = sample_mesh_points(rec, cfg.sample_count, cfg.seed)?;
    evaluate_points(&samples, gt, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> Mesh {
        Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 1.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn brute_pr(rec: &[Point3<f64>], gt: &[Point3<f64>], tau: f64) -> (f64, f64) {
        let within = |a: &[Point3<f64>], b: &[Point3<f64>]| {
            a.iter()
                .filter(|p| b.iter().any(|q| (*p - q).norm() < tau))
                .count() as f64
                / a.len() as f64
        };
        (within(rec, gt), within(gt, rec))
    }

    #[test]
    fn crop_examples() {
        let a: Vec<Point3<f64>> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        let (r, g, b) = overlap_crop(&a, &a).unwrap();
        assert_eq!((r.len(), g.len()), (10, 10));
        assert_eq!(b, SceneBounds::from_points(&a));
        let far: Vec<Point3<f64>> = a.iter().map(|p| p + nalgebra::Vector3::new(100.0, 0.0, 0.0)).collect();
        assert_eq!(overlap_crop(&a, &far).unwrap_err(), EvalError::NoOverlap);
        let inner = vec![Point3::new(2.0, 0.0, 0.0), Point3::new(4.0, 0.0, 0.0)];
        let (r, g, _) = overlap_crop(&inner, &a).unwrap();
        assert_eq!(r, inner);
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn samples_stay_on_square_and_are_reproducible() {
        let m = unit_square();
        let s = sample_mesh_points(&m, 2000, 7).unwrap();
        assert!(s.iter().all(|p| p.y == 0.0 && (0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.z)));
        assert_eq!(s, sample_mesh_points(&m, 2000, 7).unwrap());
        assert!(sample_mesh_points(&m, 0, 7).unwrap().is_empty());
        assert_eq!(sample_mesh_points(&Mesh::default(), 5, 7), Err(EvalError::EmptyMesh));
    }

    #[test]
    fn samples_follow_area_ratio() {
        // areas 1 and 3
        let m = Mesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
                Point3::new(10.0, 0.0, 0.0),
                Point3::new(16.0, 0.0, 0.0),
                Point3::new(10.0, 0.0, 1.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
        );
        let n = 40_000;
        let s = sample_mesh_points(&m, n, 3).unwrap();
        let first = s.iter().filter(|p| p.x < 5.0).count() as f64;
        let (mean, sd) = (n as f64 * 0.25, (n as f64 * 0.25 * 0.75).sqrt());
        assert!((first - mean).abs() < 3.0 * sd, "{first} vs {mean}");
    }

    #[test]
    fn precision_recall_examples() {
        let gt: Vec<Point3<f64>> = (0..100).map(|i| Point3::new(i as f64 * 0.1, 0.0, 0.0)).collect();
        assert_eq!(precision_recall_f1(&gt, &gt, 0.05), (1.0, 1.0, 1.0));
        let mut rec = gt.clone();
        for k in 0..25 {
            rec.push(Point3::new(0.0, 50.0 + k as f64, 0.0));
        }
        let (p, r, _) = precision_recall_f1(&rec, &gt, 0.05);
        assert_eq!((p, r), (100.0 / 125.0, 1.0));
        let shifted: Vec<Point3<f64>> = gt.iter().map(|p| p + nalgebra::Vector3::new(0.0, 0.01, 0.0)).collect();
        assert_eq!(precision_recall_f1(&shifted, &gt, 1e-9), (0.0, 0.0, 0.0));
    }

    #[test]
    fn relative_threshold_scales_with_crop_diagonal() {
        let b = SceneBounds::new([0.0; 3], [3.0, 4.0, 0.0]);
        assert_eq!(Threshold::Relative(0.1).resolve(&b), 0.5);
        assert_eq!(Threshold::Absolute(0.1).resolve(&b), 0.1);
    }

    #[test]
    fn evaluate_mesh_against_its_own_samples() {
        let m = unit_square();
        let gt = sample_mesh_points(&m, 20_000, 99).unwrap();
        let cfg = EvalConfig {
            thresholds: vec![Threshold::Absolute(0.05)],
            sample_count: 20_000,
            align: false,
            ..EvalConfig::default()
        };
        let r = evaluate_mesh(&m, &gt, &cfg).unwrap();
        assert!(r.scores[0].f1 > 0.99);
        serde_json::to_string(&r).unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = EvalConfig::default();
        assert!(c.validate().is_ok());
        c.thresholds = vec![Threshold::Absolute(-1.0)];
        assert!(c.validate().is_err());
        c.thresholds = vec![Threshold::Relative(0.025)];
        c.sample_count = 0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn matches_brute_force_and_bounds_hold(
            a in prop::collection::vec(prop::array::uniform3(0.0f64..4.0), 1..200),
            b in prop::collection::vec(prop::array::uniform3(0.0f64..4.0), 1..200),
            tau in 0.01f64..2.0,
        ) {
            let a: Vec<Point3<f64>> = a.into_iter().map(Point3::from).collect();
            let b: Vec<Point3<f64>> = b.into_iter().map(Point3::from).collect();
            let (p, r, f) = precision_recall_f1(&a, &b, tau);
            prop_assert_eq!((p, r), brute_pr(&a, &b, tau));
            let (p2, r2, _) = precision_recall_f1(&b, &a, tau);
            prop_assert_eq!((p, r), (r2, p2));
            prop_assert!(f <= 1.0 && f <= 2.0 * p.min(r) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        }
    }
}

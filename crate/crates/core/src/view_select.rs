//! Per-region view selection.
//!
//! Every matched image of a region becomes a reference view with up to three
//! source views ranked by a baseline-angle pair score. Each sparse point then
//! picks, among the groups whose reference observes it, the group that sees it
//! closest to the image centers. The union of chosen groups is the region's
//! training image set.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{Camera, Point3D, SparseModel};
use crate::geometry::{Intrinsics, Pose, ProjectionError};
use crate::partition::SubRegion;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewSelectError {
    #[error("point coincides with a camera center")]
    DegenerateRay,
    #[error("image {0} is not in the model")]
    UnknownImage(u32),
    #[error("point {0} has no group in which it is visible to every member")]
    NoVisibleGroup(u64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairScoreConfig {
    /// Preferred baseline angle, degrees.
    pub theta0: f64,
    /// Spread below `theta0`, degrees.
    pub sigma1: f64,
    /// Spread above `theta0`, degrees.
    pub sigma2: f64,
    /// Maximum camera-center distance; `None` derives it from the region.
    pub d_max: Option<f64>,
    /// Angles above this contribute nothing when `angle_cutoff` is on.
    pub theta_min: f64,
    pub angle_cutoff: bool,
}

impl Default for PairScoreConfig {
    fn default() -> Self {
        Self {
            theta0: 5.0,
            sigma1: 1.0,
            sigma2: 10.0,
            d_max: None,
            theta_min: 90.0,
            angle_cutoff: true,
        }
    }
}

impl PairScoreConfig {
    pub fn validate(&self) -> Result<(), ViewSelectError> {
        let bad = |m: &str| Err(ViewSelectError::InvalidConfig(m.to_string()));
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0) {
            return bad("sigma1 and sigma2 must be > 0");
        }
        if !(self.theta0 > 0.0 && self.theta0 < self.theta_min) {
            return bad("theta0 must lie in (0, theta_min)");
        }
        if let Some(d) = self.d_max {
            if !(d > 0.0) {
                return bad("d_max must be > 0");
            }
        }
        Ok(())
    }

    /// Same configuration with `d_max` filled from the region's xz edge lengths.
    pub fn for_region(&self, region: &SubRegion) -> Self {
        let d = self
            .d_max
            .unwrap_or_else(|| (region.bounds.extent(0) * region.bounds.extent(2)).sqrt());
        Self {
            d_max: Some(d),
            ..*self
        }
    }

    fn distance_limit(&self) -> f64 {
        self.d_max.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewGroup {
    pub ref_image_id: u32,
    /// Descending score, ties by ascending id.
    pub src_image_ids: Vec<u32>,
}

impl ViewGroup {
    pub fn members(&self) -> impl Iterator<Item = u32> + '_ {
        std::iter::once(self.ref_image_id).chain(self.src_image_ids.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViewWarning {
    NoPositiveScore { image_id: u32 },
    NoVisibleGroup { point_id: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionViewAssignment {
    /// Chosen group per point.
    pub groups: BTreeMap<u64, ViewGroup>,
    pub used_image_ids: BTreeSet<u32>,
    pub excluded_image_ids: BTreeSet<u32>,
    pub warnings: Vec<ViewWarning>,
}

/// Angle in degrees between the rays from `point` to both centers.
pub fn baseline_angle(
    point: &Point3<f64>,
    center_i: &Point3<f64>,
    center_j: &Point3<f64>,
) -> Result<f64, ViewSelectError> {
    let a = center_i - point;
    let b = center_j - point;
    if a.norm() == 0.0 || b.norm() == 0.0 {
        return Err(ViewSelectError::DegenerateRay);
    }
    Ok(a.cross(&b).norm().atan2(a.dot(&b)).to_degrees())
}

/// Two-sided Gaussian peaking at 1 for `theta == theta0`.
pub fn piecewise_gaussian(theta: f64, cfg: &PairScoreConfig) -> f64 {
    let sigma = if theta <= cfg.theta0 {
        cfg.sigma1
    } else {
        cfg.sigma2
    };
    let d = theta - cfg.theta0;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

fn point_contribution(
    p: &Point3<f64>,
    ci: &Point3<f64>,
    cj: &Point3<f64>,
    cfg: &PairScoreConfig,
) -> f64 {
    match baseline_angle(p, ci, cj) {
        Ok(theta) if cfg.angle_cutoff && theta > cfg.theta_min => 0.0,
        Ok(theta) => piecewise_gaussian(theta, cfg),
        Err(_) => 0.0,
    }
}

/// Pair score over every point whose track contains both images.
pub fn pair_score(i: u32, j: u32, model: &SparseModel, cfg: &PairScoreConfig) -> f64 {
    let (Some(a), Some(b)) = (model.images.get(&i), model.images.get(&j)) else {
        return 0.0;
    };
    let (ci, cj) = (a.center(), b.center());
    if (ci - cj).norm() > cfg.distance_limit() {
        return 0.0;
    }
    let mut common: Vec<u64> = model
        .points
        .values()
        .filter(|p| {
            p.track.iter().any(|t| t.image_id == i) && p.track.iter().any(|t| t.image_id == j)
        })
        .map(|p| p.point_id)
        .collect();
    common.sort_unstable();
    common
        .iter()
        .map(|id| point_contribution(&model.points[id].position(), &ci, &cj, cfg))
        .sum()
}

/// Pair scores for all image pairs co-observing a set of points, accumulated
/// in ascending point-id order.
#[derive(Debug, Clone, Default)]
pub struct PairScorer {
    /// Sorted ids of the images that appear in some track.
    ids: Vec<u32>,
    /// Dense upper-triangular score matrix over `ids`.
    scores: Vec<f64>,
}

impl PairScorer {
    pub fn from_points<'a, I>(model: &SparseModel, point_ids: I, cfg: &PairScoreConfig) -> Self
    where
        I: IntoIterator<Item = &'a u64>,
    {
        let limit = cfg.distance_limit();
        let mut ids: Vec<u64> = point_ids.into_iter().copied().collect();
        ids.sort_unstable();
        let points: Vec<&Point3D> = ids.iter().filter_map(|id| model.points.get(id)).collect();
        let mut images: Vec<u32> = points
            .iter()
            .flat_map(|p| p.track.iter().map(|t| t.image_id))
            .filter(|i| model.images.contains_key(i))
            .collect();
        images.sort_unstable();
        images.dedup();
        let n = images.len();
        let index: HashMap<u32, usize> = images.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        let centers: Vec<Point3<f64>> = images.iter().map(|i| model.images[i].center()).collect();
        let mut near = vec![false; n * n];
        for a in 0..n {
            for b in a + 1..n {
                near[a * n + b] = (centers[a] - centers[b]).norm() <= limit;
            }
        }
        let mut scores = vec![0.0; n * n];
        let mut track: Vec<usize> = Vec::new();
        let mut rays: Vec<Vector3<f64>> = Vec::new();
        for p in points {
            let pos = p.position();
            track.clear();
            track.extend(p.track.iter().filter_map(|t| index.get(&t.image_id).copied()));
            track.sort_unstable();
            track.dedup();
            rays.clear();
            rays.extend(track.iter().map(|&k| centers[k] - pos));
            for (x, &a) in track.iter().enumerate() {
                let ra = &rays[x];
                if ra.norm() == 0.0 {
                    continue;
                }
                for (y, &b) in track.iter().enumerate().skip(x + 1) {
                    if !near[a * n + b] {
                        continue;
                    }
                    let rb = &rays[y];
                    if rb.norm() == 0.0 {
                        continue;
                    }
                    let theta = ra.cross(rb).norm().atan2(ra.dot(rb)).to_degrees();
                    if !(cfg.angle_cutoff && theta > cfg.theta_min) {
                        scores[a * n + b] += piecewise_gaussian(theta, cfg);
                    }
                }
            }
        }
        Self { ids: images, scores }
    }

    fn slot(&self, i: u32) -> Option<usize> {
        self.ids.binary_search(&i).ok()
    }

    pub fn score(&self, i: u32, j: u32) -> f64 {
        let (Some(a), Some(b)) = (self.slot(i), self.slot(j)) else {
            return 0.0;
        };
        let (a, b) = (a.min(b), a.max(b));
        if a == b {
            return 0.0;
        }
        self.scores[a * self.ids.len() + b]
    }

    /// Positive-score partners of every image, sorted by ascending id.
    fn neighbours(&self) -> HashMap<u32, Vec<u32>> {
        let n = self.ids.len();
        let mut out: HashMap<u32, Vec<u32>> = HashMap::new();
        for a in 0..n {
            for b in a + 1..n {
                if self.scores[a * n + b] > 0.0 {
                    out.entry(self.ids[a]).or_default().push(self.ids[b]);
                    out.entry(self.ids[b]).or_default().push(self.ids[a]);
                }
            }
        }
        for v in out.values_mut() {
            v.sort_unstable();
        }
        out
    }
}

/// Top three candidates by score, ties by ascending id; zero scores are skipped.
pub fn rank_sources<F: Fn(u32) -> f64>(ref_id: u32, candidates: &[u32], score: F) -> ViewGroup {
    let mut scored: Vec<(f64, u32)> = candidates
        .iter()
        .copied()
        .filter(|&c| c != ref_id)
        .map(|c| (score(c), c))
        .filter(|(s, _)| *s > 0.0)
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.dedup_by_key(|e| e.1);
    ViewGroup {
        ref_image_id: ref_id,
        src_image_ids: scored.into_iter().take(3).map(|(_, c)| c).collect(),
    }
}

/// Group of `ref_id` with its best candidates; an empty source list comes
/// back with a `NoPositiveScore` warning.
pub fn select_source_views(
    ref_id: u32,
    candidates: &[u32],
    model: &SparseModel,
    cfg: &PairScoreConfig,
) -> Result<(ViewGroup, Option<ViewWarning>), ViewSelectError> {
    if !model.images.contains_key(&ref_id) {
        return Err(ViewSelectError::UnknownImage(ref_id));
    }
    let group = rank_sources(ref_id, candidates, |c| pair_score(ref_id, c, model, cfg));
    let warning = group
        .src_image_ids
        .is_empty()
        .then_some(ViewWarning::NoPositiveScore { image_id: ref_id });
    Ok((group, warning))
}

pub fn project_point(
    point: &Point3<f64>,
    camera: &Camera,
    pose: &Pose,
) -> Result<(f64, f64), ProjectionError> {
    let k = camera.intrinsics()?;
    k.project(&pose.to_camera(point))
}

/// Cached projection data for one image.
#[derive(Debug, Clone)]
struct View {
    intrinsics: Option<Intrinsics>,
    pose: Pose,
}

impl View {
    /// Pixel distance to the principal point, if the point is visible.
    fn center_distance(&self, p: &Point3<f64>) -> Option<f64> {
        let k = self.intrinsics.as_ref()?;
        let (u, v) = k.project(&self.pose.to_camera(p)).ok()?;
        if !k.contains(u, v) {
            return None;
        }
        Some(((u - k.cx).powi(2) + (v - k.cy).powi(2)).sqrt())
    }
}

fn views_of(model: &SparseModel) -> HashMap<u32, View> {
    model
        .images
        .values()
        .map(|img| {
            let intrinsics = model.camera_of(img.image_id).and_then(|c| c.intrinsics().ok());
            (
                img.image_id,
                View {
                    intrinsics,
                    pose: img.pose(),
                },
            )
        })
        .collect()
}

fn best_group<'g>(
    point: &Point3<f64>,
    candidates: impl Iterator<Item = &'g ViewGroup>,
    views: &HashMap<u32, View>,
) -> Option<&'g ViewGroup> {
    let mut best: Option<(f64, &ViewGroup)> = None;
    for g in candidates {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut visible = true;
        // sorted so groups with the same members tie exactly
        let mut members: Vec<u32> = g.members().collect();
        members.sort_unstable();
        for id in members {
            match views.get(&id).and_then(|v| v.center_distance(point)) {
                Some(d) => {
                    sum += d;
                    count += 1;
                }
                None => {
                    visible = false;
                    break;
                }
            }
        }
        if !visible {
            continue;
        }
        let avg = sum / count as f64;
        let better = match best {
            None => true,
            Some((b, bg)) => avg < b || (avg == b && g.ref_image_id < bg.ref_image_id),
        };
        if better {
            best = Some((avg, g));
        }
    }
    best.map(|(_, g)| g)
}

/// Group minimizing the mean pixel distance between the point's projections
/// and the members' principal points.
pub fn optimal_group_for_point(
    point_id: u64,
    candidate_groups: &[ViewGroup],
    model: &SparseModel,
) -> Result<ViewGroup, ViewSelectError> {
    let p = model
        .points
        .get(&point_id)
        .ok_or(ViewSelectError::NoVisibleGroup(point_id))?
        .position();
    let views = views_of(model);
    best_group(&p, candidate_groups.iter(), &views)
        .cloned()
        .ok_or(ViewSelectError::NoVisibleGroup(point_id))
}

/// Builds reference groups for the region's matched images, picks the
/// optimal group per point and splits the matched images into used and
/// excluded sets.
pub fn assign_views_to_region(
    region: &SubRegion,
    model: &SparseModel,
    cfg: &PairScoreConfig,
) -> Result<RegionViewAssignment, ViewSelectError> {
    cfg.validate()?;
    let cfg = cfg.for_region(region);
    let scorer = PairScorer::from_points(model, &region.point_ids, &cfg);
    let neighbours = scorer.neighbours();
    let matched: Vec<u32> = region
        .matched_image_ids
        .iter()
        .copied()
        .filter(|id| model.images.contains_key(id))
        .collect();
    let matched_set: BTreeSet<u32> = matched.iter().copied().collect();

    let mut warnings = Vec::new();
    let mut groups: BTreeMap<u32, ViewGroup> = BTreeMap::new();
    for &r in &matched {
        let cands: Vec<u32> = neighbours
            .get(&r)
            .map(|v| v.iter().copied().filter(|c| matched_set.contains(c)).collect())
            .unwrap_or_default();
        let g = rank_sources(r, &cands, |c| scorer.score(r, c));
        if g.src_image_ids.is_empty() {
            warnings.push(ViewWarning::NoPositiveScore { image_id: r });
        } else {
            groups.insert(r, g);
        }
    }

    let views = views_of(model);
    let point_ids: Vec<u64> = region.point_ids.iter().copied().collect();
    let choices: Vec<(u64, Option<ViewGroup>)> = point_ids
        .par_iter()
        .map(|&pid| {
            let Some(p) = model.points.get(&pid) else {
                return (pid, None);
            };
            let mut refs: Vec<u32> = p.track.iter().map(|t| t.image_id).collect();
            refs.sort_unstable();
            refs.dedup();
            let cands = refs.iter().filter_map(|r| groups.get(r));
            (pid, best_group(&p.position(), cands, &views).cloned())
        })
        .collect();

    let mut chosen = BTreeMap::new();
    let mut used = BTreeSet::new();
    for (pid, g) in choices {
        match g {
            Some(g) => {
                used.extend(g.members());
                chosen.insert(pid, g);
            }
            None => warnings.push(ViewWarning::NoVisibleGroup { point_id: pid }),
        }
    }
    let excluded = matched_set.difference(&used).copied().collect();
    Ok(RegionViewAssignment {
        groups: chosen,
        used_image_ids: used,
        excluded_image_ids: excluded,
        warnings,
    })
}

/// Matched vs used image counts, one row per region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentSummary {
    pub row: usize,
    pub col: usize,
    pub matched_images: usize,
    pub used_images: usize,
    pub excluded_images: usize,
    pub points_with_group: usize,
    pub warnings: usize,
}

impl AssignmentSummary {
    pub fn new(region: &SubRegion, a: &RegionViewAssignment) -> Self {
        Self {
            row: region.grid_index.row,
            col: region.grid_index.col,
            matched_images: region.matched_image_ids.len(),
            used_images: a.used_image_ids.len(),
            excluded_images: a.excluded_image_ids.len(),
            points_with_group: a.groups.len(),
            warnings: a.warnings.len(),
        }
    }
}

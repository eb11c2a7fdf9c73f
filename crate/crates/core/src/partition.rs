//! Stage 1 spatial logic: reprojection-error filtering, voxel-density
//! boundary refinement, `n x n` gridding on the xz ground plane, sub-region
//! retention and boundary expansion for per-region initialization.
//!
//! The scene is assumed to be aligned so that `y` is vertical. Grid cells
//! are half-open `[lo, hi)` along x and z, except the last cell of each
//! axis which is closed. Every region spans the refined global `y` extent.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::SparseModel;
use crate::geometry::SceneBounds;
use crate::view_select::RegionViewAssignment;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("no voxel exceeds the density threshold")]
    EmptyAfterFilter,
    #[error("bounds are degenerate along {0}")]
    DegenerateBounds(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityFilterConfig {
    /// Points with a reprojection error above this (pixels) are discarded.
    pub error_threshold: f64,
    /// Edge length of the occupancy voxels, scene units.
    pub voxel_size: f64,
    /// Voxels must hold more than this fraction of the densest voxel's count.
    pub density_fraction: f64,
}

impl Default for DensityFilterConfig {
    fn default() -> Self {
        Self {
            error_threshold: 1.5,
            voxel_size: 2.0,
            density_fraction: 1.0 / 3.0,
        }
    }
}

impl DensityFilterConfig {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if !(self.error_threshold > 0.0) {
            return Err(PartitionError::InvalidConfig(
                "error_threshold must be > 0".into(),
            ));
        }
        if !(self.voxel_size > 0.0) {
            return Err(PartitionError::InvalidConfig("voxel_size must be > 0".into()));
        }
        if !(self.density_fraction > 0.0 && self.density_fraction <= 1.0) {
            return Err(PartitionError::InvalidConfig(
                "density_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub density: DensityFilterConfig,
    /// Overrides the image-count heuristic when set.
    pub grid_size: Option<usize>,
    /// Minimum share of the per-cell average, for both points and images.
    pub retention_fraction: f64,
    /// Scale applied to region xz bounds for initialization.
    pub expand_factor: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            density: DensityFilterConfig::default(),
            grid_size: None,
            retention_fraction: 0.10,
            expand_factor: 2.0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<(), PartitionError> {
        self.density.validate()?;
        if self.grid_size == Some(0) {
            return Err(PartitionError::InvalidConfig("grid_size must be >= 1".into()));
        }
        if !(self.retention_fraction >= 0.0) {
            return Err(PartitionError::InvalidConfig(
                "retention_fraction must be >= 0".into(),
            ));
        }
        if !(self.expand_factor >= 1.0) {
            return Err(PartitionError::InvalidConfig(
                "expand_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

pub type VoxelIndex = [i64; 3];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelGridSummary {
    pub occupancy: BTreeMap<VoxelIndex, usize>,
    pub max_occupancy: usize,
}

/// Row indexes z cells, column indexes x cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubRegion {
    pub grid_index: GridIndex,
    pub bounds: SceneBounds,
    pub point_ids: BTreeSet<u64>,
    pub matched_image_ids: BTreeSet<u32>,
    pub init_bounds: SceneBounds,
    pub assigned: Option<RegionViewAssignment>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Empty,
    Points,
    Images,
    PointsAndImages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedRegion {
    pub grid_index: GridIndex,
    pub reason: DropReason,
    pub num_points: usize,
    pub num_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionResult {
    pub grid_n: usize,
    pub regions: Vec<SubRegion>,
    pub dropped: Vec<DroppedRegion>,
}

/// Cell edges along one axis; the last edge is exactly the upper bound.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    edges: Vec<f64>,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        let mut edges: Vec<f64> = (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .collect();
        edges[0] = lo;
        edges[n] = hi;
        Self { edges }
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn cell_range(&self, k: usize) -> (f64, f64) {
        (self.edges[k], self.edges[k + 1])
    }

    /// `[lo, hi)` cells, last one closed; `None` outside the axis range.
    pub fn cell_of(&self, x: f64) -> Option<usize> {
        let n = self.cells();
        if !(x >= self.edges[0] && x <= self.edges[n]) {
            return None;
        }
        Some(self.edges[1..n].partition_point(|e| *e <= x))
    }
}

/// Ids of points whose reprojection error does not exceed `error_threshold`.
pub fn filter_points_by_error(model: &SparseModel, error_threshold: f64) -> BTreeSet<u64> {
    model
        .points
        .values()
        .filter(|p| p.error <= error_threshold)
        .map(|p| p.point_id)
        .collect()
}

pub fn voxel_index(p: &Point3<f64>, voxel_size: f64) -> VoxelIndex {
    [
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    ]
}

pub fn voxel_occupancy(points: &[Point3<f64>], voxel_size: f64) -> VoxelGridSummary {
    let mut occupancy = BTreeMap::new();
    for p in points {
        *occupancy.entry(voxel_index(p, voxel_size)).or_insert(0usize) += 1;
    }
    let max_occupancy = occupancy.values().copied().max().unwrap_or(0);
    VoxelGridSummary {
        occupancy,
        max_occupancy,
    }
}

/// Bounds of the points lying in dense voxels, i.e. voxels holding strictly
/// more than `density_fraction * max_occupancy` points.
pub fn refine_bounds(
    summary: &VoxelGridSummary,
    points: &[Point3<f64>],
    density_fraction: f64,
    voxel_size: f64,
) -> Result<SceneBounds, PartitionError> {
    let threshold = density_fraction * summary.max_occupancy as f64;
    let mut bounds = SceneBounds::empty();
    for p in points {
        let dense = summary
            .occupancy
            .get(&voxel_index(p, voxel_size))
            .is_some_and(|&n| n as f64 > threshold);
        if dense {
            bounds.extend(p);
        }
    }
    if bounds.is_empty() {
        return Err(PartitionError::EmptyAfterFilter);
    }
    Ok(bounds)
}

/// Grid size from the number of images: 4 below 1000, 6 below 3000, else 8.
pub fn choose_grid_size(num_images: usize) -> usize {
    match num_images {
        n if n < 1000 => 4,
        n if n < 3000 => 6,
        _ => 8,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPartition {
    pub grid_n: usize,
    /// All `n * n` cells in row-major order, empty ones included.
    pub cells: Vec<SubRegion>,
    /// Filtered points outside the refined bounds.
    pub discarded: usize,
}

/// Assigns each point to exactly one xz cell of an `n x n` grid over `bounds`.
pub fn partition_points(
    model: &SparseModel,
    point_ids: &BTreeSet<u64>,
    bounds: &SceneBounds,
    n: usize,
) -> Result<GridPartition, PartitionError> {
    if n == 0 {
        return Err(PartitionError::InvalidConfig("grid size must be >= 1".into()));
    }
    if !(bounds.extent(0) > 0.0) {
        return Err(PartitionError::DegenerateBounds("x"));
    }
    if !(bounds.extent(2) > 0.0) {
        return Err(PartitionError::DegenerateBounds("z"));
    }
    let xs = GridAxis::new(bounds.min[0], bounds.max[0], n);
    let zs = GridAxis::new(bounds.min[2], bounds.max[2], n);
    let mut cells: Vec<SubRegion> = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            let (x0, x1) = xs.cell_range(col);
            let (z0, z1) = zs.cell_range(row);
            let b = SceneBounds::new([x0, bounds.min[1], z0], [x1, bounds.max[1], z1]);
            SubRegion {
                grid_index: GridIndex { row, col },
                bounds: b,
                point_ids: BTreeSet::new(),
                matched_image_ids: BTreeSet::new(),
                init_bounds: b,
                assigned: None,
            }
        })
        .collect();
    let mut discarded = 0;
    for id in point_ids {
        let Some(p) = model.points.get(id) else {
            continue;
        };
        let pos = p.position();
        let inside_y = pos.y >= bounds.min[1] && pos.y <= bounds.max[1];
        match (xs.cell_of(pos.x), zs.cell_of(pos.z), inside_y) {
            (Some(col), Some(row), true) => {
                let cell = &mut cells[row * n + col];
                cell.point_ids.insert(*id);
                cell.matched_image_ids
                    .extend(p.track.iter().map(|t| t.image_id));
            }
            _ => discarded += 1,
        }
    }
    Ok(GridPartition {
        grid_n: n,
        cells,
        discarded,
    })
}

impl PartitionResult {
    /// Non-empty cells become regions; empty cells are recorded as dropped.
    pub fn from_grid(grid: GridPartition) -> Self {
        let mut regions = Vec::new();
        let mut dropped = Vec::new();
        for cell in grid.cells {
            if cell.point_ids.is_empty() {
                dropped.push(DroppedRegion {
                    grid_index: cell.grid_index,
                    reason: DropReason::Empty,
                    num_points: 0,
                    num_images: cell.matched_image_ids.len(),
                });
            } else {
                regions.push(cell);
            }
        }
        Self {
            grid_n: grid.grid_n,
            regions,
            dropped,
        }
    }
}

/// Keeps a region iff both its point count and its matched-image count reach
/// `fraction` of the per-cell averages `total / n^2`.
pub fn retain_subregions(
    result: PartitionResult,
    total_points: usize,
    total_images: usize,
    fraction: f64,
) -> PartitionResult {
    let cells = (result.grid_n * result.grid_n) as f64;
    let min_points = fraction * total_points as f64 / cells;
    let min_images = fraction * total_images as f64 / cells;
    let mut regions = Vec::new();
    let mut dropped = result.dropped;
    for region in result.regions {
        let np = region.point_ids.len();
        let ni = region.matched_image_ids.len();
        let points_ok = np as f64 >= min_points;
        let images_ok = ni as f64 >= min_images;
        let reason = match (points_ok, images_ok) {
            (true, true) => {
                regions.push(region);
                continue;
            }
            (false, true) => DropReason::Points,
            (true, false) => DropReason::Images,
            (false, false) => DropReason::PointsAndImages,
        };
        dropped.push(DroppedRegion {
            grid_index: region.grid_index,
            reason,
            num_points: np,
            num_images: ni,
        });
    }
    regions.sort_by_key(|r| r.grid_index);
    dropped.sort_by_key(|d| d.grid_index);
    PartitionResult {
        grid_n: result.grid_n,
        regions,
        dropped,
    }
}

/// Scales the region's xz bounds by `factor` about their center; y is unchanged.
pub fn expand_region_bounds(mut region: SubRegion, factor: f64) -> SubRegion {
    let b = region.bounds;
    let mut init = b;
    for axis in [0, 2] {
        let c = 0.5 * (b.min[axis] + b.max[axis]);
        let half = 0.5 * b.extent(axis) * factor;
        init.min[axis] = c - half;
        init.max[axis] = c + half;
    }
    region.init_bounds = init;
    region
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub grid_index: GridIndex,
    pub bounds: SceneBounds,
    pub init_bounds: SceneBounds,
    pub num_points: usize,
    pub num_matched_images: usize,
}

impl From<&SubRegion> for RegionSummary {
    fn from(r: &SubRegion) -> Self {
        Self {
            grid_index: r.grid_index,
            bounds: r.bounds,
            init_bounds: r.init_bounds,
            num_points: r.point_ids.len(),
            num_matched_images: r.matched_image_ids.len(),
        }
    }
}

/// The JSON partition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub grid_n: usize,
    pub total_points: usize,
    pub filtered_points: usize,
    pub outside_points: usize,
    pub total_images: usize,
    pub refined_bounds: SceneBounds,
    pub regions: Vec<RegionSummary>,
    pub dropped: Vec<DroppedRegion>,
}

#[derive(Debug, Clone)]
pub struct ScenePartition {
    pub result: PartitionResult,
    pub report: PartitionReport,
}

/// Runs the whole stage: filter, refine, grid, retain, expand.
pub fn partition_scene(
    model: &SparseModel,
    cfg: &PartitionConfig,
) -> Result<ScenePartition, PartitionError> {
    cfg.validate()?;
    let d = &cfg.density;
    let kept = filter_points_by_error(model, d.error_threshold);
    let positions: Vec<Point3<f64>> = kept.iter().map(|id| model.points[id].position()).collect();
    let summary = voxel_occupancy(&positions, d.voxel_size);
    if summary.max_occupancy == 0 {
        return Err(PartitionError::EmptyAfterFilter);
    }
    let bounds = refine_bounds(&summary, &positions, d.density_fraction, d.voxel_size)?;
    let n = cfg
        .grid_size
        .unwrap_or_else(|| choose_grid_size(model.images.len().max(1)));
    let grid = partition_points(model, &kept, &bounds, n)?;
    let outside = grid.discarded;
    let result = retain_subregions(
        PartitionResult::from_grid(grid),
        kept.len(),
        model.images.len(),
        cfg.retention_fraction,
    );
    let result = PartitionResult {
        regions: result
            .regions
            .into_iter()
            .map(|r| expand_region_bounds(r, cfg.expand_factor))
            .collect(),
        ..result
    };
    let report = PartitionReport {
        grid_n: n,
        total_points: model.points.len(),
        filtered_points: kept.len(),
        outside_points: outside,
        total_images: model.images.len(),
        refined_bounds: bounds,
        regions: result.regions.iter().map(RegionSummary::from).collect(),
        dropped: result.dropped.clone(),
    };
    Ok(ScenePartition { result, report })
}

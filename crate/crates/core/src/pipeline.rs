//! End-to-end orchestration: partition, view assignment, region export,
//! depth fusion, per-region TSDF meshing, stitching and evaluation.
//!
//! Regions are independent tasks run on a worker pool. A region that fails
//! is reported and skipped; the rest still complete.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::Point3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{write_sparse_model, ColmapError, ModelFormat, SparseModel};
use crate::eval::{evaluate_mesh, EvalConfig, EvalError, EvalReport};
use crate::geometry::SceneBounds;
use crate::mesh::Mesh;
use crate::mv_depth::{fuse_depth, DepthError, DepthMap, FusionConfig, FusionStats, LossWeights};
use crate::partition::{partition_scene, GridIndex, PartitionConfig, PartitionError, PartitionReport, SubRegion};
use crate::pfm::FloatImage;
use crate::synth::depth_file_name;
use crate::tsdf::{crop_and_stitch, crop_mesh, TsdfConfig, TsdfError, TsdfVolume};
use crate::view_select::{assign_views_to_region, AssignmentSummary, PairScoreConfig, RegionViewAssignment, ViewSelectError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Partition,
    AssignViews,
    ExportRegions,
    FuseDepth,
    Tsdf,
    Stitch,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Partition,
        Stage::AssignViews,
        Stage::ExportRegions,
        Stage::FuseDepth,
        Stage::Tsdf,
        Stage::Stitch,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Partition => "partition",
            Stage::AssignViews => "assign-views",
            Stage::ExportRegions => "export-regions",
            Stage::FuseDepth => "fuse-depth",
            Stage::Tsdf => "tsdf",
            Stage::Stitch => "stitch",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    ViewSelect(#[from] ViewSelectError),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Failure of a single region, attributed by grid cell.
#[derive(Debug, Error)]
pub enum RegionError {
    #[error("region has no assigned views")]
    NoViews,
    #[error("depth map for image {image_id}: {source}")]
    Depth { image_id: u32, source: DepthError },
    #[error(transparent)]
    Tsdf(#[from] TsdfError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub partition: PartitionConfig,
    pub view_select: PairScoreConfig,
    pub fusion: FusionConfig,
    /// Fuse each view with its source views before integration.
    pub fuse: bool,
    pub tsdf: TsdfConfig,
    pub eval: EvalConfig,
    pub loss: LossWeights,
    /// Weld tolerance as a fraction of the voxel size.
    pub weld_fraction: f64,
    pub seed: u64,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
    pub stop_after: Option<Stage>,
    pub write_region_models: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            partition: PartitionConfig::default(),
            view_select: PairScoreConfig::default(),
            fusion: FusionConfig::default(),
            fuse: true,
            tsdf: TsdfConfig::default(),
            eval: EvalConfig::default(),
            loss: LossWeights::default(),
            weld_fraction: 0.1,
            seed: 0,
            workers: None,
            stop_after: None,
            write_region_models: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = |e: String| PipelineError::Config(e);
        self.partition.validate().map_err(|e| c(e.to_string()))?;
        self.view_select.validate().map_err(|e| c(e.to_string()))?;
        self.fusion.validate().map_err(|e| c(e.to_string()))?;
        self.tsdf.validate().map_err(|e| c(e.to_string()))?;
        self.eval.validate().map_err(|e| c(e.to_string()))?;
        self.loss.validate().map_err(|e| c(e.to_string()))?;
        if !(self.weld_fraction > 0.0 && self.weld_fraction < 1.0) {
            return Err(c(format!("weld_fraction must lie in (0, 1), got {}", self.weld_fraction)));
        }
        if self.workers == Some(0) {
            return Err(c("workers must be at least 1".into()));
        }
        Ok(())
    }

    fn runs(&self, stage: Stage) -> bool {
        self.stop_after.is_none_or(|s| stage <= s)
    }
}

/// Supplies depth maps to region tasks. Each request names the region, so
/// loaders may be region-aware (one process per region in a deployment).
pub trait DepthSource: Sync {
    fn load(&self, region: GridIndex, image_id: u32) -> Result<DepthMap, DepthError>;
}

impl DepthSource for BTreeMap<u32, DepthMap> {
    fn load(&self, _region: GridIndex, image_id: u32) -> Result<DepthMap, DepthError> {
        self.get(&image_id)
            .cloned()
            .ok_or_else(|| DepthError::InvalidConfig(format!("no depth map for image {image_id}")))
    }
}

/// Reads `<dir>/<image id>.pfm` with intrinsics and pose from the model.
pub struct PfmDirectory<'a> {
    pub dir: PathBuf,
    pub model: &'a SparseModel,
}

impl DepthSource for PfmDirectory<'_> {
    fn load(&self, _region: GridIndex, image_id: u32) -> Result<DepthMap, DepthError> {
        let img = self
            .model
            .images
            .get(&image_id)
            .ok_or_else(|| DepthError::InvalidConfig(format!("image {image_id} not in model")))?;
        let cam = self
            .model
            .camera_of(image_id)
            .ok_or_else(|| DepthError::InvalidConfig(format!("camera {} missing", img.camera_id)))?;
        let pfm = FloatImage::read(&self.dir.join(depth_file_name(image_id)))?;
        DepthMap::from_pfm(&pfm, cam.intrinsics()?, img.pose())
    }
}

pub struct PipelineInputs<'a> {
    pub model: &'a SparseModel,
    pub depth: &'a dyn DepthSource,
    pub gt_points: Option<&'a [Point3<f64>]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub grid_index: GridIndex,
    pub bounds: SceneBounds,
    pub crop_box: SceneBounds,
    pub used_images: Vec<u32>,
    pub fused_views: usize,
    pub fusion: Vec<(u32, FusionStats)>,
    pub allocated_blocks: usize,
    pub observed_voxels: usize,
    pub vertices: usize,
    pub triangles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStatus {
    pub grid_index: GridIndex,
    pub ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Partial,
    Failed,
}

impl RunStatus {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::Partial => 1,
            RunStatus::Failed => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StitchReport {
    pub regions: usize,
    pub vertices: usize,
    pub triangles: usize,
    pub weld_tolerance: f64,
    pub surface_area: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub status: RunStatus,
    pub exit_code: i32,
    pub stages_completed: Vec<Stage>,
    pub regions: Vec<RegionStatus>,
    pub stitch: Option<StitchReport>,
    pub eval: Option<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub summary: PipelineSummary,
    pub partition: PartitionReport,
    pub assignments: Vec<AssignmentSummary>,
    pub region_reports: Vec<RegionReport>,
    pub region_meshes: Vec<(GridIndex, Mesh)>,
    pub mesh: Option<Mesh>,
}

struct RegionOutput {
    report: RegionReport,
    mesh: Option<Mesh>,
}

fn tag(g: GridIndex) -> String {
    format!("r{}_c{}", g.row, g.col)
}

/// Crop box of a region: its partition bounds with y widened by the
/// truncation distance so surfaces at the vertical extremes survive.
pub fn region_crop_box(region: &SubRegion, truncation: f64) -> SceneBounds {
    let mut b = region.bounds;
    b.min[1] -= truncation;
    b.max[1] += truncation;
    b
}

/// Source views for every used image: the group it references, or else the
/// other members of the lowest-ref group that contains it.
pub fn fusion_groups(a: &RegionViewAssignment) -> BTreeMap<u32, Vec<u32>> {
    let mut by_ref: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for g in a.groups.values() {
        by_ref.entry(g.ref_image_id).or_insert_with(|| g.src_image_ids.clone());
    }
    let mut out = BTreeMap::new();
    for &id in &a.used_image_ids {
        if let Some(src) = by_ref.get(&id) {
            out.insert(id, src.clone());
            continue;
        }
        let host = by_ref.iter().find(|(_, src)| src.contains(&id));
        if let Some((r, src)) = host {
            let others = std::iter::once(*r).chain(src.iter().copied().filter(|s| *s != id)).collect();
            out.insert(id, others);
        } else {
            out.insert(id, Vec::new());
        }
    }
    out
}

fn process_region(
    region: &SubRegion,
    assignment: &RegionViewAssignment,
    inputs: &PipelineInputs<'_>,
    cfg: &PipelineConfig,
) -> Result<RegionOutput, RegionError> {
    let g = region.grid_index;
    let used: Vec<u32> = assignment.used_image_ids.iter().copied().collect();
    if used.is_empty() {
        return Err(RegionError::NoViews);
    }
    let truncation = cfg.tsdf.effective_truncation();
    let crop = region_crop_box(region, truncation);
    let mut report = RegionReport {
        grid_index: g,
        bounds: region.bounds,
        crop_box: crop,
        used_images: used.clone(),
        fused_views: 0,
        fusion: Vec::new(),
        allocated_blocks: 0,
        observed_voxels: 0,
        vertices: 0,
        triangles: 0,
    };
    if !cfg.runs(Stage::FuseDepth) {
        return Ok(RegionOutput { report, mesh: None });
    }

    let load = |id: u32| {
        inputs
            .depth
            .load(g, id)
            .map_err(|source| RegionError::Depth { image_id: id, source })
    };
    let mut cache: BTreeMap<u32, DepthMap> = BTreeMap::new();
    for &id in &used {
        cache.insert(id, load(id)?);
    }
    let groups = fusion_groups(assignment);
    let mut fused: Vec<DepthMap> = Vec::with_capacity(used.len());
    for &id in &used {
        let sources: Vec<DepthMap> = groups[&id].iter().filter_map(|s| cache.get(s).cloned()).collect();
        if cfg.fuse && !sources.is_empty() {
            let f = fuse_depth(&cache[&id], &sources, &cfg.fusion).map_err(|source| RegionError::Depth {
                image_id: id,
                source,
            })?;
            report.fusion.push((id, f.stats()));
            report.fused_views += 1;
            fused.push(f.depth);
        } else {
            fused.push(cache[&id].clone());
        }
    }
    drop(cache);
    if !cfg.runs(Stage::Tsdf) {
        return Ok(RegionOutput { report, mesh: None });
    }

    let margin = truncation + 2.0 * cfg.tsdf.voxel_size;
    let mut volume = TsdfVolume::new(&cfg.tsdf, Some(crop.padded(margin)))?;
    for d in &fused {
        volume.integrate_depth(d);
    }
    drop(fused);
    report.allocated_blocks = volume.block_count();
    report.observed_voxels = volume.observed_voxels();
    let mesh = crop_mesh(&volume.extract_mesh()?, &crop);
    report.vertices = mesh.vertices.len();
    report.triangles = mesh.triangles.len();
    Ok(RegionOutput {
        report,
        mesh: Some(mesh),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Runs every configured stage. When `out` is given, JSON reports and mesh
/// artifacts are written under it.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    inputs: &PipelineInputs<'_>,
    out: Option<&Path>,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| PipelineError::Config(e.to_string()))?;
    pool.install(|| run_stages(cfg, inputs, out))
}

fn run_stages(
    cfg: &PipelineConfig,
    inputs: &PipelineInputs<'_>,
    out: Option<&Path>,
) -> Result<PipelineOutcome, PipelineError> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let model = inputs.model;
    let mut stages = vec![Stage::Partition];
    let scene = partition_scene(model, &cfg.partition)?;
    info!(
        "partition: grid {}x{}, {} regions kept, {} dropped",
        scene.result.grid_n,
        scene.result.grid_n,
        scene.result.regions.len(),
        scene.result.dropped.len()
    );
    if let Some(dir) = out {
        write_json(&dir.join("partition.json"), &scene.report)?;
    }
    let mut outcome = PipelineOutcome {
        summary: PipelineSummary {
            status: RunStatus::Success,
            exit_code: 0,
            stages_completed: Vec::new(),
            regions: Vec::new(),
            stitch: None,
            eval: None,
        },
        partition: scene.report.clone(),
        assignments: Vec::new(),
        region_reports: Vec::new(),
        region_meshes: Vec::new(),
        mesh: None,
    };
    let regions = scene.result.regions;
    let finish = |mut o: PipelineOutcome, stages: Vec<Stage>| -> Result<PipelineOutcome, PipelineError> {
        o.summary.stages_completed = stages;
        if let Some(dir) = out {
            write_json(&dir.join("summary.json"), &o.summary)?;
        }
        Ok(o)
    };
    if !cfg.runs(Stage::AssignViews) {
        return finish(outcome, stages);
    }

    let assignments: Vec<RegionViewAssignment> = regions
        .par_iter()
        .map(|r| assign_views_to_region(r, model, &cfg.view_select))
        .collect::<Result<_, _>>()?;
    stages.push(Stage::AssignViews);
    outcome.assignments = regions
        .iter()
        .zip(&assignments)
        .map(|(r, a)| AssignmentSummary::new(r, a))
        .collect();
    for s in &outcome.assignments {
        info!(
            "[r{}_c{}] {} of {} matched images used",
            s.row, s.col, s.used_images, s.matched_images
        );
    }
    if let Some(dir) = out {
        write_json(&dir.join("assignments.json"), &outcome.assignments)?;
    }
    if !cfg.runs(Stage::ExportRegions) {
        return finish(outcome, stages);
    }

    if let Some(dir) = out {
        for (r, a) in regions.iter().zip(&assignments) {
            let rdir = dir.join("regions").join(tag(r.grid_index));
            fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
            write_json(&rdir.join("assignment.json"), a)?;
            if cfg.write_region_models {
                let images: HashSet<u32> = a.used_image_ids.iter().copied().collect();
                let points: HashSet<u64> = r.point_ids.iter().copied().collect();
                let sub = model.subset(&images, &points);
                let sdir = rdir.join("sparse");
                fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
                write_sparse_model(&sub, &sdir, ModelFormat::Binary)?;
            }
        }
    }
    stages.push(Stage::ExportRegions);
    if !cfg.runs(Stage::FuseDepth) {
        return finish(outcome, stages);
    }

    let results: Vec<Result<RegionOutput, RegionError>> = regions
        .par_iter()
        .zip(assignments.par_iter())
        .map(|(r, a)| process_region(r, a, inputs, cfg))
        .collect();
    let mut ok_meshes: Vec<(Mesh, SceneBounds)> = Vec::new();
    for (r, res) in regions.iter().zip(results) {
        let g = r.grid_index;
        match res {
            Ok(o) => {
                outcome.summary.regions.push(RegionStatus {
                    grid_index: g,
                    ok: true,
                    error: None,
                });
                if let Some(dir) = out {
                    let rdir = dir.join("regions").join(tag(g));
                    fs::create_dir_all(&rdir).map_err(io_err(&rdir))?;
                    write_json(&rdir.join("region.json"), &o.report)?;
                    if let Some(m) = &o.mesh {
                        let p = rdir.join("mesh.ply");
                        fs::write(&p, m.to_ply()).map_err(io_err(&p))?;
                    }
                }
                if let Some(m) = o.mesh {
                    ok_meshes.push((m.clone(), o.report.crop_box));
                    outcome.region_meshes.push((g, m));
                }
                outcome.region_reports.push(o.report);
            }
            Err(e) => {
                warn!("[{}] region failed: {e}", tag(g));
                outcome.summary.regions.push(RegionStatus {
                    grid_index: g,
                    ok: false,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    let failed = outcome.summary.regions.iter().filter(|s| !s.ok).count();
    if failed > 0 && failed == outcome.summary.regions.len() {
        outcome.summary.status = RunStatus::Failed;
        outcome.summary.exit_code = RunStatus::Failed.exit_code();
        return finish(outcome, stages);
    }
    if failed > 0 {
        outcome.summary.status = RunStatus::Partial;
        outcome.summary.exit_code = RunStatus::Partial.exit_code();
    }
    stages.push(Stage::FuseDepth);
    if !cfg.runs(Stage::Tsdf) {
        return finish(outcome, stages);
    }
    stages.push(Stage::Tsdf);
    if !cfg.runs(Stage::Stitch) {
        return finish(outcome, stages);
    }

    let tol = cfg.weld_fraction * cfg.tsdf.voxel_size;
    let mesh = crop_and_stitch(&ok_meshes, tol);
    info!("stitch: {} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    outcome.summary.stitch = Some(StitchReport {
        regions: ok_meshes.len(),
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        weld_tolerance: tol,
        surface_area: mesh.surface_area(),
    });
    if let Some(dir) = out {
        let p = dir.join("mesh.ply");
        fs::write(&p, mesh.to_ply()).map_err(io_err(&p))?;
    }
    stages.push(Stage::Stitch);

    if cfg.runs(Stage::Evaluate) {
        if let Some(gt) = inputs.gt_points {
            let mut ecfg = cfg.eval.clone();
            ecfg.seed = cfg.seed;
            let report = evaluate_mesh(&mesh, gt, &ecfg)?;
            for s in &report.scores {
                info!("eval: tau {:.4} precision {:.4} recall {:.4} f1 {:.4}", s.tau, s.precision, s.recall, s.f1);
            }
            if let Some(dir) = out {
                write_json(&dir.join("eval.json"), &report)?;
            }
            outcome.summary.eval = Some(report);
            stages.push(Stage::Evaluate);
        }
    }
    outcome.mesh = Some(mesh);
    finish(outcome, stages)
}

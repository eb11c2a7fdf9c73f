//! Argument parsing and command execution for the `tilerecon` binary.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Args, Parser, Subcommand};
use log::info;
use thiserror::Error;

use tilerecon::colmap::{parse_sparse_model, ModelFormat, SparseModel};
use tilerecon::eval::{self, generate_dsm, image_metrics, sample_mesh_points, EvalConfig, Image, Threshold};
use tilerecon::geometry::SceneBounds;
use tilerecon::mesh::Mesh;
use tilerecon::mv_depth::{fuse_depth, DepthTransfer};
use tilerecon::partition::GridIndex;
use tilerecon::pfm::FloatImage;
use tilerecon::pipeline::{
    run_pipeline, DepthSource, PfmDirectory, PipelineConfig, PipelineInputs, RegionReport, Stage,
};
use tilerecon::synth::{depth_file_name, synth_scene, SynthSpec};
use tilerecon::tsdf::{crop_and_stitch, TsdfVolume};
use tilerecon::view_select::select_source_views;

pub const WORKERS_ENV: &str = "TILERECON_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FATAL: i32 = 3;

#[derive(Debug, Error, PartialEq)]
pub enum CliError {
    #[error("unknown flag '{0}'")]
    UnknownFlag(String),
    #[error("missing required argument '{0}'")]
    MissingRequired(String),
    #[error("invalid value '{value}' for '{flag}': {reason}")]
    InvalidValue { flag: String, value: String, reason: String },
    #[error("{0}")]
    Usage(String),
    /// Help or version text; not an error for the user.
    #[error("{0}")]
    Display(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Display(_) => EXIT_OK,
            _ => EXIT_USAGE,
        }
    }
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| "not a number".to_string())?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a positive number".into())
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| "not a number".to_string())?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err("must be a non-negative number".into())
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err("must be a positive integer".into()),
    }
}

fn unit_interval(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| "not a number".to_string())?;
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err("must lie in (0, 1]".into())
    }
}

#[derive(Debug, Clone)]
struct IdList(Vec<u32>);

fn id_list(s: &str) -> Result<IdList, String> {
    s.split(',')
        .filter(|t| !t.is_empty())
        .map(|t| t.trim().parse::<u32>().map_err(|_| format!("'{t}' is not an image id")))
        .collect::<Result<_, _>>()
        .map(IdList)
}

#[derive(Debug, Parser)]
#[command(name = "tilerecon", version, about = "Partitioned multi-view reconstruction pipeline")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonFlags {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (overrides TILERECON_WORKERS).
    #[arg(long, value_parser = positive_usize)]
    pub workers: Option<usize>,
    /// Seed for sampling during evaluation.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PartitionFlags {
    /// Grid size n for an n x n partition; chosen from the image count when omitted.
    #[arg(long, value_parser = positive_usize)]
    pub grid: Option<usize>,
    /// Maximum reprojection error (pixels) of kept sparse points.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub error_threshold: Option<f64>,
    /// Occupancy voxel edge length, scene units.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub density_voxel: Option<f64>,
    /// Voxels count as dense above this fraction of the peak occupancy.
    #[arg(long, value_parser = unit_interval, allow_negative_numbers = true)]
    pub density_fraction: Option<f64>,
    /// Regions need this share of the per-cell average points and images.
    #[arg(long, value_parser = unit_interval, allow_negative_numbers = true)]
    pub retention: Option<f64>,
    /// Scale of the initialization bounds relative to the region box.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub expand: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ViewFlags {
    /// Preferred baseline angle, degrees.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub theta0: Option<f64>,
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub sigma1: Option<f64>,
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub sigma2: Option<f64>,
    /// Maximum camera distance for a scored pair; derived from the region when omitted.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub d_max: Option<f64>,
    /// Baseline angles above this (degrees) score nothing.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub theta_min: Option<f64>,
    #[arg(long)]
    pub no_angle_cutoff: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct FusionFlags {
    /// Consistency scale of the fusion weight.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Drop sources whose depth error exceeds this; 3 * sigma by default.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub max_error: Option<f64>,
    /// Weight by exp(-E^2 / sigma^2) instead of exp(-E / sigma^2).
    #[arg(long)]
    pub squared_error: bool,
    /// Compare raw source depths instead of reference-frame depths.
    #[arg(long)]
    pub raw_transfer: bool,
    /// Integrate raw depth maps without multi-view fusion.
    #[arg(long)]
    pub no_fuse: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TsdfFlags {
    /// TSDF voxel size, scene units.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub voxel: Option<f64>,
    /// Truncation distance; four voxels by default.
    #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
    pub truncation: Option<f64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Distance threshold; repeat for several.
    #[arg(long = "threshold", value_parser = positive_f64, allow_negative_numbers = true)]
    pub thresholds: Vec<f64>,
    /// Interpret thresholds as fractions of the crop box diagonal.
    #[arg(long)]
    pub relative: bool,
    /// Points sampled on the reconstructed mesh.
    #[arg(long, value_parser = positive_usize)]
    pub samples: Option<usize>,
    #[arg(long, value_parser = positive_usize)]
    pub icp_iters: Option<usize>,
    #[arg(long, value_parser = non_negative_f64, allow_negative_numbers = true)]
    pub icp_tol: Option<f64>,
    /// Skip ICP alignment before scoring.
    #[arg(long)]
    pub no_align: bool,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Filter, grid and retain sub-regions.
    Partition {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        partition: PartitionFlags,
    },
    /// Partition, then choose view groups per region.
    AssignViews {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        partition: PartitionFlags,
        #[command(flatten)]
        view: ViewFlags,
    },
    /// Write one sparse sub-model per region.
    ExportRegions {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        partition: PartitionFlags,
        #[command(flatten)]
        view: ViewFlags,
    },
    /// Fuse one reference depth map with its source views.
    FuseDepth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long = "ref")]
        reference: u32,
        /// Comma-separated source image ids; selected by pair score when omitted.
        #[arg(long, value_parser = id_list)]
        sources: Option<IdList>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        view: ViewFlags,
        #[command(flatten)]
        fusion: FusionFlags,
    },
    /// Integrate depth maps into a TSDF volume and extract a mesh.
    Tsdf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// Comma-separated image ids; every image with a depth map when omitted.
        #[arg(long, value_parser = id_list)]
        images: Option<IdList>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the raw volume (`.raw` plus `.json` header) next to the mesh.
        #[arg(long)]
        dump_volume: bool,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        tsdf: TsdfFlags,
    },
    /// Crop region meshes to their boxes and weld them into one mesh.
    Stitch {
        /// Pipeline output directory holding `regions/*/{mesh.ply,region.json}`.
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Weld distance; a tenth of the voxel size by default.
        #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
        weld_tol: Option<f64>,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        tsdf: TsdfFlags,
    },
    /// Precision, recall and F1 of a reconstruction against ground truth.
    EvalMesh {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// PSNR and SSIM between two images (PNG or PFM).
    EvalRender {
        #[arg(long)]
        rendered: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
        max_value: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Rasterize a digital surface model from a point cloud or mesh.
    Dsm {
        #[arg(long)]
        points: PathBuf,
        #[arg(long, value_parser = positive_f64, allow_negative_numbers = true)]
        cell: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Generate a synthetic scene with exact depth and ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON scene description; the built-in city when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, value_parser = positive_usize)]
        points: Option<usize>,
        #[arg(long, value_parser = positive_usize)]
        gt_samples: Option<usize>,
        #[arg(long, value_parser = non_negative_f64, allow_negative_numbers = true)]
        noise: Option<f64>,
        #[arg(long, value_parser = positive_usize)]
        width: Option<usize>,
        #[arg(long, value_parser = positive_usize)]
        height: Option<usize>,
        #[command(flatten)]
        common: CommonFlags,
    },
    /// Run every stage end to end.
    Run {
        #[arg(long)]
        model: PathBuf,
        /// Directory of depth maps named by zero-padded image id, e.g. `000042.pfm`.
        #[arg(long)]
        depth: Option<PathBuf>,
        /// Ground-truth point cloud or mesh (PLY); enables evaluation.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Last stage to run.
        #[arg(long)]
        stop_after: Option<Stage>,
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        partition: PartitionFlags,
        #[command(flatten)]
        view: ViewFlags,
        #[command(flatten)]
        fusion: FusionFlags,
        #[command(flatten)]
        tsdf: TsdfFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
}

/// A parsed and validated invocation.
#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    Pipeline {
        model: PathBuf,
        depth: Option<PathBuf>,
        gt: Option<PathBuf>,
        out: PathBuf,
        config: PipelineConfig,
    },
    FuseDepth {
        model: PathBuf,
        depth: PathBuf,
        reference: u32,
        sources: Option<Vec<u32>>,
        out: PathBuf,
        config: PipelineConfig,
    },
    Tsdf {
        model: PathBuf,
        depth: PathBuf,
        images: Option<Vec<u32>>,
        out: PathBuf,
        dump_volume: bool,
        config: PipelineConfig,
    },
    Stitch {
        regions: PathBuf,
        out: PathBuf,
        weld_tolerance: f64,
    },
    EvalMesh {
        mesh: PathBuf,
        gt: PathBuf,
        out: Option<PathBuf>,
        config: EvalConfig,
    },
    EvalRender {
        rendered: PathBuf,
        reference: PathBuf,
        max_value: Option<f64>,
        out: Option<PathBuf>,
    },
    Dsm {
        points: PathBuf,
        cell: f64,
        out: PathBuf,
        png: Option<PathBuf>,
    },
    Synth {
        out: PathBuf,
        spec: SynthSpec,
    },
}

fn context_string(err: &clap::Error, kind: ContextKind) -> Option<String> {
    match err.get(kind)? {
        ContextValue::String(s) => Some(s.clone()),
        ContextValue::Strings(v) => Some(v.join(", ")),
        other => Some(other.to_string()),
    }
}

fn map_clap_error(err: clap::Error) -> CliError {
    let arg = context_string(&err, ContextKind::InvalidArg);
    match err.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            CliError::Display(err.render().to_string())
        }
        ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => {
            CliError::UnknownFlag(arg.unwrap_or_else(|| err.to_string()))
        }
        ErrorKind::MissingRequiredArgument | ErrorKind::MissingSubcommand => {
            CliError::MissingRequired(arg.unwrap_or_else(|| "subcommand".into()))
        }
        ErrorKind::ValueValidation | ErrorKind::InvalidValue | ErrorKind::InvalidUtf8 | ErrorKind::NoEquals => {
            let reason = err
                .source()
                .map(|s| s.to_string())
                .or_else(|| context_string(&err, ContextKind::ValidValue).map(|v| format!("expected one of {v}")))
                .unwrap_or_else(|| "invalid value".into());
            CliError::InvalidValue {
                flag: arg.unwrap_or_default(),
                value: context_string(&err, ContextKind::InvalidValue).unwrap_or_default(),
                reason,
            }
        }
        _ => CliError::Usage(err.to_string()),
    }
}

use std::error::Error as _;

fn invalid(flag: &str, value: impl ToString, reason: impl ToString) -> CliError {
    CliError::InvalidValue {
        flag: flag.into(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn load_config(common: &CommonFlags, workers_env: Option<&str>) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| invalid("--config", p.display(), e))?;
            serde_json::from_str(&text).map_err(|e| invalid("--config", p.display(), e))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(v) = workers_env {
        let n = positive_usize(v).map_err(|r| invalid(WORKERS_ENV, v, r))?;
        cfg.workers = Some(n);
    }
    if let Some(n) = common.workers {
        cfg.workers = Some(n);
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.eval.seed = s;
    }
    Ok(cfg)
}

fn apply_partition(cfg: &mut PipelineConfig, f: &PartitionFlags) {
    let p = &mut cfg.partition;
    if f.grid.is_some() {
        p.grid_size = f.grid;
    }
    if let Some(v) = f.error_threshold {
        p.density.error_threshold = v;
    }
    if let Some(v) = f.density_voxel {
        p.density.voxel_size = v;
    }
    if let Some(v) = f.density_fraction {
        p.density.density_fraction = v;
    }
    if let Some(v) = f.retention {
        p.retention_fraction = v;
    }
    if let Some(v) = f.expand {
        p.expand_factor = v;
    }
}

fn apply_view(cfg: &mut PipelineConfig, f: &ViewFlags) {
    let v = &mut cfg.view_select;
    if let Some(x) = f.theta0 {
        v.theta0 = x;
    }
    if let Some(x) = f.sigma1 {
        v.sigma1 = x;
    }
    if let Some(x) = f.sigma2 {
        v.sigma2 = x;
    }
    if f.d_max.is_some() {
        v.d_max = f.d_max;
    }
    if let Some(x) = f.theta_min {
        v.theta_min = x;
    }
    if f.no_angle_cutoff {
        v.angle_cutoff = false;
    }
}

fn apply_fusion(cfg: &mut PipelineConfig, f: &FusionFlags) {
    let u = &mut cfg.fusion;
    if let Some(x) = f.sigma {
        u.sigma = x;
    }
    if f.max_error.is_some() {
        u.max_error = f.max_error;
    }
    if f.squared_error {
        u.squared_error = true;
    }
    if f.raw_transfer {
        u.transfer = DepthTransfer::Raw;
    }
    if f.no_fuse {
        cfg.fuse = false;
    }
}

fn apply_tsdf(cfg: &mut PipelineConfig, f: &TsdfFlags) {
    if let Some(v) = f.voxel {
        cfg.tsdf.voxel_size = v;
    }
    if f.truncation.is_some() {
        cfg.tsdf.truncation = f.truncation;
    }
}

fn apply_eval(cfg: &mut EvalConfig, f: &EvalFlags) {
    if !f.thresholds.is_empty() {
        cfg.thresholds = f
            .thresholds
            .iter()
            .map(|&t| if f.relative { Threshold::Relative(t) } else { Threshold::Absolute(t) })
            .collect();
    } else if f.relative {
        cfg.thresholds = vec![Threshold::Relative(0.025)];
    }
    if let Some(n) = f.samples {
        cfg.sample_count = n;
    }
    if let Some(n) = f.icp_iters {
        cfg.icp_max_iter = n;
    }
    if let Some(t) = f.icp_tol {
        cfg.icp_tolerance = t;
    }
    if f.no_align {
        cfg.align = false;
    }
}

fn checked(cfg: PipelineConfig) -> Result<PipelineConfig, CliError> {
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(cfg)
}

fn stage_command(
    model: PathBuf,
    out: PathBuf,
    common: &CommonFlags,
    partition: &PartitionFlags,
    view: &ViewFlags,
    stage: Stage,
    workers_env: Option<&str>,
) -> Result<Command, CliError> {
    let mut cfg = load_config(common, workers_env)?;
    apply_partition(&mut cfg, partition);
    apply_view(&mut cfg, view);
    cfg.stop_after = Some(stage);
    Ok(Command::Pipeline {
        model,
        depth: None,
        gt: None,
        out,
        config: checked(cfg)?,
    })
}

/// Parses `argv` (program name first). `workers_env` is the value of
/// [`WORKERS_ENV`], if set.
pub fn parse_command<I, T>(argv: I, workers_env: Option<&str>) -> Result<Command, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(map_clap_error)?;
    let cmd = match cli.command {
        Sub::Partition {
            model,
            out,
            common,
            partition,
        } => {
            let mut cfg = load_config(&common, workers_env)?;
            apply_partition(&mut cfg, &partition);
            cfg.stop_after = Some(Stage::Partition);
            Command::Pipeline {
                model,
                depth: None,
                gt: None,
                out,
                config: checked(cfg)?,
            }
        }
        Sub::AssignViews {
            model,
            out,
            common,
            partition,
            view,
        } => stage_command(model, out, &common, &partition, &view, Stage::AssignViews, workers_env)?,
        Sub::ExportRegions {
            model,
            out,
            common,
            partition,
            view,
        } => stage_command(model, out, &common, &partition, &view, Stage::ExportRegions, workers_env)?,
        Sub::FuseDepth {
            model,
            depth,
            reference,
            sources,
            out,
            common,
            view,
            fusion,
        } => {
            let mut cfg = load_config(&common, workers_env)?;
            apply_view(&mut cfg, &view);
            apply_fusion(&mut cfg, &fusion);
            Command::FuseDepth {
                model,
                depth,
                reference,
                sources: sources.map(|l| l.0),
                out,
                config: checked(cfg)?,
            }
        }
        Sub::Tsdf {
            model,
            depth,
            images,
            out,
            dump_volume,
            common,
            tsdf,
        } => {
            let mut cfg = load_config(&common, workers_env)?;
            apply_tsdf(&mut cfg, &tsdf);
            Command::Tsdf {
                model,
                depth,
                images: images.map(|l| l.0),
                out,
                dump_volume,
                config: checked(cfg)?,
            }
        }
        Sub::Stitch {
            regions,
            out,
            weld_tol,
            common,
            tsdf,
        } => {
            let mut cfg = load_config(&common, workers_env)?;
            apply_tsdf(&mut cfg, &tsdf);
            let cfg = checked(cfg)?;
            Command::Stitch {
                regions,
                out,
                weld_tolerance: weld_tol.unwrap_or(cfg.weld_fraction * cfg.tsdf.voxel_size),
            }
        }
        Sub::EvalMesh {
            mesh,
            gt,
            out,
            common,
            eval,
        } => {
            let mut cfg = load_config(&common, workers_env)?.eval;
            apply_eval(&mut cfg, &eval);
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Command::EvalMesh {
                mesh,
                gt,
                out,
                config: cfg,
            }
        }
        Sub::EvalRender {
            rendered,
            reference,
            max_value,
            out,
            common: _,
        } => Command::EvalRender {
            rendered,
            reference,
            max_value,
            out,
        },
        Sub::Dsm {
            points,
            cell,
            out,
            png,
            common: _,
        } => Command::Dsm { points, cell, out, png },
        Sub::Synth {
            out,
            spec,
            points,
            gt_samples,
            noise,
            width,
            height,
            common,
        } => {
            let mut s = match &spec {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| invalid("--spec", p.display(), e))?;
                    serde_json::from_str(&text).map_err(|e| invalid("--spec", p.display(), e))?
                }
                None => SynthSpec::city(0),
            };
            if let Some(v) = common.seed {
                s.seed = v;
            }
            if let Some(v) = points {
                s.sparse_points = v;
            }
            if let Some(v) = gt_samples {
                s.gt_samples = v;
            }
            if let Some(v) = noise {
                s.depth_noise = v;
            }
            if let Some(v) = width {
                s.width = v as u32;
            }
            if let Some(v) = height {
                s.height = v as u32;
            }
            s.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            Command::Synth { out, spec: s }
        }
        Sub::Run {
            model,
            depth,
            gt,
            out,
            stop_after,
            common,
            partition,
            view,
            fusion,
            tsdf,
            eval,
        } => {
            let mut cfg = load_config(&common, workers_env)?;
            apply_partition(&mut cfg, &partition);
            apply_view(&mut cfg, &view);
            apply_fusion(&mut cfg, &fusion);
            apply_tsdf(&mut cfg, &tsdf);
            apply_eval(&mut cfg.eval, &eval);
            if stop_after.is_some() {
                cfg.stop_after = stop_after;
            }
            let needs_depth = cfg.stop_after.is_none_or(|s| s >= Stage::FuseDepth);
            if needs_depth && depth.is_none() {
                return Err(CliError::MissingRequired("--depth".into()));
            }
            Command::Pipeline {
                model,
                depth,
                gt,
                out,
                config: checked(cfg)?,
            }
        }
    };
    Ok(cmd)
}

/// Failure while executing a parsed command.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Pipeline(#[from] tilerecon::pipeline::PipelineError),
}

fn input_err(what: impl std::fmt::Display, e: impl std::fmt::Display) -> RunError {
    RunError::Input(format!("{what}: {e}"))
}

fn load_model(dir: &Path) -> Result<SparseModel, RunError> {
    let parsed = parse_sparse_model(dir, ModelFormat::Auto).map_err(|e| input_err(dir.display(), e))?;
    for issue in &parsed.issues {
        log::warn!("model integrity: {issue:?}");
    }
    Ok(parsed.model)
}

/// Reads a PLY; meshes are sampled to `samples` points, clouds are used as is.
fn load_points(path: &Path, samples: usize, seed: u64) -> Result<Vec<nalgebra::Point3<f64>>, RunError> {
    let mesh = Mesh::read_ply(path).map_err(|e| input_err(path.display(), e))?;
    if mesh.triangles.is_empty() {
        Ok(mesh.vertices)
    } else {
        sample_mesh_points(&mesh, samples, seed).map_err(|e| input_err(path.display(), e))
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| input_err(parent.display(), e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("reports serialize") + "\n";
    fs::write(path, text).map_err(|e| input_err(path.display(), e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| input_err(parent.display(), e))?;
    }
    fs::write(path, bytes).map_err(|e| input_err(path.display(), e))
}

fn read_image(path: &Path) -> Result<Image, RunError> {
    let is_pfm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        let img = FloatImage::read(path).map_err(|e| input_err(path.display(), e))?;
        Ok(Image::from_float(&img))
    } else {
        let img = image::open(path).map_err(|e| input_err(path.display(), e))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }
}

fn thread_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, RunError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| RunError::Input(e.to_string()))
}

/// Runs a command and returns the process exit code.
pub fn execute(cmd: Command) -> Result<i32, RunError> {
    match cmd {
        Command::Pipeline {
            model,
            depth,
            gt,
            out,
            config,
        } => {
            let model = load_model(&model)?;
            let gt_points = match &gt {
                Some(p) => Some(load_points(p, config.eval.sample_count, config.seed)?),
                None => None,
            };
            let empty = BTreeMap::new();
            let dir_source;
            let source: &dyn DepthSource = match &depth {
                Some(d) => {
                    dir_source = PfmDirectory {
                        dir: d.clone(),
                        model: &model,
                    };
                    &dir_source
                }
                None => &empty,
            };
            let inputs = PipelineInputs {
                model: &model,
                depth: source,
                gt_points: gt_points.as_deref(),
            };
            let outcome = run_pipeline(&config, &inputs, Some(&out))?;
            for r in outcome.summary.regions.iter().filter(|r| !r.ok) {
                log::error!(
                    "[r{}_c{}] {}",
                    r.grid_index.row,
                    r.grid_index.col,
                    r.error.as_deref().unwrap_or("failed")
                );
            }
            Ok(outcome.summary.exit_code)
        }
        Command::FuseDepth {
            model,
            depth,
            reference,
            sources,
            out,
            config,
        } => {
            let model = load_model(&model)?;
            let source = PfmDirectory {
                dir: depth,
                model: &model,
            };
            let region = GridIndex { row: 0, col: 0 };
            let sources = match sources {
                Some(s) => s,
                None => {
                    let cands: Vec<u32> = model.images.keys().copied().collect();
                    let (g, warning) = select_source_views(reference, &cands, &model, &config.view_select)
                        .map_err(|e| input_err(format!("image {reference}"), e))?;
                    if let Some(w) = warning {
                        log::warn!("{w:?}");
                    }
                    g.src_image_ids
                }
            };
            let load = |id: u32| source.load(region, id).map_err(|e| input_err(format!("depth of image {id}"), e));
            let reference_map = load(reference)?;
            let src_maps = sources.iter().map(|&id| load(id)).collect::<Result<Vec<_>, _>>()?;
            let fused = thread_pool(config.workers)?
                .install(|| fuse_depth(&reference_map, &src_maps, &config.fusion))
                .map_err(|e| input_err("fusion", e))?;
            fs::create_dir_all(&out).map_err(|e| input_err(out.display(), e))?;
            fused
                .depth
                .write_pfm(&out.join(depth_file_name(reference)))
                .map_err(|e| input_err("fused depth", e))?;
            let weight = FloatImage {
                width: fused.depth.width(),
                height: fused.depth.height(),
                channels: 1,
                data: fused.weight.iter().map(|&w| w as f32).collect(),
            };
            weight
                .write(&out.join(format!("{reference:06}_weight.pfm")))
                .map_err(|e| input_err("weight map", e))?;
            write_json(
                &out.join(format!("{reference:06}_fusion.json")),
                &serde_json::json!({
                    "reference": reference,
                    "sources": sources,
                    "stats": fused.stats(),
                }),
            )?;
            info!("fused image {reference} with sources {sources:?}");
            Ok(EXIT_OK)
        }
        Command::Tsdf {
            model,
            depth,
            images,
            out,
            dump_volume,
            config,
        } => {
            let model = load_model(&model)?;
            let source = PfmDirectory {
                dir: depth.clone(),
                model: &model,
            };
            let ids: Vec<u32> = match images {
                Some(v) => v,
                None => model
                    .images
                    .keys()
                    .copied()
                    .filter(|id| depth.join(depth_file_name(*id)).exists())
                    .collect(),
            };
            let mut volume = TsdfVolume::new(&config.tsdf, None).map_err(|e| input_err("tsdf", e))?;
            let pool = thread_pool(config.workers)?;
            for id in &ids {
                let d = source
                    .load(GridIndex { row: 0, col: 0 }, *id)
                    .map_err(|e| input_err(format!("depth of image {id}"), e))?;
                pool.install(|| volume.integrate_depth(&d));
            }
            let mesh = pool.install(|| volume.extract_mesh()).map_err(|e| input_err("extraction", e))?;
            write_bytes(&out, &mesh.to_ply())?;
            if dump_volume {
                let (header, raw) = volume.dump_raw();
                write_bytes(&out.with_extension("raw"), &raw)?;
                write_json(&out.with_extension("json"), &header)?;
            }
            info!("{} images integrated, {} triangles", ids.len(), mesh.triangles.len());
            Ok(EXIT_OK)
        }
        Command::Stitch {
            regions,
            out,
            weld_tolerance,
        } => {
            let dir = regions.join("regions");
            let mut entries: Vec<PathBuf> = fs::read_dir(&dir)
                .map_err(|e| input_err(dir.display(), e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("mesh.ply").exists() && p.join("region.json").exists())
                .collect();
            entries.sort();
            let mut parts: Vec<(Mesh, SceneBounds)> = Vec::new();
            for e in &entries {
                let report: RegionReport = serde_json::from_slice(
                    &fs::read(e.join("region.json")).map_err(|err| input_err(e.display(), err))?,
                )
                .map_err(|err| input_err(e.join("region.json").display(), err))?;
                let mesh = Mesh::read_ply(&e.join("mesh.ply")).map_err(|err| input_err(e.display(), err))?;
                parts.push((mesh, report.crop_box));
            }
            if parts.is_empty() {
                return Err(RunError::Input(format!("no region meshes under {}", dir.display())));
            }
            let mesh = crop_and_stitch(&parts, weld_tolerance);
            write_bytes(&out, &mesh.to_ply())?;
            info!("stitched {} regions into {} triangles", parts.len(), mesh.triangles.len());
            Ok(EXIT_OK)
        }
        Command::EvalMesh { mesh, gt, out, config } => {
            let rec = load_points(&mesh, config.sample_count, config.seed)?;
            let gt = load_points(&gt, config.sample_count, config.seed.wrapping_add(1))?;
            let report = eval::evaluate_points(&rec, &gt, &config).map_err(|e| input_err("evaluation", e))?;
            for s in &report.scores {
                println!(
                    "tau {:.6}  precision {:.4}  recall {:.4}  f1 {:.4}",
                    s.tau, s.precision, s.recall, s.f1
                );
            }
            if let Some(o) = out {
                write_json(&o, &report)?;
            }
            Ok(EXIT_OK)
        }
        Command::EvalRender {
            rendered,
            reference,
            max_value,
            out,
        } => {
            let a = read_image(&rendered)?;
            let b = read_image(&reference)?;
            let is_float = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
            let max = max_value.unwrap_or(if is_float(&rendered) { 1.0 } else { 255.0 });
            let scores = image_metrics::render_scores(&a, &b, max).map_err(|e| input_err("image metrics", e))?;
            println!("psnr {:.4} dB  ssim {:.6}", scores.psnr, scores.ssim);
            if let Some(o) = out {
                write_json(&o, &scores)?;
            }
            Ok(EXIT_OK)
        }
        Command::Dsm { points, cell, out, png } => {
            let mesh = Mesh::read_ply(&points).map_err(|e| input_err(points.display(), e))?;
            let dsm = generate_dsm(&mesh.vertices, cell).map_err(|e| input_err("dsm", e))?;
            if let Some(parent) = out.parent() {
                fs::create_dir_all(parent).map_err(|e| input_err(parent.display(), e))?;
            }
            dsm.write(&out, png.as_deref()).map_err(|e| input_err(out.display(), e))?;
            write_json(&out.with_extension("json"), &dsm)?;
            info!("dsm {}x{} cells, {} filled", dsm.cols, dsm.rows, dsm.filled_cells());
            Ok(EXIT_OK)
        }
        Command::Synth { out, spec } => {
            let scene = synth_scene(&spec).map_err(|e| input_err("synth", e))?;
            scene.write(&out).map_err(|e| input_err(out.display(), e))?;
            info!(
                "synthetic scene: {} images, {} points, {} ground-truth samples",
                scene.model.images.len(),
                scene.model.points.len(),
                scene.gt_points.len()
            );
            Ok(EXIT_OK)
        }
    }
}

/// Full entry point: parse, execute, map failures to exit codes.
pub fn main_with_args<I, T>(argv: I, workers_env: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = match parse_command(argv, workers_env) {
        Ok(c) => c,
        Err(CliError::Display(text)) => {
            print!("{text}");
            return EXIT_OK;
        }
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    match execute(cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FATAL
        }
    }
}

use std::collections::BTreeMap;

use tilerecon::mv_depth::{DepthError, DepthMap};
use tilerecon::partition::GridIndex;
use tilerecon::pipeline::{
    run_pipeline, DepthSource, PfmDirectory, PipelineConfig, PipelineInputs, RunStatus, Stage,
};
use tilerecon::synth::{synth_scene, SynthScene, SynthSpec};

fn scene() -> SynthScene {
    let mut s = SynthSpec::city(5);
    for r in &mut s.rings {
        r.count = 12;
    }
    s.width = 96;
    s.height = 72;
    s.sparse_points = 8_000;
    s.outlier_points = 100;
    s.gt_samples = 20_000;
    synth_scene(&s).unwrap()
}

fn config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.partition.grid_size = Some(2);
    cfg.partition.density.voxel_size = 0.1;
    cfg.tsdf.voxel_size = 0.08;
    cfg.fusion.sigma = 0.05;
    cfg.eval.sample_count = 20_000;
    cfg
}

/// Serves depth maps except to one region.
struct FailingRegion<'a> {
    maps: &'a BTreeMap<u32, DepthMap>,
    broken: GridIndex,
}

impl DepthSource for FailingRegion<'_> {
    fn load(&self, region: GridIndex, image_id: u32) -> Result<DepthMap, DepthError> {
        if region == self.broken {
            return Err(DepthError::InvalidConfig("simulated loader failure".into()));
        }
        self.maps.load(region, image_id)
    }
}

#[test]
fn stop_after_partition_writes_only_the_partition_report() {
    let sc = scene();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg.stop_after = Some(Stage::Partition);
    let inputs = PipelineInputs {
        model: &sc.model,
        depth: &sc.depth_maps,
        gt_points: None,
    };
    let out = run_pipeline(&cfg, &inputs, Some(dir.path())).unwrap();
    assert_eq!(out.summary.stages_completed, vec![Stage::Partition]);
    assert_eq!(out.summary.exit_code, 0);
    assert!(out.mesh.is_none());
    assert!(dir.path().join("partition.json").exists());
    assert!(dir.path().join("summary.json").exists());
    assert!(!dir.path().join("assignments.json").exists());
    assert!(!dir.path().join("regions").exists());
}

#[test]
fn one_failing_region_gives_a_partial_result() {
    let sc = scene();
    let dir = tempfile::tempdir().unwrap();
    let broken = GridIndex { row: 0, col: 1 };
    let source = FailingRegion {
        maps: &sc.depth_maps,
        broken,
    };
    let inputs = PipelineInputs {
        model: &sc.model,
        depth: &source,
        gt_points: Some(&sc.gt_points),
    };
    let out = run_pipeline(&config(), &inputs, Some(dir.path())).unwrap();
    assert_eq!(out.summary.status, RunStatus::Partial);
    assert_eq!(out.summary.exit_code, 1);
    let failed: Vec<_> = out.summary.regions.iter().filter(|r| !r.ok).collect();
    assert_eq!(failed.len(), 1);
    assert_eq!(failed[0].grid_index, broken);
    assert!(failed[0].error.as_deref().unwrap().contains("simulated"));
    for r in out.summary.regions.iter().filter(|r| r.ok) {
        let mesh = dir
            .path()
            .join(format!("regions/r{}_c{}/mesh.ply", r.grid_index.row, r.grid_index.col));
        assert!(mesh.exists(), "{}", mesh.display());
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["exit_code"], 1);
    assert_eq!(summary["status"], "partial");
}

#[test]
fn all_regions_failing_is_fatal() {
    let sc = scene();
    let empty: BTreeMap<u32, DepthMap> = BTreeMap::new();
    let inputs = PipelineInputs {
        model: &sc.model,
        depth: &empty,
        gt_points: None,
    };
    let out = run_pipeline(&config(), &inputs, None).unwrap();
    assert_eq!(out.summary.status, RunStatus::Failed);
    assert_eq!(out.summary.exit_code, 3);
    assert!(out.mesh.is_none());
}

#[test]
fn pfm_directory_matches_in_memory_depth() {
    let sc = scene();
    let dir = tempfile::tempdir().unwrap();
    sc.write(dir.path()).unwrap();
    let disk = PfmDirectory {
        dir: dir.path().join("depth"),
        model: &sc.model,
    };
    let mut cfg = config();
    cfg.stop_after = Some(Stage::Tsdf);
    let run = |depth: &dyn DepthSource| {
        let inputs = PipelineInputs {
            model: &sc.model,
            depth,
            gt_points: None,
        };
        run_pipeline(&cfg, &inputs, None).unwrap()
    };
    let a = run(&sc.depth_maps);
    let b = run(&disk);
    assert_eq!(a.summary.status, RunStatus::Success);
    // PFM stores f32, so only the structure is compared
    assert_eq!(a.region_reports.len(), b.region_reports.len());
    for (x, y) in a.region_reports.iter().zip(&b.region_reports) {
        assert_eq!(x.used_images, y.used_images);
        let rel = (x.triangles as f64 - y.triangles as f64).abs() / x.triangles as f64;
        assert!(rel < 0.02, "{} vs {}", x.triangles, y.triangles);
    }
}

#[test]
fn same_seed_gives_identical_summaries() {
    let sc = scene();
    let run = |workers| {
        let mut cfg = config();
        cfg.workers = Some(workers);
        let inputs = PipelineInputs {
            model: &sc.model,
            depth: &sc.depth_maps,
            gt_points: Some(&sc.gt_points),
        };
        let out = run_pipeline(&cfg, &inputs, None).unwrap();
        (
            serde_json::to_string(&out.summary).unwrap(),
            out.mesh.unwrap().to_ply(),
        )
    };
    assert_eq!(run(1), run(3));
}

//! Synthetic scenes of axis-aligned boxes on a ground plane, observed by
//! rings of pinhole cameras. Depth maps and sparse points come from exact
//! ray casts, so they double as ground truth.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::colmap::{
    write_sparse_model, Camera, ColmapError, ImageRecord, ModelFormat, Observation, Point3D, SparseModel,
    TrackElement,
};
use crate::geometry::{Intrinsics, Pose};
use crate::mesh::{point_cloud_to_ply, Mesh};
use crate::mv_depth::{DepthError, DepthMap};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene description: {0}")]
    DegenerateSpec(String),
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Depth(#[from] DepthError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [u8; 3],
}

/// Horizontal rectangle `y = height` over `[min, max]` in x and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub height: f64,
    pub min: [f64; 2],
    pub max: [f64; 2],
    pub color: [u8; 3],
}

/// Cameras evenly spaced on a horizontal circle, all looking at `target`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRing {
    pub count: usize,
    pub radius: f64,
    pub height: f64,
    /// Ring center in x and z.
    pub center: [f64; 2],
    pub target: [f64; 3],
    pub phase_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub boxes: Vec<BoxPrimitive>,
    pub ground: Option<GroundPlane>,
    pub rings: Vec<CameraRing>,
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Sparse points with at least two observations.
    pub sparse_points: usize,
    /// Floating points with large reprojection error.
    pub outlier_points: usize,
    /// Inlier reprojection errors are drawn from `[0, max_inlier_error)`.
    pub max_inlier_error: f64,
    /// Standard deviation of additive depth noise; 0 gives exact depth.
    pub depth_noise: f64,
    pub gt_samples: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self::city(0)
    }
}

impl SynthSpec {
    /// Six buildings on a 4 x 4 ground plane with two rings of 30 cameras.
    pub fn city(seed: u64) -> Self {
        let b = |min: [f64; 3], max: [f64; 3], color: [u8; 3]| BoxPrimitive { min, max, color };
        Self {
            boxes: vec![
                b([-1.5, 0.0, -1.4], [-0.8, 0.9, -0.7], [200, 80, 70]),
                b([-0.3, 0.0, -1.5], [0.5, 0.5, -0.9], [90, 170, 90]),
                b([0.9, 0.0, -1.2], [1.5, 1.2, -0.5], [80, 90, 200]),
                b([-1.4, 0.0, 0.3], [-0.7, 0.6, 1.2], [210, 190, 80]),
                b([-0.2, 0.0, 0.1], [0.4, 1.0, 0.6], [160, 90, 180]),
                b([0.8, 0.0, 0.6], [1.6, 0.4, 1.4], [90, 190, 200]),
            ],
            ground: Some(GroundPlane {
                height: 0.0,
                min: [-2.0, -2.0],
                max: [2.0, 2.0],
                color: [128, 128, 128],
            }),
            rings: vec![
                CameraRing {
                    count: 30,
                    radius: 3.2,
                    height: 2.6,
                    center: [0.0, 0.0],
                    target: [0.0, 0.2, 0.0],
                    phase_deg: 0.0,
                },
                CameraRing {
                    count: 30,
                    radius: 1.6,
                    height: 3.6,
                    center: [0.0, 0.0],
                    target: [0.0, 0.0, 0.0],
                    phase_deg: 6.0,
                },
            ],
            width: 320,
            height: 240,
            hfov_deg: 70.0,
            sparse_points: 200_000,
            outlier_points: 2_000,
            max_inlier_error: 1.0,
            depth_noise: 0.0,
            gt_samples: 200_000,
            seed,
        }
    }

    pub fn camera_count(&self) -> usize {
        self.rings.iter().map(|r| r.count).sum()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::DegenerateSpec(m));
        if self.boxes.is_empty() && self.ground.is_none() {
            return bad("at least one primitive is required".into());
        }
        if self.camera_count() < 2 {
            return bad(format!("at least two cameras are required, got {}", self.camera_count()));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad(format!("field of view {} outside (0, 180)", self.hfov_deg));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if (0..3).any(|a| !(b.min[a] < b.max[a])) {
                return bad(format!("box {i} has empty extent"));
            }
        }
        if let Some(g) = &self.ground {
            if (0..2).any(|a| !(g.min[a] < g.max[a])) {
                return bad("ground plane has empty extent".into());
            }
        }
        for (i, r) in self.rings.iter().enumerate() {
            if !(r.radius >= 0.0) {
                return bad(format!("ring {i} has negative radius"));
            }
        }
        if !(self.depth_noise >= 0.0 && self.max_inlier_error >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// A planar rectangle `origin + s·u + t·v`, `s, t ∈ [0, 1]`.
#[derive(Debug, Clone, Copy)]
struct Face {
    origin: Point3<f64>,
    u: Vector3<f64>,
    v: Vector3<f64>,
    color: [u8; 3],
}

impl Face {
    fn area(&self) -> f64 {
        self.u.cross(&self.v).norm()
    }

    fn at(&self, s: f64, t: f64) -> Point3<f64> {
        self.origin + self.u * s + self.v * t
    }
}

/// Ray-castable geometry.
#[derive(Debug, Clone)]
pub struct SynthGeometry {
    boxes: Vec<BoxPrimitive>,
    ground: Option<GroundPlane>,
    faces: Vec<Face>,
}

impl SynthGeometry {
    pub fn new(boxes: &[BoxPrimitive], ground: Option<GroundPlane>) -> Self {
        let mut faces = Vec::new();
        if let Some(g) = ground {
            // wound so the normal points up
            faces.push(Face {
                origin: Point3::new(g.min[0], g.height, g.min[1]),
                u: Vector3::new(0.0, 0.0, g.max[1] - g.min[1]),
                v: Vector3::new(g.max[0] - g.min[0], 0.0, 0.0),
                color: g.color,
            });
        }
        for b in boxes {
            let (lo, hi) = (Point3::from(b.min), Point3::from(b.max));
            let d = hi - lo;
            let (ex, ey, ez) = (Vector3::new(d.x, 0.0, 0.0), Vector3::new(0.0, d.y, 0.0), Vector3::new(0.0, 0.0, d.z));
            let f = |origin: Point3<f64>, u: Vector3<f64>, v: Vector3<f64>| Face {
                origin,
                u,
                v,
                color: b.color,
            };
            // outward normals; the bottom rests on the ground and is skipped
            faces.push(f(Point3::new(lo.x, hi.y, lo.z), ez, ex));
            faces.push(f(lo, ey, ez));
            faces.push(f(Point3::new(hi.x, lo.y, lo.z), ez, ey));
            faces.push(f(lo, ex, ey));
            faces.push(f(Point3::new(lo.x, lo.y, hi.z), ey, ex));
        }
        Self {
            boxes: boxes.to_vec(),
            ground,
            faces,
        }
    }

    pub fn from_spec(spec: &SynthSpec) -> Self {
        Self::new(&spec.boxes, spec.ground)
    }

    /// Smallest `t > 0` with `origin + t·dir` on a surface, and its color.
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, [u8; 3])> {
        let mut best: Option<(f64, [u8; 3])> = None;
        let mut consider = |t: f64, c: [u8; 3]| {
            if t > 1e-12 && best.is_none_or(|b| t < b.0) {
                best = Some((t, c));
            }
        };
        if let Some(g) = &self.ground {
            if dir.y != 0.0 {
                let t = (g.height - origin.y) / dir.y;
                let p = origin + dir * t;
                if p.x >= g.min[0] && p.x <= g.max[0] && p.z >= g.min[1] && p.z <= g.max[1] {
                    consider(t, g.color);
                }
            }
        }
        for b in &self.boxes {
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut hit = true;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < b.min[a] || origin[a] > b.max[a] {
                        hit = false;
                        break;
                    }
                    continue;
                }
                let (ta, tb) = ((b.min[a] - origin[a]) / dir[a], (b.max[a] - origin[a]) / dir[a]);
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
            if hit && t0 <= t1 && t0 > 0.0 {
                consider(t0, b.color);
            }
        }
        best
    }

    /// True when `p` lies strictly inside a box or on ground covered by one.
    fn buried(&self, p: &Point3<f64>) -> bool {
        self.boxes.iter().any(|b| {
            (0..3).all(|a| p[a] > b.min[a] && p[a] < b.max[a])
                || (p.y <= b.min[1] && p.x > b.min[0] && p.x < b.max[0] && p.z > b.min[2] && p.z < b.max[2])
        })
    }

    fn visible_from(&self, center: &Point3<f64>, p: &Point3<f64>) -> bool {
        let dir = p - center;
        match self.cast(center, &dir) {
            Some((t, _)) => t >= 1.0 - 1e-9,
            None => true,
        }
    }

    /// Area-weighted uniform surface samples, excluding buried patches.
    fn sample_surface(&self, rng: &mut ChaCha8Rng) -> (Point3<f64>, [u8; 3]) {
        let total: f64 = self.faces.iter().map(Face::area).sum();
        loop {
            let mut target = rng.random::<f64>() * total;
            let mut face = &self.faces[self.faces.len() - 1];
            for f in &self.faces {
                if target < f.area() {
                    face = f;
                    break;
                }
                target -= f.area();
            }
            let p = face.at(rng.random(), rng.random());
            if !self.buried(&p) {
                return (p, face.color);
            }
        }
    }

    /// Closed-form mesh of every primitive surface (ground as one quad).
    pub fn mesh(&self) -> Mesh {
        let mut m = Mesh::default();
        for f in &self.faces {
            let base = m.vertices.len() as u32;
            m.vertices.extend([f.at(0.0, 0.0), f.at(1.0, 0.0), f.at(1.0, 1.0), f.at(0.0, 1.0)]);
            m.triangles.push([base, base + 1, base + 2]);
            m.triangles.push([base, base + 2, base + 3]);
        }
        m.compute_vertex_normals();
        m
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub spec: SynthSpec,
    pub model: SparseModel,
    /// One depth map per image, keyed by image id.
    pub depth_maps: BTreeMap<u32, DepthMap>,
    pub gt_mesh: Mesh,
    pub gt_points: Vec<Point3<f64>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_POINTS: u64 = 1 << 40;
const STREAM_OUTLIERS: u64 = (1 << 40) + 1;
const STREAM_GT: u64 = (1 << 40) + 2;

/// Renders the exact camera-frame depth of every pixel center; misses are 0.
pub fn render_depth(geometry: &SynthGeometry, k: &Intrinsics, pose: &Pose) -> Vec<f64> {
    let center = pose.center();
    let rt = pose.rotation.inverse();
    let mut out = vec![0.0; k.pixel_count()];
    for row in 0..k.height as usize {
        for col in 0..k.width as usize {
            let dir_cam = Vector3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
            if let Some((t, _)) = geometry.cast(&center, &(rt * dir_cam)) {
                out[row * k.width as usize + col] = t;
            }
        }
    }
    out
}

pub fn synth_scene(spec: &SynthSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let geometry = SynthGeometry::from_spec(spec);
    let k = Intrinsics::from_fov(spec.width, spec.height, spec.hfov_deg);
    let mut model = SparseModel::default();
    model.cameras.insert(1, Camera::pinhole(1, &k));

    let mut image_id = 1u32;
    for ring in &spec.rings {
        for i in 0..ring.count {
            let phi = (ring.phase_deg + 360.0 * i as f64 / ring.count as f64).to_radians();
            let c = Point3::new(
                ring.center[0] + ring.radius * phi.cos(),
                ring.height,
                ring.center[1] + ring.radius * phi.sin(),
            );
            let pose = Pose::look_at(&c, &Point3::from(ring.target), &Vector3::y());
            model.images.insert(
                image_id,
                ImageRecord {
                    image_id,
                    camera_id: 1,
                    qvec: pose.quaternion(),
                    tvec: pose.translation.into(),
                    name: format!("view_{image_id:04}.png"),
                    observations: Vec::new(),
                },
            );
            image_id += 1;
        }
    }

    // poses as the model stores them, so consumers see the same numbers
    let views: Vec<(u32, Pose)> = model.images.values().map(|r| (r.image_id, r.pose())).collect();

    let depth_maps: BTreeMap<u32, DepthMap> = views
        .par_iter()
        .map(|(id, pose)| {
            let mut d = render_depth(&geometry, &k, pose);
            if spec.depth_noise > 0.0 {
                let normal = Normal::new(0.0, spec.depth_noise).expect("noise is finite and non-negative");
                let mut rng = stream_rng(spec.seed, *id as u64);
                for v in d.iter_mut().filter(|v| **v > 0.0) {
                    *v = (*v + normal.sample(&mut rng)).max(1e-6);
                }
            }
            DepthMap::new(k, *pose, d).map(|m| (*id, m))
        })
        .collect::<Result<_, _>>()?;

    // inlier points: sample sequentially, test visibility in parallel
    let mut rng = stream_rng(spec.seed, STREAM_POINTS);
    let mut points: Vec<(Point3<f64>, [u8; 3], f64, Vec<(u32, f64, f64)>)> = Vec::with_capacity(spec.sparse_points);
    let mut attempts = 0usize;
    while points.len() < spec.sparse_points && attempts < spec.sparse_points.max(1) * 20 {
        let batch = (spec.sparse_points - points.len()).max(64);
        attempts += batch;
        let cands: Vec<(Point3<f64>, [u8; 3], f64)> = (0..batch)
            .map(|_| {
                let (p, c) = geometry.sample_surface(&mut rng);
                (p, c, rng.random::<f64>() * spec.max_inlier_error)
            })
            .collect();
        let tracks: Vec<Vec<(u32, f64, f64)>> = cands
            .par_iter()
            .map(|(p, _, _)| {
                views
                    .iter()
                    .filter_map(|(id, pose)| {
                        let (u, v) = k.project(&pose.to_camera(p)).ok()?;
                        (k.contains(u, v) && geometry.visible_from(&pose.center(), p)).then_some((*id, u, v))
                    })
                    .collect()
            })
            .collect();
        for ((p, c, e), t) in cands.into_iter().zip(tracks) {
            if t.len() >= 2 && points.len() < spec.sparse_points {
                points.push((p, c, e, t));
            }
        }
    }

    let mut rng = stream_rng(spec.seed, STREAM_OUTLIERS);
    let sb = crate::geometry::SceneBounds::from_points(geometry.mesh().vertices.iter());
    let mut outliers = 0;
    let mut tries = 0;
    while outliers < spec.outlier_points && tries < spec.outlier_points * 50 {
        tries += 1;
        let p = Point3::new(
            rng.random_range(sb.min[0]..=sb.max[0]),
            rng.random_range(sb.min[1]..=sb.max[1] + 0.5),
            rng.random_range(sb.min[2]..=sb.max[2]),
        );
        let track: Vec<(u32, f64, f64)> = views
            .iter()
            .filter_map(|(id, pose)| {
                let (u, v) = k.project(&pose.to_camera(&p)).ok()?;
                k.contains(u, v).then_some((*id, u, v))
            })
            .take(2)
            .collect();
        if track.len() == 2 {
            let e = rng.random_range(2.0..5.0);
            points.push((p, [255, 0, 255], e, track));
            outliers += 1;
        }
    }

    let mut pts = IndexMap::with_capacity(points.len());
    for (i, (p, color, error, track)) in points.into_iter().enumerate() {
        let pid = i as u64 + 1;
        let mut elems = Vec::with_capacity(track.len());
        for (iid, u, v) in track {
            let rec = model.images.get_mut(&iid).expect("track images exist");
            elems.push(TrackElement {
                image_id: iid,
                point2d_idx: rec.observations.len() as u32,
            });
            rec.observations.push(Observation {
                x: u,
                y: v,
                point3d_id: Some(pid),
            });
        }
        pts.insert(
            pid,
            Point3D {
                point_id: pid,
                xyz: p.into(),
                color,
                error,
                track: elems,
            },
        );
    }
    model.points = pts;

    let mut rng = stream_rng(spec.seed, STREAM_GT);
    let gt_points = (0..spec.gt_samples).map(|_| geometry.sample_surface(&mut rng).0).collect();

    Ok(SynthScene {
        spec: spec.clone(),
        model,
        depth_maps,
        gt_mesh: geometry.mesh(),
        gt_points,
    })
}

impl SynthScene {
    /// Writes `spec.json`, `sparse/` (binary model), `depth/<image id>.pfm`,
    /// `gt_mesh.ply` and `gt_points.ply`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir.join("sparse"))?;
        fs::create_dir_all(dir.join("depth"))?;
        fs::write(
            dir.join("spec.json"),
            serde_json::to_string_pretty(&self.spec).expect("spec serializes"),
        )?;
        write_sparse_model(&self.model, &dir.join("sparse"), ModelFormat::Binary)?;
        for (id, d) in &self.depth_maps {
            d.write_pfm(&dir.join("depth").join(depth_file_name(*id)))?;
        }
        fs::write(dir.join("gt_mesh.ply"), self.gt_mesh.to_ply())?;
        fs::write(dir.join("gt_points.ply"), point_cloud_to_ply(&self.gt_points))?;
        Ok(())
    }
}

pub fn depth_file_name(image_id: u32) -> String {
    format!("{image_id:06}.pfm")
}

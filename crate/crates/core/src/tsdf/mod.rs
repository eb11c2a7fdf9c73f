//! Sparse TSDF volumes, marching-cubes extraction and region crop/stitch.
//!
//! Voxel `(i, j, k)` is centered at `(i, j, k) * voxel_size` in world space,
//! so every volume shares one global lattice and neighbouring regions sample
//! identical positions along their seams. Storage is allocated in 16^3
//! blocks, only where depth observations fall inside the truncation band.

pub mod marching;
pub mod stitch;

use std::collections::{HashMap, HashSet};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::SceneBounds;
use crate::mesh::Mesh;
use crate::mv_depth::DepthMap;

pub use stitch::{crop_and_stitch, crop_mesh, weld_vertices};

const BLOCK: i64 = 16;
const BLOCK_VOXELS: usize = (BLOCK * BLOCK * BLOCK) as usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TsdfError {
    #[error("volume has no observed voxels")]
    EmptyVolume,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsdfConfig {
    pub voxel_size: f64,
    /// Defaults to four voxels.
    pub truncation: Option<f64>,
}

impl Default for TsdfConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.4,
            truncation: None,
        }
    }
}

impl TsdfConfig {
    pub fn validate(&self) -> Result<(), TsdfError> {
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(TsdfError::InvalidConfig("voxel_size must be > 0".into()));
        }
        if let Some(t) = self.truncation {
            if !(t > 0.0) {
                return Err(TsdfError::InvalidConfig("truncation must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn effective_truncation(&self) -> f64 {
        self.truncation.unwrap_or(4.0 * self.voxel_size)
    }
}

type BlockKey = [i64; 3];

#[derive(Debug, Clone)]
struct Block {
    sdf: Vec<f64>,
    weight: Vec<f32>,
}

impl Block {
    fn new() -> Self {
        Self {
            sdf: vec![0.0; BLOCK_VOXELS],
            weight: vec![0.0; BLOCK_VOXELS],
        }
    }
}

fn local_index(l: [i64; 3]) -> usize {
    (l[0] + BLOCK * (l[1] + BLOCK * l[2])) as usize
}

fn split(v: [i64; 3]) -> (BlockKey, [i64; 3]) {
    let key = v.map(|c| c.div_euclid(BLOCK));
    let local = [
        v[0].rem_euclid(BLOCK),
        v[1].rem_euclid(BLOCK),
        v[2].rem_euclid(BLOCK),
    ];
    (key, local)
}

#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub voxel_size: f64,
    pub truncation: f64,
    /// Voxel centers outside these bounds are never allocated or updated.
    pub bounds: Option<SceneBounds>,
    index: HashMap<BlockKey, usize>,
    keys: Vec<BlockKey>,
    blocks: Vec<Block>,
}

/// JSON header accompanying a raw volume dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeDumpHeader {
    /// World position of the first voxel center.
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub truncation: f64,
    pub dims: [usize; 3],
    pub dtype: String,
    pub order: String,
    pub unobserved: String,
}

impl TsdfVolume {
    pub fn new(cfg: &TsdfConfig, bounds: Option<SceneBounds>) -> Result<Self, TsdfError> {
        cfg.validate()?;
        Ok(Self {
            voxel_size: cfg.voxel_size,
            truncation: cfg.effective_truncation(),
            bounds,
            index: HashMap::new(),
            keys: Vec::new(),
            blocks: Vec::new(),
        })
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn voxel_center(&self, v: [i64; 3]) -> Point3<f64> {
        Point3::new(
            v[0] as f64 * self.voxel_size,
            v[1] as f64 * self.voxel_size,
            v[2] as f64 * self.voxel_size,
        )
    }

    fn voxel_of(&self, p: &Point3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / self.voxel_size).round() as i64)
    }

    fn block_overlaps_bounds(&self, key: &BlockKey) -> bool {
        let Some(b) = &self.bounds else {
            return true;
        };
        (0..3).all(|a| {
            let lo = (key[a] * BLOCK) as f64 * self.voxel_size;
            let hi = ((key[a] + 1) * BLOCK - 1) as f64 * self.voxel_size;
            hi >= b.min[a] && lo <= b.max[a]
        })
    }

    fn ensure_block(&mut self, key: BlockKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.blocks.len();
        self.index.insert(key, i);
        self.keys.push(key);
        self.blocks.push(Block::new());
        i
    }

    /// Signed distance and weight of a voxel, if it is allocated.
    pub fn voxel(&self, v: [i64; 3]) -> Option<(f64, f32)> {
        let (key, local) = split(v);
        let b = &self.blocks[*self.index.get(&key)?];
        let i = local_index(local);
        Some((b.sdf[i], b.weight[i]))
    }

    pub fn observed_voxels(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.iter().filter(|w| **w > 0.0).count())
            .sum()
    }

    /// Blocks whose voxels may fall in the truncation band of `depth`.
    fn touched_blocks(&self, depth: &DepthMap) -> Vec<BlockKey> {
        let k = &depth.intrinsics;
        let t = self.truncation;
        let block_len = BLOCK as f64 * self.voxel_size;
        let margin = self.voxel_size;
        let mut set: HashSet<BlockKey> = HashSet::new();
        for row in 0..depth.height() {
            for col in 0..depth.width() {
                let Some(d) = depth.get(col, row) else {
                    continue;
                };
                let near = (d - t).max(1e-9);
                let far = d + t;
                let a = depth.pose.to_world(&k.unproject(col as f64, row as f64, near));
                let b = depth.pose.to_world(&k.unproject(col as f64, row as f64, far));
                let n = ((b - a).norm() / (0.5 * block_len)).ceil().max(1.0) as usize;
                for s in 0..=n {
                    let p = a + (b - a) * (s as f64 / n as f64);
                    let lo = self.voxel_of(&(p - Vector3::repeat(margin)));
                    let hi = self.voxel_of(&(p + Vector3::repeat(margin)));
                    let (klo, _) = split(lo);
                    let (khi, _) = split(hi);
                    for x in klo[0]..=khi[0] {
                        for y in klo[1]..=khi[1] {
                            for z in klo[2]..=khi[2] {
                                set.insert([x, y, z]);
                            }
                        }
                    }
                }
            }
        }
        let mut out: Vec<BlockKey> = set
            .into_iter()
            .filter(|key| self.block_overlaps_bounds(key))
            .collect();
        out.sort_unstable();
        out
    }

    /// Fuses one depth map; returns the number of voxel updates.
    pub fn integrate_depth(&mut self, depth: &DepthMap) -> usize {
        let touched = self.touched_blocks(depth);
        if touched.is_empty() {
            return 0;
        }
        let mut mask = vec![false; self.blocks.len()];
        for key in touched {
            let i = self.ensure_block(key);
            if i >= mask.len() {
                mask.resize(i + 1, false);
            }
            mask[i] = true;
        }
        let (v, t) = (self.voxel_size, self.truncation);
        let bounds = self.bounds;
        let keys = &self.keys;
        let counts: Vec<usize> = self
            .blocks
            .par_iter_mut()
            .zip(mask.par_iter())
            .enumerate()
            .filter(|(_, (_, m))| **m)
            .map(|(bi, (block, _))| {
                let key = keys[bi];
                let mut updated = 0;
                for lz in 0..BLOCK {
                    for ly in 0..BLOCK {
                        for lx in 0..BLOCK {
                            let g = [key[0] * BLOCK + lx, key[1] * BLOCK + ly, key[2] * BLOCK + lz];
                            let p = Point3::new(g[0] as f64 * v, g[1] as f64 * v, g[2] as f64 * v);
                            if bounds.as_ref().is_some_and(|b| !b.contains(&p)) {
                                continue;
                            }
                            let cam = depth.pose.to_camera(&p);
                            if cam.z <= 0.0 {
                                continue;
                            }
                            let Ok((u, vv)) = depth.intrinsics.project(&cam) else {
                                continue;
                            };
                            if !depth.intrinsics.contains(u, vv) {
                                continue;
                            }
                            let Some(d) = lookup_depth(depth, u, vv, t) else {
                                continue;
                            };
                            let ds = d - cam.z;
                            if ds <= -t || ds > t {
                                continue;
                            }
                            let i = local_index([lx, ly, lz]);
                            let w = block.weight[i] as f64;
                            block.sdf[i] = (block.sdf[i] * w + ds) / (w + 1.0);
                            block.weight[i] += 1.0;
                            updated += 1;
                        }
                    }
                }
                updated
            })
            .collect();
        counts.into_iter().sum()
    }

    /// Sets every voxel center inside `region` from an analytic signed
    /// distance (clamped to the truncation) with unit weight.
    pub fn fill_analytic<F: Fn(&Point3<f64>) -> f64 + Sync>(&mut self, region: &SceneBounds, f: F) {
        let lo = self.voxel_of(&Point3::from(region.min));
        let hi = self.voxel_of(&Point3::from(region.max));
        let (klo, _) = split(lo);
        let (khi, _) = split(hi);
        for x in klo[0]..=khi[0] {
            for y in klo[1]..=khi[1] {
                for z in klo[2]..=khi[2] {
                    if self.block_overlaps_bounds(&[x, y, z]) {
                        self.ensure_block([x, y, z]);
                    }
                }
            }
        }
        let (v, t) = (self.voxel_size, self.truncation);
        let bounds = self.bounds;
        let keys = &self.keys;
        self.blocks.par_iter_mut().enumerate().for_each(|(bi, block)| {
            let key = keys[bi];
            for lz in 0..BLOCK {
                for ly in 0..BLOCK {
                    for lx in 0..BLOCK {
                        let g = [key[0] * BLOCK + lx, key[1] * BLOCK + ly, key[2] * BLOCK + lz];
                        let p = Point3::new(g[0] as f64 * v, g[1] as f64 * v, g[2] as f64 * v);
                        if !region.contains(&p) || bounds.as_ref().is_some_and(|b| !b.contains(&p)) {
                            continue;
                        }
                        let i = local_index([lx, ly, lz]);
                        block.sdf[i] = f(&p).clamp(-t, t);
                        block.weight[i] = 1.0;
                    }
                }
            }
        });
    }

    /// Marching cubes over every cube whose eight corners are observed.
    pub fn extract_mesh(&self) -> Result<Mesh, TsdfError> {
        if self.observed_voxels() == 0 {
            return Err(TsdfError::EmptyVolume);
        }
        let table = marching::case_table();
        let edges = marching::edges();
        let mut order: Vec<usize> = (0..self.blocks.len()).collect();
        order.sort_unstable_by_key(|&i| self.keys[i]);
        let mut vertex_ids: HashMap<([i64; 3], usize), u32> = HashMap::new();
        let mut mesh = Mesh::default();
        let mut corner_vals = [0.0f64; 8];
        for bi in order {
            let key = self.keys[bi];
            let block = &self.blocks[bi];
            for lz in 0..BLOCK {
                for ly in 0..BLOCK {
                    for lx in 0..BLOCK {
                        if block.weight[local_index([lx, ly, lz])] <= 0.0 {
                            continue;
                        }
                        let g = [key[0] * BLOCK + lx, key[1] * BLOCK + ly, key[2] * BLOCK + lz];
                        let mut complete = true;
                        let mut case = 0usize;
                        for (c, off) in marching::CORNERS.iter().enumerate() {
                            let l = [lx + off[0] as i64, ly + off[1] as i64, lz + off[2] as i64];
                            let val = if l.iter().all(|x| *x < BLOCK) {
                                let i = local_index(l);
                                (block.weight[i] > 0.0).then_some(block.sdf[i])
                            } else {
                                let gv = [g[0] + off[0] as i64, g[1] + off[1] as i64, g[2] + off[2] as i64];
                                self.voxel(gv).and_then(|(s, w)| (w > 0.0).then_some(s))
                            };
                            match val {
                                Some(s) => {
                                    corner_vals[c] = s;
                                    if s < 0.0 {
                                        case |= 1 << c;
                                    }
                                }
                                None => {
                                    complete = false;
                                    break;
                                }
                            }
                        }
                        if !complete || case == 0 || case == 255 {
                            continue;
                        }
                        for tri in &table[case] {
                            let mut ids = [0u32; 3];
                            for (slot, &e) in tri.iter().enumerate() {
                                let edge = edges[e as usize];
                                let ca = marching::CORNERS[edge.a];
                                let ga = [g[0] + ca[0] as i64, g[1] + ca[1] as i64, g[2] + ca[2] as i64];
                                let (sa, sb) = (corner_vals[edge.a], corner_vals[edge.b]);
                                // a crossing exactly at a corner becomes that corner's vertex
                                let key = if sa == 0.0 {
                                    (ga, 3)
                                } else if sb == 0.0 {
                                    let mut gb = ga;
                                    gb[edge.axis] += 1;
                                    (gb, 3)
                                } else {
                                    (ga, edge.axis)
                                };
                                let id = *vertex_ids.entry(key).or_insert_with(|| {
                                    let mut p = self.voxel_center(key.0);
                                    if key.1 < 3 {
                                        p[edge.axis] += sa / (sa - sb) * self.voxel_size;
                                    }
                                    mesh.vertices.push(p);
                                    (mesh.vertices.len() - 1) as u32
                                });
                                ids[slot] = id;
                            }
                            mesh.triangles.push(ids);
                        }
                    }
                }
            }
        }
        mesh.triangles.retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
        mesh.compact();
        mesh.compute_vertex_normals();
        Ok(mesh)
    }

    /// Dense float32 grid over the allocated blocks (x fastest), NaN where
    /// unobserved, plus its header.
    pub fn dump_raw(&self) -> (VolumeDumpHeader, Vec<u8>) {
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for key in &self.keys {
            for a in 0..3 {
                lo[a] = lo[a].min(key[a] * BLOCK);
                hi[a] = hi[a].max((key[a] + 1) * BLOCK);
            }
        }
        if self.keys.is_empty() {
            lo = [0; 3];
            hi = [0; 3];
        }
        let dims = [0, 1, 2].map(|a| (hi[a] - lo[a]) as usize);
        let mut out = Vec::with_capacity(dims.iter().product::<usize>() * 4);
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                for x in lo[0]..hi[0] {
                    let v = match self.voxel([x, y, z]) {
                        Some((s, w)) if w > 0.0 => s as f32,
                        _ => f32::NAN,
                    };
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = VolumeDumpHeader {
            origin: self.voxel_center(lo).into(),
            voxel_size: self.voxel_size,
            truncation: self.truncation,
            dims,
            dtype: "float32_le".into(),
            order: "x_fastest".into(),
            unobserved: "NaN".into(),
        };
        (header, out)
    }
}

/// Nearest-pixel depth, refined bilinearly when the four surrounding pixels
/// are valid and agree to within the truncation distance.
fn lookup_depth(depth: &DepthMap, u: f64, v: f64, t: f64) -> Option<f64> {
    let (w, h) = (depth.width(), depth.height());
    let (cn, rn) = (u.round().max(0.0) as usize, v.round().max(0.0) as usize);
    let nearest = depth.get(cn.min(w - 1), rn.min(h - 1))?;
    let (c0, r0) = (u.floor(), v.floor());
    if c0 < 0.0 || r0 < 0.0 || c0 as usize + 1 >= w || r0 as usize + 1 >= h {
        return Some(nearest);
    }
    let (c0, r0) = (c0 as usize, r0 as usize);
    let q = [
        depth.get(c0, r0),
        depth.get(c0 + 1, r0),
        depth.get(c0, r0 + 1),
        depth.get(c0 + 1, r0 + 1),
    ];
    let [Some(a), Some(b), Some(c), Some(d)] = q else {
        return Some(nearest);
    };
    let lo = a.min(b).min(c).min(d);
    let hi = a.max(b).max(c).max(d);
    if hi - lo > t {
        return Some(nearest);
    }
    let (fu, fv) = (u - c0 as f64, v - r0 as f64);
    Some((a * (1.0 - fu) + b * fu) * (1.0 - fv) + (c * (1.0 - fu) + d * fu) * fv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Intrinsics, Pose};

    fn cfg(v: f64) -> TsdfConfig {
        TsdfConfig {
            voxel_size: v,
            truncation: None,
        }
    }

    #[test]
    fn empty_depth_leaves_volume_unchanged() {
        let mut vol = TsdfVolume::new(&cfg(0.1), None).unwrap();
        let k = Intrinsics::new(8, 8, 8.0, 8.0, 3.5, 3.5);
        let d = DepthMap::filled(k, Pose::identity(), 0.0);
        assert_eq!(vol.integrate_depth(&d), 0);
        assert_eq!(vol.block_count(), 0);
        assert_eq!(vol.extract_mesh().unwrap_err(), TsdfError::EmptyVolume);
    }

    #[test]
    fn plane_sdf_changes_sign_along_axis() {
        let mut vol = TsdfVolume::new(&cfg(0.05), None).unwrap();
        // narrow field of view approximates an orthographic view
        let k = Intrinsics::new(21, 21, 2000.0, 2000.0, 10.0, 10.0);
        let d = DepthMap::filled(k, Pose::identity(), 2.0);
        assert!(vol.integrate_depth(&d) > 0);
        // voxels on the optical axis: z = 2 - 0.05 * n
        for n in -3..=3i64 {
            let (s, w) = vol.voxel([0, 0, 40 - n]).unwrap();
            assert_eq!(w, 1.0);
            assert!((s - n as f64 * 0.05).abs() < 1e-12, "n={n} s={s}");
        }
        // a voxel beyond the truncation band is not touched
        let t_voxels = 4;
        let behind = vol.voxel([0, 0, 40 + t_voxels + 1]).map_or(0.0, |v| v.1);
        assert_eq!(behind, 0.0);
    }

    #[test]
    fn analytic_plane_mesh() {
        let v = 0.1;
        let mut vol = TsdfVolume::new(&cfg(v), None).unwrap();
        let region = SceneBounds::new([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]);
        vol.fill_analytic(&region, |p| p.z - 0.23);
        let m = vol.extract_mesh().unwrap();
        assert!(!m.is_empty());
        for p in &m.vertices {
            assert!((p.z - 0.23).abs() < v);
        }
        for n in m.normals.as_ref().unwrap() {
            assert!((n - Vector3::z()).norm() < 1e-9);
        }
    }

    #[test]
    fn analytic_sphere_mesh_is_close_and_closed() {
        let v = 0.1;
        let mut vol = TsdfVolume::new(&cfg(v), None).unwrap();
        let region = SceneBounds::new([-1.5; 3], [1.5; 3]);
        vol.fill_analytic(&region, |p| p.coords.norm() - 1.0);
        let m = vol.extract_mesh().unwrap();
        for p in &m.vertices {
            assert!((p.coords.norm() - 1.0).abs() < v);
        }
        assert!(m.boundary_edges().is_empty());
        // outward normals
        for (p, n) in m.vertices.iter().zip(m.normals.as_ref().unwrap()) {
            assert!(n.dot(&p.coords) > 0.0);
        }
    }

    #[test]
    fn all_positive_gives_empty_mesh() {
        let mut vol = TsdfVolume::new(&cfg(0.1), None).unwrap();
        vol.fill_analytic(&SceneBounds::new([0.0; 3], [1.0; 3]), |_| 1.0);
        assert!(vol.extract_mesh().unwrap().is_empty());
    }

    #[test]
    fn bounds_limit_allocation() {
        let b = SceneBounds::new([-0.2, -0.2, 1.0], [0.2, 0.2, 3.0]);
        let mut vol = TsdfVolume::new(&cfg(0.05), Some(b)).unwrap();
        let k = Intrinsics::new(64, 64, 40.0, 40.0, 31.5, 31.5);
        vol.integrate_depth(&DepthMap::filled(k, Pose::identity(), 2.0));
        let (header, raw) = vol.dump_raw();
        assert_eq!(raw.len(), header.dims.iter().product::<usize>() * 4);
        for bi in 0..vol.blocks.len() {
            assert!(vol.block_overlaps_bounds(&vol.keys[bi]));
        }
        assert!(vol.voxel([10, 0, 40]).is_none_or(|(_, w)| w == 0.0));
    }
}

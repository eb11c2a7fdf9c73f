//! Clipping region meshes to their partition boxes and welding them into
//! one surface.

use std::collections::{HashMap, HashSet};

use nalgebra::Point3;

use crate::geometry::SceneBounds;
use crate::mesh::Mesh;

fn bits(p: &Point3<f64>) -> [u64; 3] {
    [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
}

/// Intersection of segment `pq` with the plane `x[axis] = value`, computed
/// from a canonical endpoint order so both neighbours of an edge agree
/// bit for bit. The result lies exactly on the plane.
fn intersect(p: &Point3<f64>, q: &Point3<f64>, axis: usize, value: f64) -> Point3<f64> {
    let (a, b) = if bits(p) <= bits(q) { (p, q) } else { (q, p) };
    let t = (value - a[axis]) / (b[axis] - a[axis]);
    let mut x = a + (b - a) * t;
    x[axis] = value;
    x
}

fn clip_polygon(poly: Vec<Point3<f64>>, axis: usize, value: f64, keep_above: bool) -> Vec<Point3<f64>> {
    let inside = |p: &Point3<f64>| {
        if keep_above {
            p[axis] >= value
        } else {
            p[axis] <= value
        }
    };
    let n = poly.len();
    let mut out = Vec::with_capacity(n + 2);
    for i in 0..n {
        let p = &poly[(i + n - 1) % n];
        let q = &poly[i];
        match (inside(p), inside(q)) {
            (true, true) => out.push(*q),
            (false, true) => {
                out.push(intersect(p, q, axis, value));
                out.push(*q);
            }
            (true, false) => out.push(intersect(p, q, axis, value)),
            (false, false) => {}
        }
    }
    out
}

/// Output builder that merges bit-identical positions, in first-use order.
struct Builder {
    ids: HashMap<[u64; 3], u32>,
    mesh: Mesh,
}

impl Builder {
    fn new() -> Self {
        Self {
            ids: HashMap::new(),
            mesh: Mesh::default(),
        }
    }

    fn vertex(&mut self, p: &Point3<f64>) -> u32 {
        let mesh = &mut self.mesh;
        *self.ids.entry(bits(p)).or_insert_with(|| {
            mesh.vertices.push(*p);
            (mesh.vertices.len() - 1) as u32
        })
    }

    fn triangle(&mut self, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) {
        if (b - a).cross(&(c - a)).norm_squared() == 0.0 {
            return;
        }
        let t = [self.vertex(a), self.vertex(b), self.vertex(c)];
        if t[0] != t[1] && t[1] != t[2] && t[0] != t[2] {
            self.mesh.triangles.push(t);
        }
    }
}

/// Clips every triangle to the closed box; straddling triangles are split
/// at the box planes. Idempotent.
pub fn crop_mesh(mesh: &Mesh, bounds: &SceneBounds) -> Mesh {
    let mut out = Builder::new();
    for t in 0..mesh.triangles.len() {
        let tri = mesh.triangle(t);
        if tri.iter().all(|p| bounds.contains(p)) {
            out.triangle(&tri[0], &tri[1], &tri[2]);
            continue;
        }
        let mut poly = tri.to_vec();
        for axis in 0..3 {
            poly = clip_polygon(poly, axis, bounds.min[axis], true);
            if poly.len() < 3 {
                break;
            }
            poly = clip_polygon(poly, axis, bounds.max[axis], false);
            if poly.len() < 3 {
                break;
            }
        }
        if poly.len() < 3 {
            continue;
        }
        for j in 1..poly.len() - 1 {
            out.triangle(&poly[0], &poly[j], &poly[j + 1]);
        }
    }
    out.mesh
}

/// Merges vertices closer than `tolerance` (each joins the earliest
/// representative within reach), then drops collapsed and duplicate faces.
pub fn weld_vertices(mesh: &Mesh, tolerance: f64) -> Mesh {
    let cell = |p: &Point3<f64>| -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / tolerance).floor() as i64)
    };
    let mut grid: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
    let mut reps: Vec<Point3<f64>> = Vec::new();
    let mut remap = Vec::with_capacity(mesh.vertices.len());
    for p in &mesh.vertices {
        let c = cell(p);
        let mut found: Option<u32> = None;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                        for &r in list {
                            if (reps[r as usize] - p).norm() <= tolerance
                                && found.is_none_or(|f| r < f)
                            {
                                found = Some(r);
                            }
                        }
                    }
                }
            }
        }
        let id = found.unwrap_or_else(|| {
            reps.push(*p);
            let id = (reps.len() - 1) as u32;
            grid.entry(c).or_default().push(id);
            id
        });
        remap.push(id);
    }
    let mut seen: HashSet<[u32; 3]> = HashSet::new();
    let mut triangles = Vec::with_capacity(mesh.triangles.len());
    for t in &mesh.triangles {
        let m = t.map(|i| remap[i as usize]);
        if m[0] == m[1] || m[1] == m[2] || m[0] == m[2] {
            continue;
        }
        let mut key = m;
        key.sort_unstable();
        if seen.insert(key) {
            triangles.push(m);
        }
    }
    let mut out = Mesh::new(reps, triangles);
    out.remove_degenerate();
    out
}

/// Crops each mesh to its own box, concatenates, and welds the seams.
pub fn crop_and_stitch(parts: &[(Mesh, SceneBounds)], weld_tolerance: f64) -> Mesh {
    let mut all = Mesh::default();
    for (mesh, bounds) in parts {
        all.append(&crop_mesh(mesh, bounds));
    }
    let mut out = weld_vertices(&all, weld_tolerance);
    out.compute_vertex_normals();
    out
}

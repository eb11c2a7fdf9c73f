//! Marching-cubes case table, derived at first use from the cube topology
//! instead of being transcribed.
//!
//! For every sign configuration each cube face contributes iso-segments
//! between its edge crossings (on faces with two diagonal inside corners the
//! inside corners stay separated, a rule that depends only on the face, so
//! neighbouring cubes agree). Segments chain into closed loops which are fan
//! triangulated and oriented so normals point from inside (negative) to
//! outside (positive).

use std::sync::OnceLock;

use nalgebra::Vector3;

/// Corner `c` sits at offset `(c & 1, (c >> 1) & 1, (c >> 2) & 1)`.
pub const CORNERS: [[usize; 3]; 8] = {
    let mut out = [[0; 3]; 8];
    let mut c = 0;
    while c < 8 {
        out[c] = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
        c += 1;
    }
    out
};

/// Edge endpoints (lower corner first) and axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub axis: usize,
}

pub fn edges() -> &'static [Edge; 12] {
    static EDGES: OnceLock<[Edge; 12]> = OnceLock::new();
    EDGES.get_or_init(|| {
        let mut out = Vec::with_capacity(12);
        for axis in 0..3 {
            for c in 0..8 {
                if c & (1 << axis) == 0 {
                    out.push(Edge {
                        a: c,
                        b: c | (1 << axis),
                        axis,
                    });
                }
            }
        }
        out.try_into().expect("twelve edges")
    })
}

fn edge_between(a: usize, b: usize) -> usize {
    let (lo, hi) = (a.min(b), a.max(b));
    edges()
        .iter()
        .position(|e| e.a == lo && e.b == hi)
        .expect("corners are adjacent")
}

/// The six faces as corner cycles.
fn faces() -> Vec<[usize; 4]> {
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2 {
            let base = side << axis;
            out.push([base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]);
        }
    }
    out
}

fn midpoint(e: &Edge) -> Vector3<f64> {
    let p = |c: usize| Vector3::new(CORNERS[c][0] as f64, CORNERS[c][1] as f64, CORNERS[c][2] as f64);
    0.5 * (p(e.a) + p(e.b))
}

fn corner_vec(c: usize) -> Vector3<f64> {
    Vector3::new(CORNERS[c][0] as f64, CORNERS[c][1] as f64, CORNERS[c][2] as f64)
}

/// Triangles (as edge index triples) for one configuration; bit `c` of
/// `case` is set when corner `c` is inside.
fn triangulate(case: usize) -> Vec<[u8; 3]> {
    let inside = |c: usize| case & (1 << c) != 0;
    // adjacency between crossing edges, two neighbours each
    let mut links: Vec<Vec<usize>> = vec![Vec::new(); 12];
    for face in faces() {
        let mut crossings = Vec::new();
        for k in 0..4 {
            let (p, q) = (face[k], face[(k + 1) % 4]);
            if inside(p) != inside(q) {
                crossings.push((edge_between(p, q), !inside(p)));
            }
        }
        // rotate so the list starts on an outside-to-inside crossing, then
        // pair each entry with the exit that follows it
        if let Some(start) = crossings.iter().position(|c| c.1) {
            crossings.rotate_left(start);
        }
        for pair in crossings.chunks(2) {
            let (e0, e1) = (pair[0].0, pair[1].0);
            links[e0].push(e1);
            links[e1].push(e0);
        }
    }
    let mut visited = [false; 12];
    let mut tris = Vec::new();
    for start in 0..12 {
        if visited[start] || links[start].is_empty() {
            continue;
        }
        let mut lp = vec![start];
        visited[start] = true;
        let mut prev = start;
        let mut cur = links[start][0];
        while cur != start {
            visited[cur] = true;
            lp.push(cur);
            let next = if links[cur][0] == prev {
                links[cur][1]
            } else {
                links[cur][0]
            };
            prev = cur;
            cur = next;
        }
        // orientation: the polygon normal must agree with inside -> outside
        let pts: Vec<Vector3<f64>> = lp.iter().map(|&e| midpoint(&edges()[e])).collect();
        let mut normal = Vector3::zeros();
        for i in 0..pts.len() {
            normal += pts[i].cross(&pts[(i + 1) % pts.len()]);
        }
        let mut outward = Vector3::zeros();
        for &e in &lp {
            let ed = edges()[e];
            let (i, o) = if inside(ed.a) { (ed.a, ed.b) } else { (ed.b, ed.a) };
            outward += corner_vec(o) - corner_vec(i);
        }
        if normal.dot(&outward) < 0.0 {
            lp.reverse();
        }
        for j in 1..lp.len() - 1 {
            tris.push([lp[0] as u8, lp[j] as u8, lp[j + 1] as u8]);
        }
    }
    tris
}

pub fn case_table() -> &'static [Vec<[u8; 3]>] {
    static TABLE: OnceLock<Vec<Vec<[u8; 3]>>> = OnceLock::new();
    TABLE.get_or_init(|| (0..256).map(triangulate).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn trivial_cases_are_empty() {
        assert!(case_table()[0].is_empty());
        assert!(case_table()[255].is_empty());
    }

    #[test]
    fn single_corner_gives_one_triangle() {
        for c in 0..8 {
            assert_eq!(case_table()[1 << c].len(), 1);
            assert_eq!(case_table()[255 ^ (1 << c)].len(), 1);
        }
    }

    #[test]
    fn every_case_is_a_closed_surface_inside_the_cube() {
        // every crossing edge is a loop vertex, and the fans leave exactly
        // one open edge per loop vertex (the loop itself, lying on faces)
        for case in 0..256usize {
            let tris = &case_table()[case];
            let mut crossing = 0;
            for e in edges() {
                let ins = |c: usize| case & (1 << c) != 0;
                if ins(e.a) != ins(e.b) {
                    crossing += 1;
                }
            }
            let used: std::collections::BTreeSet<u8> = tris.iter().flatten().copied().collect();
            assert_eq!(used.len(), crossing, "case {case}");
            let mut count: HashMap<(u8, u8), i32> = HashMap::new();
            for t in tris {
                for k in 0..3 {
                    let (a, b) = (t[k], t[(k + 1) % 3]);
                    *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                }
            }
            // boundary (count 1) edges: exactly one per crossing
            let boundary = count.values().filter(|c| **c == 1).count();
            assert_eq!(boundary, crossing, "case {case}");
        }
    }

    #[test]
    fn normals_point_from_inside_to_outside() {
        // corner 0 inside: the surface normal must point away from corner 0
        let tri = case_table()[1][0];
        let p: Vec<Vector3<f64>> = tri.iter().map(|&e| midpoint(&edges()[e as usize])).collect();
        let n = (p[1] - p[0]).cross(&(p[2] - p[0]));
        assert!(n.dot(&Vector3::new(1.0, 1.0, 1.0)) > 0.0);
    }

    #[test]
    fn complementary_cases_have_opposite_orientation_when_unambiguous() {
        // a face-adjacent pair of inside corners is unambiguous
        let case = 0b0000_0011;
        let a = &case_table()[case];
        let b = &case_table()[255 ^ case];
        let area = |tris: &Vec<[u8; 3]>| {
            tris.iter().fold(Vector3::zeros(), |acc, t| {
                let p: Vec<Vector3<f64>> = t.iter().map(|&e| midpoint(&edges()[e as usize])).collect();
                acc + (p[1] - p[0]).cross(&(p[2] - p[0]))
            })
        };
        assert!((area(a) + area(b)).norm() < 1e-12);
    }
}

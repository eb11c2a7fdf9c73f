//! Exact nearest-neighbour search over a static point set.

use nalgebra::Point3;

const LEAF: usize = 8;

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point3<f64>>,
    /// Permutation of point indices; each subtree owns a contiguous range.
    order: Vec<u32>,
    /// Split axis for the range whose midpoint is this slot.
    axis: Vec<u8>,
}

impl KdTree {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        let mut axis = vec![0u8; points.len()];
        build(&points, &mut order, &mut axis, 0);
        Self { points, order, axis }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3<f64>] {
        &self.points
    }

    /// Index of the closest point and its squared distance.
    pub fn nearest(&self, q: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    pub fn nearest_distance(&self, q: &Point3<f64>) -> Option<f64> {
        self.nearest(q).map(|(_, d2)| d2.sqrt())
    }

    fn search(&self, q: &Point3<f64>, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if hi - lo <= LEAF {
            for &i in &self.order[lo..hi] {
                let d2 = (self.points[i as usize] - q).norm_squared();
                if d2 < best.1 || (d2 == best.1 && (i as usize) < best.0) {
                    *best = (i as usize, d2);
                }
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let a = self.axis[mid] as usize;
        let pivot = self.order[mid] as usize;
        let diff = q[a] - self.points[pivot][a];
        let d2 = (self.points[pivot] - q).norm_squared();
        if d2 < best.1 || (d2 == best.1 && pivot < best.0) {
            *best = (pivot, d2);
        }
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(q, near.0, near.1, best);
        if diff * diff <= best.1 {
            self.search(q, far.0, far.1, best);
        }
    }
}

fn build(points: &[Point3<f64>], order: &mut [u32], axis: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF {
        return;
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        let p = &points[i as usize];
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let a = (0..3)
        .max_by(|&x, &y| (hi[x] - lo[x]).total_cmp(&(hi[y] - lo[y])))
        .unwrap_or(0);
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&i, &j| {
        points[i as usize][a].total_cmp(&points[j as usize][a])
    });
    axis[offset + mid] = a as u8;
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, axis, offset);
    build(points, &mut rest[1..], axis, offset + mid + 1);
}

/// Linear scan, the reference for the tree.
pub fn brute_force_nearest(points: &[Point3<f64>], q: &Point3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if best.is_none_or(|b| d2 < b.1) {
            best = Some((i, d2));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_tree_has_no_neighbours() {
        assert!(KdTree::new(Vec::new()).nearest(&Point3::origin()).is_none());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-10.0f64..10.0), 1..400),
            qs in prop::collection::vec(prop::array::uniform3(-12.0f64..12.0), 1..50),
        ) {
            let points: Vec<Point3<f64>> = pts.iter().map(|p| Point3::from(*p)).collect();
            let tree = KdTree::new(points.clone());
            for q in &qs {
                let q = Point3::from(*q);
                let (i, d) = tree.nearest(&q).unwrap();
                let (j, e) = brute_force_nearest(&points, &q).unwrap();
                prop_assert_eq!(d, e);
                prop_assert_eq!(i, j);
            }
        }

        #[test]
        fn duplicates_resolve_to_lowest_index(n in 1usize..60) {
            let points = vec![Point3::new(1.0, 2.0, 3.0); n];
            let tree = KdTree::new(points);
            prop_assert_eq!(tree.nearest(&Point3::origin()).unwrap().0, 0);
        }
    }
}

//! Point-to-point ICP with a closed-form (SVD) rigid update.

use nalgebra::{Isometry3, Matrix3, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rayon::prelude::*;

use super::kdtree::KdTree;
use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once the relative change of the inlier RMS drops below this.
    pub tolerance: f64,
    /// Correspondences farther than this multiple of the median are dropped.
    pub reject_factor: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        Self {
            max_iter: 50,
            tolerance: 1e-6,
            reject_factor: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    pub transform: Isometry3<f64>,
    pub iterations: usize,
    pub initial_rms: f64,
    pub final_rms: f64,
}

/// Root-mean-square nearest-neighbour distance of `src` (after `t`) to the tree.
pub fn nn_rms(src: &[Point3<f64>], tgt: &KdTree, t: &Isometry3<f64>) -> f64 {
    let d2: Vec<f64> = src
        .par_iter()
        .map(|p| tgt.nearest(&(t * p)).map_or(0.0, |(_, d)| d))
        .collect();
    (d2.iter().sum::<f64>() / d2.len().max(1) as f64).sqrt()
}

fn check_geometry(points: &[Point3<f64>]) -> Result<(), EvalError> {
    if points.len() < 3 {
        return Err(EvalError::DegenerateGeometry(format!("{} points", points.len())));
    }
    let c = centroid(points.iter());
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= ev[0] * 1e-12 {
        return Err(EvalError::DegenerateGeometry("collinear points".into()));
    }
    Ok(())
}

fn centroid<'a, I: Iterator<Item = &'a Point3<f64>>>(it: I) -> Point3<f64> {
    let mut s = Vector3::zeros();
    let mut n = 0usize;
    for p in it {
        s += p.coords;
        n += 1;
    }
    Point3::from(s / n.max(1) as f64)
}

/// Least-squares rigid transform mapping `src[i]` onto `dst[i]`.
pub fn kabsch(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Isometry3<f64> {
    let cs = centroid(src.iter());
    let cd = centroid(dst.iter());
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = vt.transpose();
    let mut fix = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = Rotation3::from_matrix_unchecked(v * fix * u.transpose());
    let t = cd.coords - r * cs.coords;
    Isometry3::from_parts(Translation3::from(t), UnitQuaternion::from_rotation_matrix(&r))
}

/// Aligns `src` to `tgt`; the returned transform maps source coordinates
/// into the target frame. Of all iterates, the one with the lowest full
/// nearest-neighbour RMS is returned, so alignment never worsens it.
pub fn icp_align(src: &[Point3<f64>], tgt: &[Point3<f64>], cfg: &IcpConfig) -> Result<IcpResult, EvalError> {
    check_geometry(src)?;
    check_geometry(tgt)?;
    let tree = KdTree::new(tgt.to_vec());
    icp_align_tree(src, &tree, cfg)
}

pub fn icp_align_tree(src: &[Point3<f64>], tree: &KdTree, cfg: &IcpConfig) -> Result<IcpResult, EvalError> {
    check_geometry(src)?;
    check_geometry(tree.points())?;
    let mut current = Isometry3::identity();
    let mut best = (current, f64::INFINITY);
    let mut initial_rms = 0.0;
    let mut prev_inlier_rms = f64::INFINITY;
    let mut iterations = 0;
    for it in 0..=cfg.max_iter {
        let moved: Vec<Point3<f64>> = src.iter().map(|p| current * p).collect();
        let matches: Vec<(usize, f64)> = moved
            .par_iter()
            .map(|p| tree.nearest(p).expect("target is non-empty"))
            .collect();
        let full_rms = (matches.iter().map(|m| m.1).sum::<f64>() / matches.len() as f64).sqrt();
        if it == 0 {
            initial_rms = full_rms;
        }
        if full_rms < best.1 {
            best = (current, full_rms);
        }
        if it == cfg.max_iter || full_rms == 0.0 {
            break;
        }
        let mut dists: Vec<f64> = matches.iter().map(|m| m.1.sqrt()).collect();
        dists.sort_by(f64::total_cmp);
        let median = dists[dists.len() / 2];
        let cutoff = cfg.reject_factor * median;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (p, m) in moved.iter().zip(&matches) {
            if m.1.sqrt() <= cutoff {
                a.push(*p);
                b.push(tree.points()[m.0]);
            }
        }
        if a.len() < 3 {
            break;
        }
        let inlier_rms = (a.iter().zip(&b).map(|(p, q)| (p - q).norm_squared()).sum::<f64>() / a.len() as f64).sqrt();
        let step = kabsch(&a, &b);
        current = step * current;
        iterations = it + 1;
        if prev_inlier_rms.is_finite() && (prev_inlier_rms - inlier_rms).abs() <= cfg.tolerance * prev_inlier_rms {
            // the final update has not been scored yet
            let moved_rms = nn_rms(src, tree, &current);
            if moved_rms < best.1 {
                best = (current, moved_rms);
            }
            break;
        }
        prev_inlier_rms = inlier_rms;
    }
    Ok(IcpResult {
        transform: best.0,
        iterations,
        initial_rms,
        final_rms: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Point3<f64>> {
        // an asymmetric surface patch: a curved sheet with a bump
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let z: f64 = rng.random_range(-0.6..1.4);
                let y = 0.3 * x * x + 0.2 * z + 0.4 * (-(x - 0.3).powi(2) * 8.0 - (z - 0.5).powi(2) * 8.0).exp();
                Point3::new(x, y, z)
            })
            .collect()
    }

    #[test]
    fn identical_clouds_give_identity() {
        let c = cloud(500, 1);
        let r = icp_align(&c, &c, &IcpConfig::default()).unwrap();
        let m = r.transform.to_homogeneous() - nalgebra::Matrix4::identity();
        assert!(m.abs().max() < 1e-9);
    }

    #[test]
    fn recovers_known_rigid_transform() {
        let c = cloud(3000, 2);
        let truth = Isometry3::new(
            Vector3::new(0.05, -0.03, 0.08),
            Vector3::new(0.3, -0.5, 0.8).normalize() * 5f64.to_radians(),
        );
        let tgt: Vec<Point3<f64>> = c.iter().map(|p| truth * p).collect();
        let r = icp_align(&c, &tgt, &IcpConfig::default()).unwrap();
        let err = (r.transform.to_homogeneous() - truth.to_homogeneous()).abs().max();
        assert!(err < 1e-3, "err {err}");
        assert!(r.final_rms <= r.initial_rms);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let two = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        let c = cloud(10, 3);
        assert!(matches!(icp_align(&two, &c, &IcpConfig::default()), Err(EvalError::DegenerateGeometry(_))));
        let line: Vec<Point3<f64>> = (0..10).map(|i| Point3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(icp_align(&line, &c, &IcpConfig::default()), Err(EvalError::DegenerateGeometry(_))));
    }

    #[test]
    fn kabsch_exact_on_noiseless_pairs() {
        let c = cloud(50, 4);
        let truth = Isometry3::new(Vector3::new(1.0, 2.0, 3.0), Vector3::new(0.1, 0.2, -0.3));
        let d: Vec<Point3<f64>> = c.iter().map(|p| truth * p).collect();
        let k = kabsch(&c, &d);
        assert!((k.to_homogeneous() - truth.to_homogeneous()).abs().max() < 1e-10);
    }
}

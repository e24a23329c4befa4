//! Relative pose from matched keypoints, trajectory chaining, and PnP.
//!
//! Conventions: points map between cameras as `X2 = R X1 + t`, the essential
//! matrix is `E = [t]x R`, and `x2^T E x1 = 0` for normalized image points.
//! Poses are world-to-camera unless stated otherwise.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{skew, CameraIntrinsics, PoseSE3, RotationMatrix, Vec2, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    pub fn from_pose(r: &RotationMatrix, t: &Vec3) -> Self {
        EssentialMatrix(skew(t) * r.matrix())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> [f64; 3] {
        let mut s: Vec<f64> = self
            .0
            .svd(false, false)
            .singular_values
            .iter()
            .copied()
            .collect();
        s.sort_by(|a, b| b.total_cmp(a));
        [s[0], s[1], s[2]]
    }

    /// `x2^T E x1` for normalized points.
    pub fn residual(&self, x1: &Vec2, x2: &Vec2) -> f64 {
        Vector3::new(x2.x, x2.y, 1.0).dot(&(self.0 * Vector3::new(x1.x, x1.y, 1.0)))
    }

    /// First-order geometric epipolar error (square root of the Sampson
    /// error), in normalized image units.
    pub fn sampson_distance(&self, x1: &Vec2, x2: &Vec2) -> f64 {
        let h1 = Vector3::new(x1.x, x1.y, 1.0);
        let h2 = Vector3::new(x2.x, x2.y, 1.0);
        let ex1 = self.0 * h1;
        let etx2 = self.0.transpose() * h2;
        let num = h2.dot(&ex1);
        let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
        if den <= 0.0 {
            return f64::INFINITY;
        }
        num.abs() / den.sqrt()
    }
}

/// Translation and scale taking the points to zero mean and mean distance
/// `sqrt(2)` from the origin.
fn hartley(points: &[Vec2]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn apply_h(t: &Matrix3<f64>, p: &Vec2) -> Vec2 {
    let h = t * Vector3::new(p.x, p.y, 1.0);
    Vec2::new(h.x / h.z, h.y / h.z)
}

/// Relative tolerance under which a singular value of the design matrix
/// counts as zero.
const NULLITY_TOL: f64 = 1e-9;

/// Singular values ascending, paired with the right singular vectors.
fn sorted_svd(a: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let cols = a.ncols();
    let a = if a.nrows() < cols {
        // Pad with zero rows so the full right basis is returned.
        let mut p = DMatrix::zeros(cols, cols);
        p.view_mut((0, 0), (a.nrows(), cols)).copy_from(&a);
        p
    } else {
        a
    };
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let mut out: Vec<(f64, Vec<f64>)> = svd
        .singular_values
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, vt.row(k).iter().copied().collect()))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Normalized 8-point estimate from `>= 8` correspondences in normalized
/// camera coordinates, projected onto the essential manifold.
pub fn essential_8pt(x1: &[Vec2], x2: &[Vec2]) -> Result<EssentialMatrix> {
    Error::check_dim(x1.len(), x2.len())?;
    if x1.len() < 8 {
        return Err(Error::validation(
            "correspondences",
            format!("need at least 8, got {}", x1.len()),
        ));
    }
    let t1 = hartley(x1);
    let t2 = hartley(x2);
    let a = DMatrix::from_fn(x1.len(), 9, |r, c| {
        let p = apply_h(&t1, &x1[r]);
        let q = apply_h(&t2, &x2[r]);
        let (u1, v1, u2, v2) = (p.x, p.y, q.x, q.y);
        [u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, 1.0][c]
    });
    let sv = sorted_svd(a);
    let largest = sv[8].0;
    if !(largest > 0.0) || sv[1].0 <= NULLITY_TOL * largest {
        return Err(Error::Degenerate(
            "8-point system has a nullspace of dimension > 1".into(),
        ));
    }
    let f = Matrix3::from_row_slice(&sv[0].1);
    let e = t2.transpose() * f * t1;
    Ok(project_to_essential(&e))
}

pub fn project_to_essential(e: &Matrix3<f64>) -> EssentialMatrix {
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut s: Vec<(usize, f64)> = svd.singular_values.iter().copied().enumerate().collect();
    s.sort_by(|a, b| b.1.total_cmp(&a.1));
    let sigma = (s[0].1 + s[1].1) / 2.0;
    let mut d = Vector3::zeros();
    d[s[0].0] = sigma;
    d[s[1].0] = sigma;
    EssentialMatrix(u * Matrix3::from_diagonal(&d) * vt)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub max_iterations: usize,
    /// Sampson distance in normalized coordinates.
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            max_iterations: 2000,
            inlier_threshold: 1e-3,
            min_inliers: 15,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::validation("max_iterations", "must be >= 1"));
        }
        if !(self.inlier_threshold.is_finite() && self.inlier_threshold > 0.0) {
            return Err(Error::validation("inlier_threshold", "must be > 0"));
        }
        if self.min_inliers == 0 {
            return Err(Error::validation("min_inliers", "must be >= 1"));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::validation("confidence", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Iterations needed to draw one all-inlier sample of size `k` with the
/// given confidence when a fraction `w` of the data are inliers.
pub fn adaptive_iterations(confidence: f64, w: f64, k: i32, cap: usize) -> usize {
    if w >= 1.0 {
        return 1;
    }
    let p_good = w.powi(k);
    if p_good <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - p_good).ln();
    if n.is_finite() {
        (n.ceil().max(1.0) as usize).min(cap)
    } else {
        cap
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RansacOutcome {
    Found {
        essential: EssentialMatrix,
        inliers: Vec<usize>,
        iterations: usize,
    },
    /// Fewer than `min_inliers` support the best model; the caller should skip the pair.
    Failed { best_inliers: usize },
}

fn inliers_of(e: &EssentialMatrix, x1: &[Vec2], x2: &[Vec2], threshold: f64) -> Vec<usize> {
    (0..x1.len())
        .filter(|&i| e.sampson_distance(&x1[i], &x2[i]) < threshold)
        .collect()
}

/// Truncated squared Sampson cost: inliers pay their error, the rest pay
/// the threshold.
fn msac_cost(e: &EssentialMatrix, x1: &[Vec2], x2: &[Vec2], threshold: f64) -> f64 {
    x1.iter()
        .zip(x2)
        .map(|(a, b)| e.sampson_distance(a, b).min(threshold).powi(2))
        .sum()
}

fn pick<T: Copy>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i]).collect()
}

/// Seeded adaptive RANSAC over 8-point samples with models ranked by
/// truncated Sampson cost; the refit on all inliers replaces the sample
/// model only when it lowers that cost.
pub fn ransac_essential(x1: &[Vec2], x2: &[Vec2], cfg: &RansacConfig) -> Result<RansacOutcome> {
    cfg.validate()?;
    Error::check_dim(x1.len(), x2.len())?;
    let n = x1.len();
    if n < 8 {
        return Err(Error::validation(
            "matches",
            format!("need at least 8, got {n}"),
        ));
    }
    let t = cfg.inlier_threshold;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(EssentialMatrix, f64)> = None;
    let mut needed = cfg.max_iterations;
    let mut iterations = 0;
    while iterations < needed {
        iterations += 1;
        let idx = sample(&mut rng, n, 8).into_vec();
        let Ok(e) = essential_8pt(&pick(x1, &idx), &pick(x2, &idx)) else {
            continue;
        };
        let cost = msac_cost(&e, x1, x2, t);
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            let w = inliers_of(&e, x1, x2, t).len() as f64 / n as f64;
            needed = adaptive_iterations(cfg.confidence, w, 8, cfg.max_iterations);
            best = Some((e, cost));
        }
    }
    let Some((mut e, cost)) = best else {
        return Ok(RansacOutcome::Failed { best_inliers: 0 });
    };
    let inl = inliers_of(&e, x1, x2, t);
    if inl.len() < cfg.min_inliers {
        return Ok(RansacOutcome::Failed {
            best_inliers: inl.len(),
        });
    }
    if let Ok(refit) = essential_8pt(&pick(x1, &inl), &pick(x2, &inl)) {
        if msac_cost(&refit, x1, x2, t) < cost {
            e = refit;
        }
    }
    Ok(RansacOutcome::Found {
        inliers: inliers_of(&e, x1, x2, t),
        essential: e,
        iterations,
    })
}

/// Pixel-space wrapper: normalizes with `intr` and keeps the input order.
pub fn ransac_essential_pixels(
    pixels_a: &[Vec2],
    pixels_b: &[Vec2],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<RansacOutcome> {
    let x1: Vec<Vec2> = pixels_a.iter().map(|p| intr.normalize(p)).collect();
    let x2: Vec<Vec2> = pixels_b.iter().map(|p| intr.normalize(p)).collect();
    ransac_essential(&x1, &x2, cfg)
}

/// Depths along the two rays of the midpoint triangulation, or `None` when
/// the rays are parallel.
fn triangulate_depths(r: &Matrix3<f64>, t: &Vec3, x1: &Vec2, x2: &Vec2) -> Option<(f64, f64)> {
    // In camera-1 coordinates: ray 1 is lambda1 * d1, ray 2 is c2 + lambda2 * d2.
    let d1 = Vector3::new(x1.x, x1.y, 1.0);
    let d2 = r.transpose() * Vector3::new(x2.x, x2.y, 1.0);
    let c2 = -(r.transpose() * t);
    let a11 = d1.dot(&d1);
    let a12 = -d1.dot(&d2);
    let a22 = d2.dot(&d2);
    let b1 = d1.dot(&c2);
    let b2 = -d2.dot(&c2);
    let det = a11 * a22 - a12 * a12;
    if det.abs() <= 1e-12 * a11 * a22 {
        return None;
    }
    let l1 = (b1 * a22 - a12 * b2) / det;
    let l2 = (a11 * b2 - a12 * b1) / det;
    Some((l1, l2))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decomposition {
    Found {
        rotation: RotationMatrix,
        translation: Vec3,
        in_front: usize,
    },
    /// No candidate puts a strict majority of points in front of both cameras.
    Failed,
}

/// Four-candidate decomposition with a cheirality vote.
pub fn decompose_essential(e: &EssentialMatrix, x1: &[Vec2], x2: &[Vec2]) -> Result<Decomposition> {
    Error::check_dim(x1.len(), x2.len())?;
    if x1.is_empty() {
        return Err(Error::validation("inliers", "need at least one"));
    }
    let svd = e.0.svd(true, true);
    let (mut u, mut vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    // Order so that the null direction is last.
    let null = svd.singular_values.imin();
    if null != 2 {
        u.swap_columns(null, 2);
        vt.swap_rows(null, 2);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let t = u.column(2).into_owned();
    let candidates = [
        (u * w * vt, t),
        (u * w * vt, -t),
        (u * w.transpose() * vt, t),
        (u * w.transpose() * vt, -t),
    ];
    let mut best: Option<(usize, usize)> = None;
    for (k, (r, t)) in candidates.iter().enumerate() {
        let count = x1
            .iter()
            .zip(x2)
            .filter(|(a, b)| matches!(triangulate_depths(r, t, a, b), Some((l1, l2)) if l1 > 0.0 && l2 > 0.0))
            .count();
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((k, count));
        }
    }
    let (k, count) = best.expect("four candidates");
    if 2 * count <= x1.len() {
        return Ok(Decomposition::Failed);
    }
    let (r, t) = candidates[k];
    Ok(Decomposition::Found {
        rotation: RotationMatrix::nearest(&r),
        translation: t.normalize(),
        in_front: count,
    })
}

/// `t_unit` rescaled to the length of the ground-truth relative translation.
pub fn scale_translation(t_unit: &Vec3, gt_relative: &PoseSE3) -> Result<Vec3> {
    if (t_unit.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("t_unit", "must have unit norm"));
    }
    Ok(t_unit * gt_relative.translation.norm())
}

/// Relative pose estimate for one consecutive frame pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RelativeEstimate {
    Pose(PoseSE3),
    /// Estimation failed for this pair.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frame_indices: Vec<usize>,
    /// World-to-camera poses.
    pub poses: Vec<PoseSE3>,
    /// True where the pose was extrapolated over a failed pair.
    pub flagged: Vec<bool>,
}

impl Trajectory {
    pub fn new(frame_indices: Vec<usize>, poses: Vec<PoseSE3>) -> Result<Self> {
        Error::check_dim(frame_indices.len(), poses.len())?;
        if frame_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation(
                "frame_indices",
                "must be strictly increasing",
            ));
        }
        let flagged = vec![false; poses.len()];
        Ok(Trajectory {
            frame_indices,
            poses,
            flagged,
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|&&f| f).count()
    }
}

/// Cumulative composition `pose[k+1] = rel[k] * pose[k]`. A skipped pair
/// reuses the previous relative pose (identity if there is none) and flags
/// the frame it produces.
pub fn chain_trajectory(
    relatives: &[RelativeEstimate],
    start: PoseSE3,
    start_index: usize,
) -> Trajectory {
    let mut poses = vec![start];
    let mut flagged = vec![false];
    let mut last = PoseSE3::identity();
    for rel in relatives {
        let (step, flag) = match rel {
            RelativeEstimate::Pose(p) => (*p, false),
            RelativeEstimate::Skip => (last, true),
        };
        last = step;
        let next = step.compose(poses.last().expect("nonempty"));
        poses.push(next);
        flagged.push(flag);
    }
    Trajectory {
        frame_indices: (start_index..start_index + poses.len()).collect(),
        poses,
        flagged,
    }
}

pub fn write_tum(path: &Path, traj: &Trajectory) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, tum_string(traj)).map_err(|e| Error::io(path, e))
}

/// One `frame_index tx ty tz qw qx qy qz` line per pose, camera-to-world.
pub fn tum_string(traj: &Trajectory) -> String {
    let mut s = String::new();
    for (idx, pose) in traj.frame_indices.iter().zip(&traj.poses) {
        let c2w = pose.inverse();
        let t = c2w.translation;
        let q = c2w.rotation.to_quaternion();
        writeln!(
            s,
            "{idx} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e} {:.17e}",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
        .expect("writing to a String cannot fail");
    }
    s
}

pub fn read_tum(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tum(&text)
}

pub fn parse_tum(text: &str) -> Result<Trajectory> {
    let mut indices = Vec::new();
    let mut poses = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::validation(
                "trajectory",
                format!("line {}: expected 8 fields", n + 1),
            ));
        }
        let idx: usize = fields[0]
            .parse()
            .map_err(|_| Error::validation("trajectory", format!("line {}: bad index", n + 1)))?;
        let mut v = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            v[k] = f.parse().map_err(|_| {
                Error::validation("trajectory", format!("line {}: bad number", n + 1))
            })?;
        }
        let c2w = PoseSE3::new(
            RotationMatrix::from_quaternion([v[3], v[4], v[5], v[6]]),
            Vec3::new(v[0], v[1], v[2]),
        );
        indices.push(idx);
        poses.push(c2w.inverse());
    }
    Trajectory::new(indices, poses)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnpConfig {
    pub max_iterations: usize,
    /// Reprojection error in pixels.
    pub reprojection_threshold: f64,
    pub min_inliers: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for PnpConfig {
    fn default() -> Self {
        PnpConfig {
            max_iterations: 2000,
            reprojection_threshold: 2.0,
            min_inliers: 12,
            confidence: 0.999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PnpOutcome {
    Found { pose: PoseSE3, inliers: Vec<usize> },
    Failed { best_inliers: usize },
}

/// Linear pose from `>= 6` world points and their normalized image points,
/// with the rotation projected onto SO(3).
pub fn pnp_dlt(normalized: &[Vec2], world: &[Vec3]) -> Result<PoseSE3> {
    Error::check_dim(normalized.len(), world.len())?;
    let n = world.len();
    if n < 6 {
        return Err(Error::validation(
            "correspondences",
            format!("need at least 6, got {n}"),
        ));
    }
    let c = world.iter().fold(Vec3::zeros(), |a, p| a + p) / n as f64;
    let scale = world.iter().map(|p| (p - c).norm()).sum::<f64>() / n as f64;
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let a = DMatrix::from_fn(2 * n, 12, |r, col| {
        let i = r / 2;
        let p = (world[i] - c) / scale;
        let x = normalized[i];
        let h = [p.x, p.y, p.z, 1.0];
        let (row_u, img) = if r % 2 == 0 { (0, x.x) } else { (1, x.y) };
        let block = col / 4;
        let k = col % 4;
        if block == row_u {
            h[k]
        } else if block == 2 {
            -img * h[k]
        } else {
            0.0
        }
    });
    let sv = sorted_svd(a);
    if !(sv[11].0 > 0.0) || sv[1].0 <= NULLITY_TOL * sv[11].0 {
        return Err(Error::Degenerate(
            "DLT system has a nullspace of dimension > 1".into(),
        ));
    }
    let p = &sv[0].1;
    let mut m = Matrix3::new(p[0], p[1], p[2], p[4], p[5], p[6], p[8], p[9], p[10]);
    let mut p4 = Vector3::new(p[3], p[7], p[11]);
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    let svd = m.svd(true, true);
    let r = svd.u.expect("requested") * svd.v_t.expect("requested");
    let s = svd.singular_values.mean();
    // Undo the world normalization: X_cam = R (X - c) / scale + p4 / s.
    let rotation = RotationMatrix::nearest(&r);
    let t_norm = p4 / s;
    let translation = t_norm * scale - rotation.matrix() * c;
    Ok(PoseSE3::new(rotation, translation))
}

fn reprojection_errors(
    pose: &PoseSE3,
    pixels: &[Vec2],
    world: &[Vec3],
    intr: &CameraIntrinsics,
) -> Vec<f64> {
    pixels
        .iter()
        .zip(world)
        .map(|(px, w)| {
            let pc = pose.transform(w);
            if pc.z <= 0.0 {
                return f64::INFINITY;
            }
            let proj = intr.denormalize(&Vec2::new(pc.x / pc.z, pc.y / pc.z));
            (proj - px).norm()
        })
        .collect()
}

/// DLT inside seeded adaptive RANSAC with pixel reprojection inliers,
/// refit on the inliers.
pub fn pnp_dlt_ransac(
    pixels: &[Vec2],
    world: &[Vec3],
    intr: &CameraIntrinsics,
    cfg: &PnpConfig,
) -> Result<PnpOutcome> {
    Error::check_dim(pixels.len(), world.len())?;
    let n = pixels.len();
    if n < 6 {
        return Err(Error::validation(
            "correspondences",
            format!("need at least 6, got {n}"),
        ));
    }
    if !(cfg.reprojection_threshold > 0.0) || !(cfg.confidence > 0.0 && cfg.confidence < 1.0) {
        return Err(Error::validation(
            "pnp",
            "threshold must be > 0 and confidence in (0, 1)",
        ));
    }
    let normalized: Vec<Vec2> = pixels.iter().map(|p| intr.normalize(p)).collect();
    let inliers_for = |pose: &PoseSE3| -> Vec<usize> {
        reprojection_errors(pose, pixels, world, intr)
            .iter()
            .enumerate()
            .filter(|(_, &e)| e < cfg.reprojection_threshold)
            .map(|(i, _)| i)
            .collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(PoseSE3, Vec<usize>)> = None;
    let mut needed = cfg.max_iterations;
    let mut it = 0;
    while it < needed {
        it += 1;
        let idx = sample(&mut rng, n, 6).into_vec();
        let Ok(pose) = pnp_dlt(&pick(&normalized, &idx), &pick(world, &idx)) else {
            continue;
        };
        let inl = inliers_for(&pose);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            needed = adaptive_iterations(
                cfg.confidence,
                inl.len() as f64 / n as f64,
                6,
                cfg.max_iterations,
            );
            best = Some((pose, inl));
        }
    }
    let Some((mut pose, mut inl)) = best else {
        return Ok(PnpOutcome::Failed { best_inliers: 0 });
    };
    if inl.len() < cfg.min_inliers.max(6) {
        return Ok(PnpOutcome::Failed {
            best_inliers: inl.len(),
        });
    }
    if let Ok(refit) = pnp_dlt(&pick(&normalized, &inl), &pick(world, &inl)) {
        let refit_inl = inliers_for(&refit);
        if refit_inl.len() >= inl.len() {
            pose = refit;
            inl = refit_inl;
        }
    }
    Ok(PnpOutcome::Found { pose, inliers: inl })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> RotationMatrix {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        RotationMatrix::about_axis(&axis.normalize(), rng.random_range(-max_angle..max_angle))
    }

    /// Points in front of both cameras and their normalized projections.
    fn scene(rng: &mut impl Rng, r: &RotationMatrix, t: &Vec3, n: usize) -> (Vec<Vec2>, Vec<Vec2>) {
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        while x1.len() < n {
            let p = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(3.0..8.0),
            );
            let q = *r * p + t;
            if q.z > 0.1 {
                x1.push(Vec2::new(p.x / p.z, p.y / p.z));
                x2.push(Vec2::new(q.x / q.z, q.y / q.z));
            }
        }
        (x1, x2)
    }

    #[test]
    fn pure_translation_is_skew() {
        let t = Vec3::new(1.0, 0.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x1, x2) = scene(&mut rng, &RotationMatrix::identity(), &t, 20);
        let e = essential_8pt(&x1, &x2).unwrap();
        let expected = skew(&t);
        // Same up to scale and sign.
        let k = e.0.norm() / expected.norm();
        let sign = if (e.0 - expected * k).norm() < (e.0 + expected * k).norm() {
            1.0
        } else {
            -1.0
        };
        assert!((e.0 - expected * k * sign).norm() < 1e-9);
        let ideal = EssentialMatrix(expected);
        for (a, b) in x1.iter().zip(&x2) {
            assert!(ideal.residual(a, b).abs() < 1e-12);
        }
    }

    #[test]
    fn eight_noise_free_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_rotation(&mut rng, 0.3);
        let t = Vec3::new(0.3, -0.1, 1.0);
        let (x1, x2) = scene(&mut rng, &r, &t, 8);
        let e = essential_8pt(&x1, &x2).unwrap();
        for (a, b) in x1.iter().zip(&x2) {
            assert!(e.sampson_distance(a, b) < 1e-9);
        }
        let s = e.singular_values();
        assert!((s[0] / s[1] - 1.0).abs() < 1e-6 && s[2] / s[0] < 1e-6);
        assert!(essential_8pt(&x1[..7], &x2[..7])
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn planar_points_are_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = random_rotation(&mut rng, 0.2);
        let t = Vec3::new(1.0, 0.0, 0.2);
        let mut x1 = Vec::new();
        let mut x2 = Vec::new();
        for _ in 0..12 {
            // All points on the plane z = 5.
            let p = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                5.0,
            );
            let q = r * p + t;
            x1.push(Vec2::new(p.x / p.z, p.y / p.z));
            x2.push(Vec2::new(q.x / q.z, q.y / q.z));
        }
        assert!(matches!(essential_8pt(&x1, &x2), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ransac_outlier_free_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = random_rotation(&mut rng, 0.2);
        let t = Vec3::new(0.2, 0.1, 1.0).normalize();
        let (x1, x2) = scene(&mut rng, &r, &t, 100);
        match ransac_essential(&x1, &x2, &RansacConfig::default()).unwrap() {
            RansacOutcome::Found { inliers, .. } => {
                assert_eq!(inliers, (0..100).collect::<Vec<_>>())
            }
            other => panic!("{other:?}"),
        }
        assert!(
            ransac_essential(&x1[..7], &x2[..7], &RansacConfig::default())
                .unwrap_err()
                .is_validation()
        );
    }

    #[test]
    fn ransac_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random_rotation(&mut rng, 0.2);
        let t = Vec3::new(0.1, 0.0, 1.0).normalize();
        let (mut x1, mut x2) = scene(&mut rng, &r, &t, 70);
        for _ in 0..30 {
            x1.push(Vec2::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ));
            x2.push(Vec2::new(
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ));
        }
        let cfg = RansacConfig {
            seed: 9,
            ..RansacConfig::default()
        };
        let a = ransac_essential(&x1, &x2, &cfg).unwrap();
        assert_eq!(a, ransac_essential(&x1, &x2, &cfg).unwrap());
        let RansacOutcome::Found {
            essential, inliers, ..
        } = a
        else {
            panic!()
        };
        assert_eq!(inliers, (0..70).collect::<Vec<_>>());
        let Decomposition::Found { rotation, .. } =
            decompose_essential(&essential, &pick(&x1, &inliers), &pick(&x2, &inliers)).unwrap()
        else {
            panic!()
        };
        assert!(rotation.angle_to(&r).to_degrees() < 0.1);
    }

    #[test]
    fn decomposition_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let r = random_rotation(&mut rng, 0.5);
            let t = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )
            .normalize();
            let (x1, x2) = scene(&mut rng, &r, &t, 30);
            let e = EssentialMatrix::from_pose(&r, &t);
            let Decomposition::Found {
                rotation,
                translation,
                ..
            } = decompose_essential(&e, &x1, &x2).unwrap()
            else {
                panic!()
            };
            assert!(rotation.angle_to(&r) < 1e-6);
            assert!((translation - t).norm() < 1e-6);
        }
    }

    #[test]
    fn pure_translation_decomposes_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Vec3::new(0.0, 0.0, 1.0);
        let (x1, x2) = scene(&mut rng, &RotationMatrix::identity(), &t, 20);
        let e = EssentialMatrix::from_pose(&RotationMatrix::identity(), &t);
        let Decomposition::Found { rotation, .. } = decompose_essential(&e, &x1, &x2).unwrap()
        else {
            panic!()
        };
        assert!((rotation.matrix() - Matrix3::identity()).norm() < 1e-9);
    }

    #[test]
    fn point_on_baseline_cannot_be_placed() {
        // The ray through the epipole is parallel to the translation, so no
        // candidate can triangulate the point in front of both cameras.
        let t = Vec3::new(0.0, 0.0, 1.0);
        let e = EssentialMatrix::from_pose(&RotationMatrix::identity(), &t);
        let x = [Vec2::new(0.0, 0.0)];
        assert_eq!(
            decompose_essential(&e, &x, &x).unwrap(),
            Decomposition::Failed
        );
    }

    #[test]
    fn scale_translation_examples() {
        let gt = PoseSE3::from_translation(Vec3::new(0.0, 2.5, 0.0));
        assert_eq!(
            scale_translation(&Vec3::x(), &gt).unwrap(),
            Vec3::new(2.5, 0.0, 0.0)
        );
        assert_eq!(
            scale_translation(&Vec3::x(), &PoseSE3::identity()).unwrap(),
            Vec3::zeros()
        );
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let gt = PoseSE3::new(random_rotation(&mut rng, 1.0), Vec3::new(0.3, -1.2, 0.7));
        let u = Vec3::new(1.0, 2.0, -0.5).normalize();
        assert!((scale_translation(&u, &gt).unwrap().norm() - gt.translation.norm()).abs() < 1e-15);
        assert!(scale_translation(&Vec3::new(2.0, 0.0, 0.0), &gt)
            .unwrap_err()
            .is_validation());
    }

    #[test]
    fn chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<PoseSE3> = (0..101)
            .map(|_| {
                PoseSE3::new(
                    random_rotation(&mut rng, 3.0),
                    Vec3::new(
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                        rng.random_range(-5.0..5.0),
                    ),
                )
            })
            .collect();
        let rel: Vec<RelativeEstimate> = gt
            .windows(2)
            .map(|w| RelativeEstimate::Pose(PoseSE3::relative(&w[0], &w[1])))
            .collect();
        let traj = chain_trajectory(&rel, gt[0], 0);
        for (a, b) in traj.poses.iter().zip(&gt) {
            assert!((a.translation - b.translation).norm() < 1e-9);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-9);
        }
        let single = chain_trajectory(&[], gt[0], 4);
        assert_eq!(single.frame_indices, vec![4]);
        let mut with_skip = rel[..5].to_vec();
        with_skip[2] = RelativeEstimate::Skip;
        let traj = chain_trajectory(&with_skip, gt[0], 0);
        assert_eq!(traj.len(), 6);
        assert_eq!(traj.flagged, vec![false, false, false, true, false, false]);
        let RelativeEstimate::Pose(prev) = rel[1] else {
            panic!()
        };
        let expected = prev.compose(&traj.poses[2]);
        assert!((traj.poses[3].translation - expected.translation).norm() < 1e-12);
    }

    #[test]
    fn tum_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let poses: Vec<PoseSE3> = (0..5)
            .map(|_| PoseSE3::new(random_rotation(&mut rng, 3.0), Vec3::new(1.0, 2.0, 3.0)))
            .collect();
        let traj = Trajectory::new(vec![0, 1, 2, 5, 9], poses).unwrap();
        let back = parse_tum(&tum_string(&traj)).unwrap();
        assert_eq!(back.frame_indices, traj.frame_indices);
        for (a, b) in back.poses.iter().zip(&traj.poses) {
            assert!((a.translation - b.translation).norm() < 1e-12);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
        assert!(Trajectory::new(vec![1, 1], vec![PoseSE3::identity(); 2]).is_err());
    }

    fn pnp_fixture(
        rng: &mut impl Rng,
        n: usize,
    ) -> (PoseSE3, CameraIntrinsics, Vec<Vec2>, Vec<Vec3>) {
        let intr = CameraIntrinsics::new(200.0, 200.0, 160.0, 120.0, 320, 240).unwrap();
        let pose = PoseSE3::new(random_rotation(rng, 0.5), Vec3::new(0.3, -0.2, 1.0));
        let cam_to_world = pose.inverse();
        let mut px = Vec::new();
        let mut world = Vec::new();
        while px.len() < n {
            let p = Vec2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
            let depth = rng.random_range(2.0..10.0);
            world.push(cam_to_world.transform(&intr.backproject(&p, depth)));
            px.push(p);
        }
        (pose, intr, px, world)
    }

    #[test]
    fn pnp_noise_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (pose, intr, px, world) = pnp_fixture(&mut rng, 20);
        let PnpOutcome::Found { pose: est, inliers } =
            pnp_dlt_ransac(&px, &world, &intr, &PnpConfig::default()).unwrap()
        else {
            panic!()
        };
        assert_eq!(inliers.len(), 20);
        assert!((est.camera_center() - pose.camera_center()).norm() < 1e-6);
        assert!(
            pnp_dlt_ransac(&px[..5], &world[..5], &intr, &PnpConfig::default())
                .unwrap_err()
                .is_validation()
        );
    }

    #[test]
    fn pnp_half_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (pose, intr, mut px, world) = pnp_fixture(&mut rng, 40);
        for p in px.iter_mut().skip(20) {
            *p = Vec2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
        }
        let PnpOutcome::Found { pose: est, .. } =
            pnp_dlt_ransac(&px, &world, &intr, &PnpConfig::default()).unwrap()
        else {
            panic!()
        };
        assert!((est.camera_center() - pose.camera_center()).norm() < 0.01);
    }
}

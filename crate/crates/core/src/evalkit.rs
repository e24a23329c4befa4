//! Evaluation: projected-mask instance correspondence, semantic matching
//! accuracy, trajectory errors, and localization metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{project_camera_point, CameraIntrinsics, PoseSE3, Projection, Vec2};
use crate::mask::{Bitmap, DepthMap};
use crate::matchcore::MatchSet;
use crate::posekit::Trajectory;
use crate::scenesim::{FrameObservation, InstanceId};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.1;
pub const RECALL_THRESHOLDS_M: [f64; 3] = [0.5, 1.0, 5.0];
pub const DEFAULT_OUTLIER_CUTOFF_M: f64 = 1000.0;

/// Warps `mask` from frame A into frame B using A's per-pixel depth and the
/// A-to-B camera motion, then closes single-pixel holes.
pub fn project_mask(
    mask: &Bitmap,
    depth: &DepthMap,
    rel: &PoseSE3,
    intr: &CameraIntrinsics,
) -> Result<Bitmap> {
    Error::check_dim(mask.width(), depth.width())?;
    Error::check_dim(mask.height(), depth.height())?;
    let mut out = Bitmap::new(intr.width as usize, intr.height as usize);
    for (x, y) in mask.iter_set() {
        let d = depth.get(x, y);
        if !d.is_finite() || d <= 0.0 {
            continue;
        }
        let p = intr.backproject(&Vec2::new(x as f64 + 0.5, y as f64 + 0.5), d);
        if let Projection::InFront { pixel, .. } = project_camera_point(intr, &rel.transform(&p)) {
            if intr.contains(&pixel) {
                out.set(pixel.x as usize, pixel.y as usize, true);
            }
        }
    }
    Ok(out.close())
}

pub fn iou(a: &Bitmap, b: &Bitmap) -> Result<f64> {
    let union = a.union_count(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(a.intersection_count(b)? as f64 / union as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrespondencePair {
    pub a: InstanceId,
    pub b: InstanceId,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InstanceCorrespondence {
    pub pairs: Vec<CorrespondencePair>,
    pub unmatched_a: Vec<InstanceId>,
    pub unmatched_b: Vec<InstanceId>,
}

impl InstanceCorrespondence {
    pub fn partner_of_a(&self, a: InstanceId) -> Option<InstanceId> {
        self.pairs.iter().find(|p| p.a == a).map(|p| p.b)
    }
}

/// Greedy one-to-one selection by descending IoU between A's projected masks
/// and B's masks; candidates below `threshold` are discarded.
pub fn instance_correspondence(
    frame_a: &FrameObservation,
    depth_a: &DepthMap,
    frame_b: &FrameObservation,
    rel: &PoseSE3,
    intr: &CameraIntrinsics,
    threshold: f64,
) -> Result<InstanceCorrespondence> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::validation("iou_threshold", "must lie in (0, 1]"));
    }
    let mut candidates = Vec::new();
    for ma in &frame_a.masks {
        let projected = project_mask(&ma.bitmap, depth_a, rel, intr)?;
        for mb in &frame_b.masks {
            let v = iou(&projected, &mb.bitmap)?;
            if v >= threshold {
                candidates.push(CorrespondencePair {
                    a: ma.instance_id,
                    b: mb.instance_id,
                    iou: v,
                });
            }
        }
    }
    candidates.sort_by(|x, y| {
        y.iou
            .total_cmp(&x.iou)
            .then(x.a.cmp(&y.a))
            .then(x.b.cmp(&y.b))
    });
    let mut out = InstanceCorrespondence::default();
    for c in candidates {
        if out.pairs.iter().all(|p| p.a != c.a && p.b != c.b) {
            out.pairs.push(c);
        }
    }
    out.pairs.sort_by_key(|p| p.a);
    out.unmatched_a = frame_a
        .masks
        .iter()
        .map(|m| m.instance_id)
        .filter(|id| out.pairs.iter().all(|p| p.a != *id))
        .collect();
    out.unmatched_b = frame_b
        .masks
        .iter()
        .map(|m| m.instance_id)
        .filter(|id| out.pairs.iter().all(|p| p.b != *id))
        .collect();
    Ok(out)
}

/// Fraction of `corr` pairs that map an instance to itself.
pub fn identity_agreement(corr: &InstanceCorrespondence) -> Option<f64> {
    if corr.pairs.is_empty() {
        return None;
    }
    Some(corr.pairs.iter().filter(|p| p.a == p.b).count() as f64 / corr.pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub correct: usize,
    pub incorrect: usize,
    pub unmatched: usize,
}

impl AccuracyReport {
    /// `correct / (correct + incorrect)` in percent; `None` when undefined.
    pub fn accuracy(&self) -> Option<f64> {
        let den = self.correct + self.incorrect;
        (den > 0).then(|| 100.0 * self.correct as f64 / den as f64)
    }

    /// Accuracy with unmatched keypoints counted as failures.
    pub fn accuracy_with_unmatched(&self) -> Option<f64> {
        let den = self.correct + self.incorrect + self.unmatched;
        (den > 0).then(|| 100.0 * self.correct as f64 / den as f64)
    }

    pub fn merge(&self, other: &AccuracyReport) -> AccuracyReport {
        AccuracyReport {
            correct: self.correct + other.correct,
            incorrect: self.incorrect + other.incorrect,
            unmatched: self.unmatched + other.unmatched,
        }
    }
}

/// Scores the A-side keypoints lying on instances that have a partner under
/// `corr`. A match is correct when the B keypoint lies on that partner.
pub fn matching_accuracy(
    matches: &MatchSet,
    corr: &InstanceCorrespondence,
    gt_a: &[Option<InstanceId>],
    gt_b: &[Option<InstanceId>],
) -> Result<AccuracyReport> {
    let mut matched_to = vec![None; gt_a.len()];
    for p in &matches.pairs {
        if p.a >= gt_a.len() || p.b >= gt_b.len() {
            return Err(Error::validation("matches", "keypoint index out of range"));
        }
        matched_to[p.a] = Some(p.b);
    }
    let mut report = AccuracyReport::default();
    for (i, inst) in gt_a.iter().enumerate() {
        let Some(partner) = inst.and_then(|id| corr.partner_of_a(id)) else {
            continue;
        };
        match matched_to[i] {
            None => report.unmatched += 1,
            Some(j) if gt_b[j] == Some(partner) => report.correct += 1,
            Some(_) => report.incorrect += 1,
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

fn stats(values: &[f64]) -> ErrorStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    ErrorStats {
        mean,
        std: var.sqrt(),
    }
}

fn check_aligned(est: &Trajectory, gt: &Trajectory) -> Result<()> {
    if est.frame_indices != gt.frame_indices {
        return Err(Error::validation(
            "trajectory",
            "estimated and ground-truth frame indices differ",
        ));
    }
    if est.is_empty() {
        return Err(Error::validation("trajectory", "empty"));
    }
    Ok(())
}

/// Per-step translation drift in centimeters.
pub fn rpe(est: &Trajectory, gt: &Trajectory) -> Result<ErrorStats> {
    check_aligned(est, gt)?;
    if est.len() < 2 {
        return Err(Error::validation("trajectory", "need at least 2 poses"));
    }
    let errors: Vec<f64> = (0..est.len() - 1)
        .map(|i| {
            let e = PoseSE3::relative(&est.poses[i], &est.poses[i + 1]);
            let g = PoseSE3::relative(&gt.poses[i], &gt.poses[i + 1]);
            100.0 * g.inverse().compose(&e).translation.norm()
        })
        .collect();
    Ok(stats(&errors))
}

/// Camera-center error in centimeters, optionally after moving the estimate
/// rigidly so its first pose equals the ground truth's.
pub fn ape(est: &Trajectory, gt: &Trajectory, align_first_pose: bool) -> Result<ErrorStats> {
    check_aligned(est, gt)?;
    // Poses are world-to-camera; align in camera-to-world form.
    let align = if align_first_pose {
        gt.poses[0].inverse().compose(&est.poses[0])
    } else {
        PoseSE3::identity()
    };
    let errors: Vec<f64> = est
        .poses
        .iter()
        .zip(&gt.poses)
        .map(|(e, g)| {
            let aligned = align.compose(&e.inverse());
            100.0 * (aligned.translation - g.camera_center()).norm()
        })
        .collect();
    Ok(stats(&errors))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryErrorReport {
    pub rpe_mean: f64,
    pub rpe_std: f64,
    pub ape_mean: f64,
    pub ape_std: f64,
    pub flagged_frames: usize,
}

pub fn trajectory_errors(est: &Trajectory, gt: &Trajectory) -> Result<TrajectoryErrorReport> {
    let r = rpe(est, gt)?;
    let a = ape(est, gt, true)?;
    Ok(TrajectoryErrorReport {
        rpe_mean: r.mean,
        rpe_std: r.std,
        ape_mean: a.mean,
        ape_std: a.std,
        flagged_frames: est.flagged_count(),
    })
}

/// Outcome of localizing one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum QueryResult {
    /// Translation error in meters.
    Localized(f64),
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub queries: usize,
    pub outliers: usize,
    pub failures: usize,
    /// Median translation error over localized non-outlier queries, cm.
    pub mte_cm: Option<f64>,
    /// Percent of non-outlier queries (failures included) with error below
    /// each threshold.
    pub recall: [Option<f64>; 3],
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

pub fn localization_metrics(
    results: &[QueryResult],
    outlier_cutoff_m: f64,
) -> Result<LocalizationReport> {
    let mut errors = Vec::new();
    let mut outliers = 0;
    let mut failures = 0;
    for r in results {
        match *r {
            QueryResult::Localized(e) if !(e >= 0.0) => {
                return Err(Error::validation("errors", "must be >= 0"));
            }
            QueryResult::Localized(e) if e > outlier_cutoff_m => outliers += 1,
            QueryResult::Localized(e) => errors.push(e),
            QueryResult::Failed => failures += 1,
        }
    }
    errors.sort_by(f64::total_cmp);
    let denominator = errors.len() + failures;
    let recall = RECALL_THRESHOLDS_M.map(|t| {
        (denominator > 0)
            .then(|| 100.0 * errors.iter().filter(|&&e| e < t).count() as f64 / denominator as f64)
    });
    Ok(LocalizationReport {
        queries: results.len(),
        outliers,
        failures,
        mte_cm: (!errors.is_empty()).then(|| 100.0 * median(&errors)),
        recall,
    })
}

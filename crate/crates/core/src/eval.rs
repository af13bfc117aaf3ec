//! MPJPE, PMPJPE, PCK and CPS.
//!
//! Per-pose values are averaged without weights to give corpus values. Joint
//! sets are the joints valid in both prediction and ground truth.

use std::io::Write;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{AcaeError, Result};
use crate::geometry::{Point3, PoseMatrix};
use crate::reduce::{pairwise_mean, par_map};

pub const PCK_THRESHOLD: f64 = 100.0;
pub const CPS_THRESHOLD: f64 = 200.0;

fn joint_set(pred: &PoseMatrix, gt: &PoseMatrix) -> Result<Vec<usize>> {
    if pred.len() != gt.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "prediction has {} joints, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&j| pred.valid[j] && gt.valid[j]).collect();
    if idx.is_empty() {
        return Err(AcaeError::NoValidJoints);
    }
    Ok(idx)
}

/// Root-aligned per-joint errors over the jointly valid joints.
fn root_aligned_errors(pred: &PoseMatrix, gt: &PoseMatrix, root: usize) -> Result<Vec<f64>> {
    if root >= gt.len() || root >= pred.len() || !gt.valid[root] || !pred.valid[root] {
        return Err(AcaeError::InvalidRoot(root));
    }
    let idx = joint_set(pred, gt)?;
    let (pr, gr) = (pred.joints[root], gt.joints[root]);
    Ok(idx
        .iter()
        .map(|&j| ((pred.joints[j] - pr) - (gt.joints[j] - gr)).norm())
        .collect())
}

pub fn mpjpe(pred: &PoseMatrix, gt: &PoseMatrix, root: usize) -> Result<f64> {
    Ok(pairwise_mean(&root_aligned_errors(pred, gt, root)?))
}

/// Similarity transform `y ≈ s R x + t` minimizing squared error, with the
/// rotation restricted to det +1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn apply(&self, p: &Point3) -> Point3 {
        self.scale * (self.rotation * p) + self.translation
    }
}

fn rank_at_least_two(points: &[Point3]) -> bool {
    let n = points.len() as f64;
    let mean = points.iter().sum::<Point3>() / n;
    let cov: Matrix3<f64> = points
        .iter()
        .map(|p| (p - mean) * (p - mean).transpose())
        .sum();
    let mut sv = cov.symmetric_eigenvalues().iter().map(|x| x.abs()).collect::<Vec<_>>();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv[0] > 0.0 && sv[1] > 1e-12 * sv[0]
}

/// Closed-form similarity alignment of `x` onto `y`.
pub fn align_similarity(x: &[Point3], y: &[Point3]) -> Result<Similarity> {
    if x.len() != y.len() {
        return Err(AcaeError::ShapeMismatch("alignment point counts differ".into()));
    }
    if x.len() < 3 || !rank_at_least_two(x) || !rank_at_least_two(y) {
        return Err(AcaeError::DegenerateConfiguration(format!(
            "{} points do not span a plane",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<Point3>() / n;
    let my = y.iter().sum::<Point3>() / n;
    let cov: Matrix3<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - my) * (a - mx).transpose())
        .sum::<Matrix3<f64>>()
        / n;
    let var_x = x.iter().map(|a| (a - mx).norm_squared()).sum::<f64>() / n;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x;
    Ok(Similarity {
        scale,
        rotation,
        translation: my - scale * rotation * mx,
    })
}

pub fn pmpjpe(pred: &PoseMatrix, gt: &PoseMatrix) -> Result<f64> {
    let idx = joint_set(pred, gt)?;
    let x: Vec<Point3> = idx.iter().map(|&j| pred.joints[j]).collect();
    let y: Vec<Point3> = idx.iter().map(|&j| gt.joints[j]).collect();
    let t = align_similarity(&x, &y)?;
    let errs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (t.apply(a) - b).norm()).collect();
    Ok(pairwise_mean(&errs))
}

/// Percentage of valid joints whose root-aligned error is below `threshold`.
pub fn pck(pred: &PoseMatrix, gt: &PoseMatrix, threshold: f64, root: usize) -> Result<f64> {
    let errs = root_aligned_errors(pred, gt, root)?;
    let hits = errs.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errs.len() as f64)
}

/// Whether every valid joint is within `threshold` after root alignment.
pub fn pose_correct(pred: &PoseMatrix, gt: &PoseMatrix, threshold: f64, root: usize) -> Result<bool> {
    Ok(root_aligned_errors(pred, gt, root)?.iter().all(|&e| e < threshold))
}

/// Percentage of correct poses.
pub fn cps(preds: &[PoseMatrix], gts: &[PoseMatrix], threshold: f64, root: usize) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    let mut correct = 0;
    for (p, g) in preds.iter().zip(gts) {
        correct += pose_correct(p, g, threshold, root)? as usize;
    }
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub mpjpe: f64,
    pub pmpjpe: f64,
    pub pck100: f64,
    pub correct200: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub pmpjpe: f64,
    pub pck100: f64,
    pub cps200: f64,
    pub poses: Vec<PoseMetrics>,
}

pub fn pose_metrics(pred: &PoseMatrix, gt: &PoseMatrix, root: usize) -> Result<PoseMetrics> {
    Ok(PoseMetrics {
        mpjpe: mpjpe(pred, gt, root)?,
        pmpjpe: pmpjpe(pred, gt)?,
        pck100: pck(pred, gt, PCK_THRESHOLD, root)?,
        correct200: pose_correct(pred, gt, CPS_THRESHOLD, root)?,
    })
}

/// All four metrics over paired prediction and ground-truth poses.
pub fn evaluate(preds: &[PoseMatrix], gts: &[PoseMatrix], root: usize) -> Result<MetricReport> {
    if preds.len() != gts.len() {
        return Err(AcaeError::ShapeMismatch(format!(
            "{} predictions for {} ground-truth poses",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(AcaeError::EmptyCorpus);
    }
    let pairs: Vec<(&PoseMatrix, &PoseMatrix)> = preds.iter().zip(gts).collect();
    let poses = par_map(&pairs, |(p, g)| pose_metrics(p, g, root))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let col = |f: fn(&PoseMetrics) -> f64| pairwise_mean(&poses.iter().map(f).collect::<Vec<_>>());
    Ok(MetricReport {
        mpjpe: col(|m| m.mpjpe),
        pmpjpe: col(|m| m.pmpjpe),
        pck100: col(|m| m.pck100),
        cps200: col(|m| if m.correct200 { 100.0 } else { 0.0 }),
        poses,
    })
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Summary row followed by one row per pose.
    pub fn write_csv(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "pose,mpjpe,pmpjpe,pck100,cps200")?;
        writeln!(out, "all,{},{},{},{}", self.mpjpe, self.pmpjpe, self.pck100, self.cps200)?;
        for (i, p) in self.poses.iter().enumerate() {
            let c = if p.correct200 { 100.0 } else { 0.0 };
            writeln!(out, "{i},{},{},{},{c}", p.mpjpe, p.pmpjpe, p.pck100)?;
        }
        Ok(())
    }
}

//! Scene-flow, pose and static-mask evaluation.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, sub, FlowField, Pose};

/// Stabilizer of the relative error `e / (‖gt‖ + REL_EPS)`.
pub const REL_EPS: f64 = 1e-4;
/// Mask values below this are classified dynamic.
pub const MASK_THRESHOLD: f64 = 0.40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMetrics {
    pub epe3d: f64,
    pub acc3ds: f64,
    pub acc3dr: f64,
    pub outliers3d: f64,
}

/// Per-point classification behind [`FlowMetrics`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointError {
    pub epe: f64,
    pub rel: f64,
}

impl PointError {
    pub fn strict(&self) -> bool {
        self.epe < 0.05 || self.rel < 0.05
    }

    pub fn relaxed(&self) -> bool {
        self.epe < 0.1 || self.rel < 0.1
    }

    pub fn outlier(&self) -> bool {
        self.epe > 0.3 || self.rel > 0.1
    }
}

pub fn point_errors(pred: &FlowField, gt: &FlowField) -> Result<Vec<PointError>> {
    if pred.len() != gt.len() {
        return Err(Error::shape("flow_metrics", &[gt.len()], &[pred.len()]));
    }
    Ok(pred
        .vectors()
        .iter()
        .zip(gt.vectors())
        .map(|(p, g)| {
            let epe = norm(&sub(p, g)) as f64;
            PointError {
                epe,
                rel: epe / (norm(g) as f64 + REL_EPS),
            }
        })
        .collect())
}

impl FlowMetrics {
    /// Pools per-point errors; errors on an empty set.
    pub fn from_errors(errors: &[PointError]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::invalid("flow metrics of zero points"));
        }
        let n = errors.len() as f64;
        let frac = |f: fn(&PointError) -> bool| errors.iter().filter(|e| f(e)).count() as f64 / n;
        Ok(Self {
            epe3d: errors.iter().map(|e| e.epe).sum::<f64>() / n,
            acc3ds: frac(PointError::strict),
            acc3dr: frac(PointError::relaxed),
            outliers3d: frac(PointError::outlier),
        })
    }
}

pub fn flow_metrics(pred: &FlowField, gt: &FlowField) -> Result<FlowMetrics> {
    FlowMetrics::from_errors(&point_errors(pred, gt)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseMetrics {
    pub t_err_m: f64,
    pub rot_err_deg: f64,
}

pub fn pose_metrics(pred: &Pose, gt: &Pose) -> PoseMetrics {
    PoseMetrics {
        t_err_m: norm(&sub(&pred.t, &gt.t)) as f64,
        rot_err_deg: pred.q.angle_deg(gt.q) as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub balanced_accuracy: f64,
    pub auc: f64,
}

/// Quality of a soft static mask against dynamic labels (`true` = dynamic).
///
/// Points with `M < threshold` are predicted dynamic. The AUC is the
/// probability that a random static point scores higher than a random
/// dynamic one, ties counting one half.
pub fn mask_metrics(mask: &[f64], dynamic: &[bool], threshold: f64) -> Result<MaskMetrics> {
    if mask.len() != dynamic.len() {
        return Err(Error::shape("mask_metrics", &[dynamic.len()], &[mask.len()]));
    }
    let n_dyn = dynamic.iter().filter(|&&d| d).count();
    let n_static = dynamic.len() - n_dyn;
    if n_dyn == 0 || n_static == 0 {
        return Err(Error::invalid("mask metrics need both static and dynamic points"));
    }
    let dyn_hits = mask.iter().zip(dynamic).filter(|(&m, &d)| d && m < threshold).count();
    let static_hits = mask
        .iter()
        .zip(dynamic)
        .filter(|(&m, &d)| !d && !(m < threshold))
        .count();
    let balanced_accuracy = 0.5 * (dyn_hits as f64 / n_dyn as f64 + static_hits as f64 / n_static as f64);

    // Mann-Whitney U from average ranks.
    let mut order: Vec<usize> = (0..mask.len()).collect();
    order.sort_by(|&a, &b| mask[a].total_cmp(&mask[b]));
    let mut rank_sum_static = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && mask[order[j + 1]] == mask[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_static += order[i..=j].iter().filter(|&&k| !dynamic[k]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum_static - (n_static * (n_static + 1)) as f64 / 2.0;
    Ok(MaskMetrics {
        balanced_accuracy,
        auc: u / (n_static * n_dyn) as f64,
    })
}

/// Metrics of one evaluation run, as written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub points: usize,
    /// How flow metrics are aggregated over pairs.
    pub pooling: String,
    pub flow: Option<FlowMetrics>,
    /// Mean over pairs with a ground-truth pose.
    pub pose: Option<PoseMetrics>,
    pub mask: Option<MaskMetrics>,
}

impl fmt::Display for EvalReport {
    /// Column-aligned table in the usual scene-flow layout.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>12} {:>10} {:>12}",
            "EPE3D(m)", "Acc3DS", "Acc3DR", "Outliers3D", "t_err(m)", "rot_err(deg)"
        )?;
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        writeln!(
            f,
            "{:>10} {:>10} {:>10} {:>12} {:>10} {:>12}",
            cell(self.flow.map(|m| m.epe3d)),
            cell(self.flow.map(|m| m.acc3ds)),
            cell(self.flow.map(|m| m.acc3dr)),
            cell(self.flow.map(|m| m.outliers3d)),
            cell(self.pose.map(|m| m.t_err_m)),
            cell(self.pose.map(|m| m.rot_err_deg)),
        )?;
        if let Some(m) = self.mask {
            writeln!(
                f,
                "static mask: balanced accuracy {:.4}, AUC {:.4}",
                m.balanced_accuracy, m.auc
            )?;
        }
        write!(f, "{} pairs, {} points, {}", self.pairs, self.points, self.pooling)
    }
}

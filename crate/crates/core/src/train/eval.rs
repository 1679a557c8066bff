use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{rows3, Model};
use crate::data::FramePair;
use crate::error::{Error, Result};
use crate::geometry::ply::{write_ply, Rgb};
use crate::geometry::{three_nn_interpolate, FlowField, Point, Pose, Quaternion};
use crate::init_heads::Dropout;
use crate::metrics::{
    mask_metrics, point_errors, pose_metrics, EvalReport, FlowMetrics, PointError, PoseMetrics, MASK_THRESHOLD,
};
use crate::tensor::{Graph, Real};

/// Full-resolution output of one pair with dropout disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub flow: FlowField,
    pub pose: Pose,
    /// Static probability per first-frame point: the level-1 static mask
    /// interpolated onto the input points, i.e. the mask the finest warp
    /// layer blends with.
    pub static_mask: Vec<Real>,
    /// Visibility probability per first-frame point.
    pub visibility: Vec<Real>,
}

impl Model {
    pub fn predict(&self, pair: &FramePair) -> Result<Prediction> {
        let geom = self.geometry(pair)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &geom, &mut Dropout::disabled())?;
        let fine = out.finest();
        if fine.flow_points.len() != pair.p.len() || fine.pose_points.len() != pair.p.len() {
            return Err(Error::shape(
                "finest estimate",
                &[pair.p.len()],
                &[fine.flow_points.len()],
            ));
        }
        let q = Quaternion::from_slice(g.value(fine.pose.q).data())?;
        let n = q.norm();
        let q = Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n);
        let t = g.value(fine.pose.t).data();
        let coarse = out.level(1);
        let static_mask = three_nn_interpolate(&fine.pose_points, &coarse.pose_points, g.value(coarse.pose.m))?;
        Ok(Prediction {
            flow: FlowField::new(rows3(g.value(fine.flow.sf)))?,
            pose: Pose::new(q, [t[0], t[1], t[2]]),
            static_mask: static_mask.data().to_vec(),
            visibility: g.value(fine.flow.occ).data().to_vec(),
        })
    }
}

/// Flow metrics pooled over every point of every pair with ground-truth
/// flow, pose metrics averaged over pairs with a ground-truth pose, and
/// static-mask metrics pooled over points with dynamic labels.
pub fn evaluate(model: &Model, pairs: &[FramePair]) -> Result<EvalReport> {
    let mut errors: Vec<PointError> = Vec::new();
    let mut pose_sum = (0.0, 0.0);
    let mut pose_n = 0usize;
    let mut mask = Vec::new();
    let mut labels = Vec::new();
    let mut points = 0;
    for pair in pairs {
        let pred = model.predict(pair)?;
        points += pair.p.len();
        if let Some(gt) = &pair.gt_flow {
            errors.extend(point_errors(&pred.flow, gt)?);
        }
        if let Some(gt) = &pair.gt_pose {
            let m = pose_metrics(&pred.pose, gt);
            pose_sum.0 += m.t_err_m;
            pose_sum.1 += m.rot_err_deg;
            pose_n += 1;
        }
        if let Some(d) = &pair.dynamic {
            mask.extend(pred.static_mask.iter().map(|&m| m as f64));
            labels.extend_from_slice(d);
        }
    }
    let both_classes = labels.iter().any(|&d| d) && labels.iter().any(|&d| !d);
    Ok(EvalReport {
        pairs: pairs.len(),
        points,
        pooling: "flow and mask metrics pooled over points, pose metrics averaged over pairs".into(),
        flow: if errors.is_empty() {
            None
        } else {
            Some(FlowMetrics::from_errors(&errors)?)
        },
        pose: (pose_n > 0).then(|| PoseMetrics {
            t_err_m: pose_sum.0 / pose_n as f64,
            rot_err_deg: pose_sum.1 / pose_n as f64,
        }),
        mask: if both_classes {
            Some(mask_metrics(&mask, &labels, MASK_THRESHOLD)?)
        } else {
            None
        },
    })
}

/// Serialized form of a [`Prediction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceExport {
    pub pose: Pose,
    pub flow: Vec<Point>,
    pub static_mask: Vec<Real>,
    pub visibility: Vec<Real>,
    /// Per-point relaxed-accuracy flags when ground-truth flow was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<Vec<bool>>,
}

const CORRECT: Rgb = [40, 90, 230];
const WRONG: Rgb = [220, 40, 40];
const UNKNOWN: Rgb = [160, 160, 160];

pub const EXPORT_JSON: &str = "prediction.json";
pub const EXPORT_PLY: &str = "warped.ply";

/// Writes `prediction.json` and `warped.ply` (the first frame moved by the
/// predicted flow) to `dir`. With ground-truth flow, points are blue where
/// the prediction meets the relaxed accuracy threshold and red elsewhere.
pub fn write_export(dir: &Path, pair: &FramePair, pred: &Prediction) -> Result<InferenceExport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let correct = match &pair.gt_flow {
        Some(gt) => Some(
            point_errors(&pred.flow, gt)?
                .iter()
                .map(PointError::relaxed)
                .collect::<Vec<_>>(),
        ),
        None => None,
    };
    let colors: Vec<Rgb> = match &correct {
        Some(c) => c.iter().map(|&ok| if ok { CORRECT } else { WRONG }).collect(),
        None => vec![UNKNOWN; pair.p.len()],
    };
    let warped = pair.p.warped(&pred.flow)?;
    write_ply(&dir.join(EXPORT_PLY), warped.points(), Some(&colors))?;
    let export = InferenceExport {
        pose: pred.pose,
        flow: pred.flow.vectors().to_vec(),
        static_mask: pred.static_mask.clone(),
        visibility: pred.visibility.clone(),
        correct,
    };
    let path = dir.join(EXPORT_JSON);
    let s = serde_json::to_string_pretty(&export).map_err(|e| Error::json(&path, e))?;
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
    Ok(export)
}

pub fn read_export(dir: &Path) -> Result<InferenceExport> {
    let path = dir.join(EXPORT_JSON);
    let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::json(&path, e))
}

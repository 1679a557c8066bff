//! Scene pairs: a seeded synthetic generator with exact labels, KITTI
//! odometry ingestion and on-disk datasets.

mod dataset;
mod kitti;
mod synthetic;

pub use dataset::{
    load_dataset, read_cloud, save_dataset, DatasetRecipe, Manifest, ManifestEntry, PairMeta, MANIFEST_FILE,
};
pub use kitti::{
    kitti_pair, load_kitti_bin, load_kitti_poses, parse_kitti_bin, parse_kitti_poses, relative_pose, remove_ground,
    sample_to_n, write_kitti_bin, KittiPrep, DEFAULT_GROUND_Z,
};
pub use synthetic::{gen_synthetic_pair, SceneRecipe};

use crate::error::{Error, Result};
use crate::geometry::{FlowField, PointCloud, Pose};

/// Tolerance on `|gt_pose.q| = 1`.
pub const UNIT_QUAT_TOL: f64 = 1e-6;

/// Two consecutive frames and whatever ground truth is known about them.
///
/// `gt_pose` maps first-frame coordinates into second-frame coordinates, so
/// a static point `p` is observed at `gt_pose.apply(p)` in the second frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub p: PointCloud,
    pub q: PointCloud,
    pub gt_flow: Option<FlowField>,
    pub gt_pose: Option<Pose>,
    /// `true` for points on independently moving objects.
    pub dynamic: Option<Vec<bool>>,
    /// `true` for first-frame points without a counterpart in `q`.
    pub occluded: Option<Vec<bool>>,
}

impl FramePair {
    /// A pair without any ground truth.
    pub fn unlabeled(p: PointCloud, q: PointCloud) -> Self {
        Self {
            p,
            q,
            gt_flow: None,
            gt_pose: None,
            dynamic: None,
            occluded: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.p.len();
        let lens = [
            ("gt_flow", self.gt_flow.as_ref().map(|f| f.len())),
            ("dynamic", self.dynamic.as_ref().map(|d| d.len())),
            ("occluded", self.occluded.as_ref().map(|o| o.len())),
        ];
        for (name, len) in lens {
            if let Some(len) = len {
                if len != n {
                    return Err(Error::invalid(format!("{name} has {len} entries for {n} points")));
                }
            }
        }
        if let Some(pose) = &self.gt_pose {
            let norm = pose.q.norm() as f64;
            if !((norm - 1.0).abs() <= UNIT_QUAT_TOL) || pose.t.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "gt_pose is not a unit-quaternion pose (|q| = {norm})"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;

use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FramePair;
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud, Pose};
use crate::tensor::Real;

/// Points below this height in the LiDAR frame are treated as ground (m).
pub const DEFAULT_GROUND_Z: Real = -1.4;
/// Largest accepted deviation of a pose-file rotation from orthonormal.
const ROTATION_TOL: Real = 1e-3;
const RECORD_BYTES: usize = 16;

/// Decodes a velodyne scan: little-endian `f32` quadruples `(x, y, z,
/// intensity)`. Intensity is dropped.
pub fn parse_kitti_bin(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    let whole = bytes.len() / RECORD_BYTES * RECORD_BYTES;
    if whole != bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: whole as u64,
            message: format!(
                "{} bytes is not a whole number of {RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for (r, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("4-byte field"));
        let p = [f(0) as Real, f(1) as Real, f(2) as Real];
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (r * RECORD_BYTES) as u64,
                message: "non-finite coordinate".into(),
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_kitti_bin(path: &Path) -> Result<Vec<Point>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_bin(&bytes, path)
}

/// Writes points as velodyne records with the given intensities (zero when
/// `None`).
pub fn write_kitti_bin(path: &Path, points: &[Point], intensity: Option<&[f32]>) -> Result<()> {
    if let Some(i) = intensity {
        if i.len() != points.len() {
            return Err(Error::shape("write_kitti_bin intensity", &[points.len()], &[i.len()]));
        }
    }
    let mut bytes = Vec::with_capacity(points.len() * RECORD_BYTES);
    for (k, p) in points.iter().enumerate() {
        for v in p {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let i = intensity.map_or(0.0, |i| i[k]);
        bytes.extend_from_slice(&i.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a pose file: one row-major `3 x 4` `[R|t]` per line. Blank lines
/// are only accepted at the end of the file.
pub fn parse_kitti_poses(text: &str, path: &Path) -> Result<Vec<Pose>> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let lines: Vec<&str> = text.lines().collect();
    let last = lines.iter().rposition(|l| !l.trim().is_empty()).map_or(0, |i| i + 1);
    let mut out = Vec::with_capacity(last);
    for (i, line) in lines[..last].iter().enumerate() {
        let vals = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<Real>()
                    .map_err(|_| perr(i + 1, format!("'{tok}' is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 12 {
            return Err(perr(i + 1, format!("expected 12 values, found {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(perr(i + 1, "non-finite value".into()));
        }
        let mut m = [[0.0; 4]; 4];
        for r in 0..3 {
            m[r].copy_from_slice(&vals[4 * r..4 * r + 4]);
        }
        m[3][3] = 1.0;
        out.push(Pose::from_matrix(&m, ROTATION_TOL).map_err(|e| perr(i + 1, e.to_string()))?);
    }
    Ok(out)
}

pub fn load_kitti_poses(path: &Path) -> Result<Vec<Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&text, path)
}

/// `T_a⁻¹ T_b` for absolute poses `a`, `b`: maps frame-`b` coordinates into
/// frame-`a` coordinates.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    a.inverse().compose(b)
}

/// Drops points with `z < z_thresh`, keeping order.
pub fn remove_ground(pc: &PointCloud, z_thresh: Real) -> Result<PointCloud> {
    let kept: Vec<Point> = pc.points().iter().filter(|p| !(p[2] < z_thresh)).copied().collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!(
            "ground removal at z < {z_thresh} left no points"
        )));
    }
    PointCloud::new(kept)
}

/// Draws `n` points uniformly: without replacement when the cloud has at
/// least `n` points, with replacement otherwise.
pub fn sample_to_n(pc: &PointCloud, n: usize, seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = pc.len();
    let idx: Vec<usize> = if m >= n {
        index::sample(&mut rng, m, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..m)).collect()
    };
    pc.select(&idx)
}

/// Preprocessing of a raw scan pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KittiPrep {
    pub ground_z: Real,
    pub n_points: usize,
    pub seed: u64,
}

impl Default for KittiPrep {
    fn default() -> Self {
        Self {
            ground_z: DEFAULT_GROUND_Z,
            n_points: 8192,
            seed: 0,
        }
    }
}

/// Builds a pair from two consecutive scans and their absolute poses.
///
/// The stored ground-truth pose is `T_2⁻¹ T_1`, which carries first-frame
/// coordinates into the second frame.
pub fn kitti_pair(p: &[Point], q: &[Point], abs: Option<(&Pose, &Pose)>, prep: &KittiPrep) -> Result<FramePair> {
    let p = remove_ground(&PointCloud::new(p.to_vec())?, prep.ground_z)?;
    let q = remove_ground(&PointCloud::new(q.to_vec())?, prep.ground_z)?;
    let mut pair = FramePair::unlabeled(
        sample_to_n(&p, prep.n_points, prep.seed),
        sample_to_n(&q, prep.n_points, prep.seed.wrapping_add(1)),
    );
    pair.gt_pose = abs.map(|(a, b)| relative_pose(b, a));
    Ok(pair)
}

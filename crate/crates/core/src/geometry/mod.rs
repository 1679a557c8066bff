//! Point clouds, rigid motions and the non-learned neighborhood primitives
//! (farthest point sampling, k-nearest neighbors, inverse-distance
//! interpolation).

pub mod ply;
mod quat;

pub use quat::{Pose, Quaternion};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub type Point = [Real; 3];

/// Stabilizer in inverse-distance weights.
pub const INTERP_EPS: Real = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    /// Rejects empty clouds and non-finite coordinates.
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point cloud coordinates".into()));
        }
        Ok(Self { points })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::shape("PointCloud::from_tensor", &[t.rows(), 3], t.shape()));
        }
        Self::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 3], self.points.iter().flatten().copied().collect()).expect("N x 3 layout")
    }

    /// Translates every point by the matching flow vector.
    pub fn warped(&self, flow: &FlowField) -> Result<PointCloud> {
        if flow.len() != self.len() {
            return Err(Error::shape("PointCloud::warped", &[self.len()], &[flow.len()]));
        }
        PointCloud::new(self.points.iter().zip(flow.vectors()).map(|(p, f)| add(p, f)).collect())
    }

    pub fn transformed(&self, pose: &Pose) -> Result<PointCloud> {
        let points = self
            .points
            .iter()
            .map(|p| pose_apply(pose, p))
            .collect::<Result<Vec<_>>>()?;
        PointCloud::new(points)
    }
}

/// Per-point motion vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    vectors: Vec<Point>,
}

impl FlowField {
    pub fn new(vectors: Vec<Point>) -> Result<Self> {
        if vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow vectors".into()));
        }
        Ok(Self { vectors })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            vectors: vec![[0.0; 3]; n],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.cols() != 3 {
            return Err(Error::shape("FlowField::from_tensor", &[t.rows(), 3], t.shape()));
        }
        Self::new(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vectors(&self) -> &[Point] {
        &self.vectors
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.len(), 3], self.vectors.iter().flatten().copied().collect()).expect("N x 3 layout")
    }
}

pub fn add(a: &Point, b: &Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm(a: &Point) -> Real {
    dist2(a, &[0.0; 3]).sqrt()
}

pub fn dist2(a: &Point, b: &Point) -> Real {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy farthest point sampling starting from `seed_index`.
///
/// Each pick maximizes the distance to the already-selected set; ties go to
/// the lowest index.
pub fn fps(points: &[Point], m: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} of {n} points")));
    }
    if seed_index >= n {
        return Err(Error::invalid(format!(
            "seed index {seed_index} out of range for {n} points"
        )));
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_d = vec![Real::INFINITY; n];
    let mut current = seed_index;
    selected.push(current);
    while selected.len() < m {
        let c = points[current];
        min_d[current] = Real::NEG_INFINITY;
        let mut best = 0;
        let mut best_d = Real::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        selected.push(best);
        current = best;
    }
    Ok(selected)
}

/// `k` nearest neighbors in `reference` for every query point, row-major
/// (`query.len() x k`), ordered by ascending squared distance with ties
/// broken by lower index.
pub fn knn(query: &[Point], reference: &[Point], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > reference.len() {
        return Err(Error::invalid(format!(
            "k = {k} invalid for a reference set of {} points",
            reference.len()
        )));
    }
    let mut out = Vec::with_capacity(query.len() * k);
    let mut best: Vec<(Real, usize)> = Vec::with_capacity(k + 1);
    for q in query {
        best.clear();
        for (j, r) in reference.iter().enumerate() {
            let d = dist2(q, r);
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            // Equal distances insert after existing entries, so lower indices win.
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, j));
            if best.len() > k {
                best.pop();
            }
        }
        out.extend(best.iter().map(|&(_, j)| j));
    }
    Ok(out)
}

/// Indices and normalized inverse-distance weights of the three nearest
/// sources for every target (row-major, three per target).
pub fn three_nn_weights(targets: &[Point], sources: &[Point]) -> Result<(Vec<usize>, Vec<Real>)> {
    if sources.len() < 3 {
        return Err(Error::invalid("three-NN interpolation needs at least 3 sources"));
    }
    let idx = knn(targets, sources, 3)?;
    let mut w = Vec::with_capacity(idx.len());
    for (t, nb) in targets.iter().zip(idx.chunks(3)) {
        let inv: Vec<Real> = nb
            .iter()
            .map(|&j| 1.0 / (dist2(t, &sources[j]).sqrt() + INTERP_EPS))
            .collect();
        let s: Real = inv.iter().sum();
        w.extend(inv.iter().map(|v| v / s));
    }
    Ok((idx, w))
}

/// Interpolates per-source rows of `values` onto `targets`.
pub fn three_nn_interpolate(targets: &[Point], sources: &[Point], values: &Tensor) -> Result<Tensor> {
    if values.rows() != sources.len() {
        return Err(Error::shape(
            "three_nn_interpolate values",
            &[sources.len()],
            &[values.rows()],
        ));
    }
    if !values.all_finite() {
        return Err(Error::NonFinite("interpolated values".into()));
    }
    let (idx, w) = three_nn_weights(targets, sources)?;
    let mut g = Graph::new();
    let v = g.constant(values.clone());
    let out = g.weighted_gather(v, &idx, &w, 3)?;
    Ok(g.value(out).clone())
}

/// Differentiable three-NN interpolation (weights depend only on the fixed
/// point sets).
pub fn three_nn_interpolate_var(g: &mut Graph, targets: &[Point], sources: &[Point], values: Var) -> Result<Var> {
    if g.value(values).rows() != sources.len() {
        return Err(Error::shape(
            "three_nn_interpolate values",
            &[sources.len()],
            &[g.value(values).rows()],
        ));
    }
    let (idx, w) = three_nn_weights(targets, sources)?;
    g.weighted_gather(values, &idx, &w, 3)
}

/// Rotates then translates a single point.
pub fn pose_apply(pose: &Pose, p: &Point) -> Result<Point> {
    let n = pose.q.norm();
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::invalid(format!("pose quaternion has norm {n}, expected unit")));
    }
    Ok(add(&pose.q.rotate(p), &pose.t))
}

/// Differentiable rigid warp of an `n x 3` point tensor by quaternion
/// `q` (`1 x 4`, unit) and translation `t` (`1 x 3`).
pub fn pose_apply_var(g: &mut Graph, q: Var, t: Var, points: Var) -> Result<Var> {
    let qv = g.value(q).data();
    let n = qv.iter().map(|v| v * v).sum::<Real>().sqrt();
    if (n - 1.0).abs() > 1e-3 {
        return Err(Error::invalid(format!("pose quaternion has norm {n}, expected unit")));
    }
    let rows = g.value(points).rows();
    let r = g.quat_to_rot(q)?;
    let rt = g.transpose(r)?;
    let rotated = g.matmul(points, rt)?;
    let t_rows = g.gather(t, &vec![0; rows])?;
    g.add(rotated, t_rows)
}

//! Hierarchical point feature pyramid and the set-conv / set-upconv layers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{fps, knn, sub, Point};
use crate::tensor::{Graph, Mlp, MlpSpec, ParamStore, Part, Tensor, Var};

/// Number of downsampled pyramid levels.
pub const PYRAMID_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PyramidConfig {
    /// Points fed to the network (level 0).
    pub input_points: usize,
    /// Point counts of levels 1..=4.
    pub level_sizes: [usize; PYRAMID_LEVELS],
    /// Feature widths of levels 1..=4.
    pub widths: [usize; PYRAMID_LEVELS],
    pub k_enc: usize,
    pub k_up: usize,
}

impl PyramidConfig {
    pub fn full() -> Self {
        Self {
            input_points: 8192,
            level_sizes: [2048, 1024, 256, 64],
            widths: [32, 64, 128, 256],
            k_enc: 16,
            k_up: 8,
        }
    }

    pub fn reduced() -> Self {
        Self {
            input_points: 512,
            level_sizes: [256, 128, 64, 32],
            widths: [16, 32, 64, 128],
            k_enc: 16,
            k_up: 8,
        }
    }

    /// Point count of level `l` (0 = input).
    pub fn size(&self, l: usize) -> usize {
        if l == 0 {
            self.input_points
        } else {
            self.level_sizes[l - 1]
        }
    }

    /// Feature width of level `l` (level 0 carries xyz).
    pub fn width(&self, l: usize) -> usize {
        if l == 0 {
            3
        } else {
            self.widths[l - 1]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut prev = self.input_points;
        for &n in &self.level_sizes {
            if n == 0 || n >= prev {
                return Err(Error::Config(format!(
                    "pyramid sizes must strictly decrease from {}: {:?}",
                    self.input_points, self.level_sizes
                )));
            }
            prev = n;
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("pyramid widths must be positive".into()));
        }
        if self.k_enc == 0 || self.k_up == 0 {
            return Err(Error::Config("neighbor counts must be positive".into()));
        }
        if self.k_up > self.level_sizes[PYRAMID_LEVELS - 1] {
            return Err(Error::Config(format!(
                "k_up = {} exceeds the coarsest level size",
                self.k_up
            )));
        }
        Ok(())
    }
}

/// Points-only part of a pyramid: sampled points per level, their indices
/// into the previous level, and the set-conv neighborhoods. Depends only on
/// the input cloud, so it can be computed once and reused across passes.
#[derive(Clone, Debug)]
pub struct PyramidGeometry {
    /// `points[l]` for l = 0..=4.
    pub points: Vec<Vec<Point>>,
    /// `parents[l]` (l = 1..=4) indexes level `l - 1`; `parents[0]` is empty.
    pub parents: Vec<Vec<usize>>,
    /// `neighbors[l]` (l = 1..=4): `k_enc` neighbors in level `l - 1` of
    /// every level-`l` point.
    pub neighbors: Vec<Vec<usize>>,
    pub k_enc: usize,
}

impl PyramidGeometry {
    pub fn build(points: &[Point], cfg: &PyramidConfig) -> Result<Self> {
        if points.len() != cfg.input_points {
            return Err(Error::shape(
                "pyramid input",
                &[cfg.input_points, 3],
                &[points.len(), 3],
            ));
        }
        let mut levels = vec![points.to_vec()];
        let mut parents = vec![Vec::new()];
        let mut neighbors = vec![Vec::new()];
        for l in 1..=PYRAMID_LEVELS {
            let prev = &levels[l - 1];
            let idx = fps(prev, cfg.size(l), 0)?;
            let pts: Vec<Point> = idx.iter().map(|&i| prev[i]).collect();
            neighbors.push(knn(&pts, prev, cfg.k_enc.min(prev.len()))?);
            parents.push(idx);
            levels.push(pts);
        }
        Ok(Self {
            points: levels,
            parents,
            neighbors,
            k_enc: cfg.k_enc,
        })
    }

    /// Indices into level `from` of the points of a coarser level `to`.
    pub fn indices_between(&self, from: usize, to: usize) -> Result<Vec<usize>> {
        if from >= to || to > PYRAMID_LEVELS {
            return Err(Error::invalid(format!("no index chain from level {from} to {to}")));
        }
        let mut idx = self.parents[to].clone();
        for l in (from + 1..to).rev() {
            idx = idx.iter().map(|&i| self.parents[l][i]).collect();
        }
        Ok(idx)
    }
}

/// One level of an encoded pyramid.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub points: Vec<Point>,
    pub features: Var,
    pub parent_indices: Vec<usize>,
}

/// `rows x 3` constant of point coordinates.
pub fn points_tensor(points: &[Point]) -> Tensor {
    Tensor::new(&[points.len(), 3], points.iter().flatten().copied().collect()).expect("N x 3 layout")
}

/// `[0 (k times), 1 (k times), ..., n - 1]`.
pub(crate) fn repeat_rows(n: usize, k: usize) -> Vec<usize> {
    (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Offsets `points[nb[r]] - centers[r / k]` as a constant `(M*k) x 3` tensor.
fn relative_offsets(centers: &[Point], points: &[Point], nb: &[usize], k: usize) -> Tensor {
    let mut data = Vec::with_capacity(nb.len() * 3);
    for (r, &j) in nb.iter().enumerate() {
        data.extend_from_slice(&sub(&points[j], &centers[r / k]));
    }
    Tensor::new(&[nb.len(), 3], data).expect("rows x 3")
}

/// Learned downsampling: for each sampled point, max over its `k` neighbors
/// of `MLP((p_k − p_i) ⊕ f_k ⊕ f_i)`.
#[derive(Clone, Debug)]
pub struct SetConv {
    mlp: Mlp,
    k: usize,
}

impl SetConv {
    /// `widths` are the MLP output widths; the input width is `3 + 2 * in_width`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        widths: &[usize],
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut all = vec![3 + 2 * in_width];
        all.extend_from_slice(widths);
        Ok(Self {
            mlp: Mlp::new(store, name, MlpSpec::relu(&all), rng)?,
            k,
        })
    }

    pub fn from_mlp(mlp: Mlp, k: usize) -> Self {
        Self { mlp, k }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn output_width(&self) -> usize {
        self.mlp.output_width()
    }

    /// Neighbor indices this layer uses (clamped to the available points).
    pub fn neighbors(&self, points_in: &[Point], sampled: &[usize]) -> Result<Vec<usize>> {
        let centers: Vec<Point> = sampled.iter().map(|&i| points_in[i]).collect();
        knn(&centers, points_in, self.k.min(points_in.len()))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points_in: &[Point],
        features_in: Var,
        sampled: &[usize],
    ) -> Result<Var> {
        let nb = self.neighbors(points_in, sampled)?;
        self.forward_with(g, store, points_in, features_in, sampled, &nb)
    }

    /// Forward pass with precomputed neighbors (`sampled.len() * k'` indices).
    pub fn forward_with(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points_in: &[Point],
        features_in: Var,
        sampled: &[usize],
        nb: &[usize],
    ) -> Result<Var> {
        if g.value(features_in).rows() != points_in.len() {
            return Err(Error::shape(
                "set_conv features",
                &[points_in.len()],
                &[g.value(features_in).rows()],
            ));
        }
        if sampled.is_empty() || !nb.len().is_multiple_of(sampled.len()) {
            return Err(Error::invalid("set_conv neighbor layout"));
        }
        let k = nb.len() / sampled.len();
        let centers: Vec<Point> = sampled.iter().map(|&i| points_in[i]).collect();
        let rel = g.constant(relative_offsets(&centers, points_in, nb, k));
        let center_rows: Vec<usize> = sampled.iter().flat_map(|&i| std::iter::repeat_n(i, k)).collect();
        let h = self.mlp.forward_parts(
            g,
            store,
            &[
                Part::dense(rel),
                Part::gathered(features_in, nb),
                Part::gathered(features_in, &center_rows),
            ],
        )?;
        g.group_max(h, k)
    }
}

/// Learned upsampling: for each fine point, max over `k` coarse neighbors of
/// `MLP₁(rel ⊕ coarse feature)`, fused with the fine feature by `MLP₂`.
#[derive(Clone, Debug)]
pub struct SetUpconv {
    gather_mlp: Mlp,
    fuse_mlp: Mlp,
    k: usize,
}

impl SetUpconv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        coarse_width: usize,
        fine_width: usize,
        out_width: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let gather_mlp = Mlp::new(
            store,
            &format!("{name}.gather"),
            MlpSpec::relu(&[3 + coarse_width, out_width]),
            rng,
        )?;
        let fuse_mlp = Mlp::new(
            store,
            &format!("{name}.fuse"),
            MlpSpec::relu(&[out_width + fine_width, out_width]),
            rng,
        )?;
        Ok(Self {
            gather_mlp,
            fuse_mlp,
            k,
        })
    }

    pub fn from_mlps(gather_mlp: Mlp, fuse_mlp: Mlp, k: usize) -> Self {
        Self {
            gather_mlp,
            fuse_mlp,
            k,
        }
    }

    pub fn output_width(&self) -> usize {
        self.fuse_mlp.output_width()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coarse_points: &[Point],
        coarse_features: Var,
        fine_points: &[Point],
        fine_features: Var,
    ) -> Result<Var> {
        if self.k > coarse_points.len() {
            return Err(Error::invalid(format!(
                "set_upconv k = {} exceeds {} coarse points",
                self.k,
                coarse_points.len()
            )));
        }
        if g.value(coarse_features).rows() != coarse_points.len() {
            return Err(Error::shape(
                "set_upconv coarse features",
                &[coarse_points.len()],
                &[g.value(coarse_features).rows()],
            ));
        }
        if g.value(fine_features).rows() != fine_points.len() {
            return Err(Error::shape(
                "set_upconv fine features",
                &[fine_points.len()],
                &[g.value(fine_features).rows()],
            ));
        }
        let nb = knn(fine_points, coarse_points, self.k)?;
        let rel = g.constant(relative_offsets(fine_points, coarse_points, &nb, self.k));
        let h = self
            .gather_mlp
            .forward_parts(g, store, &[Part::dense(rel), Part::gathered(coarse_features, &nb)])?;
        let pooled = g.group_max(h, self.k)?;
        self.fuse_mlp
            .forward_parts(g, store, &[Part::dense(pooled), Part::dense(fine_features)])
    }
}

/// Siamese encoder: one set-conv per level, shared by both frames.
#[derive(Clone, Debug)]
pub struct Encoder {
    convs: Vec<SetConv>,
    cfg: PyramidConfig,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PyramidConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::with_capacity(PYRAMID_LEVELS);
        for l in 1..=PYRAMID_LEVELS {
            let w = cfg.width(l);
            convs.push(SetConv::new(
                store,
                &format!("{name}.l{l}"),
                cfg.width(l - 1),
                &[w, w],
                cfg.k_enc,
                rng,
            )?);
        }
        Ok(Self {
            convs,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &PyramidConfig {
        &self.cfg
    }

    /// Encodes one frame. Entry 0 is the input cloud with its coordinates as
    /// features; entries 1..=4 are the downsampled levels.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, geom: &PyramidGeometry) -> Result<Vec<PyramidLevel>> {
        if geom.points.len() != PYRAMID_LEVELS + 1 || geom.points[0].len() != self.cfg.input_points {
            return Err(Error::invalid(
                "pyramid geometry does not match the encoder configuration",
            ));
        }
        let f0 = g.constant(points_tensor(&geom.points[0]));
        let mut levels = vec![PyramidLevel {
            points: geom.points[0].clone(),
            features: f0,
            parent_indices: Vec::new(),
        }];
        for l in 1..=PYRAMID_LEVELS {
            let prev = &levels[l - 1];
            let f = self.convs[l - 1].forward_with(
                g,
                store,
                &prev.points,
                prev.features,
                &geom.parents[l],
                &geom.neighbors[l],
            )?;
            levels.push(PyramidLevel {
                points: geom.points[l].clone(),
                features: f,
                parent_indices: geom.parents[l].clone(),
            });
        }
        Ok(levels)
    }
}

/// Builds geometry and features for one frame.
pub fn build_pyramid(
    g: &mut Graph,
    store: &ParamStore,
    encoder: &Encoder,
    points: &[Point],
) -> Result<Vec<PyramidLevel>> {
    let geom = PyramidGeometry::build(points, encoder.config())?;
    encoder.forward(g, store, &geom)
}

#[cfg(test)]
mod tests;

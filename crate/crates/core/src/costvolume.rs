//! Attentive cost volume between two frames and the occlusion-aware blend.

use rand::Rng;

use crate::encoder::repeat_rows;
use crate::error::{Error, Result};
use crate::geometry::{knn, Point};
use crate::tensor::{Graph, Mlp, MlpSpec, ParamStore, Part, Var};

/// Width of the position encoding `p ⊕ q ⊕ (q − p) ⊕ ‖q − p‖²`.
pub const POS_WIDTH: usize = 10;

fn points_of(g: &Graph, v: Var, ctx: &'static str) -> Result<Vec<Point>> {
    let t = g.value(v);
    if t.cols() != 3 {
        return Err(Error::shape(ctx, &[t.rows(), 3], t.shape()));
    }
    Ok(t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Position encoding of every (center, neighbor) pair, `(N*k) x 10`.
/// Differentiable in both point sets.
pub fn position_encoding(g: &mut Graph, centers: Var, others: Var, nb: &[usize], k: usize) -> Result<Var> {
    let n = g.value(centers).rows();
    if nb.len() != n * k {
        return Err(Error::shape("position_encoding neighbors", &[n * k], &[nb.len()]));
    }
    let pi = g.gather(centers, &repeat_rows(n, k))?;
    let qk = g.gather(others, nb)?;
    let d = g.sub(qk, pi)?;
    let sq = g.square(d);
    let d2 = g.row_sum(sq)?;
    g.concat(&[pi, qk, d, d2])
}

/// Cross-frame matching cost with learned attention over `k1` neighbors in
/// the second frame, followed by attentive aggregation over `k2` neighbors in
/// the first frame.
#[derive(Clone, Debug)]
pub struct AttentiveCostVolume {
    feature_mlp: Mlp,
    cross_attention: Mlp,
    self_attention: Mlp,
    pub k1: usize,
    pub k2: usize,
}

impl AttentiveCostVolume {
    /// `layers` ReLU layers of width `out_width` produce the pairwise feature;
    /// both attention scorers are single bias-free linear layers.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        p_width: usize,
        q_width: usize,
        out_width: usize,
        layers: usize,
        k1: usize,
        k2: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 || k1 == 0 || k2 == 0 {
            return Err(Error::Config(
                "cost volume needs at least one layer and one neighbor".into(),
            ));
        }
        let mut widths = vec![POS_WIDTH + p_width + q_width];
        widths.extend(std::iter::repeat_n(out_width, layers));
        Ok(Self {
            feature_mlp: Mlp::new(store, &format!("{name}.feat"), MlpSpec::relu(&widths), rng)?,
            cross_attention: Mlp::new(
                store,
                &format!("{name}.att_q"),
                MlpSpec::fc(POS_WIDTH + out_width, out_width).without_bias(),
                rng,
            )?,
            self_attention: Mlp::new(
                store,
                &format!("{name}.att_p"),
                MlpSpec::fc(POS_WIDTH + out_width, out_width).without_bias(),
                rng,
            )?,
            k1,
            k2,
        })
    }

    pub fn from_parts(feature_mlp: Mlp, cross_attention: Mlp, self_attention: Mlp, k1: usize, k2: usize) -> Self {
        Self {
            feature_mlp,
            cross_attention,
            self_attention,
            k1,
            k2,
        }
    }

    pub fn output_width(&self) -> usize {
        self.feature_mlp.output_width()
    }

    /// Returns the `N x C` cost volume and, for inspection, both attention
    /// weight tensors (`(N*k1) x C`, `(N*k2) x C`).
    pub fn forward_detailed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: Var,
        fp: Var,
        q: Var,
        fq: Var,
    ) -> Result<(Var, Var, Var)> {
        let pp = points_of(g, p, "cost volume P")?;
        let qp = points_of(g, q, "cost volume Q")?;
        let n = pp.len();
        if g.value(fp).rows() != n || g.value(fq).rows() != qp.len() {
            return Err(Error::invalid("cost volume features do not match their point sets"));
        }
        if self.k1 > qp.len() || self.k2 > n {
            return Err(Error::invalid(format!(
                "cost volume k1 = {} / k2 = {} out of range for {} / {} points",
                self.k1,
                self.k2,
                qp.len(),
                n
            )));
        }
        let k1 = self.k1;
        let nb = knn(&pp, &qp, k1)?;
        let rep = repeat_rows(n, k1);
        let pos = position_encoding(g, p, q, &nb, k1)?;
        let f = self.feature_mlp.forward_parts(
            g,
            store,
            &[Part::dense(pos), Part::gathered(fp, &rep), Part::gathered(fq, &nb)],
        )?;
        let logits = self
            .cross_attention
            .forward_parts(g, store, &[Part::dense(pos), Part::dense(f)])?;
        let w1 = g.group_softmax(logits, k1)?;
        let weighted = g.mul(w1, f)?;
        let cost = g.group_sum(weighted, k1)?;

        let k2 = self.k2;
        let nb2 = knn(&pp, &pp, k2)?;
        let pos2 = position_encoding(g, p, p, &nb2, k2)?;
        let cost_nb = g.gather(cost, &nb2)?;
        let logits2 = self
            .self_attention
            .forward_parts(g, store, &[Part::dense(pos2), Part::dense(cost_nb)])?;
        let w2 = g.group_softmax(logits2, k2)?;
        let weighted2 = g.mul(w2, cost_nb)?;
        let cv = g.group_sum(weighted2, k2)?;
        Ok((cv, w1, w2))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p: Var, fp: Var, q: Var, fq: Var) -> Result<Var> {
        Ok(self.forward_detailed(g, store, p, fp, q, fq)?.0)
    }
}

/// `sigmoid(FC(f_O))`: per-point probability of being visible in the second frame.
pub fn occlusion_head(g: &mut Graph, store: &ParamStore, fc: &Mlp, f_o: Var) -> Result<Var> {
    if fc.output_width() != 1 {
        return Err(Error::invalid("occlusion head must produce one channel"));
    }
    let z = fc.forward(g, store, f_o)?;
    Ok(g.sigmoid(z))
}

/// `k` nearest neighbors of every point within its own cloud, with the point
/// itself guaranteed to be in its own set.
pub fn self_inclusive_neighbors(points: &[Point], k: usize) -> Result<Vec<usize>> {
    let mut nb = knn(points, points, k)?;
    for (i, row) in nb.chunks_mut(k).enumerate() {
        if !row.contains(&i) {
            row[k - 1] = i;
        }
    }
    Ok(nb)
}

/// `CV_local = max over N(p) of CV_self`; `CV_o = O·CV_self + (1 − O)·CV_local`.
/// Returns `(CV_o, CV_local)`.
pub fn occlusion_blend(g: &mut Graph, cv_self: Var, o: Var, points: &[Point], k: usize) -> Result<(Var, Var)> {
    let n = points.len();
    let c = g.value(cv_self).cols();
    if g.value(cv_self).rows() != n {
        return Err(Error::shape(
            "occlusion_blend cost volume",
            &[n, c],
            g.value(cv_self).shape(),
        ));
    }
    if g.value(o).rows() != n || g.value(o).cols() != 1 {
        return Err(Error::shape("occlusion_blend mask", &[n, 1], g.value(o).shape()));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "occlusion blend k = {k} out of range for {n} points"
        )));
    }
    let nb = self_inclusive_neighbors(points, k)?;
    let gathered = g.gather(cv_self, &nb)?;
    let local = g.group_max(gathered, k)?;
    let oe = g.expand_cols(o, c)?;
    let a = g.mul(oe, cv_self)?;
    let inv = g.one_minus(oe);
    let b = g.mul(inv, local)?;
    Ok((g.add(a, b)?, local))
}

#[derive(Clone, Copy, Debug)]
pub struct OccCvOutput {
    /// Occlusion-aware cost volume.
    pub cv_o: Var,
    /// Visibility probability, `N x 1`.
    pub occ: Var,
    /// Cost volume before the blend.
    pub cv_self: Var,
}

/// Two attentive cost volumes of different depth: the deeper one gives
/// `CV_self`, the shallower one together with a prior cost feature predicts
/// the occlusion mask, which then drives the blend.
#[derive(Clone, Debug)]
pub struct OccPerceptionCostVolume {
    main: AttentiveCostVolume,
    occ_branch: AttentiveCostVolume,
    head: Mlp,
    pub k_local: usize,
}

impl OccPerceptionCostVolume {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feat_width: usize,
        out_width: usize,
        occ_width: usize,
        prior_width: usize,
        k1: usize,
        k2: usize,
        k_local: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let main = AttentiveCostVolume::new(
            store,
            &format!("{name}.main"),
            feat_width,
            feat_width,
            out_width,
            3,
            k1,
            k2,
            rng,
        )?;
        let occ_branch = AttentiveCostVolume::new(
            store,
            &format!("{name}.occ"),
            feat_width,
            feat_width,
            occ_width,
            2,
            k1,
            k2,
            rng,
        )?;
        let head = Mlp::fc(store, &format!("{name}.occ_head"), occ_width + prior_width, 1, rng)?;
        Ok(Self {
            main,
            occ_branch,
            head,
            k_local,
        })
    }

    pub fn output_width(&self) -> usize {
        self.main.output_width()
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p_warped: Var,
        fp: Var,
        q: Var,
        fq: Var,
        prior: Var,
    ) -> Result<OccCvOutput> {
        let cv_self = self.main.forward(g, store, p_warped, fp, q, fq)?;
        let a2 = self.occ_branch.forward(g, store, p_warped, fp, q, fq)?;
        let f_o = g.concat(&[a2, prior])?;
        let occ = occlusion_head(g, store, &self.head, f_o)?;
        let pts = points_of(g, p_warped, "occlusion blend points")?;
        let k = self.k_local.min(pts.len());
        let (cv_o, _) = occlusion_blend(g, cv_self, occ, &pts, k)?;
        Ok(OccCvOutput { cv_o, occ, cv_self })
    }
}

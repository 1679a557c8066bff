//! Tape-recorded reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its value; [`Graph::backward`] walks the tape in reverse and
//! accumulates parameter gradients into a [`ParamStore`].

use std::collections::{HashMap, HashSet};

use super::gemm::{gemm, View};
use super::nn::{ParamId, ParamStore};
use super::{sigmoid_scalar, softmax_in_place, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
        row0: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Lerp {
        h: usize,
        a: usize,
        b: usize,
    },
    MulScalar {
        a: usize,
        s: usize,
    },
    MulConst {
        a: usize,
        c: Vec<Real>,
    },
    Affine {
        a: usize,
        scale: Real,
    },
    Relu(usize),
    Sigmoid(usize),
    Exp(usize),
    Abs(usize),
    Sqrt(usize),
    Square(usize),
    Recip(usize),
    Gather {
        a: usize,
        idx: Vec<usize>,
    },
    WeightedGather {
        a: usize,
        idx: Vec<usize>,
        w: Vec<Real>,
        k: usize,
    },
    Concat(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    Reshape(usize),
    Transpose(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Max {
        a: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    SumAll(usize),
    ExpandCols {
        a: usize,
    },
    QuatMul(usize, usize),
    QuatToRot(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: HashSet<ParamId>,
}

/// Gradients of a scalar root with respect to every grad-tracked leaf.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(ctx: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(ctx, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(ctx: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::invalid(format!(
            "{ctx}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (see [`Graph::gradients`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Marks parameters as constants for every later [`Graph::param`] call:
    /// they take part in the forward pass but receive no gradient.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let tracked = !self.frozen.contains(&id);
        let v = self.push(store.value(id).clone(), Op::Param, tracked);
        self.params.insert(id, v);
        v
    }

    // ---------------------------------------------------------------- ops

    /// `x (R x I) * w (I x O) + b`, with `x` allowed any rank (last dim = I).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (i_w, _) = matrix_dims("linear weight", self.val(w.0))?;
        let i = self.val(x.0).cols();
        if i != i_w {
            return Err(Error::shape("linear input width", &[i_w], &[i]));
        }
        self.linear_rows(x, w, 0, b)
    }

    /// Like [`Graph::linear`] but multiplies by the weight rows
    /// `row0..row0 + I` only, i.e. the block of a wider layer that acts on
    /// one slice of a concatenated input.
    pub fn linear_rows(&mut self, x: Var, w: Var, row0: usize, b: Option<Var>) -> Result<Var> {
        let xv = self.val(x.0);
        let (i_w, o) = matrix_dims("linear weight", self.val(w.0))?;
        let i = xv.cols();
        if row0 + i > i_w {
            return Err(Error::shape("linear input width", &[i_w - row0.min(i_w)], &[i]));
        }
        let r = xv.rows();
        let mut out = vec![0.0; r * o];
        if let Some(b) = b {
            let bv = self.val(b.0);
            if bv.numel() != o {
                return Err(Error::shape("linear bias", &[o], bv.shape()));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            r,
            i,
            o,
            View::rm(xv.data(), i),
            View::rm(&self.val(w.0).data()[row0 * o..], o),
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out,
        );
        let mut shape = xv.shape().to_vec();
        if shape.is_empty() {
            shape.push(o);
        } else {
            *shape.last_mut().unwrap() = o;
        }
        let ng = self.ng(x.0) || self.ng(w.0) || b.is_some_and(|b| self.ng(b.0));
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                row0,
            },
            ng,
        ))
    }

    /// Plain matrix product of two matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        matrix_dims("matmul lhs", self.val(a.0))?;
        self.linear(a, b, None)
    }

    fn binary(&mut self, a: Var, b: Var, ctx: &'static str, f: impl Fn(Real, Real) -> Real, op: Op) -> Result<Var> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        same_shape(ctx, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    /// Elementwise `h·a + (1 − h)·b`, returning `a` exactly where `a == b`.
    pub fn lerp(&mut self, h: Var, a: Var, b: Var) -> Result<Var> {
        let (hv, av, bv) = (self.val(h.0), self.val(a.0), self.val(b.0));
        same_shape("lerp", av, bv)?;
        same_shape("lerp weight", av, hv)?;
        let data = hv
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&w, (&x, &y))| if x == y { x } else { w * x + (1.0 - w) * y })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(h.0) || self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::Lerp { h: h.0, a: a.0, b: b.0 }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.val(s.0);
        if sv.numel() != 1 {
            return Err(Error::shape("mul_scalar", &[1], sv.shape()));
        }
        let k = sv.item();
        let value = self.val(a.0).map(|x| x * k);
        let ng = self.ng(a.0) || self.ng(s.0);
        Ok(self.push(value, Op::MulScalar { a: a.0, s: s.0 }, ng))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.val(a.0);
        same_shape("mul_const", av, c)?;
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a.0);
        Ok(self.push(
            value,
            Op::MulConst {
                a: a.0,
                c: c.data().to_vec(),
            },
            ng,
        ))
    }

    /// `scale * a + offset`.
    pub fn affine(&mut self, a: Var, scale: Real, offset: Real) -> Var {
        let value = self.val(a.0).map(|x| scale * x + offset);
        let ng = self.ng(a.0);
        self.push(value, Op::Affine { a: a.0, scale }, ng)
    }

    pub fn scale(&mut self, a: Var, scale: Real) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let value = self.val(a.0).map(f);
        let ng = self.ng(a.0);
        self.push(value, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid_scalar, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Real::exp, Op::Exp(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Real::abs, Op::Abs(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0).sqrt(), Op::Sqrt(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / x, Op::Recip(a.0))
    }

    /// Selects rows of `a` (viewed as rows x cols) by index.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.val(a.0);
        let (r, c) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::invalid(format!("gather index {i} out of range for {r} rows")));
            }
            data.extend_from_slice(av.row(i));
        }
        let value = Tensor::new(&[idx.len(), c], data)?;
        let ng = self.ng(a.0);
        Ok(self.push(
            value,
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Output row `r` is `sum_j w[r*k + j] * a[idx[r*k + j]]` with constant weights.
    pub fn weighted_gather(&mut self, a: Var, idx: &[usize], w: &[Real], k: usize) -> Result<Var> {
        if k == 0 || idx.len() != w.len() || !idx.len().is_multiple_of(k) {
            return Err(Error::invalid("weighted_gather: index/weight layout mismatch"));
        }
        let av = self.val(a.0);
        let (r, c) = (av.rows(), av.cols());
        let out_rows = idx.len() / k;
        let mut data = vec![0.0; out_rows * c];
        for (o, out) in data.chunks_mut(c.max(1)).enumerate().take(out_rows) {
            for j in 0..k {
                let src = idx[o * k + j];
                if src >= r {
                    return Err(Error::invalid(format!("weighted_gather index {src} out of range")));
                }
                let wj = w[o * k + j];
                for (d, s) in out.iter_mut().zip(av.row(src)) {
                    *d += wj * s;
                }
            }
        }
        let value = Tensor::new(&[out_rows, c], data)?;
        let ng = self.ng(a.0);
        Ok(self.push(
            value,
            Op::WeightedGather {
                a: a.0,
                idx: idx.to_vec(),
                w: w.to_vec(),
                k,
            },
            ng,
        ))
    }

    /// Concatenates along the last dimension; all parts must have equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.val(p.0).rows())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = self.val(p.0);
            if v.rows() != rows {
                return Err(Error::shape("concat rows", &[rows], &[v.rows()]));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        let ng = parts.iter().any(|p| self.ng(p.0));
        Ok(self.push(value, Op::Concat(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.val(a.0);
        let (r, c) = (av.rows(), av.cols());
        if start >= end || end > c {
            return Err(Error::invalid(format!("slice_cols {start}..{end} of width {c}")));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&av.row(i)[start..end]);
        }
        let value = Tensor::new(&[r, end - start], data)?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::SliceCols { a: a.0, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.val(a.0).clone().reshape(shape)?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.val(a.0))?;
        let d = self.val(a.0).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = d[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], data)?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::Transpose(a.0), ng))
    }

    fn softmax_split(&mut self, a: Var, outer: usize, len: usize, inner: usize) -> Var {
        let mut value = self.val(a.0).clone();
        softmax_in_place(value.data_mut(), outer, len, inner);
        let ng = self.ng(a.0);
        self.push(
            value,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            ng,
        )
    }

    /// Softmax along `axis`; output has the input's shape.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.val(a.0).axis_split(axis)?;
        Ok(self.softmax_split(a, outer, len, inner))
    }

    /// Softmax over consecutive groups of `k` rows of a matrix, per column.
    pub fn group_softmax(&mut self, a: Var, k: usize) -> Result<Var> {
        let (outer, inner) = self.group_dims(a, k)?;
        Ok(self.softmax_split(a, outer, k, inner))
    }

    fn group_dims(&self, a: Var, k: usize) -> Result<(usize, usize)> {
        let av = self.val(a.0);
        let r = av.rows();
        if k == 0 || !r.is_multiple_of(k) {
            return Err(Error::invalid(format!("{r} rows not divisible into groups of {k}")));
        }
        Ok((r / k, av.cols()))
    }

    fn sum_split(&mut self, a: Var, outer: usize, len: usize, inner: usize, shape: &[usize]) -> Result<Var> {
        let d = self.val(a.0).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let ng = self.ng(a.0);
        Ok(self.push(
            value,
            Op::Sum {
                a: a.0,
                outer,
                len,
                inner,
            },
            ng,
        ))
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.val(a.0).axis_split(axis)?;
        let mut shape = self.val(a.0).shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        self.sum_split(a, outer, len, inner, &shape)
    }

    /// Sums consecutive groups of `k` rows: `(n*k) x c -> n x c`.
    pub fn group_sum(&mut self, a: Var, k: usize) -> Result<Var> {
        let (outer, inner) = self.group_dims(a, k)?;
        self.sum_split(a, outer, k, inner, &[outer, inner])
    }

    /// Per-row sum of a matrix, kept as a column: `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let av = self.val(a.0);
        let (r, c) = (av.rows(), av.cols());
        self.sum_split(a, r, c, 1, &[r, 1])
    }

    /// Max over consecutive groups of `k` rows, per column: `(n*k) x c -> n x c`.
    pub fn group_max(&mut self, a: Var, k: usize) -> Result<Var> {
        let (outer, inner) = self.group_dims(a, k)?;
        let d = self.val(a.0).data();
        let mut out = vec![Real::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for kk in 0..k {
                let base = (o * k + kk) * inner;
                for i in 0..inner {
                    let v = d[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = kk;
                    }
                }
            }
        }
        let value = Tensor::new(&[outer, inner], out)?;
        let ng = self.ng(a.0);
        Ok(self.push(
            value,
            Op::Max {
                a: a.0,
                len: k,
                inner,
                argmax,
            },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: Real = self.val(a.0).data().iter().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), ng)
    }

    /// Repeats a column vector `r x 1` into `r x cols`.
    pub fn expand_cols(&mut self, a: Var, cols: usize) -> Result<Var> {
        let av = self.val(a.0);
        if av.cols() != 1 {
            return Err(Error::shape("expand_cols", &[av.rows(), 1], av.shape()));
        }
        let r = av.rows();
        let mut data = Vec::with_capacity(r * cols);
        for &v in av.data() {
            data.extend(std::iter::repeat_n(v, cols));
        }
        let value = Tensor::new(&[r, cols], data)?;
        let ng = self.ng(a.0);
        Ok(self.push(value, Op::ExpandCols { a: a.0 }, ng))
    }

    /// Row-wise Hamilton product of two `n x 4` (w, x, y, z) tensors.
    pub fn quat_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a.0), self.val(b.0));
        same_shape("quat_mul", av, bv)?;
        if av.cols() != 4 {
            return Err(Error::shape("quat_mul", &[4], &[av.cols()]));
        }
        let mut data = Vec::with_capacity(av.numel());
        for r in 0..av.rows() {
            data.extend_from_slice(&hamilton(av.row(r), bv.row(r)));
        }
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(value, Op::QuatMul(a.0, b.0), ng))
    }

    /// Rotation matrix (3 x 3) of a unit quaternion (w, x, y, z).
    pub fn quat_to_rot(&mut self, q: Var) -> Result<Var> {
        let qv = self.val(q.0);
        if qv.numel() != 4 {
            return Err(Error::shape("quat_to_rot", &[4], qv.shape()));
        }
        let d = qv.data();
        let value = Tensor::new(&[3, 3], rot_from_quat(d[0], d[1], d[2], d[3]).to_vec())?;
        let ng = self.ng(q.0);
        Ok(self.push(value, Op::QuatToRot(q.0), ng))
    }

    // ---------------------------------------------------------- backward

    /// Gradients of the scalar `root` with respect to every tracked leaf and parameter.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        let rv = self.val(root.0);
        if rv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.ng(root.0) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads)?;
        }
        // Drop anything that is not a leaf.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf | Op::Param) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d root / d param` into the store's gradient buffers.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (id, var) in &self.params {
            if let Some(g) = grads.wrt(*var) {
                store.grad_mut(*id).add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let go = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Linear { x, w, b, row0 } => {
                let xv = self.val(*x);
                let wv = self.val(*w);
                let (r, inw, o) = (xv.rows(), xv.cols(), wv.cols());
                let block = row0 * o..(row0 + inw) * o;
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(
                        r,
                        o,
                        inw,
                        View::rm(go, o),
                        View::rm_t(&wv.data()[block.clone()], o),
                        1.0,
                        dx.data_mut(),
                    );
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(
                        inw,
                        r,
                        o,
                        View::rm_t(xv.data(), inw),
                        View::rm(go, o),
                        1.0,
                        &mut dw.data_mut()[block],
                    );
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        let db = db.data_mut();
                        for row in go.chunks(o) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for k in [*a, *b] {
                    if let Some(d) = self.slot(grads, k) {
                        axpy(d.data_mut(), 1.0, go);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d.data_mut(), 1.0, go);
                }
                if let Some(d) = self.slot(grads, *b) {
                    axpy(d.data_mut(), -1.0, go);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), v) in d.data_mut().iter_mut().zip(go).zip(bv) {
                        *d += g * v;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, g), v) in d.data_mut().iter_mut().zip(go).zip(av) {
                        *d += g * v;
                    }
                }
            }
            Op::Lerp { h, a, b } => {
                let (hv, av, bv) = (self.val(*h).data(), self.val(*a).data(), self.val(*b).data());
                if let Some(d) = self.slot(grads, *h) {
                    for (((d, g), x), y) in d.data_mut().iter_mut().zip(go).zip(av).zip(bv) {
                        *d += g * (x - y);
                    }
                }
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), w) in d.data_mut().iter_mut().zip(go).zip(hv) {
                        *d += g * w;
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for ((d, g), w) in d.data_mut().iter_mut().zip(go).zip(hv) {
                        *d += g * (1.0 - w);
                    }
                }
            }
            Op::MulScalar { a, s } => {
                let k = self.val(*s).item();
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d.data_mut(), k, go);
                }
                if let Some(d) = self.slot(grads, *s) {
                    let dot: Real = go.iter().zip(self.val(*a).data()).map(|(g, x)| g * x).sum();
                    d.data_mut()[0] += dot;
                }
            }
            Op::MulConst { a, c } => {
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, g), c) in d.data_mut().iter_mut().zip(go).zip(c) {
                        *d += g * c;
                    }
                }
            }
            Op::Affine { a, scale } => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d.data_mut(), *scale, go);
                }
            }
            Op::Relu(a) => self.elementwise(grads, *a, go, |_, y, g| if y > 0.0 { g } else { 0.0 }, y),
            Op::Sigmoid(a) => self.elementwise(grads, *a, go, |_, y, g| g * y * (1.0 - y), y),
            Op::Exp(a) => self.elementwise(grads, *a, go, |_, y, g| g * y, y),
            Op::Abs(a) => self.elementwise(
                grads,
                *a,
                go,
                |x, _, g| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                },
                y,
            ),
            Op::Sqrt(a) => self.elementwise(grads, *a, go, |_, y, g| if y > 0.0 { g / (2.0 * y) } else { 0.0 }, y),
            Op::Square(a) => self.elementwise(grads, *a, go, |x, _, g| 2.0 * x * g, y),
            Op::Recip(a) => self.elementwise(grads, *a, go, |_, y, g| -g * y * y, y),
            Op::Gather { a, idx } => {
                if let Some(d) = self.slot(grads, *a) {
                    let c = d.cols();
                    let dd = d.data_mut();
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut dd[src * c..(src + 1) * c], 1.0, &go[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::WeightedGather { a, idx, w, k } => {
                if let Some(d) = self.slot(grads, *a) {
                    let c = d.cols();
                    let dd = d.data_mut();
                    for (j, (&src, &wj)) in idx.iter().zip(w).enumerate() {
                        let o = j / k;
                        axpy(&mut dd[src * c..(src + 1) * c], wj, &go[o * c..(o + 1) * c]);
                    }
                }
            }
            Op::Concat(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if let Some(d) = self.slot(grads, p) {
                        let dd = d.data_mut();
                        for r in 0..rows {
                            axpy(
                                &mut dd[r * w..(r + 1) * w],
                                1.0,
                                &go[r * total + off..r * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { a, start } => {
                let w = y.cols();
                if let Some(d) = self.slot(grads, *a) {
                    let c = d.cols();
                    let dd = d.data_mut();
                    for r in 0..y.rows() {
                        axpy(&mut dd[r * c + start..r * c + start + w], 1.0, &go[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.slot(grads, *a) {
                    axpy(d.data_mut(), 1.0, go);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                if let Some(d) = self.slot(grads, *a) {
                    let dd = d.data_mut();
                    for i in 0..r {
                        for j in 0..c {
                            dd[j * r + i] += go[i * c + j];
                        }
                    }
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                if let Some(d) = self.slot(grads, *a) {
                    let dd = d.data_mut();
                    let yd = y.data();
                    for o in 0..*outer {
                        let base = o * len * inner;
                        for i in 0..*inner {
                            let mut dot = 0.0;
                            for k in 0..*len {
                                let at = base + k * inner + i;
                                dot += yd[at] * go[at];
                            }
                            for k in 0..*len {
                                let at = base + k * inner + i;
                                dd[at] += yd[at] * (go[at] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum { a, outer, len, inner } => {
                if let Some(d) = self.slot(grads, *a) {
                    let dd = d.data_mut();
                    for o in 0..*outer {
                        let src = &go[o * inner..(o + 1) * inner];
                        for k in 0..*len {
                            let at = (o * len + k) * inner;
                            axpy(&mut dd[at..at + inner], 1.0, src);
                        }
                    }
                }
            }
            Op::Max { a, len, inner, argmax } => {
                if let Some(d) = self.slot(grads, *a) {
                    let dd = d.data_mut();
                    for (j, &k) in argmax.iter().enumerate() {
                        let (o, i) = (j / inner, j % inner);
                        dd[(o * len + k) * inner + i] += go[j];
                    }
                }
            }
            Op::SumAll(a) => {
                let g = go[0];
                if let Some(d) = self.slot(grads, *a) {
                    for v in d.data_mut() {
                        *v += g;
                    }
                }
            }
            Op::ExpandCols { a } => {
                let c = y.cols();
                if let Some(d) = self.slot(grads, *a) {
                    for (dv, row) in d.data_mut().iter_mut().zip(go.chunks(c)) {
                        *dv += row.iter().sum::<Real>();
                    }
                }
            }
            Op::QuatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let rows = av.rows();
                if let Some(d) = self.slot(grads, *a) {
                    let dd = d.data_mut();
                    for r in 0..rows {
                        let m = left_factor(bv.row(r));
                        accumulate_transposed(&mut dd[r * 4..r * 4 + 4], &m, &go[r * 4..r * 4 + 4]);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    let dd = d.data_mut();
                    for r in 0..rows {
                        let m = right_factor(av.row(r));
                        accumulate_transposed(&mut dd[r * 4..r * 4 + 4], &m, &go[r * 4..r * 4 + 4]);
                    }
                }
            }
            Op::QuatToRot(q) => {
                let qd = self.val(*q).data();
                let (w, x, yq, z) = (qd[0], qd[1], qd[2], qd[3]);
                if let Some(d) = self.slot(grads, *q) {
                    let jac = rot_jacobian(w, x, yq, z);
                    let dd = d.data_mut();
                    for (e, g) in go.iter().enumerate() {
                        for c in 0..4 {
                            dd[c] += g * jac[e][c];
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Tensor>],
        a: usize,
        go: &[Real],
        f: impl Fn(Real, Real, Real) -> Real,
        y: &Tensor,
    ) {
        let x = self.val(a).data();
        if let Some(d) = self.slot(grads, a) {
            for (((d, &xv), &yv), &g) in d.data_mut().iter_mut().zip(x).zip(y.data()).zip(go) {
                *d += f(xv, yv, g);
            }
        }
    }

    /// Gradient accumulator for node `i`, created on first use; `None` if untracked.
    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], i: usize) -> Option<&'g mut Tensor> {
        if !self.nodes[i].needs_grad {
            return None;
        }
        Some(grads[i].get_or_insert_with(|| Tensor::zeros(self.nodes[i].value.shape())))
    }
}

fn axpy(dst: &mut [Real], a: Real, src: &[Real]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn hamilton(a: &[Real], b: &[Real]) -> [Real; 4] {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Matrix `L(b)` with `a * b = L(b) a`.
fn left_factor(b: &[Real]) -> [[Real; 4]; 4] {
    let (bw, bx, by, bz) = (b[0], b[1], b[2], b[3]);
    [
        [bw, -bx, -by, -bz],
        [bx, bw, bz, -by],
        [by, -bz, bw, bx],
        [bz, by, -bx, bw],
    ]
}

/// Matrix `R(a)` with `a * b = R(a) b`.
fn right_factor(a: &[Real]) -> [[Real; 4]; 4] {
    let (aw, ax, ay, az) = (a[0], a[1], a[2], a[3]);
    [
        [aw, -ax, -ay, -az],
        [ax, aw, -az, ay],
        [ay, az, aw, -ax],
        [az, -ay, ax, aw],
    ]
}

fn accumulate_transposed(dst: &mut [Real], m: &[[Real; 4]; 4], g: &[Real]) {
    for (r, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            dst[c] += v * g[r];
        }
    }
}

pub(crate) fn rot_from_quat(w: Real, x: Real, y: Real, z: Real) -> [Real; 9] {
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

/// d R[e] / d (w, x, y, z) for each of the nine entries.
fn rot_jacobian(w: Real, x: Real, y: Real, z: Real) -> [[Real; 4]; 9] {
    [
        [0.0, 0.0, -4.0 * y, -4.0 * z],
        [-2.0 * z, 2.0 * y, 2.0 * x, -2.0 * w],
        [2.0 * y, 2.0 * z, 2.0 * w, 2.0 * x],
        [2.0 * z, 2.0 * y, 2.0 * x, 2.0 * w],
        [0.0, -4.0 * x, 0.0, -4.0 * z],
        [-2.0 * x, -2.0 * w, 2.0 * z, 2.0 * y],
        [-2.0 * y, 2.0 * z, -2.0 * w, 2.0 * x],
        [2.0 * x, 2.0 * w, 2.0 * z, 2.0 * y],
        [0.0, -4.0 * x, -4.0 * y, 0.0],
    ]
}

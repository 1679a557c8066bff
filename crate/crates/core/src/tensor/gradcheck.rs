//! Central-difference verification of recorded gradients.

use super::graph::{Graph, Var};
use super::nn::{ParamId, ParamStore};
use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest per-parameter relative error.
    pub max_rel_err: Real,
    /// Name of the parameter that produced `max_rel_err`.
    pub worst: Option<String>,
    /// [`relative_error`] over all checked entries of all parameters at once.
    pub pooled_rel_err: Real,
    /// Number of scalar entries perturbed.
    pub entries_checked: usize,
    /// Entries left out because the objective is not differentiable within
    /// the step (one-sided slopes disagree even after shrinking it).
    pub kinks_skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: Real, max_skip_fraction: Real) -> bool {
        self.max_rel_err < tol && self.few_kinks(max_skip_fraction)
    }

    /// Like [`GradCheckReport::passes`] but judged on `pooled_rel_err`.
    pub fn passes_pooled(&self, tol: Real, max_skip_fraction: Real) -> bool {
        self.pooled_rel_err < tol && self.few_kinks(max_skip_fraction)
    }

    fn few_kinks(&self, max_skip_fraction: Real) -> bool {
        (self.kinks_skipped as Real) <= max_skip_fraction * self.entries_checked as Real
    }
}

/// Relative error between two gradients of one parameter:
/// `max|a - n| / max(1e-12, max|a| + max|n|)`.
pub fn relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    let mut diff: Real = 0.0;
    let mut amax: Real = 0.0;
    let mut nmax: Real = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        diff = diff.max((a - n).abs());
        amax = amax.max(a.abs());
        nmax = nmax.max(n.abs());
    }
    diff / (amax + nmax).max(1e-12)
}

fn eval_scalar<F>(f: &F, store: &ParamStore) -> Result<Real>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = f(&mut g, store)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::invalid("gradient check objective must be scalar"));
    }
    let v = v.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("gradient check objective".into()));
    }
    Ok(v)
}

/// Disagreement between the step-`h` and step-`2h` central quotients above
/// which an entry is treated as sitting on a kink.
fn kink_threshold(central: Real, f0: Real, h: Real) -> Real {
    1e-7 * (1.0 + central.abs()) + 10.0 * Real::EPSILON * f0.abs() / h
}

/// Five-point derivative estimate and the gap between the two central
/// quotients it is built from.
fn stencil<F>(f: &F, store: &mut ParamStore, id: ParamId, e: usize, h: Real) -> Result<(Real, Real)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let orig = store.value(id).data()[e];
    let mut at = |offset: Real| {
        store.value_mut(id).data_mut()[e] = orig + offset;
        eval_scalar(f, store)
    };
    let vals: Vec<Result<Real>> = vec![at(2.0 * h), at(h), at(-h), at(-2.0 * h)];
    store.value_mut(id).data_mut()[e] = orig;
    let vals = vals.into_iter().collect::<Result<Vec<Real>>>()?;
    let (p2, p1, m1, m2) = (vals[0], vals[1], vals[2], vals[3]);
    let d1 = (p1 - m1) / (2.0 * h);
    let d2 = (p2 - m2) / (4.0 * h);
    Ok(((4.0 * d1 - d2) / 3.0, (d1 - d2).abs()))
}

/// Perturbs every parameter entry by `±eps` and `±2 eps` and compares the
/// five-point derivative estimate against the recorded gradient. See [`finite_diff_check_sampled`].
pub fn finite_diff_check<F>(f: F, store: &mut ParamStore, eps: Real) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_sampled(f, store, eps, None)
}

/// Like [`finite_diff_check`], but perturbs at most `max_entries` evenly
/// strided entries of each parameter.
pub fn finite_diff_check_sampled<F>(
    f: F,
    store: &mut ParamStore,
    eps: Real,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    finite_diff_check_where(f, store, eps, max_entries, |_| true)
}

/// Like [`finite_diff_check_sampled`], restricted to parameters whose name
/// satisfies `select`.
pub fn finite_diff_check_where<F>(
    f: F,
    store: &mut ParamStore,
    eps: Real,
    max_entries: Option<usize>,
    select: impl Fn(&str) -> bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let saved: Vec<Tensor> = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grads();
    let analytic = {
        let mut g = Graph::new();
        let root = f(&mut g, store)?;
        if !g.value(root).all_finite() {
            return Err(Error::NonFinite("gradient check objective".into()));
        }
        g.backward(root, store)?;
        store.ids().map(|id| store.grad(id).clone()).collect::<Vec<_>>()
    };
    for (id, g) in store.ids().collect::<Vec<_>>().into_iter().zip(saved) {
        *store.grad_mut(id) = g;
    }

    let f0 = eval_scalar(&f, store)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        pooled_rel_err: 0.0,
        entries_checked: 0,
        kinks_skipped: 0,
    };
    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let ids: Vec<ParamId> = store.ids().collect();
    for (id, grad) in ids.into_iter().zip(&analytic) {
        if !select(store.name(id)) {
            continue;
        }
        let n = store.value(id).numel();
        let entries: Vec<usize> = match max_entries {
            Some(m) if m < n => {
                let stride = n as Real / m as Real;
                (0..m).map(|i| (i as Real * stride) as usize).collect()
            }
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(entries.len());
        let mut num = Vec::with_capacity(entries.len());
        for &e in &entries {
            let (mut c, gap) = stencil(&f, store, id, e, eps)?;
            if gap > kink_threshold(c, f0, eps) {
                let (c2, gap2) = stencil(&f, store, id, e, eps * 0.01)?;
                if gap2 > kink_threshold(c2, f0, eps * 0.01) {
                    report.kinks_skipped += 1;
                    continue;
                }
                c = c2;
            }
            num.push(c);
            a.push(grad.data()[e]);
        }
        report.entries_checked += entries.len();
        let err = relative_error(&a, &num);
        if report.worst.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst = Some(store.name(id).to_string());
        }
        all_a.extend(a);
        all_n.extend(num);
    }
    report.pooled_rel_err = relative_error(&all_a, &all_n);
    Ok(report)
}

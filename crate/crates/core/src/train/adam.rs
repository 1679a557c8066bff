use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Real};

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub name: String,
    pub m: Vec<Real>,
    pub v: Vec<Real>,
    /// Updates applied so far; drives the bias correction.
    pub steps: u64,
}

/// Adam with per-parameter bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub betas: [Real; 2],
    pub eps: Real,
    pub state: Vec<Moments>,
}

impl Adam {
    pub fn new(store: &ParamStore, betas: [Real; 2], eps: Real) -> Self {
        let state = store
            .ids()
            .map(|id| {
                let n = store.value(id).numel();
                Moments {
                    name: store.name(id).to_string(),
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    steps: 0,
                }
            })
            .collect();
        Self { betas, eps, state }
    }

    /// Checks that the state lines up with `store` entry by entry.
    pub fn check_matches(&self, store: &ParamStore) -> Result<()> {
        if self.state.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer state has {} entries for {} parameters",
                self.state.len(),
                store.len()
            )));
        }
        for (id, s) in store.ids().zip(&self.state) {
            if s.name != store.name(id) || s.m.len() != store.value(id).numel() || s.v.len() != s.m.len() {
                return Err(Error::Config(format!(
                    "optimizer state for '{}' does not match parameter '{}'",
                    s.name,
                    store.name(id)
                )));
            }
        }
        Ok(())
    }

    /// One update of the parameters in `ids` from their stored gradients.
    /// Nothing is modified if any of those gradients is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: Real) -> Result<()> {
        for &id in ids {
            if !store.grad(id).all_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", store.name(id))));
            }
        }
        let [b1, b2] = self.betas;
        for &id in ids {
            let s = &mut self.state[id.index()];
            s.steps += 1;
            let c1 = 1.0 - b1.powi(s.steps as i32);
            let c2 = 1.0 - b2.powi(s.steps as i32);
            let g = store.grad(id).data().to_vec();
            let p = store.value_mut(id).data_mut();
            for i in 0..g.len() {
                s.m[i] = b1 * s.m[i] + (1.0 - b1) * g[i];
                s.v[i] = b2 * s.v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = s.m[i] / c1;
                let v_hat = s.v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Scales the gradients of `ids` so their joint L2 norm is at most
/// `max_norm`; returns the norm before scaling.
pub fn clip_grad_norm(store: &mut ParamStore, ids: &[ParamId], max_norm: Real) -> Real {
    let sq: Real = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|g| g * g).sum::<Real>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for &id in ids {
            for g in store.grad_mut(id).data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

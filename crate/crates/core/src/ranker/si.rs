use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_XI: f64 = 0.1;

/// Synaptic Intelligence bookkeeping: the running path integral `ω` of the
/// current task, the consolidated importance `Ω`, and the reference
/// parameters the penalty pulls towards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiTracker {
    pub xi: f64,
    omega: BTreeMap<String, Tensor>,
    importance: BTreeMap<String, Tensor>,
    reference: BTreeMap<String, Tensor>,
    consolidations: usize,
}

impl SiTracker {
    /// Tracker with zero `ω`, zero `Ω`, and `params` as the reference point.
    pub fn new(params: &ParamStore, xi: f64) -> Self {
        let zeros = |p: &ParamStore| {
            p.iter()
                .map(|(k, v)| (k.to_string(), Tensor::zeros(v.shape())))
                .collect::<BTreeMap<_, _>>()
        };
        Self {
            xi,
            omega: zeros(params),
            importance: zeros(params),
            reference: params.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
            consolidations: 0,
        }
    }

    pub fn omega(&self, name: &str) -> Option<&Tensor> {
        self.omega.get(name)
    }

    pub fn importance(&self, name: &str) -> Option<&Tensor> {
        self.importance.get(name)
    }

    pub fn reference(&self, name: &str) -> Option<&Tensor> {
        self.reference.get(name)
    }

    pub fn consolidations(&self) -> usize {
        self.consolidations
    }

    pub fn is_zero(&self) -> bool {
        self.importance
            .values()
            .all(|t| t.values().iter().all(|v| *v == 0.0))
    }

    /// `ω -= (after - before) ⊙ g_unreg`. Names missing from `grad_unreg`
    /// are treated as having zero gradient.
    pub fn update(
        &mut self,
        before: &ParamStore,
        after: &ParamStore,
        grad_unreg: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, w) in self.omega.iter_mut() {
            let Some(g) = grad_unreg.get(name) else {
                continue;
            };
            let (b, a) = (before.get(name)?, after.get(name)?);
            if g.shape() != w.shape() || a.shape() != w.shape() || b.shape() != w.shape() {
                return Err(Error::shape("si_update", w.shape(), g.shape()));
            }
            for (((o, gi), ai), bi) in w
                .values_mut()
                .iter_mut()
                .zip(g.values())
                .zip(a.values())
                .zip(b.values())
            {
                *o -= (ai - bi) * gi;
            }
        }
        Ok(())
    }

    /// `Ω += ω / ((end - start)^2 + ξ)`, then `ω ← 0` and reference ← `end`.
    pub fn consolidate(&mut self, start: &ParamStore, end: &ParamStore) -> Result<()> {
        for (name, w) in self.omega.iter_mut() {
            let (s, e) = (start.get(name)?, end.get(name)?);
            let imp = self
                .importance
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            for (((om, wi), si), ei) in imp
                .values_mut()
                .iter_mut()
                .zip(w.values())
                .zip(s.values())
                .zip(e.values())
            {
                let d = ei - si;
                *om += wi / (d * d + self.xi);
            }
            w.values_mut().fill(0.0);
            self.reference.insert(name.clone(), e.clone());
        }
        self.consolidations += 1;
        Ok(())
    }

    /// `Σ Ω (θ - θ_ref)^2` evaluated directly.
    pub fn penalty_value(&self, params: &ParamStore) -> Result<f64> {
        let mut total = 0.0;
        for (name, imp) in &self.importance {
            let (p, r) = (params.get(name)?, &self.reference[name]);
            for ((w, a), b) in imp.values().iter().zip(p.values()).zip(r.values()) {
                total += w * (a - b) * (a - b);
            }
        }
        Ok(total)
    }

    /// The penalty recorded on `tape` over every parameter with nonzero
    /// importance; `None` before the first consolidation.
    pub fn penalty(&self, tape: &mut Tape, store: &ParamStore) -> Result<Option<Var>> {
        let mut acc: Option<Var> = None;
        for (name, imp) in &self.importance {
            if imp.values().iter().all(|v| *v == 0.0) {
                continue;
            }
            let p = tape.param(store, name)?;
            let term = tape.weighted_sq_dist(p, self.reference[name].clone(), imp.clone())?;
            acc = Some(match acc {
                Some(a) => tape.add(a, term)?,
                None => term,
            });
        }
        Ok(acc)
    }
}

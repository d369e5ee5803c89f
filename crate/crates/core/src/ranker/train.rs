use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::{mse_loss, ranking_loss, triplet_loss};
use super::si::SiTracker;
use crate::autodiff::{adam_step, AdamState, Grads, ParamStore, RngStream, Tape, Tensor, Var};
use crate::confenc::{encode_configs, EncoderConfig};
use crate::error::{Error, Result};
use crate::space::Config;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankLoss {
    /// Pairwise logistic loss weighted by swap ΔNDCG.
    Ndcg,
    /// Squared error between score and AP.
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSettings {
    pub rank: RankLoss,
    pub lambda_sim: f64,
    pub alpha: f64,
    pub lambda_reg: f64,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            rank: RankLoss::Ndcg,
            lambda_sim: 0.03,
            alpha: 0.5,
            lambda_reg: 10_000.0,
        }
    }
}

/// Items sharing one dataset meta-feature `phi` (`[1 x D]`).
#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub phi: Var,
    pub configs: Vec<Config>,
    pub aps: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TripletVars {
    pub anchor: Var,
    pub same: Var,
    pub other: Var,
}

/// Loss nodes of one step. `unreg` is `rank + λ_sim * sim`.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub scores: Option<Var>,
    pub rank: Var,
    pub sim: Option<Var>,
    pub reg: Option<Var>,
    pub unreg: Var,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub rank: f64,
    pub sim: f64,
    pub reg: f64,
}

impl LossGraph {
    pub fn stats(&self, tape: &Tape) -> StepStats {
        StepStats {
            rank: tape.scalar(self.rank),
            sim: self.sim.map_or(0.0, |v| tape.scalar(v)),
            reg: self.reg.map_or(0.0, |v| tape.scalar(v)),
        }
    }

    /// `unreg + λ_reg * reg` as a node.
    pub fn total(&self, tape: &mut Tape, settings: &LossSettings) -> Result<Var> {
        match self.reg {
            Some(r) if settings.lambda_reg != 0.0 => {
                let w = tape.scale(r, settings.lambda_reg)?;
                tape.add(self.unreg, w)
            }
            _ => Ok(self.unreg),
        }
    }
}

/// Scores `phi^T H(c)` for every group and stacks them into one column.
pub fn group_scores(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderConfig,
    groups: &[ScoredGroup],
    mut dropout: Option<&mut RngStream>,
) -> Result<Var> {
    let mut cols = Vec::with_capacity(groups.len());
    for g in groups {
        let h = encode_configs(tape, store, enc, &g.configs, dropout.as_deref_mut())?;
        let pt = tape.transpose(g.phi)?;
        cols.push(tape.matmul(h, pt)?);
    }
    tape.concat_rows(&cols)
}

/// Records the full objective for one batch.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    store: &ParamStore,
    enc: &EncoderConfig,
    settings: &LossSettings,
    groups: &[ScoredGroup],
    triplet: Option<TripletVars>,
    si: Option<&SiTracker>,
    dropout: Option<&mut RngStream>,
) -> Result<LossGraph> {
    let (scores, rank) = if groups.is_empty() {
        (None, tape.constant(Tensor::scalar(0.0)))
    } else {
        let scores = group_scores(tape, store, enc, groups, dropout)?;
        let mut ids = Vec::new();
        let mut aps = Vec::new();
        for (k, g) in groups.iter().enumerate() {
            if g.configs.len() != g.aps.len() {
                return Err(Error::Dimension {
                    expected: g.configs.len(),
                    actual: g.aps.len(),
                });
            }
            ids.extend(std::iter::repeat(k).take(g.aps.len()));
            aps.extend_from_slice(&g.aps);
        }
        let rank = match settings.rank {
            RankLoss::Ndcg => ranking_loss(tape, scores, &ids, &aps)?,
            RankLoss::Mse => mse_loss(tape, scores, &aps)?,
        };
        (Some(scores), rank)
    };
    let sim = match triplet {
        Some(t) if settings.lambda_sim != 0.0 => {
            Some(triplet_loss(tape, t.anchor, t.same, t.other, settings.alpha)?)
        }
        _ => None,
    };
    let unreg = match sim {
        Some(s) => {
            let w = tape.scale(s, settings.lambda_sim)?;
            tape.add(rank, w)?
        }
        None => rank,
    };
    let reg = match si {
        Some(si) if settings.lambda_reg != 0.0 => si.penalty(tape, store)?,
        _ => None,
    };
    Ok(LossGraph {
        scores,
        rank,
        sim,
        reg,
        unreg,
    })
}

/// Backward passes for the unregularized objective and the SI penalty.
pub fn backward(tape: &Tape, graph: &LossGraph) -> Result<(Grads, Option<Grads>)> {
    let unreg = tape.backward(graph.unreg)?;
    let reg = graph.reg.map(|r| tape.backward(r)).transpose()?;
    Ok((unreg, reg))
}

pub fn grads_by_name(tape: &Tape, grads: &Grads) -> BTreeMap<String, Tensor> {
    tape.param_grads(grads).into_iter().collect()
}

/// Adds `map` into `acc` name by name.
pub fn merge_grads(acc: &mut BTreeMap<String, Tensor>, map: BTreeMap<String, Tensor>) {
    for (k, g) in map {
        match acc.get_mut(&k) {
            Some(existing) => existing.add_assign(&g),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

/// Writes `unreg + λ_reg * reg` into the gradient slots of `store` (skipping
/// names for which `frozen` holds), runs Adam, and feeds the step to SI with
/// the unregularized gradient.
#[allow(clippy::too_many_arguments)]
pub fn apply_update(
    store: &mut ParamStore,
    adam: &mut AdamState,
    lr: f64,
    settings: &LossSettings,
    unreg: &BTreeMap<String, Tensor>,
    reg: &BTreeMap<String, Tensor>,
    frozen: &dyn Fn(&str) -> bool,
    si: Option<&mut SiTracker>,
) -> Result<()> {
    store.zero_grads();
    for (name, g) in unreg {
        if !frozen(name) {
            store.accumulate_grad(name, g)?;
        }
    }
    for (name, g) in reg {
        if !frozen(name) {
            let mut scaled = g.clone();
            scaled.scale_assign(settings.lambda_reg);
            store.accumulate_grad(name, &scaled)?;
        }
    }
    match si {
        Some(si) => {
            let before = store.clone();
            adam_step(store, adam, lr);
            si.update(&before, store, unreg)
        }
        None => {
            adam_step(store, adam, lr);
            Ok(())
        }
    }
}

/// One optimizer step for a batch whose meta-features are all recorded on
/// the server tape by `build`.
#[allow(clippy::too_many_arguments)]
pub fn train_step<F>(
    store: &mut ParamStore,
    adam: &mut AdamState,
    lr: f64,
    enc: &EncoderConfig,
    settings: &LossSettings,
    mut si: Option<&mut SiTracker>,
    dropout: Option<&mut RngStream>,
    build: F,
) -> Result<StepStats>
where
    F: FnOnce(&mut Tape, &ParamStore) -> Result<(Vec<ScoredGroup>, Option<TripletVars>)>,
{
    let mut tape = Tape::new();
    let (groups, triplet) = build(&mut tape, store)?;
    let graph = build_loss(
        &mut tape,
        store,
        enc,
        settings,
        &groups,
        triplet,
        si.as_deref(),
        dropout,
    )?;
    let stats = graph.stats(&tape);
    let (gu, gr) = backward(&tape, &graph)?;
    let unreg = grads_by_name(&tape, &gu);
    let reg = gr.map(|g| grads_by_name(&tape, &g)).unwrap_or_default();
    apply_update(store, adam, lr, settings, &unreg, &reg, &|_| false, si.as_deref_mut())?;
    Ok(stats)
}

use serde::{Deserialize, Serialize};

use super::model::{loss_pretrain_taped, BoundParams, LossBreakdown, PreparedGraph};
use super::params::{GfmParams, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::{Optimizer, OptimizerState};
use crate::prompt_pool::{apply_prompts_taped, PromptSet};
use crate::rng::{self, STREAM_TOPO};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalTrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 2,
            optimizer: Optimizer::Sgd,
        }
    }
}

#[derive(Debug)]
pub struct LocalOutcome<S> {
    pub params: GfmParams<S>,
    pub prompts: Option<PromptSet<S>>,
    /// One entry per completed epoch, measured before that epoch's update.
    pub history: Vec<LossBreakdown>,
    /// Fraction of codebook slots used, per completed epoch.
    pub utilization: Vec<f64>,
    /// Set when a numeric failure stopped training; `params` and `prompts`
    /// are then the last finite state.
    pub aborted: Option<Error>,
}

/// Full-graph gradient passes over one client's data. The backbone and, if
/// given, the client's prompts are trained jointly on the same loss.
pub fn local_pretrain<S: Scalar>(
    params: &GfmParams<S>,
    prompts: Option<&PromptSet<S>>,
    graph: &PreparedGraph<S>,
    model: &ModelConfig,
    train: &LocalTrainConfig,
    seed: u64,
) -> Result<LocalOutcome<S>> {
    if train.epochs == 0 {
        return Err(Error::contract("local training needs at least one epoch"));
    }
    if !(train.lr >= 0.0) {
        return Err(Error::contract(format!("learning rate must be non-negative, got {}", train.lr)));
    }
    let mut params = params.clone();
    let mut prompts = prompts.cloned();
    let mut opt = OptimizerState::new(train.optimizer, train.lr, 0.0)?;
    let mut history = Vec::with_capacity(train.epochs);
    let mut utilization = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let topo_seed = rng::derive_seed(seed, &[STREAM_TOPO, epoch as u64]);
        match epoch_step(&params, prompts.as_ref(), graph, model, topo_seed) {
            Ok((breakdown, used, grads, prompt_grads)) => {
                let mut next = params.clone();
                let mut next_prompts = prompts.clone();
                let mut targets: Vec<&mut Tensor<S>> = next.tensors_mut();
                let mut all_grads = grads;
                if let (Some(p), Some(g)) = (next_prompts.as_mut(), prompt_grads) {
                    targets.push(&mut p.prompts);
                    targets.push(&mut p.projections);
                    all_grads.extend(g);
                }
                opt.step(&mut targets, &all_grads)?;
                let finite = next.is_finite()
                    && next_prompts
                        .as_ref()
                        .is_none_or(|p| p.prompts.is_finite() && p.projections.is_finite());
                history.push(breakdown);
                utilization.push(used);
                if !finite {
                    return Ok(LocalOutcome {
                        params,
                        prompts,
                        history,
                        utilization,
                        aborted: Some(Error::numeric("optimizer", 0, format!("update diverged in epoch {epoch}"))),
                    });
                }
                params = next;
                prompts = next_prompts;
            }
            Err(e @ Error::Numeric { .. }) => {
                return Ok(LocalOutcome {
                    params,
                    prompts,
                    history,
                    utilization,
                    aborted: Some(e),
                })
            }
            Err(e) => return Err(e),
        }
    }
    Ok(LocalOutcome {
        params,
        prompts,
        history,
        utilization,
        aborted: None,
    })
}

type StepResult<S> = (LossBreakdown, f64, Vec<Tensor<S>>, Option<[Tensor<S>; 2]>);

fn epoch_step<S: Scalar>(
    params: &GfmParams<S>,
    prompts: Option<&PromptSet<S>>,
    graph: &PreparedGraph<S>,
    model: &ModelConfig,
    topo_seed: u64,
) -> Result<StepResult<S>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let x = tape.constant(graph.features.clone());
    let (x_in, prompt_vars) = match prompts {
        Some(p) => {
            let pv = tape.param(p.prompts.clone());
            let wv = tape.param(p.projections.clone());
            let xi = apply_prompts_taped(&mut tape, pv, wv, x).map_err(|e| e.in_component("prompts"))?;
            (xi, Some((pv, wv)))
        }
        None => (x, None),
    };
    let vars = loss_pretrain_taped(&mut tape, &bound, params, graph, x_in, model, None, topo_seed)?;
    let breakdown = vars.breakdown(&tape, model);
    let used = vars.codes.utilization(params.codebook.tokens_per_head());
    let g = tape.backward(vars.total)?;
    let prompt_grads = prompt_vars.map(|(p, w)| [g.wrt(p), g.wrt(w)]);
    Ok((breakdown, used, bound.gradients(&g), prompt_grads))
}

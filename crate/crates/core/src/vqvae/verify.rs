//! Gradient checks for the full pre-training objective.

use super::model::{loss_pretrain_taped, BoundParams, CodeAssignment, PreparedGraph};
use super::params::{GfmParams, ModelConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{finite_difference_check, Evaluation, FdReport, Gradients, Tape, Tensor};

fn flat<S: Scalar>(parts: &[Tensor<S>]) -> Vec<S> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Central differences against the tape gradient of the whole objective,
/// with the quantization indices and the stop-gradient values of the base
/// point held fixed.
pub fn full_gradient_check<S: Scalar>(
    params: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    cfg: &ModelConfig,
    eps: f64,
) -> Result<FdReport> {
    let (codes, replay) = {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, params, true);
        let x = tape.constant(graph.features.clone());
        let vars = loss_pretrain_taped(&mut tape, &bound, params, graph, x, cfg, None, 0)?;
        (vars.codes, tape.captured())
    };
    let eval = |values: &[S]| -> Result<Evaluation<S>> {
        let mut q = params.clone();
        q.unflatten(values)?;
        let mut tape = Tape::replaying(replay.clone());
        let bound = BoundParams::bind(&mut tape, &q, true);
        let x = tape.constant(graph.features.clone());
        let vars = loss_pretrain_taped(&mut tape, &bound, &q, graph, x, cfg, Some(&codes), 0)?;
        let g = tape.backward(vars.total)?;
        Ok(Evaluation {
            value: tape.value(vars.total).item(),
            gradient: flat(&bound.gradients(&g)),
            regime: tape.regime(),
        })
    };
    finite_difference_check(eval, &params.flatten(), eps)
}

/// Outcome of the four routing checks; each flag is a bitwise comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingReport {
    /// Reconstruction gradient at `z` equals the one at the quantized input
    /// of the decoder.
    pub straight_through: bool,
    /// The codebook term leaves the encoder gradient at zero, whatever the
    /// tokens are.
    pub codebook_term_skips_encoder: bool,
    /// The commitment term leaves the token gradient at zero, whatever the
    /// encoder weights are.
    pub commitment_skips_tokens: bool,
    /// The codebook term reaches the tokens and the commitment term reaches
    /// the encoder.
    pub terms_reach_their_targets: bool,
}

impl RoutingReport {
    pub fn all(&self) -> bool {
        self.straight_through
            && self.codebook_term_skips_encoder
            && self.commitment_skips_tokens
            && self.terms_reach_their_targets
    }
}

struct TermGrads<S> {
    recon_at_z: Tensor<S>,
    recon_at_st: Tensor<S>,
    codebook_encoder: Vec<Tensor<S>>,
    codebook_tokens: Vec<Tensor<S>>,
    commit_encoder: Vec<Tensor<S>>,
    commit_tokens: Vec<Tensor<S>>,
}

fn term_grads<S: Scalar>(
    params: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    cfg: &ModelConfig,
    codes: Option<&CodeAssignment>,
) -> Result<(TermGrads<S>, CodeAssignment)> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, true);
    let x = tape.constant(graph.features.clone());
    let v = loss_pretrain_taped(&mut tape, &bound, params, graph, x, cfg, codes, 0)?;
    let encoder_vars = bound.all.len() - params.codebook.head_count() - 1 - 4;
    let split = |g: &Gradients<S>| {
        let all = bound.gradients(g);
        let enc = all[..encoder_vars].to_vec();
        let tok: Vec<_> = bound.heads().iter().map(|&h| g.wrt(h)).collect();
        (enc, tok)
    };
    let recon = tape.add(v.feat, v.topo)?;
    let g = tape.backward(recon)?;
    let recon_at_z = g.wrt(v.z);
    let recon_at_st = g.wrt(v.st);
    let (codebook_encoder, codebook_tokens) = split(&tape.backward(v.codebook_term)?);
    let (commit_encoder, commit_tokens) = split(&tape.backward(v.commitment_term)?);
    Ok((
        TermGrads {
            recon_at_z,
            recon_at_st,
            codebook_encoder,
            codebook_tokens,
            commit_encoder,
            commit_tokens,
        },
        v.codes,
    ))
}

fn same<S: Scalar>(a: &[Tensor<S>], b: &[Tensor<S>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y))
}

fn all_zero<S: Scalar>(ts: &[Tensor<S>]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.f64() == 0.0))
}

fn perturbed<S: Scalar>(t: &Tensor<S>, rng: &mut crate::rng::Rng, scale: f64) -> Tensor<S> {
    let noise: Vec<S> = crate::rng::normal_vec(rng, t.len(), scale);
    let data = t.data().iter().zip(noise).map(|(&a, b)| a + b).collect();
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Runs the routing checks at `params` and at copies with perturbed tokens
/// or encoder weights (quantization indices held at the base point).
pub fn routing_check<S: Scalar>(
    params: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    cfg: &ModelConfig,
    seed: u64,
) -> Result<RoutingReport> {
    let mut rng = crate::rng::stream(seed, &[]);
    let (base, codes) = term_grads(params, graph, cfg, None)?;

    let mut tok = params.clone();
    for h in &mut tok.codebook.heads {
        *h = perturbed(h, &mut rng, 0.1);
    }
    let (t, _) = term_grads(&tok, graph, cfg, Some(&codes))?;

    let mut enc = params.clone();
    for l in &mut enc.layers {
        l.w_self = perturbed(&l.w_self, &mut rng, 0.1);
        l.w_nbr = perturbed(&l.w_nbr, &mut rng, 0.1);
    }
    let (e, _) = term_grads(&enc, graph, cfg, Some(&codes))?;

    Ok(RoutingReport {
        straight_through: base.recon_at_z.bitwise_eq(&base.recon_at_st),
        codebook_term_skips_encoder: all_zero(&base.codebook_encoder)
            && same(&base.codebook_encoder, &t.codebook_encoder),
        commitment_skips_tokens: all_zero(&base.commit_tokens)
            && same(&base.commit_tokens, &e.commit_tokens),
        terms_reach_their_targets: !all_zero(&base.codebook_tokens) && !all_zero(&base.commit_encoder),
    })
}

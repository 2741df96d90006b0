use std::collections::HashSet;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::params::{GfmParams, Metric, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;
use crate::rng::{self, STREAM_TOPO};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, Neighbors, NORM_CLAMP};
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Structure of the topology reconstruction target.
#[derive(Debug, Clone)]
pub enum Topology<S> {
    Dense(Tensor<S>),
    /// Ordered positive pairs (each undirected edge from both ends, self
    /// loops once) and their lookup set.
    Sampled {
        positives: Arc<[(usize, usize)]>,
        lookup: HashSet<(usize, usize)>,
    },
}

/// A graph with the derived structures the forward pass needs.
#[derive(Debug, Clone)]
pub struct PreparedGraph<S> {
    pub features: Tensor<S>,
    pub neighbors: Arc<Neighbors>,
    pub edge_mean: Option<Tensor<S>>,
    pub topology: Topology<S>,
}

impl<S: Scalar> PreparedGraph<S> {
    pub fn new(graph: &TextAttributedGraph<S>, dense_threshold: usize) -> Self {
        let n = graph.node_count();
        let topology = if n <= dense_threshold {
            Topology::Dense(graph.dense_adjacency())
        } else {
            let mut positives = Vec::with_capacity(2 * graph.edge_count());
            for &(u, v) in graph.edges() {
                positives.push((u, v));
                if u != v {
                    positives.push((v, u));
                }
            }
            let lookup = positives.iter().copied().collect();
            Topology::Sampled {
                positives: positives.into(),
                lookup,
            }
        };
        Self {
            features: graph.features().clone(),
            neighbors: Arc::new(graph.neighbors()),
            edge_mean: graph.mean_incident_edge_features(),
            topology,
        }
    }

    pub fn node_count(&self) -> usize {
        self.features.rows()
    }

    pub fn with_features(&self, features: Tensor<S>) -> Result<Self> {
        if features.shape() != self.features.shape() {
            return Err(Error::contract("replacement features change the shape"));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }
}

/// Per-node, per-head token indices chosen by the quantizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeAssignment {
    pub nodes: usize,
    pub heads: usize,
    /// Row-major `nodes x heads`.
    pub indices: Vec<usize>,
    /// Nodes whose zero-norm embedding forced the L2 fallback (counted once
    /// per head).
    pub fallbacks: usize,
}

impl CodeAssignment {
    pub fn of(&self, node: usize) -> &[usize] {
        &self.indices[node * self.heads..(node + 1) * self.heads]
    }

    pub fn head_column(&self, m: usize) -> Vec<usize> {
        (0..self.nodes).map(|i| self.indices[i * self.heads + m]).collect()
    }

    /// Fraction of all `heads · tokens` slots chosen by at least one node.
    pub fn utilization(&self, tokens: usize) -> f64 {
        let mut used = vec![false; self.heads * tokens];
        for i in 0..self.nodes {
            for (m, &t) in self.of(i).iter().enumerate() {
                used[m * tokens + t] = true;
            }
        }
        used.iter().filter(|&&u| u).count() as f64 / used.len().max(1) as f64
    }
}

/// Index of the nearest row of `tokens` to `z`. Ties go to the lowest
/// index. Returns `(index, fell_back)`.
pub fn nearest_token<S: Scalar>(tokens: &Tensor<S>, z: &[S], metric: Metric) -> (usize, bool) {
    let zero = kernels::norm(z) < NORM_CLAMP;
    let use_l2 = metric == Metric::L2 || zero;
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for t in 0..tokens.rows() {
        let e = tokens.row(t);
        let score = if use_l2 {
            -z.iter()
                .zip(e)
                .map(|(a, b)| {
                    let d = a.f64() - b.f64();
                    d * d
                })
                .sum::<f64>()
        } else {
            kernels::cosine(z, e)
        };
        if score > best_score {
            best = t;
            best_score = score;
        }
    }
    (best, zero && metric == Metric::Cosine)
}

pub fn assign_codes<S: Scalar>(params: &GfmParams<S>, z: &Tensor<S>) -> CodeAssignment {
    let cb = &params.codebook;
    let (n, m) = (z.rows(), cb.head_count());
    let mut indices = Vec::with_capacity(n * m);
    let mut fallbacks = 0;
    for i in 0..n {
        for head in &cb.heads {
            let (t, fell) = nearest_token(head, z.row(i), cb.metric);
            indices.push(t);
            fallbacks += usize::from(fell);
        }
    }
    CodeAssignment {
        nodes: n,
        heads: m,
        indices,
        fallbacks,
    }
}

/// Tape handles for every parameter tensor, in flattening order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub all: Vec<Var>,
    layers: Vec<(Var, Var, Option<Var>, Var)>,
    heads: Vec<Var>,
    projection: Var,
    decoder: [Var; 4],
}

impl BoundParams {
    pub fn bind<S: Scalar>(tape: &mut Tape<S>, params: &GfmParams<S>, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor<S>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers: Vec<_> = params
            .layers
            .iter()
            .map(|l| (leaf(&l.w_self), leaf(&l.w_nbr), l.w_edge.as_ref().map(&mut leaf), leaf(&l.bias)))
            .collect();
        let heads: Vec<Var> = params.codebook.heads.iter().map(&mut leaf).collect();
        let projection = leaf(&params.codebook.projection);
        let dec = &params.decoder;
        let decoder = [leaf(&dec.w1), leaf(&dec.b1), leaf(&dec.w2), leaf(&dec.b2)];
        let mut all = Vec::new();
        for &(a, b, e, c) in &layers {
            all.extend([a, b]);
            all.extend(e);
            all.push(c);
        }
        all.extend(&heads);
        all.push(projection);
        all.extend(decoder);
        Self {
            all,
            layers,
            heads,
            projection,
            decoder,
        }
    }

    /// Gradients in flattening order.
    pub fn gradients<S: Scalar>(&self, g: &Gradients<S>) -> Vec<Tensor<S>> {
        self.all.iter().map(|&v| g.wrt(v)).collect()
    }

    pub fn heads(&self) -> &[Var] {
        &self.heads
    }

    pub fn projection(&self) -> Var {
        self.projection
    }
}

/// One message-passing layer:
/// `h·W_self + (mean_nbr(h) + Ē·W_edge)·W_nbr + b`.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    (w_self, w_nbr, w_edge, bias): (Var, Var, Option<Var>, Var),
    h: Var,
    graph: &PreparedGraph<S>,
    activate: bool,
) -> Result<Var> {
    let mut msg = tape.neighbor_mean(h, graph.neighbors.clone())?;
    if let (Some(we), Some(em)) = (w_edge, &graph.edge_mean) {
        let ev = tape.constant(em.clone());
        let e = tape.matmul(ev, we)?;
        msg = tape.add(msg, e)?;
    }
    let s = tape.matmul(h, w_self)?;
    let m = tape.matmul(msg, w_nbr)?;
    let out = tape.add(s, m)?;
    let out = tape.add_row(out, bias)?;
    if activate {
        tape.relu(out)
    } else {
        Ok(out)
    }
}

pub fn encode_taped<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    graph: &PreparedGraph<S>,
    x: Var,
) -> Result<Var> {
    let d = tape.value(x).cols();
    let want = tape.value(bound.layers[0].0).rows();
    if d != want {
        return Err(Error::contract(format!("graph features have d={d}, model expects {want}")));
    }
    let last = bound.layers.len() - 1;
    let mut h = x;
    for (i, &layer) in bound.layers.iter().enumerate() {
        h = encoder_layer(tape, layer, h, graph, i < last)?;
    }
    Ok(h)
}

/// Gather each head's chosen tokens, concatenate, project.
pub fn quantize_taped<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    codes: &CodeAssignment,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(codes.heads);
    for (m, &head) in bound.heads.iter().enumerate() {
        let idx: Arc<[usize]> = codes.head_column(m).into();
        parts.push(tape.gather_rows(head, idx)?);
    }
    let cat = tape.concat_cols(&parts)?;
    tape.matmul(cat, bound.projection)
}

pub fn decode_taped<S: Scalar>(tape: &mut Tape<S>, bound: &BoundParams, v: Var) -> Result<Var> {
    let [w1, b1, w2, b2] = bound.decoder;
    let h = tape.matmul(v, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h)?;
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

/// Mean over rows of `(1 − cos(x_i, x̂_i))^γ`.
pub fn loss_feat<S: Scalar>(tape: &mut Tape<S>, x: Var, xhat: Var, gamma: f64) -> Result<Var> {
    let c = tape.row_cosine(x, xhat)?;
    let one_minus = tape.affine(c, -1.0, 1.0)?;
    let p = tape.powf(one_minus, gamma)?;
    tape.mean(p)
}

/// `‖A − σ(X̂X̂ᵀ)‖²_F`.
pub fn loss_topo_dense<S: Scalar>(tape: &mut Tape<S>, adjacency: Var, xhat: Var) -> Result<Var> {
    let g = tape.matmul_nt(xhat, xhat)?;
    let s = tape.sigmoid(g)?;
    let diff = tape.sub(adjacency, s)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// Unbiased estimate of the dense topology loss: every positive pair
/// exactly, plus as many uniformly drawn non-edges scaled up to the full
/// non-edge population (diagonal included).
pub fn loss_topo_sampled<S: Scalar>(
    tape: &mut Tape<S>,
    xhat: Var,
    positives: &Arc<[(usize, usize)]>,
    lookup: &HashSet<(usize, usize)>,
    seed: u64,
) -> Result<Var> {
    let n = tape.value(xhat).rows();
    let p = positives.len();
    let population = n * n - p;
    let q = p.min(population);
    let mut rng = rng::stream(seed, &[STREAM_TOPO]);
    let mut pairs: Vec<(usize, usize)> = positives.to_vec();
    while pairs.len() < p + q {
        let pair = (rng.random_range(0..n), rng.random_range(0..n));
        if !lookup.contains(&pair) {
            pairs.push(pair);
        }
    }
    let scale = if q == 0 { 0.0 } else { population as f64 / q as f64 };
    let target: Vec<f64> = (0..p + q).map(|i| if i < p { 1.0 } else { 0.0 }).collect();
    let weight: Vec<f64> = (0..p + q).map(|i| if i < p { 1.0 } else { scale }).collect();
    let pd = tape.pair_dot(xhat, pairs.into())?;
    let s = tape.sigmoid(pd)?;
    let t = tape.constant(Tensor::from_f64(&[p + q], &target)?);
    let w = tape.constant(Tensor::from_f64(&[p + q], &weight)?);
    let diff = tape.sub(t, s)?;
    let sq = tape.square(diff)?;
    let weighted = tape.hadamard(sq, w)?;
    tape.sum(weighted)
}

/// `mean_i ‖a_i − b_i‖²`.
fn mean_sq_rows<S: Scalar>(tape: &mut Tape<S>, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).rows().max(1);
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let s = tape.sum(sq)?;
    tape.scale(s, 1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub feat: f64,
    pub topo: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub gamma: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn recomposed(&self) -> f64 {
        self.feat + self.topo + self.codebook_term + self.beta * self.commitment_term
    }
}

/// Tape handles of a recorded pre-training loss.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub total: Var,
    pub feat: Var,
    pub topo: Var,
    pub codebook_term: Var,
    pub commitment_term: Var,
    pub z: Var,
    pub zq: Var,
    /// Decoder input: the value of `zq`, the gradient path of `z`.
    pub st: Var,
    pub xhat: Var,
    pub codes: CodeAssignment,
}

impl LossVars {
    pub fn breakdown<S: Scalar>(&self, tape: &Tape<S>, cfg: &ModelConfig) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item().f64();
        LossBreakdown {
            total: v(self.total),
            feat: v(self.feat),
            topo: v(self.topo),
            codebook_term: v(self.codebook_term),
            commitment_term: v(self.commitment_term),
            gamma: cfg.gamma,
            beta: cfg.beta,
        }
    }
}

/// Records the full pre-training objective
/// `L_feat + L_topo + mean‖sg[z] − z_q‖² + β·mean‖z − sg[z_q]‖²`.
///
/// `x_in` is what the encoder reads (possibly prompted); the reconstruction
/// target is the graph's own features. With `frozen` the quantizer reuses
/// the given indices instead of searching.
pub fn loss_pretrain_taped<S: Scalar>(
    tape: &mut Tape<S>,
    bound: &BoundParams,
    params: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    x_in: Var,
    cfg: &ModelConfig,
    frozen: Option<&CodeAssignment>,
    topo_seed: u64,
) -> Result<LossVars> {
    let z = encode_taped(tape, bound, graph, x_in).map_err(|e| e.in_component("encoder"))?;
    let codes = match frozen {
        Some(c) => {
            if c.nodes != graph.node_count() || c.heads != params.codebook.head_count() {
                return Err(Error::contract("frozen code assignment does not match the graph"));
            }
            c.clone()
        }
        None => assign_codes(params, tape.value(z)),
    };
    tape.note_regime(&codes.indices);
    let zq = quantize_taped(tape, bound, &codes).map_err(|e| e.in_component("quantizer"))?;

    let sg_z = tape.stop_gradient(z)?;
    let codebook_term =
        mean_sq_rows(tape, sg_z, zq).map_err(|e| e.in_component("codebook_term"))?;
    let sg_zq = tape.stop_gradient(zq)?;
    let commitment_term =
        mean_sq_rows(tape, z, sg_zq).map_err(|e| e.in_component("commitment_term"))?;

    let st = tape.straight_through(z, zq)?;
    let xhat = decode_taped(tape, bound, st).map_err(|e| e.in_component("decoder"))?;
    let x = tape.constant(graph.features.clone());
    let feat = loss_feat(tape, x, xhat, cfg.gamma).map_err(|e| e.in_component("loss_feat"))?;
    let topo = match &graph.topology {
        Topology::Dense(a) => {
            let a = tape.constant(a.clone());
            loss_topo_dense(tape, a, xhat)
        }
        Topology::Sampled { positives, lookup } => {
            loss_topo_sampled(tape, xhat, positives, lookup, topo_seed)
        }
    }
    .map_err(|e| e.in_component("loss_topo"))?;

    let recon = tape.add(feat, topo)?;
    let commit = tape.scale(commitment_term, cfg.beta)?;
    let vq = tape.add(codebook_term, commit)?;
    let total = tape.add(recon, vq).map_err(|e| e.in_component("total"))?;
    Ok(LossVars {
        total,
        feat,
        topo,
        codebook_term,
        commitment_term,
        z,
        zq,
        st,
        xhat,
        codes,
    })
}

/// Evaluates the pre-training loss without keeping the tape.
pub fn loss_pretrain<S: Scalar>(
    params: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    cfg: &ModelConfig,
    topo_seed: u64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let x = tape.constant(graph.features.clone());
    let vars = loss_pretrain_taped(&mut tape, &bound, params, graph, x, cfg, None, topo_seed)?;
    Ok(vars.breakdown(&tape, cfg))
}

/// Encoder output `Z` for the given input features.
pub fn encode<S: Scalar>(params: &GfmParams<S>, graph: &PreparedGraph<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let x = tape.constant(graph.features.clone());
    let z = encode_taped(&mut tape, &bound, graph, x)?;
    Ok(tape.value(z).clone())
}

/// `(Z_q, indices)` for an embedding matrix.
pub fn quantize<S: Scalar>(params: &GfmParams<S>, z: &Tensor<S>) -> Result<(Tensor<S>, CodeAssignment)> {
    if !z.is_finite() {
        return Err(Error::numeric("quantizer", 0, "non-finite embedding"));
    }
    let codes = assign_codes(params, z);
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let zq = quantize_taped(&mut tape, &bound, &codes)?;
    Ok((tape.value(zq).clone(), codes))
}

pub fn decode_features<S: Scalar>(params: &GfmParams<S>, zq: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params, false);
    let v = tape.constant(zq.clone());
    let x = decode_taped(&mut tape, &bound, v)?;
    Ok(tape.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::plain;
    use crate::tensor::finite_difference_check;
    use crate::tensor::{Evaluation, Replay};

    fn cfg(d: usize, heads: usize, tokens: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads,
            tokens,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn cosine_and_l2_nearest() {
        let e = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(nearest_token(&e, &[0.9, 0.1], Metric::Cosine), (0, false));
        assert_eq!(nearest_token(&e, &[0.5, 0.5], Metric::Cosine), (0, false));
        assert_eq!(nearest_token(&e, &[0.1, 0.9], Metric::Cosine), (1, false));
        assert_eq!(nearest_token(&e, &[3.0, 1.0], Metric::L2), (0, false));
        assert_eq!(nearest_token(&e, &[0.0, 0.0], Metric::Cosine), (0, true));
    }

    #[test]
    fn quantizing_tokens_returns_them() {
        let mut p = GfmParams::<f64>::init(&cfg(3, 1, 5), 2).unwrap();
        p.codebook.projection = Tensor::identity(3);
        let tokens = p.codebook.heads[0].clone();
        let (zq, codes) = quantize(&p, &tokens).unwrap();
        assert_eq!(codes.indices, vec![0, 1, 2, 3, 4]);
        assert!(zq.bitwise_eq(&tokens));
        assert_eq!(codes.utilization(5), 1.0);
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut p = GfmParams::<f64>::init(&cfg(3, 1, 2), 0).unwrap();
        for l in &mut p.layers {
            l.w_self = Tensor::zeros(&[3, 3]);
            l.w_nbr = Tensor::zeros(&[3, 3]);
        }
        let g = plain(4, &[(0, 1), (1, 2)], 3);
        let z = encode(&p, &PreparedGraph::new(&g, 100)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    fn one_layer(x: &[f64], n: usize, edges: &[(usize, usize)], bias: f64) -> Tensor<f64> {
        let d = 2;
        let f = Tensor::from_f64(&[n, d], x).unwrap();
        let g = plain(n, edges, d).with_features(f).unwrap();
        let pg = PreparedGraph::new(&g, 100);
        let mut tape = Tape::new();
        let ws = tape.constant(Tensor::identity(d));
        let wn = tape.constant(Tensor::identity(d));
        let b = tape.constant(Tensor::from_f64(&[1, d], &[bias, bias]).unwrap());
        let xv = tape.constant(pg.features.clone());
        let out = encoder_layer(&mut tape, (ws, wn, None, b), xv, &pg, false).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let z = one_layer(&[0.3, -2.0], 1, &[], 0.5);
        assert_eq!(z.data(), &[0.8, -1.5]);
    }

    #[test]
    fn star_center_adds_mean_of_leaves() {
        let x = [1.0, 0.0, 2.0, 1.0, 4.0, 3.0, 0.0, 2.0];
        let z = one_layer(&x, 4, &[(0, 1), (0, 2), (0, 3)], 0.0);
        // leaves (2,1),(4,3),(0,2) → mean (2,2)
        assert_eq!(z.row(0), &[3.0, 2.0]);
        assert_eq!(z.row(1), &[3.0, 1.0]);
    }

    #[test]
    fn decoder_identity_path() {
        let mut p = GfmParams::<f64>::init(&cfg(3, 1, 2), 0).unwrap();
        p.decoder.w1 = Tensor::identity(3);
        p.decoder.w2 = Tensor::identity(3);
        let zq = Tensor::from_f64(&[2, 3], &[0.1, 0.2, 0.3, 1.0, 0.0, 2.0]).unwrap();
        assert!(decode_features(&p, &zq).unwrap().bitwise_eq(&zq));
        p.decoder.w1 = Tensor::zeros(&[3, 3]);
        assert!(decode_features(&p, &zq).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn feature_loss_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap());
        let xh = t.constant(Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap());
        let l = loss_feat(&mut t, x, xh, 2.0).unwrap();
        let want = (1.0 - 1.0 / 2f64.sqrt()).powi(2);
        assert!((t.value(l).item() - want).abs() < 1e-15);
        let same = loss_feat(&mut t, x, x, 2.0).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        let y = t.constant(Tensor::from_f64(&[1, 2], &[0.0, 3.0]).unwrap());
        let orth = loss_feat(&mut t, x, y, 1.0).unwrap();
        assert_eq!(t.value(orth).item(), 1.0);
    }

    #[test]
    fn topology_loss_identity_adjacency() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::identity(2));
        let xh = t.constant(Tensor::zeros(&[2, 3]));
        let l = loss_topo_dense(&mut t, a, xh).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
    }

    #[test]
    fn topology_loss_zero_at_exact_target() {
        let mut t = Tape::<f64>::new();
        let xhv = Tensor::from_f64(&[2, 2], &[0.5, -1.0, 2.0, 0.25]).unwrap();
        let target = kernels::sigmoid(&kernels::matmul_nt(&xhv, &xhv).unwrap());
        let a = t.constant(target);
        let xh = t.constant(xhv);
        let l = loss_topo_dense(&mut t, a, xh).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn breakdown_is_additive_and_beta_zero_ignores_commitment() {
        let c = cfg(4, 2, 3);
        let p = GfmParams::<f64>::init(&c, 5).unwrap();
        let g = crate::graph::testing::plain(6, &[(0, 1), (1, 2), (3, 4), (2, 5)], 4);
        let g = g
            .with_features(Tensor::new(vec![6, 4], rng::normal_vec(&mut rng::stream(1, &[]), 24, 1.0)).unwrap())
            .unwrap();
        let pg = PreparedGraph::new(&g, 100);
        let b = loss_pretrain(&p, &pg, &c, 0).unwrap();
        assert!((b.total - b.recomposed()).abs() <= 1e-10 * b.total.abs());
        let b0 = loss_pretrain(&p, &pg, &ModelConfig { beta: 0.0, ..c }, 0).unwrap();
        assert_eq!(b0.total, b0.feat + b0.topo + b0.codebook_term);
        assert!(b0.commitment_term > 0.0);
    }

    #[test]
    fn decoder_gradient_matches_finite_differences() {
        let c = cfg(3, 1, 2);
        let p = GfmParams::<f64>::init(&c, 3).unwrap();
        let zq = Tensor::from_f64(&[2, 3], &[0.4, -0.2, 0.9, 1.1, 0.3, -0.5]).unwrap();
        let target = Tensor::from_f64(&[2, 3], &[1.0, 0.5, 0.0, -1.0, 0.2, 0.7]).unwrap();
        let w1 = p.decoder.w1.clone();
        let eval = |flat: &[f64]| -> Result<Evaluation<f64>> {
            let mut q = p.clone();
            q.decoder.w1.data_mut().copy_from_slice(flat);
            let mut t = Tape::new();
            let bound = BoundParams::bind(&mut t, &q, true);
            let v = t.constant(zq.clone());
            let xh = decode_taped(&mut t, &bound, v)?;
            let x = t.constant(target.clone());
            let l = loss_feat(&mut t, x, xh, 2.0)?;
            let g = t.backward(l)?;
            Ok(Evaluation {
                value: t.value(l).item(),
                gradient: g.wrt(bound.decoder[0]).into_data(),
                regime: t.regime(),
            })
        };
        let r = finite_difference_check(eval, w1.data(), 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }

    #[test]
    fn sampled_topology_tracks_dense() {
        let spec = crate::graph::SyntheticDomainSpec {
            node_count: 50,
            block_sizes: vec![25, 25],
            p_intra: 0.3,
            p_inter: 0.05,
            class_count: 2,
            feature_dim: 4,
            class_means: vec![vec![0.0; 4]; 2],
            noise_scale: 0.5,
            domain_tag: "s".into(),
            seed: 1,
        };
        let g: TextAttributedGraph<f64> = crate::graph::synth_domain(&spec).unwrap();
        let dense = PreparedGraph::new(&g, 1000);
        let sampled = PreparedGraph::new(&g, 10);
        let Topology::Sampled { positives, lookup } = &sampled.topology else {
            panic!("expected sampled topology");
        };
        let Topology::Dense(a) = &dense.topology else {
            panic!("expected dense topology");
        };
        let xh = g.features().clone();
        let mut t = Tape::new();
        let xv = t.constant(xh);
        let av = t.constant(a.clone());
        let exact = loss_topo_dense(&mut t, av, xv).unwrap();
        let exact = t.value(exact).item();
        for seed in 0..10 {
            let est = loss_topo_sampled(&mut t, xv, positives, lookup, seed).unwrap();
            let rel = (t.value(est).item() - exact).abs() / exact;
            assert!(rel < 0.15, "seed {seed}: {rel}");
        }
    }

    #[test]
    fn replay_surrogate_is_reproducible() {
        let c = cfg(4, 2, 3);
        let p = GfmParams::<f64>::init(&c, 1).unwrap();
        let g = plain(5, &[(0, 1), (1, 2), (3, 4)], 4)
            .with_features(Tensor::new(vec![5, 4], rng::normal_vec(&mut rng::stream(2, &[]), 20, 1.0)).unwrap())
            .unwrap();
        let pg = PreparedGraph::new(&g, 100);
        let run = |replay: Option<Replay<f64>>| {
            let mut t = replay.map_or_else(Tape::new, Tape::replaying);
            let b = BoundParams::bind(&mut t, &p, true);
            let x = t.constant(pg.features.clone());
            let v = loss_pretrain_taped(&mut t, &b, &p, &pg, x, &c, None, 0).unwrap();
            (t.value(v.total).item(), t.captured())
        };
        let (a, cap) = run(None);
        let (b, _) = run(Some(cap));
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

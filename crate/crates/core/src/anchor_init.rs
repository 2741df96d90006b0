//! Domain-aware codebook initialization. Each client mean-pools its node
//! embeddings under the shared initial encoder into a prototype; the server
//! surrounds every prototype with Gaussian-perturbed anchors and seeds the
//! codebook with them. Also hosts the Monte-Carlo separability harnesses.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::digest::digest_bytes;
use crate::error::{Error, Result};
use crate::graph::{synth_domain, SyntheticDomainSpec, TextAttributedGraph};
use crate::rng::{self, STREAM_ANCHORS};
use crate::scalar::Scalar;
use crate::tensor::{kernels, Tensor};
use crate::vqvae::{encode, nearest_token, Codebook, GfmParams, ModelConfig, PreparedGraph};

/// Relative anchor noise: `σ = SIGMA_FACTOR · mean‖p‖`.
pub const SIGMA_FACTOR: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct DomainPrototype<S> {
    pub client_id: usize,
    pub vector: Vec<S>,
    /// Digest of the graph the prototype was pooled from.
    pub graph_digest: String,
    /// Digest of the initial global parameters used to encode it.
    pub init_digest: String,
}

impl<S: Scalar> DomainPrototype<S> {
    pub fn norm(&self) -> f64 {
        kernels::norm(&self.vector)
    }
}

/// Digest of features and adjacency lists.
pub fn graph_digest<S: Scalar>(graph: &PreparedGraph<S>) -> String {
    let mut bytes = Vec::new();
    for v in graph.features.data() {
        bytes.extend(v.f64().to_le_bytes());
    }
    for i in 0..graph.node_count() {
        bytes.extend((graph.neighbors.degree(i) as u64).to_le_bytes());
        for &j in graph.neighbors.of(i) {
            bytes.extend((j as u64).to_le_bytes());
        }
    }
    digest_bytes(&bytes)
}

/// Mean of the encoder output over all nodes.
pub fn extract_prototype<S: Scalar>(
    global_init: &GfmParams<S>,
    graph: &PreparedGraph<S>,
    client_id: usize,
) -> Result<DomainPrototype<S>> {
    if graph.node_count() == 0 {
        return Err(Error::contract("cannot pool a prototype from an empty graph"));
    }
    let z = encode(global_init, graph)?;
    Ok(DomainPrototype {
        client_id,
        vector: kernels::mean_rows(&z)?.into_data(),
        graph_digest: graph_digest(graph),
        init_digest: global_init.digest(),
    })
}

#[derive(Debug, Clone)]
pub struct AnchorSet<S> {
    pub client_id: usize,
    pub count: usize,
    pub sigma: f64,
    pub seed: u64,
    /// `count x d`.
    pub anchors: Tensor<S>,
}

/// `p + σ·ε_i` for `i < count`, `ε_i ~ N(0, I)`.
pub fn synthesize_anchors<S: Scalar>(
    p: &DomainPrototype<S>,
    count: usize,
    sigma: f64,
    seed: u64,
) -> Result<AnchorSet<S>> {
    if !(sigma >= 0.0) {
        return Err(Error::contract(format!("anchor noise must be non-negative, got {sigma}")));
    }
    let d = p.vector.len();
    let mut rng = rng::stream(seed, &[STREAM_ANCHORS, p.client_id as u64]);
    let mut data = Vec::with_capacity(count * d);
    for _ in 0..count {
        if sigma == 0.0 {
            data.extend_from_slice(&p.vector);
        } else {
            let eps: Vec<f64> = rng::normal_vec(&mut rng, d, 1.0);
            data.extend(p.vector.iter().zip(eps).map(|(v, e)| S::from_f64_lossy(v.f64() + sigma * e)));
        }
    }
    Ok(AnchorSet {
        client_id: p.client_id,
        count,
        sigma,
        seed,
        anchors: Tensor::matrix(count, d, data)?,
    })
}

/// `SIGMA_FACTOR · mean‖p‖` (or `factor · mean‖p‖` for sweeps).
pub fn relative_sigma<S: Scalar>(prototypes: &[DomainPrototype<S>], factor: f64) -> f64 {
    if prototypes.is_empty() {
        return 0.0;
    }
    factor * prototypes.iter().map(DomainPrototype::norm).sum::<f64>() / prototypes.len() as f64
}

/// Seeds every head with `⌊T/K⌋` anchors per prototype (prototype-major,
/// fresh noise per head) and fills the `T mod K` leftover slots with
/// Gaussian tokens. The projection becomes the block average.
pub fn init_codebook<S: Scalar>(
    prototypes: &[DomainPrototype<S>],
    heads: usize,
    tokens: usize,
    model: &ModelConfig,
    sigma: f64,
    seed: u64,
) -> Result<Codebook<S>> {
    let k = prototypes.len();
    if k == 0 {
        return Err(Error::contract("codebook initialization needs at least one prototype"));
    }
    if tokens < k {
        return Err(Error::contract(format!(
            "{tokens} tokens per head cannot hold anchors for {k} prototypes; raise the token count to at least {k}"
        )));
    }
    let d = prototypes[0].vector.len();
    if prototypes.iter().any(|p| p.vector.len() != d) || d != model.d {
        return Err(Error::contract("prototype dimension differs from the model"));
    }
    let mut order: Vec<&DomainPrototype<S>> = prototypes.iter().collect();
    order.sort_by_key(|p| p.client_id);
    let per = tokens / k;
    let mut out = Vec::with_capacity(heads);
    for m in 0..heads {
        let head_seed = rng::derive_seed(seed, &[STREAM_ANCHORS, m as u64]);
        let mut data = Vec::with_capacity(tokens * d);
        for p in &order {
            data.extend(synthesize_anchors(p, per, sigma, head_seed)?.anchors.into_data());
        }
        let mut rest = rng::stream(head_seed, &[u64::MAX]);
        data.extend(rng::normal_vec::<S>(&mut rest, (tokens - per * k) * d, model.token_scale()));
        out.push(Tensor::matrix(tokens, d, data)?);
    }
    let cb = Codebook {
        heads: out,
        projection: Codebook::block_average(heads, d),
        metric: model.metric,
    };
    cb.validate()?;
    Ok(cb)
}

const PROTO_MAGIC: &[u8; 8] = b"GFPROTO1";

/// Binary prototype registry: magic, the 32-byte init digest, a record
/// count, then per record `client_id: u64`, `d: u64` and `d` values.
pub fn save_prototypes<S: Scalar>(path: &Path, prototypes: &[DomainPrototype<S>]) -> Result<()> {
    let init = prototypes.first().map_or_else(String::new, |p| p.init_digest.clone());
    if prototypes.iter().any(|p| p.init_digest != init) {
        return Err(Error::contract("prototypes were extracted under different initial parameters"));
    }
    let mut bytes = PROTO_MAGIC.to_vec();
    let raw = hex::decode(&init).unwrap_or_default();
    let mut digest = [0u8; 32];
    digest[..raw.len().min(32)].copy_from_slice(&raw[..raw.len().min(32)]);
    bytes.extend(digest);
    bytes.extend((prototypes.len() as u64).to_le_bytes());
    for p in prototypes {
        bytes.extend((p.client_id as u64).to_le_bytes());
        bytes.extend((p.vector.len() as u64).to_le_bytes());
        for v in &p.vector {
            bytes.extend(v.f64().to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads prototypes and refuses them if they were pooled under parameters
/// other than `expected_init`.
pub fn load_prototypes<S: Scalar>(path: &Path, expected_init: &str) -> Result<Vec<DomainPrototype<S>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |offset: usize, detail: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.to_string(),
    };
    if bytes.len() < 48 || &bytes[..8] != PROTO_MAGIC {
        return Err(fail(0, "not a prototype registry"));
    }
    let init = hex::encode(&bytes[8..40]);
    if init != expected_init {
        return Err(Error::Validation(format!(
            "prototypes were extracted under init {init}, current init is {expected_init}"
        )));
    }
    let word = |at: usize| -> Result<u64> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| fail(at.min(bytes.len()), "truncated record"))
    };
    let count = word(40)? as usize;
    let mut at = 48;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let client_id = word(at)? as usize;
        let d = word(at + 8)? as usize;
        at += 16;
        let mut vector = Vec::with_capacity(d);
        for _ in 0..d {
            vector.push(S::from_f64_lossy(f64::from_bits(word(at)?)));
            at += 8;
        }
        out.push(DomainPrototype {
            client_id,
            vector,
            graph_digest: String::new(),
            init_digest: init.clone(),
        });
    }
    if at != bytes.len() {
        return Err(fail(at, "trailing bytes after the last record"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSeparation {
    pub a: String,
    pub b: String,
    /// Mean over trials of `‖p^a − p^b‖²`.
    pub mean_sq_distance: f64,
    pub feature_gap: f64,
    pub adjacency_gap: f64,
    /// `mean_sq_distance / (feature_gap² + adjacency_gap²)`, when the gap is
    /// non-zero.
    pub ratio_of_mean: Option<f64>,
    /// Smallest single-trial ratio.
    pub min_trial_ratio: Option<f64>,
    /// Common node count when the two graphs differed in size.
    pub truncated_to: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SeparabilityReport {
    pub trials: usize,
    pub domains: Vec<String>,
    pub pairs: Vec<PairSeparation>,
    /// Per trial, the smallest distance-to-gap ratio over domain pairs.
    pub trial_alphas: Vec<f64>,
    pub empirical_alpha: Option<f64>,
    /// Per trial cross-domain separation rates.
    pub anchor_separation: Vec<f64>,
    pub random_separation: Vec<f64>,
    pub anchor_win_rate: Option<f64>,
    pub notes: Vec<String>,
}

fn frobenius_gap_sq<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, rows: usize, cols: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let d = a.at(i, j).f64() - b.at(i, j).f64();
            s += d * d;
        }
    }
    s
}

fn gaps<S: Scalar>(ga: &TextAttributedGraph<S>, gb: &TextAttributedGraph<S>) -> (f64, f64, Option<usize>) {
    let n = ga.node_count().min(gb.node_count());
    let truncated = (ga.node_count() != gb.node_count()).then_some(n);
    let d = ga.feature_dim();
    let fx = frobenius_gap_sq(ga.features(), gb.features(), n, d);
    let (aa, ab) = (ga.dense_adjacency(), gb.dense_adjacency());
    let fa = frobenius_gap_sq(&aa, &ab, n, n);
    (fx, fa, truncated)
}

fn check_domains(specs: &[SyntheticDomainSpec], trials: usize, model: &ModelConfig) -> Result<()> {
    if specs.len() < 2 {
        return Err(Error::contract("separability checks need at least two domains"));
    }
    if trials < 20 {
        return Err(Error::contract(format!("at least 20 trials are required, got {trials}")));
    }
    if specs.iter().any(|s| s.feature_dim != model.d) {
        return Err(Error::contract("domain feature dimension differs from the model"));
    }
    Ok(())
}

/// Monte-Carlo look at prototype distinguishability: over `trials` fresh
/// random encoders, how far apart are the domain prototypes compared with
/// the raw feature and adjacency gaps?
pub fn prototype_separation_study<S: Scalar>(
    graphs: &[(String, TextAttributedGraph<S>)],
    trials: usize,
    model: &ModelConfig,
    seed: u64,
) -> Result<SeparabilityReport> {
    if graphs.len() < 2 {
        return Err(Error::contract("separability checks need at least two domains"));
    }
    if trials < 20 {
        return Err(Error::contract(format!("at least 20 trials are required, got {trials}")));
    }
    let prepared: Vec<PreparedGraph<S>> = graphs
        .iter()
        .map(|(_, g)| PreparedGraph::new(g, model.dense_threshold))
        .collect();
    let k = graphs.len();
    let pair_list: Vec<(usize, usize)> = (0..k).flat_map(|a| ((a + 1)..k).map(move |b| (a, b))).collect();
    let gap: Vec<(f64, f64, Option<usize>)> = pair_list
        .iter()
        .map(|&(a, b)| gaps(&graphs[a].1, &graphs[b].1))
        .collect();
    let mut dist_sum = vec![0.0; pair_list.len()];
    let mut min_ratio: Vec<Option<f64>> = vec![None; pair_list.len()];
    let mut trial_alphas = Vec::with_capacity(trials);
    for t in 0..trials {
        let params = GfmParams::<S>::init(model, rng::derive_seed(seed, &[t as u64]))?;
        let protos = prepared
            .iter()
            .enumerate()
            .map(|(i, g)| extract_prototype(&params, g, i))
            .collect::<Result<Vec<_>>>()?;
        let mut alpha = f64::INFINITY;
        for (pi, &(a, b)) in pair_list.iter().enumerate() {
            let dist: f64 = protos[a]
                .vector
                .iter()
                .zip(&protos[b].vector)
                .map(|(x, y)| (x.f64() - y.f64()).powi(2))
                .sum();
            dist_sum[pi] += dist;
            let g = gap[pi].0 + gap[pi].1;
            if g > 0.0 {
                let r = dist / g;
                min_ratio[pi] = Some(min_ratio[pi].map_or(r, |m: f64| m.min(r)));
                alpha = alpha.min(r);
            }
        }
        if alpha.is_finite() {
            trial_alphas.push(alpha);
        }
    }
    let mut notes = Vec::new();
    let pairs = pair_list
        .iter()
        .enumerate()
        .map(|(pi, &(a, b))| {
            let (fx, fa, truncated) = gap[pi];
            if let Some(n) = truncated {
                notes.push(format!(
                    "{} and {} differ in size; gaps use the first {n} nodes",
                    graphs[a].0, graphs[b].0
                ));
            }
            let mean = dist_sum[pi] / trials as f64;
            PairSeparation {
                a: graphs[a].0.clone(),
                b: graphs[b].0.clone(),
                mean_sq_distance: mean,
                feature_gap: fx.sqrt(),
                adjacency_gap: fa.sqrt(),
                ratio_of_mean: (fx + fa > 0.0).then(|| mean / (fx + fa)),
                min_trial_ratio: min_ratio[pi],
                truncated_to: truncated,
            }
        })
        .collect();
    Ok(SeparabilityReport {
        trials,
        domains: graphs.iter().map(|(n, _)| n.clone()).collect(),
        pairs,
        empirical_alpha: trial_alphas.iter().copied().reduce(f64::min),
        trial_alphas,
        notes,
        ..SeparabilityReport::default()
    })
}

/// Cross-domain separation rate of a codebook: for each head, the fraction
/// of node pairs from different domains that land on different tokens,
/// averaged over heads and domain pairs.
pub fn separation_rate<S: Scalar>(codebook: &Codebook<S>, embeddings: &[Tensor<S>]) -> f64 {
    let k = embeddings.len();
    let mut total = 0.0;
    let mut count = 0usize;
    for head in &codebook.heads {
        let hists: Vec<HashMap<usize, usize>> = embeddings
            .iter()
            .map(|z| {
                let mut h = HashMap::new();
                for i in 0..z.rows() {
                    *h.entry(nearest_token(head, z.row(i), codebook.metric).0).or_insert(0) += 1;
                }
                h
            })
            .collect();
        for a in 0..k {
            for b in (a + 1)..k {
                let pairs = embeddings[a].rows() * embeddings[b].rows();
                if pairs == 0 {
                    continue;
                }
                let same: usize = hists[a]
                    .iter()
                    .map(|(t, &ca)| ca * hists[b].get(t).copied().unwrap_or(0))
                    .sum();
                total += 1.0 - same as f64 / pairs as f64;
                count += 1;
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Per trial: a fresh encoder, prototypes from each domain's training graph,
/// an anchor-seeded and a Gaussian codebook of the same shape, and the
/// separation rate of held-out nodes under each.
pub fn anchor_separation_study<S: Scalar>(
    specs: &[SyntheticDomainSpec],
    sigma_factor: f64,
    trials: usize,
    model: &ModelConfig,
    seed: u64,
) -> Result<SeparabilityReport> {
    check_domains(specs, trials, model)?;
    if model.tokens < specs.len() {
        return Err(Error::contract(format!(
            "{} tokens per head cannot hold anchors for {} prototypes; raise the token count",
            model.tokens,
            specs.len()
        )));
    }
    let train: Vec<PreparedGraph<S>> = specs
        .iter()
        .map(|s| Ok(PreparedGraph::new(&synth_domain::<S>(s)?, model.dense_threshold)))
        .collect::<Result<_>>()?;
    let held_out: Vec<PreparedGraph<S>> = specs
        .iter()
        .map(|s| {
            let g = synth_domain::<S>(&s.with_seed(rng::derive_seed(s.seed, &[u64::MAX])))?;
            Ok(PreparedGraph::new(&g, model.dense_threshold))
        })
        .collect::<Result<_>>()?;
    let mut anchor = Vec::with_capacity(trials);
    let mut random = Vec::with_capacity(trials);
    for t in 0..trials {
        let trial_seed = rng::derive_seed(seed, &[t as u64]);
        let params = GfmParams::<S>::init(model, trial_seed)?;
        let protos = train
            .iter()
            .enumerate()
            .map(|(i, g)| extract_prototype(&params, g, i))
            .collect::<Result<Vec<_>>>()?;
        let sigma = relative_sigma(&protos, sigma_factor);
        let cb = init_codebook(&protos, model.heads, model.tokens, model, sigma, trial_seed)?;
        let z: Vec<Tensor<S>> = held_out.iter().map(|g| encode(&params, g)).collect::<Result<_>>()?;
        anchor.push(separation_rate(&cb, &z));
        random.push(separation_rate(&params.codebook, &z));
    }
    let wins = anchor.iter().zip(&random).filter(|(a, r)| a >= r).count();
    Ok(SeparabilityReport {
        trials,
        domains: specs.iter().map(|s| s.domain_tag.clone()).collect(),
        anchor_win_rate: Some(wins as f64 / trials as f64),
        anchor_separation: anchor,
        random_separation: random,
        ..SeparabilityReport::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::testing::plain;

    fn proto(id: usize, v: &[f64]) -> DomainPrototype<f64> {
        DomainPrototype {
            client_id: id,
            vector: v.to_vec(),
            graph_digest: String::new(),
            init_digest: "00".repeat(32),
        }
    }

    fn model(d: usize, heads: usize, tokens: usize) -> ModelConfig {
        ModelConfig {
            d,
            heads,
            tokens,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn prototype_of_identical_rows_is_that_row() {
        let m = model(2, 1, 2);
        let mut p = GfmParams::<f64>::init(&m, 0).unwrap();
        for l in &mut p.layers {
            l.w_self = Tensor::zeros(&[2, 2]);
            l.w_nbr = Tensor::zeros(&[2, 2]);
        }
        p.layers[1].bias = Tensor::from_f64(&[1, 2], &[0.5, -1.0]).unwrap();
        let g = PreparedGraph::new(&plain(3, &[(0, 1)], 2), 10);
        let pr = extract_prototype(&p, &g, 4).unwrap();
        assert_eq!(pr.vector, vec![0.5, -1.0]);
        assert_eq!(pr.client_id, 4);
        let again = extract_prototype(&p, &g, 4).unwrap();
        assert_eq!(again.vector, pr.vector);
        assert_eq!(again.graph_digest, pr.graph_digest);
    }

    #[test]
    fn prototype_is_the_arithmetic_mean() {
        let m = model(2, 1, 2);
        let mut p = GfmParams::<f64>::init(&m, 0).unwrap();
        for l in &mut p.layers {
            l.w_self = Tensor::identity(2);
            l.w_nbr = Tensor::zeros(&[2, 2]);
        }
        let x = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = PreparedGraph::new(&plain(2, &[], 2).with_features(x).unwrap(), 10);
        assert_eq!(extract_prototype(&p, &g, 0).unwrap().vector, vec![0.5, 0.5]);
    }

    #[test]
    fn zero_noise_anchors_copy_the_prototype() {
        let p = proto(0, &[0.1, -0.3, 2.5]);
        let a = synthesize_anchors(&p, 4, 0.0, 1).unwrap();
        for i in 0..4 {
            assert_eq!(a.anchors.row(i), p.vector.as_slice());
        }
        assert_eq!(synthesize_anchors(&p, 0, 0.1, 1).unwrap().anchors.rows(), 0);
    }

    #[test]
    fn anchor_mean_converges() {
        let p = proto(0, &[1.0, -2.0, 0.5]);
        let a = synthesize_anchors(&p, 10_000, 0.1, 7).unwrap();
        let mean = kernels::mean_rows(&a.anchors).unwrap();
        for (m, v) in mean.data().iter().zip(&p.vector) {
            assert!((m - v).abs() < 0.01);
        }
    }

    #[test]
    fn allocation_is_prototype_major() {
        let m = model(2, 2, 4);
        let ps = [proto(1, &[0.0, 1.0]), proto(0, &[1.0, 0.0])];
        let cb = init_codebook(&ps, 2, 4, &m, 0.0, 3).unwrap();
        for head in &cb.heads {
            assert_eq!(head.data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        }
        let cb5 = init_codebook(&ps, 2, 5, &m, 0.0, 3).unwrap();
        assert_eq!(cb5.heads[0].rows(), 5);
        assert_ne!(cb5.heads[0].row(4), cb5.heads[1].row(4));
        assert!(init_codebook(&ps, 2, 1, &m, 0.0, 3).is_err());
    }

    #[test]
    fn heads_draw_fresh_noise() {
        let m = model(3, 2, 4);
        let ps = [proto(0, &[1.0, 0.0, 0.0]), proto(1, &[0.0, 1.0, 0.0])];
        let cb = init_codebook(&ps, 2, 4, &m, 0.1, 3).unwrap();
        assert_ne!(cb.heads[0].data(), cb.heads[1].data());
        let again = init_codebook(&ps, 2, 4, &m, 0.1, 3).unwrap();
        assert_eq!(cb.heads[0].data(), again.heads[0].data());
    }

    #[test]
    fn registry_round_trip_and_binding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let ps = vec![proto(0, &[1.0, 2.0]), proto(2, &[-0.5, 0.25])];
        save_prototypes(&path, &ps).unwrap();
        let back = load_prototypes::<f64>(&path, &"00".repeat(32)).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].client_id, 2);
        assert_eq!(back[1].vector, ps[1].vector);
        assert!(matches!(
            load_prototypes::<f64>(&path, &"11".repeat(32)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn separation_rate_counts_token_collisions() {
        let cb = Codebook {
            heads: vec![Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()],
            projection: Tensor::identity(2),
            metric: crate::vqvae::Metric::Cosine,
        };
        let a = Tensor::from_f64(&[2, 2], &[1.0, 0.1, 0.2, 1.0]).unwrap();
        let b = Tensor::from_f64(&[2, 2], &[0.1, 1.0, 0.0, 2.0]).unwrap();
        // a → tokens {0, 1}, b → {1, 1}: 2 of 4 pairs collide.
        assert_eq!(separation_rate(&cb, &[a.clone(), b.clone()]), 0.5);
        assert_eq!(separation_rate(&cb, &[b, a]), 0.5);
    }

    #[test]
    fn identical_graphs_have_zero_distance_and_gap() {
        let m = model(3, 1, 2);
        let g = plain(4, &[(0, 1), (2, 3)], 3);
        let r = prototype_separation_study(&[("a".into(), g.clone()), ("b".into(), g)], 20, &m, 0).unwrap();
        assert_eq!(r.pairs[0].mean_sq_distance, 0.0);
        assert_eq!(r.pairs[0].feature_gap + r.pairs[0].adjacency_gap, 0.0);
        assert!(r.empirical_alpha.is_none());
    }

    #[test]
    fn too_few_trials_rejected() {
        let m = model(3, 1, 2);
        let g = plain(4, &[], 3);
        assert!(prototype_separation_study(&[("a".into(), g.clone()), ("b".into(), g)], 5, &m, 0).is_err());
    }
}

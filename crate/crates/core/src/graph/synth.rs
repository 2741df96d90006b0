use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{GraphCollection, Labels, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::rng::{self, STREAM_SYNTH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stochastic-block-model topology with class-conditioned Gaussian features.
///
/// Block `b` carries class `b % class_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub node_count: usize,
    pub block_sizes: Vec<usize>,
    pub p_intra: f64,
    pub p_inter: f64,
    pub class_count: usize,
    pub feature_dim: usize,
    /// `class_count` rows of length `feature_dim`.
    pub class_means: Vec<Vec<f64>>,
    /// Per-coordinate standard deviation of the feature noise.
    pub noise_scale: f64,
    pub domain_tag: String,
    pub seed: u64,
}

impl SyntheticDomainSpec {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.p_intra) || !prob(self.p_inter) {
            return Err(Error::Validation("edge probabilities must lie in [0, 1]".into()));
        }
        if self.block_sizes.iter().sum::<usize>() != self.node_count {
            return Err(Error::Validation(format!(
                "block sizes sum to {}, node_count is {}",
                self.block_sizes.iter().sum::<usize>(),
                self.node_count
            )));
        }
        if self.class_count == 0 || self.class_means.len() != self.class_count {
            return Err(Error::Validation(format!(
                "{} class means for {} classes",
                self.class_means.len(),
                self.class_count
            )));
        }
        if self.class_means.iter().any(|m| m.len() != self.feature_dim) {
            return Err(Error::Validation("class mean width differs from feature_dim".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Validation("noise_scale must be non-negative".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn block_of_each_node(&self) -> Vec<usize> {
        self.block_sizes
            .iter()
            .enumerate()
            .flat_map(|(b, &s)| std::iter::repeat(b).take(s))
            .collect()
    }
}

/// Features are rounded through `f32` so the graph survives a container
/// round trip bitwise.
pub fn synth_domain<S: Scalar>(spec: &SyntheticDomainSpec) -> Result<TextAttributedGraph<S>> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[STREAM_SYNTH]);
    let n = spec.node_count;
    let block = spec.block_of_each_node();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if block[i] == block[j] {
                spec.p_intra
            } else {
                spec.p_inter
            };
            // Draw unconditionally so the stream layout is independent of p.
            let u: f64 = rng.random();
            if u < p {
                edges.push((i, j));
            }
        }
    }
    let d = spec.feature_dim;
    let mut feats = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for &b in &block {
        let class = b % spec.class_count;
        labels.push(class as i32);
        let noise: Vec<f64> = rng::normal_vec(&mut rng, d, spec.noise_scale);
        for (mu, e) in spec.class_means[class].iter().zip(noise) {
            feats.push(S::from_f64_lossy((mu + e) as f32 as f64));
        }
    }
    TextAttributedGraph::new(
        n,
        edges,
        Tensor::matrix(n, d, feats)?,
        None,
        Labels::Node(labels),
        spec.class_count,
        spec.domain_tag.clone(),
    )
}

fn unit(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = rng::normal_vec(rng, d, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| x / n).collect()
}

/// A family of synthetic domains that share a common feature component
/// (as text-encoder features do) but differ in a domain direction, in their
/// class structure and in topology.
pub fn benchmark_domains(
    count: usize,
    nodes: usize,
    dim: usize,
    seed: u64,
) -> Vec<SyntheticDomainSpec> {
    let mut rng = rng::stream(seed, &[STREAM_SYNTH, u64::MAX]);
    let shared = unit(&mut rng, dim);
    // (blocks, p_intra, p_inter) per topology family.
    let topologies = [(3usize, 0.08, 0.004), (4, 0.03, 0.012), (2, 0.15, 0.02)];
    (0..count)
        .map(|k| {
            let domain = unit(&mut rng, dim);
            let (blocks, p_in, p_out) = topologies[k % topologies.len()];
            let class_means = (0..blocks)
                .map(|_| {
                    let class_dir = unit(&mut rng, dim);
                    (0..dim)
                        .map(|j| 1.0 * shared[j] + 0.8 * domain[j] + 0.6 * class_dir[j])
                        .collect()
                })
                .collect();
            let base = nodes / blocks;
            let mut block_sizes = vec![base; blocks];
            block_sizes[0] += nodes - base * blocks;
            SyntheticDomainSpec {
                node_count: nodes,
                block_sizes,
                p_intra: p_in,
                p_inter: p_out,
                class_count: blocks,
                feature_dim: dim,
                class_means,
                noise_scale: 1.0 / (dim as f64).sqrt(),
                domain_tag: format!("domain{k}"),
                seed: rng::derive_seed(seed, &[STREAM_SYNTH, k as u64]),
            }
        })
        .collect()
}

/// Generator for graph-level multi-task collections (molecule-like).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionSpec {
    pub graphs: usize,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub p_edge: f64,
    pub tasks: usize,
    pub feature_dim: usize,
    /// Probability that any single task label is missing.
    pub missing_rate: f64,
    pub domain_tag: String,
    pub seed: u64,
}

pub fn synth_collection<S: Scalar>(spec: &CollectionSpec) -> Result<GraphCollection<S>> {
    if spec.graphs == 0 || spec.min_nodes == 0 || spec.min_nodes > spec.max_nodes || spec.tasks == 0 {
        return Err(Error::Validation("collection spec needs graphs, nodes and tasks".into()));
    }
    let mut rng = rng::stream(spec.seed, &[STREAM_SYNTH, 1]);
    let d = spec.feature_dim;
    let class_dirs = [unit(&mut rng, d), unit(&mut rng, d)];
    let task_bias: Vec<f64> = (0..spec.tasks).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut graphs = Vec::with_capacity(spec.graphs);
    for _ in 0..spec.graphs {
        let n = rng.random_range(spec.min_nodes..=spec.max_nodes);
        let class = rng.random_range(0..2usize);
        let mut edges = Vec::new();
        // A path backbone keeps graphs connected, like molecules.
        for i in 1..n {
            edges.push((i - 1, i));
        }
        for i in 0..n {
            for j in (i + 2)..n {
                if rng.random::<f64>() < spec.p_edge {
                    edges.push((i, j));
                }
            }
        }
        let mut feats = Vec::with_capacity(n * d);
        for _ in 0..n {
            let noise: Vec<f64> = rng::normal_vec(&mut rng, d, 0.3 / (d as f64).sqrt());
            for (c, e) in class_dirs[class].iter().zip(noise) {
                feats.push(S::from_f64_lossy((c + e) as f32 as f64));
            }
        }
        let labels = task_bias
            .iter()
            .map(|&b| {
                if rng.random::<f64>() < spec.missing_rate {
                    f32::NAN
                } else {
                    let p = if class == 1 { 0.5 + 0.4 * b.abs() } else { 0.5 - 0.4 * b.abs() };
                    let p = if b < 0.0 { 1.0 - p } else { p };
                    (rng.random::<f64>() < p) as u8 as f32
                }
            })
            .collect();
        graphs.push(TextAttributedGraph::new(
            n,
            edges,
            Tensor::matrix(n, d, feats)?,
            None,
            Labels::Graph(labels),
            spec.tasks,
            spec.domain_tag.clone(),
        )?);
    }
    GraphCollection::new(graphs)
}

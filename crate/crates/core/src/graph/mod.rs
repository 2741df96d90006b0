//! Graph containers, ingestion, synthetic domains, decentralization and
//! splitting.

mod container;
mod louvain;
mod partition;
mod split;
mod synth;

pub use container::{load_collection, load_graph, save_collection, save_graph, Manifest};
pub use louvain::{louvain, modularity, LouvainResult};
pub use partition::{louvain_partition, random_allocate, PartitionAssignment, SubgraphSplit};
pub use split::{split, DataSplit, SplitRatios};
pub use synth::{benchmark_domains, synth_collection, synth_domain, CollectionSpec, SyntheticDomainSpec};

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::Neighbors;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelLevel {
    Node,
    Edge,
    Graph,
}

/// Supervision attached to a graph. Node and edge labels use `-1` for
/// unlabeled units; graph labels are a multi-task vector with NaN marking
/// missing targets.
#[derive(Debug, Clone)]
pub enum Labels {
    Node(Vec<i32>),
    Edge(Vec<i32>),
    Graph(Vec<f32>),
}

impl Labels {
    pub fn level(&self) -> LabelLevel {
        match self {
            Labels::Node(_) => LabelLevel::Node,
            Labels::Edge(_) => LabelLevel::Edge,
            Labels::Graph(_) => LabelLevel::Graph,
        }
    }

    fn bitwise_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Labels::Node(a), Labels::Node(b)) | (Labels::Edge(a), Labels::Edge(b)) => a == b,
            (Labels::Graph(a), Labels::Graph(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextAttributedGraph<S> {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    features: Tensor<S>,
    edge_features: Option<Tensor<S>>,
    labels: Labels,
    /// Class count for node/edge labels, task count for graph labels.
    arity: usize,
    domain_tag: String,
}

impl<S: Scalar> TextAttributedGraph<S> {
    pub fn new(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor<S>,
        edge_features: Option<Tensor<S>>,
        labels: Labels,
        arity: usize,
        domain_tag: impl Into<String>,
    ) -> Result<Self> {
        let g = Self {
            node_count,
            edges,
            features,
            edge_features,
            labels,
            arity,
            domain_tag: domain_tag.into(),
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        let n = self.node_count;
        if self.features.shape().len() != 2 || self.features.rows() != n {
            return Err(Error::Validation(format!(
                "feature matrix {:?} does not have {} rows",
                self.features.shape(),
                n
            )));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for (i, &(u, v)) in self.edges.iter().enumerate() {
            if u >= n || v >= n {
                return Err(Error::Validation(format!(
                    "edge {i} ({u},{v}) has an endpoint outside [0, {n})"
                )));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Validation(format!("duplicate edge ({u},{v})")));
            }
        }
        if let Some(ef) = &self.edge_features {
            if ef.rows() != self.edges.len() || ef.cols() != self.features.cols() {
                return Err(Error::Validation(format!(
                    "edge features {:?} do not match {} edges x d={}",
                    ef.shape(),
                    self.edges.len(),
                    self.features.cols()
                )));
            }
        }
        match &self.labels {
            Labels::Node(l) if l.len() != n => Err(Error::Validation(format!(
                "{} node labels for {n} nodes",
                l.len()
            ))),
            Labels::Edge(l) if l.len() != self.edges.len() => Err(Error::Validation(format!(
                "{} edge labels for {} edges",
                l.len(),
                self.edges.len()
            ))),
            Labels::Graph(l) if l.len() != self.arity => Err(Error::Validation(format!(
                "{} graph labels for {} tasks",
                l.len(),
                self.arity
            ))),
            Labels::Node(l) | Labels::Edge(l)
                if l.iter().any(|&c| c >= self.arity as i32 || c < -1) =>
            {
                Err(Error::Validation(format!(
                    "class label outside [-1, {})",
                    self.arity
                )))
            }
            _ => Ok(()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor<S> {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn edge_features(&self) -> Option<&Tensor<S>> {
        self.edge_features.as_ref()
    }

    pub fn labels(&self) -> &Labels {
        &self.labels
    }

    pub fn label_level(&self) -> LabelLevel {
        self.labels.level()
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    pub fn domain_tag(&self) -> &str {
        &self.domain_tag
    }

    pub fn with_features(&self, features: Tensor<S>) -> Result<Self> {
        let mut g = self.clone();
        g.features = features;
        g.validate()?;
        Ok(g)
    }

    pub fn neighbors(&self) -> Neighbors {
        Neighbors::from_undirected(self.node_count, &self.edges)
    }

    /// Dense symmetric 0/1 adjacency.
    pub fn dense_adjacency(&self) -> Tensor<S> {
        let n = self.node_count;
        let mut a = Tensor::zeros(&[n, n]);
        for &(u, v) in &self.edges {
            a.set(u, v, S::one());
            a.set(v, u, S::one());
        }
        a
    }

    /// Per-node mean of incident edge features (zero for isolated nodes).
    pub fn mean_incident_edge_features(&self) -> Option<Tensor<S>> {
        let ef = self.edge_features.as_ref()?;
        let d = ef.cols();
        let mut acc = vec![0.0f64; self.node_count * d];
        let mut deg = vec![0usize; self.node_count];
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            let ends: &[usize] = if u == v { &[u] } else { &[u, v] };
            for &x in ends {
                deg[x] += 1;
                for (o, &val) in acc[x * d..(x + 1) * d].iter_mut().zip(ef.row(e)) {
                    *o += val.f64();
                }
            }
        }
        let data = acc
            .chunks(d.max(1))
            .zip(&deg)
            .flat_map(|(row, &k)| {
                row.iter()
                    .map(move |&v| S::from_f64_lossy(if k == 0 { 0.0 } else { v / k as f64 }))
            })
            .collect();
        Tensor::matrix(self.node_count, d, data).ok()
    }

    /// Subgraph induced by `nodes` (in the given order). Edges leaving the
    /// set are dropped; the count of dropped edges is returned alongside.
    pub fn induced(&self, nodes: &[usize]) -> Result<(Self, usize)> {
        let mut remap = vec![usize::MAX; self.node_count];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= self.node_count || remap[old] != usize::MAX {
                return Err(Error::contract(format!("bad or repeated node {old} in induced set")));
            }
            remap[old] = new;
        }
        let mut edges = Vec::new();
        let mut kept = Vec::new();
        let mut dropped = 0;
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            let (nu, nv) = (remap[u], remap[v]);
            if nu != usize::MAX && nv != usize::MAX {
                edges.push((nu, nv));
                kept.push(e);
            } else if nu != usize::MAX || nv != usize::MAX {
                dropped += 1;
            }
        }
        let features = crate::tensor::kernels::gather_rows(&self.features, nodes)?;
        let edge_features = match &self.edge_features {
            Some(ef) => Some(crate::tensor::kernels::gather_rows(ef, &kept)?),
            None => None,
        };
        let labels = match &self.labels {
            Labels::Node(l) => Labels::Node(nodes.iter().map(|&i| l[i]).collect()),
            Labels::Edge(l) => Labels::Edge(kept.iter().map(|&e| l[e]).collect()),
            Labels::Graph(l) => Labels::Graph(l.clone()),
        };
        let g = Self::new(
            nodes.len(),
            edges,
            features,
            edge_features,
            labels,
            self.arity,
            self.domain_tag.clone(),
        )?;
        Ok((g, dropped))
    }

    /// Exact equality including float bit patterns.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.node_count == other.node_count
            && self.edges == other.edges
            && self.features.bitwise_eq(&other.features)
            && match (&self.edge_features, &other.edge_features) {
                (Some(a), Some(b)) => a.bitwise_eq(b),
                (None, None) => true,
                _ => false,
            }
            && self.labels.bitwise_eq(&other.labels)
            && self.arity == other.arity
            && self.domain_tag == other.domain_tag
    }
}

/// Undirected degree histogram.
pub fn degree_distribution<S: Scalar>(graph: &TextAttributedGraph<S>) -> BTreeMap<usize, usize> {
    let mut deg = vec![0usize; graph.node_count()];
    for &(u, v) in graph.edges() {
        deg[u] += 1;
        if u != v {
            deg[v] += 1;
        }
    }
    let mut hist = BTreeMap::new();
    for d in deg {
        *hist.entry(d).or_insert(0) += 1;
    }
    hist
}

/// A non-empty set of graphs sharing feature dimension and label arity.
#[derive(Debug, Clone)]
pub struct GraphCollection<S> {
    graphs: Vec<TextAttributedGraph<S>>,
}

impl<S: Scalar> GraphCollection<S> {
    pub fn new(graphs: Vec<TextAttributedGraph<S>>) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Validation("graph collection is empty".into()))?;
        let (d, arity, level) = (first.feature_dim(), first.arity(), first.label_level());
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != d || g.arity() != arity || g.label_level() != level {
                return Err(Error::Validation(format!(
                    "graph {i} differs in feature dimension, label arity or level"
                )));
            }
        }
        Ok(Self { graphs })
    }

    pub fn graphs(&self) -> &[TextAttributedGraph<S>] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.graphs[0].feature_dim()
    }

    pub fn arity(&self) -> usize {
        self.graphs[0].arity()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(idx.iter().map(|&i| self.graphs[i].clone()).collect())
    }

    pub fn total_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.node_count()).sum()
    }

    /// Block-diagonal union of all member graphs, with the node offset of
    /// each member. Graph-level labels are not carried over.
    pub fn disjoint_union(&self) -> Result<(TextAttributedGraph<S>, Vec<usize>)> {
        let d = self.feature_dim();
        let n = self.total_nodes();
        let mut offsets = Vec::with_capacity(self.graphs.len() + 1);
        let mut edges = Vec::new();
        let mut feats = Vec::with_capacity(n * d);
        let has_ef = self.graphs.iter().all(|g| g.edge_features().is_some());
        let mut efeats = Vec::new();
        let mut off = 0;
        for g in &self.graphs {
            offsets.push(off);
            edges.extend(g.edges().iter().map(|&(u, v)| (u + off, v + off)));
            feats.extend_from_slice(g.features().data());
            if has_ef {
                if let Some(ef) = g.edge_features() {
                    efeats.extend_from_slice(ef.data());
                }
            }
            off += g.node_count();
        }
        offsets.push(off);
        let m = edges.len();
        let union = TextAttributedGraph::new(
            n,
            edges,
            Tensor::matrix(n, d, feats)?,
            if has_ef {
                Some(Tensor::matrix(m, d, efeats)?)
            } else {
                None
            },
            Labels::Node(vec![-1; n]),
            self.arity().max(1),
            self.graphs[0].domain_tag().to_string(),
        )?;
        Ok((union, offsets))
    }
}

/// The graph data one client holds: a single subgraph, or a set of graphs.
#[derive(Debug, Clone)]
pub enum ClientData<S> {
    Subgraph(TextAttributedGraph<S>),
    Collection(GraphCollection<S>),
}

impl<S: Scalar> ClientData<S> {
    /// Training-instance count used to weight aggregation (node count).
    pub fn node_count(&self) -> usize {
        match self {
            ClientData::Subgraph(g) => g.node_count(),
            ClientData::Collection(c) => c.total_nodes(),
        }
    }

    pub fn graph_count(&self) -> usize {
        match self {
            ClientData::Subgraph(_) => 1,
            ClientData::Collection(c) => c.len(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            ClientData::Subgraph(g) => g.feature_dim(),
            ClientData::Collection(c) => c.feature_dim(),
        }
    }

    pub fn domain_tag(&self) -> &str {
        match self {
            ClientData::Subgraph(g) => g.domain_tag(),
            ClientData::Collection(c) => c.graphs()[0].domain_tag(),
        }
    }

    /// The graph the encoder sees: the subgraph itself or the disjoint union.
    pub fn training_graph(&self) -> Result<Arc<TextAttributedGraph<S>>> {
        match self {
            ClientData::Subgraph(g) => Ok(Arc::new(g.clone())),
            ClientData::Collection(c) => Ok(Arc::new(c.disjoint_union()?.0)),
        }
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;

    /// Graph with zero features of width `d` over the given edges.
    pub fn plain(n: usize, edges: &[(usize, usize)], d: usize) -> TextAttributedGraph<f64> {
        TextAttributedGraph::new(
            n,
            edges.to_vec(),
            Tensor::zeros(&[n, d]),
            None,
            Labels::Node(vec![0; n]),
            1,
            "test",
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::testing::plain;
    use super::*;

    #[test]
    fn degree_histograms() {
        let p3 = plain(3, &[(0, 1), (1, 2)], 1);
        assert_eq!(degree_distribution(&p3), BTreeMap::from([(1, 2), (2, 1)]));
        let empty = plain(4, &[], 1);
        assert_eq!(degree_distribution(&empty), BTreeMap::from([(0, 4)]));
        let star = plain(5, &[(0, 1), (0, 2), (0, 3), (0, 4)], 1);
        assert_eq!(degree_distribution(&star), BTreeMap::from([(1, 4), (4, 1)]));
    }

    #[test]
    fn dangling_and_duplicate_edges_rejected() {
        let f = Tensor::<f64>::zeros(&[3, 2]);
        let bad = TextAttributedGraph::new(3, vec![(5, 0)], f.clone(), None, Labels::Node(vec![0; 3]), 1, "x");
        assert!(matches!(bad, Err(Error::Validation(_))));
        let dup = TextAttributedGraph::new(3, vec![(0, 1), (1, 0)], f, None, Labels::Node(vec![0; 3]), 1, "x");
        assert!(matches!(dup, Err(Error::Validation(_))));
    }

    #[test]
    fn induced_subgraph_accounts_for_every_edge() {
        let g = plain(4, &[(0, 1), (1, 2), (2, 3), (0, 3)], 2);
        let (a, da) = g.induced(&[0, 1]).unwrap();
        let (b, db) = g.induced(&[2, 3]).unwrap();
        assert_eq!(a.edge_count() + b.edge_count(), 2);
        // Each cross edge is seen from both sides.
        assert_eq!(da, 2);
        assert_eq!(db, 2);
    }

    #[test]
    fn mean_incident_edge_features_averages() {
        let ef = Tensor::from_f64(&[2, 1], &[2.0, 4.0]).unwrap();
        let g = TextAttributedGraph::new(
            3,
            vec![(0, 1), (0, 2)],
            Tensor::<f64>::zeros(&[3, 1]),
            Some(ef),
            Labels::Node(vec![0; 3]),
            1,
            "x",
        )
        .unwrap();
        let m = g.mean_incident_edge_features().unwrap();
        assert_eq!(m.data(), &[3.0, 2.0, 4.0]);
    }
}

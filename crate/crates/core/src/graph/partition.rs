use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{louvain, GraphCollection, TextAttributedGraph};
use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Maps each element (node or graph index) to a client in `0..client_count`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionAssignment {
    pub client_count: usize,
    pub assignment: Vec<usize>,
}

impl PartitionAssignment {
    pub fn new(client_count: usize, assignment: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; client_count];
        for &c in &assignment {
            if c >= client_count {
                return Err(Error::contract(format!("client id {c} out of {client_count}")));
            }
            seen[c] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(Error::contract(format!("client {empty} received no elements")));
        }
        Ok(Self {
            client_count,
            assignment,
        })
    }

    pub fn members(&self, client: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == client)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.client_count];
        for &c in &self.assignment {
            s[c] += 1;
        }
        s
    }
}

/// Client subgraphs induced from a node partition.
#[derive(Debug, Clone)]
pub struct SubgraphSplit<S> {
    pub assignment: PartitionAssignment,
    pub clients: Vec<TextAttributedGraph<S>>,
    /// Edges whose endpoints landed on different clients.
    pub dropped_edges: usize,
    pub community_count: usize,
}

/// Louvain communities, packed into `k` clients: communities sorted by
/// size (descending, ties by id) each go to the currently smallest client.
/// When Louvain finds fewer than `k` communities the largest is halved
/// until there are enough.
pub fn louvain_partition<S: Scalar>(
    graph: &TextAttributedGraph<S>,
    k: usize,
    seed: u64,
) -> Result<SubgraphSplit<S>> {
    let n = graph.node_count();
    if k == 0 || k > n {
        return Err(Error::contract(format!(
            "client count {k} must be in [1, {n}] for a {n}-node graph"
        )));
    }
    let result = louvain(n, graph.edges(), seed);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); result.community_count];
    for (i, &c) in result.communities.iter().enumerate() {
        groups[c].push(i);
    }
    while groups.len() < k {
        let (idx, _) = groups
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.len().cmp(&b.1.len()).then(b.0.cmp(&a.0)))
            .expect("at least one community");
        let g = groups.swap_remove(idx);
        let (lo, hi) = g.split_at(g.len() / 2);
        groups.push(lo.to_vec());
        groups.push(hi.to_vec());
    }
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        groups[b]
            .len()
            .cmp(&groups[a].len())
            .then(groups[a][0].cmp(&groups[b][0]))
    });
    let mut load = vec![0usize; k];
    let mut assignment = vec![0usize; n];
    for g in order {
        let client = (0..k).min_by_key(|&c| (load[c], c)).expect("k >= 1");
        load[client] += groups[g].len();
        for &i in &groups[g] {
            assignment[i] = client;
        }
    }
    let assignment = PartitionAssignment::new(k, assignment)?;
    let mut clients = Vec::with_capacity(k);
    let mut kept = 0;
    for c in 0..k {
        let (sub, _) = graph.induced(&assignment.members(c))?;
        kept += sub.edge_count();
        clients.push(sub);
    }
    Ok(SubgraphSplit {
        assignment,
        clients,
        dropped_edges: graph.edge_count() - kept,
        community_count: result.community_count,
    })
}

/// Uniform shuffle, then near-equal contiguous chunks (the first
/// `len % k` clients get one extra).
pub fn random_allocate<S: Scalar>(
    collection: &GraphCollection<S>,
    k: usize,
    seed: u64,
) -> Result<(PartitionAssignment, Vec<GraphCollection<S>>)> {
    let len = collection.len();
    if k == 0 || len < k {
        return Err(Error::contract(format!(
            "cannot allocate {len} graphs to {k} clients"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::STREAM_SPLIT, 0xa110c]));
    let (base, extra) = (len / k, len % k);
    let mut assignment = vec![0usize; len];
    let mut start = 0;
    let mut parts = Vec::with_capacity(k);
    for c in 0..k {
        let size = base + usize::from(c < extra);
        let mut chunk = idx[start..start + size].to_vec();
        chunk.sort_unstable();
        for &i in &chunk {
            assignment[i] = c;
        }
        parts.push(collection.subset(&chunk)?);
        start += size;
    }
    Ok((PartitionAssignment::new(k, assignment)?, parts))
}

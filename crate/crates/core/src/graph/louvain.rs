//! Louvain community detection (resolution 1): greedy node moves followed by
//! community aggregation, repeated until a level makes no move.

use rand::seq::SliceRandom;

use crate::rng;

const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LouvainResult {
    /// Community id per original node, compacted to `0..community_count`
    /// in order of first appearance.
    pub communities: Vec<usize>,
    pub community_count: usize,
    pub modularity: f64,
    /// Modularity of the original-graph partition after every node-move
    /// sweep, across all levels.
    pub sweep_modularity: Vec<f64>,
}

/// Weighted graph at one aggregation level.
struct Level {
    /// Off-diagonal neighbours with weights, each pair listed from both ends.
    adj: Vec<Vec<(usize, f64)>>,
    /// Diagonal entry `A_ii`.
    self_w: Vec<f64>,
    degree: Vec<f64>,
    two_m: f64,
}

impl Level {
    fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut adj = vec![Vec::new(); n];
        let mut self_w = vec![0.0; n];
        for &(u, v) in edges {
            if u == v {
                // A self-loop contributes 2 to A_ii under the k_i = Σ_j A_ij convention.
                self_w[u] += 2.0;
            } else {
                adj[u].push((v, 1.0));
                adj[v].push((u, 1.0));
            }
        }
        Self::finish(adj, self_w)
    }

    fn finish(adj: Vec<Vec<(usize, f64)>>, self_w: Vec<f64>) -> Self {
        let degree: Vec<f64> = adj
            .iter()
            .zip(&self_w)
            .map(|(a, &s)| a.iter().map(|&(_, w)| w).sum::<f64>() + s)
            .collect();
        let two_m = degree.iter().sum();
        Self {
            adj,
            self_w,
            degree,
            two_m,
        }
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, comm: &[usize]) -> f64 {
        if self.two_m == 0.0 {
            return 0.0;
        }
        let k = comm.iter().copied().max().map_or(0, |m| m + 1);
        let mut inside = vec![0.0; k];
        let mut tot = vec![0.0; k];
        for i in 0..self.len() {
            let c = comm[i];
            tot[c] += self.degree[i];
            inside[c] += self.self_w[i];
            for &(j, w) in &self.adj[i] {
                if comm[j] == c {
                    inside[c] += w;
                }
            }
        }
        inside
            .iter()
            .zip(&tot)
            .map(|(&a, &t)| a / self.two_m - (t / self.two_m).powi(2))
            .sum()
    }

    /// Sweeps of greedy moves until one sweep moves nothing. Returns the
    /// partition and whether any node moved at all.
    fn local_moves(&self, order: &[usize], mut on_sweep: impl FnMut(&[usize])) -> (Vec<usize>, bool) {
        let n = self.len();
        let mut comm: Vec<usize> = (0..n).collect();
        let mut tot = self.degree.clone();
        let mut moved_any = false;
        if self.two_m == 0.0 {
            return (comm, false);
        }
        let mut link = vec![0.0f64; n];
        let mut touched: Vec<usize> = Vec::new();
        loop {
            let mut moved = false;
            for &i in order {
                let ci = comm[i];
                let ki = self.degree[i];
                tot[ci] -= ki;
                for &(j, w) in &self.adj[i] {
                    let cj = comm[j];
                    if link[cj] == 0.0 && !touched.contains(&cj) {
                        touched.push(cj);
                    }
                    link[cj] += w;
                }
                let gain = |c: usize, link_c: f64| link_c - tot[c] * ki / self.two_m;
                let mut best = ci;
                let mut best_gain = gain(ci, link[ci]);
                touched.sort_unstable();
                for &c in &touched {
                    let g = gain(c, link[c]);
                    if g > best_gain + GAIN_EPS {
                        best = c;
                        best_gain = g;
                    }
                }
                for &c in &touched {
                    link[c] = 0.0;
                }
                touched.clear();
                tot[best] += ki;
                if best != ci {
                    comm[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            on_sweep(&comm);
            if !moved {
                break;
            }
        }
        (comm, moved_any)
    }

    fn aggregate(&self, comm: &[usize]) -> (Self, Vec<usize>) {
        let compact = compact(comm);
        let k = compact.iter().copied().max().map_or(0, |m| m + 1);
        let mut self_w = vec![0.0; k];
        let mut maps: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); k];
        for i in 0..self.len() {
            let ci = compact[i];
            self_w[ci] += self.self_w[i];
            for &(j, w) in &self.adj[i] {
                let cj = compact[j];
                if ci == cj {
                    self_w[ci] += w;
                } else {
                    *maps[ci].entry(cj).or_insert(0.0) += w;
                }
            }
        }
        let adj = maps.into_iter().map(|m| m.into_iter().collect()).collect();
        (Self::finish(adj, self_w), compact)
    }
}

fn compact(comm: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    comm.iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Modularity of `communities` on an undirected, unweighted edge list.
pub fn modularity(n: usize, edges: &[(usize, usize)], communities: &[usize]) -> f64 {
    Level::from_edges(n, edges).modularity(&compact(communities))
}

/// Louvain with the node visiting order shuffled by `seed`.
pub fn louvain(n: usize, edges: &[(usize, usize)], seed: u64) -> LouvainResult {
    let mut level = Level::from_edges(n, edges);
    let mut membership: Vec<usize> = (0..n).collect();
    let mut sweep_modularity = Vec::new();
    let mut depth = 0u64;
    loop {
        let mut order: Vec<usize> = (0..level.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[depth]));
        let (comm, moved) = level.local_moves(&order, |c| sweep_modularity.push(level.modularity(c)));
        if !moved {
            break;
        }
        let (next, compacted) = level.aggregate(&comm);
        for m in membership.iter_mut() {
            *m = compacted[*m];
        }
        level = next;
        depth += 1;
    }
    let communities = compact(&membership);
    let community_count = communities.iter().copied().max().map_or(0, |m| m + 1);
    LouvainResult {
        modularity: modularity(n, edges, &communities),
        communities,
        community_count,
        sweep_modularity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clique(offset: usize, k: usize) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                e.push((offset + i, offset + j));
            }
        }
        e
    }

    /// Best modularity over every set partition of `n` nodes.
    fn exhaustive_best(n: usize, edges: &[(usize, usize)]) -> (f64, Vec<usize>) {
        fn rec(
            i: usize,
            n: usize,
            cur: &mut Vec<usize>,
            used: usize,
            edges: &[(usize, usize)],
            best: &mut (f64, Vec<usize>),
        ) {
            if i == n {
                let q = modularity(n, edges, cur);
                if q > best.0 + 1e-12 {
                    *best = (q, cur.clone());
                }
                return;
            }
            for c in 0..=used {
                cur.push(c);
                rec(i + 1, n, cur, used.max(c + 1), edges, best);
                cur.pop();
            }
        }
        let mut best = (f64::NEG_INFINITY, Vec::new());
        rec(0, n, &mut Vec::new(), 0, edges, &mut best);
        best
    }

    #[test]
    fn two_cliques_match_exhaustive_optimum() {
        let mut edges = clique(0, 5);
        edges.extend(clique(5, 5));
        edges.push((4, 5));
        let r = louvain(10, &edges, 0);
        assert_eq!(r.community_count, 2);
        assert!(r.communities[..5].iter().all(|&c| c == r.communities[0]));
        assert!(r.communities[5..].iter().all(|&c| c == r.communities[5]));
        // Restricted to 2-partitions the optimum is also the clique split.
        let mut best = (f64::NEG_INFINITY, 0u32);
        for mask in 1u32..(1 << 10) - 1 {
            let comm: Vec<usize> = (0..10).map(|i| ((mask >> i) & 1) as usize).collect();
            let q = modularity(10, &edges, &comm);
            if q > best.0 {
                best = (q, mask);
            }
        }
        assert!(best.1 == 0b11111_00000 || best.1 == 0b00000_11111);
        assert!((r.modularity - best.0).abs() < 1e-12);
    }

    #[test]
    fn complete_graph_is_one_community() {
        let edges = clique(0, 4);
        let (q, part) = exhaustive_best(4, &edges);
        assert!(part.iter().all(|&c| c == 0));
        assert!(q.abs() < 1e-12);
        let r = louvain(4, &edges, 3);
        assert_eq!(r.community_count, 1);
    }

    #[test]
    fn sweeps_never_decrease_modularity() {
        let mut edges = clique(0, 6);
        edges.extend(clique(6, 4));
        edges.extend([(0, 7), (3, 9), (10, 11), (11, 12)]);
        let r = louvain(13, &edges, 5);
        for w in r.sweep_modularity.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "{:?}", r.sweep_modularity);
        }
    }

    #[test]
    fn edgeless_graph_keeps_singletons() {
        let r = louvain(3, &[], 0);
        assert_eq!(r.community_count, 3);
        assert_eq!(r.modularity, 0.0);
    }
}

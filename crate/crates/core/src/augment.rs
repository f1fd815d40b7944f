//! h-hop structure augmentation.
//!
//! A user-item pair joins the augmented edge set when a walk of length at most
//! `h` links them in the graph with self-loops on every node. In a bipartite
//! graph that means an odd-length walk `1, 3, ... <= h`, so reachability is
//! found by alternating sparse frontier expansions instead of matrix powers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Pair;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;

/// Per-node bound on the number of augmented (non-original) edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentCap {
    Unbounded,
    PerNode(usize),
    /// `ceil(multiple * degree)` augmented edges for each node.
    DegreeMultiple(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedGraph {
    pub graph: BipartiteGraph,
    pub hops: usize,
    /// True for edges of the input graph, false for added ones.
    pub original: Vec<bool>,
    /// Number of walks of odd length `<= hops` joining the endpoints.
    pub covisits: Vec<u64>,
}

impl AugmentedGraph {
    pub fn num_augmented(&self) -> usize {
        self.original.iter().filter(|o| !**o).count()
    }
}

/// Walk total over all endpoints of length-3 walks from each user, capped at J.
/// Upper bound on the number of pairs reachable within three hops.
pub fn estimate_augmented_edges(g: &BipartiteGraph, hops: usize) -> u64 {
    if hops < 3 {
        return g.num_edges() as u64;
    }
    let item_reach: Vec<u64> = (0..g.num_items())
        .map(|v| g.item_edges(v).iter().map(|&e| g.user_degree(g.edge(e as usize).0 as usize) as u64).sum())
        .collect();
    (0..g.num_users())
        .map(|u| {
            let walks: u64 = g.user_items(u).iter().map(|&v| item_reach[v as usize]).sum();
            walks.min(g.num_items() as u64)
        })
        .sum()
}

/// Items reachable from `u` with their walk counts, items ascending.
fn reach_from_user(g: &BipartiteGraph, u: usize, hops: usize) -> Vec<(u32, u64)> {
    let mut total = vec![0u64; g.num_items()];
    let mut touched: Vec<u32> = Vec::new();
    let mut frontier: Vec<(u32, u64)> = g.user_items(u).iter().map(|&v| (v, 1)).collect();
    let mut user_acc = vec![0u64; g.num_users()];
    let mut item_acc = vec![0u64; g.num_items()];
    let mut length = 1;
    loop {
        for &(v, c) in &frontier {
            if total[v as usize] == 0 {
                touched.push(v);
            }
            total[v as usize] = total[v as usize].saturating_add(c);
        }
        if length + 2 > hops {
            break;
        }
        // item -> user -> item
        let mut users = Vec::new();
        for &(v, c) in &frontier {
            for &e in g.item_edges(v as usize) {
                let w = g.edge(e as usize).0 as usize;
                if user_acc[w] == 0 {
                    users.push(w);
                }
                user_acc[w] = user_acc[w].saturating_add(c);
            }
        }
        let mut next = Vec::new();
        for &w in &users {
            let c = std::mem::take(&mut user_acc[w]);
            for &v in g.user_items(w) {
                if item_acc[v as usize] == 0 {
                    next.push(v);
                }
                item_acc[v as usize] = item_acc[v as usize].saturating_add(c);
            }
        }
        frontier = next.into_iter().map(|v| (v, std::mem::take(&mut item_acc[v as usize]))).collect();
        length += 2;
    }
    touched.sort_unstable();
    touched.into_iter().map(|v| (v, total[v as usize])).collect()
}

fn node_cap(cap: AugmentCap, degree: usize) -> usize {
    match cap {
        AugmentCap::Unbounded => usize::MAX,
        AugmentCap::PerNode(n) => n,
        AugmentCap::DegreeMultiple(m) => (m * degree as f64).ceil() as usize,
    }
}

/// Builds the augmented graph over pairs reachable within `hops` hops.
///
/// With a cap, each node nominates its top augmented edges by co-visit count
/// (ties to the lower index); an augmented edge survives when either endpoint
/// nominates it. Original edges are always kept.
pub fn augment_graph(g: &BipartiteGraph, hops: usize, cap: AugmentCap, budget: u64) -> Result<AugmentedGraph> {
    if hops < 1 {
        return Err(Error::InvalidArgument("augmentation needs h >= 1".into()));
    }
    if cap == AugmentCap::Unbounded {
        let estimated = estimate_augmented_edges(g, hops);
        if estimated > budget {
            return Err(Error::AugmentationBudget { estimated, budget });
        }
    }

    let per_user: Vec<Vec<(u32, u64)>> = (0..g.num_users())
        .into_par_iter()
        .map(|u| reach_from_user(g, u, hops))
        .collect();

    // (user, item, count, original)
    let mut candidates: Vec<(u32, u32, u64, bool)> = Vec::new();
    for (u, reach) in per_user.iter().enumerate() {
        for &(v, c) in reach {
            candidates.push((u as u32, v, c, g.has_edge(u, v as usize)));
        }
    }

    let keep: Vec<bool> = if cap == AugmentCap::Unbounded {
        vec![true; candidates.len()]
    } else {
        let mut keep: Vec<bool> = candidates.iter().map(|c| c.3).collect();
        // user side: candidates are grouped by user, items ascending
        let mut start = 0;
        while start < candidates.len() {
            let u = candidates[start].0;
            let end = start + candidates[start..].iter().take_while(|c| c.0 == u).count();
            let mut aug: Vec<usize> = (start..end).filter(|&k| !candidates[k].3).collect();
            aug.sort_by(|&a, &b| candidates[b].2.cmp(&candidates[a].2).then(candidates[a].1.cmp(&candidates[b].1)));
            for &k in aug.iter().take(node_cap(cap, g.user_degree(u as usize))) {
                keep[k] = true;
            }
            start = end;
        }
        let mut by_item: Vec<Vec<usize>> = vec![Vec::new(); g.num_items()];
        for (k, c) in candidates.iter().enumerate() {
            if !c.3 {
                by_item[c.1 as usize].push(k);
            }
        }
        for (v, mut list) in by_item.into_iter().enumerate() {
            list.sort_by(|&a, &b| candidates[b].2.cmp(&candidates[a].2).then(candidates[a].0.cmp(&candidates[b].0)));
            for &k in list.iter().take(node_cap(cap, g.item_degree(v))) {
                keep[k] = true;
            }
        }
        keep
    };

    let kept: Vec<&(u32, u32, u64, bool)> = candidates.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| c).collect();
    let pairs: Vec<Pair> = kept.iter().map(|c| (c.0, c.1)).collect();
    let graph = BipartiteGraph::from_edges(g.num_users(), g.num_items(), &pairs)?;
    // candidates are already (user, item) sorted, so edge order matches `kept`
    let original = kept.iter().map(|c| c.3).collect();
    let covisits = kept.iter().map(|c| c.2).collect();
    let ones = vec![1.0; graph.num_edges()];
    Ok(AugmentedGraph {
        graph: graph.with_weights(ones)?,
        hops,
        original,
        covisits,
    })
}

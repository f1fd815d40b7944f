//! Bipartite user-item graph in compressed sparse layout.
//!
//! Edges are stored once, sorted by `(user, item)`; the edge index is the
//! position in that order and is shared by the user-major (CSR) and the
//! item-major (transpose) views, so per-edge arrays line up with both.

use crate::data::{InteractionDataset, Pair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BipartiteGraph {
    num_users: usize,
    num_items: usize,
    user_ptr: Vec<usize>,
    edge_user: Vec<u32>,
    edge_item: Vec<u32>,
    item_ptr: Vec<usize>,
    item_edges: Vec<u32>,
    user_degree: Vec<u32>,
    item_degree: Vec<u32>,
    norm: Vec<f64>,
    weights: Option<Vec<f64>>,
}

impl BipartiteGraph {
    /// Builds a graph from (user, item) pairs; duplicates are merged.
    pub fn from_edges(num_users: usize, num_items: usize, edges: &[Pair]) -> Result<Self> {
        let mut sorted = edges.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&(u, v)) = sorted
            .iter()
            .find(|&&(u, v)| u as usize >= num_users || v as usize >= num_items)
        {
            return Err(Error::InvalidArgument(format!(
                "edge ({u}, {v}) outside {num_users}x{num_items}"
            )));
        }
        Ok(Self::from_sorted(num_users, num_items, sorted, None))
    }

    fn from_sorted(num_users: usize, num_items: usize, sorted: Vec<Pair>, weights: Option<Vec<f64>>) -> Self {
        let m = sorted.len();
        let mut user_degree = vec![0u32; num_users];
        let mut item_degree = vec![0u32; num_items];
        for &(u, v) in &sorted {
            user_degree[u as usize] += 1;
            item_degree[v as usize] += 1;
        }
        let mut user_ptr = Vec::with_capacity(num_users + 1);
        user_ptr.push(0);
        for &d in &user_degree {
            user_ptr.push(user_ptr.last().unwrap() + d as usize);
        }
        let mut item_ptr = Vec::with_capacity(num_items + 1);
        item_ptr.push(0);
        for &d in &item_degree {
            item_ptr.push(item_ptr.last().unwrap() + d as usize);
        }
        // counting sort of edge ids by item keeps users ascending within each item
        let mut cursor = item_ptr[..num_items].to_vec();
        let mut item_edges = vec![0u32; m];
        for (e, &(_, v)) in sorted.iter().enumerate() {
            item_edges[cursor[v as usize]] = e as u32;
            cursor[v as usize] += 1;
        }
        let norm = sorted
            .iter()
            .map(|&(u, v)| 1.0 / ((user_degree[u as usize] as f64) * (item_degree[v as usize] as f64)).sqrt())
            .collect();
        let (edge_user, edge_item) = sorted.into_iter().unzip();
        BipartiteGraph {
            num_users,
            num_items,
            user_ptr,
            edge_user,
            edge_item,
            item_ptr,
            item_edges,
            user_degree,
            item_degree,
            norm,
            weights,
        }
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    /// Number of undirected user-item edges. Each one stands for two directed edges.
    pub fn num_edges(&self) -> usize {
        self.edge_user.len()
    }

    pub fn edge(&self, e: usize) -> Pair {
        (self.edge_user[e], self.edge_item[e])
    }

    pub fn edges(&self) -> impl ExactSizeIterator<Item = Pair> + '_ {
        self.edge_user.iter().copied().zip(self.edge_item.iter().copied())
    }

    pub fn edge_list(&self) -> Vec<Pair> {
        self.edges().collect()
    }

    /// Edge ids `start..end` of user `u`, items ascending.
    pub fn user_edges(&self, u: usize) -> std::ops::Range<usize> {
        self.user_ptr[u]..self.user_ptr[u + 1]
    }

    pub fn user_items(&self, u: usize) -> &[u32] {
        &self.edge_item[self.user_edges(u)]
    }

    /// Edge ids incident to item `v`, users ascending.
    pub fn item_edges(&self, v: usize) -> &[u32] {
        &self.item_edges[self.item_ptr[v]..self.item_ptr[v + 1]]
    }

    pub fn edge_items(&self) -> &[u32] {
        &self.edge_item
    }

    pub fn edge_users(&self) -> &[u32] {
        &self.edge_user
    }

    pub fn user_degree(&self, u: usize) -> usize {
        self.user_degree[u] as usize
    }

    pub fn item_degree(&self, v: usize) -> usize {
        self.item_degree[v] as usize
    }

    pub fn user_degrees(&self) -> &[u32] {
        &self.user_degree
    }

    pub fn item_degrees(&self) -> &[u32] {
        &self.item_degree
    }

    /// Laplacian coefficients `1/sqrt(d_u d_v)` per edge.
    pub fn norm(&self) -> &[f64] {
        &self.norm
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn find_edge(&self, u: usize, v: usize) -> Option<usize> {
        let range = self.user_edges(u);
        self.edge_item[range.clone()]
            .binary_search(&(v as u32))
            .ok()
            .map(|off| range.start + off)
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.find_edge(u, v).is_some()
    }

    /// Attaches a per-edge weight array (edge order).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.num_edges() {
            return Err(Error::Shape(format!(
                "edge weights have length {}, graph has {} edges",
                weights.len(),
                self.num_edges()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite edge weight {w}")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    /// Keeps the edges flagged in `keep` (both directions at once) and
    /// recomputes degrees and normalization from the survivors.
    pub fn retain_edges(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.num_edges() {
            return Err(Error::Shape(format!(
                "keep mask has length {}, graph has {} edges",
                keep.len(),
                self.num_edges()
            )));
        }
        let sorted: Vec<Pair> = self.edges().zip(keep).filter(|(_, &k)| k).map(|(p, _)| p).collect();
        let weights = self.weights.as_ref().map(|w| {
            w.iter().zip(keep).filter(|(_, &k)| k).map(|(&x, _)| x).collect()
        });
        Ok(Self::from_sorted(self.num_users, self.num_items, sorted, weights))
    }

    /// Item-side view as an item-by-user graph; applying it twice gives back the input.
    pub fn transpose(&self) -> BipartiteGraph {
        let mut flipped: Vec<(Pair, f64)> = self
            .edges()
            .enumerate()
            .map(|(e, (u, v))| ((v, u), self.weights.as_ref().map_or(0.0, |w| w[e])))
            .collect();
        flipped.sort_by_key(|(p, _)| *p);
        let weights = self.weights.as_ref().map(|_| flipped.iter().map(|(_, w)| *w).collect());
        let sorted = flipped.into_iter().map(|(p, _)| p).collect();
        Self::from_sorted(self.num_items, self.num_users, sorted, weights)
    }

    /// Number of users or items without any edge.
    pub fn isolated_nodes(&self) -> usize {
        self.user_degree.iter().chain(&self.item_degree).filter(|&&d| d == 0).count()
    }
}

/// Builds the propagation graph from the training split, edge weights all one.
pub fn build_graph(ds: &InteractionDataset) -> Result<BipartiteGraph> {
    if ds.train.is_empty() {
        return Err(Error::InvalidArgument("cannot build a graph from an empty training split".into()));
    }
    let g = BipartiteGraph::from_edges(ds.num_users, ds.num_items, &ds.train)?;
    let ones = vec![1.0; g.num_edges()];
    g.with_weights(ones)
}

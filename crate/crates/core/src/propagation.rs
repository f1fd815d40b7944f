//! Sparse message passing over the bipartite graph and its hand-written adjoint.
//!
//! Two forward variants are kept separate:
//!
//! * plain (teacher): `E_U[l] = Â E_V[l-1]`, `E_V[l] = Âᵀ E_U[l-1]` with
//!   `Â = D_U^{-1/2} A D_V^{-1/2}`;
//! * weighted (intermediate and student): `E_U[l] = Â_W E_V[l-1] + E_U[l-1]`
//!   with `Â_W = D_U^{-1/2} (A ⊙ W) D_V^{-1/2}`, and the transpose for items.
//!
//! Both sum layers `0..=L` into the final embeddings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::matrix::{axpy, dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Plain,
    Weighted,
}

impl Variant {
    fn residual(self) -> bool {
        matches!(self, Variant::Weighted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOutput {
    /// `user_layers[l]` is `E_U[l]`, `l = 0..=L`.
    pub user_layers: Vec<Matrix>,
    pub item_layers: Vec<Matrix>,
    pub users: Matrix,
    pub items: Matrix,
}

impl PropagationOutput {
    pub fn layers(&self) -> usize {
        self.user_layers.len() - 1
    }
}

fn check_shapes(g: &BipartiteGraph, emb: &EmbeddingTable) -> Result<()> {
    if g.num_users() != emb.num_users() || g.num_items() != emb.num_items() {
        return Err(Error::Shape(format!(
            "graph is {}x{}, embedding table is {}x{}",
            g.num_users(),
            g.num_items(),
            emb.num_users(),
            emb.num_items()
        )));
    }
    Ok(())
}

fn coefficients(g: &BipartiteGraph, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(g.norm().to_vec()),
        Some(w) if w.len() == g.num_edges() => Ok(g.norm().iter().zip(w).map(|(n, w)| n * w).collect()),
        Some(w) => Err(Error::Shape(format!(
            "{} edge weights for {} edges",
            w.len(),
            g.num_edges()
        ))),
    }
}

/// `out[u] = Σ_e coef[e] * src[item(e)]` over user rows (plus `keep` when residual).
fn user_step(g: &BipartiteGraph, coef: &[f64], src_items: &Matrix, keep: Option<&Matrix>, out: &mut Matrix) {
    let items = g.edge_items();
    for_each_row(out, |u, row| {
        match keep {
            Some(k) => row.copy_from_slice(k.row(u)),
            None => row.fill(0.0),
        }
        for e in g.user_edges(u) {
            axpy(coef[e], src_items.row(items[e] as usize), row);
        }
    });
}

fn item_step(g: &BipartiteGraph, coef: &[f64], src_users: &Matrix, keep: Option<&Matrix>, out: &mut Matrix) {
    let users = g.edge_users();
    for_each_row(out, |v, row| {
        match keep {
            Some(k) => row.copy_from_slice(k.row(v)),
            None => row.fill(0.0),
        }
        for &e in g.item_edges(v) {
            let e = e as usize;
            axpy(coef[e], src_users.row(users[e] as usize), row);
        }
    });
}

/// Row-parallel map; each row's arithmetic stays sequential, so results do not
/// depend on the thread count.
fn for_each_row<F>(m: &mut Matrix, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    let cols = m.cols().max(1);
    m.as_mut_slice()
        .par_chunks_mut(cols)
        .enumerate()
        .with_min_len(64)
        .for_each(|(r, row)| f(r, row));
}

fn propagate(
    g: &BipartiteGraph,
    coef: &[f64],
    variant: Variant,
    emb: &EmbeddingTable,
    layers: usize,
) -> PropagationOutput {
    let d = emb.dim();
    let mut user_layers = vec![emb.users.clone()];
    let mut item_layers = vec![emb.items.clone()];
    for l in 1..=layers {
        let mut nu = Matrix::zeros(g.num_users(), d);
        let mut ni = Matrix::zeros(g.num_items(), d);
        let residual = variant.residual();
        user_step(g, coef, &item_layers[l - 1], residual.then(|| &user_layers[l - 1]), &mut nu);
        item_step(g, coef, &user_layers[l - 1], residual.then(|| &item_layers[l - 1]), &mut ni);
        user_layers.push(nu);
        item_layers.push(ni);
    }
    let mut users = user_layers[0].clone();
    let mut items = item_layers[0].clone();
    for l in 1..=layers {
        users.add_assign(&user_layers[l]);
        items.add_assign(&item_layers[l]);
    }
    PropagationOutput {
        user_layers,
        item_layers,
        users,
        items,
    }
}

/// Unweighted propagation without residual (teacher model).
pub fn forward_plain(g: &BipartiteGraph, emb: &EmbeddingTable, layers: usize) -> Result<PropagationOutput> {
    check_shapes(g, emb)?;
    let coef = coefficients(g, None)?;
    Ok(propagate(g, &coef, Variant::Plain, emb, layers))
}

/// Weighted propagation with residual, using the weights attached to `g`.
pub fn forward_weighted(g: &BipartiteGraph, emb: &EmbeddingTable, layers: usize) -> Result<PropagationOutput> {
    let w = g
        .weights()
        .ok_or_else(|| Error::InvalidArgument("weighted propagation needs edge weights".into()))?;
    forward_with_weights(g, w, emb, layers)
}

/// Weighted propagation with an explicit per-edge weight vector.
pub fn forward_with_weights(
    g: &BipartiteGraph,
    weights: &[f64],
    emb: &EmbeddingTable,
    layers: usize,
) -> Result<PropagationOutput> {
    check_shapes(g, emb)?;
    let coef = coefficients(g, Some(weights))?;
    Ok(propagate(g, &coef, Variant::Weighted, emb, layers))
}

pub fn forward(
    g: &BipartiteGraph,
    variant: Variant,
    weights: Option<&[f64]>,
    emb: &EmbeddingTable,
    layers: usize,
) -> Result<PropagationOutput> {
    match variant {
        Variant::Plain => forward_plain(g, emb, layers),
        Variant::Weighted => {
            let w = weights
                .or(g.weights())
                .ok_or_else(|| Error::InvalidArgument("weighted propagation needs edge weights".into()))?;
            forward_with_weights(g, w, emb, layers)
        }
    }
}

/// `ŷ = ē_u · ē_v` per pair.
pub fn predict_scores(out: &PropagationOutput, pairs: &[(u32, u32)]) -> Vec<f64> {
    pairs
        .iter()
        .map(|&(u, v)| dot(out.users.row(u as usize), out.items.row(v as usize)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub users: Matrix,
    pub items: Matrix,
    /// Gradient w.r.t. the per-edge weights actually used in propagation
    /// (`None` for the plain variant, which has none).
    pub weights: Option<Vec<f64>>,
}

/// Reverse-mode pass through [`forward`]. `upstream_*` hold `∂loss/∂ē`.
///
/// Gradients of masked embedding entries are zeroed.
pub fn backward(
    g: &BipartiteGraph,
    variant: Variant,
    weights: Option<&[f64]>,
    emb: &EmbeddingTable,
    out: &PropagationOutput,
    upstream_users: &Matrix,
    upstream_items: &Matrix,
) -> Result<Gradients> {
    check_shapes(g, emb)?;
    if upstream_users.shape() != out.users.shape() || upstream_items.shape() != out.items.shape() {
        return Err(Error::Shape("upstream gradient does not match propagation output".into()));
    }
    let layers = out.layers();
    let weights = match variant {
        Variant::Plain => None,
        Variant::Weighted => Some(
            weights
                .or(g.weights())
                .ok_or_else(|| Error::InvalidArgument("weighted propagation needs edge weights".into()))?,
        ),
    };
    let coef = coefficients(g, weights)?;
    let residual = variant.residual();

    let mut adj_users = upstream_users.clone();
    let mut adj_items = upstream_items.clone();
    let mut grad_w = weights.map(|_| vec![0.0; g.num_edges()]);
    let edge_users = g.edge_users();
    let edge_items = g.edge_items();
    let norm = g.norm();

    for l in (1..=layers).rev() {
        if let Some(gw) = grad_w.as_mut() {
            let prev_u = &out.user_layers[l - 1];
            let prev_i = &out.item_layers[l - 1];
            gw.par_iter_mut().enumerate().with_min_len(256).for_each(|(e, acc)| {
                let u = edge_users[e] as usize;
                let v = edge_items[e] as usize;
                *acc += norm[e] * (dot(adj_users.row(u), prev_i.row(v)) + dot(adj_items.row(v), prev_u.row(u)));
            });
        }
        let mut next_u = upstream_users.clone();
        let mut next_i = upstream_items.clone();
        // E_V[l] reads E_U[l-1] through the item-major edges, so users collect from A_V[l]
        {
            let src = &adj_items;
            let keep = &adj_users;
            for_each_row(&mut next_u, |u, row| {
                if residual {
                    axpy(1.0, keep.row(u), row);
                }
                for e in g.user_edges(u) {
                    axpy(coef[e], src.row(edge_items[e] as usize), row);
                }
            });
        }
        {
            let src = &adj_users;
            let keep = &adj_items;
            for_each_row(&mut next_i, |v, row| {
                if residual {
                    axpy(1.0, keep.row(v), row);
                }
                for &e in g.item_edges(v) {
                    let e = e as usize;
                    axpy(coef[e], src.row(edge_users[e] as usize), row);
                }
            });
        }
        adj_users = next_u;
        adj_items = next_i;
    }

    for (x, &m) in adj_users.as_mut_slice().iter_mut().zip(&emb.user_mask) {
        if !m {
            *x = 0.0;
        }
    }
    for (x, &m) in adj_items.as_mut_slice().iter_mut().zip(&emb.item_mask) {
        if !m {
            *x = 0.0;
        }
    }
    Ok(Gradients {
        users: adj_users,
        items: adj_items,
        weights: grad_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense;
    use crate::rng;
    use rand::Rng;

    fn single_edge() -> (BipartiteGraph, EmbeddingTable) {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let emb = EmbeddingTable::new(Matrix::from_vec(1, 2, vec![1.0, 0.0]), Matrix::from_vec(1, 2, vec![0.0, 1.0])).unwrap();
        (g, emb)
    }

    #[test]
    fn single_edge_hand_computation() {
        let (g, emb) = single_edge();
        let out = forward_plain(&g, &emb, 1).unwrap();
        assert_eq!(out.user_layers[1].row(0), &[0.0, 1.0]);
        assert_eq!(out.users.row(0), &[1.0, 1.0]);
        assert_eq!(out.items.row(0), &[1.0, 1.0]);
        assert_eq!(predict_scores(&out, &[(0, 0)]), vec![2.0]);
    }

    #[test]
    fn zero_layers_is_identity() {
        let (g, emb) = single_edge();
        let out = forward_plain(&g, &emb, 0).unwrap();
        assert_eq!(out.users, emb.users);
        assert_eq!(out.items, emb.items);
    }

    #[test]
    fn orthogonal_finals_score_zero() {
        let g = BipartiteGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        let emb = EmbeddingTable::new(
            Matrix::from_vec(1, 2, vec![1.0, 0.0]),
            Matrix::from_vec(2, 2, vec![0.0, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let out = forward_plain(&g, &emb, 0).unwrap();
        assert_eq!(predict_scores(&out, &[(0, 1)]), vec![0.0]);
    }

    #[test]
    fn zero_degree_node_gets_zero_layers() {
        let g = BipartiteGraph::from_edges(2, 2, &[(0, 0)]).unwrap();
        let emb = EmbeddingTable::xavier(2, 2, 3, &mut rng::stream(0, "t"));
        let out = forward_plain(&g, &emb, 2).unwrap();
        assert!(out.user_layers[1].row(1).iter().all(|&x| x == 0.0));
        assert!(out.item_layers[2].row(1).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_weights_repeat_initial_embeddings() {
        let g = BipartiteGraph::from_edges(3, 2, &[(0, 0), (1, 1), (2, 0)]).unwrap();
        let emb = EmbeddingTable::xavier(3, 2, 4, &mut rng::stream(0, "t"));
        let out = forward_with_weights(&g, &[0.0; 3], &emb, 3).unwrap();
        for l in 0..=3 {
            assert_eq!(out.user_layers[l], emb.users);
        }
        let mut expect = emb.users.clone();
        expect.scale(4.0);
        assert!(out.users.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn unit_weights_minus_residual_match_plain() {
        // with W = 1, the residual layer minus the previous layer is one plain step of it
        let mut r = rng::stream(3, "t");
        let edges: Vec<(u32, u32)> = (0..30).map(|_| (r.random_range(0..6), r.random_range(0..5))).collect();
        let g = BipartiteGraph::from_edges(6, 5, &edges).unwrap();
        let emb = EmbeddingTable::xavier(6, 5, 3, &mut r);
        let w = vec![1.0; g.num_edges()];
        let res = forward_with_weights(&g, &w, &emb, 3).unwrap();
        for l in 1..=3 {
            let prev = EmbeddingTable::new(res.user_layers[l - 1].clone(), res.item_layers[l - 1].clone()).unwrap();
            let step = forward_plain(&g, &prev, 1).unwrap();
            let mut du = res.user_layers[l].clone();
            let mut neg = res.user_layers[l - 1].clone();
            neg.scale(-1.0);
            du.add_assign(&neg);
            assert!(du.max_abs_diff(&step.user_layers[1]) < 1e-12);
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let mut r = rng::stream(11, "t");
        let edges: Vec<(u32, u32)> = (0..60).map(|_| (r.random_range(0..15), r.random_range(0..12))).collect();
        let g = BipartiteGraph::from_edges(15, 12, &edges).unwrap();
        let emb = EmbeddingTable::xavier(15, 12, 4, &mut r);
        let w: Vec<f64> = (0..g.num_edges()).map(|_| r.random_range(-1.0..2.0)).collect();
        let plain = forward_plain(&g, &emb, 3).unwrap();
        let (ou, oi) = dense::propagate(&g, None, false, &emb, 3);
        assert!(plain.users.max_abs_diff(&ou) < 1e-10);
        assert!(plain.items.max_abs_diff(&oi) < 1e-10);
        let weighted = forward_with_weights(&g, &w, &emb, 3).unwrap();
        let (ou, oi) = dense::propagate(&g, Some(&w), true, &emb, 3);
        assert!(weighted.users.max_abs_diff(&ou) < 1e-10);
        assert!(weighted.items.max_abs_diff(&oi) < 1e-10);
        let pairs = [(0, 0), (3, 7), (14, 11)];
        let s = predict_scores(&weighted, &pairs);
        for (k, &(u, v)) in pairs.iter().enumerate() {
            let expect: f64 = (0..4).map(|c| ou.get(u as usize, c) * oi.get(v as usize, c)).sum();
            assert!((s[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_in_initial_embeddings() {
        let mut r = rng::stream(5, "t");
        let edges: Vec<(u32, u32)> = (0..20).map(|_| (r.random_range(0..5), r.random_range(0..5))).collect();
        let g = BipartiteGraph::from_edges(5, 5, &edges).unwrap();
        let emb = EmbeddingTable::xavier(5, 5, 3, &mut r);
        let mut scaled = emb.clone();
        scaled.users.scale(2.5);
        scaled.items.scale(2.5);
        let a = forward_plain(&g, &emb, 2).unwrap();
        let b = forward_plain(&g, &scaled, 2).unwrap();
        let mut a_users = a.users.clone();
        a_users.scale(2.5);
        assert!(a_users.max_abs_diff(&b.users) < 1e-12);
    }

    #[test]
    fn backward_with_no_layers_passes_upstream() {
        let (g, emb) = single_edge();
        let g = g.with_weights(vec![1.0]).unwrap();
        let out = forward_weighted(&g, &emb, 0).unwrap();
        let up_u = Matrix::from_vec(1, 2, vec![0.3, -0.2]);
        let up_i = Matrix::from_vec(1, 2, vec![1.0, 2.0]);
        let grads = backward(&g, Variant::Weighted, None, &emb, &out, &up_u, &up_i).unwrap();
        assert_eq!(grads.users, up_u);
        assert_eq!(grads.items, up_i);
        assert_eq!(grads.weights.unwrap(), vec![0.0]);
    }

    #[test]
    fn backward_single_edge_matches_hand_derivation() {
        // ŷ = (e_u + w e_v + e_u)·(e_v + w e_u + e_v) with residual, L = 1, norm 1
        let (g, emb) = single_edge();
        let w = 0.7;
        let g = g.with_weights(vec![w]).unwrap();
        let out = forward_weighted(&g, &emb, 1).unwrap();
        let up_u = Matrix::from_vec(1, 2, out.items.row(0).to_vec());
        let up_i = Matrix::from_vec(1, 2, out.users.row(0).to_vec());
        let grads = backward(&g, Variant::Weighted, None, &emb, &out, &up_u, &up_i).unwrap();
        // ē_u = 2 e_u + w e_v, ē_v = 2 e_v + w e_u
        // ∂ŷ/∂w = e_v·ē_v + e_u·ē_u
        let eu = [1.0, 0.0];
        let ev = [0.0, 1.0];
        let bu = [2.0 * eu[0] + w * ev[0], 2.0 * eu[1] + w * ev[1]];
        let bv = [2.0 * ev[0] + w * eu[0], 2.0 * ev[1] + w * eu[1]];
        let dw = dot(&ev, &bv) + dot(&eu, &bu);
        assert!((grads.weights.unwrap()[0] - dw).abs() < 1e-12);
        // ∂ŷ/∂e_u = 2 ē_v + w ē_u
        let du = [2.0 * bv[0] + w * bu[0], 2.0 * bv[1] + w * bu[1]];
        assert!((grads.users.get(0, 0) - du[0]).abs() < 1e-12);
        assert!((grads.users.get(0, 1) - du[1]).abs() < 1e-12);
    }

    #[test]
    fn masked_entries_get_no_gradient() {
        let (g, emb) = single_edge();
        let emb = emb.with_masks(vec![true, false], vec![true, true]).unwrap();
        let out = forward_plain(&g, &emb, 1).unwrap();
        let up = Matrix::from_vec(1, 2, vec![1.0, 1.0]);
        let grads = backward(&g, Variant::Plain, None, &emb, &out, &up, &up).unwrap();
        assert_eq!(grads.users.get(0, 1), 0.0);
        assert!(grads.weights.is_none());
    }
}

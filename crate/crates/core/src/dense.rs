//! Dense reference implementation of propagation, used to check the sparse kernels.
//!
//! Builds the normalized adjacency as a full `I x J` matrix from the raw edge
//! list (degrees counted here, not taken from the graph) and multiplies.

use crate::embedding::EmbeddingTable;
use crate::graph::BipartiteGraph;
use crate::matrix::Matrix;

/// `D_U^{-1/2} (A ⊙ W) D_V^{-1/2}` as a dense matrix.
pub fn normalized_adjacency(g: &BipartiteGraph, weights: Option<&[f64]>) -> Matrix {
    let edges = g.edge_list();
    let mut du = vec![0.0f64; g.num_users()];
    let mut dv = vec![0.0f64; g.num_items()];
    for &(u, v) in &edges {
        du[u as usize] += 1.0;
        dv[v as usize] += 1.0;
    }
    let mut a = Matrix::zeros(g.num_users(), g.num_items());
    for (e, &(u, v)) in edges.iter().enumerate() {
        let w = weights.map_or(1.0, |w| w[e]);
        let (u, v) = (u as usize, v as usize);
        a.set(u, v, w / (du[u] * dv[v]).sqrt());
    }
    a
}

fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    Matrix::from_fn(a.rows(), b.cols(), |r, c| (0..a.cols()).map(|k| a.get(r, k) * b.get(k, c)).sum())
}

fn transpose(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.cols(), a.rows(), |r, c| a.get(c, r))
}

/// Final (layer-summed) user and item embeddings by dense matrix products.
pub fn propagate(
    g: &BipartiteGraph,
    weights: Option<&[f64]>,
    residual: bool,
    emb: &EmbeddingTable,
    layers: usize,
) -> (Matrix, Matrix) {
    let a = normalized_adjacency(g, weights);
    let at = transpose(&a);
    let mut eu = emb.users.clone();
    let mut ev = emb.items.clone();
    let mut su = eu.clone();
    let mut sv = ev.clone();
    for _ in 0..layers {
        let mut nu = matmul(&a, &ev);
        let mut nv = matmul(&at, &eu);
        if residual {
            nu.add_assign(&eu);
            nv.add_assign(&ev);
        }
        su.add_assign(&nu);
        sv.add_assign(&nv);
        eu = nu;
        ev = nv;
    }
    (su, sv)
}

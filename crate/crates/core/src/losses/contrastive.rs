//! InfoNCE-style objectives: embedding-level distillation and the adaptive
//! uniformity constraint, plus the mask-similarity positive sets it uses.

use rayon::prelude::*;

use crate::matrix::{dot, norm, Matrix};

/// Softmax support for a contrastive loss.
#[derive(Debug, Clone, Copy)]
pub enum Candidates<'a> {
    /// Every row on the side.
    All,
    /// A shared uniform sample (the anchor's own positive is always added).
    Sample(&'a [usize]),
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-anchor contributions: `(row, coefficient on the fixed vector, coefficient on the row itself)`.
type Contribution = Vec<(usize, f64, f64)>;

/// Embedding-level distillation: for each anchor `a`,
/// `-log exp(cos(s_a, t_a)/τ) / Σ_k exp(cos(s_k, t_a)/τ)`, averaged over anchors.
///
/// Returns the value and the gradient w.r.t. `student` (the teacher is constant).
/// Zero-norm rows have cosine 0 and receive no gradient.
pub fn embedding_kd_loss(
    student: &Matrix,
    teacher: &Matrix,
    anchors: &[usize],
    candidates: Candidates<'_>,
    tau: f64,
) -> (f64, Matrix) {
    assert_eq!(student.shape(), teacher.shape(), "student and teacher tables differ in shape");
    let n = student.rows();
    let d = student.cols();
    let mut grad = Matrix::zeros(n, d);
    if anchors.is_empty() {
        return (0.0, grad);
    }
    let s_norm: Vec<f64> = (0..n).map(|k| norm(student.row(k))).collect();
    let all: Vec<usize>;
    let base: &[usize] = match candidates {
        Candidates::All => {
            all = (0..n).collect();
            &all
        }
        Candidates::Sample(s) => s,
    };
    let scale = 1.0 / anchors.len() as f64;

    let per_anchor: Vec<(f64, Vec<f64>, Contribution)> = anchors
        .par_iter()
        .map(|&a| {
            let mut support: Vec<usize> = base.iter().copied().filter(|&k| k != a).collect();
            support.push(a);
            let t = teacher.row(a);
            let t_norm = norm(t);
            let cos: Vec<f64> = support
                .iter()
                .map(|&k| {
                    let denom = s_norm[k] * t_norm;
                    if denom > 0.0 {
                        dot(student.row(k), t) / denom
                    } else {
                        0.0
                    }
                })
                .collect();
            let z: Vec<f64> = cos.iter().map(|c| c / tau).collect();
            let lse = log_sum_exp(&z);
            let value = lse - z[z.len() - 1];
            let last = support.len() - 1;
            let contrib = support
                .iter()
                .enumerate()
                .filter_map(|(idx, &k)| {
                    let denom = s_norm[k] * t_norm;
                    if denom == 0.0 {
                        return None;
                    }
                    let g = ((z[idx] - lse).exp() - if idx == last { 1.0 } else { 0.0 }) / tau * scale;
                    // ∂cos/∂s = t/(|s||t|) - cos · s/|s|²
                    Some((k, g / denom, -g * cos[idx] / (s_norm[k] * s_norm[k])))
                })
                .collect();
            (value, t.to_vec(), contrib)
        })
        .collect();

    let mut value = 0.0;
    let mut self_coef = vec![0.0; n];
    for (v, t, contrib) in &per_anchor {
        value += v;
        for &(k, c_t, c_s) in contrib {
            let row = grad.row_mut(k);
            for (g, x) in row.iter_mut().zip(t) {
                *g += c_t * x;
            }
            self_coef[k] += c_s;
        }
    }
    for (k, &c) in self_coef.iter().enumerate() {
        if c != 0.0 {
            let s = student.row(k).to_vec();
            for (g, x) in grad.row_mut(k).iter_mut().zip(&s) {
                *g += c * x;
            }
        }
    }
    (value * scale, grad)
}

/// Positive sets per node, sorted ascending, self excluded.
pub type PositiveSets = Vec<Vec<u32>>;

fn pack_bits(mask: &[bool], dim: usize) -> (Vec<u64>, usize) {
    let words = dim.div_ceil(64);
    let rows = mask.len() / dim.max(1);
    let mut packed = vec![0u64; rows * words];
    for r in 0..rows {
        for c in 0..dim {
            if mask[r * dim + c] {
                packed[r * words + c / 64] |= 1 << (c % 64);
            }
        }
    }
    (packed, words)
}

/// Whether two masks are similar enough to count as mutual positives:
/// `|m_a ∧ m_b| >= max(|m_a|, |m_b|) - δ`.
pub fn positive_set(mask_a: &[bool], mask_b: &[bool], delta: usize) -> bool {
    let overlap = mask_a.iter().zip(mask_b).filter(|(a, b)| **a && **b).count();
    let na = mask_a.iter().filter(|m| **m).count();
    let nb = mask_b.iter().filter(|m| **m).count();
    overlap + delta >= na.max(nb)
}

/// Positive sets from row masks of one side (`rows x dim`, row-major).
pub fn build_positive_sets(mask: &[bool], dim: usize, delta: usize) -> PositiveSets {
    let (packed, words) = pack_bits(mask, dim);
    let rows = mask.len().checked_div(dim).unwrap_or(0);
    let counts: Vec<u32> = (0..rows)
        .map(|r| packed[r * words..(r + 1) * words].iter().map(|w| w.count_ones()).sum())
        .collect();
    (0..rows)
        .into_par_iter()
        .map(|a| {
            let ra = &packed[a * words..(a + 1) * words];
            (0..rows)
                .filter(|&b| {
                    if a == b {
                        return false;
                    }
                    let rb = &packed[b * words..(b + 1) * words];
                    let overlap: u32 = ra.iter().zip(rb).map(|(x, y)| (x & y).count_ones()).sum();
                    overlap as usize + delta >= counts[a].max(counts[b]) as usize
                })
                .map(|b| b as u32)
                .collect()
        })
        .collect()
}

/// Adaptive uniformity: for each anchor with a non-empty positive set,
/// `-log Σ_{p∈S} exp(e_a·e_p/τ) / Σ_{k∈D} exp(e_a·e_k/τ)`, averaged over the
/// anchors that contribute.
///
/// `D` is every other row (`Candidates::All`) or the anchor's positives plus the
/// shared negative sample; the anchor itself is never in `D`. Returns the value
/// and the gradient w.r.t. `emb`.
pub fn uniformity_loss(
    emb: &Matrix,
    anchors: &[usize],
    anchor_positives: &[&[u32]],
    candidates: Candidates<'_>,
    tau: f64,
) -> (f64, Matrix) {
    assert_eq!(anchors.len(), anchor_positives.len(), "one positive list per anchor");
    let n = emb.rows();
    let mut grad = Matrix::zeros(n, emb.cols());
    let active: Vec<usize> = (0..anchors.len()).filter(|&k| !anchor_positives[k].is_empty()).collect();
    if active.is_empty() {
        return (0.0, grad);
    }
    let scale = 1.0 / active.len() as f64;

    let per_anchor: Vec<(f64, usize, Vec<(usize, f64)>)> = active
        .par_iter()
        .map(|&slot| {
            let a = anchors[slot];
            let pos = anchor_positives[slot];
            let mut support: Vec<usize> = pos.iter().map(|&p| p as usize).filter(|&p| p != a).collect();
            let num_pos = support.len();
            match candidates {
                Candidates::All => support.extend((0..n).filter(|&k| k != a && pos.binary_search(&(k as u32)).is_err())),
                Candidates::Sample(s) => {
                    let mut extra: Vec<usize> = s
                        .iter()
                        .copied()
                        .filter(|&k| k != a && pos.binary_search(&(k as u32)).is_err())
                        .collect();
                    extra.sort_unstable();
                    extra.dedup();
                    support.extend(extra);
                }
            }
            let ea = emb.row(a);
            let z: Vec<f64> = support.iter().map(|&k| dot(ea, emb.row(k)) / tau).collect();
            let lse_pos = log_sum_exp(&z[..num_pos]);
            let lse_all = log_sum_exp(&z);
            let value = lse_all - lse_pos;
            let coefs = support
                .iter()
                .enumerate()
                .map(|(idx, &k)| {
                    let mut g = (z[idx] - lse_all).exp();
                    if idx < num_pos {
                        g -= (z[idx] - lse_pos).exp();
                    }
                    (k, g * scale / tau)
                })
                .collect();
            (value, a, coefs)
        })
        .collect();

    let mut value = 0.0;
    for (v, a, coefs) in &per_anchor {
        value += v;
        let ea = emb.row(*a).to_vec();
        let mut ga = vec![0.0; emb.cols()];
        for &(k, g) in coefs {
            let ek = emb.row(k);
            for c in 0..ga.len() {
                ga[c] += g * ek[c];
            }
            let row = grad.row_mut(k);
            for c in 0..row.len() {
                row[c] += g * ea[c];
            }
        }
        for (x, y) in grad.row_mut(*a).iter_mut().zip(&ga) {
            *x += y;
        }
    }
    (value * scale, grad)
}

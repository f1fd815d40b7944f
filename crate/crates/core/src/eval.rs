//! Full-rank ranking metrics, embedding diagnostics and cost accounting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};
use crate::model::Model;
use crate::propagation::Variant;

pub const DEFAULT_CUTOFFS: [usize; 2] = [20, 40];

/// Macro-averaged Recall@N / NDCG@N at several cutoffs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub cutoffs: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    /// Users with at least one held-out positive.
    pub users: usize,
}

impl RankingMetrics {
    fn at(&self, values: &[f64], n: usize) -> f64 {
        let k = self.cutoffs.iter().position(|&c| c == n).unwrap_or_else(|| panic!("cutoff {n} not evaluated"));
        values[k]
    }

    pub fn recall_at(&self, n: usize) -> f64 {
        self.at(&self.recall, n)
    }

    pub fn ndcg_at(&self, n: usize) -> f64 {
        self.at(&self.ndcg, n)
    }
}

/// Items ordered by descending score, ties by ascending index; `excluded` items
/// are dropped. Only the first `k` are returned.
pub fn top_k(scores: &[f64], excluded: &[&[u32]], k: usize) -> Vec<u32> {
    let mut keep = vec![true; scores.len()];
    for list in excluded {
        for &v in *list {
            keep[v as usize] = false;
        }
    }
    let mut cand: Vec<u32> = (0..scores.len() as u32).filter(|&v| keep[v as usize]).collect();
    let cmp = |a: &u32, b: &u32| {
        scores[*b as usize]
            .partial_cmp(&scores[*a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    if cand.len() > k {
        cand.select_nth_unstable_by(k, cmp);
        cand.truncate(k);
    }
    cand.sort_by(cmp);
    cand
}

/// Recall and NDCG of one ranked list against sorted `positives`, for each cutoff.
pub fn user_metrics(ranked: &[u32], positives: &[u32], cutoffs: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let hits: Vec<bool> = ranked.iter().map(|v| positives.binary_search(v).is_ok()).collect();
    let mut recall = Vec::with_capacity(cutoffs.len());
    let mut ndcg = Vec::with_capacity(cutoffs.len());
    for &n in cutoffs {
        let top = &hits[..n.min(hits.len())];
        let count = top.iter().filter(|h| **h).count();
        recall.push(count as f64 / positives.len() as f64);
        let dcg: f64 = top
            .iter()
            .enumerate()
            .filter(|(_, h)| **h)
            .map(|(rank, _)| 1.0 / ((rank + 2) as f64).log2())
            .sum();
        let ideal: f64 = (0..n.min(positives.len())).map(|rank| 1.0 / ((rank + 2) as f64).log2()).sum();
        ndcg.push(if ideal > 0.0 { dcg / ideal } else { 0.0 });
    }
    (recall, ndcg)
}

/// Full-rank evaluation from final embeddings. `held_out[u]` are the positives to
/// find; every list in `exclude` is masked out of the ranking.
pub fn rank_embeddings(
    users: &Matrix,
    items: &Matrix,
    held_out: &[Vec<u32>],
    exclude: &[&[Vec<u32>]],
    cutoffs: &[usize],
) -> Result<RankingMetrics> {
    let k = cutoffs.iter().copied().max().unwrap_or(0);
    let eval_users: Vec<usize> = (0..held_out.len()).filter(|&u| !held_out[u].is_empty()).collect();
    if eval_users.is_empty() {
        return Err(Error::EmptyTestSplit);
    }
    let per_user: Vec<(Vec<f64>, Vec<f64>)> = eval_users
        .par_iter()
        .map(|&u| {
            let eu = users.row(u);
            let scores: Vec<f64> = (0..items.rows()).map(|v| dot(eu, items.row(v))).collect();
            let masks: Vec<&[u32]> = exclude.iter().map(|e| e[u].as_slice()).collect();
            let ranked = top_k(&scores, &masks, k);
            user_metrics(&ranked, &held_out[u], cutoffs)
        })
        .collect();
    let mut recall = vec![0.0; cutoffs.len()];
    let mut ndcg = vec![0.0; cutoffs.len()];
    for (r, n) in &per_user {
        for c in 0..cutoffs.len() {
            recall[c] += r[c];
            ndcg[c] += n[c];
        }
    }
    let count = per_user.len() as f64;
    Ok(RankingMetrics {
        cutoffs: cutoffs.to_vec(),
        recall: recall.into_iter().map(|x| x / count).collect(),
        ndcg: ndcg.into_iter().map(|x| x / count).collect(),
        users: per_user.len(),
    })
}

/// Ranks every item not seen in earlier splits, for each user with held-out
/// positives in `split` (validation masks train; test masks train and validation).
pub fn full_rank_eval(model: &Model, ds: &InteractionDataset, split: Split, cutoffs: &[usize]) -> Result<RankingMetrics> {
    let out = model.forward()?;
    rank_final(&out.users, &out.items, ds, split, cutoffs)
}

pub fn rank_final(users: &Matrix, items: &Matrix, ds: &InteractionDataset, split: Split, cutoffs: &[usize]) -> Result<RankingMetrics> {
    let train = ds.positives(Split::Train);
    match split {
        Split::Train => Err(Error::InvalidArgument("evaluate on val or test".into())),
        Split::Val => rank_embeddings(users, items, &ds.positives(Split::Val), &[&train], cutoffs),
        Split::Test => {
            let val = ds.positives(Split::Val);
            rank_embeddings(users, items, &ds.positives(Split::Test), &[&train, &val], cutoffs)
        }
    }
}

/// Ranks items by training popularity for every user (non-personalized baseline).
pub fn popularity_baseline(ds: &InteractionDataset, split: Split, cutoffs: &[usize]) -> Result<RankingMetrics> {
    let degree = ds.train_item_degrees();
    let users = Matrix::from_vec(ds.num_users, 1, vec![1.0; ds.num_users]);
    let items = Matrix::from_vec(ds.num_items, 1, degree.iter().map(|&d| d as f64).collect());
    rank_final(&users, &items, ds, split, cutoffs)
}

/// Mean over ordered pairs `a != b` of `1 - cos(e_a, e_b)`. Zero-norm rows are
/// dropped; the number dropped is returned alongside.
pub fn mad_metric(emb: &Matrix, subset: &[usize]) -> Result<(f64, usize)> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument("MAD needs a non-empty node subset".into()));
    }
    let rows: Vec<(usize, f64)> = subset.iter().map(|&r| (r, norm(emb.row(r)))).filter(|(_, n)| *n > 0.0).collect();
    let dropped = subset.len() - rows.len();
    if rows.len() < 2 {
        return Ok((0.0, dropped));
    }
    let per_row: Vec<f64> = rows
        .par_iter()
        .enumerate()
        .map(|(i, &(a, na))| {
            rows[i + 1..]
                .iter()
                .map(|&(b, nb)| 1.0 - dot(emb.row(a), emb.row(b)) / (na * nb))
                .sum::<f64>()
        })
        .collect();
    let total: f64 = per_row.iter().sum();
    let pairs = rows.len() * (rows.len() - 1) / 2;
    Ok((total / pairs as f64, dropped))
}

/// Highest-degree nodes: the top `fraction` by training degree (ties to the lower
/// index), at most `cap`. Indices are into the concatenated `[users; items]` table.
pub fn popular_nodes(user_degree: &[u32], item_degree: &[u32], fraction: f64, cap: usize) -> Vec<usize> {
    let mut nodes: Vec<(u32, usize)> = user_degree
        .iter()
        .chain(item_degree)
        .enumerate()
        .map(|(k, &d)| (d, k))
        .collect();
    nodes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = ((nodes.len() as f64 * fraction).ceil() as usize).min(cap).max(1.min(nodes.len()));
    let mut out: Vec<usize> = nodes.into_iter().take(take).map(|(_, k)| k).collect();
    out.sort_unstable();
    out
}

/// Stacks user rows over item rows.
pub fn stack(users: &Matrix, items: &Matrix) -> Matrix {
    let mut data = users.as_slice().to_vec();
    data.extend_from_slice(items.as_slice());
    Matrix::from_vec(users.rows() + items.rows(), users.cols(), data)
}

pub const FLOPS_CONVENTION: &str = "propagation = 2*L*|E_directed|*d (one multiply and one add per directed edge, dimension and layer; |E_directed| = 2*|E|); residual = L*(I+J)*d adds for residual models; layer_sum = L*(I+J)*d adds";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub propagation: u64,
    pub residual: u64,
    pub layer_sum: u64,
    pub total: u64,
    pub convention: String,
}

pub fn flops_for(num_edges: usize, num_nodes: usize, dim: usize, layers: usize, variant: Variant) -> FlopsReport {
    let directed = 2 * num_edges as u64;
    let (l, n, d) = (layers as u64, num_nodes as u64, dim as u64);
    let propagation = 2 * l * directed * d;
    let residual = if variant == Variant::Weighted { l * n * d } else { 0 };
    let layer_sum = l * n * d;
    FlopsReport {
        propagation,
        residual,
        layer_sum,
        total: propagation + residual + layer_sum,
        convention: FLOPS_CONVENTION.to_string(),
    }
}

/// Forward-pass operation count of a model under [`FLOPS_CONVENTION`].
pub fn flops_count(model: &Model) -> FlopsReport {
    flops_for(
        model.graph.num_edges(),
        model.graph.num_users() + model.graph.num_items(),
        model.emb.dim(),
        model.layers,
        model.variant,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    /// Unmasked embedding entries plus stored edge weights.
    pub parameters: u64,
    pub serialized_bytes: u64,
}

pub fn parameter_count(model: &Model) -> u64 {
    (model.emb.kept_entries() + model.edge_weights.as_ref().map_or(0, |w| w.len())) as u64
}

pub fn storage_count(model: &Model) -> StorageReport {
    StorageReport {
        parameters: parameter_count(model),
        serialized_bytes: checkpoint::encode(model, &checkpoint::Metadata::default()).len() as u64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub repetitions: usize,
    pub median_secs: f64,
    /// `None` with fewer than two samples.
    pub iqr_secs: Option<f64>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize_timings(mut samples: Vec<f64>) -> TimingStats {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    TimingStats {
        repetitions: n,
        median_secs: if n == 0 { 0.0 } else { quantile(&samples, 0.5) },
        iqr_secs: (n >= 2).then(|| quantile(&samples, 0.75) - quantile(&samples, 0.25)),
    }
}

/// Times full-graph forward plus scoring of every user-item pair, after one warm-up run.
pub fn timing_bench(model: &Model, repetitions: usize) -> Result<TimingStats> {
    let run = || -> Result<f64> {
        let out = model.forward()?;
        let checksum: f64 = (0..out.users.rows())
            .into_par_iter()
            .map(|u| {
                let eu = out.users.row(u);
                (0..out.items.rows()).map(|v| dot(eu, out.items.row(v))).fold(f64::NEG_INFINITY, f64::max)
            })
            .sum();
        Ok(checksum)
    };
    std::hint::black_box(run()?);
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let t = Instant::now();
        std::hint::black_box(run()?);
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(summarize_timings(samples))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub role: String,
    pub recall: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub mad: f64,
    pub mad_nodes: usize,
    pub flops: FlopsReport,
    pub storage: StorageReport,
    pub edges: usize,
    pub kept_edge_ratio: f64,
    pub kept_entry_ratio: f64,
    pub layers: usize,
    /// Excluded from determinism comparisons.
    pub timing: Option<TimingStats>,
}

/// Evaluates one model on the test split. `original_edges` is the size of the
/// training graph the kept-edge ratio is measured against.
pub fn evaluate_model(
    model: &Model,
    ds: &InteractionDataset,
    original_edges: usize,
    timing_repetitions: usize,
) -> Result<EvalReport> {
    let out = model.forward()?;
    let metrics = rank_final(&out.users, &out.items, ds, Split::Test, &DEFAULT_CUTOFFS)?;
    let popular = popular_nodes(&user_degrees(ds), &item_degrees(ds), 0.2, 1000);
    let stacked = stack(&out.users, &out.items);
    let (mad, dropped) = mad_metric(&stacked, &popular)?;
    if dropped > 0 {
        log::warn!("MAD: {dropped} zero-norm rows excluded");
    }
    let timing = if timing_repetitions > 0 {
        Some(timing_bench(model, timing_repetitions)?)
    } else {
        None
    };
    Ok(EvalReport {
        role: model.role.name().to_string(),
        recall: metrics.cutoffs.iter().copied().zip(metrics.recall.iter().copied()).collect(),
        ndcg: metrics.cutoffs.iter().copied().zip(metrics.ndcg.iter().copied()).collect(),
        mad,
        mad_nodes: popular.len() - dropped,
        flops: flops_count(model),
        storage: storage_count(model),
        edges: model.num_edges(),
        kept_edge_ratio: model.num_edges() as f64 / original_edges.max(1) as f64,
        kept_entry_ratio: model.emb.kept_ratio(),
        layers: model.layers,
        timing,
    })
}

fn user_degrees(ds: &InteractionDataset) -> Vec<u32> {
    ds.train_user_degrees().into_iter().map(|d| d as u32).collect()
}

fn item_degrees(ds: &InteractionDataset) -> Vec<u32> {
    ds.train_item_degrees().into_iter().map(|d| d as u32).collect()
}

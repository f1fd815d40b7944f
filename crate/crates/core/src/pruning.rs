//! Importance-weighted edge pruning, magnitude pruning of embedding entries,
//! layer reduction, and the iterative train-then-prune loop.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::losses::{build_positive_sets, sigmoid, LossWeights};
use crate::model::Model;
use crate::train::{self, KdTarget, Objective, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSchedule {
    pub rounds: usize,
    /// Target fraction of the original training edges still present at the end.
    pub edge_keep: f64,
    /// Target fraction of embedding entries still unmasked at the end.
    pub emb_keep: f64,
    pub student_layers: usize,
    pub epochs_per_round: usize,
    pub finetune_epochs: usize,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            rounds: 5,
            edge_keep: 0.2,
            emb_keep: 0.1,
            student_layers: 2,
            epochs_per_round: 20,
            finetune_epochs: 50,
        }
    }
}

/// Per-round drop percentage that reaches `keep` after `rounds` rounds.
pub fn geometric_rate(keep: f64, rounds: usize) -> f64 {
    if rounds == 0 || keep >= 1.0 {
        return 0.0;
    }
    100.0 * (1.0 - keep.max(0.0).powf(1.0 / rounds as f64))
}

/// Number dropped when `rho` percent of `count` candidates go.
pub fn drop_count(count: usize, rho: f64) -> usize {
    ((count as f64 * rho / 100.0).floor() as usize).min(count)
}

impl PruneSchedule {
    pub fn validate(&self, teacher_layers: usize) -> Result<()> {
        if !(self.edge_keep > 0.0 && self.emb_keep > 0.0 && self.emb_keep <= 1.0 && self.edge_keep.is_finite()) {
            return Err(Error::Config(format!(
                "keep ratios must lie in (0, 1] (edges may exceed 1 on augmented graphs): edge {} emb {}",
                self.edge_keep, self.emb_keep
            )));
        }
        if self.student_layers < 1 || self.student_layers > teacher_layers {
            return Err(Error::Config(format!(
                "student_layers {} must lie in 1..={teacher_layers}",
                self.student_layers
            )));
        }
        Ok(())
    }

    /// Edge drop percentage per round, from the candidate count at the start of
    /// pruning to `edge_keep` of the original edge count.
    pub fn edge_rate(&self, start_edges: usize, original_edges: usize) -> f64 {
        if start_edges == 0 {
            return 0.0;
        }
        geometric_rate(self.edge_keep * original_edges as f64 / start_edges as f64, self.rounds)
    }

    pub fn emb_rate(&self) -> f64 {
        geometric_rate(self.emb_keep, self.rounds)
    }
}

/// Components of the compound pruning weight of every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeDecision {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
    /// `σ(ē_u^t · ē_v^t)` per edge.
    pub teacher_score: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
}

impl EdgeDecision {
    /// `β1 w^t + β2 σ(ē^t_u · ē^t_v)`: the part that does not train.
    pub fn offset(&self) -> Vec<f64> {
        self.teacher
            .iter()
            .zip(&self.teacher_score)
            .map(|(t, s)| self.beta1 * t + self.beta2 * s)
            .collect()
    }

    /// `w^s + β1 w^t + β2 σ(ē^t_u · ē^t_v)`.
    pub fn compound(&self) -> Vec<f64> {
        self.student.iter().zip(self.offset()).map(|(s, o)| s + o).collect()
    }
}

/// Collects, for every edge of `graph`, the teacher's weight on the same edge and
/// its score from the teacher's final embeddings.
pub fn compound_edge_weights(
    graph: &BipartiteGraph,
    student_w: &[f64],
    teacher_graph: &BipartiteGraph,
    teacher_w: &[f64],
    teacher_final: &KdTarget,
    beta1: f64,
    beta2: f64,
) -> Result<EdgeDecision> {
    if student_w.len() != graph.num_edges() || teacher_w.len() != teacher_graph.num_edges() {
        return Err(Error::Shape("edge weight vectors do not match their graphs".into()));
    }
    let mut teacher = Vec::with_capacity(graph.num_edges());
    let mut teacher_score = Vec::with_capacity(graph.num_edges());
    for (u, v) in graph.edges() {
        let (u, v) = (u as usize, v as usize);
        let e = teacher_graph
            .find_edge(u, v)
            .ok_or(Error::MissingTeacherWeight { user: u, item: v })?;
        teacher.push(teacher_w[e]);
        teacher_score.push(sigmoid(teacher_final.score(u, v)));
    }
    Ok(EdgeDecision {
        student: student_w.to_vec(),
        teacher,
        teacher_score,
        beta1,
        beta2,
    })
}

/// Keep-mask dropping the `rho` percent of edges with smallest `|weight|`
/// (ties: lower edge index dropped first).
pub fn edge_keep_mask(weights: &[f64], rho: f64) -> Vec<bool> {
    let drop = drop_count(weights.len(), rho);
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[a].abs().total_cmp(&weights[b].abs()).then(a.cmp(&b)));
    let mut keep = vec![true; weights.len()];
    for &e in &order[..drop] {
        keep[e] = false;
    }
    keep
}

/// Same drop count as [`edge_keep_mask`], uniformly chosen edges.
pub fn random_edge_keep_mask<R: Rng>(num_edges: usize, rho: f64, rng: &mut R) -> Vec<bool> {
    let mut keep = vec![true; num_edges];
    for e in index::sample(rng, num_edges, drop_count(num_edges, rho)) {
        keep[e] = false;
    }
    keep
}

/// Removes the least important `rho` percent of edges; degrees and norms follow.
pub fn prune_edges(g: &BipartiteGraph, decisions: &[f64], rho: f64) -> Result<(BipartiteGraph, Vec<bool>)> {
    if decisions.len() != g.num_edges() {
        return Err(Error::Shape("one decision weight per edge required".into()));
    }
    let keep = edge_keep_mask(decisions, rho);
    Ok((g.retain_edges(&keep)?, keep))
}

fn unmasked_entries(emb: &EmbeddingTable) -> Vec<(usize, f64)> {
    let users = emb.users.as_slice().iter().zip(&emb.user_mask);
    let items = emb.items.as_slice().iter().zip(&emb.item_mask);
    users
        .chain(items)
        .enumerate()
        .filter(|(_, (_, m))| **m)
        .map(|(k, (x, _))| (k, *x))
        .collect()
}

fn mask_flat(emb: &mut EmbeddingTable, flat: impl IntoIterator<Item = usize>) {
    let nu = emb.user_mask.len();
    for k in flat {
        if k < nu {
            emb.user_mask[k] = false;
        } else {
            emb.item_mask[k - nu] = false;
        }
    }
    emb.apply_masks();
}

/// Masks the `rho` percent of unmasked entries with smallest `|value|`, over both
/// tables jointly (ties: user table first, then row-major order).
pub fn prune_embeddings(emb: &mut EmbeddingTable, rho: f64) {
    let mut live = unmasked_entries(emb);
    let drop = drop_count(live.len(), rho);
    live.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(a.0.cmp(&b.0)));
    mask_flat(emb, live[..drop].iter().map(|e| e.0));
}

pub fn random_prune_embeddings<R: Rng>(emb: &mut EmbeddingTable, rho: f64, rng: &mut R) {
    let live = unmasked_entries(emb);
    let drop = drop_count(live.len(), rho);
    let picked: Vec<usize> = index::sample(rng, live.len(), drop).into_iter().map(|k| live[k].0).collect();
    mask_flat(emb, picked);
}

pub fn reduce_layers(model: &mut Model, layers: usize) -> Result<()> {
    if layers < 1 || layers > model.layers {
        return Err(Error::InvalidArgument(format!("cannot reduce {} layers to {layers}", model.layers)));
    }
    model.layers = layers;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneLoopConfig {
    pub schedule: PruneSchedule,
    pub train: TrainConfig,
    pub delta: usize,
    pub random_edges: bool,
    pub random_embeddings: bool,
    /// Edge count the edge keep ratio is measured against.
    pub original_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub kept_edge_ratio: f64,
    pub kept_emb_ratio: f64,
    pub val_recall20: f64,
    pub val_ndcg20: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneLog {
    pub rounds: Vec<RoundRecord>,
    pub edge_rate: f64,
    pub emb_rate: f64,
    pub training: Vec<TrainLog>,
}

pub const ROUND_CSV_HEADER: &str = "round,kept_edge_ratio,kept_emb_ratio,val_recall20,val_ndcg20,train_loss";

impl PruneLog {
    /// Prune rounds are numbered from 1; the fine-tuned final state is `rounds + 1`.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{ROUND_CSV_HEADER}\n");
        for r in &self.rounds {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, r.kept_edge_ratio, r.kept_emb_ratio, r.val_recall20, r.val_ndcg20, r.train_loss
            ));
        }
        s
    }

    /// Epoch logs of every training phase, `phase` numbered like `round`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::new();
        for (k, tl) in self.training.iter().enumerate() {
            let csv = tl.to_csv();
            let mut lines = csv.lines();
            let header = lines.next().unwrap_or_default();
            if k == 0 {
                s.push_str(&format!("phase,{header}\n"));
            }
            for line in lines {
                s.push_str(&format!("{},{line}\n", k + 1));
            }
        }
        s
    }
}

fn round_record(model: &Model, ds: &InteractionDataset, original_edges: usize, round: usize, train_loss: f64) -> Result<RoundRecord> {
    let (r, n) = train::validation_metrics(model, ds)?.unwrap_or((f64::NAN, f64::NAN));
    Ok(RoundRecord {
        round,
        kept_edge_ratio: model.num_edges() as f64 / original_edges.max(1) as f64,
        kept_emb_ratio: model.emb.kept_ratio(),
        val_recall20: r,
        val_ndcg20: n,
        train_loss,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_phase<R: Rng>(
    model: &mut Model,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    epochs: usize,
    weights: LossWeights,
    target: Option<&KdTarget>,
    delta: usize,
    rng: &mut R,
) -> Result<TrainLog> {
    let positives = (weights.lambda3 > 0.0).then(|| {
        let d = model.emb.dim();
        (
            build_positive_sets(&model.emb.user_mask, d, delta),
            build_positive_sets(&model.emb.item_mask, d, delta),
        )
    });
    let obj = Objective {
        weights,
        target,
        positives: positives.as_ref().map(|(u, i)| (u, i)),
    };
    let cfg = TrainConfig { epochs, ..*cfg };
    train::train(model, ds, &cfg, &obj, rng)
}

/// Alternates training and pruning for the scheduled rounds, then fine-tunes.
/// `train_rng` drives sampling, `prune_rng` the random-drop ablations.
pub fn prune_train_loop<R: Rng>(
    model: &mut Model,
    ds: &InteractionDataset,
    cfg: &PruneLoopConfig,
    weights: LossWeights,
    target: Option<&KdTarget>,
    train_rng: &mut R,
    prune_rng: &mut R,
) -> Result<PruneLog> {
    let s = &cfg.schedule;
    let mut log = PruneLog {
        edge_rate: s.edge_rate(model.num_edges(), cfg.original_edges),
        emb_rate: s.emb_rate(),
        ..Default::default()
    };
    for round in 1..=s.rounds {
        let tl = train_phase(model, ds, &cfg.train, s.epochs_per_round, weights, target, cfg.delta, train_rng)?;
        let keep = if cfg.random_edges {
            random_edge_keep_mask(model.num_edges(), log.edge_rate, prune_rng)
        } else {
            let w = model
                .decision_weights()
                .ok_or_else(|| Error::InvalidArgument("edge pruning needs a weighted model".into()))?;
            edge_keep_mask(&w, log.edge_rate)
        };
        model.retain_edges(&keep)?;
        let isolated = model.graph.isolated_nodes();
        if isolated > 0 {
            log::info!("round {round}: {isolated} nodes without edges");
        }
        if cfg.random_embeddings {
            random_prune_embeddings(&mut model.emb, log.emb_rate, prune_rng);
        } else {
            prune_embeddings(&mut model.emb, log.emb_rate);
        }
        let empty = model.emb.empty_rows();
        if empty > 0 {
            log::info!("round {round}: {empty} fully masked embedding rows");
        }
        log.rounds.push(round_record(model, ds, cfg.original_edges, round, tl.final_train_loss())?);
        log.training.push(tl);
    }
    let tl = train_phase(model, ds, &cfg.train, s.finetune_epochs, weights, target, cfg.delta, train_rng)?;
    log.rounds.push(round_record(model, ds, cfg.original_edges, s.rounds + 1, tl.final_train_loss())?);
    log.training.push(tl);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::rng;

    #[test]
    fn compound_arithmetic() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let t = KdTarget {
            users: Matrix::from_vec(1, 2, vec![1.0, 0.0]),
            items: Matrix::from_vec(1, 2, vec![0.0, 1.0]),
        };
        let d = compound_edge_weights(&g, &[0.2], &g, &[0.4], &t, 0.5, 1.0).unwrap();
        assert!((d.compound()[0] - 0.9).abs() < 1e-12);
        let d = compound_edge_weights(&g, &[0.2], &g, &[0.4], &t, 0.0, 0.0).unwrap();
        assert_eq!(d.compound(), vec![0.2]);
    }

    #[test]
    fn missing_teacher_edge_is_an_error() {
        let student = BipartiteGraph::from_edges(2, 2, &[(0, 0), (1, 1)]).unwrap();
        let teacher = BipartiteGraph::from_edges(2, 2, &[(0, 0)]).unwrap();
        let t = KdTarget {
            users: Matrix::zeros(2, 1),
            items: Matrix::zeros(2, 1),
        };
        let err = compound_edge_weights(&student, &[1.0, 1.0], &teacher, &[1.0], &t, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::MissingTeacherWeight { user: 1, item: 1 }));
    }

    #[test]
    fn drops_the_two_smallest() {
        let w = [0.9, -0.05, 0.7, 0.8, 0.01, 0.6, 0.5, -0.95, 0.4, 0.3];
        let keep = edge_keep_mask(&w, 20.0);
        let dropped: Vec<usize> = (0..10).filter(|&e| !keep[e]).collect();
        assert_eq!(dropped, vec![1, 4]);
    }

    #[test]
    fn tiny_rate_rounds_to_nothing() {
        assert!(edge_keep_mask(&[1.0, 2.0, 3.0], 20.0).iter().all(|k| *k));
    }

    #[test]
    fn embedding_example() {
        let mut emb = EmbeddingTable::new(Matrix::from_vec(1, 2, vec![3.0, -1.0]), Matrix::from_vec(1, 2, vec![0.5, 2.0])).unwrap();
        prune_embeddings(&mut emb, 25.0);
        assert_eq!(emb.item_mask, vec![false, true]);
        assert_eq!(emb.items.row(0), &[0.0, 2.0]);
    }

    #[test]
    fn embedding_rounds_compound() {
        let mut r = rng::stream(0, "t");
        let mut emb = EmbeddingTable::xavier(10, 10, 8, &mut r);
        prune_embeddings(&mut emb, 50.0);
        prune_embeddings(&mut emb, 50.0);
        assert_eq!(emb.kept_entries(), 40);
    }

    #[test]
    fn geometric_schedule_reaches_target() {
        let rho = geometric_rate(0.1, 5);
        let mut kept = 1.0;
        for _ in 0..5 {
            kept *= 1.0 - rho / 100.0;
        }
        assert!((kept - 0.1).abs() < 1e-12);
        assert_eq!(geometric_rate(1.0, 5), 0.0);
    }

    #[test]
    fn reduce_layers_bounds() {
        let g = BipartiteGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let emb = EmbeddingTable::zeros(1, 1, 2);
        let mut m = Model::teacher(g, emb, 2).unwrap();
        reduce_layers(&mut m, 2).unwrap();
        assert_eq!(m.layers, 2);
        reduce_layers(&mut m, 1).unwrap();
        assert!(reduce_layers(&mut m, 2).is_err());
    }
}

//! Multi-task objective over one batch, its full gradient, and the epoch loop
//! with validation early stopping.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InteractionDataset, Split};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{
    bpr_loss, embedding_kd_loss, frobenius_squared, prediction_kd_loss, total_loss, uniformity_loss, Candidates,
    LossComponents, LossWeights, PositiveSets, Sampler, TrainingBatch,
};
use crate::matrix::{axpy, dot, Matrix};
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::propagation::{self, PropagationOutput};

/// Frozen final embeddings of the model being distilled from.
#[derive(Debug, Clone, PartialEq)]
pub struct KdTarget {
    pub users: Matrix,
    pub items: Matrix,
}

impl KdTarget {
    pub fn from_model(model: &Model) -> Result<Self> {
        let out = model.forward()?;
        Ok(KdTarget {
            users: out.users,
            items: out.items,
        })
    }

    pub fn score(&self, u: usize, v: usize) -> f64 {
        dot(self.users.row(u), self.items.row(v))
    }
}

/// What the objective is made of for one stage.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub weights: LossWeights,
    pub target: Option<&'a KdTarget>,
    /// Mask-similarity positive sets (users, items) for the uniformity term.
    pub positives: Option<(&'a PositiveSets, &'a PositiveSets)>,
}

impl<'a> Objective<'a> {
    pub fn bpr_only(lambda4: f64) -> Self {
        Objective {
            weights: LossWeights::bpr_only(lambda4),
            target: None,
            positives: None,
        }
    }

    fn uses_prediction_kd(&self) -> bool {
        self.weights.lambda1 > 0.0 && self.target.is_some()
    }

    fn uses_embedding_kd(&self) -> bool {
        self.weights.lambda2 > 0.0 && self.target.is_some()
    }

    fn uses_uniformity(&self) -> bool {
        self.weights.lambda3 > 0.0 && self.positives.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam settings for embedding tables.
    pub adam: AdamConfig,
    /// Learning rate for the learnable edge weights.
    pub edge_lr: f64,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Uniform sample size for the softmax denominators; 0 means the full set.
    pub softmax_negatives: usize,
    /// At most this many positives per anchor in the uniformity numerator when sampling.
    pub positive_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            batch_size: 4096,
            adam: AdamConfig::default(),
            edge_lr: 1e-3,
            eval_every: 3,
            patience: 10,
            softmax_negatives: 256,
            positive_cap: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, eval_every and patience must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite() && self.edge_lr >= 0.0 && self.edge_lr.is_finite()) {
            return Err(Error::Config("learning rates must be positive and finite".into()));
        }
        Ok(())
    }
}

/// Everything random about one step, drawn up front.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepInputs {
    pub batch: TrainingBatch,
    pub user_anchors: Vec<usize>,
    pub item_anchors: Vec<usize>,
    /// Shared softmax samples; `None` means the full side.
    pub user_sample: Option<Vec<usize>>,
    pub item_sample: Option<Vec<usize>>,
    /// Per-anchor positives for the uniformity term (sorted).
    pub user_positives: Vec<Vec<u32>>,
    pub item_positives: Vec<Vec<u32>>,
}

fn draw_sample<R: Rng>(n: usize, k: usize, rng: &mut R) -> Option<Vec<usize>> {
    if k == 0 || k >= n {
        return None;
    }
    let mut s = index::sample(rng, n, k).into_vec();
    s.sort_unstable();
    Some(s)
}

fn anchor_positives<R: Rng>(sets: &PositiveSets, anchors: &[usize], cap: Option<usize>, rng: &mut R) -> Vec<Vec<u32>> {
    anchors
        .iter()
        .map(|&a| {
            let full = &sets[a];
            match cap {
                Some(cap) if full.len() > cap => {
                    let mut pick: Vec<u32> = index::sample(rng, full.len(), cap).into_iter().map(|k| full[k]).collect();
                    pick.sort_unstable();
                    pick
                }
                _ => full.clone(),
            }
        })
        .collect()
}

pub fn prepare_step<R: Rng>(
    batch: TrainingBatch,
    obj: &Objective<'_>,
    cfg: &TrainConfig,
    num_users: usize,
    num_items: usize,
    rng: &mut R,
) -> StepInputs {
    let contrastive = obj.uses_embedding_kd() || obj.uses_uniformity();
    let user_anchors = if contrastive { batch.users() } else { Vec::new() };
    let item_anchors = if contrastive { batch.items() } else { Vec::new() };
    let user_sample = if contrastive { draw_sample(num_users, cfg.softmax_negatives, rng) } else { None };
    let item_sample = if contrastive { draw_sample(num_items, cfg.softmax_negatives, rng) } else { None };
    let (user_positives, item_positives) = match obj.positives {
        Some((pu, pi)) if obj.uses_uniformity() => {
            let cap_u = user_sample.as_ref().map(|_| cfg.positive_cap);
            let cap_i = item_sample.as_ref().map(|_| cfg.positive_cap);
            (
                anchor_positives(pu, &user_anchors, cap_u, rng),
                anchor_positives(pi, &item_anchors, cap_i, rng),
            )
        }
        _ => (Vec::new(), Vec::new()),
    };
    StepInputs {
        batch,
        user_anchors,
        item_anchors,
        user_sample,
        item_sample,
        user_positives,
        item_positives,
    }
}

/// Loss value, its parts and the gradient w.r.t. every learnable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub loss: f64,
    pub components: LossComponents,
    pub grad_users: Matrix,
    pub grad_items: Matrix,
    /// W.r.t. the learnable edge weights (not the fixed offset).
    pub grad_weights: Option<Vec<f64>>,
}

fn candidates(sample: &Option<Vec<usize>>) -> Candidates<'_> {
    match sample {
        Some(s) => Candidates::Sample(s),
        None => Candidates::All,
    }
}

fn score_gradients(
    out: &PropagationOutput,
    triples: &[(u32, u32, u32)],
    g_first: &[f64],
    g_second: &[f64],
    scale: f64,
    gu: &mut Matrix,
    gi: &mut Matrix,
) {
    for (k, &(u, a, b)) in triples.iter().enumerate() {
        let (u, a, b) = (u as usize, a as usize, b as usize);
        let (ga, gb) = (scale * g_first[k], scale * g_second[k]);
        axpy(ga, out.items.row(a), gu.row_mut(u));
        axpy(gb, out.items.row(b), gu.row_mut(u));
        axpy(ga, out.users.row(u), gi.row_mut(a));
        axpy(gb, out.users.row(u), gi.row_mut(b));
    }
}

/// Evaluates the objective on one prepared step and back-propagates it.
pub fn loss_and_grad(model: &Model, obj: &Objective<'_>, inputs: &StepInputs) -> Result<StepResult> {
    let lw = &obj.weights;
    let w = model.propagation_weights();
    let out = propagation::forward(&model.graph, model.variant, w.as_deref(), &model.emb, model.layers)?;
    let mut gu = Matrix::zeros(out.users.rows(), out.users.cols());
    let mut gi = Matrix::zeros(out.items.rows(), out.items.cols());
    let mut c = LossComponents::default();

    let bpr = &inputs.batch.bpr;
    if lw.lambda0 > 0.0 && !bpr.is_empty() {
        let pos: Vec<f64> = bpr.iter().map(|&(u, p, _)| dot(out.users.row(u as usize), out.items.row(p as usize))).collect();
        let neg: Vec<f64> = bpr.iter().map(|&(u, _, n)| dot(out.users.row(u as usize), out.items.row(n as usize))).collect();
        let l = bpr_loss(&pos, &neg);
        c.bpr = l.value;
        score_gradients(&out, bpr, &l.grad_first, &l.grad_second, lw.lambda0, &mut gu, &mut gi);
    }

    let kd = &inputs.batch.kd;
    if let (true, Some(t)) = (obj.uses_prediction_kd() && !kd.is_empty(), obj.target) {
        let eps_t: Vec<f64> = kd
            .iter()
            .map(|&(u, a, b)| t.score(u as usize, a as usize) - t.score(u as usize, b as usize))
            .collect();
        let eps_s: Vec<f64> = kd
            .iter()
            .map(|&(u, a, b)| {
                let eu = out.users.row(u as usize);
                dot(eu, out.items.row(a as usize)) - dot(eu, out.items.row(b as usize))
            })
            .collect();
        let (value, g) = prediction_kd_loss(&eps_t, &eps_s, lw.tau_pred);
        c.prediction_kd = value;
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        score_gradients(&out, kd, &g, &neg, lw.lambda1, &mut gu, &mut gi);
    }

    if let (true, Some(t)) = (obj.uses_embedding_kd(), obj.target) {
        let (vu, du) = embedding_kd_loss(&out.users, &t.users, &inputs.user_anchors, candidates(&inputs.user_sample), lw.tau_emb);
        let (vi, di) = embedding_kd_loss(&out.items, &t.items, &inputs.item_anchors, candidates(&inputs.item_sample), lw.tau_emb);
        c.embedding_kd = vu + vi;
        axpy(lw.lambda2, du.as_slice(), gu.as_mut_slice());
        axpy(lw.lambda2, di.as_slice(), gi.as_mut_slice());
    }

    if obj.uses_uniformity() {
        let pu: Vec<&[u32]> = inputs.user_positives.iter().map(Vec::as_slice).collect();
        let pi: Vec<&[u32]> = inputs.item_positives.iter().map(Vec::as_slice).collect();
        let (vu, du) = uniformity_loss(&out.users, &inputs.user_anchors, &pu, candidates(&inputs.user_sample), lw.tau_unif);
        let (vi, di) = uniformity_loss(&out.items, &inputs.item_anchors, &pi, candidates(&inputs.item_sample), lw.tau_unif);
        c.uniformity = vu + vi;
        axpy(lw.lambda3, du.as_slice(), gu.as_mut_slice());
        axpy(lw.lambda3, di.as_slice(), gi.as_mut_slice());
    }

    let grads = propagation::backward(&model.graph, model.variant, w.as_deref(), &model.emb, &out, &gu, &gi)?;
    let learnable = model.edge_weights.as_deref();
    let theta = frobenius_squared(&model.emb.users, &model.emb.items, learnable);
    let loss = total_loss(&c, lw, theta)?;

    let mut grad_users = grads.users;
    let mut grad_items = grads.items;
    let reg = 2.0 * lw.lambda4;
    axpy(reg, model.emb.users.as_slice(), grad_users.as_mut_slice());
    axpy(reg, model.emb.items.as_slice(), grad_items.as_mut_slice());
    let grad_weights = learnable.map(|w_learn| {
        let mut g = match (&grads.weights, model.binary_propagation) {
            (Some(g), false) => g.clone(),
            _ => vec![0.0; w_learn.len()],
        };
        axpy(reg, w_learn, &mut g);
        g
    });
    Ok(StepResult {
        loss,
        components: c,
        grad_users,
        grad_items,
        grad_weights,
    })
}

/// Adam state for every parameter block of one model.
#[derive(Debug, Clone)]
pub struct Optimizer {
    users: Adam,
    items: Adam,
    weights: Option<Adam>,
}

impl Optimizer {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let edge = AdamConfig {
            lr: cfg.edge_lr,
            ..cfg.adam
        };
        Optimizer {
            users: Adam::new(model.emb.users.as_slice().len(), cfg.adam),
            items: Adam::new(model.emb.items.as_slice().len(), cfg.adam),
            weights: model.edge_weights.as_ref().map(|w| Adam::new(w.len(), edge)),
        }
    }

    /// One update; masked entries are re-zeroed afterwards.
    pub fn step(&mut self, model: &mut Model, r: &StepResult) -> Result<()> {
        self.users.step(model.emb.users.as_mut_slice(), r.grad_users.as_slice());
        self.items.step(model.emb.items.as_mut_slice(), r.grad_items.as_slice());
        if let (Some(opt), Some(w), Some(g)) = (&mut self.weights, &mut model.edge_weights, &r.grad_weights) {
            if opt.len() != w.len() {
                return Err(Error::Shape("optimizer state does not match edge count".into()));
            }
            opt.step(w, g);
        }
        model.emb.apply_masks();
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub components: LossComponents,
    pub val_recall20: Option<f64>,
    pub val_ndcg20: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_recall20: Option<f64>,
    pub best_val_ndcg20: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn final_train_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.train_loss)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,bpr,prediction_kd,embedding_kd,uniformity,val_recall20,val_ndcg20\n");
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v}"));
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch,
                e.train_loss,
                e.components.bpr,
                e.components.prediction_kd,
                e.components.embedding_kd,
                e.components.uniformity,
                opt(e.val_recall20),
                opt(e.val_ndcg20)
            ));
        }
        s
    }
}

/// Validation Recall@20 and NDCG@20, or `None` without a validation split.
pub fn validation_metrics(model: &Model, ds: &InteractionDataset) -> Result<Option<(f64, f64)>> {
    if ds.val.is_empty() {
        return Ok(None);
    }
    let m = eval::full_rank_eval(model, ds, Split::Val, &[20])?;
    let (r, n) = (m.recall_at(20), m.ndcg_at(20));
    if !r.is_finite() || !n.is_finite() {
        return Err(Error::Diverged(format!("validation metric is not finite (recall {r}, ndcg {n})")));
    }
    Ok(Some((r, n)))
}

/// Trains `model` in place. The best validation snapshot is restored at the end.
pub fn train<R: Rng>(
    model: &mut Model,
    ds: &InteractionDataset,
    cfg: &TrainConfig,
    obj: &Objective<'_>,
    rng: &mut R,
) -> Result<TrainLog> {
    cfg.validate()?;
    obj.weights.validate()?;
    let sampler = Sampler::new(ds.num_users, ds.num_items, &ds.train);
    let mut opt = Optimizer::new(model, cfg);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, EmbeddingTable, Option<Vec<f64>>)> = None;
    let mut bad = 0;
    for epoch in 1..=cfg.epochs {
        let batches = sampler.epoch(cfg.batch_size, obj.uses_prediction_kd(), rng);
        let mut loss = 0.0;
        let mut comps = LossComponents::default();
        let n = batches.len().max(1) as f64;
        for batch in batches {
            let inputs = prepare_step(batch, obj, cfg, ds.num_users, ds.num_items, rng);
            let r = loss_and_grad(model, obj, &inputs)?;
            opt.step(model, &r)?;
            loss += r.loss / n;
            comps.bpr += r.components.bpr / n;
            comps.prediction_kd += r.components.prediction_kd / n;
            comps.embedding_kd += r.components.embedding_kd / n;
            comps.uniformity += r.components.uniformity / n;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("{} training loss diverged at epoch {epoch}", model.role.name())));
        }
        let mut record = EpochRecord {
            epoch,
            train_loss: loss,
            components: comps,
            val_recall20: None,
            val_ndcg20: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            if let Some((r, nd)) = validation_metrics(model, ds)? {
                record.val_recall20 = Some(r);
                record.val_ndcg20 = Some(nd);
                log::debug!("{} epoch {epoch}: loss {loss:.5} val recall@20 {r:.4}", model.role.name());
                if best.as_ref().is_none_or(|b| r > b.0) {
                    best = Some((r, model.emb.clone(), model.edge_weights.clone()));
                    log.best_epoch = Some(epoch);
                    log.best_val_recall20 = Some(r);
                    log.best_val_ndcg20 = Some(nd);
                    bad = 0;
                } else {
                    bad += 1;
                }
            }
        }
        log.epochs.push(record);
        if bad >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }
    if let Some((_, emb, w)) = best {
        model.emb = emb;
        model.edge_weights = w;
    }
    Ok(log)
}

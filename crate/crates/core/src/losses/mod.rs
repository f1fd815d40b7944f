//! Training objectives and the multi-task combination.
//!
//! Every loss returns its value together with the gradient w.r.t. the scores or
//! final embeddings it consumes; chaining through propagation happens in the
//! trainer.

mod contrastive;
mod ranking;
mod sampling;

pub use contrastive::{build_positive_sets, embedding_kd_loss, positive_set, uniformity_loss, Candidates, PositiveSets};
pub use ranking::{bpr_loss, log_sigmoid, prediction_kd_loss, sigmoid, ScoreLoss};
pub use sampling::{Sampler, TrainingBatch};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Multi-task weights and temperatures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// BPR
    pub lambda0: f64,
    /// prediction-level distillation
    pub lambda1: f64,
    /// embedding-level distillation
    pub lambda2: f64,
    /// adaptive uniformity
    pub lambda3: f64,
    /// squared Frobenius norm of the learnable parameters
    pub lambda4: f64,
    pub tau_pred: f64,
    pub tau_emb: f64,
    pub tau_unif: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda0: 1.0,
            lambda1: 1.0,
            lambda2: 0.01,
            lambda3: 1e-3,
            lambda4: 1e-7,
            tau_pred: 1.0,
            tau_emb: 0.5,
            tau_unif: 1.0,
        }
    }
}

impl LossWeights {
    /// BPR plus weight decay only.
    pub fn bpr_only(lambda4: f64) -> Self {
        LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            lambda4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {lambdas:?}")));
        }
        let taus = [self.tau_pred, self.tau_emb, self.tau_unif];
        if taus.iter().any(|t| !t.is_finite() || *t <= 0.0) {
            return Err(Error::Config(format!("temperatures must be positive: {taus:?}")));
        }
        Ok(())
    }
}

/// Values of the individual objectives for one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bpr: f64,
    pub prediction_kd: f64,
    pub embedding_kd: f64,
    pub uniformity: f64,
}

/// `λ0 L_bpr + λ1 L_pkd + λ2 L_ekd + λ3 L_unif + λ4 ‖Θ‖²`.
pub fn total_loss(components: &LossComponents, weights: &LossWeights, theta_squared_norm: f64) -> Result<f64> {
    let named = [
        ("bpr", components.bpr),
        ("prediction_kd", components.prediction_kd),
        ("embedding_kd", components.embedding_kd),
        ("uniformity", components.uniformity),
        ("regularization", theta_squared_norm),
    ];
    for (component, value) in named {
        if !value.is_finite() {
            return Err(Error::NonFinite { component, value });
        }
    }
    Ok(weights.lambda0 * components.bpr
        + weights.lambda1 * components.prediction_kd
        + weights.lambda2 * components.embedding_kd
        + weights.lambda3 * components.uniformity
        + weights.lambda4 * theta_squared_norm)
}

/// `‖Θ‖²` over embedding tables and, when present, learnable edge weights.
pub fn frobenius_squared(users: &Matrix, items: &Matrix, edge_weights: Option<&[f64]>) -> f64 {
    users.squared_norm() + items.squared_norm() + edge_weights.map_or(0.0, |w| w.iter().map(|x| x * x).sum())
}

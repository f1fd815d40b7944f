//! A propagation model: graph, embedding table, edge weights and layer count.

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::BipartiteGraph;
use crate::propagation::{self, PropagationOutput, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Intermediate,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Intermediate => "intermediate",
            Role::Student => "student",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Intermediate => 1,
            Role::Student => 2,
        }
    }

    pub fn from_code(c: u8) -> Option<Role> {
        match c {
            0 => Some(Role::Teacher),
            1 => Some(Role::Intermediate),
            2 => Some(Role::Student),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub role: Role,
    pub graph: BipartiteGraph,
    pub emb: EmbeddingTable,
    pub layers: usize,
    pub variant: Variant,
    /// Learnable per-edge weights (`None` for the plain teacher).
    pub edge_weights: Option<Vec<f64>>,
    /// Constant added to the learnable weights before propagation and pruning
    /// decisions (importance distillation terms of the student).
    pub weight_offset: Option<Vec<f64>>,
    /// Propagate with all-one weights while still learning/pruning by `edge_weights`.
    pub binary_propagation: bool,
    /// Per-edge flag: edge of the original training graph.
    pub original: Vec<bool>,
}

impl Model {
    pub fn teacher(graph: BipartiteGraph, emb: EmbeddingTable, layers: usize) -> Result<Self> {
        let original = vec![true; graph.num_edges()];
        let m = Model {
            role: Role::Teacher,
            graph: graph.without_weights(),
            emb,
            layers,
            variant: Variant::Plain,
            edge_weights: None,
            weight_offset: None,
            binary_propagation: false,
            original,
        };
        m.validate()?;
        Ok(m)
    }

    /// Weighted-propagation model with all edge weights initialized to one.
    pub fn weighted(role: Role, graph: BipartiteGraph, emb: EmbeddingTable, layers: usize, original: Vec<bool>) -> Result<Self> {
        let m = Model {
            role,
            edge_weights: Some(vec![1.0; graph.num_edges()]),
            graph: graph.without_weights(),
            emb,
            layers,
            variant: Variant::Weighted,
            weight_offset: None,
            binary_propagation: false,
            original,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.graph.num_users() != self.emb.num_users() || self.graph.num_items() != self.emb.num_items() {
            return Err(Error::Shape("graph and embedding table disagree on node counts".into()));
        }
        let m = self.graph.num_edges();
        for (name, v) in [("edge weights", &self.edge_weights), ("weight offset", &self.weight_offset)] {
            if let Some(v) = v {
                if v.len() != m {
                    return Err(Error::Shape(format!("{name} length {} != edge count {m}", v.len())));
                }
            }
        }
        if self.original.len() != m {
            return Err(Error::Shape("provenance flags do not match edge count".into()));
        }
        if self.variant == Variant::Weighted && self.edge_weights.is_none() {
            return Err(Error::InvalidArgument("weighted model without edge weights".into()));
        }
        Ok(())
    }

    /// `w + offset`: the compound decision weight of every edge.
    pub fn decision_weights(&self) -> Option<Vec<f64>> {
        let w = self.edge_weights.as_ref()?;
        Some(match &self.weight_offset {
            Some(off) => w.iter().zip(off).map(|(a, b)| a + b).collect(),
            None => w.clone(),
        })
    }

    /// Weights fed to propagation (`None` for plain propagation).
    pub fn propagation_weights(&self) -> Option<Vec<f64>> {
        match self.variant {
            Variant::Plain => None,
            Variant::Weighted if self.binary_propagation => Some(vec![1.0; self.graph.num_edges()]),
            Variant::Weighted => self.decision_weights(),
        }
    }

    pub fn forward(&self) -> Result<PropagationOutput> {
        let w = self.propagation_weights();
        propagation::forward(&self.graph, self.variant, w.as_deref(), &self.emb, self.layers)
    }

    pub fn num_edges(&self) -> usize {
        self.graph.num_edges()
    }

    /// Keeps an edge subset; per-edge arrays follow the kept edges.
    pub fn retain_edges(&mut self, keep: &[bool]) -> Result<()> {
        let filter = |v: &Vec<f64>| v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect::<Vec<_>>();
        self.graph = self.graph.retain_edges(keep)?;
        self.edge_weights = self.edge_weights.as_ref().map(filter);
        self.weight_offset = self.weight_offset.as_ref().map(filter);
        self.original = self.original.iter().zip(keep).filter(|(_, k)| **k).map(|(o, _)| *o).collect();
        Ok(())
    }

    /// Folds the offset into the stored weights, leaving a frozen inference model.
    pub fn freeze_weights(&mut self) {
        if let Some(w) = self.decision_weights() {
            self.edge_weights = Some(w);
        }
        self.weight_offset = None;
    }
}

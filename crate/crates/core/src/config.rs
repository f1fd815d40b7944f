//! Run configuration: TOML file, defaults, range checks, environment overrides
//! and per-stage hashes for artifact reuse.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentCap;
use crate::data::{SplitMode, SplitRatios};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::optim::AdamConfig;
use crate::pruning::PruneSchedule;
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "LIGHTPRUNE_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Interaction file (`user<TAB>item` per line).
    pub path: PathBuf,
    pub min_degree: usize,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub split_mode: SplitMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::from("interactions.tsv"),
            min_degree: 3,
            train: 0.7,
            val: 0.05,
            test: 0.25,
            split_mode: SplitMode::PerUser,
        }
    }
}

impl DataConfig {
    pub fn ratios(&self) -> SplitRatios {
        SplitRatios {
            train: self.train,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Propagation layers of teacher and intermediate.
    #[serde(rename = "L")]
    pub layers: usize,
    /// Propagation layers of the student.
    #[serde(rename = "L_s")]
    pub student_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 32,
            layers: 2,
            student_layers: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapKind {
    None,
    PerNode,
    DegreeMultiple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub h: usize,
    pub cap: CapKind,
    /// Node count for `per_node`, degree multiple for `degree_multiple`.
    pub cap_value: f64,
    /// Largest projected edge count accepted without a cap.
    pub budget: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            h: 3,
            cap: CapKind::DegreeMultiple,
            cap_value: 10.0,
            budget: 50_000_000,
        }
    }
}

impl AugmentConfig {
    pub fn cap(&self) -> AugmentCap {
        match self.cap {
            CapKind::None => AugmentCap::Unbounded,
            CapKind::PerNode => AugmentCap::PerNode(self.cap_value as usize),
            CapKind::DegreeMultiple => AugmentCap::DegreeMultiple(self.cap_value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub edge_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Uniform negatives in the two softmax losses (0 = full softmax).
    pub softmax_negatives: usize,
    pub positive_cap: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimConfig {
            lr: t.adam.lr,
            edge_lr: t.edge_lr,
            adam_beta1: t.adam.beta1,
            adam_beta2: t.adam.beta2,
            eps: t.adam.eps,
            batch_size: t.batch_size,
            eval_every: t.eval_every,
            patience: t.patience,
            softmax_negatives: t.softmax_negatives,
            positive_cap: t.positive_cap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { epochs: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IntermediateConfig {
    pub epochs: usize,
    /// Uniformity weight at this stage (the `[loss]` value applies to the student).
    pub lambda3: f64,
    pub init_from_teacher: bool,
}

impl Default for IntermediateConfig {
    fn default() -> Self {
        IntermediateConfig {
            epochs: 300,
            lambda3: 0.0,
            init_from_teacher: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub rounds: usize,
    pub edge_keep: f64,
    pub emb_keep: f64,
    pub epochs_per_round: usize,
    pub finetune_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Positive-set relaxation; negative selects `ceil(0.1 * d * emb_keep)`.
    pub delta: i64,
    pub init_from_intermediate: bool,
}

impl Default for StudentConfig {
    fn default() -> Self {
        let s = PruneSchedule::default();
        StudentConfig {
            rounds: s.rounds,
            edge_keep: s.edge_keep,
            emb_keep: s.emb_keep,
            epochs_per_round: s.epochs_per_round,
            finetune_epochs: s.finetune_epochs,
            beta1: 1.0,
            beta2: 1.0,
            delta: -1,
            init_from_intermediate: false,
        }
    }
}

/// Ablation switches. Each variant maps to exactly one flag:
/// `~EdgeP` random_edge_drop, `~EmbP` random_emb_drop, `~BothP` both random flags,
/// `BnEdge` binary_edge_weights, `-BiAln` disable_bilevel_kd,
/// `-IntKD` disable_intermediate, `-ImpD` disable_importance_distill.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub random_edge_drop: bool,
    pub random_emb_drop: bool,
    pub binary_edge_weights: bool,
    pub disable_bilevel_kd: bool,
    pub disable_intermediate: bool,
    pub disable_importance_distill: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Forward-pass timing repetitions per model in the report (0 disables timing).
    pub timing_repetitions: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { timing_repetitions: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_id: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub optim: OptimConfig,
    pub loss: LossWeights,
    pub teacher: TeacherConfig,
    pub intermediate: IntermediateConfig,
    pub student: StudentConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            run_id: "default".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            optim: OptimConfig::default(),
            loss: LossWeights::default(),
            teacher: TeacherConfig::default(),
            intermediate: IntermediateConfig::default(),
            student: StudentConfig::default(),
            ablation: AblationConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, applies `LIGHTPRUNE_*` overrides from `env`, validates.
    /// A relative data path is resolved against the config file's directory.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        apply_env(&mut table, env)?;
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.data.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.data.path = dir.join(&cfg.data.path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults plus environment overrides, for runs without a config file.
    pub fn from_env(env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table = toml::Table::new();
        apply_env(&mut table, env)?;
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.ratios().validate().map_err(|e| Error::Config(e.to_string()))?;
        check(self.data.min_degree >= 1, || "data.min_degree must be >= 1".into())?;
        let m = &self.model;
        check(m.d >= 1 && m.d <= 4096, || format!("model.d = {} out of 1..=4096", m.d))?;
        check(m.layers >= 1 && m.layers <= 8, || format!("model.L = {} out of 1..=8", m.layers))?;
        check(m.student_layers >= 1 && m.student_layers <= m.layers, || {
            format!("model.L_s = {} must lie in 1..=L ({})", m.student_layers, m.layers)
        })?;
        let a = &self.augment;
        check((1..=4).contains(&a.h), || format!("augment.h = {} out of 1..=4", a.h))?;
        check(a.cap == CapKind::None || (a.cap_value.is_finite() && a.cap_value >= 0.0), || {
            "augment.cap_value must be finite and non-negative".into()
        })?;
        self.train_config(0).validate()?;
        self.loss.validate()?;
        check(self.intermediate.lambda3.is_finite() && self.intermediate.lambda3 >= 0.0, || {
            "intermediate.lambda3 must be non-negative".into()
        })?;
        let s = &self.student;
        check(s.edge_keep > 0.0 && s.edge_keep.is_finite(), || "student.edge_keep must be positive".into())?;
        check(s.emb_keep > 0.0 && s.emb_keep <= 1.0, || "student.emb_keep must lie in (0, 1]".into())?;
        check(s.beta1.is_finite() && s.beta2.is_finite(), || "student.beta1/beta2 must be finite".into())?;
        check(!self.run_id.is_empty() && !self.run_id.contains(['/', '\\']), || {
            "run_id must be a non-empty file name".into()
        })?;
        Ok(())
    }

    pub fn train_config(&self, epochs: usize) -> TrainConfig {
        let o = &self.optim;
        TrainConfig {
            epochs,
            batch_size: o.batch_size,
            adam: AdamConfig {
                lr: o.lr,
                beta1: o.adam_beta1,
                beta2: o.adam_beta2,
                eps: o.eps,
            },
            edge_lr: o.edge_lr,
            eval_every: o.eval_every,
            patience: o.patience,
            softmax_negatives: o.softmax_negatives,
            positive_cap: o.positive_cap,
        }
    }

    pub fn schedule(&self) -> PruneSchedule {
        let s = &self.student;
        PruneSchedule {
            rounds: s.rounds,
            edge_keep: s.edge_keep,
            emb_keep: s.emb_keep,
            student_layers: self.model.student_layers,
            epochs_per_round: s.epochs_per_round,
            finetune_epochs: s.finetune_epochs,
        }
    }

    pub fn delta(&self) -> usize {
        if self.student.delta >= 0 {
            self.student.delta as usize
        } else {
            (0.1 * self.model.d as f64 * self.student.emb_keep).ceil() as usize
        }
    }

    pub fn teacher_weights(&self) -> LossWeights {
        LossWeights::bpr_only(self.loss.lambda4)
    }

    pub fn intermediate_weights(&self) -> LossWeights {
        LossWeights {
            lambda3: self.intermediate.lambda3,
            ..self.loss
        }
    }

    pub fn student_weights(&self) -> LossWeights {
        if self.ablation.disable_bilevel_kd {
            LossWeights {
                lambda1: 0.0,
                lambda2: 0.0,
                ..self.loss
            }
        } else {
            self.loss
        }
    }

    pub fn betas(&self) -> (f64, f64) {
        if self.ablation.disable_importance_distill {
            (0.0, 0.0)
        } else {
            (self.student.beta1, self.student.beta2)
        }
    }

    /// Chained stage hashes; each covers its own keys and every earlier stage.
    pub fn stage_hashes(&self, data_digest: &str) -> StageHashes {
        #[derive(Serialize)]
        struct TeacherKeys<'a> {
            data: &'a str,
            seed: u64,
            split: (&'a DataConfig, &'a ModelConfig),
            optim: &'a OptimConfig,
            lambda4: f64,
            teacher: &'a TeacherConfig,
        }
        #[derive(Serialize)]
        struct IntermediateKeys<'a> {
            teacher: &'a str,
            augment: &'a AugmentConfig,
            loss: LossWeights,
            stage: &'a IntermediateConfig,
            binary: bool,
            skipped: bool,
        }
        #[derive(Serialize)]
        struct StudentKeys<'a> {
            intermediate: &'a str,
            loss: &'a LossWeights,
            stage: &'a StudentConfig,
            ablation: &'a AblationConfig,
        }
        let teacher = digest(&TeacherKeys {
            data: data_digest,
            seed: self.seed,
            split: (&self.data, &self.model),
            optim: &self.optim,
            lambda4: self.loss.lambda4,
            teacher: &self.teacher,
        });
        let intermediate = digest(&IntermediateKeys {
            teacher: &teacher,
            augment: &self.augment,
            loss: self.intermediate_weights(),
            stage: &self.intermediate,
            binary: self.ablation.binary_edge_weights,
            skipped: self.ablation.disable_intermediate,
        });
        let student = digest(&StudentKeys {
            intermediate: &intermediate,
            loss: &self.loss,
            stage: &self.student,
            ablation: &self.ablation,
        });
        StageHashes {
            teacher,
            intermediate,
            student,
        }
    }
}

fn digest<T: Serialize>(keys: &T) -> String {
    let json = serde_json::to_string(keys).expect("hash keys serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub teacher: String,
    pub intermediate: String,
    pub student: String,
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn parse_env_value(raw: &str, like: Option<&toml::Value>) -> toml::Value {
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, like) {
        (Some(toml::Value::Integer(i)), Some(toml::Value::Float(_))) => toml::Value::Float(i as f64),
        (Some(v), Some(l)) if std::mem::discriminant(&v) == std::mem::discriminant(l) => v,
        (Some(v), None) => v,
        _ => toml::Value::String(raw.to_string()),
    }
}

/// Applies `LIGHTPRUNE_<SECTION>_<KEY>` (or `LIGHTPRUNE_<KEY>` for top-level keys)
/// overrides. Names are matched case-insensitively against the known keys;
/// an unknown name is an error.
pub fn apply_env(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let defaults = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (name, raw) in vars {
        let rest = name[ENV_PREFIX.len()..].to_ascii_lowercase();
        let mut target: Option<(Option<String>, String, &toml::Value)> = None;
        for (key, value) in &defaults {
            match value {
                toml::Value::Table(section) => {
                    if let Some(sub) = rest.strip_prefix(&format!("{key}_")) {
                        if let Some((k, v)) = section.iter().find(|(k, _)| k.to_ascii_lowercase() == sub) {
                            target = Some((Some(key.clone()), k.clone(), v));
                        }
                    }
                }
                _ if key.to_ascii_lowercase() == rest => target = Some((None, key.clone(), value)),
                _ => {}
            }
        }
        let (section, key, like) = target.ok_or_else(|| Error::Config(format!("unknown override {name}")))?;
        let value = parse_env_value(&raw, Some(like));
        match section {
            None => {
                table.insert(key, value);
            }
            Some(section) => {
                let entry = table
                    .entry(section.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("[{section}] is not a table")))?
                    .insert(key, value);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[model]\nd = 16\nwidth = 3\n").is_err());
        assert!(RunConfig::from_toml("[nonsense]\n").is_err());
    }

    #[test]
    fn range_checks() {
        assert!(RunConfig::from_toml("[model]\nL = 2\nL_s = 3\n").is_err());
        assert!(RunConfig::from_toml("[augment]\nh = 0\n").is_err());
        assert!(RunConfig::from_toml("[loss]\ntau_emb = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[data]\ntrain = 0.5\nval = 0.1\ntest = 0.1\n").is_err());
    }

    #[test]
    fn env_overrides() {
        let cfg = RunConfig::from_env(env(&[
            ("LIGHTPRUNE_SEED", "9"),
            ("LIGHTPRUNE_MODEL_L_S", "1"),
            ("LIGHTPRUNE_LOSS_LAMBDA1", "0"),
            ("LIGHTPRUNE_DATA_SPLIT_MODE", "global"),
            ("PATH", "/usr/bin"),
        ]))
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.student_layers, 1);
        assert_eq!(cfg.loss.lambda1, 0.0);
        assert_eq!(cfg.data.split_mode, SplitMode::Global);
        assert!(RunConfig::from_env(env(&[("LIGHTPRUNE_MODEL_WIDTH", "3")])).is_err());
    }

    #[test]
    fn hashes_chain() {
        let base = RunConfig::default();
        let h = base.stage_hashes("x");
        let mut c = base.clone();
        c.student.beta1 = 0.5;
        let h2 = c.stage_hashes("x");
        assert_eq!(h.teacher, h2.teacher);
        assert_eq!(h.intermediate, h2.intermediate);
        assert_ne!(h.student, h2.student);
        let mut c = base.clone();
        c.optim.lr = 0.01;
        let h3 = c.stage_hashes("x");
        assert_ne!(h.teacher, h3.teacher);
        assert_ne!(h.intermediate, h3.intermediate);
        assert_ne!(h.student, h3.student);
        assert_ne!(h.teacher, base.stage_hashes("y").teacher);
    }

    #[test]
    fn automatic_delta() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.delta(), 1);
    }
}

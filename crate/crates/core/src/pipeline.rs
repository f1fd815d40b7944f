//! Teacher, intermediate and student stages, artifact reuse and the comparison report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::augment_graph;
use crate::checkpoint::{self, write_atomic, Metadata};
use crate::config::{file_digest, RunConfig, StageHashes};
use crate::data::{load_interactions, split_dataset, InteractionDataset, Split, SplitManifest};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, RankingMetrics};
use crate::graph::build_graph;
use crate::model::{Model, Role};
use crate::pruning::{self, compound_edge_weights, PruneLoopConfig, PruneLog};
use crate::rng;
use crate::train::{self, KdTarget, Objective, TrainLog};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Loads the configured interaction file and splits it.
pub fn prepare(cfg: &RunConfig) -> Result<InteractionDataset> {
    let ds = load_interactions(&cfg.data.path, cfg.data.min_degree)?;
    split_dataset(&ds, cfg.data.ratios(), cfg.data.split_mode, cfg.seed)
}

fn init_table(ds: &InteractionDataset, cfg: &RunConfig, role: Role) -> EmbeddingTable {
    let mut r = rng::substream(cfg.seed, rng::INIT, role.code() as u64);
    EmbeddingTable::xavier(ds.num_users, ds.num_items, cfg.model.d, &mut r)
}

fn sampling_rng(cfg: &RunConfig, role: Role) -> rng::StreamRng {
    rng::substream(cfg.seed, rng::SAMPLING, role.code() as u64)
}

pub fn train_teacher(ds: &InteractionDataset, cfg: &RunConfig) -> Result<(Model, TrainLog)> {
    let mut model = Model::teacher(build_graph(ds)?, init_table(ds, cfg, Role::Teacher), cfg.model.layers)?;
    let obj = Objective::bpr_only(cfg.loss.lambda4);
    let log = train::train(&mut model, ds, &cfg.train_config(cfg.teacher.epochs), &obj, &mut sampling_rng(cfg, Role::Teacher))?;
    Ok((model, log))
}

pub fn train_intermediate(ds: &InteractionDataset, teacher: &Model, cfg: &RunConfig) -> Result<(Model, TrainLog)> {
    let target = KdTarget::from_model(teacher)?;
    let aug = augment_graph(&build_graph(ds)?, cfg.augment.h, cfg.augment.cap(), cfg.augment.budget)?;
    log::info!(
        "intermediate graph: {} edges ({} augmented)",
        aug.graph.num_edges(),
        aug.num_augmented()
    );
    let emb = if cfg.intermediate.init_from_teacher {
        teacher.emb.clone()
    } else {
        init_table(ds, cfg, Role::Intermediate)
    };
    let mut model = Model::weighted(Role::Intermediate, aug.graph, emb, cfg.model.layers, aug.original)?;
    model.binary_propagation = cfg.ablation.binary_edge_weights;
    let obj = Objective {
        weights: cfg.intermediate_weights(),
        target: Some(&target),
        positives: None,
    };
    let tc = cfg.train_config(cfg.intermediate.epochs);
    let log = train::train(&mut model, ds, &tc, &obj, &mut sampling_rng(cfg, Role::Intermediate))?;
    Ok((model, log))
}

/// Builds the unpruned student over `source`'s graph with the fixed importance
/// offset, ready for the prune loop. `source` is the intermediate model, or the
/// teacher when the intermediate stage is disabled (its weights count as 1).
pub fn init_student(ds: &InteractionDataset, source: &Model, cfg: &RunConfig) -> Result<(Model, KdTarget)> {
    let target = KdTarget::from_model(source)?;
    let emb = if cfg.student.init_from_intermediate {
        source.emb.clone()
    } else {
        init_table(ds, cfg, Role::Student)
    };
    let mut model = Model::weighted(Role::Student, source.graph.clone(), emb, cfg.model.layers, source.original.clone())?;
    pruning::reduce_layers(&mut model, cfg.model.student_layers)?;
    model.binary_propagation = cfg.ablation.binary_edge_weights;
    let (beta1, beta2) = cfg.betas();
    if beta1 != 0.0 || beta2 != 0.0 {
        let ones = vec![1.0; source.num_edges()];
        let teacher_w = source.decision_weights().unwrap_or(ones);
        let ws = model.edge_weights.clone().expect("weighted model");
        let decision = compound_edge_weights(&model.graph, &ws, &source.graph, &teacher_w, &target, beta1, beta2)?;
        model.weight_offset = Some(decision.offset());
    }
    Ok((model, target))
}

pub fn train_student(ds: &InteractionDataset, source: &Model, cfg: &RunConfig) -> Result<(Model, PruneLog)> {
    let (mut model, target) = init_student(ds, source, cfg)?;
    let loop_cfg = PruneLoopConfig {
        schedule: cfg.schedule(),
        train: cfg.train_config(0),
        delta: cfg.delta(),
        random_edges: cfg.ablation.random_edge_drop,
        random_embeddings: cfg.ablation.random_emb_drop,
        original_edges: ds.train.len(),
    };
    let mut train_rng = sampling_rng(cfg, Role::Student);
    let mut prune_rng = rng::stream(cfg.seed, rng::PRUNE);
    let log = pruning::prune_train_loop(
        &mut model,
        ds,
        &loop_cfg,
        cfg.student_weights(),
        Some(&target),
        &mut train_rng,
        &mut prune_rng,
    )?;
    model.freeze_weights();
    Ok((model, log))
}

/// Exclusive ownership of a run directory for the guard's lifetime.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Trained,
    Reused,
}

fn load_if_fresh(path: &Path, expected: &str, force: bool) -> Result<Option<Model>> {
    if !path.exists() {
        return Ok(None);
    }
    let (model, meta) = checkpoint::load(path)?;
    if meta.config_hash == expected {
        return Ok(Some(model));
    }
    if force {
        log::warn!("reusing stale {} (--force-reuse)", path.display());
        return Ok(Some(model));
    }
    Err(Error::StaleArtifact {
        path: path.to_path_buf(),
        found: meta.config_hash,
        expected: expected.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Which stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StopAfter {
    Teacher,
    Intermediate,
    Student,
}

#[derive(Debug)]
pub struct StageRun {
    pub dataset: InteractionDataset,
    pub hashes: StageHashes,
    pub teacher: Model,
    pub intermediate: Option<Model>,
    pub student: Option<Model>,
    pub status: Vec<(Role, StageStatus)>,
}

/// Runs (or reuses) stages up to `stop` inside `run_dir`.
pub fn run_stages(cfg: &RunConfig, run_dir: &Path, stop: StopAfter, force_reuse: bool) -> Result<StageRun> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let _lock = RunLock::acquire(run_dir)?;
    let ds = prepare(cfg)?;
    let hashes = cfg.stage_hashes(&file_digest(&cfg.data.path)?);
    write_text(&run_dir.join("config.resolved"), &cfg.to_toml())?;
    let manifest = SplitManifest::new(&ds, cfg.data.ratios(), cfg.data.split_mode, cfg.seed);
    write_text(&run_dir.join("split.json"), &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    let mut status = Vec::new();

    let ckpt = |role: Role| run_dir.join(format!("{}.ckpt", role.name()));
    let meta = |hash: &str| Metadata {
        config_hash: hash.to_string(),
    };

    let teacher = match load_if_fresh(&ckpt(Role::Teacher), &hashes.teacher, force_reuse)? {
        Some(m) => {
            status.push((Role::Teacher, StageStatus::Reused));
            m
        }
        None => {
            let (m, log) = train_teacher(&ds, cfg)?;
            write_text(&run_dir.join("teacher_train.csv"), &log.to_csv())?;
            checkpoint::save(&ckpt(Role::Teacher), &m, &meta(&hashes.teacher))?;
            status.push((Role::Teacher, StageStatus::Trained));
            m
        }
    };

    let mut intermediate = None;
    if stop >= StopAfter::Intermediate && !cfg.ablation.disable_intermediate {
        intermediate = Some(match load_if_fresh(&ckpt(Role::Intermediate), &hashes.intermediate, force_reuse)? {
            Some(m) => {
                status.push((Role::Intermediate, StageStatus::Reused));
                m
            }
            None => {
                let (m, log) = train_intermediate(&ds, &teacher, cfg)?;
                write_text(&run_dir.join("intermediate_train.csv"), &log.to_csv())?;
                checkpoint::save(&ckpt(Role::Intermediate), &m, &meta(&hashes.intermediate))?;
                status.push((Role::Intermediate, StageStatus::Trained));
                m
            }
        });
    }

    let mut student = None;
    if stop >= StopAfter::Student {
        student = Some(match load_if_fresh(&ckpt(Role::Student), &hashes.student, force_reuse)? {
            Some(m) => {
                status.push((Role::Student, StageStatus::Reused));
                m
            }
            None => {
                let source = intermediate.as_ref().unwrap_or(&teacher);
                let (m, log) = train_student(&ds, source, cfg)?;
                write_text(&run_dir.join("student_rounds.csv"), &log.to_csv())?;
                write_text(&run_dir.join("student_train.csv"), &log.epochs_csv())?;
                checkpoint::save(&ckpt(Role::Student), &m, &meta(&hashes.student))?;
                status.push((Role::Student, StageStatus::Trained));
                m
            }
        });
    }

    Ok(StageRun {
        dataset: ds,
        hashes,
        teacher,
        intermediate,
        student,
        status,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub schema_version: u32,
    pub build_id: String,
    pub run_id: String,
    pub config_hash: String,
    pub stage_hashes: StageHashes,
    pub num_users: usize,
    pub num_items: usize,
    pub train_interactions: usize,
    pub popularity_test: RankingMetrics,
    pub models: Vec<EvalReport>,
}

pub fn build_id() -> String {
    format!("lightprune-{}", option_env!("LIGHTPRUNE_BUILD_ID").unwrap_or(env!("CARGO_PKG_VERSION")))
}

impl PipelineReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "run_id,role,recall20,ndcg20,recall40,ndcg40,mad,flops_total,flops_propagation,parameters,serialized_bytes,edges,kept_edge_ratio,kept_entry_ratio,layers,median_secs\n",
        );
        for m in &self.models {
            let get = |v: &[(usize, f64)], n: usize| v.iter().find(|x| x.0 == n).map_or(f64::NAN, |x| x.1);
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.run_id,
                m.role,
                get(&m.recall, 20),
                get(&m.ndcg, 20),
                get(&m.recall, 40),
                get(&m.ndcg, 40),
                m.mad,
                m.flops.total,
                m.flops.propagation,
                m.storage.parameters,
                m.storage.serialized_bytes,
                m.edges,
                m.kept_edge_ratio,
                m.kept_entry_ratio,
                m.layers,
                m.timing.as_ref().map_or(String::new(), |t| t.median_secs.to_string()),
            )
            .unwrap();
        }
        s
    }
}

/// Evaluates every trained model on the test split.
pub fn evaluate_run(run: &StageRun, cfg: &RunConfig) -> Result<PipelineReport> {
    let ds = &run.dataset;
    let original = ds.train.len();
    let mut models = vec![eval::evaluate_model(&run.teacher, ds, original, cfg.eval.timing_repetitions)?];
    for m in [&run.intermediate, &run.student].into_iter().flatten() {
        models.push(eval::evaluate_model(m, ds, original, cfg.eval.timing_repetitions)?);
    }
    Ok(PipelineReport {
        schema_version: REPORT_SCHEMA_VERSION,
        build_id: build_id(),
        run_id: cfg.run_id.clone(),
        config_hash: run.hashes.student.clone(),
        stage_hashes: run.hashes.clone(),
        num_users: ds.num_users,
        num_items: ds.num_items,
        train_interactions: original,
        popularity_test: eval::popularity_baseline(ds, Split::Test, &eval::DEFAULT_CUTOFFS)?,
        models,
    })
}

/// Full pipeline: all stages, evaluation, `report.json` and `report.csv`.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path, force_reuse: bool) -> Result<(PipelineReport, StageRun)> {
    let run_dir = out_dir.join(&cfg.run_id);
    let run = run_stages(cfg, &run_dir, StopAfter::Student, force_reuse)?;
    let report = evaluate_run(&run, cfg)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_text(&run_dir.join("report.json"), &json)?;
    write_text(&run_dir.join("report.csv"), &report.to_csv())?;
    Ok((report, run))
}

/// Concatenates CSV files sharing one header.
pub fn merge_csv(paths: &[PathBuf]) -> Result<String> {
    let mut out = String::new();
    let mut header: Option<String> = None;
    for p in paths {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let mut lines = text.lines();
        let h = lines.next().unwrap_or_default().to_string();
        match &header {
            None => {
                out.push_str(&h);
                out.push('\n');
                header = Some(h);
            }
            Some(first) if *first != h => {
                return Err(Error::InvalidArgument(format!("{}: header differs from the first file", p.display())));
            }
            Some(_) => {}
        }
        for l in lines.filter(|l| !l.is_empty()) {
            out.push_str(l);
            out.push('\n');
        }
    }
    Ok(out)
}

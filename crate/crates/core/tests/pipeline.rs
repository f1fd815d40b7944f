use std::path::Path;

use lightprune::config::RunConfig;
use lightprune::error::Error;
use lightprune::pipeline::{run_stages, StageStatus, StopAfter};
use lightprune::model::Role;
use lightprune::synth::{synth_planted, SynthConfig};

fn tiny(dir: &Path) -> RunConfig {
    synth_planted(&SynthConfig {
        users: 100,
        items: 60,
        clusters: 3,
        intra_p: 0.12,
        ..SynthConfig::default()
    })
    .unwrap()
    .write(&dir.join("data"))
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.path = dir.join("data").join("interactions.tsv");
    cfg.data.min_degree = 1;
    cfg.teacher.epochs = 2;
    cfg.intermediate.epochs = 2;
    cfg.student.rounds = 1;
    cfg.student.epochs_per_round = 1;
    cfg.student.finetune_epochs = 1;
    cfg.optim.batch_size = 256;
    cfg
}

fn status(run: &lightprune::pipeline::StageRun, role: Role) -> StageStatus {
    run.status.iter().find(|(r, _)| *r == role).unwrap().1
}

#[test]
fn second_run_reuses_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run_dir = dir.path().join("run");
    let first = run_stages(&cfg, &run_dir, StopAfter::Student, false).unwrap();
    assert!(first.status.iter().all(|(_, s)| *s == StageStatus::Trained));
    let second = run_stages(&cfg, &run_dir, StopAfter::Student, false).unwrap();
    assert!(second.status.iter().all(|(_, s)| *s == StageStatus::Reused));
    assert_eq!(first.student, second.student);
}

#[test]
fn changed_config_makes_downstream_artifacts_stale() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    let run_dir = dir.path().join("run");
    run_stages(&cfg, &run_dir, StopAfter::Student, false).unwrap();
    cfg.intermediate.epochs = 3;
    let err = run_stages(&cfg, &run_dir, StopAfter::Student, false).unwrap_err();
    match err {
        Error::StaleArtifact { path, .. } => assert!(path.ends_with("intermediate.ckpt")),
        e => panic!("expected a stale artifact, got {e}"),
    }
    let forced = run_stages(&cfg, &run_dir, StopAfter::Student, true).unwrap();
    assert_eq!(status(&forced, Role::Teacher), StageStatus::Reused);
    assert_eq!(status(&forced, Role::Intermediate), StageStatus::Reused);
}

#[test]
fn student_only_change_keeps_upstream_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut other = cfg.clone();
    other.student.edge_keep = 0.5;
    let digest = lightprune::config::file_digest(&cfg.data.path).unwrap();
    let (a, b) = (cfg.stage_hashes(&digest), other.stage_hashes(&digest));
    assert_eq!(a.teacher, b.teacher);
    assert_eq!(a.intermediate, b.intermediate);
    assert_ne!(a.student, b.student);
}

#[test]
fn corrupted_checkpoint_is_rejected_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run_dir = dir.path().join("run");
    run_stages(&cfg, &run_dir, StopAfter::Teacher, false).unwrap();
    let ckpt = run_dir.join("teacher.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&ckpt, bytes).unwrap();
    let err = run_stages(&cfg, &run_dir, StopAfter::Teacher, false).unwrap_err().to_string();
    assert!(err.contains("teacher.ckpt") && err.contains("integrity check failed"), "{err}");
}

#[test]
fn locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run_dir = dir.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join(".lock"), "").unwrap();
    let err = run_stages(&cfg, &run_dir, StopAfter::Teacher, false).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
}

#[test]
fn disabled_intermediate_skips_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.ablation.disable_intermediate = true;
    let run = run_stages(&cfg, &dir.path().join("run"), StopAfter::Student, false).unwrap();
    assert!(run.intermediate.is_none());
    let student = run.student.unwrap();
    assert!(student.graph.num_edges() <= run.dataset.train.len());
}

#[test]
fn teacher_artifact_untouched_by_later_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let run_dir = dir.path().join("run");
    run_stages(&cfg, &run_dir, StopAfter::Teacher, false).unwrap();
    let before = std::fs::read(run_dir.join("teacher.ckpt")).unwrap();
    run_stages(&cfg, &run_dir, StopAfter::Student, false).unwrap();
    assert_eq!(before, std::fs::read(run_dir.join("teacher.ckpt")).unwrap());
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lightprune::checkpoint;
use lightprune::config::RunConfig;
use lightprune::data::save_prepared;
use lightprune::data::SplitManifest;
use lightprune::error::{Error, Result};
use lightprune::eval;
use lightprune::pipeline::{self, StopAfter};
use lightprune::synth::{synth_planted, SynthConfig};

#[derive(Parser)]
#[command(name = "lightprune", version, about = "Pruned graph collaborative filtering through staged distillation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root; runs live in `<out-dir>/<run_id>`.
    #[arg(long, global = true, default_value = "artifacts")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Reuse stage artifacts even when their config hash is stale.
    #[arg(long, global = true)]
    force_reuse: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest and split the interaction file.
    Prepare,
    /// Train (or reuse) the plain teacher.
    TrainTeacher,
    /// Teacher, then the weighted model on the augmented graph.
    TrainIntermediate,
    /// All three stages, ending with the pruned student.
    TrainStudent,
    /// All stages, evaluation and report.
    Pipeline,
    /// Test-split metrics of one checkpoint, as JSON.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        timing_repetitions: usize,
    },
    /// Forward-pass timing of one checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
    },
    /// Planted-noise synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 500)]
        users: usize,
        #[arg(long, default_value_t = 400)]
        items: usize,
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        #[arg(long, default_value_t = 0.05)]
        intra_p: f64,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        skew: f64,
    },
    /// Concatenate CSV files with a shared header.
    Report {
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let env = std::env::vars();
    let mut cfg = match &g.config {
        Some(path) => RunConfig::load(path, env)?,
        None => RunConfig::from_env(env)?,
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn load_checkpoint(path: &Path) -> Result<lightprune::model::Model> {
    checkpoint::load(path).map(|(m, _)| m)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if g.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(g.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    match cli.command {
        Command::Prepare => {
            let cfg = load_config(g)?;
            let ds = pipeline::prepare(&cfg)?;
            let manifest = SplitManifest::new(&ds, cfg.data.ratios(), cfg.data.split_mode, cfg.seed);
            save_prepared(&g.out_dir.join(&cfg.run_id).join("prepared"), &ds, &manifest)?;
            print_json(&manifest);
        }
        Command::TrainTeacher | Command::TrainIntermediate | Command::TrainStudent => {
            let stop = match cli.command {
                Command::TrainTeacher => StopAfter::Teacher,
                Command::TrainIntermediate => StopAfter::Intermediate,
                _ => StopAfter::Student,
            };
            let cfg = load_config(g)?;
            let run = pipeline::run_stages(&cfg, &g.out_dir.join(&cfg.run_id), stop, g.force_reuse)?;
            for (role, status) in &run.status {
                println!("{}: {:?}", role.name(), status);
            }
        }
        Command::Pipeline => {
            let cfg = load_config(g)?;
            let (report, run) = pipeline::run_pipeline(&cfg, &g.out_dir, g.force_reuse)?;
            for (role, status) in &run.status {
                eprintln!("{}: {:?}", role.name(), status);
            }
            print!("{}", report.to_csv());
        }
        Command::Evaluate {
            checkpoint,
            timing_repetitions,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let cfg = load_config(g)?;
            let ds = pipeline::prepare(&cfg)?;
            print_json(&eval::evaluate_model(&model, &ds, ds.train.len(), timing_repetitions)?);
        }
        Command::Bench { checkpoint, repetitions } => {
            let model = load_checkpoint(&checkpoint)?;
            print_json(&eval::timing_bench(&model, repetitions)?);
        }
        Command::Synth {
            users,
            items,
            clusters,
            intra_p,
            noise,
            skew,
        } => {
            let cfg = SynthConfig {
                users,
                items,
                clusters,
                intra_p,
                noise_fraction: noise,
                popularity_skew: skew,
                seed: g.seed.unwrap_or(1),
            };
            let d = synth_planted(&cfg)?;
            d.write(&g.out_dir)?;
            println!(
                "{} edges ({} noise) written to {}",
                d.pairs.len(),
                d.num_noise(),
                g.out_dir.display()
            );
        }
        Command::Report { inputs, output } => {
            let merged = pipeline::merge_csv(&inputs)?;
            match output {
                Some(p) => checkpoint::write_atomic(&p, merged.as_bytes())?,
                None => print!("{merged}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedmoe::orchestrator::{ablate, report, run_stage, PipelineConfig, RunPaths, STAGES};
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "fedmoe", about = "One-shot federated MoE training simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline config (JSON) or a run manifest to replay. Defaults to the
    /// run directory's config.json, then to the built-in fixture.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,

    /// Worker threads for device training and distillation.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Rounds of the multi-round baseline in the cost comparison.
    #[arg(long, global = true)]
    rounds: Option<usize>,

    /// Start from the small four-device preset instead of the fixture.
    #[arg(long, global = true)]
    smoke: bool,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate corpora, shards and device embeddings.
    GenData,
    /// Train every device model and record the one-shot upload.
    TrainDevices,
    /// Cluster devices and build proxy teachers.
    Cluster,
    /// Build the shared student init and distill each proxy.
    Distill,
    /// Merge the distilled bases into the MoE.
    Merge,
    /// Tune the MoE with experts frozen.
    Tune,
    /// Score all models and write metrics and the manifest.
    Evaluate,
    /// Run the pipeline with and without feature matching.
    Ablate,
    /// Run every stage.
    RunAll,
    /// Print a summary of a finished run.
    Report,
    /// Print the resolved config as JSON.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<&'static str> {
        Some(match self {
            Command::GenData => "gen-data",
            Command::TrainDevices => "train-devices",
            Command::Cluster => "cluster",
            Command::Distill => "distill",
            Command::Merge => "merge",
            Command::Tune => "tune",
            Command::Evaluate => "evaluate",
            _ => return None,
        })
    }
}

fn resolve_config(cli: &Cli) -> Result<PipelineConfig> {
    let saved = cli.out.join("config.json");
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None if saved.exists() && !cli.smoke => PipelineConfig::load(&saved)?,
        None if cli.smoke => PipelineConfig::smoke(),
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.rounds {
        cfg.baseline_rounds = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn timed(stage: &str, cfg: &PipelineConfig, paths: &RunPaths) -> Result<()> {
    let t = Instant::now();
    run_stage(stage, cfg, paths)?;
    eprintln!("{stage:<14} {:>8.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let paths = RunPaths::new(&cli.out);
    match cli.command {
        Command::Report => {
            print!("{}", report(&paths)?);
        }
        Command::ShowConfig => {
            println!("{}", resolve_config(&cli)?.to_json());
        }
        Command::Ablate => {
            let cfg = resolve_config(&cli)?;
            let r = ablate(&cfg, &paths)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::RunAll => {
            let cfg = resolve_config(&cli)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(cli.out.join("config.json"), cfg.to_json() + "\n")?;
            for stage in STAGES {
                timed(stage, &cfg, &paths)?;
            }
            print!("{}", report(&paths)?);
        }
        cmd => {
            let cfg = resolve_config(&cli)?;
            if cmd == Command::GenData {
                std::fs::create_dir_all(&cli.out)?;
                std::fs::write(cli.out.join("config.json"), cfg.to_json() + "\n")?;
            }
            timed(cmd.stage().expect("stage command"), &cfg, &paths)?;
        }
    }
    Ok(())
}

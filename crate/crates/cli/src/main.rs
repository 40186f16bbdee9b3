use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use decap_core::pipeline::{self, ExportKind, RunConfig, SweepSpec, TrainMode, CHECKPOINT_FILE, CONFIG_FILE};
use decap_core::ppo::Checkpoint;
use decap_core::{imitation, Error, Result};

/// Two-stage legged locomotion training: position policy, imitation
/// recording, torque policy with a decaying PD prior.
#[derive(Parser, Debug)]
#[command(name = "decap-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set ppo.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for this run (default: $DECAP_LAB_DIR/<run name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Stage 1: train the joint-position policy.
    TrainPosition {
        #[command(flatten)]
        common: Common,
    },
    /// Roll out a stage-1 policy and store the tracked motion.
    RecordImitation {
        /// Stage-1 run directory (config and checkpoint are read from it).
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Dataset path (default: <run>/imitation.imit).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Stage 2: train a torque policy.
    TrainTorque {
        #[command(flatten)]
        common: Common,
        /// scratch, imitation or decap.
        #[arg(long)]
        mode: Option<TrainMode>,
        #[arg(long)]
        imitation: Option<PathBuf>,
    },
    /// Deterministic evaluation of a trained run.
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Stage-1 run whose policy assists the torque policy through low-gain PD.
        #[arg(long)]
        assist_run: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Metrics file (default: <run>/eval.json).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Imitation weight sweep over scales, modes and seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        imitation: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 1.0, 5.0, 10.0])]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values = ["imitation", "decap"])]
        modes: Vec<TrainMode>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        /// Cells trained in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write plot-ready CSV from a run or sweep directory.
    Export {
        #[arg(long)]
        run: PathBuf,
        /// learning-curve, rmse-table, reward-breakdown or gait-trace.
        #[arg(long)]
        what: ExportKind,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn output_root() -> PathBuf {
    std::env::var_os("DECAP_LAB_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_config(common: &Common, base: Option<RunConfig>, extra: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = match (&common.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(cfg)) => cfg,
        (None, None) => RunConfig::default(),
    };
    cfg = cfg.with_overrides(&common.sets)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    extra(&mut cfg);
    Ok(cfg)
}

fn run_dir(common: &Common, name: String) -> PathBuf {
    common.out.clone().unwrap_or_else(|| output_root().join(name))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainPosition { common } => {
            let cfg = build_config(&common, None, |_| {})?;
            let dir = run_dir(&common, format!("position-{}-seed{}", cfg.robot, cfg.seed));
            pipeline::write_config(&cfg, &dir)?;
            let out = pipeline::train_position(&cfg, &dir)?;
            println!("{}", out.run_dir.display());
        }
        Command::RecordImitation { run, common, output } => {
            let base = RunConfig::load(&run.join(CONFIG_FILE))?;
            let cfg = build_config(&common, Some(base), |_| {})?;
            let dir = common.out.clone().unwrap_or_else(|| run.clone());
            pipeline::write_config(&cfg, &dir)?;
            let ckpt = Checkpoint::load(&run.join(CHECKPOINT_FILE))?;
            let source = run.canonicalize().map_err(|e| Error::io(&run, e))?;
            let rec = pipeline::record(&cfg, &ckpt, Some(&source.to_string_lossy()))?;
            let path = output.unwrap_or_else(|| dir.join("imitation.imit"));
            imitation::save(&rec.dataset, &path)?;
            println!("{}", path.display());
        }
        Command::TrainTorque { common, mode, imitation } => {
            let cfg = build_config(&common, None, |cfg| {
                if let Some(m) = mode {
                    cfg.mode = m;
                }
                if imitation.is_some() {
                    cfg.imitation = imitation.clone();
                }
            })?;
            if cfg.mode == TrainMode::Position {
                return Err(Error::validation("mode", "train-torque needs --mode scratch, imitation or decap"));
            }
            cfg.validate()?;
            let dir = run_dir(&common, format!("{}-{}-seed{}", cfg.mode.as_str(), cfg.robot, cfg.seed));
            pipeline::write_config(&cfg, &dir)?;
            let out = pipeline::train_torque(&cfg, &dir)?;
            println!("{}", out.run_dir.display());
        }
        Command::Evaluate {
            run,
            episodes,
            assist_run,
            sets,
            output,
        } => {
            let cfg = RunConfig::load(&run.join(CONFIG_FILE))?.with_overrides(&sets)?;
            let ckpt = Checkpoint::load(&run.join(CHECKPOINT_FILE))?;
            let assist = assist_run
                .map(|dir| Checkpoint::load(&dir.join(CHECKPOINT_FILE)))
                .transpose()?;
            let metrics = pipeline::evaluate(&cfg, &ckpt, episodes, assist.as_ref())?;
            let text = serde_json::to_string_pretty(&metrics)?;
            let path = output.unwrap_or_else(|| run.join("eval.json"));
            std::fs::write(&path, format!("{text}\n")).map_err(|e| Error::io(&path, e))?;
            println!("{text}");
        }
        Command::Sweep {
            common,
            imitation,
            scales,
            modes,
            seeds,
            jobs,
        } => {
            let cfg = build_config(&common, None, |cfg| {
                if imitation.is_some() {
                    cfg.imitation = imitation.clone();
                }
                if !cfg.mode.uses_imitation_rewards() {
                    cfg.mode = TrainMode::Imitation;
                }
            })?;
            let dir = run_dir(&common, format!("sweep-{}", cfg.robot));
            pipeline::write_config(&cfg, &dir)?;
            let spec = SweepSpec { scales, modes, seeds };
            let rows = pipeline::sweep(&cfg, &spec, &dir, jobs)?;
            let failed = rows.iter().filter(|r| r.status != "completed").count();
            println!("{}", dir.join(pipeline::SWEEP_CSV).display());
            if failed > 0 {
                log::warn!("{failed} of {} sweep cells failed", rows.len());
            }
        }
        Command::Export { run, what, output } => {
            if !run.is_dir() {
                return Err(Error::MissingArtifact(run));
            }
            let path = pipeline::export(&run, what, output.as_deref())?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.class(), one_line(&e.to_string()));
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}

fn one_line(s: &str) -> String {
    s.lines().collect::<Vec<_>>().join(" ")
}

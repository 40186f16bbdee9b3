//! Two-stage workflow: position policy, imitation recording, torque training,
//! evaluation, weight sweeps and CSV export.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::control::{ActionConfig, ActionMode, GainSpec};
use crate::dynamics::forward_kinematics;
use crate::env::{stream_rng, EnvPool, EnvSetup, EnvStats, TaskConfig, TraceRow};
use crate::error::{Error, Result};
use crate::imitation::{self, ImitationDataset, ImitationFrame, ImitationHeader, Trajectory};
use crate::ppo::{
    collect_rollouts, ppo_update, Checkpoint, Learner, PolicyParameters, PpoConfig, RolloutSettings, UpdateStats, VecEnv,
};
use crate::robots::{self, RobotModel};
use crate::task::{Command, ImitationTerms, Observation, RewardWeights, ShapingTerms};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const MANIFEST_CSV: &str = "manifest.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "policy.ckpt";
pub const TIMING_FILE: &str = "timing.json";
pub const TRACE_FILE: &str = "gait_trace.jsonl";
pub const SWEEP_FILE: &str = "sweep.jsonl";
pub const SWEEP_CSV: &str = "sweep.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Stage 1: joint-position actions through PD.
    Position,
    /// Torque actions, task rewards only.
    Scratch,
    /// Torque actions plus imitation rewards.
    Imitation,
    /// Imitation rewards plus the decaying PD prior.
    Decap,
}

impl TrainMode {
    pub fn action_mode(self) -> ActionMode {
        match self {
            TrainMode::Position => ActionMode::Position,
            TrainMode::Scratch | TrainMode::Imitation => ActionMode::Torque,
            TrainMode::Decap => ActionMode::Decap,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Position => "position",
            TrainMode::Scratch => "scratch",
            TrainMode::Imitation => "imitation",
            TrainMode::Decap => "decap",
        }
    }

    pub fn uses_imitation_rewards(self) -> bool {
        matches!(self, TrainMode::Imitation | TrainMode::Decap)
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(Value::String(s.into()))
            .map_err(|_| Error::validation("mode", format!("unknown mode `{s}`")))
    }
}

/// Periodic deterministic evaluation during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Probe every this many iterations (and after the last one).
    pub interval: usize,
    /// Environments per probe; commands spread evenly over the command range.
    pub n_envs: usize,
    pub steps: usize,
    /// Probes averaged into the final RMSE.
    pub final_probes: usize,
    /// Decay clock used by `evaluate`; defaults to the end of training.
    pub decay_step: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            interval: 10,
            n_envs: 4,
            steps: 500,
            final_probes: 3,
            decay_step: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordConfig {
    /// Forward velocity commands, one trajectory each.
    pub commands: Vec<f64>,
    pub steps: usize,
    pub settle: usize,
}

impl Default for RecordConfig {
    fn default() -> Self {
        RecordConfig {
            commands: vec![0.3, 0.475, 0.65, 0.825, 1.0],
            steps: 500,
            settle: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Bundled model name or path to a `.model` file.
    pub robot: String,
    pub seed: u64,
    pub mode: TrainMode,
    /// `.imit` dataset for imitation and decap runs.
    pub imitation: Option<PathBuf>,
    pub action: ActionConfig,
    pub rewards: RewardWeights,
    pub ppo: PpoConfig,
    pub task: TaskConfig,
    pub eval: EvalConfig,
    pub record: RecordConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            robot: "hopper".into(),
            seed: 0,
            mode: TrainMode::Position,
            imitation: None,
            action: ActionConfig::default(),
            rewards: RewardWeights::default(),
            ppo: PpoConfig::default(),
            task: TaskConfig::default(),
            eval: EvalConfig::default(),
            record: RecordConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            match msg.strip_prefix("unknown field `") {
                Some(rest) => Error::UnknownKey(rest.split('`').next().unwrap_or(rest).to_string()),
                None => Error::validation("config", msg),
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `dotted.key=value` overrides. Values parse as JSON, falling back to strings.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for set in sets {
            let set = set.as_ref();
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| Error::validation("override", format!("expected key=value, got `{set}`")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut value;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map.get_mut(part),
                    Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
                    _ => None,
                }
                .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
            }
            *slot = parsed;
        }
        Self::from_value(value)
    }

    /// Action config with the mode implied by `mode`.
    pub fn action_config(&self) -> ActionConfig {
        ActionConfig {
            mode: self.mode.action_mode(),
            ..self.action.clone()
        }
    }

    pub fn model(&self) -> Result<RobotModel> {
        robots::resolve(&self.robot)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model()?;
        self.action_config().validate(model.n_joints())?;
        self.rewards.validate()?;
        self.ppo.validate()?;
        self.task.validate()?;
        if self.eval.n_envs == 0 || self.eval.steps == 0 || self.eval.interval == 0 || self.eval.final_probes == 0 {
            return Err(Error::validation("eval", "interval, n_envs, steps and final_probes must be positive"));
        }
        if self.record.settle >= self.record.steps {
            return Err(Error::validation("record.settle", "must be smaller than record.steps"));
        }
        if self.record.commands.is_empty() {
            return Err(Error::validation("record.commands", "at least one command is required"));
        }
        match (self.mode.uses_imitation_rewards(), &self.imitation) {
            (true, None) => Err(Error::MissingField("imitation".into())),
            (_, Some(p)) if !p.exists() => Err(Error::MissingArtifact(p.clone())),
            _ => Ok(()),
        }
    }

    /// Sha256 of the canonical JSON snapshot.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }
}

/// Commands spread evenly over the configured ranges.
pub fn probe_commands(ranges: &crate::task::CommandRanges, n: usize) -> Vec<Command> {
    let lerp = |r: [f64; 2], i: usize| {
        if n == 1 {
            0.5 * (r[0] + r[1])
        } else {
            let t = i as f64 / (n - 1) as f64;
            r[0] * (1.0 - t) + r[1] * t
        }
    };
    (0..n)
        .map(|i| Command {
            v_cmd: lerp(ranges.v_cmd, i),
            w_cmd: lerp(ranges.w_cmd, i),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Mean over probe envs of the summed reward in the window.
    pub reward: f64,
    pub rmse: Option<f64>,
    /// Mean |v_cmd − v_x|.
    pub tracking_error: f64,
    pub falls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub kind: String,
    pub format_version: u32,
    pub robot: String,
    pub mode: TrainMode,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub imitation_checkpoint_id: Option<String>,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub n_params: usize,
    pub eval_protocol: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub kind: String,
    pub iteration: usize,
    pub global_step: u64,
    /// Per-transition mean of the training reward; equals the sum of the term means.
    pub mean_reward: f64,
    pub shaping: ShapingTerms,
    pub imitation: ImitationTerms,
    pub decay_factor: f64,
    pub episodes: u64,
    pub falls: u64,
    pub faults: u64,
    pub mean_episode_return: Option<f64>,
    pub train_rmse: Option<f64>,
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
    pub eval: Option<ProbeResult>,
}

impl ManifestRow {
    pub fn breakdown_sum(&self) -> f64 {
        self.shaping.total() + self.imitation.total()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFooter {
    pub kind: String,
    pub status: String,
    pub iterations: usize,
    pub global_step: u64,
    pub checkpoint: Option<String>,
    pub checkpoint_id: Option<String>,
    pub final_rmse: Option<f64>,
    pub final_eval_reward: Option<f64>,
    pub final_tracking_error: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub rows: Vec<ManifestRow>,
    pub footer: Option<ManifestFooter>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut header = None;
        let mut rows = Vec::new();
        let mut footer = None;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&path, e))?;
            let parse_err = |e: serde_json::Error| Error::Parse {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            };
            let value: Value = serde_json::from_str(&line).map_err(parse_err)?;
            match value.get("kind").and_then(Value::as_str) {
                Some("header") => header = Some(serde_json::from_value(value).map_err(parse_err)?),
                Some("iteration") => rows.push(serde_json::from_value(value).map_err(parse_err)?),
                Some("summary") => footer = Some(serde_json::from_value(value).map_err(parse_err)?),
                _ => {
                    return Err(Error::Parse {
                        path: path.clone(),
                        line: i + 1,
                        reason: "unknown record kind".into(),
                    })
                }
            }
        }
        let header = header.ok_or_else(|| Error::Parse {
            path: path.clone(),
            line: 1,
            reason: "missing header record".into(),
        })?;
        Ok(Manifest { header, rows, footer })
    }
}

fn manifest_csv_header() -> Vec<String> {
    let mut cols: Vec<String> = ["iteration", "global_step", "mean_reward"].map(String::from).to_vec();
    cols.extend(ShapingTerms::NAMES.iter().map(|s| s.to_string()));
    cols.extend(ImitationTerms::NAMES.iter().map(|s| s.to_string()));
    cols.extend(
        [
            "decay_factor",
            "episodes",
            "falls",
            "faults",
            "mean_episode_return",
            "train_rmse",
            "surrogate_loss",
            "value_loss",
            "entropy",
            "kl",
            "clip_fraction",
            "learning_rate",
            "eval_reward",
            "eval_rmse",
            "eval_tracking_error",
            "eval_falls",
        ]
        .map(String::from),
    );
    cols
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn manifest_csv_record(r: &ManifestRow) -> Vec<String> {
    let mut out = vec![r.iteration.to_string(), r.global_step.to_string(), r.mean_reward.to_string()];
    out.extend(r.shaping.values().iter().map(|v| v.to_string()));
    out.extend(r.imitation.values().iter().map(|v| v.to_string()));
    out.extend([
        r.decay_factor.to_string(),
        r.episodes.to_string(),
        r.falls.to_string(),
        r.faults.to_string(),
        opt(r.mean_episode_return),
        opt(r.train_rmse),
        r.surrogate_loss.to_string(),
        r.value_loss.to_string(),
        r.entropy.to_string(),
        r.kl.to_string(),
        r.clip_fraction.to_string(),
        r.learning_rate.to_string(),
        opt(r.eval.as_ref().map(|e| e.reward)),
        opt(r.eval.as_ref().and_then(|e| e.rmse)),
        opt(r.eval.as_ref().map(|e| e.tracking_error)),
        r.eval.as_ref().map(|e| e.falls.to_string()).unwrap_or_default(),
    ]);
    out
}

struct ManifestWriter {
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    path: PathBuf,
}

impl ManifestWriter {
    fn create(run_dir: &Path, header: &ManifestHeader) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut csv = csv::Writer::from_path(run_dir.join(MANIFEST_CSV))?;
        csv.write_record(manifest_csv_header())?;
        let mut w = ManifestWriter {
            jsonl: BufWriter::new(file),
            csv,
            path,
        };
        w.line(header)?;
        Ok(w)
    }

    fn line<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let text = serde_json::to_string(record)?;
        writeln!(self.jsonl, "{text}").map_err(|e| Error::io(&self.path, e))?;
        self.jsonl.flush().map_err(|e| Error::io(&self.path, e))
    }

    fn row(&mut self, row: &ManifestRow) -> Result<()> {
        self.line(row)?;
        self.csv.write_record(manifest_csv_record(row))?;
        self.csv.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParameters,
    pub checkpoint: Checkpoint,
    pub checkpoint_id: String,
    pub run_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub final_rmse: Option<f64>,
    pub final_eval_reward: Option<f64>,
    pub final_tracking_error: Option<f64>,
}

/// Writes the effective config before any other work.
pub fn write_config(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let path = run_dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_json() + "\n").map_err(|e| Error::io(&path, e))
}

fn env_setup<'a>(cfg: &RunConfig, model: &'a RobotModel, dataset: Option<&'a ImitationDataset>) -> Result<EnvSetup<'a>> {
    let action = cfg.action_config();
    Ok(EnvSetup {
        model,
        adapter: action.resolve(model)?,
        rewards: cfg.rewards.clone(),
        task: cfg.task.clone(),
        dataset,
        imitation_rewards: cfg.mode.uses_imitation_rewards(),
        decay_clock: action.decay_clock,
        dt: cfg.rewards.dt,
    })
}

fn init_log_std(cfg: &RunConfig) -> f64 {
    cfg.ppo.init_log_std.unwrap_or(0.0)
}

fn probe(
    cfg: &RunConfig,
    model: &RobotModel,
    dataset: Option<&ImitationDataset>,
    params: &PolicyParameters,
    global_step: u64,
    trace: bool,
) -> Result<(ProbeResult, Vec<TraceRow>)> {
    let commands = probe_commands(&cfg.task.commands, cfg.eval.n_envs);
    let mut pool = EnvPool::new(
        env_setup(cfg, model, dataset)?,
        commands.len(),
        Some(&commands),
        stream_rng(cfg.seed, 3),
    )?;
    pool.global_step = global_step;
    if trace {
        pool.trace_env = Some(0);
    }
    let mut returns = vec![0.0; commands.len()];
    for _ in 0..cfg.eval.steps {
        let obs = pool.observations();
        let out = params.eval(obs.view())?;
        let step = pool.step(out.mean.view())?;
        for (acc, r) in returns.iter_mut().zip(&step.rewards) {
            *acc += r;
        }
    }
    let stats = &pool.stats;
    let result = ProbeResult {
        reward: returns.iter().sum::<f64>() / returns.len() as f64,
        rmse: stats.rmse(),
        tracking_error: stats.tracking_error_sum / stats.transitions.max(1) as f64,
        falls: stats.falls + stats.faults,
    };
    Ok((result, std::mem::take(&mut pool.trace)))
}

fn load_dataset(cfg: &RunConfig) -> Result<Option<ImitationDataset>> {
    match &cfg.imitation {
        Some(path) => {
            let ds = imitation::load(path)?;
            ds.validate(1)?;
            Ok(Some(ds))
        }
        None => Ok(None),
    }
}

/// Stage 1: position policy on task rewards.
pub fn train_position(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    if cfg.mode != TrainMode::Position {
        return Err(Error::validation(
            "mode",
            format!("train-position requires mode `position`, got `{}`", cfg.mode.as_str()),
        ));
    }
    train(cfg, run_dir, None)
}

/// Stage 2: torque policy (scratch, imitation or decap).
pub fn train_torque(cfg: &RunConfig, run_dir: &Path) -> Result<TrainOutcome> {
    if cfg.mode == TrainMode::Position {
        return Err(Error::validation("mode", "train-torque requires mode scratch, imitation or decap"));
    }
    cfg.validate()?;
    let dataset = load_dataset(cfg)?;
    if let Some(ds) = &dataset {
        if let Provenance::Unverified(reason) = check_provenance(ds) {
            log::warn!("imitation data provenance not verified: {reason}");
        }
    }
    train(cfg, run_dir, dataset.as_ref())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Verified,
    Unverified(String),
}

/// Checks that the dataset's checkpoint id matches a completed stage-1 manifest.
pub fn check_provenance(ds: &ImitationDataset) -> Provenance {
    let Some(run) = &ds.header.source_run else {
        return Provenance::Unverified("dataset names no source run".into());
    };
    let manifest = match Manifest::load(Path::new(run)) {
        Ok(m) => m,
        Err(e) => return Provenance::Unverified(format!("no stage-1 manifest at `{run}`: {e}")),
    };
    if manifest.header.mode != TrainMode::Position {
        return Provenance::Unverified(format!("run `{run}` is not a position run"));
    }
    match manifest.footer.and_then(|f| f.checkpoint_id) {
        Some(id) if id == ds.header.checkpoint_id => Provenance::Verified,
        Some(id) => Provenance::Unverified(format!(
            "checkpoint id {} does not match stage-1 checkpoint {id}",
            ds.header.checkpoint_id
        )),
        None => Provenance::Unverified(format!("run `{run}` has no completed checkpoint")),
    }
}

fn train(cfg: &RunConfig, run_dir: &Path, dataset: Option<&ImitationDataset>) -> Result<TrainOutcome> {
    cfg.validate()?;
    write_config(cfg, run_dir)?;
    let model = cfg.model()?;
    let n = model.n_joints();
    let (obs_dim, act_dim) = (Observation::dim(n), n);

    let mut init_rng = stream_rng(cfg.seed, 0);
    let params = PolicyParameters::new(obs_dim, act_dim, &cfg.ppo.hidden, init_log_std(cfg), &mut init_rng);
    let mut learner = Learner::new(params, &cfg.ppo);
    let mut pool = EnvPool::new(env_setup(cfg, &model, dataset)?, cfg.ppo.n_envs, None, stream_rng(cfg.seed, 1))?;
    let mut act_rng = stream_rng(cfg.seed, 2);
    let mut update_rng = stream_rng(cfg.seed, 4);

    let header = ManifestHeader {
        kind: "header".into(),
        format_version: MANIFEST_VERSION,
        robot: model.name.clone(),
        mode: cfg.mode,
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        imitation_checkpoint_id: dataset.map(|d| d.header.checkpoint_id.clone()),
        obs_dim,
        act_dim,
        n_params: learner.params.n_params(),
        eval_protocol: format!(
            "every {} iterations and after the last: {} envs, commands evenly spaced over the command range, \
             {} deterministic steps, reset on termination; final values average the last {} probes",
            cfg.eval.interval, cfg.eval.n_envs, cfg.eval.steps, cfg.eval.final_probes
        ),
    };
    let mut writer = ManifestWriter::create(run_dir, &header)?;
    let settings = RolloutSettings {
        steps: cfg.ppo.steps_per_iteration,
        gamma: cfg.ppo.gamma,
        deterministic: false,
    };
    let mut rows = Vec::with_capacity(cfg.ppo.iterations);
    let mut probes: Vec<ProbeResult> = Vec::new();
    let mut timings = Vec::with_capacity(cfg.ppo.iterations);
    let started = Instant::now();

    for iteration in 1..=cfg.ppo.iterations {
        let tick = Instant::now();
        pool.stats = EnvStats::default();
        let result = collect_rollouts(&mut pool, &learner.params, settings, &mut act_rng).and_then(|mut batch| {
            let bootstrap = learner.params.value(pool.observations().view())?;
            batch.compute_advantages(bootstrap.view(), cfg.ppo.gamma, cfg.ppo.lambda);
            ppo_update(&mut learner, &batch, &cfg.ppo, &mut update_rng)
        });
        let update: UpdateStats = match result {
            Ok(u) => u,
            Err(e) => {
                let footer = ManifestFooter {
                    kind: "summary".into(),
                    status: "diverged".into(),
                    iterations: rows.len(),
                    global_step: pool.global_step,
                    checkpoint: None,
                    checkpoint_id: None,
                    final_rmse: None,
                    final_eval_reward: None,
                    final_tracking_error: None,
                    error: Some(e.to_string()),
                };
                writer.line(&footer)?;
                return Err(Error::Diverged(format!("iteration {iteration}: {e}")));
            }
        };
        let eval = if iteration % cfg.eval.interval == 0 || iteration == cfg.ppo.iterations {
            let last = iteration == cfg.ppo.iterations;
            let (p, trace) = probe(cfg, &model, dataset, &learner.params, pool.global_step, last)?;
            if last {
                write_trace(&run_dir.join(TRACE_FILE), &trace)?;
            }
            probes.push(p.clone());
            Some(p)
        } else {
            None
        };
        let stats = &pool.stats;
        let shaping = stats.shaping_means();
        let imitation_terms = stats.imitation_means();
        let row = ManifestRow {
            kind: "iteration".into(),
            iteration,
            global_step: pool.global_step,
            mean_reward: shaping.total() + imitation_terms.total(),
            shaping,
            imitation: imitation_terms,
            decay_factor: match cfg.mode {
                TrainMode::Decap => pool.current_decay_factor(),
                _ => 0.0,
            },
            episodes: stats.episodes,
            falls: stats.falls,
            faults: stats.faults,
            mean_episode_return: (stats.episodes > 0).then(|| stats.return_sum / stats.episodes as f64),
            train_rmse: stats.rmse(),
            surrogate_loss: update.surrogate_loss,
            value_loss: update.value_loss,
            entropy: update.entropy,
            kl: update.kl,
            clip_fraction: update.clip_fraction,
            learning_rate: update.learning_rate,
            eval,
        };
        writer.row(&row)?;
        log::info!(
            "iter {iteration:>4} reward {:+.5} eval {} falls {}",
            row.mean_reward,
            row.eval.as_ref().map(|e| format!("{:+.3} rmse {}", e.reward, opt(e.rmse))).unwrap_or_default(),
            row.falls
        );
        rows.push(row);
        timings.push(tick.elapsed().as_secs_f64());
    }

    let checkpoint = Checkpoint::new(&model.name, cfg.mode.as_str(), learner.params.clone());
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    checkpoint.save(&ckpt_path)?;
    let checkpoint_id = checkpoint.id();
    let tail = &probes[probes.len().saturating_sub(cfg.eval.final_probes)..];
    let mean_of = |f: &dyn Fn(&ProbeResult) -> Option<f64>| -> Option<f64> {
        let vals: Option<Vec<f64>> = tail.iter().map(f).collect();
        vals.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let final_rmse = mean_of(&|p| p.rmse);
    let final_eval_reward = mean_of(&|p| Some(p.reward));
    let final_tracking_error = mean_of(&|p| Some(p.tracking_error));
    writer.line(&ManifestFooter {
        kind: "summary".into(),
        status: "completed".into(),
        iterations: rows.len(),
        global_step: pool.global_step,
        checkpoint: Some(CHECKPOINT_FILE.into()),
        checkpoint_id: Some(checkpoint_id.clone()),
        final_rmse,
        final_eval_reward,
        final_tracking_error,
        error: None,
    })?;
    let timing = serde_json::json!({
        "total_seconds": started.elapsed().as_secs_f64(),
        "iteration_seconds": timings,
    });
    let timing_path = run_dir.join(TIMING_FILE);
    fs::write(&timing_path, timing.to_string()).map_err(|e| Error::io(&timing_path, e))?;

    Ok(TrainOutcome {
        params: learner.params,
        checkpoint,
        checkpoint_id,
        run_dir: run_dir.to_path_buf(),
        rows,
        final_rmse,
        final_eval_reward,
        final_tracking_error,
    })
}

fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::new();
    for row in trace {
        out.push_str(&serde_json::to_string(row)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn check_checkpoint(ckpt: &Checkpoint, model: &RobotModel) -> Result<()> {
    let n = model.n_joints();
    if ckpt.header.robot != model.name || ckpt.header.act_dim != n || ckpt.header.obs_dim != Observation::dim(n) {
        return Err(Error::Mismatch(format!(
            "checkpoint for `{}` ({} inputs, {} outputs) does not fit robot `{}` ({} inputs, {} outputs)",
            ckpt.header.robot,
            ckpt.header.obs_dim,
            ckpt.header.act_dim,
            model.name,
            Observation::dim(n),
            n
        )));
    }
    Ok(())
}

/// A recorded dataset plus the joint targets the policy issued alongside it.
#[derive(Debug, Clone)]
pub struct Recording {
    pub dataset: ImitationDataset,
    /// Per trajectory, per frame: commanded joint targets.
    pub q_des: Vec<Vec<Vec<f64>>>,
    pub falls: u64,
}

/// Rolls the position policy out deterministically and stores the tracked states.
pub fn record(cfg: &RunConfig, ckpt: &Checkpoint, source_run: Option<&str>) -> Result<Recording> {
    let model = cfg.model()?;
    check_checkpoint(ckpt, &model)?;
    if ckpt.header.mode != TrainMode::Position.as_str() {
        return Err(Error::Mismatch(format!(
            "recording needs a position policy, checkpoint was trained in `{}` mode",
            ckpt.header.mode
        )));
    }
    let rec = &cfg.record;
    if rec.settle >= rec.steps || rec.commands.is_empty() {
        return Err(Error::validation("record", "need settle < steps and at least one command"));
    }
    let pos_cfg = RunConfig {
        mode: TrainMode::Position,
        imitation: None,
        ..cfg.clone()
    };
    let action = pos_cfg.action_config();
    let gains = action.gains.resolve(model.n_joints(), "action.gains")?;
    let mut trajectories = Vec::new();
    let mut all_q_des = Vec::new();
    let mut falls = 0;
    for &v in &rec.commands {
        let cmd = Command { v_cmd: v, w_cmd: 0.0 };
        let mut pool = EnvPool::new(env_setup(&pos_cfg, &model, None)?, 1, Some(&[cmd]), stream_rng(cfg.seed, 5))?;
        pool.trace_env = Some(0);
        let mut frames = Vec::with_capacity(rec.steps - rec.settle);
        let mut q_des = Vec::with_capacity(rec.steps - rec.settle);
        for k in 0..rec.steps {
            let obs = pool.observations();
            let out = ckpt.params.eval(obs.view())?;
            let step = pool.step(out.mean.view())?;
            if step.dones[0] && !step.timeouts[0] {
                falls += 1;
                log::warn!("position policy fell while recording v_cmd={v} at step {k}");
            }
            let row = pool.trace.pop().expect("env 0 is traced");
            if k < rec.settle {
                continue;
            }
            let state = pool.states().next().expect("one env");
            let fk = forward_kinematics(&row.q, state.base_pos, &model)?;
            frames.push(ImitationFrame {
                q_hat: row.q.clone(),
                h_hat: row.height,
                r_e_hat: fk.ee_body.iter().map(|p| [p[0], p[1]]).collect(),
                r_z_hat: fk.feet_world.iter().map(|p| p[1]).collect(),
                v_cmd: cmd.v_cmd,
                w_cmd: cmd.w_cmd,
                step_index: k - rec.settle,
            });
            q_des.push(row.q_des.expect("position mode traces targets"));
        }
        trajectories.push(Trajectory { command: cmd, frames });
        all_q_des.push(q_des);
    }
    let header = ImitationHeader {
        format_version: imitation::FORMAT_VERSION,
        robot: model.name.clone(),
        dt: cfg.rewards.dt,
        n_joints: model.n_joints(),
        n_feet: model.n_feet(),
        kp: gains.kp,
        kd: gains.kd,
        checkpoint_id: ckpt.id(),
        source_run: source_run.map(String::from),
        settle_steps: rec.settle,
        trajectories: Vec::new(),
    };
    Ok(Recording {
        dataset: ImitationDataset::new(header, trajectories)?,
        q_des: all_q_des,
        falls,
    })
}

/// Deterministic position-policy rollout with `Kp` scaled by `kp_scale`.
pub fn position_rollout(
    cfg: &RunConfig,
    params: &PolicyParameters,
    kp_scale: f64,
    cmd: Command,
    steps: usize,
) -> Result<Vec<TraceRow>> {
    let model = cfg.model()?;
    let mut pos_cfg = RunConfig {
        mode: TrainMode::Position,
        imitation: None,
        ..cfg.clone()
    };
    pos_cfg.action.gains = GainSpec {
        kp: pos_cfg.action.gains.scaled(kp_scale).kp,
        kd: pos_cfg.action.gains.kd.clone(),
    };
    let mut pool = EnvPool::new(env_setup(&pos_cfg, &model, None)?, 1, Some(&[cmd]), stream_rng(cfg.seed, 6))?;
    pool.trace_env = Some(0);
    for _ in 0..steps {
        let obs = pool.observations();
        let out = params.eval(obs.view())?;
        pool.step(out.mean.view())?;
    }
    Ok(pool.trace)
}

/// Joint-angle differences between two position policies driven with the
/// same commands.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GainComparison {
    /// RMSE between the two desired-angle traces (rad).
    pub rmse_q_des: f64,
    /// RMSE between the two tracked-angle traces (rad).
    pub rmse_q: f64,
}

impl GainComparison {
    pub fn ratio(&self) -> f64 {
        self.rmse_q_des / self.rmse_q
    }
}

/// Rolls out each position policy under the gains of its own config, at the
/// recording commands of `a`, and compares the traces after the settle steps.
pub fn compare_position_policies(
    a: (&RunConfig, &PolicyParameters),
    b: (&RunConfig, &PolicyParameters),
) -> Result<GainComparison> {
    let rec = &a.0.record;
    if rec.steps <= rec.settle {
        return Err(Error::validation("record.steps", "must exceed record.settle"));
    }
    let mut q = (Vec::new(), Vec::new());
    let mut q_des = (Vec::new(), Vec::new());
    for &v in &rec.commands {
        let cmd = Command { v_cmd: v, w_cmd: 0.0 };
        let ta = position_rollout(a.0, a.1, 1.0, cmd, rec.steps)?;
        let tb = position_rollout(b.0, b.1, 1.0, cmd, rec.steps)?;
        for (ra, rb) in ta.iter().zip(&tb).skip(rec.settle) {
            q.0.push(ra.q.clone());
            q.1.push(rb.q.clone());
            q_des.0.push(ra.q_des.clone().expect("position rollout records targets"));
            q_des.1.push(rb.q_des.clone().expect("position rollout records targets"));
        }
    }
    Ok(GainComparison {
        rmse_q_des: imitation::rmse(&q_des.0, &q_des.1)?,
        rmse_q: imitation::rmse(&q.0, &q.1)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub episodes: usize,
    /// Mean undiscounted episode return.
    pub mean_reward: f64,
    /// Per-episode sums of each term.
    pub shaping: ShapingTerms,
    pub imitation: ImitationTerms,
    pub rmse: Option<f64>,
    pub mean_tracking_error: f64,
    pub fall_rate: f64,
    pub mean_episode_length: f64,
}

/// Deterministic evaluation, one episode per command evenly spaced over the
/// command range. `position` turns on assisted mode.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, episodes: usize, position: Option<&Checkpoint>) -> Result<EvalMetrics> {
    if episodes == 0 {
        return Err(Error::validation("episodes", "must be at least 1"));
    }
    let model = cfg.model()?;
    check_checkpoint(ckpt, &model)?;
    let dataset = load_dataset(cfg)?;
    let mut eval_cfg = cfg.clone();
    let assist_adapter = match position {
        Some(p) => {
            check_checkpoint(p, &model)?;
            if cfg.mode == TrainMode::Position {
                return Err(Error::validation("mode", "assisted evaluation needs a torque policy"));
            }
            eval_cfg.action.mode = ActionMode::Assisted;
            Some(
                ActionConfig {
                    mode: ActionMode::Position,
                    action_scale: None,
                    ..cfg.action.clone()
                }
                .resolve(&model)?,
            )
        }
        None => None,
    };
    let decay_step = cfg
        .eval
        .decay_step
        .unwrap_or((cfg.ppo.iterations * cfg.ppo.steps_per_iteration) as u64);
    let commands = probe_commands(&cfg.task.commands, episodes);
    let mut totals = EnvStats::default();
    let mut return_sum = 0.0;
    let mut length_sum = 0u64;
    for cmd in commands {
        let mut setup = env_setup(&eval_cfg, &model, dataset.as_ref())?;
        if assist_adapter.is_some() {
            setup.adapter.mode = ActionMode::Assisted;
        }
        let mut pool = EnvPool::new(setup, 1, Some(&[cmd]), stream_rng(cfg.seed, 7))?;
        pool.global_step = decay_step;
        let mut assist_prev = Array2::<f64>::zeros((1, model.n_joints()));
        let mut ret = 0.0;
        loop {
            let obs = pool.observations();
            if let (Some(pos), Some(adapter)) = (position, &assist_adapter) {
                let mut pos_obs = obs.clone();
                let n = model.n_joints();
                pos_obs
                    .slice_mut(ndarray::s![.., 4 + 2 * n..])
                    .assign(&(&assist_prev * cfg.task.obs_scales.a_prev));
                let raw = pos.params.eval(pos_obs.view())?.mean;
                let target = adapter.position_target(raw.row(0).as_slice().expect("contiguous"));
                pool.set_position_targets(Array2::from_shape_vec((1, n), target).expect("shape"));
                assist_prev = raw;
            }
            let out = ckpt.params.eval(obs.view())?;
            let step = pool.step(out.mean.view())?;
            ret += step.rewards[0];
            length_sum += 1;
            if step.dones[0] {
                break;
            }
        }
        return_sum += ret;
        let s = &pool.stats;
        totals.transitions += s.transitions;
        for (a, b) in totals.shaping.iter_mut().zip(s.shaping) {
            *a += b;
        }
        for (a, b) in totals.imitation.iter_mut().zip(s.imitation) {
            *a += b;
        }
        totals.falls += s.falls + s.faults;
        totals.tracking_error_sum += s.tracking_error_sum;
        totals.rmse_sq_sum += s.rmse_sq_sum;
        totals.rmse_count += s.rmse_count;
    }
    let per_episode = |sums: &[f64]| sums.iter().map(|s| s / episodes as f64).collect::<Vec<_>>();
    let sh = per_episode(&totals.shaping);
    let im = per_episode(&totals.imitation);
    Ok(EvalMetrics {
        episodes,
        mean_reward: return_sum / episodes as f64,
        shaping: ShapingTerms {
            lin_vel: sh[0],
            ang_vel: sh[1],
            collisions: sh[2],
            action_rate: sh[3],
            orientation: sh[4],
            ang_vel_penalty: sh[5],
            lin_vel_penalty: sh[6],
            joint_torques: sh[7],
            joint_motion: sh[8],
            feet_slip: sh[9],
        },
        imitation: ImitationTerms {
            joint_angles: im[0],
            ee_position: im[1],
            foot_height: im[2],
            base_height: im[3],
        },
        rmse: totals.rmse(),
        mean_tracking_error: totals.tracking_error_sum / totals.transitions.max(1) as f64,
        fall_rate: totals.falls as f64 / episodes as f64,
        mean_episode_length: length_sum as f64 / episodes as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scales: Vec<f64>,
    pub modes: Vec<TrainMode>,
    pub seeds: Vec<u64>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            scales: vec![0.5, 1.0, 5.0, 10.0],
            modes: vec![TrainMode::Imitation, TrainMode::Decap],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scale: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub status: String,
    pub final_rmse: Option<f64>,
    pub final_eval_reward: Option<f64>,
    /// Mean final RMSE over the completed seeds of this (scale, mode).
    pub mean_rmse: Option<f64>,
    pub run_dir: String,
    pub error: Option<String>,
}

pub const SWEEP_COLUMNS: [&str; 9] = [
    "scale",
    "mode",
    "seed",
    "status",
    "final_rmse",
    "final_eval_reward",
    "mean_rmse",
    "run_dir",
    "error",
];

/// Config for one sweep cell: mode, seed and the three exponential imitation weights.
pub fn sweep_cell_config(base: &RunConfig, scale: f64, mode: TrainMode, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.seed = seed;
    cfg.rewards.joint_angles *= scale;
    cfg.rewards.ee_position *= scale;
    cfg.rewards.foot_height *= scale;
    cfg
}

pub fn cell_name(scale: f64, mode: TrainMode, seed: u64) -> String {
    format!("{}-x{}-seed{}", mode.as_str(), scale, seed)
}

/// Runs every (scale, mode, seed) cell; failures are recorded and the sweep continues.
pub fn sweep(base: &RunConfig, spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<Vec<SweepRow>> {
    if spec.scales.is_empty() || spec.modes.is_empty() || spec.seeds.is_empty() {
        return Err(Error::validation("sweep", "scales, modes and seeds must be non-empty"));
    }
    if spec.modes.iter().any(|m| !m.uses_imitation_rewards()) {
        return Err(Error::validation("sweep.modes", "only imitation and decap cells are supported"));
    }
    if spec.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::validation("sweep.scales", "scales must be positive"));
    }
    base.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_config(base, out_dir)?;
    let mut cells = Vec::new();
    for &scale in &spec.scales {
        for &mode in &spec.modes {
            for &seed in &spec.seeds {
                cells.push((scale, mode, seed));
            }
        }
    }
    let run_cell = |&(scale, mode, seed): &(f64, TrainMode, u64)| -> SweepRow {
        let cfg = sweep_cell_config(base, scale, mode, seed);
        let dir = out_dir.join(cell_name(scale, mode, seed));
        let result = train_torque(&cfg, &dir);
        let (status, final_rmse, final_eval_reward, error) = match result {
            Ok(o) => ("completed".to_string(), o.final_rmse, o.final_eval_reward, None),
            Err(e) => {
                log::error!("sweep cell {} failed: {e}", cell_name(scale, mode, seed));
                ("failed".to_string(), None, None, Some(e.to_string()))
            }
        };
        SweepRow {
            scale,
            mode,
            seed,
            status,
            final_rmse,
            final_eval_reward,
            mean_rmse: None,
            run_dir: cell_name(scale, mode, seed),
            error,
        }
    };
    let mut rows: Vec<Option<SweepRow>> = vec![None; cells.len()];
    let jobs = jobs.max(1);
    if jobs == 1 {
        for (slot, cell) in rows.iter_mut().zip(&cells) {
            *slot = Some(run_cell(cell));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results = std::sync::Mutex::new(&mut rows);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cells.len() {
                        break;
                    }
                    let row = run_cell(&cells[i]);
                    results.lock().expect("no panics while holding the lock")[i] = Some(row);
                });
            }
        });
    }
    let mut rows: Vec<SweepRow> = rows.into_iter().map(|r| r.expect("every cell ran")).collect();
    for i in 0..rows.len() {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.scale == rows[i].scale && r.mode == rows[i].mode)
            .filter_map(|r| r.final_rmse)
            .collect();
        rows[i].mean_rmse = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    }
    let mut jsonl = String::new();
    for row in &rows {
        jsonl.push_str(&serde_json::to_string(row)?);
        jsonl.push('\n');
    }
    let path = out_dir.join(SWEEP_FILE);
    fs::write(&path, jsonl).map_err(|e| Error::io(&path, e))?;
    write_sweep_csv(&rows, &out_dir.join(SWEEP_CSV))?;
    Ok(rows)
}

pub fn load_sweep(dir: &Path) -> Result<Vec<SweepRow>> {
    let path = dir.join(SWEEP_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.clone(),
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SWEEP_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.scale.to_string(),
            r.mode.as_str().to_string(),
            r.seed.to_string(),
            r.status.clone(),
            opt(r.final_rmse),
            opt(r.final_eval_reward),
            opt(r.mean_rmse),
            r.run_dir.clone(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    LearningCurve,
    RmseTable,
    RewardBreakdown,
    GaitTrace,
}

impl ExportKind {
    pub fn file_name(self) -> &'static str {
        match self {
            ExportKind::LearningCurve => "learning_curve.csv",
            ExportKind::RmseTable => "rmse_table.csv",
            ExportKind::RewardBreakdown => "reward_breakdown.csv",
            ExportKind::GaitTrace => "gait_trace.csv",
        }
    }
}

impl std::str::FromStr for ExportKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learning-curve" => Ok(ExportKind::LearningCurve),
            "rmse-table" => Ok(ExportKind::RmseTable),
            "reward-breakdown" => Ok(ExportKind::RewardBreakdown),
            "gait-trace" => Ok(ExportKind::GaitTrace),
            other => Err(Error::validation("what", format!("unknown export `{other}`"))),
        }
    }
}

/// Writes the CSV for `what` from the artifacts in `run_dir`; returns its path.
pub fn export(run_dir: &Path, what: ExportKind, output: Option<&Path>) -> Result<PathBuf> {
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(what.file_name()));
    match what {
        ExportKind::RmseTable => {
            let rows = load_sweep(run_dir)?;
            write_sweep_csv(&rows, &path)?;
        }
        ExportKind::LearningCurve => {
            let m = Manifest::load(run_dir)?;
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["iteration", "mean_reward", "decay_factor"])?;
            for r in &m.rows {
                w.write_record([r.iteration.to_string(), r.mean_reward.to_string(), r.decay_factor.to_string()])?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        ExportKind::RewardBreakdown => {
            let m = Manifest::load(run_dir)?;
            let mut w = csv::Writer::from_path(&path)?;
            let mut cols = vec!["iteration".to_string(), "mean_reward".to_string()];
            cols.extend(ShapingTerms::NAMES.iter().map(|s| s.to_string()));
            cols.extend(ImitationTerms::NAMES.iter().map(|s| s.to_string()));
            w.write_record(&cols)?;
            for r in &m.rows {
                let mut rec = vec![r.iteration.to_string(), r.mean_reward.to_string()];
                rec.extend(r.shaping.values().iter().map(|v| v.to_string()));
                rec.extend(r.imitation.values().iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        ExportKind::GaitTrace => {
            let m = Manifest::load(run_dir)?;
            let trace_path = run_dir.join(TRACE_FILE);
            if !trace_path.exists() {
                return Err(Error::MissingArtifact(trace_path));
            }
            let text = fs::read_to_string(&trace_path).map_err(|e| Error::io(&trace_path, e))?;
            let n = m.header.act_dim;
            let mut cols: Vec<String> = ["step", "v_cmd", "v_x", "height", "pitch"].map(String::from).to_vec();
            for prefix in ["q", "q_hat", "q_des", "tau"] {
                cols.extend((0..n).map(|j| format!("{prefix}_{j}")));
            }
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(&cols)?;
            for (i, line) in text.lines().enumerate() {
                let row: TraceRow = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: trace_path.clone(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
                let mut rec = vec![
                    row.step.to_string(),
                    row.v_cmd.to_string(),
                    row.v_x.to_string(),
                    row.height.to_string(),
                    row.pitch.to_string(),
                ];
                let cells = |v: &Option<Vec<f64>>| match v {
                    Some(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>(),
                    None => vec![String::new(); n],
                };
                rec.extend(row.q.iter().map(|x| x.to_string()));
                rec.extend(cells(&row.q_hat));
                rec.extend(cells(&row.q_des));
                rec.extend(row.torques.iter().map(|x| x.to_string()));
                w.write_record(&rec)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(path)
}

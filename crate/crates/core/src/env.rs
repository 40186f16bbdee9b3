//! Vectorized locomotion environments stepped in lockstep.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{decay_factor, ActionAdapter, ActionInputs, ActionMode, DecayClock};
use crate::dynamics::{forward_kinematics, step, ContactReport, SimState};
use crate::error::{Error, Result};
use crate::imitation::{ImitationDataset, ImitationFrame};
use crate::ppo::{VecEnv, VecStep};
use crate::robots::RobotModel;
use crate::task::{
    imitation_reward, observe, sample_command, shaping_reward, terminate, Command, CommandRanges, ImitationTerms,
    Observation, RewardWeights, ShapingInputs, ShapingTerms, Termination, TerminationConfig,
};

/// Per-feature multipliers applied to observations before the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObsScales {
    pub v_cmd: f64,
    pub w_cmd: f64,
    /// Applied to `q − q_nom`.
    pub q: f64,
    pub qdot: f64,
    pub a_prev: f64,
}

impl Default for ObsScales {
    fn default() -> Self {
        ObsScales {
            v_cmd: 2.0,
            w_cmd: 0.25,
            q: 1.0,
            qdot: 0.05,
            a_prev: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub commands: CommandRanges,
    pub termination: TerminationConfig,
    pub obs_scales: ObsScales,
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        self.commands.validate()?;
        if self.termination.max_steps == 0 || self.termination.pitch_limit <= 0.0 {
            return Err(Error::validation("task.termination", "limits must be positive"));
        }
        Ok(())
    }
}

/// Network input for an observation, in the [`Observation::to_vec`] layout.
pub fn policy_input(obs: &Observation, nominal: &[f64], scales: &ObsScales, out: &mut [f64]) {
    let n = obs.q.len();
    out[0] = obs.g_proj[0];
    out[1] = obs.g_proj[1];
    out[2] = obs.v_cmd * scales.v_cmd;
    out[3] = obs.w_cmd * scales.w_cmd;
    for j in 0..n {
        out[4 + j] = (obs.q[j] - nominal[j]) * scales.q;
        out[4 + n + j] = obs.qdot[j] * scales.qdot;
        out[4 + 2 * n + j] = obs.a_prev[j] * scales.a_prev;
    }
}

/// Running sums of reward terms and episode outcomes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EnvStats {
    pub transitions: u64,
    pub shaping: [f64; 10],
    pub imitation: [f64; 4],
    pub episodes: u64,
    pub falls: u64,
    pub timeouts: u64,
    pub faults: u64,
    pub return_sum: f64,
    pub tracking_error_sum: f64,
    pub rmse_sq_sum: f64,
    pub rmse_count: u64,
}

impl EnvStats {
    pub fn shaping_means(&self) -> ShapingTerms {
        let m = self.means(&self.shaping);
        ShapingTerms {
            lin_vel: m[0],
            ang_vel: m[1],
            collisions: m[2],
            action_rate: m[3],
            orientation: m[4],
            ang_vel_penalty: m[5],
            lin_vel_penalty: m[6],
            joint_torques: m[7],
            joint_motion: m[8],
            feet_slip: m[9],
        }
    }

    pub fn imitation_means(&self) -> ImitationTerms {
        let m = self.means(&self.imitation);
        ImitationTerms {
            joint_angles: m[0],
            ee_position: m[1],
            foot_height: m[2],
            base_height: m[3],
        }
    }

    fn means<const N: usize>(&self, sums: &[f64; N]) -> [f64; N] {
        let n = self.transitions.max(1) as f64;
        sums.map(|s| s / n)
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.rmse_count > 0).then(|| (self.rmse_sq_sum / self.rmse_count as f64).sqrt())
    }
}

/// One row of a stored rollout trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub v_cmd: f64,
    pub v_x: f64,
    pub height: f64,
    pub pitch: f64,
    pub q: Vec<f64>,
    pub q_hat: Option<Vec<f64>>,
    pub q_des: Option<Vec<f64>>,
    pub torques: Vec<f64>,
}

struct Instance {
    state: SimState,
    cmd: Command,
    cmd_step: u64,
    a_prev: Vec<f64>,
    episode_return: f64,
    fixed_command: Option<Command>,
}

pub struct EnvSetup<'a> {
    pub model: &'a RobotModel,
    pub adapter: ActionAdapter,
    pub rewards: RewardWeights,
    pub task: TaskConfig,
    pub dataset: Option<&'a ImitationDataset>,
    /// Add the imitation terms to the reward.
    pub imitation_rewards: bool,
    pub decay_clock: DecayClock,
    pub dt: f64,
}

pub struct EnvPool<'a> {
    setup: EnvSetup<'a>,
    envs: Vec<Instance>,
    rng: ChaCha8Rng,
    /// Synchronized steps taken so far.
    pub global_step: u64,
    pub stats: EnvStats,
    /// Environment whose steps are appended to `trace`, if any.
    pub trace_env: Option<usize>,
    pub trace: Vec<TraceRow>,
    position_targets: Option<Array2<f64>>,
    obs_buf: Vec<f64>,
}

impl<'a> EnvPool<'a> {
    /// `commands`: fixed per-environment commands, or `None` to sample.
    pub fn new(setup: EnvSetup<'a>, n_envs: usize, commands: Option<&[Command]>, rng: ChaCha8Rng) -> Result<Self> {
        let needs_data = setup.imitation_rewards || setup.adapter.mode == ActionMode::Decap;
        if needs_data && setup.dataset.is_none() {
            return Err(Error::MissingField("imitation".into()));
        }
        if let Some(ds) = setup.dataset {
            ds.warn_on_dt_mismatch(setup.dt);
            if ds.header.n_joints != setup.model.n_joints() || ds.header.n_feet != setup.model.n_feet() {
                return Err(Error::Mismatch(format!(
                    "imitation data for `{}` does not fit robot `{}`",
                    ds.header.robot, setup.model.name
                )));
            }
        }
        if let Some(c) = commands {
            if c.len() != n_envs {
                return Err(Error::dimension("fixed commands", n_envs, c.len()));
            }
        }
        let n = setup.model.n_joints();
        let obs_dim = Observation::dim(n);
        let mut pool = EnvPool {
            envs: Vec::with_capacity(n_envs),
            rng,
            global_step: 0,
            stats: EnvStats::default(),
            trace_env: None,
            trace: Vec::new(),
            position_targets: None,
            obs_buf: vec![0.0; obs_dim],
            setup,
        };
        for e in 0..n_envs {
            let fixed = commands.map(|c| c[e]);
            let cmd = fixed.unwrap_or_else(|| sample_command(&mut pool.rng, &pool.setup.task.commands));
            pool.envs.push(Instance {
                state: SimState::nominal(pool.setup.model),
                cmd,
                cmd_step: 0,
                a_prev: vec![0.0; n],
                episode_return: 0.0,
                fixed_command: fixed,
            });
        }
        Ok(pool)
    }

    pub fn obs_dim(&self) -> usize {
        Observation::dim(self.setup.model.n_joints())
    }

    pub fn act_dim(&self) -> usize {
        self.setup.model.n_joints()
    }

    pub fn states(&self) -> impl Iterator<Item = &SimState> {
        self.envs.iter().map(|e| &e.state)
    }

    pub fn commands(&self) -> Vec<Command> {
        self.envs.iter().map(|e| e.cmd).collect()
    }

    /// Joint targets for assisted mode, consumed by the next step.
    pub fn set_position_targets(&mut self, targets: Array2<f64>) {
        self.position_targets = Some(targets);
    }

    pub fn current_decay_factor(&self) -> f64 {
        decay_factor(&self.setup.adapter.schedule, self.global_step)
    }

    fn reference(&self, cmd: Command, t: u64) -> Result<Option<&'a ImitationFrame>> {
        match self.setup.dataset {
            Some(ds) => ds.lookup_at(cmd, t as usize, self.setup.dt).map(Some),
            None => Ok(None),
        }
    }

    fn reset(&mut self, e: usize) {
        let model = self.setup.model;
        let env = &mut self.envs[e];
        env.state = SimState::nominal(model);
        env.a_prev.iter_mut().for_each(|a| *a = 0.0);
        env.cmd_step = 0;
        env.episode_return = 0.0;
        env.cmd = match env.fixed_command {
            Some(c) => c,
            None => sample_command(&mut self.rng, &self.setup.task.commands),
        };
    }

    fn step_one(&mut self, e: usize, raw: &[f64]) -> Result<(f64, Option<Termination>)> {
        let model = self.setup.model;
        let t_global = self.global_step;
        let (cmd, cmd_step) = (self.envs[e].cmd, self.envs[e].cmd_step);
        let reference_now = self.reference(cmd, cmd_step)?;
        let reference_next = self.reference(cmd, cmd_step + 1)?;
        let targets = self.position_targets.as_ref().map(|t| t.row(e).to_vec());
        let env = &self.envs[e];
        let clock = match self.setup.decay_clock {
            DecayClock::Global => t_global,
            DecayClock::Episode => env.state.time_step,
        };
        let inputs = ActionInputs {
            reference: reference_now,
            position_target: targets.as_deref(),
        };
        let torques = self.setup.adapter.apply(raw, &env.state, inputs, clock)?;
        let out = step(&env.state, &torques, model, self.setup.dt)?;

        let shaping_in = ShapingInputs {
            prev: &env.state,
            curr: &out.state,
            torques: &out.applied_torques,
            contact: &out.contact,
            cmd,
            a_prev: &env.a_prev,
            a_curr: raw,
        };
        let (mut reward, shaping) = shaping_reward(&shaping_in, &self.setup.rewards);
        let mut imitation = ImitationTerms::default();
        if let Some(frame) = reference_next {
            let fk = forward_kinematics(&out.state.q, out.state.base_pos, model)?;
            let (_, terms) = imitation_reward(&out.state, frame, &fk, &self.setup.rewards)?;
            let err: f64 = frame
                .q_hat
                .iter()
                .zip(&out.state.q)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            self.stats.rmse_sq_sum += err;
            self.stats.rmse_count += frame.q_hat.len() as u64;
            if self.setup.imitation_rewards {
                imitation = terms;
                reward += terms.total();
            }
        }
        for (acc, v) in self.stats.shaping.iter_mut().zip(shaping.values()) {
            *acc += v;
        }
        for (acc, v) in self.stats.imitation.iter_mut().zip(imitation.values()) {
            *acc += v;
        }
        self.stats.transitions += 1;
        self.stats.tracking_error_sum += (cmd.v_cmd - out.state.base_vel[0]).abs();

        if self.trace_env == Some(e) {
            self.trace.push(TraceRow {
                step: t_global,
                v_cmd: cmd.v_cmd,
                v_x: out.state.base_vel[0],
                height: out.state.height(),
                pitch: out.state.pitch(),
                q: out.state.q.clone(),
                q_hat: reference_next.map(|f| f.q_hat.clone()),
                q_des: match self.setup.adapter.mode {
                    ActionMode::Position => Some(self.setup.adapter.position_target(raw)),
                    _ => targets.clone(),
                },
                torques: out.applied_torques.clone(),
            });
        }

        let done = terminate(&out.state, &out.contact, &self.setup.task.termination);
        let env = &mut self.envs[e];
        env.state = out.state;
        env.a_prev.copy_from_slice(raw);
        env.cmd_step += 1;
        env.episode_return += reward;
        if done.is_none() {
            if let Some(k) = self.setup.task.commands.resample_interval {
                if env.fixed_command.is_none() && env.state.time_step % k == 0 {
                    env.cmd = sample_command(&mut self.rng, &self.setup.task.commands);
                    env.cmd_step = 0;
                }
            }
        }
        Ok((reward, done))
    }

    fn finish_episode(&mut self, e: usize, reason: Termination) {
        self.stats.episodes += 1;
        self.stats.return_sum += self.envs[e].episode_return;
        if reason.is_fall() {
            self.stats.falls += 1;
        } else {
            self.stats.timeouts += 1;
        }
        self.reset(e);
    }

    pub fn contact_of(&self, e: usize) -> ContactReport {
        crate::dynamics::contact_forces(&self.envs[e].state, self.setup.model)
    }
}

impl VecEnv for EnvPool<'_> {
    fn n_envs(&self) -> usize {
        self.envs.len()
    }

    fn observations(&self) -> Array2<f64> {
        let n = self.envs.len();
        let dim = self.obs_dim();
        let mut out = Array2::zeros((n, dim));
        let mut buf = self.obs_buf.clone();
        for (e, env) in self.envs.iter().enumerate() {
            let obs = observe(&env.state, env.cmd, &env.a_prev).expect("lengths fixed at construction");
            policy_input(&obs, &self.setup.model.nominal_pose, &self.setup.task.obs_scales, &mut buf);
            out.row_mut(e).assign(&ndarray::ArrayView1::from(&buf[..]));
        }
        out
    }

    fn step(&mut self, actions: ArrayView2<f64>) -> Result<VecStep> {
        let n = self.envs.len();
        if actions.nrows() != n || actions.ncols() != self.act_dim() {
            return Err(Error::dimension("actions", n * self.act_dim(), actions.len()));
        }
        if self.setup.adapter.mode == ActionMode::Assisted && self.position_targets.is_none() {
            return Err(Error::MissingField("position targets for assisted mode".into()));
        }
        let mut result = VecStep {
            rewards: vec![0.0; n],
            dones: vec![false; n],
            timeouts: vec![false; n],
        };
        for e in 0..n {
            let raw = actions.row(e).to_vec();
            match self.step_one(e, &raw) {
                Ok((reward, done)) => {
                    result.rewards[e] = reward;
                    if let Some(reason) = done {
                        result.dones[e] = true;
                        result.timeouts[e] = reason == Termination::Timeout;
                        self.finish_episode(e, reason);
                    }
                }
                Err(Error::NonFinite(msg)) => {
                    log::debug!("env {e} reset after fault: {msg}");
                    self.stats.faults += 1;
                    result.dones[e] = true;
                    self.finish_episode(e, Termination::Orientation);
                }
                Err(other) => return Err(other),
            }
        }
        self.position_targets = None;
        self.global_step += 1;
        Ok(result)
    }
}

/// Independent deterministic RNG stream derived from a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

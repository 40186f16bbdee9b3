//! The velocity-tracking task: observations, commands, shaping and imitation
//! rewards, and episode termination.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ContactReport, FkOutput, SimState};
use crate::error::{Error, Result};
use crate::imitation::ImitationFrame;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Command {
    /// Forward velocity (m/s).
    pub v_cmd: f64,
    /// Pitch rate (rad/s).
    pub w_cmd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommandRanges {
    pub v_cmd: [f64; 2],
    pub w_cmd: [f64; 2],
    /// Resample the command every this many steps within an episode.
    pub resample_interval: Option<u64>,
}

impl Default for CommandRanges {
    fn default() -> Self {
        CommandRanges {
            v_cmd: [0.3, 1.0],
            w_cmd: [0.0, 0.0],
            resample_interval: None,
        }
    }
}

impl CommandRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [("v_cmd", self.v_cmd), ("w_cmd", self.w_cmd)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::validation(format!("task.commands.{name}"), "need lo <= hi"));
            }
        }
        if self.resample_interval == Some(0) {
            return Err(Error::validation("task.commands.resample_interval", "must be >= 1"));
        }
        Ok(())
    }
}

/// Uniform command sample; `v_cmd` is drawn before `w_cmd`.
pub fn sample_command<R: Rng + ?Sized>(rng: &mut R, ranges: &CommandRanges) -> Command {
    let draw = |rng: &mut R, [lo, hi]: [f64; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
    let v_cmd = draw(rng, ranges.v_cmd);
    let w_cmd = draw(rng, ranges.w_cmd);
    Command { v_cmd, w_cmd }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Gravity direction in the base frame (x, z).
    pub g_proj: [f64; 2],
    pub v_cmd: f64,
    pub w_cmd: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Previous raw (unscaled) action.
    pub a_prev: Vec<f64>,
}

impl Observation {
    pub fn dim(n_joints: usize) -> usize {
        4 + 3 * n_joints
    }

    /// Flat layout: g_proj, v_cmd, w_cmd, q, qdot, a_prev.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(Self::dim(self.q.len()));
        v.extend_from_slice(&self.g_proj);
        v.push(self.v_cmd);
        v.push(self.w_cmd);
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.qdot);
        v.extend_from_slice(&self.a_prev);
        v
    }
}

/// World gravity `(0, -1)` expressed in a base frame pitched by `pitch`.
pub fn projected_gravity(pitch: f64) -> [f64; 2] {
    let (s, c) = pitch.sin_cos();
    [-s, -c]
}

pub fn observe(state: &SimState, cmd: Command, a_prev: &[f64]) -> Result<Observation> {
    if a_prev.len() != state.q.len() {
        return Err(Error::dimension("observe a_prev", state.q.len(), a_prev.len()));
    }
    Ok(Observation {
        g_proj: projected_gravity(state.pitch()),
        v_cmd: cmd.v_cmd,
        w_cmd: cmd.w_cmd,
        q: state.q.clone(),
        qdot: state.qdot.clone(),
        a_prev: a_prev.to_vec(),
    })
}

/// Reward weights before the `dt` factor, and the kernel widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardWeights {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub collisions: f64,
    pub action_rate: f64,
    pub orientation: f64,
    pub ang_vel_penalty: f64,
    pub lin_vel_penalty: f64,
    pub joint_torques: f64,
    pub joint_motion: f64,
    pub feet_slip: f64,
    pub joint_angles: f64,
    pub ee_position: f64,
    pub foot_height: f64,
    pub base_height: f64,
    pub sigma_tracking: f64,
    pub sigma_q: f64,
    pub sigma_ee: f64,
    pub sigma_fh: f64,
    pub dt: f64,
    pub imitation_scale: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            lin_vel: 1.0,
            ang_vel: 1.0,
            collisions: 1.0,
            action_rate: 0.01,
            orientation: 5.0,
            ang_vel_penalty: 0.05,
            lin_vel_penalty: 2.0,
            joint_torques: 1e-5,
            joint_motion: 2.5e-7,
            feet_slip: 0.04,
            joint_angles: 1.5,
            ee_position: 1.5,
            foot_height: 1.5,
            base_height: 10.0,
            sigma_tracking: 0.25,
            sigma_q: 0.1,
            sigma_ee: 0.1,
            sigma_fh: 0.025,
            dt: 0.005,
            imitation_scale: 1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lin_vel", self.lin_vel),
            ("ang_vel", self.ang_vel),
            ("collisions", self.collisions),
            ("action_rate", self.action_rate),
            ("orientation", self.orientation),
            ("ang_vel_penalty", self.ang_vel_penalty),
            ("lin_vel_penalty", self.lin_vel_penalty),
            ("joint_torques", self.joint_torques),
            ("joint_motion", self.joint_motion),
            ("feet_slip", self.feet_slip),
            ("joint_angles", self.joint_angles),
            ("ee_position", self.ee_position),
            ("foot_height", self.foot_height),
            ("base_height", self.base_height),
            ("imitation_scale", self.imitation_scale),
        ];
        for (name, w) in weights {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::validation(format!("rewards.{name}"), "must be finite and >= 0"));
            }
        }
        let sigmas = [
            ("sigma_tracking", self.sigma_tracking),
            ("sigma_q", self.sigma_q),
            ("sigma_ee", self.sigma_ee),
            ("sigma_fh", self.sigma_fh),
            ("dt", self.dt),
        ];
        for (name, s) in sigmas {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(format!("rewards.{name}"), "must be > 0"));
            }
        }
        Ok(())
    }
}

/// Squared-exponential kernel `exp(-x²/σ)` given `x²`.
pub fn phi(sq_norm: f64, sigma: f64) -> f64 {
    (-sq_norm / sigma).exp()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ShapingTerms {
    pub lin_vel: f64,
    pub ang_vel: f64,
    pub collisions: f64,
    pub action_rate: f64,
    pub orientation: f64,
    pub ang_vel_penalty: f64,
    pub lin_vel_penalty: f64,
    pub joint_torques: f64,
    pub joint_motion: f64,
    pub feet_slip: f64,
}

impl ShapingTerms {
    pub const NAMES: [&'static str; 10] = [
        "lin_vel",
        "ang_vel",
        "collisions",
        "action_rate",
        "orientation",
        "ang_vel_penalty",
        "lin_vel_penalty",
        "joint_torques",
        "joint_motion",
        "feet_slip",
    ];

    pub fn values(&self) -> [f64; 10] {
        [
            self.lin_vel,
            self.ang_vel,
            self.collisions,
            self.action_rate,
            self.orientation,
            self.ang_vel_penalty,
            self.lin_vel_penalty,
            self.joint_torques,
            self.joint_motion,
            self.feet_slip,
        ]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ImitationTerms {
    pub joint_angles: f64,
    pub ee_position: f64,
    pub foot_height: f64,
    pub base_height: f64,
}

impl ImitationTerms {
    pub const NAMES: [&'static str; 4] = ["joint_angles", "ee_position", "foot_height", "base_height"];

    pub fn values(&self) -> [f64; 4] {
        [self.joint_angles, self.ee_position, self.foot_height, self.base_height]
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn sq_norm(a: impl IntoIterator<Item = f64>) -> f64 {
    a.into_iter().map(|x| x * x).sum()
}

pub struct ShapingInputs<'a> {
    pub prev: &'a SimState,
    pub curr: &'a SimState,
    pub torques: &'a [f64],
    pub contact: &'a ContactReport,
    pub cmd: Command,
    pub a_prev: &'a [f64],
    pub a_curr: &'a [f64],
}

/// Task and regularization rewards for one transition.
pub fn shaping_reward(x: &ShapingInputs, w: &RewardWeights) -> (f64, ShapingTerms) {
    let dt = w.dt;
    let v = x.curr.base_vel;
    let qddot = x
        .curr
        .qdot
        .iter()
        .zip(&x.prev.qdot)
        .map(|(a, b)| (a - b) / dt);
    let slip: f64 = x
        .contact
        .foot_points()
        .filter(|p| p.in_contact)
        .map(|p| p.velocity[0].abs())
        .sum();
    // change per control step; dividing by dt makes exploration noise alone outweigh the tracking reward
    let action_rate = sq_norm(x.a_curr.iter().zip(x.a_prev).map(|(a, b)| a - b)).sqrt();
    let terms = ShapingTerms {
        lin_vel: w.lin_vel * dt * phi((x.cmd.v_cmd - v[0]).powi(2), w.sigma_tracking),
        // yaw rate is identically zero in the sagittal plane
        ang_vel: w.ang_vel * dt * phi(x.cmd.w_cmd.powi(2), w.sigma_tracking),
        collisions: -w.collisions * dt * x.contact.n_collisions() as f64,
        action_rate: -w.action_rate * dt * action_rate,
        orientation: -w.orientation * dt * x.curr.pitch().powi(2),
        ang_vel_penalty: -w.ang_vel_penalty * dt * v[2].powi(2),
        lin_vel_penalty: -w.lin_vel_penalty * dt * v[1].powi(2),
        joint_torques: -w.joint_torques * dt * sq_norm(x.torques.iter().copied()),
        joint_motion: -w.joint_motion * dt * (sq_norm(qddot) + sq_norm(x.curr.qdot.iter().copied())),
        feet_slip: -w.feet_slip * dt * slip,
    };
    (terms.total(), terms)
}

/// Imitation rewards against one reference frame. `fk` must describe `state`.
pub fn imitation_reward(
    state: &SimState,
    reference: &ImitationFrame,
    fk: &FkOutput,
    w: &RewardWeights,
) -> Result<(f64, ImitationTerms)> {
    let n = state.q.len();
    if reference.q_hat.len() != n {
        return Err(Error::dimension("imitation reference q_hat", n, reference.q_hat.len()));
    }
    let feet = fk.ee_body.len();
    if reference.r_e_hat.len() != feet || reference.r_z_hat.len() != feet || fk.feet_world.len() != feet {
        return Err(Error::dimension("imitation reference feet", feet, reference.r_e_hat.len()));
    }
    let dt = w.dt;
    let s = w.imitation_scale;
    let ee: f64 = reference
        .r_e_hat
        .iter()
        .zip(&fk.ee_body)
        .map(|(a, b)| sq_diff(a, b))
        .sum();
    let fh: f64 = reference
        .r_z_hat
        .iter()
        .zip(&fk.feet_world)
        .map(|(a, b)| (a - b[1]) * (a - b[1]))
        .sum();
    let terms = ImitationTerms {
        joint_angles: s * w.joint_angles * dt * phi(sq_diff(&reference.q_hat, &state.q), w.sigma_q),
        ee_position: s * w.ee_position * dt * phi(ee, w.sigma_ee),
        foot_height: s * w.foot_height * dt * phi(fh, w.sigma_fh),
        base_height: -s * w.base_height * dt * (reference.h_hat - state.height()).abs(),
    };
    Ok((terms.total(), terms))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminationConfig {
    /// rad
    pub pitch_limit: f64,
    pub max_steps: u64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        TerminationConfig {
            pitch_limit: 1.0,
            max_steps: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    BaseContact,
    Orientation,
    Timeout,
}

impl Termination {
    /// Everything except running out of time counts as a fall.
    pub fn is_fall(self) -> bool {
        self != Termination::Timeout
    }
}

/// Episode end check; `state.time_step` counts steps since the reset.
pub fn terminate(state: &SimState, contact: &ContactReport, cfg: &TerminationConfig) -> Option<Termination> {
    if contact.base_contact() {
        Some(Termination::BaseContact)
    } else if state.pitch().abs() > cfg.pitch_limit {
        Some(Termination::Orientation)
    } else if state.time_step >= cfg.max_steps {
        Some(Termination::Timeout)
    } else {
        None
    }
}

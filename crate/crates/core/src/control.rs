//! Action adapters: raw policy output to joint torques.

use serde::{Deserialize, Serialize};

use crate::dynamics::SimState;
use crate::error::{Error, Result};
use crate::imitation::ImitationFrame;
use crate::robots::RobotModel;

/// A gain given once for every joint or per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainValue {
    Uniform(f64),
    PerJoint(Vec<f64>),
}

impl GainValue {
    pub fn resolve(&self, n: usize, field: &str) -> Result<Vec<f64>> {
        let v = match self {
            GainValue::Uniform(g) => vec![*g; n],
            GainValue::PerJoint(v) if v.len() == n => v.clone(),
            GainValue::PerJoint(v) => return Err(Error::dimension(field.to_string(), n, v.len())),
        };
        if v.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
            return Err(Error::validation(field, "gains must be finite and >= 0"));
        }
        Ok(v)
    }

    fn scaled(&self, c: f64) -> GainValue {
        match self {
            GainValue::Uniform(g) => GainValue::Uniform(g * c),
            GainValue::PerJoint(v) => GainValue::PerJoint(v.iter().map(|g| g * c).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSpec {
    pub kp: GainValue,
    pub kd: GainValue,
}

impl Default for GainSpec {
    fn default() -> Self {
        GainSpec {
            kp: GainValue::Uniform(20.0),
            kd: GainValue::Uniform(0.5),
        }
    }
}

impl GainSpec {
    pub fn resolve(&self, n: usize, field: &str) -> Result<Gains> {
        Ok(Gains {
            kp: self.kp.resolve(n, &format!("{field}.kp"))?,
            kd: self.kd.resolve(n, &format!("{field}.kd"))?,
        })
    }

    pub fn scaled(&self, c: f64) -> GainSpec {
        GainSpec {
            kp: self.kp.scaled(c),
            kd: self.kd.scaled(c),
        }
    }
}

/// Per-joint PD gains (N·m/rad and N·m·s/rad).
#[derive(Debug, Clone, PartialEq)]
pub struct Gains {
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
}

/// `Kp·(q_des − q) − Kd·q̇`, unclamped.
pub fn pd_torque(q_des: &[f64], q: &[f64], qdot: &[f64], gains: &Gains) -> Result<Vec<f64>> {
    let n = q.len();
    for (what, len) in [
        ("q_des", q_des.len()),
        ("qdot", qdot.len()),
        ("kp", gains.kp.len()),
        ("kd", gains.kd.len()),
    ] {
        if len != n {
            return Err(Error::dimension(format!("pd_torque {what}"), n, len));
        }
    }
    Ok((0..n)
        .map(|i| gains.kp[i] * (q_des[i] - q[i]) + gains.kd[i] * (-qdot[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecaySchedule {
    pub gamma_decay: f64,
    /// steps
    pub k: f64,
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule {
            gamma_decay: 0.99,
            k: 100.0,
        }
    }
}

impl DecaySchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_decay > 0.0 && self.gamma_decay < 1.0) {
            return Err(Error::validation("action.schedule.gamma_decay", "must be in (0, 1)"));
        }
        if !(self.k.is_finite() && self.k >= 1.0) {
            return Err(Error::validation("action.schedule.k", "must be >= 1"));
        }
        Ok(())
    }

    /// First step at which the factor drops below `threshold`.
    pub fn first_step_below(&self, threshold: f64) -> u64 {
        let guess = (self.k * threshold.ln() / self.gamma_decay.ln()).floor().max(0.0) as u64;
        let mut t = guess.saturating_sub(2);
        while decay_factor(self, t) >= threshold {
            t += 1;
        }
        t
    }
}

/// `γ^(t/k)`; floored at the smallest positive normal so it never reaches 0.
pub fn decay_factor(schedule: &DecaySchedule, t: u64) -> f64 {
    schedule
        .gamma_decay
        .powf(t as f64 / schedule.k)
        .max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Position,
    Torque,
    Decap,
    Assisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayClock {
    /// Global synchronized environment steps of the training run.
    #[default]
    Global,
    /// Steps since the episode started.
    Episode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionConfig {
    pub mode: ActionMode,
    /// Defaults to 0.25 for position mode and 8.0 otherwise.
    pub action_scale: Option<f64>,
    pub gains: GainSpec,
    pub schedule: DecaySchedule,
    pub decay_clock: DecayClock,
    /// Defaults to a quarter of `gains`.
    pub assist_gains: Option<GainSpec>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig {
            mode: ActionMode::Position,
            action_scale: None,
            gains: GainSpec::default(),
            schedule: DecaySchedule::default(),
            decay_clock: DecayClock::Global,
            assist_gains: None,
        }
    }
}

pub const POSITION_SCALE: f64 = 0.25;
pub const TORQUE_SCALE: f64 = 8.0;
pub const ASSIST_FRACTION: f64 = 0.25;

impl ActionConfig {
    pub fn scale(&self) -> f64 {
        self.action_scale.unwrap_or(match self.mode {
            ActionMode::Position => POSITION_SCALE,
            _ => TORQUE_SCALE,
        })
    }

    pub fn assist_spec(&self) -> GainSpec {
        self.assist_gains
            .clone()
            .unwrap_or_else(|| self.gains.scaled(ASSIST_FRACTION))
    }

    pub fn validate(&self, n_joints: usize) -> Result<()> {
        let s = self.scale();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::validation("action.action_scale", "must be > 0"));
        }
        self.gains.resolve(n_joints, "action.gains")?;
        self.assist_spec().resolve(n_joints, "action.assist_gains")?;
        self.schedule.validate()
    }

    pub fn resolve(&self, model: &RobotModel) -> Result<ActionAdapter> {
        let n = model.n_joints();
        self.validate(n)?;
        Ok(ActionAdapter {
            mode: self.mode,
            scale: self.scale(),
            gains: self.gains.resolve(n, "action.gains")?,
            assist_gains: self.assist_spec().resolve(n, "action.assist_gains")?,
            schedule: self.schedule.clone(),
            nominal: model.nominal_pose.clone(),
            limits: model.torque_limits.clone(),
        })
    }
}

/// Mode-dependent inputs besides the raw action.
#[derive(Debug, Clone, Copy, Default)]
pub struct ActionInputs<'a> {
    /// Imitation reference (decap mode).
    pub reference: Option<&'a ImitationFrame>,
    /// Position-policy joint target (assisted mode).
    pub position_target: Option<&'a [f64]>,
}

/// An [`ActionConfig`] resolved against a robot model.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionAdapter {
    pub mode: ActionMode,
    pub scale: f64,
    pub gains: Gains,
    pub assist_gains: Gains,
    pub schedule: DecaySchedule,
    pub nominal: Vec<f64>,
    pub limits: Vec<f64>,
}

impl ActionAdapter {
    /// Joint target of a position-mode action.
    pub fn position_target(&self, raw: &[f64]) -> Vec<f64> {
        self.nominal
            .iter()
            .zip(raw)
            .map(|(q0, a)| q0 + self.scale * a)
            .collect()
    }

    /// Torques before clamping to the model limits.
    pub fn raw_torques(&self, raw: &[f64], state: &SimState, inputs: ActionInputs, t: u64) -> Result<Vec<f64>> {
        let n = self.nominal.len();
        if raw.len() != n {
            return Err(Error::dimension("raw action", n, raw.len()));
        }
        let scaled = || raw.iter().map(|a| self.scale * a).collect::<Vec<f64>>();
        match self.mode {
            ActionMode::Position => pd_torque(&self.position_target(raw), &state.q, &state.qdot, &self.gains),
            ActionMode::Torque => Ok(scaled()),
            ActionMode::Decap => {
                let reference = inputs
                    .reference
                    .ok_or_else(|| Error::MissingField("imitation reference for decap mode".into()))?;
                let prior = pd_torque(&reference.q_hat, &state.q, &state.qdot, &self.gains)?;
                let f = decay_factor(&self.schedule, t);
                Ok(scaled().iter().zip(&prior).map(|(a, b)| a + f * b).collect())
            }
            ActionMode::Assisted => {
                let target = inputs
                    .position_target
                    .ok_or_else(|| Error::MissingField("position target for assisted mode".into()))?;
                let assist = pd_torque(target, &state.q, &state.qdot, &self.assist_gains)?;
                Ok(scaled().iter().zip(&assist).map(|(a, b)| a + b).collect())
            }
        }
    }

    /// Torques clamped to the model limits.
    pub fn apply(&self, raw: &[f64], state: &SimState, inputs: ActionInputs, t: u64) -> Result<Vec<f64>> {
        Ok(self
            .raw_torques(raw, state, inputs, t)?
            .iter()
            .zip(&self.limits)
            .map(|(tau, lim)| tau.clamp(-lim, *lim))
            .collect())
    }
}

/// One-shot form of [`ActionAdapter::apply`].
pub fn apply_action(
    raw: &[f64],
    state: &SimState,
    inputs: ActionInputs,
    cfg: &ActionConfig,
    model: &RobotModel,
    t: u64,
) -> Result<Vec<f64>> {
    cfg.resolve(model)?.apply(raw, state, inputs, t)
}

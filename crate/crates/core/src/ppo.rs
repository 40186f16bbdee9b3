//! PPO-Clip with generalized advantage estimation and a Gaussian
//! multilayer-perceptron actor-critic, written directly on `ndarray`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in × out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Hidden-layer outputs kept for the backward pass.
struct Trace {
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_gain: f64, rng: &mut R) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
                let gain = if l + 1 == n { out_gain } else { 1.0 };
                let std = gain / (fan_in as f64).sqrt();
                let w = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                });
                Layer {
                    w,
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    w: Array2::zeros(l.w.raw_dim()),
                    b: Array1::zeros(l.b.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.nrows()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.ncols()
    }

    fn forward_trace(&self, x: ArrayView2<f64>) -> (Array2<f64>, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        (h, Trace { inputs })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.w);
            z += &layer.b;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            h = z;
        }
        h
    }

    /// Accumulates parameter gradients of a loss with output gradient `d_out`.
    fn backward(&self, trace: &Trace, d_out: Array2<f64>, grads: &mut Mlp) {
        let mut d = d_out;
        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            grads.layers[i].w += &input.t().dot(&d);
            grads.layers[i].b += &d.sum_axis(Axis(0));
            if i > 0 {
                let mut dh = d.dot(&self.layers[i].w.t());
                // input of layer i is tanh output of layer i-1
                Zip::from(&mut dh).and(input).for_each(|g, &y| *g *= 1.0 - y * y);
                d = dh;
            }
        }
    }

    fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
    }

    fn load_flat(&mut self, flat: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub actor: Mlp,
    pub log_std: Array1<f64>,
    pub critic: Mlp,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput {
    pub mean: Array2<f64>,
    pub log_std: Array1<f64>,
    pub value: Array1<f64>,
}

impl PolicyParameters {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], init_log_std: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let mut actor_sizes = sizes.clone();
        actor_sizes.push(act_dim);
        let mut critic_sizes = sizes;
        critic_sizes.push(1);
        PolicyParameters {
            actor: Mlp::new(&actor_sizes, 0.01, rng),
            log_std: Array1::from_elem(act_dim, init_log_std),
            critic: Mlp::new(&critic_sizes, 1.0, rng),
            activation: Activation::Tanh,
        }
    }

    pub fn zeros_like(&self) -> Self {
        PolicyParameters {
            actor: self.actor.zeros_like(),
            log_std: Array1::zeros(self.log_std.len()),
            critic: self.critic.zeros_like(),
            activation: self.activation,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn hidden(&self) -> Vec<usize> {
        let s = self.actor.sizes();
        s[1..s.len() - 1].to_vec()
    }

    pub fn n_params(&self) -> usize {
        self.actor.n_params() + self.log_std.len() + self.critic.n_params()
    }

    /// Actor layers, log-std, then critic layers; weights row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.actor.flatten_into(&mut out);
        out.extend(self.log_std.iter());
        self.critic.flatten_into(&mut out);
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::dimension("flat parameters", self.n_params(), flat.len()));
        }
        let mut k = self.actor.load_flat(flat);
        for v in self.log_std.iter_mut() {
            *v = flat[k];
            k += 1;
        }
        self.critic.load_flat(&flat[k..]);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn check_obs(&self, obs: ArrayView2<f64>) -> Result<()> {
        if obs.ncols() != self.obs_dim() {
            return Err(Error::dimension("policy observation", self.obs_dim(), obs.ncols()));
        }
        Ok(())
    }

    pub fn eval(&self, obs: ArrayView2<f64>) -> Result<NetOutput> {
        self.check_obs(obs)?;
        Ok(NetOutput {
            mean: self.actor.forward(obs),
            log_std: self.log_std.clone(),
            value: self.critic.forward(obs).column(0).to_owned(),
        })
    }

    pub fn value(&self, obs: ArrayView2<f64>) -> Result<Array1<f64>> {
        self.check_obs(obs)?;
        Ok(self.critic.forward(obs).column(0).to_owned())
    }
}

/// Forward pass plus, when `loss_grad` is given, the gradient of a scalar
/// loss whose partial derivatives with respect to the mean, log-std and
/// value outputs are supplied by the callback.
pub fn net_eval(
    params: &PolicyParameters,
    obs: ArrayView2<f64>,
    loss_grad: Option<&dyn Fn(&NetOutput) -> OutputGrads>,
) -> Result<(NetOutput, Option<PolicyParameters>)> {
    params.check_obs(obs)?;
    let (mean, actor_trace) = params.actor.forward_trace(obs);
    let (value, critic_trace) = params.critic.forward_trace(obs);
    let out = NetOutput {
        mean,
        log_std: params.log_std.clone(),
        value: value.column(0).to_owned(),
    };
    let grads = loss_grad.map(|f| {
        let g = f(&out);
        let mut grads = params.zeros_like();
        params.actor.backward(&actor_trace, g.mean, &mut grads.actor);
        grads.log_std = g.log_std;
        let n = g.value.len();
        let dv = g.value.into_shape_with_order((n, 1)).expect("column");
        params.critic.backward(&critic_trace, dv, &mut grads.critic);
        grads
    });
    Ok((out, grads))
}

/// Partial derivatives of a loss with respect to the network outputs.
pub struct OutputGrads {
    pub mean: Array2<f64>,
    pub log_std: Array1<f64>,
    pub value: Array1<f64>,
}

const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn gaussian_log_prob(action: ArrayView1<f64>, mean: ArrayView1<f64>, log_std: ArrayView1<f64>) -> f64 {
    let mut lp = 0.0;
    for j in 0..action.len() {
        let z = (action[j] - mean[j]) * (-log_std[j]).exp();
        lp += -0.5 * z * z - log_std[j] - LOG_SQRT_2PI;
    }
    lp
}

pub fn gaussian_entropy(log_std: ArrayView1<f64>) -> f64 {
    log_std.iter().map(|s| s + 0.5 * (1.0 + (2.0 * PI).ln())).sum()
}

/// Mean KL(old ‖ new) between diagonal Gaussians.
pub fn gaussian_kl(
    old_mean: ArrayView2<f64>,
    old_log_std: ArrayView1<f64>,
    new_mean: ArrayView2<f64>,
    new_log_std: ArrayView1<f64>,
) -> f64 {
    let b = old_mean.nrows();
    let mut kl = 0.0;
    for i in 0..b {
        for j in 0..old_mean.ncols() {
            let (so, sn) = (old_log_std[j].exp(), new_log_std[j].exp());
            let dm = old_mean[(i, j)] - new_mean[(i, j)];
            kl += new_log_std[j] - old_log_std[j] + (so * so + dm * dm) / (2.0 * sn * sn) - 0.5;
        }
    }
    kl / b as f64
}

/// Generalized advantage estimation over one trajectory. `dones[t]` marks
/// that the episode ended after step `t`; `bootstrap` is `V(s_T)`.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut last = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let not_done = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * not_done - values[t];
        last = delta + gamma * lambda * not_done * last;
        adv[t] = last;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize(x: &mut [f64]) {
    let n = x.len() as f64;
    if x.is_empty() {
        return;
    }
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for v in x.iter_mut() {
        *v -= mean;
        if std > 1e-12 {
            *v /= std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Adaptive,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub clip_value_loss: bool,
    pub max_grad_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
    pub desired_kl: f64,
    pub n_envs: usize,
    pub steps_per_iteration: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    /// Initial log standard deviation of the action noise; defaults to 0 (unit std).
    pub init_log_std: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            learning_rate: 1e-3,
            epochs: 5,
            minibatches: 4,
            entropy_coef: 0.01,
            value_coef: 1.0,
            clip_value_loss: true,
            max_grad_norm: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            schedule: LrSchedule::Adaptive,
            desired_kl: 0.01,
            n_envs: 64,
            steps_per_iteration: 160,
            iterations: 300,
            hidden: vec![64, 64],
            init_log_std: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, bool, &str); 13] = [
            ("ppo.clip", self.clip > 0.0, "must be > 0"),
            ("ppo.gamma", self.gamma > 0.0 && self.gamma <= 1.0, "must be in (0, 1]"),
            ("ppo.lambda", self.lambda > 0.0 && self.lambda <= 1.0, "must be in (0, 1]"),
            ("ppo.learning_rate", self.learning_rate > 0.0, "must be > 0"),
            ("ppo.epochs", self.epochs >= 1, "must be >= 1"),
            ("ppo.minibatches", self.minibatches >= 1, "must be >= 1"),
            ("ppo.n_envs", self.n_envs >= 1, "must be >= 1"),
            ("ppo.steps_per_iteration", self.steps_per_iteration >= 1, "must be >= 1"),
            ("ppo.iterations", self.iterations >= 1, "must be >= 1"),
            ("ppo.hidden", !self.hidden.is_empty() && self.hidden.iter().all(|h| *h > 0), "need at least one non-empty layer"),
            ("ppo.max_grad_norm", self.max_grad_norm > 0.0, "must be > 0"),
            ("ppo.adam_beta1", (0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2), "betas must be in [0, 1)"),
            ("ppo.minibatches", self.minibatches <= self.n_envs * self.steps_per_iteration, "more minibatches than samples"),
        ];
        for (field, ok, reason) in checks {
            if !ok {
                return Err(Error::validation(field, reason));
            }
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.desired_kl > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::validation("ppo", "coefficients must be non-negative"));
        }
        Ok(())
    }
}

/// Transitions of one iteration, stored step-major (`t * n_envs + env`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub n_steps: usize,
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Array1<f64>,
    pub rewards: Array1<f64>,
    pub values: Array1<f64>,
    pub dones: Vec<bool>,
    /// Policy mean at collection time, for the KL estimate.
    pub old_means: Array2<f64>,
    pub old_log_std: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.n_envs * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fills advantages and returns per environment, then normalizes the
    /// advantages over the whole batch.
    pub fn compute_advantages(&mut self, bootstrap: ArrayView1<f64>, gamma: f64, lambda: f64) {
        let (ne, ns) = (self.n_envs, self.n_steps);
        let mut adv = Array1::zeros(ne * ns);
        let mut ret = Array1::zeros(ne * ns);
        for e in 0..ne {
            let idx = |t: usize| t * ne + e;
            let r: Vec<f64> = (0..ns).map(|t| self.rewards[idx(t)]).collect();
            let v: Vec<f64> = (0..ns).map(|t| self.values[idx(t)]).collect();
            let d: Vec<bool> = (0..ns).map(|t| self.dones[idx(t)]).collect();
            let (a, rt) = gae(&r, &v, &d, bootstrap[e], gamma, lambda);
            for t in 0..ns {
                adv[idx(t)] = a[t];
                ret[idx(t)] = rt[t];
            }
        }
        normalize(adv.as_slice_mut().expect("contiguous"));
        self.advantages = adv;
        self.returns = ret;
    }
}

/// A minibatch view used by the loss.
pub struct Minibatch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub old_log_probs: Array1<f64>,
    pub old_values: Array1<f64>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
}

impl Minibatch {
    pub fn gather(batch: &RolloutBatch, idx: &[usize]) -> Self {
        Minibatch {
            observations: batch.observations.select(Axis(0), idx),
            actions: batch.actions.select(Axis(0), idx),
            old_log_probs: batch.log_probs.select(Axis(0), idx),
            old_values: batch.values.select(Axis(0), idx),
            advantages: batch.advantages.select(Axis(0), idx),
            returns: batch.returns.select(Axis(0), idx),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub surrogate: f64,
    pub value: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub clip_value_loss: bool,
}

impl From<&PpoConfig> for LossCoefficients {
    fn from(c: &PpoConfig) -> Self {
        LossCoefficients {
            clip: c.clip,
            value_coef: c.value_coef,
            entropy_coef: c.entropy_coef,
            clip_value_loss: c.clip_value_loss,
        }
    }
}

impl LossParts {
    pub fn total(&self, c: &LossCoefficients) -> f64 {
        self.surrogate + c.value_coef * self.value - c.entropy_coef * self.entropy
    }
}

/// Clipped surrogate, value and entropy losses with their exact gradient.
pub fn ppo_loss(params: &PolicyParameters, mb: &Minibatch, c: &LossCoefficients, with_grad: bool) -> Result<(LossParts, Option<PolicyParameters>)> {
    let b = mb.observations.nrows();
    let bf = b as f64;
    let cell = std::cell::Cell::new(LossParts::default());
    let grad_fn = |out: &NetOutput| -> OutputGrads {
        let a_dim = out.mean.ncols();
        let inv_var: Vec<f64> = out.log_std.iter().map(|s| (-2.0 * s).exp()).collect();
        let mut d_mean = Array2::zeros((b, a_dim));
        let mut d_log_std = Array1::zeros(a_dim);
        let mut d_value = Array1::zeros(b);
        let mut parts = LossParts::default();
        let mut clipped = 0usize;
        for i in 0..b {
            let lp = gaussian_log_prob(mb.actions.row(i), out.mean.row(i), out.log_std.view());
            let ratio = (lp - mb.old_log_probs[i]).exp();
            let adv = mb.advantages[i];
            let unclipped = ratio * adv;
            let clipped_ratio = ratio.clamp(1.0 - c.clip, 1.0 + c.clip);
            let clipped_obj = clipped_ratio * adv;
            parts.surrogate -= unclipped.min(clipped_obj) / bf;
            if (ratio - 1.0).abs() > c.clip {
                clipped += 1;
            }
            // d(-min)/d(logp): active only through the unclipped branch
            let inside = ratio > 1.0 - c.clip && ratio < 1.0 + c.clip;
            let g_lp = if unclipped <= clipped_obj || inside { -adv * ratio / bf } else { 0.0 };
            if g_lp != 0.0 {
                for j in 0..a_dim {
                    let diff = mb.actions[(i, j)] - out.mean[(i, j)];
                    d_mean[(i, j)] = g_lp * diff * inv_var[j];
                    d_log_std[j] += g_lp * (diff * diff * inv_var[j] - 1.0);
                }
            }

            let v = out.value[i];
            let err = v - mb.returns[i];
            if c.clip_value_loss {
                let dv = (v - mb.old_values[i]).clamp(-c.clip, c.clip);
                let err_c = mb.old_values[i] + dv - mb.returns[i];
                if err * err >= err_c * err_c {
                    parts.value += err * err / bf;
                    d_value[i] = c.value_coef * 2.0 * err / bf;
                } else {
                    parts.value += err_c * err_c / bf;
                    let pass = (v - mb.old_values[i]).abs() < c.clip;
                    d_value[i] = if pass { c.value_coef * 2.0 * err_c / bf } else { 0.0 };
                }
            } else {
                parts.value += err * err / bf;
                d_value[i] = c.value_coef * 2.0 * err / bf;
            }
        }
        parts.entropy = gaussian_entropy(out.log_std.view());
        d_log_std -= c.entropy_coef;
        parts.clip_fraction = clipped as f64 / bf;
        cell.set(parts);
        OutputGrads {
            mean: d_mean,
            log_std: d_log_std,
            value: d_value,
        }
    };
    let (_, grads) = if with_grad {
        net_eval(params, mb.observations.view(), Some(&grad_fn))?
    } else {
        let (out, _) = net_eval(params, mb.observations.view(), None)?;
        grad_fn(&out);
        (out, None)
    };
    let parts = cell.get();
    if !parts.total(c).is_finite() {
        return Err(Error::NonFinite("PPO loss".into()));
    }
    Ok((parts, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &PpoConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grads[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grads[i] * grads[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub params: PolicyParameters,
    pub adam: Adam,
    pub learning_rate: f64,
}

impl Learner {
    pub fn new(params: PolicyParameters, cfg: &PpoConfig) -> Self {
        let n = params.n_params();
        Learner {
            params,
            adam: Adam::new(n),
            learning_rate: cfg.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub surrogate_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub learning_rate: f64,
}

/// Epochs of shuffled minibatch Adam steps on the clipped PPO objective.
/// On a non-finite loss the learner is left exactly as it was.
pub fn ppo_update<R: Rng + ?Sized>(learner: &mut Learner, batch: &RolloutBatch, cfg: &PpoConfig, rng: &mut R) -> Result<UpdateStats> {
    let mut work = learner.clone();
    let coeffs = LossCoefficients::from(cfg);
    let n = batch.len();
    let mb_size = n / cfg.minibatches;
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for m in 0..cfg.minibatches {
            let idx = &order[m * mb_size..(m + 1) * mb_size];
            let mb = Minibatch::gather(batch, idx);
            if cfg.schedule == LrSchedule::Adaptive {
                let mean = work.params.actor.forward(mb.observations.view());
                let old_means = batch.old_means.select(Axis(0), idx);
                let kl = gaussian_kl(old_means.view(), batch.old_log_std.view(), mean.view(), work.params.log_std.view());
                if kl > 2.0 * cfg.desired_kl {
                    work.learning_rate = (work.learning_rate / 1.5).max(1e-5);
                } else if kl < 0.5 * cfg.desired_kl && kl > 0.0 {
                    work.learning_rate = (work.learning_rate * 1.5).min(1e-2);
                }
                stats.kl += kl;
            }
            let (parts, grads) = ppo_loss(&work.params, &mb, &coeffs, true)?;
            let mut g = grads.expect("requested").to_flat();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite("PPO gradient".into()));
            }
            if norm > cfg.max_grad_norm {
                let s = cfg.max_grad_norm / norm;
                g.iter_mut().for_each(|v| *v *= s);
            }
            let mut flat = work.params.to_flat();
            work.adam.step(&mut flat, &g, work.learning_rate, cfg);
            work.params.set_flat(&flat)?;
            stats.surrogate_loss += parts.surrogate;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.clip_fraction += parts.clip_fraction;
            count += 1.0;
        }
    }
    if !work.params.is_finite() {
        return Err(Error::NonFinite("policy parameters after update".into()));
    }
    stats.surrogate_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.clip_fraction /= count;
    stats.kl /= count;
    stats.learning_rate = work.learning_rate;
    *learner = work;
    Ok(stats)
}

/// Vectorized environment driven by [`collect_rollouts`].
pub trait VecEnv {
    fn n_envs(&self) -> usize;
    /// Current policy inputs, one row per environment.
    fn observations(&self) -> Array2<f64>;
    /// Applies one raw action per environment.
    fn step(&mut self, actions: ArrayView2<f64>) -> Result<VecStep>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecStep {
    pub rewards: Vec<f64>,
    /// Episode ended (any reason).
    pub dones: Vec<bool>,
    /// Episode ended only because it ran out of time.
    pub timeouts: Vec<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutSettings {
    pub steps: usize,
    pub gamma: f64,
    pub deterministic: bool,
}

/// Steps every environment in lockstep and assembles the batch. Episodes
/// cut by the time limit get `γ·V(s)` added to their last reward.
pub fn collect_rollouts<E: VecEnv + ?Sized, R: Rng + ?Sized>(
    env: &mut E,
    params: &PolicyParameters,
    settings: RolloutSettings,
    rng: &mut R,
) -> Result<RolloutBatch> {
    let ne = env.n_envs();
    let ns = settings.steps;
    let (od, ad) = (params.obs_dim(), params.act_dim());
    let mut observations = Array2::zeros((ne * ns, od));
    let mut actions = Array2::zeros((ne * ns, ad));
    let mut old_means = Array2::zeros((ne * ns, ad));
    let mut log_probs = Array1::zeros(ne * ns);
    let mut rewards = Array1::zeros(ne * ns);
    let mut values = Array1::zeros(ne * ns);
    let mut dones = vec![false; ne * ns];
    let std: Vec<f64> = params.log_std.iter().map(|s| s.exp()).collect();
    for t in 0..ns {
        let obs = env.observations();
        let out = params.eval(obs.view())?;
        let mut act = out.mean.clone();
        if !settings.deterministic {
            for mut row in act.rows_mut() {
                for (j, a) in row.iter_mut().enumerate() {
                    let eps: f64 = StandardNormal.sample(rng);
                    *a += std[j] * eps;
                }
            }
        }
        let step = env.step(act.view())?;
        for e in 0..ne {
            let k = t * ne + e;
            observations.row_mut(k).assign(&obs.row(e));
            actions.row_mut(k).assign(&act.row(e));
            old_means.row_mut(k).assign(&out.mean.row(e));
            log_probs[k] = gaussian_log_prob(act.row(e), out.mean.row(e), params.log_std.view());
            values[k] = out.value[e];
            let bonus = if step.timeouts[e] { settings.gamma * out.value[e] } else { 0.0 };
            rewards[k] = step.rewards[e] + bonus;
            dones[k] = step.dones[e];
        }
    }
    Ok(RolloutBatch {
        n_envs: ne,
        n_steps: ns,
        observations,
        actions,
        log_probs,
        rewards,
        values,
        dones,
        old_means,
        old_log_std: params.log_std.clone(),
        advantages: Array1::zeros(ne * ns),
        returns: Array1::zeros(ne * ns),
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub robot: String,
    /// Action mode the policy was trained for.
    pub mode: String,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: PolicyParameters,
}

impl Checkpoint {
    pub fn new(robot: &str, mode: &str, params: PolicyParameters) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                robot: robot.into(),
                mode: mode.into(),
                obs_dim: params.obs_dim(),
                act_dim: params.act_dim(),
                hidden: params.hidden(),
                activation: params.activation,
                n_params: params.n_params(),
            },
            params,
        }
    }

    /// Header line, then one parameter per line at 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for v in self.params.to_flat() {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }

    /// Content hash identifying this checkpoint.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, path)
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, reason: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let raw: serde_json::Value =
            serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
        let version = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0);
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(raw).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
        let mut flat = Vec::with_capacity(header.n_params);
        for (k, line) in lines.enumerate() {
            let v = line
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(k + 2, format!("bad number: {e}")))?;
            flat.push(v);
        }
        let mut params = PolicyParameters::new(
            header.obs_dim,
            header.act_dim,
            &header.hidden,
            0.0,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
        if flat.len() != params.n_params() || header.n_params != params.n_params() {
            return Err(parse_err(
                flat.len() + 1,
                format!("expected {} parameters, found {}", params.n_params(), flat.len()),
            ));
        }
        params.set_flat(&flat)?;
        params.activation = header.activation;
        Ok(Checkpoint { header, params })
    }
}

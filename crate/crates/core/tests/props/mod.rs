//! Invariant checks shared by the property test target and the acceptance run.
#![allow(dead_code)]

use std::path::Path;

use decap_core::control::{
    decay_factor, pd_torque, ActionConfig, ActionInputs, ActionMode, DecaySchedule, Gains,
};
use decap_core::dynamics::{contact_forces, contact_point_force, forward_kinematics, SimState};
use decap_core::imitation::{self, ImitationDataset, ImitationFrame, ImitationHeader, Trajectory};
use decap_core::ppo::{gaussian_log_prob, normalize, ppo_loss, Checkpoint, LossCoefficients, Minibatch, PolicyParameters};
use decap_core::robots::{bundled, RobotModel};
use decap_core::task::{
    imitation_reward, phi, projected_gravity, shaping_reward, Command, RewardWeights, ShapingInputs,
};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const CASES: u32 = 1000;

pub type Check = fn(u32) -> Result<(), String>;

pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("reward terms sum to the reward", reward_decomposition),
        ("kernel range and penalty signs", kernel_and_penalty_signs),
        ("imitation terms peak at the reference", imitation_maximizer),
        ("imitation terms scale linearly", imitation_scale_linearity),
        ("surrogate equals ratio times advantage inside the clip band", clip_region),
        ("decap torque is policy plus decayed prior", decap_additivity),
        ("applied torques stay within limits", torque_clamping),
        ("contact forces stay in the friction cone", contact_cone),
        ("model json round-trips", model_round_trip),
        ("imitation text round-trips", imitation_round_trip),
        ("checkpoint text round-trips", checkpoint_round_trip),
        ("decay factor is monotone", decay_monotone),
        ("rmse is a metric on series", rmse_properties),
        ("normalized advantages have zero mean and unit std", advantage_normalization),
        ("lookup is total and deterministic", lookup_total),
        ("zero position action targets the nominal pose", position_zero_action),
        ("projected gravity is a unit vector", gravity_unit),
    ]
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn hopper() -> RobotModel {
    bundled("hopper").unwrap()
}

fn random_state(model: &RobotModel, rng: &mut ChaCha8Rng) -> SimState {
    let mut s = SimState::nominal(model);
    for (q, lim) in s.q.iter_mut().zip(&model.joint_limits) {
        *q = rng.random_range(lim[0]..lim[1]);
    }
    for v in s.qdot.iter_mut() {
        *v = rng.random_range(-5.0..5.0);
    }
    s.base_pos = [rng.random_range(-1.0..1.0), rng.random_range(0.0..1.2), rng.random_range(-1.0..1.0)];
    s.base_vel = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-3.0..3.0)];
    s
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, r: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-r..r)).collect()
}

fn random_command(rng: &mut ChaCha8Rng) -> Command {
    Command {
        v_cmd: rng.random_range(0.0..1.5),
        w_cmd: rng.random_range(-0.5..0.5),
    }
}

fn random_frame(model: &RobotModel, rng: &mut ChaCha8Rng, step: usize) -> ImitationFrame {
    let n = model.n_joints();
    let f = model.n_feet();
    ImitationFrame {
        q_hat: random_vec(rng, n, 1.0),
        h_hat: rng.random_range(0.2..1.2),
        r_e_hat: (0..f).map(|_| [rng.random_range(-0.5..0.5), rng.random_range(-1.0..0.0)]).collect(),
        r_z_hat: (0..f).map(|_| rng.random_range(0.0..0.2)).collect(),
        v_cmd: rng.random_range(0.0..1.5),
        w_cmd: 0.0,
        step_index: step,
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

pub fn reward_decomposition(cases: u32) -> Result<(), String> {
    let model = hopper();
    let w = RewardWeights::default();
    run(cases, any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = random_state(&model, &mut rng);
        let curr = random_state(&model, &mut rng);
        let contact = contact_forces(&curr, &model);
        let torques = random_vec(&mut rng, 3, 30.0);
        let a_prev = random_vec(&mut rng, 3, 2.0);
        let a_curr = random_vec(&mut rng, 3, 2.0);
        let x = ShapingInputs {
            prev: &prev,
            curr: &curr,
            torques: &torques,
            contact: &contact,
            cmd: random_command(&mut rng),
            a_prev: &a_prev,
            a_curr: &a_curr,
        };
        let (total, terms) = shaping_reward(&x, &w);
        let sum: f64 = terms.values().iter().sum();
        prop_assert!(close(total, sum, 1e-12), "{total} vs {sum}");

        let frame = random_frame(&model, &mut rng, 0);
        let fk = forward_kinematics(&curr.q, curr.base_pos, &model).unwrap();
        let (total, terms) = imitation_reward(&curr, &frame, &fk, &w).unwrap();
        prop_assert!(close(total, terms.values().iter().sum(), 1e-12));
        Ok(())
    })
}

pub fn kernel_and_penalty_signs(cases: u32) -> Result<(), String> {
    let model = hopper();
    let w = RewardWeights::default();
    run(cases, (any::<u64>(), 0.0..100.0f64, 0.01..10.0f64), |(seed, x, sigma)| {
        let k = phi(x, sigma);
        prop_assert!(k > 0.0 || x / sigma > 700.0);
        prop_assert!(k <= 1.0);
        prop_assert!(phi(x + 0.1, sigma) <= k);
        prop_assert_eq!(phi(0.0, sigma), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = random_state(&model, &mut rng);
        let curr = random_state(&model, &mut rng);
        let contact = contact_forces(&curr, &model);
        let torques = random_vec(&mut rng, 3, 30.0);
        let a_prev = random_vec(&mut rng, 3, 2.0);
        let a_curr = random_vec(&mut rng, 3, 2.0);
        let x = ShapingInputs {
            prev: &prev,
            curr: &curr,
            torques: &torques,
            contact: &contact,
            cmd: random_command(&mut rng),
            a_prev: &a_prev,
            a_curr: &a_curr,
        };
        let (_, t) = shaping_reward(&x, &w);
        for (name, v, weight) in [("lin_vel", t.lin_vel, w.lin_vel), ("ang_vel", t.ang_vel, w.ang_vel)] {
            prop_assert!(v >= 0.0 && v <= weight * w.dt * (1.0 + 1e-12), "{name} = {v}");
        }
        let penalties = [
            t.collisions,
            t.action_rate,
            t.orientation,
            t.ang_vel_penalty,
            t.lin_vel_penalty,
            t.joint_torques,
            t.joint_motion,
            t.feet_slip,
        ];
        prop_assert!(penalties.iter().all(|p| *p <= 0.0), "{penalties:?}");
        Ok(())
    })
}

/// A reference frame recorded from `state` itself.
fn frame_of(state: &SimState, model: &RobotModel) -> ImitationFrame {
    let fk = forward_kinematics(&state.q, state.base_pos, model).unwrap();
    ImitationFrame {
        q_hat: state.q.clone(),
        h_hat: state.height(),
        r_e_hat: fk.ee_body.clone(),
        r_z_hat: fk.feet_world.iter().map(|p| p[1]).collect(),
        v_cmd: 0.5,
        w_cmd: 0.0,
        step_index: 0,
    }
}

pub fn imitation_maximizer(cases: u32) -> Result<(), String> {
    let model = hopper();
    run(cases, (any::<u64>(), 0.1..20.0f64), |(seed, scale)| {
        let w = RewardWeights {
            imitation_scale: scale,
            ..RewardWeights::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&model, &mut rng);
        let fk = forward_kinematics(&state.q, state.base_pos, &model).unwrap();
        let own = frame_of(&state, &model);
        let (_, best) = imitation_reward(&state, &own, &fk, &w).unwrap();
        let s = scale * w.dt;
        prop_assert!(close(best.joint_angles, s * w.joint_angles, 1e-12));
        prop_assert!(close(best.ee_position, s * w.ee_position, 1e-12));
        prop_assert!(close(best.foot_height, s * w.foot_height, 1e-12));
        prop_assert_eq!(best.base_height, 0.0);

        let other = random_frame(&model, &mut rng, 0);
        let (_, t) = imitation_reward(&state, &other, &fk, &w).unwrap();
        for (a, b) in t.values().iter().zip(best.values()) {
            prop_assert!(*a <= b + 1e-15);
        }
        Ok(())
    })
}

pub fn imitation_scale_linearity(cases: u32) -> Result<(), String> {
    let model = hopper();
    run(cases, (any::<u64>(), 0.01..50.0f64), |(seed, scale)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let state = random_state(&model, &mut rng);
        let fk = forward_kinematics(&state.q, state.base_pos, &model).unwrap();
        let frame = random_frame(&model, &mut rng, 0);
        let unit = RewardWeights::default();
        let scaled = RewardWeights {
            imitation_scale: scale,
            ..unit.clone()
        };
        let (_, a) = imitation_reward(&state, &frame, &fk, &unit).unwrap();
        let (_, b) = imitation_reward(&state, &frame, &fk, &scaled).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!(close(x * scale, y, 1e-12), "{x} * {scale} vs {y}");
        }
        Ok(())
    })
}

fn single_sample(params: &PolicyParameters, rng: &mut ChaCha8Rng, ratio: f64, adv: f64) -> Minibatch {
    let obs = Array2::from_shape_fn((1, params.obs_dim()), |_| rng.random_range(-1.0..1.0));
    let out = params.eval(obs.view()).unwrap();
    let actions = Array2::from_shape_fn((1, params.act_dim()), |(_, j)| out.mean[(0, j)] + rng.random_range(-1.0..1.0));
    let lp = gaussian_log_prob(actions.row(0), out.mean.row(0), params.log_std.view());
    Minibatch {
        observations: obs,
        actions,
        old_log_probs: Array1::from_elem(1, lp - ratio.ln()),
        old_values: out.value.clone(),
        advantages: Array1::from_elem(1, adv),
        returns: out.value.clone(),
    }
}

pub fn clip_region(cases: u32) -> Result<(), String> {
    let c = LossCoefficients {
        clip: 0.2,
        value_coef: 0.0,
        entropy_coef: 0.0,
        clip_value_loss: true,
    };
    run(cases, (any::<u64>(), 0.81..1.19f64, -3.0..3.0f64, 1.25..3.0f64), |(seed, r, adv, far)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = PolicyParameters::new(5, 2, &[6], rng.random_range(-1.0..0.5), &mut rng);
        let mb = single_sample(&params, &mut rng, r, adv);
        let (parts, grads) = ppo_loss(&params, &mb, &c, true).unwrap();
        prop_assert!(close(parts.surrogate, -r * adv, 1e-9), "{} vs {}", parts.surrogate, -r * adv);
        prop_assert_eq!(parts.clip_fraction, 0.0);
        let g = grads.unwrap().to_flat();
        prop_assert!(adv.abs() < 1e-9 || g.iter().any(|x| *x != 0.0));

        // beyond the band on the side that gains from moving further the objective is flat
        let (ratio, a) = if adv >= 0.0 { (far, adv.max(0.1)) } else { (1.0 / far, adv) };
        let mb = single_sample(&params, &mut rng, ratio, a);
        let (parts, grads) = ppo_loss(&params, &mb, &c, true).unwrap();
        let bound = if a > 0.0 { 1.2 } else { 0.8 };
        prop_assert!(close(parts.surrogate, -bound * a, 1e-9));
        prop_assert!(grads.unwrap().to_flat().iter().all(|x| *x == 0.0));
        Ok(())
    })
}

fn decap_config(kp: f64, kd: f64) -> ActionConfig {
    let mut cfg = ActionConfig {
        mode: ActionMode::Decap,
        ..ActionConfig::default()
    };
    cfg.gains.kp = decap_core::control::GainValue::Uniform(kp);
    cfg.gains.kd = decap_core::control::GainValue::Uniform(kd);
    cfg
}

pub fn decap_additivity(cases: u32) -> Result<(), String> {
    let model = hopper();
    run(cases, (any::<u64>(), 0u64..2_000_000, 1.0..80.0f64, 0.0..3.0f64), |(seed, t, kp, kd)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let adapter = decap_config(kp, kd).resolve(&model).unwrap();
        let state = random_state(&model, &mut rng);
        let frame = random_frame(&model, &mut rng, 0);
        let raw = random_vec(&mut rng, 3, 2.0);
        let inputs = ActionInputs {
            reference: Some(&frame),
            position_target: None,
        };
        let tau = adapter.raw_torques(&raw, &state, inputs, t).unwrap();
        let gains = Gains {
            kp: vec![kp; 3],
            kd: vec![kd; 3],
        };
        let prior = pd_torque(&frame.q_hat, &state.q, &state.qdot, &gains).unwrap();
        let f = decay_factor(&adapter.schedule, t);
        for j in 0..3 {
            let expect = adapter.scale * raw[j] + f * prior[j];
            prop_assert!(close(tau[j], expect, 1e-12), "{} vs {expect}", tau[j]);
        }

        // on the reference at rest the prior contributes nothing
        let mut still = state.clone();
        still.q = frame.q_hat.clone();
        still.qdot = vec![0.0; 3];
        let tau = adapter.raw_torques(&raw, &still, inputs, t).unwrap();
        for j in 0..3 {
            prop_assert_eq!(tau[j], adapter.scale * raw[j]);
        }
        Ok(())
    })
}

pub fn torque_clamping(cases: u32) -> Result<(), String> {
    let model = hopper();
    let modes = [ActionMode::Position, ActionMode::Torque, ActionMode::Decap, ActionMode::Assisted];
    run(cases, (any::<u64>(), 0usize..4, 0.1..50.0f64), |(seed, m, amp)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cfg = decap_config(rng.random_range(1.0..100.0), rng.random_range(0.0..5.0));
        cfg.mode = modes[m];
        let adapter = cfg.resolve(&model).unwrap();
        let state = random_state(&model, &mut rng);
        let frame = random_frame(&model, &mut rng, 0);
        let target = random_vec(&mut rng, 3, 1.0);
        let raw = random_vec(&mut rng, 3, amp);
        let inputs = ActionInputs {
            reference: Some(&frame),
            position_target: Some(&target),
        };
        let t = rng.random_range(0..100_000);
        let unclamped = adapter.raw_torques(&raw, &state, inputs, t).unwrap();
        let tau = adapter.apply(&raw, &state, inputs, t).unwrap();
        for j in 0..3 {
            let lim = model.torque_limits[j];
            prop_assert!(tau[j].abs() <= lim);
            if unclamped[j].abs() <= lim {
                prop_assert_eq!(tau[j], unclamped[j]);
            } else {
                prop_assert_eq!(tau[j], lim * unclamped[j].signum());
            }
        }
        Ok(())
    })
}

pub fn contact_cone(cases: u32) -> Result<(), String> {
    let model = hopper();
    run(
        cases,
        (any::<u64>(), -0.05..0.05f64, -5.0..5.0f64, -5.0..5.0f64),
        |(seed, depth, rate, slip)| {
            let (n, t) = contact_point_force(depth, rate, slip, &model.contact);
            prop_assert!(n >= 0.0);
            prop_assert!(t.abs() <= model.contact.mu * n + 1e-12);
            if depth <= 0.0 {
                prop_assert_eq!((n, t), (0.0, 0.0));
            }

            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let state = random_state(&model, &mut rng);
            let report = contact_forces(&state, &model);
            for p in &report.points {
                prop_assert!(p.normal >= 0.0);
                prop_assert!(p.tangential.abs() <= model.contact.mu * p.normal + 1e-12);
                prop_assert_eq!(p.in_contact, p.penetration > 0.0);
            }
            Ok(())
        },
    )
}

pub fn model_round_trip(cases: u32) -> Result<(), String> {
    let base = hopper();
    run(cases, (any::<u64>(), 0.5..2.0f64), |(seed, c)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = base.clone();
        for l in &mut model.links {
            l.mass *= c;
            l.inertia *= rng.random_range(0.5..2.0);
            l.damping = rng.random_range(0.0..1.0);
        }
        model.contact.mu = rng.random_range(0.1..1.5);
        let back = RobotModel::from_json(&model.to_json()).unwrap();
        prop_assert_eq!(back, model);
        Ok(())
    })
}

fn random_dataset(rng: &mut ChaCha8Rng) -> ImitationDataset {
    let model = hopper();
    let trajectories = (0..rng.random_range(1..4))
        .map(|_| {
            let len = rng.random_range(1..20);
            let frames: Vec<ImitationFrame> = (0..len).map(|k| random_frame(&model, rng, k)).collect();
            Trajectory {
                command: Command {
                    v_cmd: frames[0].v_cmd,
                    w_cmd: 0.0,
                },
                frames,
            }
        })
        .collect();
    let header = ImitationHeader {
        format_version: imitation::FORMAT_VERSION,
        robot: "hopper".into(),
        dt: 0.005,
        n_joints: 3,
        n_feet: 1,
        kp: vec![20.0; 3],
        kd: vec![0.5; 3],
        checkpoint_id: format!("{:016x}", rng.random::<u64>()),
        source_run: None,
        settle_steps: 0,
        trajectories: vec![],
    };
    ImitationDataset::new(header, trajectories).unwrap()
}

pub fn imitation_round_trip(cases: u32) -> Result<(), String> {
    run(cases, any::<u64>(), |seed| {
        let ds = random_dataset(&mut ChaCha8Rng::seed_from_u64(seed));
        let text = imitation::to_text(&ds);
        let back = imitation::from_text(&text, Path::new("mem.imit")).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(imitation::to_text(&back), text);
        Ok(())
    })
}

pub fn checkpoint_round_trip(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..8, 1usize..5), |(seed, od, ad)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..9)).collect();
        let mut params = PolicyParameters::new(od, ad, &hidden, rng.random_range(-2.0..1.0), &mut rng);
        let flat: Vec<f64> = params.to_flat().iter().map(|v| v + rng.random_range(-1e3..1e3)).collect();
        params.set_flat(&flat).unwrap();
        let ckpt = Checkpoint::new("hopper", "torque", params);
        let back = Checkpoint::from_text(&ckpt.to_text(), Path::new("mem.ckpt")).unwrap();
        prop_assert_eq!(back.params.to_flat(), flat);
        prop_assert_eq!(back.id(), ckpt.id());
        Ok(())
    })
}

pub fn decay_monotone(cases: u32) -> Result<(), String> {
    run(
        cases,
        (0.5..0.9999f64, 1.0..1000.0f64, 0u64..10_000_000, 1u64..100_000),
        |(g, k, t, dt)| {
            let s = DecaySchedule { gamma_decay: g, k };
            let a = decay_factor(&s, t);
            let b = decay_factor(&s, t + dt);
            prop_assert!(a > 0.0 && a <= 1.0);
            prop_assert!(b <= a);
            if b > f64::MIN_POSITIVE {
                prop_assert!(b < a);
            }
            prop_assert_eq!(decay_factor(&s, 0), 1.0);
            Ok(())
        },
    )
}

pub fn rmse_properties(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), 1usize..30, 1usize..5), |(seed, steps, n)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut rng, n, 2.0)).collect();
        let b: Vec<Vec<f64>> = (0..steps).map(|_| random_vec(&mut rng, n, 2.0)).collect();
        let r = imitation::rmse(&a, &b).unwrap();
        prop_assert!(r > 0.0);
        prop_assert_eq!(imitation::rmse(&a, &a).unwrap(), 0.0);
        prop_assert!(close(r, imitation::rmse(&b, &a).unwrap(), 1e-15));

        let mut order: Vec<usize> = (0..steps).collect();
        for i in (1..steps).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let pa: Vec<Vec<f64>> = order.iter().map(|&i| a[i].clone()).collect();
        let pb: Vec<Vec<f64>> = order.iter().map(|&i| b[i].clone()).collect();
        prop_assert!(close(r, imitation::rmse(&pa, &pb).unwrap(), 1e-12));

        let mut c = a.clone();
        c[rng.random_range(0..steps)][rng.random_range(0..n)] += 1e-3;
        prop_assert!(imitation::rmse(&a, &c).unwrap() > 0.0);
        Ok(())
    })
}

pub fn advantage_normalization(cases: u32) -> Result<(), String> {
    run(cases, prop::collection::vec(-1e3..1e3f64, 2..200), |mut x| {
        let spread = x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min);
        prop_assume!(spread > 1e-6);
        normalize(&mut x);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9, "mean {mean}");
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-9, "std {}", var.sqrt());
        Ok(())
    })
}

pub fn lookup_total(cases: u32) -> Result<(), String> {
    run(cases, (any::<u64>(), -5.0..5.0f64, -2.0..2.0f64, 0usize..100_000), |(seed, v, w, t)| {
        let ds = random_dataset(&mut ChaCha8Rng::seed_from_u64(seed));
        let cmd = Command { v_cmd: v, w_cmd: w };
        let f = imitation::lookup(&ds, cmd, t).unwrap();
        prop_assert_eq!(f, imitation::lookup(&ds, cmd, t).unwrap());
        let k = imitation::nearest_trajectory(&ds, cmd).unwrap();
        let traj = &ds.trajectories[k];
        prop_assert_eq!(f, &traj.frames[t % traj.frames.len()]);
        prop_assert_eq!(f, imitation::lookup(&ds, cmd, t + traj.frames.len()).unwrap());
        let d = |c: Command| (c.v_cmd - v).powi(2) + (c.w_cmd - w).powi(2);
        prop_assert!(ds.trajectories.iter().all(|o| d(o.command) >= d(traj.command)));
        Ok(())
    })
}

pub fn position_zero_action(cases: u32) -> Result<(), String> {
    let names: Vec<&str> = decap_core::robots::bundled_names().collect();
    run(cases, (0..names.len(), 0.0..200.0f64, 0.0..5.0f64), |(m, kp, kd)| {
        let model = bundled(names[m]).unwrap();
        let mut cfg = decap_config(kp, kd);
        cfg.mode = ActionMode::Position;
        let adapter = cfg.resolve(&model).unwrap();
        let n = model.n_joints();
        prop_assert_eq!(adapter.position_target(&vec![0.0; n]), model.nominal_pose.clone());
        let rest = SimState::nominal(&model);
        let tau = adapter.apply(&vec![0.0; n], &rest, ActionInputs::default(), 0).unwrap();
        prop_assert!(tau.iter().all(|t| *t == 0.0));
        Ok(())
    })
}

pub fn gravity_unit(cases: u32) -> Result<(), String> {
    run(cases, -10.0..10.0f64, |pitch| {
        let g = projected_gravity(pitch);
        prop_assert!((g[0].hypot(g[1]) - 1.0).abs() < 1e-12);
        Ok(())
    })
}

//! Independent oracles for advantage estimation, network gradients and kinematics.

use decap_core::dynamics::forward_kinematics;
use decap_core::ppo::{gae, ppo_loss, LossCoefficients, Minibatch, PolicyParameters};
use decap_core::robots::{Link, RobotModel};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Discounted sum of rewards up to the episode end or the bootstrap value.
fn brute_force_advantages(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let n = rewards.len();
    (0..n)
        .map(|t| {
            let mut ret = 0.0;
            let mut discount = 1.0;
            let mut k = t;
            loop {
                ret += discount * rewards[k];
                discount *= gamma;
                if dones[k] {
                    break;
                }
                if k + 1 == n {
                    ret += discount * bootstrap;
                    break;
                }
                k += 1;
            }
            ret - values[t]
        })
        .collect()
}

pub fn gae_with_unit_lambda_matches_discounted_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(1..=64);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let bootstrap = rng.random_range(-5.0..5.0);
        let gamma = rng.random_range(0.8..1.0);
        let (adv, ret) = gae(&rewards, &values, &dones, bootstrap, gamma, 1.0);
        let oracle = brute_force_advantages(&rewards, &values, &dones, bootstrap, gamma);
        for t in 0..n {
            assert!((adv[t] - oracle[t]).abs() < 1e-10, "t={t}: {} vs {}", adv[t], oracle[t]);
            assert!((ret[t] - (adv[t] + values[t])).abs() < 1e-12);
        }
    }
}

fn random_minibatch(params: &PolicyParameters, rng: &mut ChaCha8Rng, b: usize, zero_adv: bool) -> Minibatch {
    let od = params.obs_dim();
    let ad = params.act_dim();
    let obs = Array2::from_shape_fn((b, od), |_| rng.random_range(-1.5..1.5));
    let out = params.eval(obs.view()).unwrap();
    let actions = Array2::from_shape_fn((b, ad), |(i, j)| out.mean[(i, j)] + rng.random_range(-1.0..1.0));
    let logp: Vec<f64> = (0..b)
        .map(|i| decap_core::ppo::gaussian_log_prob(actions.row(i), out.mean.row(i), params.log_std.view()))
        .collect();
    // ratios kept away from the clip boundaries 0.8 and 1.2
    let old_log_probs = Array1::from_shape_fn(b, |i| {
        let r: f64 = match i % 3 {
            0 => rng.random_range(0.9..1.1),
            1 => rng.random_range(1.4..1.6),
            _ => rng.random_range(0.5..0.6),
        };
        logp[i] - r.ln()
    });
    let old_values = Array1::from_shape_fn(b, |i| {
        let d: f64 = if i % 2 == 0 { rng.random_range(-0.1..0.1) } else { rng.random_range(0.35..0.6) };
        out.value[i] - d
    });
    let advantages = Array1::from_shape_fn(b, |_| if zero_adv { 0.0 } else { rng.random_range(-2.0..2.0) });
    let returns = Array1::from_shape_fn(b, |i| out.value[i] + rng.random_range(-1.0..1.0));
    Minibatch {
        observations: obs,
        actions,
        old_log_probs,
        old_values,
        advantages,
        returns,
    }
}

fn check_gradient(params: &PolicyParameters, mb: &Minibatch, c: &LossCoefficients) -> f64 {
    let (_, grads) = ppo_loss(params, mb, c, true).unwrap();
    let analytic = grads.unwrap().to_flat();
    let flat = params.to_flat();
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    let mut p = params.clone();
    for k in 0..flat.len() {
        let mut x = flat.clone();
        x[k] = flat[k] + h;
        p.set_flat(&x).unwrap();
        let up = ppo_loss(&p, mb, c, false).unwrap().0.total(c);
        x[k] = flat[k] - h;
        p.set_flat(&x).unwrap();
        let down = ppo_loss(&p, mb, c, false).unwrap().0.total(c);
        let fd = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(fd.abs());
        let err = if scale > 1e-6 {
            (analytic[k] - fd).abs() / scale
        } else {
            (analytic[k] - fd).abs() * 1e-2
        };
        worst = worst.max(err);
    }
    worst
}

pub fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cases = [
        ("actor", 1.0, 0.0, 0.0, false),
        ("critic", 0.0, 1.0, 0.0, true),
        ("entropy", 0.0, 0.0, 1.0, true),
        ("combined", 1.0, 0.7, 0.01, false),
    ];
    for net in 0..20 {
        let od = rng.random_range(2..6);
        let ad = rng.random_range(1..4);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(2..7)).collect();
        let mut params = PolicyParameters::new(od, ad, &hidden, rng.random_range(-1.0..0.5), &mut rng);
        // larger output weights than the training init so gradients are not tiny
        for layer in &mut params.actor.layers {
            layer.w.mapv_inplace(|w| w * 3.0 + 0.1);
        }
        for (name, surr, value, entropy, zero_adv) in cases {
            let c = LossCoefficients {
                clip: 0.2,
                value_coef: value,
                entropy_coef: entropy,
                clip_value_loss: true,
            };
            let mut mb = random_minibatch(&params, &mut rng, 12, zero_adv);
            if surr == 0.0 {
                mb.advantages.fill(0.0);
            }
            let worst = check_gradient(&params, &mb, &c);
            assert!(worst < 1e-4, "net {net} {name}: relative error {worst}");
        }
    }
}

fn two_link(l1: f64, l2: f64) -> RobotModel {
    let link = |name: &str, length: f64, parent: Option<usize>, offset: [f64; 2]| Link {
        name: name.into(),
        mass: 1.0,
        length,
        inertia: 0.01,
        damping: 0.0,
        armature: 0.0,
        parent,
        offset,
    };
    let text = serde_json::json!({
        "format_version": 1,
        "name": "leg",
        "gravity": 9.81,
        "links": [
            link("hip", 0.1, None, [0.0, 0.0]),
            link("upper", l1, Some(0), [0.0, 0.0]),
            link("lower", l2, Some(1), [0.0, -l1]),
        ],
        "torque_limits": [10.0, 10.0],
        "joint_limits": [[-4.0, 4.0], [-4.0, 4.0]],
        "nominal_pose": [0.0, 0.0],
        "contact": {"k_n": 1000.0, "c_n": 10.0, "k_t": 10.0, "mu": 0.8},
        "feet": [2],
        "contact_points": [{"link": 2, "offset": [0.0, -l2]}],
        "nominal_height": l1 + l2
    })
    .to_string();
    RobotModel::from_json(&text).unwrap()
}

pub fn fk_matches_two_link_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = two_link(0.2, 0.2);
    let fk = forward_kinematics(&[0.0, 0.0], [0.0; 3], &model).unwrap();
    assert!((fk.ee_body[0][0]).abs() < 1e-12 && (fk.ee_body[0][1] + 0.4).abs() < 1e-12);
    let fk = forward_kinematics(&[std::f64::consts::FRAC_PI_2, 0.0], [0.0; 3], &model).unwrap();
    assert!((fk.ee_body[0][0] - 0.4).abs() < 1e-12 && fk.ee_body[0][1].abs() < 1e-12);

    for _ in 0..500 {
        let (l1, l2) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
        let model = two_link(l1, l2);
        let q = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let base = [rng.random_range(-5.0..5.0), rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0)];
        let fk = forward_kinematics(&q, base, &model).unwrap();
        let x = l1 * q[0].sin() + l2 * (q[0] + q[1]).sin();
        let z = -l1 * q[0].cos() - l2 * (q[0] + q[1]).cos();
        assert!((fk.ee_body[0][0] - x).abs() < 1e-12);
        assert!((fk.ee_body[0][1] - z).abs() < 1e-12);
        let (s, c) = base[2].sin_cos();
        let wx = base[0] + c * x - s * z;
        let wz = base[1] + s * x + c * z;
        assert!((fk.feet_world[0][0] - wx).abs() < 1e-12);
        assert!((fk.feet_world[0][1] - wz).abs() < 1e-12);
    }
}

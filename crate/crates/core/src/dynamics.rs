//! Planar floating-base rigid-body dynamics with penalty ground contact.
//!
//! Generalized coordinates are `[x, z, pitch, q_0 .. q_{n-1}]` (or just the
//! joint angles for a pinned base). The equations of motion
//! `M(g) g̈ = S τ + Jᶜᵀ f_contact − b q̇ − h(g, ġ)` are assembled link by link
//! from centre-of-mass Jacobians and integrated with semi-implicit Euler:
//! velocities first, then positions with the updated velocities.
//!
//! The ground is the line `z = 0`.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::robots::{ContactParams, RobotModel};

pub type Vec2 = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    /// Joint angles (rad).
    pub q: Vec<f64>,
    /// Joint velocities (rad/s).
    pub qdot: Vec<f64>,
    /// Base x (m), z (m) and pitch (rad, counter-clockwise in the x-z plane).
    pub base_pos: [f64; 3],
    /// Base x/z velocity (m/s) and pitch rate (rad/s).
    pub base_vel: [f64; 3],
    pub time_step: u64,
}

impl SimState {
    /// Standing at the nominal pose and height, at rest.
    pub fn nominal(model: &RobotModel) -> Self {
        SimState {
            q: model.nominal_pose.clone(),
            qdot: vec![0.0; model.n_joints()],
            base_pos: [0.0, model.nominal_height, 0.0],
            base_vel: [0.0; 3],
            time_step: 0,
        }
    }

    pub fn pitch(&self) -> f64 {
        self.base_pos[2]
    }

    pub fn height(&self) -> f64 {
        self.base_pos[1]
    }

    pub fn is_finite(&self) -> bool {
        self.q
            .iter()
            .chain(&self.qdot)
            .chain(&self.base_pos)
            .chain(&self.base_vel)
            .all(|v| v.is_finite())
    }

    fn generalized_velocity(&self, model: &RobotModel) -> [f64; MAX_DOF] {
        let mut v = [0.0; MAX_DOF];
        let base_cols = model.n_dof() - model.n_joints();
        v[..base_cols].copy_from_slice(&self.base_vel[..base_cols]);
        v[base_cols..base_cols + self.qdot.len()].copy_from_slice(&self.qdot);
        v
    }
}

/// Force and state of one contact point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointContact {
    pub link: usize,
    pub foot: bool,
    /// N, along +z.
    pub normal: f64,
    /// N, along +x.
    pub tangential: f64,
    /// m, `max(0, -z)`.
    pub penetration: f64,
    pub in_contact: bool,
    pub position: Vec2,
    pub velocity: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactReport {
    pub points: Vec<PointContact>,
    /// Per link: a non-foot contact point of that link touches the ground.
    pub body_collision: Vec<bool>,
}

impl ContactReport {
    pub fn n_collisions(&self) -> usize {
        self.body_collision.iter().filter(|c| **c).count()
    }

    pub fn base_contact(&self) -> bool {
        self.body_collision.first().copied().unwrap_or(false)
    }

    pub fn foot_points(&self) -> impl Iterator<Item = &PointContact> {
        self.points.iter().filter(|p| p.foot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub state: SimState,
    pub contact: ContactReport,
    /// Torques actually applied after clamping to the model limits.
    pub applied_torques: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkOutput {
    /// Foot (end-effector) positions in the world frame.
    pub feet_world: Vec<Vec2>,
    /// Foot positions relative to the base, in the base frame.
    pub ee_body: Vec<Vec2>,
}

#[inline]
fn rotate(angle: f64, v: Vec2) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

const MAX_LINKS: usize = crate::robots::MAX_LINKS;
const MAX_DOF: usize = MAX_LINKS + 2;

/// Base-to-link index path, stored inline.
#[derive(Clone, Copy)]
struct Chain {
    links: [usize; MAX_LINKS],
    len: usize,
}

impl Chain {
    fn of(model: &RobotModel, link: usize) -> Self {
        let mut links = [0; MAX_LINKS];
        let mut len = 0;
        let mut cur = Some(link);
        while let Some(l) = cur {
            links[len] = l;
            len += 1;
            cur = model.links[l].parent;
        }
        links[..len].reverse();
        Chain { links, len }
    }

    fn as_slice(&self) -> &[usize] {
        &self.links[..self.len]
    }
}

/// Absolute link angles, angular rates and joint origins.
struct Frames {
    angle: [f64; MAX_LINKS],
    omega: [f64; MAX_LINKS],
    origin: [Vec2; MAX_LINKS],
    chains: [Chain; MAX_LINKS],
}

impl Frames {
    fn new(model: &RobotModel, q: &[f64], base_pos: [f64; 3], rates: Option<(&[f64], f64)>) -> Self {
        let n = model.links.len();
        let mut angle = [0.0; MAX_LINKS];
        let mut omega = [0.0; MAX_LINKS];
        let mut origin = [[0.0; 2]; MAX_LINKS];
        let mut chains = [Chain {
            links: [0; MAX_LINKS],
            len: 1,
        }; MAX_LINKS];
        angle[0] = base_pos[2];
        origin[0] = [base_pos[0], base_pos[1]];
        if let Some((_, base_rate)) = rates {
            omega[0] = if model.fixed_base { 0.0 } else { base_rate };
        }
        for i in 1..n {
            let link = &model.links[i];
            let p = link.parent.expect("validated");
            angle[i] = angle[p] + q[i - 1];
            origin[i] = add(origin[p], rotate(angle[p], link.offset));
            if let Some((qdot, _)) = rates {
                omega[i] = omega[p] + qdot[i - 1];
            }
            chains[i] = Chain::of(model, i);
        }
        Frames {
            angle,
            omega,
            origin,
            chains,
        }
    }

    fn point(&self, link: usize, local: Vec2) -> Vec2 {
        add(self.origin[link], rotate(self.angle[link], local))
    }

    fn com(&self, model: &RobotModel, link: usize) -> Vec2 {
        if link == 0 {
            self.origin[0]
        } else {
            self.point(link, [0.0, -0.5 * model.links[link].length])
        }
    }

    /// Rows of the translational Jacobian of world point `p` fixed on `link`.
    fn point_jacobian(&self, model: &RobotModel, link: usize, p: Vec2, jx: &mut [f64], jz: &mut [f64]) {
        jx.iter_mut().for_each(|v| *v = 0.0);
        jz.iter_mut().for_each(|v| *v = 0.0);
        let base_cols = if model.fixed_base {
            0
        } else {
            jx[0] = 1.0;
            jz[1] = 1.0;
            let r = sub(p, self.origin[0]);
            jx[2] = -r[1];
            jz[2] = r[0];
            3
        };
        for &l in &self.chains[link].as_slice()[1..] {
            let r = sub(p, self.origin[l]);
            jx[base_cols + l - 1] = -r[1];
            jz[base_cols + l - 1] = r[0];
        }
    }

    /// Angular Jacobian row of `link` (0/1 entries).
    fn angular_jacobian(&self, model: &RobotModel, link: usize, jw: &mut [f64]) {
        jw.iter_mut().for_each(|v| *v = 0.0);
        let base_cols = if model.fixed_base {
            0
        } else {
            jw[2] = 1.0;
            3
        };
        for &l in &self.chains[link].as_slice()[1..] {
            jw[base_cols + l - 1] = 1.0;
        }
    }

    /// Acceleration of point `p` on `link` with zero generalized acceleration
    /// (the centripetal `J̇ ġ` term).
    fn velocity_product_accel(&self, link: usize, p: Vec2) -> Vec2 {
        let chain = self.chains[link].as_slice();
        let mut a = [0.0; 2];
        for (k, &l) in chain.iter().enumerate() {
            let next = if k + 1 < chain.len() {
                self.origin[chain[k + 1]]
            } else {
                p
            };
            let seg = sub(next, self.origin[l]);
            let w2 = self.omega[l] * self.omega[l];
            a[0] -= w2 * seg[0];
            a[1] -= w2 * seg[1];
        }
        a
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Spring-damper normal force and Coulomb-clamped viscous friction for one
/// point. Returns `(normal, tangential)`; both zero without penetration.
pub fn contact_point_force(
    penetration: f64,
    penetration_rate: f64,
    tangential_velocity: f64,
    params: &ContactParams,
) -> (f64, f64) {
    if penetration <= 0.0 {
        return (0.0, 0.0);
    }
    let normal = (params.k_n * penetration + params.c_n * penetration_rate).max(0.0);
    let limit = params.mu * normal;
    let tangential = (-params.k_t * tangential_velocity).clamp(-limit, limit);
    (normal, tangential)
}

fn contact_point_state(frames: &Frames, model: &RobotModel, gdot: &[f64], link: usize, offset: Vec2) -> PointContact {
    let ndof = model.n_dof();
    let mut jx = [0.0; MAX_DOF];
    let mut jz = [0.0; MAX_DOF];
    let p = frames.point(link, offset);
    frames.point_jacobian(model, link, p, &mut jx[..ndof], &mut jz[..ndof]);
    let v = [dot(&jx[..ndof], gdot), dot(&jz[..ndof], gdot)];
    let penetration = (-p[1]).max(0.0);
    let (normal, tangential) = contact_point_force(penetration, -v[1], v[0], &model.contact);
    PointContact {
        link,
        foot: model.is_foot(link),
        normal,
        tangential,
        penetration,
        in_contact: penetration > 0.0,
        position: p,
        velocity: v,
    }
}

fn contact_forces_with(frames: &Frames, state: &SimState, model: &RobotModel) -> ContactReport {
    let gdot = state.generalized_velocity(model);
    let gdot = &gdot[..model.n_dof()];
    let mut body_collision = vec![false; model.links.len()];
    let points = model
        .contact_points
        .iter()
        .map(|cp| {
            let pc = contact_point_state(frames, model, gdot, cp.link, cp.offset);
            if pc.in_contact && !pc.foot {
                body_collision[cp.link] = true;
            }
            pc
        })
        .collect();
    ContactReport {
        points,
        body_collision,
    }
}

/// Ground reaction forces at every model contact point.
pub fn contact_forces(state: &SimState, model: &RobotModel) -> ContactReport {
    let frames = Frames::new(model, &state.q, state.base_pos, Some((&state.qdot, state.base_vel[2])));
    contact_forces_with(&frames, state, model)
}

pub fn forward_kinematics(q: &[f64], base_pos: [f64; 3], model: &RobotModel) -> Result<FkOutput> {
    if q.len() != model.n_joints() {
        return Err(Error::dimension("forward_kinematics q", model.n_joints(), q.len()));
    }
    let body = Frames::new(model, q, [0.0; 3], None);
    let base = [base_pos[0], base_pos[1]];
    let mut feet_world = Vec::with_capacity(model.feet.len());
    let mut ee_body = Vec::with_capacity(model.feet.len());
    for &f in &model.feet {
        let p = body.point(f, [0.0, -model.links[f].length]);
        ee_body.push(p);
        feet_world.push(add(base, rotate(base_pos[2], p)));
    }
    Ok(FkOutput { feet_world, ee_body })
}

/// Kinetic plus gravitational potential energy (J).
pub fn mechanical_energy(state: &SimState, model: &RobotModel) -> f64 {
    let frames = Frames::new(model, &state.q, state.base_pos, Some((&state.qdot, state.base_vel[2])));
    let ndof = model.n_dof();
    let gdot = state.generalized_velocity(model);
    let gdot = &gdot[..ndof];
    let mut jx = vec![0.0; ndof];
    let mut jz = vec![0.0; ndof];
    model
        .links
        .iter()
        .enumerate()
        .map(|(i, link)| {
            let c = frames.com(model, i);
            frames.point_jacobian(model, i, c, &mut jx, &mut jz);
            let vx = dot(&jx, gdot);
            let vz = dot(&jz, gdot);
            let w = frames.omega[i];
            0.5 * link.mass * (vx * vx + vz * vz) + 0.5 * link.inertia * w * w + link.mass * model.gravity * c[1]
        })
        .sum::<f64>()
        + (0..model.n_joints())
            .map(|j| 0.5 * model.links[j + 1].armature * state.qdot[j] * state.qdot[j])
            .sum::<f64>()
}

fn check_inputs(state: &SimState, torques: &[f64], model: &RobotModel, dt: f64) -> Result<()> {
    let n = model.n_joints();
    if torques.len() != n {
        return Err(Error::dimension("step torques", n, torques.len()));
    }
    if state.q.len() != n {
        return Err(Error::dimension("step state.q", n, state.q.len()));
    }
    if state.qdot.len() != n {
        return Err(Error::dimension("step state.qdot", n, state.qdot.len()));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::validation("dt", format!("must be > 0, got {dt}")));
    }
    if !state.is_finite() {
        return Err(Error::NonFinite("simulation state".into()));
    }
    if torques.iter().any(|t| !t.is_finite()) {
        return Err(Error::NonFinite("torques".into()));
    }
    Ok(())
}

/// Advance the simulation by one control step of length `dt`.
///
/// Torques are clamped to the model limits and held for the model's
/// `substeps` physics sub-steps. The returned contact report describes the
/// post-step state.
pub fn step(state: &SimState, torques: &[f64], model: &RobotModel, dt: f64) -> Result<StepOutput> {
    check_inputs(state, torques, model, dt)?;
    let applied: Vec<f64> = torques
        .iter()
        .zip(&model.torque_limits)
        .map(|(t, lim)| t.clamp(-lim, *lim))
        .collect();
    let h = dt / model.substeps as f64;
    let mut next = state.clone();
    for _ in 0..model.substeps {
        substep(&mut next, &applied, model, h)?;
    }
    next.time_step = state.time_step + 1;
    let contact = contact_forces(&next, model);
    Ok(StepOutput {
        state: next,
        contact,
        applied_torques: applied,
    })
}

fn substep(state: &mut SimState, applied: &[f64], model: &RobotModel, dt: f64) -> Result<()> {
    let n = model.n_joints();
    let ndof = model.n_dof();
    let base_cols = ndof - n;

    let frames = Frames::new(model, &state.q, state.base_pos, Some((&state.qdot, state.base_vel[2])));
    let gdot = state.generalized_velocity(model);

    // Padded to a fixed size; unused rows keep an identity block.
    let mut mass = SMatrix::<f64, MAX_DOF, MAX_DOF>::identity();
    for r in 0..ndof {
        mass[(r, r)] = 0.0;
    }
    let mut rhs = SVector::<f64, MAX_DOF>::zeros();
    for j in 0..n {
        let link = &model.links[j + 1];
        rhs[base_cols + j] = applied[j] - link.damping * state.qdot[j];
        mass[(base_cols + j, base_cols + j)] += link.armature;
    }

    let mut jx = [0.0; MAX_DOF];
    let mut jz = [0.0; MAX_DOF];
    let mut jw = [0.0; MAX_DOF];
    for (i, link) in model.links.iter().enumerate() {
        let c = frames.com(model, i);
        frames.point_jacobian(model, i, c, &mut jx[..ndof], &mut jz[..ndof]);
        frames.angular_jacobian(model, i, &mut jw[..ndof]);
        let bias = frames.velocity_product_accel(i, c);
        let m = link.mass;
        for r in 0..ndof {
            if jx[r] == 0.0 && jz[r] == 0.0 && jw[r] == 0.0 {
                continue;
            }
            for s in r..ndof {
                mass[(r, s)] += m * (jx[r] * jx[s] + jz[r] * jz[s]) + link.inertia * jw[r] * jw[s];
            }
            rhs[r] -= m * (jx[r] * bias[0] + jz[r] * (bias[1] + model.gravity));
        }
    }
    for r in 0..ndof {
        for s in 0..r {
            mass[(r, s)] = mass[(s, r)];
        }
    }
    for cp in &model.contact_points {
        let pc = contact_point_state(&frames, model, &gdot[..ndof], cp.link, cp.offset);
        if !pc.in_contact {
            continue;
        }
        frames.point_jacobian(model, cp.link, pc.position, &mut jx[..ndof], &mut jz[..ndof]);
        for r in 0..ndof {
            rhs[r] += jx[r] * pc.tangential + jz[r] * pc.normal;
        }
    }

    let accel = mass
        .cholesky()
        .ok_or_else(|| Error::NonFinite("mass matrix is not positive definite".into()))?
        .solve(&rhs);

    if !model.fixed_base {
        for k in 0..3 {
            state.base_vel[k] += dt * accel[k];
            state.base_pos[k] += dt * state.base_vel[k];
        }
    }
    for j in 0..n {
        let mut qd = state.qdot[j] + dt * accel[base_cols + j];
        let mut q = state.q[j] + dt * qd;
        let [lo, hi] = model.joint_limits[j];
        if q < lo {
            q = lo;
            qd = 0.0;
        } else if q > hi {
            q = hi;
            qd = 0.0;
        }
        state.q[j] = q;
        state.qdot[j] = qd;
    }
    if !state.is_finite() {
        return Err(Error::NonFinite(format!("state after step {}", state.time_step + 1)));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_models::*;
    use super::*;
    use crate::robots::bundled;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    const DT: f64 = 0.005;

    #[test]
    fn free_flight_falls_with_gravity() {
        let model = two_link_leg(0.2, 0.2);
        let mut state = SimState::nominal(&model);
        state.base_pos = [0.0, 5.0, 0.0];
        let v0 = 0.3;
        state.base_vel = [0.0, v0, 0.0];
        let out = step(&state, &[0.0, 0.0], &model, DT).unwrap();
        let dv = out.state.base_vel[1] - v0;
        assert_abs_diff_eq!(dv, -0.04905, epsilon = 1e-12);
        let dz = out.state.base_pos[1] - 5.0;
        assert_abs_diff_eq!(dz, (v0 - 0.04905) * DT, epsilon = 1e-12);
        assert_eq!(out.state.time_step, 1);
    }

    #[test]
    fn rest_without_gravity_is_equilibrium() {
        let mut model = bundled("quad2d").unwrap();
        model.gravity = 0.0;
        let mut state = SimState::nominal(&model);
        // Feet exactly on the ground: zero penetration, zero force.
        let fk = forward_kinematics(&state.q, state.base_pos, &model).unwrap();
        state.base_pos[1] -= fk.feet_world[0][1];
        let out = step(&state, &[0.0; 4], &model, DT).unwrap();
        let mut expected = state.clone();
        expected.time_step += 1;
        assert_eq!(out.state, expected);
    }

    #[test]
    fn contact_examples() {
        let p = ContactParams {
            k_n: 10000.0,
            c_n: 50.0,
            k_t: 100.0,
            mu: 0.8,
        };
        assert_eq!(contact_point_force(0.0, 1.0, 1.0, &p), (0.0, 0.0));
        assert_eq!(contact_point_force(-0.1, 0.0, 0.0, &p), (0.0, 0.0));
        let (n, _) = contact_point_force(0.001, 0.0, 0.0, &p);
        assert_abs_diff_eq!(n, 10.0, epsilon = 1e-12);
        // 20 N tangential demand against 10 N normal.
        let (n, t) = contact_point_force(0.001, 0.0, -0.2, &p);
        assert_abs_diff_eq!(n, 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t, 8.0, epsilon = 1e-12);
        // Separating fast: spring-damper goes negative, clamped to zero.
        assert_eq!(contact_point_force(0.001, -1.0, 0.3, &p), (0.0, 0.0));
    }

    #[test]
    fn foot_above_ground_has_no_force() {
        let model = two_link_leg(0.2, 0.2);
        let mut state = SimState::nominal(&model);
        state.base_pos[1] = 0.5; // foot at +0.1 m
        let report = contact_forces(&state, &model);
        let foot = report.points[0];
        assert!(!foot.in_contact);
        assert_eq!((foot.normal, foot.tangential), (0.0, 0.0));
        assert_abs_diff_eq!(foot.position[1], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn two_link_kinematics() {
        let model = two_link_leg(0.2, 0.2);
        let fk = forward_kinematics(&[0.0, 0.0], [0.0, 0.0, 0.0], &model).unwrap();
        assert_abs_diff_eq!(fk.ee_body[0][0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fk.ee_body[0][1], -0.4, epsilon = 1e-12);
        let fk = forward_kinematics(&[PI / 2.0, 0.0], [0.0, 0.0, 0.0], &model).unwrap();
        assert_abs_diff_eq!(fk.ee_body[0][0], 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(fk.ee_body[0][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn body_frame_ignores_base_translation() {
        let model = bundled("hopper").unwrap();
        let q = [0.3, -0.7, 0.2];
        let a = forward_kinematics(&q, [0.0, 0.6, 0.1], &model).unwrap();
        let b = forward_kinematics(&q, [1.0, 0.6, 0.1], &model).unwrap();
        assert_eq!(a.ee_body, b.ee_body);
        assert_abs_diff_eq!(b.feet_world[0][0] - a.feet_world[0][0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fk_rejects_wrong_length() {
        let model = bundled("hopper").unwrap();
        assert!(forward_kinematics(&[0.0], [0.0; 3], &model).is_err());
    }

    #[test]
    fn step_validates_inputs() {
        let model = bundled("hopper").unwrap();
        let state = SimState::nominal(&model);
        assert!(matches!(step(&state, &[0.0; 3], &model, 0.0), Err(Error::Validation { .. })));
        assert!(matches!(step(&state, &[0.0; 2], &model, DT), Err(Error::Dimension { .. })));
        assert!(matches!(step(&state, &[f64::NAN, 0.0, 0.0], &model, DT), Err(Error::NonFinite(_))));
        let mut bad = state.clone();
        bad.qdot[0] = f64::INFINITY;
        assert!(matches!(step(&bad, &[0.0; 3], &model, DT), Err(Error::NonFinite(_))));
    }

    #[test]
    fn torques_are_clamped() {
        let model = bundled("hopper").unwrap();
        let state = SimState::nominal(&model);
        let out = step(&state, &[100.0, -100.0, 3.0], &model, DT).unwrap();
        assert_eq!(out.applied_torques, vec![20.0, -20.0, 3.0]);
    }

    #[test]
    fn joint_limit_clamps_and_stops() {
        let model = bundled("hopper").unwrap();
        let mut state = SimState::nominal(&model);
        state.q[1] = 0.099;
        state.qdot[1] = 5.0;
        let out = step(&state, &[0.0; 3], &model, DT).unwrap();
        assert_eq!(out.state.q[1], 0.1);
        assert_eq!(out.state.qdot[1], 0.0);
    }

    #[test]
    fn deterministic() {
        let model = bundled("biped2d").unwrap();
        let run = || {
            let mut s = SimState::nominal(&model);
            let mut trace = Vec::new();
            for k in 0..300 {
                let t = (k as f64 * 0.05).sin() * 3.0;
                s = step(&s, &[t, -t, 0.5 * t, 1.0, -0.5 * t, 0.2], &model, DT).unwrap().state;
                trace.push(s.clone());
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn damped_pendulum_loses_energy_every_step() {
        let model = pendulum(0.5, 0.5);
        let mut state = SimState::nominal(&model);
        state.base_pos = [0.0; 3];
        state.q[0] = 1.0;
        let mut energy = mechanical_energy(&state, &model);
        for _ in 0..4000 {
            state = step(&state, &[0.0], &model, DT).unwrap().state;
            let e = mechanical_energy(&state, &model);
            assert!(e <= energy + 1e-12, "energy rose from {energy} to {e}");
            energy = e;
        }
    }

    #[test]
    fn pendulum_energy_oracle_matches_closed_form() {
        // Point mass m at distance l: E = ½ m l² ω² − m g l cos(q).
        let model = pendulum(0.5, 0.0);
        let mut state = SimState::nominal(&model);
        state.base_pos = [0.0; 3];
        state.q[0] = 0.4;
        state.qdot[0] = 1.3;
        let e = mechanical_energy(&state, &model);
        let expected = 0.5 * 0.25 * 1.3 * 1.3 - 9.81 * 0.5 * 0.4f64.cos();
        assert_abs_diff_eq!(e, expected, epsilon = 1e-12);
    }

    #[test]
    fn small_angle_pendulum_frequency() {
        let l = 0.5;
        let model = pendulum(l, 0.0);
        let dt = 0.001;
        let mut state = SimState::nominal(&model);
        state.q[0] = 0.01;
        // Measure the period from upward zero crossings of q.
        let mut crossings = Vec::new();
        let mut prev = state.q[0];
        for k in 1..20_000 {
            state = step(&state, &[0.0], &model, dt).unwrap().state;
            let q = state.q[0];
            if prev < 0.0 && q >= 0.0 {
                let frac = prev / (prev - q);
                crossings.push((k as f64 - 1.0 + frac) * dt);
            }
            prev = q;
        }
        let periods = crossings.len() - 1;
        let period = (crossings[periods] - crossings[0]) / periods as f64;
        let measured = 2.0 * PI / period;
        let analytic = (9.81 / l).sqrt();
        assert!(((measured - analytic) / analytic).abs() < 0.01, "{measured} vs {analytic}");
    }

    #[test]
    fn free_flight_conserves_momentum_of_internal_motion() {
        let mut model = two_link_leg(0.2, 0.2);
        model.gravity = 0.0;
        let mut state = SimState::nominal(&model);
        state.base_pos[1] = 5.0;
        for _ in 0..200 {
            state = step(&state, &[0.01, -0.006], &model, DT).unwrap().state;
        }
        // Total linear momentum stays zero: the centre of mass does not drift.
        let frames = Frames::new(&model, &state.q, state.base_pos, None);
        let com_x: f64 = (0..3).map(|i| model.links[i].mass * frames.com(&model, i)[0]).sum::<f64>()
            / model.total_mass();
        assert_abs_diff_eq!(com_x, 0.0, epsilon = 1e-3);
    }

    #[test]
    fn undamped_motion_conserves_energy_as_dt_shrinks() {
        let model = two_link_leg(0.2, 0.2);
        let mut state = SimState::nominal(&model);
        state.base_pos = [0.0, 5.0, 0.3];
        state.base_vel = [0.4, 1.0, -2.0];
        state.qdot = vec![3.0, -5.0];
        let e0 = mechanical_energy(&state, &model);
        let dt = 1e-5;
        for _ in 0..20_000 {
            state = step(&state, &[0.0, 0.0], &model, dt).unwrap().state;
        }
        let e1 = mechanical_energy(&state, &model);
        assert!(((e1 - e0) / e0).abs() < 1e-3, "{e0} -> {e1}");
    }

    #[test]
    fn branched_tree_conserves_energy() {
        for name in ["biped2d", "quad2d", "hopper"] {
            let mut model = bundled(name).unwrap();
            model.substeps = 1;
            for l in &mut model.links {
                l.damping = 0.0;
            }
            let mut state = SimState::nominal(&model);
            state.base_pos = [0.0, 5.0, 0.3];
            state.base_vel = [0.4, 1.0, -2.0];
            state.qdot = (0..model.n_joints()).map(|j| 1.0 - 0.7 * j as f64).collect();
            let e0 = mechanical_energy(&state, &model);
            for _ in 0..20_000 {
                state = step(&state, &vec![0.0; model.n_joints()], &model, 1e-5).unwrap().state;
            }
            let e1 = mechanical_energy(&state, &model);
            assert!(((e1 - e0) / e0).abs() < 1e-3, "{name}: {e0} -> {e1}");
        }
    }
}

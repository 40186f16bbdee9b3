//! Planar robot model definitions.
//!
//! A model is a tree of rigid links in the sagittal (x, z) plane. `links[0]` is
//! the base (torso); every other link hangs off a revolute joint, so joint `j`
//! drives `links[j + 1]`. Angles are counter-clockwise in the (x, z) plane, and
//! a link at absolute angle 0 points straight down: its distal end sits at
//! local `(0, -length)` and its centre of mass at `(0, -length / 2)`. The base
//! centre of mass is the base frame origin.
//!
//! Model files are flat JSON documents; see `docs/model-format.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MODEL_FORMAT_VERSION: u32 = 1;

fn one() -> u32 {
    1
}

const BUNDLED: [(&str, &str); 3] = [
    ("hopper", include_str!("../models/hopper.model")),
    ("biped2d", include_str!("../models/biped2d.model")),
    ("quad2d", include_str!("../models/quad2d.model")),
];

/// Largest supported link count, base included.
pub const MAX_LINKS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Link {
    pub name: String,
    /// kg
    pub mass: f64,
    /// m
    pub length: f64,
    /// kg·m², about the centre of mass
    pub inertia: f64,
    /// N·m·s/rad, viscous damping of the joint driving this link
    pub damping: f64,
    /// kg·m², reflected actuator inertia of the joint driving this link
    #[serde(default)]
    pub armature: f64,
    /// Parent link index; `None` only for the base.
    pub parent: Option<usize>,
    /// Joint position in the parent frame (m).
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactParams {
    /// Normal stiffness (N/m).
    pub k_n: f64,
    /// Normal damping (N·s/m).
    pub c_n: f64,
    /// Tangential viscous gain (N·s/m).
    pub k_t: f64,
    /// Coulomb friction coefficient.
    pub mu: f64,
}

/// A point that can touch the ground, fixed in a link frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactPoint {
    pub link: usize,
    pub offset: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotModel {
    pub format_version: u32,
    pub name: String,
    /// m/s², acting along -z.
    pub gravity: f64,
    /// Pin the base in place (used for pendulum rigs).
    #[serde(default)]
    pub fixed_base: bool,
    /// Physics sub-steps per control step; stiff contacts need more than one.
    #[serde(default = "one")]
    pub substeps: u32,
    pub links: Vec<Link>,
    pub torque_limits: Vec<f64>,
    pub joint_limits: Vec<[f64; 2]>,
    pub nominal_pose: Vec<f64>,
    pub contact: ContactParams,
    /// Link indices whose distal end is a foot / end-effector.
    pub feet: Vec<usize>,
    pub contact_points: Vec<ContactPoint>,
    /// Base height when standing at the nominal pose (m).
    pub nominal_height: f64,
}

impl RobotModel {
    pub fn n_joints(&self) -> usize {
        self.links.len().saturating_sub(1)
    }

    /// Degrees of freedom of the generalized coordinates.
    pub fn n_dof(&self) -> usize {
        if self.fixed_base {
            self.n_joints()
        } else {
            self.n_joints() + 3
        }
    }

    pub fn n_feet(&self) -> usize {
        self.feet.len()
    }

    pub fn is_foot(&self, link: usize) -> bool {
        self.feet.contains(&link)
    }

    pub fn total_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }

    /// Links from the base down to `link`, inclusive.
    pub fn chain(&self, link: usize) -> Vec<usize> {
        let mut chain = vec![link];
        let mut cur = link;
        while let Some(p) = self.links[cur].parent {
            chain.push(p);
            cur = p;
        }
        chain.reverse();
        chain
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: RobotModel = serde_json::from_str(text).map_err(map_serde_error)?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version {
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        if self.links.is_empty() {
            return Err(Error::validation("links", "at least a base link is required"));
        }
        if self.links.len() > MAX_LINKS {
            return Err(Error::validation("links", format!("at most {MAX_LINKS} links are supported")));
        }
        if self.substeps == 0 {
            return Err(Error::validation("substeps", "must be >= 1"));
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::validation("gravity", "must be finite and >= 0"));
        }
        for (i, link) in self.links.iter().enumerate() {
            let field = |f: &str| format!("links[{i}].{f}");
            if !(link.mass.is_finite() && link.mass > 0.0) {
                return Err(Error::validation(field("mass"), "must be > 0"));
            }
            if !(link.length.is_finite() && link.length > 0.0) {
                return Err(Error::validation(field("length"), "must be > 0"));
            }
            if !(link.inertia.is_finite() && link.inertia >= 0.0) {
                return Err(Error::validation(field("inertia"), "must be >= 0"));
            }
            if !(link.damping.is_finite() && link.damping >= 0.0) {
                return Err(Error::validation(field("damping"), "must be >= 0"));
            }
            if !(link.armature.is_finite() && link.armature >= 0.0) {
                return Err(Error::validation(field("armature"), "must be >= 0"));
            }
            if link.offset.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(field("offset"), "must be finite"));
            }
            match (i, link.parent) {
                (0, None) => {}
                (0, Some(_)) => {
                    return Err(Error::validation(field("parent"), "the base has no parent"))
                }
                (_, None) => return Err(Error::validation(field("parent"), "missing parent")),
                (_, Some(p)) if p >= i => {
                    return Err(Error::validation(
                        field("parent"),
                        "parents must precede their children",
                    ))
                }
                _ => {}
            }
        }

        let n = self.n_joints();
        for (name, len) in [
            ("torque_limits", self.torque_limits.len()),
            ("joint_limits", self.joint_limits.len()),
            ("nominal_pose", self.nominal_pose.len()),
        ] {
            if len != n {
                return Err(Error::validation(
                    name,
                    format!("expected {n} entries (one per joint), got {len}"),
                ));
            }
        }
        for (j, &t) in self.torque_limits.iter().enumerate() {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::validation(format!("torque_limits[{j}]"), "must be > 0"));
            }
        }
        for (j, &[lo, hi]) in self.joint_limits.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::validation(format!("joint_limits[{j}]"), "need lo < hi"));
            }
            let q = self.nominal_pose[j];
            if !(q >= lo && q <= hi) {
                return Err(Error::validation(
                    format!("nominal_pose[{j}]"),
                    format!("{q} outside joint limits [{lo}, {hi}]"),
                ));
            }
        }

        let c = &self.contact;
        for (name, v, strict) in [
            ("contact.k_n", c.k_n, true),
            ("contact.c_n", c.c_n, false),
            ("contact.k_t", c.k_t, false),
            ("contact.mu", c.mu, false),
        ] {
            let ok = v.is_finite() && if strict { v > 0.0 } else { v >= 0.0 };
            if !ok {
                return Err(Error::validation(name, "out of range"));
            }
        }
        for (k, &f) in self.feet.iter().enumerate() {
            if f == 0 || f >= self.links.len() {
                return Err(Error::validation(format!("feet[{k}]"), "must name a non-base link"));
            }
        }
        for (k, cp) in self.contact_points.iter().enumerate() {
            if cp.link >= self.links.len() {
                return Err(Error::validation(
                    format!("contact_points[{k}].link"),
                    "link index out of range",
                ));
            }
        }
        if !(self.nominal_height.is_finite() && self.nominal_height > 0.0) {
            return Err(Error::validation("nominal_height", "must be > 0"));
        }
        Ok(())
    }
}

fn map_serde_error(err: serde_json::Error) -> Error {
    let msg = err.to_string();
    if let Some(rest) = msg.strip_prefix("missing field `") {
        if let Some(end) = rest.find('`') {
            return Error::MissingField(rest[..end].to_string());
        }
    }
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return Error::UnknownKey(rest[..end].to_string());
        }
    }
    Error::Json(err)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<RobotModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RobotModel::from_json(&text)
}

pub fn save_model(model: &RobotModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.to_json() + "\n").map_err(|e| Error::io(path, e))
}

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled(name: &str) -> Option<RobotModel> {
    BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| RobotModel::from_json(text).expect("bundled model is valid"))
}

/// Resolve a model reference: an existing file path, or the name of a bundled
/// model (with or without the `.model` suffix).
pub fn resolve(reference: &str) -> Result<RobotModel> {
    let path = Path::new(reference);
    if path.is_file() {
        return load_model(path);
    }
    let stem = reference.strip_suffix(".model").unwrap_or(reference);
    let stem = Path::new(stem)
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or(stem);
    bundled(stem).ok_or_else(|| Error::MissingArtifact(path.to_path_buf()))
}

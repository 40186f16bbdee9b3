//! Imitation data: tracked-state frames recorded from a position policy,
//! their `.imit` text format, time-aligned lookup and the RMSE metric.
//!
//! A `.imit` file is one JSON header line followed by one line per frame.
//! Frames are written trajectory by trajectory as whitespace-separated
//! decimals with 17 significant digits:
//!
//! ```text
//! trajectory step_index q[0..n] h r_e[0].x r_e[0].z .. r_z[0..f] v_cmd w_cmd
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Command;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImitationFrame {
    /// Tracked joint angles (rad).
    pub q_hat: Vec<f64>,
    /// Base height (m).
    pub h_hat: f64,
    /// Foot positions relative to the base, base frame (m).
    pub r_e_hat: Vec<[f64; 2]>,
    /// Foot heights, world frame (m).
    pub r_z_hat: Vec<f64>,
    pub v_cmd: f64,
    pub w_cmd: f64,
    pub step_index: usize,
}

impl ImitationFrame {
    pub fn command(&self) -> Command {
        Command {
            v_cmd: self.v_cmd,
            w_cmd: self.w_cmd,
        }
    }

    fn is_finite(&self) -> bool {
        self.q_hat
            .iter()
            .chain(std::iter::once(&self.h_hat))
            .chain(self.r_e_hat.iter().flatten())
            .chain(&self.r_z_hat)
            .chain([&self.v_cmd, &self.w_cmd])
            .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryInfo {
    pub v_cmd: f64,
    pub w_cmd: f64,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImitationHeader {
    pub format_version: u32,
    pub robot: String,
    pub dt: f64,
    pub n_joints: usize,
    pub n_feet: usize,
    /// Gains the position policy ran with while recording.
    pub kp: Vec<f64>,
    pub kd: Vec<f64>,
    pub checkpoint_id: String,
    /// Run directory of the stage-1 training run, when known.
    #[serde(default)]
    pub source_run: Option<String>,
    pub settle_steps: usize,
    pub trajectories: Vec<TrajectoryInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub command: Command,
    pub frames: Vec<ImitationFrame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImitationDataset {
    pub header: ImitationHeader,
    pub trajectories: Vec<Trajectory>,
}

impl ImitationDataset {
    /// Builds a dataset, filling the per-trajectory header summary.
    pub fn new(mut header: ImitationHeader, trajectories: Vec<Trajectory>) -> Result<Self> {
        header.trajectories = trajectories
            .iter()
            .map(|t| TrajectoryInfo {
                v_cmd: t.command.v_cmd,
                w_cmd: t.command.w_cmd,
                frames: t.frames.len(),
            })
            .collect();
        let ds = ImitationDataset { header, trajectories };
        ds.validate(1)?;
        Ok(ds)
    }

    pub fn n_frames(&self) -> usize {
        self.trajectories.iter().map(|t| t.frames.len()).sum()
    }

    pub fn validate(&self, min_length: usize) -> Result<()> {
        let h = &self.header;
        if h.format_version != FORMAT_VERSION {
            return Err(Error::Version {
                found: h.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if !(h.dt.is_finite() && h.dt > 0.0) {
            return Err(Error::validation("dt", "must be > 0"));
        }
        if h.kp.len() != h.n_joints || h.kd.len() != h.n_joints {
            return Err(Error::validation("kp", "gain vectors must have n_joints entries"));
        }
        for (i, t) in self.trajectories.iter().enumerate() {
            if t.frames.len() < min_length {
                return Err(Error::validation(
                    format!("trajectories[{i}]"),
                    format!("{} frames, need at least {min_length}", t.frames.len()),
                ));
            }
            for f in &t.frames {
                if f.q_hat.len() != h.n_joints {
                    return Err(Error::dimension(format!("trajectories[{i}] q_hat"), h.n_joints, f.q_hat.len()));
                }
                if f.r_e_hat.len() != h.n_feet || f.r_z_hat.len() != h.n_feet {
                    return Err(Error::dimension(format!("trajectories[{i}] feet"), h.n_feet, f.r_e_hat.len()));
                }
                if !f.is_finite() {
                    return Err(Error::NonFinite(format!("trajectories[{i}] frame {}", f.step_index)));
                }
            }
        }
        Ok(())
    }

    /// Warns when the dataset was recorded at a different control period.
    pub fn warn_on_dt_mismatch(&self, dt: f64) {
        if self.header.dt != dt {
            log::warn!(
                "imitation data recorded at dt={} but the run uses dt={dt}; lookups will fail",
                self.header.dt
            );
        }
    }

    /// [`lookup`] that refuses to serve frames recorded at another `dt`.
    pub fn lookup_at(&self, cmd: Command, t: usize, dt: f64) -> Result<&ImitationFrame> {
        if self.header.dt != dt {
            return Err(Error::Mismatch(format!(
                "imitation data dt {} differs from run dt {dt}",
                self.header.dt
            )));
        }
        lookup(self, cmd, t)
    }
}

/// Index of the trajectory whose command is nearest to `cmd`; ties go to the
/// lower index.
pub fn nearest_trajectory(ds: &ImitationDataset, cmd: Command) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in ds.trajectories.iter().enumerate() {
        if t.frames.is_empty() {
            continue;
        }
        let d = (t.command.v_cmd - cmd.v_cmd).powi(2) + (t.command.w_cmd - cmd.w_cmd).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::validation("imitation", "dataset has no frames"))
}

/// Reference frame for command `cmd` at step `t` since the command started.
pub fn lookup(ds: &ImitationDataset, cmd: Command, t: usize) -> Result<&ImitationFrame> {
    let traj = &ds.trajectories[nearest_trajectory(ds, cmd)?];
    Ok(&traj.frames[t % traj.frames.len()])
}

/// Root mean square over every step and joint.
pub fn rmse(tracked: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<f64> {
    if tracked.len() != reference.len() {
        return Err(Error::dimension("rmse steps", reference.len(), tracked.len()));
    }
    if tracked.is_empty() {
        return Err(Error::validation("rmse", "empty series"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in tracked.iter().zip(reference) {
        if a.len() != b.len() {
            return Err(Error::dimension("rmse joints", b.len(), a.len()));
        }
        sum += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        count += a.len();
    }
    Ok((sum / count as f64).sqrt())
}

fn write_frame(out: &mut String, traj: usize, f: &ImitationFrame) {
    use std::fmt::Write as _;
    let _ = write!(out, "{traj} {}", f.step_index);
    let values = f
        .q_hat
        .iter()
        .chain(std::iter::once(&f.h_hat))
        .chain(f.r_e_hat.iter().flatten())
        .chain(&f.r_z_hat)
        .chain([&f.v_cmd, &f.w_cmd]);
    for v in values {
        let _ = write!(out, " {v:.16e}");
    }
    out.push('\n');
}

pub fn to_text(ds: &ImitationDataset) -> String {
    let mut out = serde_json::to_string(&ds.header).expect("header serializes");
    out.push('\n');
    for (i, t) in ds.trajectories.iter().enumerate() {
        for f in &t.frames {
            write_frame(&mut out, i, f);
        }
    }
    out
}

pub fn save(ds: &ImitationDataset, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(to_text(ds).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ImitationDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text, path)
}

fn parse_frame(line: &str, n: usize, f: usize) -> std::result::Result<(usize, ImitationFrame), String> {
    let mut tokens = line.split_ascii_whitespace();
    let mut int = |what: &str| -> std::result::Result<usize, String> {
        tokens
            .next()
            .ok_or_else(|| format!("missing {what}"))?
            .parse::<usize>()
            .map_err(|e| format!("bad {what}: {e}"))
    };
    let traj = int("trajectory index")?;
    let step_index = int("step index")?;
    let values: Vec<f64> = tokens
        .map(|t| t.parse::<f64>().map_err(|e| format!("bad number `{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let expected = n + 1 + 3 * f + 2;
    if values.len() != expected {
        return Err(format!("expected {expected} values, found {}", values.len()));
    }
    let mut it = values.into_iter();
    let q_hat: Vec<f64> = it.by_ref().take(n).collect();
    let h_hat = it.next().unwrap();
    let r_e_hat = (0..f)
        .map(|_| [it.next().unwrap(), it.next().unwrap()])
        .collect();
    let r_z_hat = it.by_ref().take(f).collect();
    let v_cmd = it.next().unwrap();
    let w_cmd = it.next().unwrap();
    Ok((
        traj,
        ImitationFrame {
            q_hat,
            h_hat,
            r_e_hat,
            r_z_hat,
            v_cmd,
            w_cmd,
            step_index,
        },
    ))
}

pub fn from_text(text: &str, path: &Path) -> Result<ImitationDataset> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let version = serde_json::from_str::<serde_json::Value>(first)
        .map_err(|e| parse_err(1, format!("bad header: {e}")))?
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(1, "header lacks format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let header: ImitationHeader =
        serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;

    let mut trajectories: Vec<Trajectory> = header
        .trajectories
        .iter()
        .map(|t| Trajectory {
            command: Command {
                v_cmd: t.v_cmd,
                w_cmd: t.w_cmd,
            },
            frames: Vec::with_capacity(t.frames),
        })
        .collect();
    let total: usize = header.trajectories.iter().map(|t| t.frames).sum();
    let mut line_no = 1;
    for (k, line) in lines.enumerate() {
        line_no = k + 2;
        if line.trim().is_empty() {
            return Err(parse_err(line_no, "blank line".into()));
        }
        if k >= total {
            return Err(parse_err(line_no, format!("more frames than the {total} declared")));
        }
        let (traj, frame) =
            parse_frame(line, header.n_joints, header.n_feet).map_err(|r| parse_err(line_no, r))?;
        let slot = trajectories
            .get_mut(traj)
            .ok_or_else(|| parse_err(line_no, format!("trajectory index {traj} out of range")))?;
        if slot.frames.len() >= header.trajectories[traj].frames {
            return Err(parse_err(line_no, format!("too many frames for trajectory {traj}")));
        }
        slot.frames.push(frame);
    }
    let read = line_no - 1;
    if read < total {
        return Err(parse_err(
            line_no,
            format!("truncated after line {line_no}: {read} of {total} frames present"),
        ));
    }
    let ds = ImitationDataset { header, trajectories };
    ds.validate(1)?;
    Ok(ds)
}

//! Trial recording format and auto-labeling of unlabeled trajectories.
//!
//! A trial file holds one JSON object per line, UTF-8:
//!
//! ```text
//! {"trial_id":"...","expertise":"expert","hz":50.0,"success":true,
//!  "frames":[{"t":0.0,
//!             "herders":[{"x":0.1,"y":0.2,"vx":0.0,"vy":0.0}, ...],
//!             "targets":[{"x":..,"y":..}, x4],
//!             "labels":[1,0]}, ...]}
//! ```
//!
//! Coordinates are meters, `t` is seconds, velocities are optional, and
//! `labels` (one per herder, 0 = no target, 1-4 = target id) may be absent
//! on ingested recordings; [`auto_label`] reconstructs them from proximity.

use crate::geom::Vec2;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

pub const N_HERDERS: usize = 2;
pub const N_TARGETS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expertise {
    Expert,
    Novice,
}

impl fmt::Display for Expertise {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expertise::Expert => write!(f, "expert"),
            Expertise::Novice => write!(f, "novice"),
        }
    }
}

/// One agent's sample within a frame: position, optionally velocity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentSample {
    pub pos: Vec2,
    pub vel: Option<Vec2>,
}

impl AgentSample {
    pub fn new(pos: Vec2) -> Self {
        AgentSample { pos, vel: None }
    }

    pub fn with_vel(pos: Vec2, vel: Vec2) -> Self {
        AgentSample { pos, vel: Some(vel) }
    }

    fn is_finite(&self) -> bool {
        self.pos.is_finite() && self.vel.is_none_or(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub herders: [AgentSample; N_HERDERS],
    pub targets: [AgentSample; N_TARGETS],
    /// Per-herder target codes: 0 = no target, 1-4 = target id.
    pub labels: Option<[u8; N_HERDERS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub trial_id: String,
    pub expertise: Expertise,
    pub hz: f64,
    pub success: bool,
    pub frames: Vec<Frame>,
}

impl Trial {
    pub fn n_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn is_labeled(&self) -> bool {
        !self.frames.is_empty() && self.frames.iter().all(|f| f.labels.is_some())
    }

    /// Label of `herder` at `frame`; panics if the trial is unlabeled.
    pub fn label(&self, frame: usize, herder: usize) -> u8 {
        self.frames[frame].labels.expect("labeled trial")[herder]
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed trial record: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("trial {trial_id}: non-monotone timestamps at frame {frame}")]
    NonMonotoneTime { trial_id: String, frame: usize },
    #[error("trial {trial_id}: frame spacing deviates from 1/hz at frame {frame}")]
    NonUniformSpacing { trial_id: String, frame: usize },
    #[error("line {line}: trial {trial_id}: {message}")]
    InvalidTrial {
        line: usize,
        trial_id: String,
        message: String,
    },
    #[error("trial {trial_id}: needs at least {needed} frames, has {got}")]
    TooShort {
        trial_id: String,
        needed: usize,
        got: usize,
    },
}

// Wire representation. Kept separate from the in-memory types so the
// on-disk schema stays fixed.
#[derive(Serialize, Deserialize)]
struct AgentJson {
    x: f64,
    y: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    vx: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    vy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct FrameJson {
    t: f64,
    herders: Vec<AgentJson>,
    targets: Vec<AgentJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct TrialJson {
    trial_id: String,
    expertise: Expertise,
    hz: f64,
    success: bool,
    frames: Vec<FrameJson>,
}

fn agent_to_json(a: &AgentSample) -> AgentJson {
    AgentJson {
        x: a.pos.x,
        y: a.pos.y,
        vx: a.vel.map(|v| v.x),
        vy: a.vel.map(|v| v.y),
    }
}

fn agent_from_json(a: &AgentJson) -> AgentSample {
    let vel = match (a.vx, a.vy) {
        (Some(vx), Some(vy)) => Some(Vec2::new(vx, vy)),
        _ => None,
    };
    AgentSample {
        pos: Vec2::new(a.x, a.y),
        vel,
    }
}

/// Read all trials from a line-oriented JSON file, validating as it goes.
pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>, IngestError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut trials = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: TrialJson =
            serde_json::from_str(&line).map_err(|e| IngestError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        trials.push(validate_trial(raw, line_no)?);
    }
    Ok(trials)
}

fn validate_trial(raw: TrialJson, line: usize) -> Result<Trial, IngestError> {
    let trial_id = raw.trial_id.clone();
    let invalid = |message: String| IngestError::InvalidTrial {
        line,
        trial_id: trial_id.clone(),
        message,
    };
    if !(raw.hz.is_finite() && raw.hz > 0.0) {
        return Err(invalid(format!("hz must be positive, got {}", raw.hz)));
    }
    let mut frames = Vec::with_capacity(raw.frames.len());
    for (fi, fr) in raw.frames.iter().enumerate() {
        if fr.herders.len() != N_HERDERS {
            return Err(invalid(format!(
                "frame {fi}: expected {N_HERDERS} herders, got {}",
                fr.herders.len()
            )));
        }
        if fr.targets.len() != N_TARGETS {
            return Err(invalid(format!(
                "frame {fi}: expected {N_TARGETS} targets, got {}",
                fr.targets.len()
            )));
        }
        let herders = [agent_from_json(&fr.herders[0]), agent_from_json(&fr.herders[1])];
        let targets = [
            agent_from_json(&fr.targets[0]),
            agent_from_json(&fr.targets[1]),
            agent_from_json(&fr.targets[2]),
            agent_from_json(&fr.targets[3]),
        ];
        if !fr.t.is_finite()
            || herders.iter().any(|a| !a.is_finite())
            || targets.iter().any(|a| !a.is_finite())
        {
            return Err(invalid(format!("frame {fi}: non-finite coordinate")));
        }
        let labels = match &fr.labels {
            None => None,
            Some(ls) => {
                if ls.len() != N_HERDERS {
                    return Err(invalid(format!(
                        "frame {fi}: expected {N_HERDERS} labels, got {}",
                        ls.len()
                    )));
                }
                if let Some(&bad) = ls.iter().find(|&&l| l as usize > N_TARGETS) {
                    return Err(invalid(format!("frame {fi}: label {bad} out of range 0..=4")));
                }
                Some([ls[0], ls[1]])
            }
        };
        frames.push(Frame {
            t: fr.t,
            herders,
            targets,
            labels,
        });
    }
    let dt = 1.0 / raw.hz;
    for fi in 1..frames.len() {
        if frames[fi].t <= frames[fi - 1].t {
            return Err(IngestError::NonMonotoneTime {
                trial_id,
                frame: fi,
            });
        }
        if ((frames[fi].t - frames[fi - 1].t) - dt).abs() > 1e-9 {
            return Err(IngestError::NonUniformSpacing {
                trial_id,
                frame: fi,
            });
        }
    }
    Ok(Trial {
        trial_id: raw.trial_id,
        expertise: raw.expertise,
        hz: raw.hz,
        success: raw.success,
        frames,
    })
}

/// Write trials as line-oriented JSON. Inverse of [`read_trials`].
pub fn write_trials(path: impl AsRef<Path>, trials: &[Trial]) -> Result<(), IngestError> {
    let file = File::create(path.as_ref())?;
    let mut w = BufWriter::new(file);
    for trial in trials {
        let raw = TrialJson {
            trial_id: trial.trial_id.clone(),
            expertise: trial.expertise,
            hz: trial.hz,
            success: trial.success,
            frames: trial
                .frames
                .iter()
                .map(|f| FrameJson {
                    t: f.t,
                    herders: f.herders.iter().map(agent_to_json).collect(),
                    targets: f.targets.iter().map(agent_to_json).collect(),
                    labels: f.labels.map(|l| l.to_vec()),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &raw)
            .map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Label every frame of `trial` from herder-target proximity: the label is
/// the id of the target whose distance to the herder is below
/// `repulsion_radius` and decreasing; the nearest one if several qualify,
/// 0 if none.
///
/// Distance derivatives use central differences over adjacent frames, with
/// one-sided differences at the trial's endpoints.
pub fn auto_label(trial: &Trial, repulsion_radius: f64) -> Result<Trial, IngestError> {
    let n = trial.frames.len();
    if n < 3 {
        return Err(IngestError::TooShort {
            trial_id: trial.trial_id.clone(),
            needed: 3,
            got: n,
        });
    }
    // d[k][h][i]: herder h to target i at frame k
    let mut d = vec![[[0.0f64; N_TARGETS]; N_HERDERS]; n];
    for (k, frame) in trial.frames.iter().enumerate() {
        for h in 0..N_HERDERS {
            for i in 0..N_TARGETS {
                d[k][h][i] = frame.herders[h].pos.dist(frame.targets[i].pos);
            }
        }
    }
    let hz = trial.hz;
    let ddot = |k: usize, h: usize, i: usize| -> f64 {
        if k == 0 {
            (d[1][h][i] - d[0][h][i]) * hz
        } else if k == n - 1 {
            (d[n - 1][h][i] - d[n - 2][h][i]) * hz
        } else {
            (d[k + 1][h][i] - d[k - 1][h][i]) * hz / 2.0
        }
    };
    let mut out = trial.clone();
    for k in 0..n {
        let mut labels = [0u8; N_HERDERS];
        for h in 0..N_HERDERS {
            let mut best: Option<(f64, usize)> = None;
            for i in 0..N_TARGETS {
                if d[k][h][i] < repulsion_radius && ddot(k, h, i) < 0.0 {
                    let better = match best {
                        None => true,
                        Some((bd, _)) => d[k][h][i] < bd,
                    };
                    if better {
                        best = Some((d[k][h][i], i));
                    }
                }
            }
            labels[h] = best.map_or(0, |(_, i)| (i + 1) as u8);
        }
        out.frames[k].labels = Some(labels);
    }
    Ok(out)
}

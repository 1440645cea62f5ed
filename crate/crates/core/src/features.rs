//! The 48 state variables describing the scene from one herder's viewpoint.
//!
//! Canonical layout of a [`StateVector`], all relative to the focal herder
//! (the co-herder is the other one):
//!
//! | index   | content                                                      |
//! |---------|--------------------------------------------------------------|
//! | 0..2    | inter-herder radial distance, angular position               |
//! | 2..10   | (distance, angle) of each target from the focal herder       |
//! | 10..18  | (distance, angle) of each target from the co-herder          |
//! | 18..20  | focal herder (distance, angle) from the containment center   |
//! | 20..22  | co-herder (distance, angle) from the center                  |
//! | 22..30  | each target (distance, angle) from the center                |
//! | 30..32  | focal herder radial velocity, radial acceleration            |
//! | 32..34  | co-herder radial velocity, radial acceleration               |
//! | 34..42  | each target radial velocity, radial acceleration             |
//! | 42      | focal herder direction of motion                             |
//! | 43      | co-herder direction of motion                                |
//! | 44..48  | each target direction of motion                              |
//!
//! Angles are absolute world-frame bearings from `atan2`, in `(-pi, pi]`.
//! Radial velocity and acceleration are derivatives of the distance from
//! the containment center, estimated by finite differences at the trial's
//! native rate. Direction of motion is the heading of the Cartesian
//! velocity (recorded velocity when present, otherwise a central
//! difference), with 0 for speeds below 1e-9 m/s.

use crate::geom::Vec2;
use crate::ingest::{Trial, N_HERDERS, N_TARGETS};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const N_FEATURES: usize = 48;
pub const SPEED_EPS: f64 = 1e-9;

/// Containment center used by the canonical feature layout.
pub const CENTER: Vec2 = Vec2::ZERO;

pub type StateVector = [f64; N_FEATURES];

/// Human-readable channel names, index-aligned with [`StateVector`].
pub fn feature_names() -> [String; N_FEATURES] {
    let mut names: Vec<String> = Vec::with_capacity(N_FEATURES);
    names.push("herder_co_dist".into());
    names.push("herder_co_angle".into());
    for i in 1..=N_TARGETS {
        names.push(format!("t{i}_herder_dist"));
        names.push(format!("t{i}_herder_angle"));
    }
    for i in 1..=N_TARGETS {
        names.push(format!("t{i}_co_dist"));
        names.push(format!("t{i}_co_angle"));
    }
    names.push("herder_center_dist".into());
    names.push("herder_center_angle".into());
    names.push("co_center_dist".into());
    names.push("co_center_angle".into());
    for i in 1..=N_TARGETS {
        names.push(format!("t{i}_center_dist"));
        names.push(format!("t{i}_center_angle"));
    }
    names.push("herder_radial_vel".into());
    names.push("herder_radial_acc".into());
    names.push("co_radial_vel".into());
    names.push("co_radial_acc".into());
    for i in 1..=N_TARGETS {
        names.push(format!("t{i}_radial_vel"));
        names.push(format!("t{i}_radial_acc"));
    }
    names.push("herder_direction".into());
    names.push("co_direction".into());
    for i in 1..=N_TARGETS {
        names.push(format!("t{i}_direction"));
    }
    names.try_into().expect("48 names")
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("kinematics needs at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("frame index {index} out of range for trial with {n_frames} frames")]
    FrameOutOfRange { index: usize, n_frames: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a feature matrix file (bad magic)")]
    BadMagic,
    #[error("unsupported feature matrix version {0}")]
    UnsupportedVersion(u32),
    #[error("feature matrix file truncated")]
    Truncated,
}

/// Radial distance and absolute bearing of `b` as seen from `a`.
///
/// Returns `(0, 0)` by convention for coincident points.
pub fn polar_offset(a: Vec2, b: Vec2) -> (f64, f64) {
    let d = b - a;
    let delta = d.norm();
    if delta == 0.0 {
        (0.0, 0.0)
    } else {
        (delta, d.y.atan2(d.x))
    }
}

/// Per-frame radial velocity, radial acceleration, and direction of motion
/// for one agent's position series, about `center`.
///
/// `velocities` supplies recorded Cartesian velocities where available;
/// missing entries fall back to position differences.
pub fn kinematics_series_about(
    positions: &[Vec2],
    velocities: &[Option<Vec2>],
    hz: f64,
    center: Vec2,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), FeatureError> {
    let n = positions.len();
    if n < 3 {
        return Err(FeatureError::TooFewFrames(n));
    }
    debug_assert_eq!(velocities.len(), n);
    let r: Vec<f64> = positions.iter().map(|p| p.dist(center)).collect();
    let mut r_dot = vec![0.0; n];
    let mut r_ddot = vec![0.0; n];
    for k in 0..n {
        r_dot[k] = if k == 0 {
            (r[1] - r[0]) * hz
        } else if k == n - 1 {
            (r[n - 1] - r[n - 2]) * hz
        } else {
            (r[k + 1] - r[k - 1]) * hz / 2.0
        };
        r_ddot[k] = if k == 0 {
            (r[2] - 2.0 * r[1] + r[0]) * hz * hz
        } else if k == n - 1 {
            (r[n - 1] - 2.0 * r[n - 2] + r[n - 3]) * hz * hz
        } else {
            (r[k + 1] - 2.0 * r[k] + r[k - 1]) * hz * hz
        };
    }
    let mut direction = vec![0.0; n];
    for k in 0..n {
        let v = velocities[k].unwrap_or_else(|| derived_velocity(positions, k, hz));
        direction[k] = if v.norm() < SPEED_EPS {
            0.0
        } else {
            v.y.atan2(v.x)
        };
    }
    Ok((r_dot, r_ddot, direction))
}

/// [`kinematics_series_about`] with the canonical containment center.
pub fn kinematics_series(
    positions: &[Vec2],
    velocities: &[Option<Vec2>],
    hz: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), FeatureError> {
    kinematics_series_about(positions, velocities, hz, CENTER)
}

fn derived_velocity(positions: &[Vec2], k: usize, hz: f64) -> Vec2 {
    let n = positions.len();
    if k == 0 {
        (positions[1] - positions[0]) * hz
    } else if k == n - 1 {
        (positions[n - 1] - positions[n - 2]) * hz
    } else {
        (positions[k + 1] - positions[k - 1]) * (hz / 2.0)
    }
}

/// Precomputed per-trial kinematics; extracting many state vectors from one
/// trial amortizes the series work.
pub struct FeatureExtractor<'a> {
    trial: &'a Trial,
    center: Vec2,
    // agents ordered: herders 0..2, targets 0..4
    r_dot: Vec<Vec<f64>>,
    r_ddot: Vec<Vec<f64>>,
    direction: Vec<Vec<f64>>,
}

impl<'a> FeatureExtractor<'a> {
    pub fn new(trial: &'a Trial) -> Result<Self, FeatureError> {
        Self::about(trial, CENTER)
    }

    pub fn about(trial: &'a Trial, center: Vec2) -> Result<Self, FeatureError> {
        let n = trial.frames.len();
        if n < 3 {
            return Err(FeatureError::TooFewFrames(n));
        }
        let mut r_dot = Vec::with_capacity(N_HERDERS + N_TARGETS);
        let mut r_ddot = Vec::with_capacity(N_HERDERS + N_TARGETS);
        let mut direction = Vec::with_capacity(N_HERDERS + N_TARGETS);
        for agent in 0..N_HERDERS + N_TARGETS {
            let (positions, velocities): (Vec<Vec2>, Vec<Option<Vec2>>) = trial
                .frames
                .iter()
                .map(|f| {
                    let s = if agent < N_HERDERS {
                        &f.herders[agent]
                    } else {
                        &f.targets[agent - N_HERDERS]
                    };
                    (s.pos, s.vel)
                })
                .unzip();
            let (rd, rdd, dir) = kinematics_series_about(&positions, &velocities, trial.hz, center)?;
            r_dot.push(rd);
            r_ddot.push(rdd);
            direction.push(dir);
        }
        Ok(FeatureExtractor {
            trial,
            center,
            r_dot,
            r_ddot,
            direction,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.trial.frames.len()
    }

    /// The 48-element state vector for `focal` at `frame`.
    pub fn state_vector(&self, frame: usize, focal: usize) -> Result<StateVector, FeatureError> {
        let n = self.trial.frames.len();
        if frame >= n {
            return Err(FeatureError::FrameOutOfRange {
                index: frame,
                n_frames: n,
            });
        }
        assert!(focal < N_HERDERS, "focal herder index out of range");
        let co = 1 - focal;
        let f = &self.trial.frames[frame];
        let focal_pos = f.herders[focal].pos;
        let co_pos = f.herders[co].pos;

        let mut v = [0.0f64; N_FEATURES];
        let (d, a) = polar_offset(focal_pos, co_pos);
        v[0] = d;
        v[1] = a;
        for i in 0..N_TARGETS {
            let (d, a) = polar_offset(focal_pos, f.targets[i].pos);
            v[2 + 2 * i] = d;
            v[3 + 2 * i] = a;
        }
        for i in 0..N_TARGETS {
            let (d, a) = polar_offset(co_pos, f.targets[i].pos);
            v[10 + 2 * i] = d;
            v[11 + 2 * i] = a;
        }
        let (d, a) = polar_offset(self.center, focal_pos);
        v[18] = d;
        v[19] = a;
        let (d, a) = polar_offset(self.center, co_pos);
        v[20] = d;
        v[21] = a;
        for i in 0..N_TARGETS {
            let (d, a) = polar_offset(self.center, f.targets[i].pos);
            v[22 + 2 * i] = d;
            v[23 + 2 * i] = a;
        }
        v[30] = self.r_dot[focal][frame];
        v[31] = self.r_ddot[focal][frame];
        v[32] = self.r_dot[co][frame];
        v[33] = self.r_ddot[co][frame];
        for i in 0..N_TARGETS {
            v[34 + 2 * i] = self.r_dot[N_HERDERS + i][frame];
            v[35 + 2 * i] = self.r_ddot[N_HERDERS + i][frame];
        }
        v[42] = self.direction[focal][frame];
        v[43] = self.direction[co][frame];
        for i in 0..N_TARGETS {
            v[44 + i] = self.direction[N_HERDERS + i][frame];
        }
        Ok(v)
    }
}

/// One-shot extraction about the canonical center.
pub fn extract_features(
    trial: &Trial,
    frame: usize,
    focal: usize,
) -> Result<StateVector, FeatureError> {
    FeatureExtractor::new(trial)?.state_vector(frame, focal)
}

/// One-shot extraction about an explicit containment center.
pub fn extract_features_about(
    trial: &Trial,
    frame: usize,
    focal: usize,
    center: Vec2,
) -> Result<StateVector, FeatureError> {
    FeatureExtractor::about(trial, center)?.state_vector(frame, focal)
}

const HXF_MAGIC: &[u8; 4] = b"HXF1";
const HXF_VERSION: u32 = 1;

/// Write a feature matrix: magic `HXF1`, u32 version, u32 n_rows,
/// u32 n_cols, then row-major little-endian f64.
pub fn write_hxf(path: impl AsRef<Path>, rows: &[StateVector]) -> Result<(), FeatureError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(HXF_MAGIC)?;
    w.write_all(&HXF_VERSION.to_le_bytes())?;
    w.write_all(&(rows.len() as u32).to_le_bytes())?;
    w.write_all(&(N_FEATURES as u32).to_le_bytes())?;
    for row in rows {
        for &x in row.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_hxf(path: impl AsRef<Path>) -> Result<Vec<StateVector>, FeatureError> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != HXF_MAGIC {
        return Err(FeatureError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != HXF_VERSION {
        return Err(FeatureError::UnsupportedVersion(version));
    }
    let n_rows = read_u32(&mut r)? as usize;
    let n_cols = read_u32(&mut r)? as usize;
    if n_cols != N_FEATURES {
        return Err(FeatureError::Truncated);
    }
    let mut rows = Vec::with_capacity(n_rows);
    let mut buf = [0u8; 8];
    for _ in 0..n_rows {
        let mut row = [0.0f64; N_FEATURES];
        for x in row.iter_mut() {
            read_exact_or(&mut r, &mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        rows.push(row);
    }
    Ok(rows)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8]) -> Result<(), FeatureError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FeatureError::Truncated
        } else {
            FeatureError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, FeatureError> {
    let mut buf = [0u8; 4];
    read_exact_or(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

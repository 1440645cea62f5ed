//! Deterministic herding-world simulator with scripted herder policies.
//!
//! Two herders corral four wandering targets into a circular containment
//! region at the field center. Targets follow Brownian motion (reflected at
//! the fence) unless a herder is within the repulsion radius, in which case
//! they flee at a fixed speed along the mean away-vector. Herders steer
//! toward a point just beyond their selected target on the ray from the
//! center through the target, so the flee response pushes the target inward.
//!
//! All of the concrete numbers here (field size, diffusion constant, flee
//! speed, herder speeds, steering offset) are artifact defaults chosen so
//! that expert pairs finish in tens of simulated seconds; none are measured
//! quantities.

use crate::geom::Vec2;
use crate::ingest::{AgentSample, Expertise, Frame, Trial, N_HERDERS, N_TARGETS};
use crate::rng;
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Clone, Copy, Debug)]
pub struct WorldConfig {
    /// Half-width of the square fenced field, meters.
    pub field_half_width: f64,
    /// Containment radius r*, meters, centered at the origin.
    pub containment_radius: f64,
    /// Radius of a herder's repulsive influence on a target, meters.
    pub repulsion_radius: f64,
    /// Brownian diffusion of free targets, m/sqrt(s) per axis.
    pub target_brownian_sigma: f64,
    /// Flee speed of influenced targets, m/s.
    pub target_flee_speed: f64,
    /// Herder speed limit, m/s.
    pub herder_max_speed: f64,
    /// Recording rate, Hz; also the integration rate.
    pub record_hz: f64,
    /// Trial cutoff, seconds.
    pub max_duration: f64,
}

impl WorldConfig {
    /// Defaults with the expert herder speed.
    pub fn expert() -> Self {
        WorldConfig {
            field_half_width: 1.5,
            containment_radius: 0.3,
            repulsion_radius: 0.12,
            target_brownian_sigma: 0.05,
            target_flee_speed: 0.3,
            herder_max_speed: 1.2,
            record_hz: 50.0,
            max_duration: 120.0,
        }
    }

    /// Defaults with the novice herder speed.
    pub fn novice() -> Self {
        WorldConfig {
            herder_max_speed: 0.8,
            ..Self::expert()
        }
    }

    pub fn for_expertise(expertise: Expertise) -> Self {
        match expertise {
            Expertise::Expert => Self::expert(),
            Expertise::Novice => Self::novice(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.repulsion_radius > 0.0
            && self.containment_radius > self.repulsion_radius
            && self.record_hz > 0.0
            && self.max_duration > 0.0
            && self.field_half_width > 0.0
            && self.target_brownian_sigma >= 0.0
            && self.target_flee_speed >= 0.0
            && self.herder_max_speed >= 0.0
            && [
                self.field_half_width,
                self.containment_radius,
                self.repulsion_radius,
                self.target_brownian_sigma,
                self.target_flee_speed,
                self.herder_max_speed,
                self.record_hz,
                self.max_duration,
            ]
            .iter()
            .all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig)
        }
    }
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self::expert()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    pub t: f64,
    pub herder_pos: [Vec2; N_HERDERS],
    pub herder_vel: [Vec2; N_HERDERS],
    pub target_pos: [Vec2; N_TARGETS],
    pub target_vel: [Vec2; N_TARGETS],
    /// Per-herder current decision: 0 = no target, 1-4 = target id.
    pub decisions: [u8; N_HERDERS],
}

impl WorldState {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.herder_pos.iter().all(|p| p.is_finite())
            && self.herder_vel.iter().all(|p| p.is_finite())
            && self.target_pos.iter().all(|p| p.is_finite())
            && self.target_vel.iter().all(|p| p.is_finite())
    }

    pub fn all_targets_contained(&self, r_star: f64) -> bool {
        self.target_pos.iter().all(|p| p.norm() <= r_star)
    }
}

/// Scripted target-selection policy parameters.
#[derive(Clone, Copy, Debug)]
pub struct PolicyKind {
    pub variant: Expertise,
    /// Seconds between re-decisions.
    pub redecision_period: f64,
    /// Probability of a uniform random re-pick at a re-decision tick.
    pub switch_noise: f64,
    /// Demote targets already moving toward the center.
    pub direction_sensitivity: bool,
}

impl PolicyKind {
    pub fn expert() -> Self {
        PolicyKind {
            variant: Expertise::Expert,
            redecision_period: 0.1,
            switch_noise: 0.0,
            direction_sensitivity: true,
        }
    }

    pub fn novice() -> Self {
        PolicyKind {
            variant: Expertise::Novice,
            redecision_period: 0.3,
            switch_noise: 0.15,
            direction_sensitivity: false,
        }
    }

    pub fn for_expertise(expertise: Expertise) -> Self {
        match expertise {
            Expertise::Expert => Self::expert(),
            Expertise::Novice => Self::novice(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.redecision_period > 0.0 && (0.0..=1.0).contains(&self.switch_noise) {
            Ok(())
        } else {
            Err(SimError::InvalidConfig)
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world configuration violates its invariants")]
    InvalidConfig,
    #[error("non-finite state or command rejected")]
    NonFinite,
    #[error("dt must be positive, got {0}")]
    NonPositiveDt(f64),
}

/// An expert keeps its current target unless a rival's score beats it by
/// this factor. A small margin makes the policy alternate between its two
/// nearest-scored targets in lockstep, wasting travel; the margin has to be
/// large enough that a corralling run normally ends only at containment.
const EXPERT_HYSTERESIS: f64 = 2.5;
/// Score multiplier for free targets already moving toward the center.
/// The currently corralled target is exempt: its inward motion is the
/// herder's own doing.
const INBOUND_DEMOTION: f64 = 0.5;
/// Herders aim this far beyond the selected target, on the ray from the
/// containment center through the target.
const STEERING_OVERSHOOT: f64 = 0.10;

fn reflect_into(x: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let mut y = (x - lo) % (2.0 * span);
    if y < 0.0 {
        y += 2.0 * span;
    }
    if y > span {
        y = 2.0 * span - y;
    }
    y + lo
}

/// Advance the world by `dt` seconds.
///
/// Targets outside every herder's repulsion radius receive a reflected
/// Brownian increment of `sigma * sqrt(dt)` per axis; targets within the
/// radius of at least one herder move at the flee speed along the
/// normalized sum of away-vectors. Herders move toward `commands`, with
/// their displacement clipped to `herder_max_speed * dt` and their position
/// clamped to the fence.
pub fn step_world(
    state: &WorldState,
    cfg: &WorldConfig,
    commands: [Vec2; N_HERDERS],
    dt: f64,
    rng: &mut ChaCha12Rng,
) -> Result<WorldState, SimError> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(SimError::NonPositiveDt(dt));
    }
    if !state.is_finite() || commands.iter().any(|c| !c.is_finite()) {
        return Err(SimError::NonFinite);
    }
    let hw = cfg.field_half_width;
    let mut next = *state;
    next.t = state.t + dt;

    for h in 0..N_HERDERS {
        let step = (commands[h] - state.herder_pos[h]).clamp_len(cfg.herder_max_speed * dt);
        let mut p = state.herder_pos[h] + step;
        p.x = p.x.clamp(-hw, hw);
        p.y = p.y.clamp(-hw, hw);
        next.herder_pos[h] = p;
        next.herder_vel[h] = (p - state.herder_pos[h]) * (1.0 / dt);
    }

    for i in 0..N_TARGETS {
        let pos = state.target_pos[i];
        let mut away = Vec2::ZERO;
        let mut influenced = false;
        for h in 0..N_HERDERS {
            if pos.dist(state.herder_pos[h]) < cfg.repulsion_radius {
                influenced = true;
                away += (pos - state.herder_pos[h]).unit_or_zero(1e-12);
            }
        }
        let mut p = if influenced {
            let dir = away.unit_or_zero(1e-12);
            pos + dir * (cfg.target_flee_speed * dt)
        } else {
            let sx: f64 = StandardNormal.sample(rng);
            let sy: f64 = StandardNormal.sample(rng);
            let scale = cfg.target_brownian_sigma * dt.sqrt();
            pos + Vec2::new(sx * scale, sy * scale)
        };
        p.x = reflect_into(p.x, -hw, hw);
        p.y = reflect_into(p.y, -hw, hw);
        next.target_pos[i] = p;
        next.target_vel[i] = (p - pos) * (1.0 / dt);
    }
    Ok(next)
}

/// Pick the target id (0 = none) the focal herder should corral now.
///
/// Expert rule: among targets outside the containment radius that are
/// closer to the focal herder than to the co-herder, take the one furthest
/// from the center, demoting targets already moving inward; the current
/// choice is kept unless a rival's score beats it by 10%. Novice rule:
/// nearest outside target, with probability `switch_noise` replaced by a
/// uniformly random outside target. Ties break toward the lowest target
/// index.
pub fn select_target(
    policy: &PolicyKind,
    state: &WorldState,
    focal: usize,
    rng: &mut ChaCha12Rng,
) -> u8 {
    select_target_with_radius(
        policy,
        state,
        focal,
        WorldConfig::default().containment_radius,
        rng,
    )
}

/// [`select_target`] with an explicit containment radius.
pub fn select_target_with_radius(
    policy: &PolicyKind,
    state: &WorldState,
    focal: usize,
    r_star: f64,
    rng: &mut ChaCha12Rng,
) -> u8 {
    debug_assert!(focal < N_HERDERS);
    let co = 1 - focal;
    match policy.variant {
        Expertise::Expert => {
            let current = state.decisions[focal];
            let mut scores: [Option<f64>; N_TARGETS] = [None; N_TARGETS];
            for i in 0..N_TARGETS {
                let pos = state.target_pos[i];
                let center_dist = pos.norm();
                if center_dist <= r_star {
                    continue;
                }
                if pos.dist(state.herder_pos[focal]) > pos.dist(state.herder_pos[co]) {
                    continue;
                }
                let mut score = center_dist;
                if policy.direction_sensitivity && current != (i + 1) as u8 {
                    let radial_vel = if center_dist > 1e-12 {
                        state.target_vel[i].dot(pos) / center_dist
                    } else {
                        0.0
                    };
                    if radial_vel < 0.0 {
                        score *= INBOUND_DEMOTION;
                    }
                }
                scores[i] = Some(score);
            }
            let mut best: Option<(usize, f64)> = None;
            for (i, s) in scores.iter().enumerate() {
                if let Some(score) = s {
                    let better = match best {
                        None => true,
                        Some((_, bs)) => *score > bs,
                    };
                    if better {
                        best = Some((i, *score));
                    }
                }
            }
            let Some((best_i, best_score)) = best else {
                return 0;
            };
            if current != 0 {
                if let Some(current_score) = scores[current as usize - 1] {
                    if best_score <= EXPERT_HYSTERESIS * current_score {
                        return current;
                    }
                }
            }
            (best_i + 1) as u8
        }
        Expertise::Novice => {
            let outside: Vec<usize> = (0..N_TARGETS)
                .filter(|&i| state.target_pos[i].norm() > r_star)
                .collect();
            if outside.is_empty() {
                return 0;
            }
            if policy.switch_noise > 0.0 && rng.random::<f64>() < policy.switch_noise {
                let pick = outside[rng.random_range(0..outside.len())];
                return (pick + 1) as u8;
            }
            let mut best = outside[0];
            let mut best_d = state.target_pos[best].dist(state.herder_pos[focal]);
            for &i in &outside[1..] {
                let d = state.target_pos[i].dist(state.herder_pos[focal]);
                if d < best_d {
                    best = i;
                    best_d = d;
                }
            }
            (best + 1) as u8
        }
    }
}

/// Where a herder should head given its current decision.
fn steering_command(state: &WorldState, h: usize) -> Vec2 {
    match state.decisions[h] {
        0 => state.herder_pos[h],
        id => {
            let tp = state.target_pos[id as usize - 1];
            let outward = tp.unit_or_zero(1e-9);
            tp + outward * STEERING_OVERSHOOT
        }
    }
}

/// Deterministic initial placement: herders at the lower corners, targets
/// uniform over the interior of the field.
pub fn initial_state(cfg: &WorldConfig, rng: &mut ChaCha12Rng) -> WorldState {
    let hw = cfg.field_half_width;
    let mut target_pos = [Vec2::ZERO; N_TARGETS];
    for p in target_pos.iter_mut() {
        *p = Vec2::new(
            rng.random_range(-0.9 * hw..0.9 * hw),
            rng.random_range(-0.9 * hw..0.9 * hw),
        );
    }
    WorldState {
        t: 0.0,
        herder_pos: [Vec2::new(-0.6 * hw, -0.8 * hw), Vec2::new(0.6 * hw, -0.8 * hw)],
        herder_vel: [Vec2::ZERO; N_HERDERS],
        target_pos,
        target_vel: [Vec2::ZERO; N_TARGETS],
        decisions: [0; N_HERDERS],
    }
}

/// Run one trial from the standard initial placement.
///
/// Frames are recorded at `record_hz` from t = 0 until the first instant
/// all four targets are inside the containment radius (success) or until
/// `max_duration` (failure, flagged on the trial). Every frame carries both
/// herders' ground-truth decisions.
pub fn run_trial(
    cfg: &WorldConfig,
    policies: [PolicyKind; N_HERDERS],
    seed: u64,
    trial_id: impl Into<String>,
) -> Result<Trial, SimError> {
    cfg.validate()?;
    let mut init_rng = rng::stream(seed, "sim-init", 0);
    let init = initial_state(cfg, &mut init_rng);
    run_trial_from(cfg, policies, init, seed, trial_id)
}

/// Run one trial from an explicit initial state.
pub fn run_trial_from(
    cfg: &WorldConfig,
    policies: [PolicyKind; N_HERDERS],
    init: WorldState,
    seed: u64,
    trial_id: impl Into<String>,
) -> Result<Trial, SimError> {
    cfg.validate()?;
    for p in &policies {
        p.validate()?;
    }
    if !init.is_finite() {
        return Err(SimError::NonFinite);
    }
    let expertise = policies[0].variant;
    let dt = 1.0 / cfg.record_hz;
    let mut world_rng = rng::stream(seed, "sim-world", 0);
    let mut policy_rngs = [rng::stream(seed, "sim-policy", 0), rng::stream(seed, "sim-policy", 1)];
    let redecide_frames: [usize; N_HERDERS] = [
        (policies[0].redecision_period * cfg.record_hz).round().max(1.0) as usize,
        (policies[1].redecision_period * cfg.record_hz).round().max(1.0) as usize,
    ];
    let max_frames = (cfg.max_duration * cfg.record_hz).round() as usize;

    let mut state = init;
    let mut frames: Vec<Frame> = Vec::new();
    let mut success = false;
    for i in 0..=max_frames {
        state.t = i as f64 / cfg.record_hz;
        for h in 0..N_HERDERS {
            if i % redecide_frames[h] == 0 {
                state.decisions[h] = select_target_with_radius(
                    &policies[h],
                    &state,
                    h,
                    cfg.containment_radius,
                    &mut policy_rngs[h],
                );
            }
        }
        frames.push(Frame {
            t: state.t,
            herders: [
                AgentSample::with_vel(state.herder_pos[0], state.herder_vel[0]),
                AgentSample::with_vel(state.herder_pos[1], state.herder_vel[1]),
            ],
            targets: [
                AgentSample::with_vel(state.target_pos[0], state.target_vel[0]),
                AgentSample::with_vel(state.target_pos[1], state.target_vel[1]),
                AgentSample::with_vel(state.target_pos[2], state.target_vel[2]),
                AgentSample::with_vel(state.target_pos[3], state.target_vel[3]),
            ],
            labels: Some(state.decisions),
        });
        if state.all_targets_contained(cfg.containment_radius) {
            success = true;
            break;
        }
        if i == max_frames {
            break;
        }
        let commands = [steering_command(&state, 0), steering_command(&state, 1)];
        state = step_world(&state, cfg, commands, dt, &mut world_rng)?;
    }
    Ok(Trial {
        trial_id: trial_id.into(),
        expertise,
        hz: cfg.record_hz,
        success,
        frames,
    })
}

/// Run `n_trials` independent trials; trial `k` draws its randomness from
/// `(seed, k)`, so the batch is reproducible and order-independent.
pub fn run_batch(
    cfg: &WorldConfig,
    policies: [PolicyKind; N_HERDERS],
    seed: u64,
    n_trials: usize,
    id_prefix: &str,
) -> Result<Vec<Trial>, SimError> {
    cfg.validate()?;
    (0..n_trials)
        .into_par_iter()
        .map(|k| {
            let trial_seed = derive_trial_seed(seed, k as u64);
            run_trial(
                cfg,
                policies,
                trial_seed,
                format!("{id_prefix}-s{seed}-t{k:04}"),
            )
        })
        .collect()
}

fn derive_trial_seed(seed: u64, index: u64) -> u64 {
    // splitmix-style spread so per-trial streams never collide
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gathering time of a trial: time of the final frame for successes (the
/// first fully-contained instant) and of the last recorded frame otherwise.
pub fn gathering_time(trial: &Trial) -> f64 {
    trial.frames.last().map_or(0.0, |f| f.t)
}

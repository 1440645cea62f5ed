//! Behavioral analytics over recorded trials: inter-target movement times
//! and the five herding performance measures.

use crate::geom::{convex_hull_area, Vec2};
use crate::ingest::{Trial, N_HERDERS, N_TARGETS};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("trial {0} is not labeled")]
    UnlabeledTrial(String),
    #[error("trial {0} has no frames")]
    EmptyTrial(String),
}

/// Inter-target movement times of one trial, milliseconds, per herder.
///
/// Switch events whose radius crossings cannot be located are skipped and
/// counted in `skipped`.
#[derive(Clone, Debug, Default)]
pub struct InterTargetTimes {
    pub per_herder: [Vec<f64>; N_HERDERS],
    pub skipped: usize,
}

impl InterTargetTimes {
    pub fn all(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_herder.iter().flatten().copied()
    }

    pub fn mean_ms(&self) -> Option<f64> {
        let v: Vec<f64> = self.all().collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    }
}

/// Time from disengaging one target to engaging the next, for every switch
/// between nonzero target ids (switches from or to id 0 are not events;
/// an intervening run of 0 labels does not break a switch).
///
/// Engagement: first frame at or after the switch where the herder is
/// inside the new target's `repulsion_radius` with their distance
/// decreasing. Disengagement: the last crossing out of the previous
/// target's radius with distance increasing, at or before the engagement.
pub fn inter_target_times(
    trial: &Trial,
    repulsion_radius: f64,
) -> Result<InterTargetTimes, AnalysisError> {
    if !trial.is_labeled() {
        return Err(AnalysisError::UnlabeledTrial(trial.trial_id.clone()));
    }
    let n = trial.frames.len();
    let mut out = InterTargetTimes::default();
    if n < 2 {
        return Ok(out);
    }
    let hz = trial.hz;
    let dist = |k: usize, h: usize, target_id: u8| -> f64 {
        trial.frames[k].herders[h]
            .pos
            .dist(trial.frames[k].targets[target_id as usize - 1].pos)
    };
    let ddot = |k: usize, h: usize, target_id: u8| -> f64 {
        if k == 0 {
            (dist(1, h, target_id) - dist(0, h, target_id)) * hz
        } else if k == n - 1 {
            (dist(n - 1, h, target_id) - dist(n - 2, h, target_id)) * hz
        } else {
            (dist(k + 1, h, target_id) - dist(k - 1, h, target_id)) * hz / 2.0
        }
    };

    for h in 0..N_HERDERS {
        // episodes of consecutive equal nonzero labels
        let labels: Vec<u8> = trial.frames.iter().map(|f| f.labels.unwrap()[h]).collect();
        let mut episodes: Vec<(u8, usize, usize)> = Vec::new(); // (id, start, end inclusive)
        for (k, &l) in labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            match episodes.last_mut() {
                Some((id, _, end)) if *id == l && *end + 1 >= k => *end = k,
                Some((id, _, end)) if *id == l && k > *end + 1 => {
                    // same target resumed after a gap of zeros: same episode
                    // for switch purposes
                    *end = k;
                }
                _ => episodes.push((l, k, k)),
            }
        }
        for w in episodes.windows(2) {
            let (prev_id, _, prev_end) = w[0];
            let (next_id, next_start, _) = w[1];
            if prev_id == next_id {
                continue;
            }
            // engagement: first closing crossing into the new target's
            // radius at or after the label switch
            let mut enter: Option<usize> = None;
            for k in next_start..n {
                if dist(k, h, next_id) < repulsion_radius && ddot(k, h, next_id) < 0.0 {
                    enter = Some(k);
                    break;
                }
            }
            let Some(enter) = enter else {
                out.skipped += 1;
                continue;
            };
            // disengagement: last receding crossing out of the previous
            // target's radius at or before the engagement
            let mut leave: Option<usize> = None;
            for k in (prev_end.max(1)..=enter).rev() {
                if dist(k, h, prev_id) >= repulsion_radius
                    && dist(k - 1, h, prev_id) < repulsion_radius
                    && ddot(k, h, prev_id) > 0.0
                {
                    leave = Some(k);
                    break;
                }
            }
            let Some(leave) = leave else {
                out.skipped += 1;
                continue;
            };
            let duration_ms = (trial.frames[enter].t - trial.frames[leave].t) * 1000.0;
            out.per_herder[h].push(duration_ms);
        }
    }
    Ok(out)
}

/// The five herding performance measures of one trial.
#[derive(Clone, Copy, Debug)]
pub struct HerdingMeasures {
    /// Gathering time: first instant all targets are inside the
    /// containment radius; the trial end for failures. Seconds.
    pub gathering_time: f64,
    /// Mean herder path length over `[0, t_g]`, meters.
    pub herder_distance: f64,
    /// Time-mean of the mean target distance from the center, meters.
    pub herd_distance: f64,
    /// Time-mean convex-hull area of the targets, square meters.
    pub herd_spread: f64,
    /// `herd_spread` relative to the containment area, percent.
    pub herd_spread_pct: f64,
    /// Time-mean percentage of targets inside the containment radius.
    pub containment_rate_pct: f64,
}

pub fn herding_measures(trial: &Trial, r_star: f64) -> Result<HerdingMeasures, AnalysisError> {
    let n = trial.frames.len();
    if n == 0 {
        return Err(AnalysisError::EmptyTrial(trial.trial_id.clone()));
    }
    let contained =
        |k: usize| -> usize { trial.frames[k].targets.iter().filter(|a| a.pos.norm() <= r_star).count() };
    let mut g_idx = n - 1;
    for k in 0..n {
        if contained(k) == N_TARGETS {
            g_idx = k;
            break;
        }
    }
    let gathering_time = trial.frames[g_idx].t - trial.frames[0].t;

    let mut herder_distance = 0.0;
    for h in 0..N_HERDERS {
        let mut path = 0.0;
        for k in 1..=g_idx {
            path += trial.frames[k].herders[h]
                .pos
                .dist(trial.frames[k - 1].herders[h].pos);
        }
        herder_distance += path / N_HERDERS as f64;
    }

    let frames = (g_idx + 1) as f64;
    let mut herd_distance = 0.0;
    let mut herd_spread = 0.0;
    let mut containment_rate_pct = 0.0;
    for k in 0..=g_idx {
        let mean_dist: f64 = trial.frames[k]
            .targets
            .iter()
            .map(|a| a.pos.norm())
            .sum::<f64>()
            / N_TARGETS as f64;
        herd_distance += mean_dist / frames;
        let pts: Vec<Vec2> = trial.frames[k].targets.iter().map(|a| a.pos).collect();
        herd_spread += convex_hull_area(&pts) / frames;
        containment_rate_pct += 100.0 * contained(k) as f64 / N_TARGETS as f64 / frames;
    }
    let containment_area = std::f64::consts::PI * r_star * r_star;
    Ok(HerdingMeasures {
        gathering_time,
        herder_distance,
        herd_distance,
        herd_spread,
        herd_spread_pct: herd_spread / containment_area * 100.0,
        containment_rate_pct,
    })
}

/// Histogram of movement times with fixed-width bins starting at 0.
pub fn movement_time_histogram(times_ms: &[f64], bin_ms: f64) -> Vec<(f64, f64, usize)> {
    if times_ms.is_empty() {
        return Vec::new();
    }
    let max = times_ms.iter().cloned().fold(0.0f64, f64::max);
    let n_bins = (max / bin_ms).floor() as usize + 1;
    let mut bins = vec![0usize; n_bins];
    for &t in times_ms {
        let idx = ((t / bin_ms).floor() as usize).min(n_bins - 1);
        bins[idx] += 1;
    }
    bins.into_iter()
        .enumerate()
        .map(|(i, count)| (i as f64 * bin_ms, (i + 1) as f64 * bin_ms, count))
        .collect()
}

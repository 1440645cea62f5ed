//! Shapley-value attribution over the feature channels of a trained
//! classifier, global per-class importance rankings, and Kendall rank
//! agreement.
//!
//! A "feature" here is a whole channel across all timesteps of the window:
//! masking a channel replaces its entire column with the column from a
//! background sample. The value of a coalition is the model's
//! final-timestep probability for the class of interest, averaged over the
//! background set.
//!
//! Exact enumeration is exponential in the number of groups and is meant
//! for grouped channels and tests; the permutation-sampling estimator with
//! antithetic pairs is the production path.

use crate::dataset::Sample;
use crate::nn::{forward_batch, DropoutPlan, LstmModel, NnError};
use crate::rng;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use thiserror::Error;

pub const MAX_EXACT_GROUPS: usize = 15;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("background set is empty")]
    EmptyBackground,
    #[error("{got} groups exceed the exact-enumeration limit of {max}; use sampling mode")]
    TooManyGroups { got: usize, max: usize },
    #[error("groups must partition the channel indices: {0}")]
    NotAPartition(String),
    #[error("rank comparison needs at least 2 items, got {0}")]
    TooFewItems(usize),
    #[error("rank vectors differ in length: {a} vs {b}")]
    RankLengthMismatch { a: usize, b: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Masked evaluation state: hybrids of the explained sample and each
/// background sample, kept in the model's standardized space.
struct HybridSet {
    hybrids: Vec<Array2<f64>>,
    x: Array2<f64>,
    backgrounds: Vec<Array2<f64>>,
}

impl HybridSet {
    fn new(model: &LstmModel, x: &Array2<f64>, background: &[Array2<f64>]) -> HybridSet {
        let mut x = x.clone();
        model.standardize_matrix(&mut x);
        let backgrounds: Vec<Array2<f64>> = background
            .iter()
            .map(|b| {
                let mut b = b.clone();
                model.standardize_matrix(&mut b);
                b
            })
            .collect();
        HybridSet {
            hybrids: backgrounds.clone(),
            x,
            backgrounds,
        }
    }

    fn set_channels(&mut self, mask: &[bool]) {
        for (h, b) in self.hybrids.iter_mut().zip(&self.backgrounds) {
            for (ch, &keep) in mask.iter().enumerate() {
                if keep {
                    h.column_mut(ch).assign(&self.x.column(ch));
                } else {
                    h.column_mut(ch).assign(&b.column(ch));
                }
            }
        }
    }

    fn include_channel(&mut self, ch: usize) {
        for h in self.hybrids.iter_mut() {
            h.column_mut(ch).assign(&self.x.column(ch));
        }
    }

    fn reset_to_background(&mut self) {
        for (h, b) in self.hybrids.iter_mut().zip(&self.backgrounds) {
            h.assign(b);
        }
    }

    /// Mean final-timestep probabilities over the background set.
    fn values(&self, model: &LstmModel) -> Result<Array1<f64>, NnError> {
        let xs = crate::nn::stack_timesteps_matrices(&self.hybrids, model.input_size())?;
        let (probs, _) = forward_batch(model, &xs, &DropoutPlan::inference(), false)?;
        let last = probs.last().expect("nonempty sequence");
        let n = last.nrows() as f64;
        let mut mean = Array1::zeros(model.n_classes());
        for row in last.rows() {
            for (c, &p) in row.iter().enumerate() {
                mean[c] += p / n;
            }
        }
        Ok(mean)
    }
}

/// Expected class-`k` output with the channels in `coalition` taken from
/// `x` (across all timesteps) and every other channel replaced per
/// background sample.
pub fn value_function(
    model: &LstmModel,
    x: &Array2<f64>,
    coalition: &[usize],
    background: &[Array2<f64>],
    class_k: usize,
) -> Result<f64, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let n_ch = x.ncols();
    let mut mask = vec![false; n_ch];
    for &ch in coalition {
        mask[ch] = true;
    }
    let mut set = HybridSet::new(model, x, background);
    set.set_channels(&mask);
    Ok(set.values(model)?[class_k])
}

fn factorials(n: usize) -> Vec<f64> {
    let mut f = vec![1.0f64; n + 1];
    for k in 1..=n {
        f[k] = f[k - 1] * k as f64;
    }
    f
}

/// Exact Shapley values over an arbitrary coalition value function of `d`
/// players. `value` receives a membership bitmask.
pub fn shapley_exact_values(
    d: usize,
    mut value: impl FnMut(u32) -> f64,
) -> Result<Vec<f64>, ExplainError> {
    if d > MAX_EXACT_GROUPS {
        return Err(ExplainError::TooManyGroups {
            got: d,
            max: MAX_EXACT_GROUPS,
        });
    }
    let n_masks = 1usize << d;
    let mut v = vec![0.0f64; n_masks];
    for (mask, slot) in v.iter_mut().enumerate() {
        *slot = value(mask as u32);
    }
    let fact = factorials(d);
    let d_fact = fact[d];
    let mut phi = vec![0.0f64; d];
    for (g, phi_g) in phi.iter_mut().enumerate() {
        let bit = 1usize << g;
        for mask in 0..n_masks {
            if mask & bit != 0 {
                continue;
            }
            let s = (mask as u32).count_ones() as usize;
            let weight = fact[s] * fact[d - s - 1] / d_fact;
            *phi_g += weight * (v[mask | bit] - v[mask]);
        }
    }
    Ok(phi)
}

fn validate_partition(groups: &[Vec<usize>], n_channels: usize) -> Result<(), ExplainError> {
    let mut seen = vec![false; n_channels];
    for (gi, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(ExplainError::NotAPartition(format!("group {gi} is empty")));
        }
        for &ch in group {
            if ch >= n_channels {
                return Err(ExplainError::NotAPartition(format!(
                    "channel {ch} out of range 0..{n_channels}"
                )));
            }
            if seen[ch] {
                return Err(ExplainError::NotAPartition(format!(
                    "channel {ch} appears twice"
                )));
            }
            seen[ch] = true;
        }
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(ExplainError::NotAPartition(format!(
            "channel {missing} not covered"
        )));
    }
    Ok(())
}

/// Exact Shapley attribution of class-`k` output over channel groups.
///
/// `groups` must partition the model's input channels; enumeration is over
/// all `2^|groups|` coalitions, so at most [`MAX_EXACT_GROUPS`] groups are
/// accepted.
pub fn shapley_exact(
    model: &LstmModel,
    x: &Array2<f64>,
    background: &[Array2<f64>],
    class_k: usize,
    groups: &[Vec<usize>],
) -> Result<Vec<f64>, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    if groups.len() > MAX_EXACT_GROUPS {
        return Err(ExplainError::TooManyGroups {
            got: groups.len(),
            max: MAX_EXACT_GROUPS,
        });
    }
    validate_partition(groups, x.ncols())?;
    let mut set = HybridSet::new(model, x, background);
    let n_ch = x.ncols();
    let mut err: Option<NnError> = None;
    let phi = shapley_exact_values(groups.len(), |mask| {
        let mut ch_mask = vec![false; n_ch];
        for (gi, group) in groups.iter().enumerate() {
            if mask & (1 << gi) != 0 {
                for &ch in group {
                    ch_mask[ch] = true;
                }
            }
        }
        set.set_channels(&ch_mask);
        match set.values(model) {
            Ok(v) => v[class_k],
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        }
    })?;
    if let Some(e) = err {
        return Err(ExplainError::Nn(e));
    }
    Ok(phi)
}

/// Per-channel mean and standard error of permutation-sampled Shapley
/// values for every class: rows are classes, columns channels.
pub fn shapley_sample_all(
    model: &LstmModel,
    x: &Array2<f64>,
    background: &[Array2<f64>],
    n_perm: usize,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>), ExplainError> {
    assert!(n_perm >= 2, "permutation sampling needs n_perm >= 2");
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let n_ch = x.ncols();
    let n_classes = model.n_classes();
    let mut set = HybridSet::new(model, x, background);
    let mut sum = Array2::<f64>::zeros((n_classes, n_ch));
    let mut sum_sq = Array2::<f64>::zeros((n_classes, n_ch));
    let mut order: Vec<usize> = (0..n_ch).collect();
    let walk = |set: &mut HybridSet, order: &[usize],
                    sum: &mut Array2<f64>,
                    sum_sq: &mut Array2<f64>|
     -> Result<(), ExplainError> {
        set.reset_to_background();
        let mut prev = set.values(model)?;
        for &ch in order {
            set.include_channel(ch);
            let cur = set.values(model)?;
            for c in 0..n_classes {
                let marginal = cur[c] - prev[c];
                sum[[c, ch]] += marginal;
                sum_sq[[c, ch]] += marginal * marginal;
            }
            prev = cur;
        }
        Ok(())
    };
    let mut done = 0usize;
    let mut pair_idx = 0u64;
    while done < n_perm {
        let mut perm_rng = rng::stream(seed, "shap-perm", pair_idx);
        order.shuffle(&mut perm_rng);
        walk(&mut set, &order, &mut sum, &mut sum_sq)?;
        done += 1;
        if done < n_perm {
            // antithetic partner: the reversed permutation
            order.reverse();
            walk(&mut set, &order, &mut sum, &mut sum_sq)?;
            done += 1;
        }
        pair_idx += 1;
    }
    let n = n_perm as f64;
    let mean = sum.mapv(|s| s / n);
    let mut stderr = Array2::<f64>::zeros((n_classes, n_ch));
    for c in 0..n_classes {
        for ch in 0..n_ch {
            let var = (sum_sq[[c, ch]] - sum[[c, ch]] * sum[[c, ch]] / n) / (n - 1.0);
            stderr[[c, ch]] = (var.max(0.0) / n).sqrt();
        }
    }
    Ok((mean, stderr))
}

/// Permutation-sampled Shapley values with standard errors for one class.
pub fn shapley_sample(
    model: &LstmModel,
    x: &Array2<f64>,
    background: &[Array2<f64>],
    class_k: usize,
    n_perm: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>), ExplainError> {
    let (mean, stderr) = shapley_sample_all(model, x, background, n_perm, seed)?;
    Ok((mean.row(class_k).to_vec(), stderr.row(class_k).to_vec()))
}

/// Global importance of each channel for one class: mean absolute
/// attribution over explained samples, plus the signed mean and the
/// descending ranking (ties toward the lower channel index).
#[derive(Clone, Debug)]
pub struct GlobalImportance {
    pub mean_abs: Vec<f64>,
    pub mean_signed: Vec<f64>,
    /// Channel indices in descending importance order.
    pub ranking: Vec<usize>,
}

pub fn global_ranking(values: &[Array2<f64>], class_k: usize) -> GlobalImportance {
    assert!(!values.is_empty(), "need at least one explained sample");
    let n_ch = values[0].ncols();
    let n = values.len() as f64;
    let mut mean_abs = vec![0.0f64; n_ch];
    let mut mean_signed = vec![0.0f64; n_ch];
    for v in values {
        for ch in 0..n_ch {
            mean_abs[ch] += v[[class_k, ch]].abs() / n;
            mean_signed[ch] += v[[class_k, ch]] / n;
        }
    }
    let mut ranking: Vec<usize> = (0..n_ch).collect();
    ranking.sort_by(|&a, &b| {
        mean_abs[b]
            .partial_cmp(&mean_abs[a])
            .expect("finite importances")
            .then(a.cmp(&b))
    });
    GlobalImportance {
        mean_abs,
        mean_signed,
        ranking,
    }
}

/// Rank positions (0 = most important) per channel for a ranking in
/// descending-importance order.
pub fn ranking_to_ranks(ranking: &[usize]) -> Vec<f64> {
    let mut ranks = vec![0.0; ranking.len()];
    for (pos, &ch) in ranking.iter().enumerate() {
        ranks[ch] = pos as f64;
    }
    ranks
}

/// Attribution report for a batch of explained samples.
#[derive(Clone, Debug)]
pub struct ShapReport {
    pub sample_ids: Vec<String>,
    pub labels: Vec<u8>,
    /// Per explained sample: `(n_classes, n_channels)` attribution values.
    pub values: Vec<Array2<f64>>,
    pub stderr: Vec<Array2<f64>>,
    pub background_id: String,
    pub n_perm: usize,
    /// Per class global importance.
    pub global: Vec<GlobalImportance>,
}

/// Explain a batch of samples with permutation sampling; parallel over
/// samples with per-sample derived seeds, so the result is independent of
/// thread count.
pub fn explain_samples(
    model: &LstmModel,
    samples: &[Sample],
    background: &[Sample],
    n_perm: usize,
    seed: u64,
    background_id: impl Into<String>,
) -> Result<ShapReport, ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    let bg_mats: Vec<Array2<f64>> = background.iter().map(|s| s.features.clone()).collect();
    let results: Result<Vec<(Array2<f64>, Array2<f64>)>, ExplainError> = samples
        .par_iter()
        .enumerate()
        .map(|(idx, s)| {
            shapley_sample_all(
                model,
                &s.features,
                &bg_mats,
                n_perm,
                rng::derive_seed(seed, "shap-sample", idx as u64),
            )
        })
        .collect();
    let results = results?;
    let values: Vec<Array2<f64>> = results.iter().map(|(m, _)| m.clone()).collect();
    let stderr: Vec<Array2<f64>> = results.into_iter().map(|(_, e)| e).collect();
    let global = (0..model.n_classes())
        .map(|k| global_ranking(&values, k))
        .collect();
    Ok(ShapReport {
        sample_ids: samples
            .iter()
            .map(|s| format!("{}:{}:{}", s.trial_id, s.focal, s.t_f))
            .collect(),
        labels: samples.iter().map(|s| s.label).collect(),
        values,
        stderr,
        background_id: background_id.into(),
        n_perm,
        global,
    })
}

/// How much of two rankings to compare.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankDepth {
    All,
    /// Restrict to items inside either list's top-k; items keep their
    /// full-list rank as score.
    Top(usize),
}

impl std::fmt::Display for RankDepth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RankDepth::All => write!(f, "all"),
            RankDepth::Top(k) => write!(f, "top-{k}"),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RankComparison {
    /// Kendall tau-b with tie correction.
    pub tau: f64,
    /// Two-sided p against tau = 0, normal approximation with tie-adjusted
    /// variance.
    pub p_value: f64,
    pub depth: RankDepth,
    pub n_items: usize,
}

fn tie_terms(values: &[f64]) -> (f64, f64, f64, f64) {
    // returns (sum t(t-1)/2, sum t(t-1)(2t+5), sum t(t-1), sum t(t-1)(t-2))
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut pairs = 0.0;
    let mut vt = 0.0;
    let mut v1 = 0.0;
    let mut v2 = 0.0;
    let mut run = 1usize;
    for i in 1..=sorted.len() {
        if i < sorted.len() && sorted[i] == sorted[i - 1] {
            run += 1;
        } else {
            let t = run as f64;
            pairs += t * (t - 1.0) / 2.0;
            vt += t * (t - 1.0) * (2.0 * t + 5.0);
            v1 += t * (t - 1.0);
            v2 += t * (t - 1.0) * (t - 2.0);
            run = 1;
        }
    }
    (pairs, vt, v1, v2)
}

/// Kendall tau-b between two rank vectors (`rank[i]` is item `i`'s rank;
/// lower means more important), with tie correction and a two-sided
/// p-value from the normal approximation. `depth` restricts the item set
/// to the union of both lists' top-k while keeping full-list ranks as the
/// scores.
///
/// A fully tied list makes tau-b undefined; this returns tau 0 with p 1.
pub fn kendall_tau(
    rank_a: &[f64],
    rank_b: &[f64],
    depth: RankDepth,
) -> Result<RankComparison, ExplainError> {
    if rank_a.len() != rank_b.len() {
        return Err(ExplainError::RankLengthMismatch {
            a: rank_a.len(),
            b: rank_b.len(),
        });
    }
    let (a, b): (Vec<f64>, Vec<f64>) = match depth {
        RankDepth::All => (rank_a.to_vec(), rank_b.to_vec()),
        RankDepth::Top(k) => {
            let k = k as f64;
            let mut a = Vec::new();
            let mut b = Vec::new();
            for i in 0..rank_a.len() {
                if rank_a[i] < k || rank_b[i] < k {
                    a.push(rank_a[i]);
                    b.push(rank_b[i]);
                }
            }
            (a, b)
        }
    };
    let n = a.len();
    if n < 2 {
        return Err(ExplainError::TooFewItems(n));
    }
    let mut concordant = 0.0f64;
    let mut discordant = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            let dx = a[i] - a[j];
            let dy = b[i] - b[j];
            let prod = dx * dy;
            if prod > 0.0 {
                concordant += 1.0;
            } else if prod < 0.0 {
                discordant += 1.0;
            }
        }
    }
    let nf = n as f64;
    let n0 = nf * (nf - 1.0) / 2.0;
    let (n1, vt, v1x, v2x) = tie_terms(&a);
    let (n2, vu, v1y, v2y) = tie_terms(&b);
    let denom = ((n0 - n1) * (n0 - n2)).sqrt();
    let s = concordant - discordant;
    let (tau, p_value) = if denom == 0.0 {
        (0.0, 1.0)
    } else {
        let tau = (s / denom).clamp(-1.0, 1.0);
        let v0 = nf * (nf - 1.0) * (2.0 * nf + 5.0);
        let mut var_s = (v0 - vt - vu) / 18.0 + (v1x * v1y) / (2.0 * nf * (nf - 1.0));
        if n > 2 {
            var_s += (v2x * v2y) / (9.0 * nf * (nf - 1.0) * (nf - 2.0));
        }
        let p = if var_s > 0.0 {
            let z = s / var_s.sqrt();
            libm::erfc(z.abs() / std::f64::consts::SQRT_2)
        } else {
            1.0
        };
        (tau, p.clamp(0.0, 1.0))
    };
    Ok(RankComparison {
        tau,
        p_value,
        depth,
        n_items: n,
    })
}

//! Windowed sample construction, sub-class tagging, balanced/representative
//! splits, and standardization.
//!
//! A sample is a 25-row window of state vectors for one focal herder,
//! strided over the trial's native frames, labeled with the herder's target
//! code `horizon * stride` frames past the window end. Windows are tagged
//! by whether the label changes inside the window (transitioning) and
//! whether the horizon label differs from the label at the window end
//! (switching); the four combinations are the sub-classes used for
//! balancing.

use crate::dataset::Subclass::*;
use crate::features::{FeatureExtractor, N_FEATURES};
use crate::ingest::Trial;
use crate::rng;
use ndarray::Array2;
use rand::seq::SliceRandom;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

/// Rows per sample window.
pub const N_SEQ: usize = 25;

pub const STRIDES: [u8; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Subclass {
    /// Single label throughout the window, unchanged at the horizon.
    NonTransitioningNonSwitching,
    /// Single label throughout the window, different at the horizon.
    NonTransitioningSwitching,
    /// Label changes inside the window, horizon equals the window end.
    TransitioningNonSwitching,
    /// Label changes inside the window and again at the horizon.
    TransitioningSwitching,
}

pub const SUBCLASSES: [Subclass; 4] = [
    NonTransitioningNonSwitching,
    NonTransitioningSwitching,
    TransitioningNonSwitching,
    TransitioningSwitching,
];

impl Subclass {
    pub fn short_name(self) -> &'static str {
        match self {
            NonTransitioningNonSwitching => "NT-NS",
            NonTransitioningSwitching => "NT-S",
            TransitioningNonSwitching => "T-NS",
            TransitioningSwitching => "T-S",
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            NonTransitioningNonSwitching => 0,
            NonTransitioningSwitching => 1,
            TransitioningNonSwitching => 2,
            TransitioningSwitching => 3,
        }
    }

    pub fn from_u8(v: u8) -> Option<Subclass> {
        SUBCLASSES.get(v as usize).copied()
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    /// `N_SEQ x N_FEATURES` feature window.
    pub features: Array2<f64>,
    /// Target code at the horizon, 0..=4.
    pub label: u8,
    pub subclass: Subclass,
    /// Horizon in strided steps past the window end.
    pub horizon: u16,
    /// Frames per window step.
    pub stride: u8,
    pub trial_id: Arc<str>,
    pub focal: u8,
    /// Frame index of the window end within its trial.
    pub t_f: u32,
}

impl Sample {
    /// Identity used for split disjointness.
    pub fn key(&self) -> (Arc<str>, u8, u32) {
        (self.trial_id.clone(), self.focal, self.t_f)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Balance {
    /// Equal counts of each sub-class (25% each).
    Balanced,
    /// Pool proportions preserved.
    Representative,
}

#[derive(Clone, Debug)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub n_test_sets: usize,
    pub balance: Balance,
    pub validation_fraction: f64,
    pub standardize: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train: 21000,
            n_test: 2000,
            n_test_sets: 20,
            balance: Balance::Balanced,
            validation_fraction: 0.10,
            standardize: true,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.n_train == 0 || self.n_test == 0 {
            return Err(DatasetError::InvalidConfig(
                "n_train and n_test must be positive".into(),
            ));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(DatasetError::InvalidConfig(
                "validation fraction must be in (0, 1)".into(),
            ));
        }
        if self.balance == Balance::Balanced
            && (!self.n_train.is_multiple_of(SUBCLASSES.len()) || !self.n_test.is_multiple_of(SUBCLASSES.len()))
        {
            return Err(DatasetError::InvalidConfig(
                "balanced set sizes must be divisible by 4".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("trial {0} is not labeled")]
    UnlabeledTrial(String),
    #[error("stride must be one of 1, 2, 4; got {0}")]
    BadStride(u8),
    #[error("invalid split config: {0}")]
    InvalidConfig(String),
    #[error("balanced draw short: {0}")]
    BalancedShortfall(String),
    #[error("pool has {available} samples, {needed} requested")]
    PoolTooSmall { needed: usize, available: usize },
    #[error(transparent)]
    Feature(#[from] crate::features::FeatureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a sample file (bad magic)")]
    BadMagic,
    #[error("unsupported sample file version {0}")]
    UnsupportedVersion(u32),
    #[error("sample file truncated")]
    Truncated,
    #[error("sample file corrupt: {0}")]
    Corrupt(String),
    #[error("samples in one file must share horizon, stride, and shape")]
    Inhomogeneous,
}

/// Sub-class of a window given its labels and the label at the horizon.
pub fn tag_subclass(window_labels: &[u8], horizon_label: u8) -> Subclass {
    let first = window_labels[0];
    let transitioning = window_labels.iter().any(|&l| l != first);
    let switching = horizon_label != *window_labels.last().expect("nonempty window");
    match (transitioning, switching) {
        (false, false) => NonTransitioningNonSwitching,
        (false, true) => NonTransitioningSwitching,
        (true, false) => TransitioningNonSwitching,
        (true, true) => TransitioningSwitching,
    }
}

fn check_stride(stride: u8) -> Result<(), DatasetError> {
    if STRIDES.contains(&stride) {
        Ok(())
    } else {
        Err(DatasetError::BadStride(stride))
    }
}

/// Window ends valid for a trial of `n_frames`: the window stencil and the
/// horizon must both stay inside the trial.
fn valid_t_f_range(n_frames: usize, stride: usize, horizon: usize) -> std::ops::Range<usize> {
    let span = (N_SEQ - 1) * stride;
    if n_frames == 0 {
        return 0..0;
    }
    let last = (n_frames - 1).saturating_sub(horizon * stride);
    if last < span {
        0..0
    } else {
        span..last + 1
    }
}

/// All samples of one labeled trial for one focal herder.
pub fn window_trial(
    trial: &Trial,
    focal: usize,
    stride: u8,
    horizon: u16,
) -> Result<Vec<Sample>, DatasetError> {
    check_stride(stride)?;
    if !trial.is_labeled() {
        return Err(DatasetError::UnlabeledTrial(trial.trial_id.clone()));
    }
    let range = valid_t_f_range(trial.n_frames(), stride as usize, horizon as usize);
    if range.is_empty() {
        return Ok(Vec::new());
    }
    let extractor = FeatureExtractor::new(trial)?;
    let trial_id: Arc<str> = Arc::from(trial.trial_id.as_str());
    let mut samples = Vec::with_capacity(range.len());
    for t_f in range {
        samples.push(materialize_window(
            trial, &extractor, &trial_id, focal, stride, horizon, t_f,
        )?);
    }
    Ok(samples)
}

fn window_frames(t_f: usize, stride: usize) -> impl Iterator<Item = usize> {
    (0..N_SEQ).map(move |j| t_f - (N_SEQ - 1 - j) * stride)
}

fn materialize_window(
    trial: &Trial,
    extractor: &FeatureExtractor,
    trial_id: &Arc<str>,
    focal: usize,
    stride: u8,
    horizon: u16,
    t_f: usize,
) -> Result<Sample, DatasetError> {
    let s = stride as usize;
    let mut features = Array2::zeros((N_SEQ, N_FEATURES));
    let mut window_labels = [0u8; N_SEQ];
    for (j, frame) in window_frames(t_f, s).enumerate() {
        let v = extractor.state_vector(frame, focal)?;
        features.row_mut(j).assign(&ndarray::ArrayView1::from(&v[..]));
        window_labels[j] = trial.label(frame, focal);
    }
    let label = trial.label(t_f + horizon as usize * s, focal);
    Ok(Sample {
        features,
        label,
        subclass: tag_subclass(&window_labels, label),
        horizon,
        stride,
        trial_id: trial_id.clone(),
        focal: focal as u8,
        t_f: t_f as u32,
    })
}

/// Split output. When `standardize` was requested, the contained sets are
/// already standardized with the returned train statistics.
#[derive(Clone, Debug)]
pub struct SplitResult {
    pub train: Vec<Sample>,
    pub validation: Vec<Sample>,
    pub test_sets: Vec<Vec<Sample>>,
    pub standardization: Option<Standardization>,
}

/// Per-feature affine standardization, fitted on training data only.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population mean/std per feature over every row of every sample.
    /// Near-constant features (std below 1e-12) are left untouched by
    /// the transform.
    pub fn fit(samples: &[Sample]) -> Standardization {
        let mut mean = vec![0.0f64; N_FEATURES];
        let mut count = 0usize;
        for s in samples {
            for row in s.features.rows() {
                for (j, &x) in row.iter().enumerate() {
                    mean[j] += x;
                }
                count += 1;
            }
        }
        let n = count.max(1) as f64;
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0f64; N_FEATURES];
        for s in samples {
            for row in s.features.rows() {
                for (j, &x) in row.iter().enumerate() {
                    let d = x - mean[j];
                    var[j] += d * d;
                }
            }
        }
        let mut std = vec![0.0f64; N_FEATURES];
        for j in 0..N_FEATURES {
            let sd = (var[j] / n).sqrt();
            if sd < 1e-12 {
                mean[j] = 0.0;
                std[j] = 1.0;
            } else {
                std[j] = sd;
            }
        }
        Standardization { mean, std }
    }

    pub fn apply_matrix(&self, features: &mut Array2<f64>) {
        for mut row in features.rows_mut() {
            for (j, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[j]) / self.std[j];
            }
        }
    }

    pub fn apply(&self, samples: &mut [Sample]) {
        for s in samples.iter_mut() {
            self.apply_matrix(&mut s.features);
        }
    }
}

/// Indices drawn for train and test sets, before validation extraction.
struct Selection {
    train: Vec<usize>,
    tests: Vec<Vec<usize>>,
}

fn select_indices(
    subclasses: &[Subclass],
    cfg: &SplitConfig,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Selection, DatasetError> {
    match cfg.balance {
        Balance::Balanced => {
            let train_quota = cfg.n_train / SUBCLASSES.len();
            let test_quota = cfg.n_test / SUBCLASSES.len();
            let needed_per_class = train_quota + cfg.n_test_sets * test_quota;
            let mut groups: Vec<Vec<usize>> = vec![Vec::new(); SUBCLASSES.len()];
            for (i, sc) in subclasses.iter().enumerate() {
                groups[sc.as_u8() as usize].push(i);
            }
            let shortfalls: Vec<String> = SUBCLASSES
                .iter()
                .filter(|sc| groups[sc.as_u8() as usize].len() < needed_per_class)
                .map(|sc| {
                    let available = groups[sc.as_u8() as usize].len();
                    format!(
                        "subclass {} short by {} (need {needed_per_class}, have {available})",
                        sc.short_name(),
                        needed_per_class - available
                    )
                })
                .collect();
            if !shortfalls.is_empty() {
                return Err(DatasetError::BalancedShortfall(shortfalls.join("; ")));
            }
            for g in groups.iter_mut() {
                g.shuffle(rng);
            }
            let mut train = Vec::with_capacity(cfg.n_train);
            for g in groups.iter() {
                train.extend_from_slice(&g[..train_quota]);
            }
            let mut tests = Vec::with_capacity(cfg.n_test_sets);
            for set in 0..cfg.n_test_sets {
                let mut t = Vec::with_capacity(cfg.n_test);
                for g in groups.iter() {
                    let lo = train_quota + set * test_quota;
                    t.extend_from_slice(&g[lo..lo + test_quota]);
                }
                tests.push(t);
            }
            Ok(Selection { train, tests })
        }
        Balance::Representative => {
            let needed = cfg.n_train + cfg.n_test_sets * cfg.n_test;
            if subclasses.len() < needed {
                return Err(DatasetError::PoolTooSmall {
                    needed,
                    available: subclasses.len(),
                });
            }
            let mut order: Vec<usize> = (0..subclasses.len()).collect();
            order.shuffle(rng);
            let train = order[..cfg.n_train].to_vec();
            let tests = (0..cfg.n_test_sets)
                .map(|set| {
                    let lo = cfg.n_train + set * cfg.n_test;
                    order[lo..lo + cfg.n_test].to_vec()
                })
                .collect();
            Ok(Selection { train, tests })
        }
    }
}

/// Extract a random `fraction` of `train` as the validation set.
fn split_validation(
    mut train: Vec<Sample>,
    fraction: f64,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> (Vec<Sample>, Vec<Sample>) {
    let n_val = ((train.len() as f64) * fraction).round() as usize;
    let n_val = n_val.min(train.len().saturating_sub(1)).max(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(rng);
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let mut validation = Vec::with_capacity(n_val);
    let mut remaining = Vec::with_capacity(train.len() - n_val);
    for (i, s) in train.drain(..).enumerate() {
        if val_set.contains(&i) {
            validation.push(s);
        } else {
            remaining.push(s);
        }
    }
    (remaining, validation)
}

fn finish_split(
    train_full: Vec<Sample>,
    mut test_sets: Vec<Vec<Sample>>,
    cfg: &SplitConfig,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> SplitResult {
    let (mut train, mut validation) = split_validation(train_full, cfg.validation_fraction, rng);
    let standardization = if cfg.standardize {
        let stats = Standardization::fit(&train);
        stats.apply(&mut train);
        stats.apply(&mut validation);
        for t in test_sets.iter_mut() {
            stats.apply(t);
        }
        Some(stats)
    } else {
        None
    };
    SplitResult {
        train,
        validation,
        test_sets,
        standardization,
    }
}

/// Draw train / validation / test sets from a materialized pool.
///
/// Balanced mode draws equal counts per sub-class without replacement and
/// errors with the per-class shortfall when a sub-class cannot cover its
/// quota. Representative mode preserves pool proportions. The validation
/// set is a random `validation_fraction` of the drawn training samples.
/// Everything is deterministic given `cfg.seed`.
pub fn assemble_split(pool: Vec<Sample>, cfg: &SplitConfig) -> Result<SplitResult, DatasetError> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, "dataset-split", 0);
    let subclasses: Vec<Subclass> = pool.iter().map(|s| s.subclass).collect();
    let selection = select_indices(&subclasses, cfg, &mut rng)?;
    let mut pool: Vec<Option<Sample>> = pool.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<Sample> {
        idx.iter()
            .map(|&i| pool[i].take().expect("selection indices are disjoint"))
            .collect()
    };
    let train_full = take(&selection.train);
    let test_sets: Vec<Vec<Sample>> = selection.tests.iter().map(|t| take(t)).collect();
    Ok(finish_split(train_full, test_sets, cfg, &mut rng))
}

/// Assemble a split directly from labeled trials, materializing features
/// only for the selected windows. Failure trials and trials too short for
/// the stencil are skipped. Selection and determinism are identical to
/// [`assemble_split`] over the fully materialized pool of the same trials.
pub fn assemble_from_trials(
    trials: &[Trial],
    stride: u8,
    horizon: u16,
    cfg: &SplitConfig,
) -> Result<SplitResult, DatasetError> {
    check_stride(stride)?;
    cfg.validate()?;
    let s = stride as usize;
    // (trial index, focal, t_f, subclass) per candidate window
    let mut tags: Vec<(u32, u8, u32, Subclass)> = Vec::new();
    for (trial_idx, trial) in trials.iter().enumerate() {
        if !trial.success {
            continue;
        }
        if !trial.is_labeled() {
            return Err(DatasetError::UnlabeledTrial(trial.trial_id.clone()));
        }
        let range = valid_t_f_range(trial.n_frames(), s, horizon as usize);
        for focal in 0..2u8 {
            let labels: Vec<u8> = trial
                .frames
                .iter()
                .map(|f| f.labels.expect("labeled")[focal as usize])
                .collect();
            for t_f in range.clone() {
                let mut window_labels = [0u8; N_SEQ];
                for (j, frame) in window_frames(t_f, s).enumerate() {
                    window_labels[j] = labels[frame];
                }
                let horizon_label = labels[t_f + horizon as usize * s];
                tags.push((
                    trial_idx as u32,
                    focal,
                    t_f as u32,
                    tag_subclass(&window_labels, horizon_label),
                ));
            }
        }
    }
    let mut rng = rng::stream(cfg.seed, "dataset-split", 0);
    let subclasses: Vec<Subclass> = tags.iter().map(|t| t.3).collect();
    let selection = select_indices(&subclasses, cfg, &mut rng)?;

    // Materialize per trial so each extractor is built once.
    let n_selected = selection.train.len() + cfg.n_test_sets * cfg.n_test;
    let mut wanted: Vec<Vec<(usize, usize)>> = vec![Vec::new(); trials.len()];
    for (flat, &tag_idx) in selection
        .train
        .iter()
        .chain(selection.tests.iter().flatten())
        .enumerate()
    {
        wanted[tags[tag_idx].0 as usize].push((tag_idx, flat));
    }
    let mut slots: Vec<Option<Sample>> = (0..n_selected).map(|_| None).collect();
    for (trial_idx, entries) in wanted.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let trial = &trials[trial_idx];
        let extractor = FeatureExtractor::new(trial)?;
        let trial_id: Arc<str> = Arc::from(trial.trial_id.as_str());
        for &(tag_idx, slot) in entries {
            let (_, focal, t_f, subclass) = tags[tag_idx];
            let sample = materialize_window(
                trial,
                &extractor,
                &trial_id,
                focal as usize,
                stride,
                horizon,
                t_f as usize,
            )?;
            debug_assert_eq!(sample.subclass, subclass);
            slots[slot] = Some(sample);
        }
    }
    let mut flat: Vec<Sample> = slots
        .into_iter()
        .map(|s| s.expect("every selected window materialized"))
        .collect();
    let mut test_sets = Vec::with_capacity(cfg.n_test_sets);
    for _ in 0..cfg.n_test_sets {
        let rest = flat.split_off(flat.len() - cfg.n_test);
        test_sets.push(rest);
    }
    test_sets.reverse();
    Ok(finish_split(flat, test_sets, cfg, &mut rng))
}

const HXS_MAGIC: &[u8; 4] = b"HXS1";
const HXS_VERSION: u32 = 1;

/// Write samples: magic `HXS1`, u32 version, u32 n_samples, u16 n_seq,
/// u16 n_feat, u16 horizon, u8 stride; per sample row-major little-endian
/// f64 features, u8 label, u8 subclass; then per-sample provenance records
/// `(u32 string index, u8 focal, u32 t_f)` and a string table.
pub fn write_hxs(path: impl AsRef<Path>, samples: &[Sample]) -> Result<(), DatasetError> {
    let (horizon, stride) = match samples.first() {
        Some(s) => (s.horizon, s.stride),
        None => (0, 1),
    };
    if samples
        .iter()
        .any(|s| s.horizon != horizon || s.stride != stride || s.features.shape() != [N_SEQ, N_FEATURES])
    {
        return Err(DatasetError::Inhomogeneous);
    }
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(HXS_MAGIC)?;
    w.write_all(&HXS_VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(N_SEQ as u16).to_le_bytes())?;
    w.write_all(&(N_FEATURES as u16).to_le_bytes())?;
    w.write_all(&horizon.to_le_bytes())?;
    w.write_all(&[stride])?;
    for s in samples {
        for &x in s.features.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&[s.label, s.subclass.as_u8()])?;
    }
    let mut string_table: Vec<Arc<str>> = Vec::new();
    let mut index_of: std::collections::HashMap<Arc<str>, u32> = std::collections::HashMap::new();
    for s in samples {
        let idx = match index_of.get(&s.trial_id) {
            Some(&i) => i,
            None => {
                let i = string_table.len() as u32;
                string_table.push(s.trial_id.clone());
                index_of.insert(s.trial_id.clone(), i);
                i
            }
        };
        w.write_all(&idx.to_le_bytes())?;
        w.write_all(&[s.focal])?;
        w.write_all(&s.t_f.to_le_bytes())?;
    }
    w.write_all(&(string_table.len() as u32).to_le_bytes())?;
    for s in &string_table {
        w.write_all(&(s.len() as u32).to_le_bytes())?;
        w.write_all(s.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_hxs(path: impl AsRef<Path>) -> Result<Vec<Sample>, DatasetError> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != HXS_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != HXS_VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    let n_samples = read_u32(&mut r)? as usize;
    let n_seq = read_u16(&mut r)? as usize;
    let n_feat = read_u16(&mut r)? as usize;
    let horizon = read_u16(&mut r)?;
    let stride = read_u8(&mut r)?;
    if n_seq != N_SEQ || n_feat != N_FEATURES {
        return Err(DatasetError::Corrupt(format!(
            "unexpected window shape {n_seq}x{n_feat}"
        )));
    }
    let mut bodies = Vec::with_capacity(n_samples);
    let mut buf = [0u8; 8];
    for _ in 0..n_samples {
        let mut features = Array2::zeros((N_SEQ, N_FEATURES));
        for x in features.iter_mut() {
            read_exact_or(&mut r, &mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
        let label = read_u8(&mut r)?;
        let subclass = Subclass::from_u8(read_u8(&mut r)?)
            .ok_or_else(|| DatasetError::Corrupt("subclass out of range".into()))?;
        if label > 4 {
            return Err(DatasetError::Corrupt(format!("label {label} out of range")));
        }
        bodies.push((features, label, subclass));
    }
    let mut provenance = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let idx = read_u32(&mut r)?;
        let focal = read_u8(&mut r)?;
        let t_f = read_u32(&mut r)?;
        provenance.push((idx, focal, t_f));
    }
    let n_strings = read_u32(&mut r)? as usize;
    let mut strings: Vec<Arc<str>> = Vec::with_capacity(n_strings);
    for _ in 0..n_strings {
        let len = read_u32(&mut r)? as usize;
        let mut bytes = vec![0u8; len];
        read_exact_or(&mut r, &mut bytes)?;
        let s = String::from_utf8(bytes)
            .map_err(|_| DatasetError::Corrupt("non-utf8 trial id".into()))?;
        strings.push(Arc::from(s.as_str()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for ((features, label, subclass), (idx, focal, t_f)) in bodies.into_iter().zip(provenance) {
        let trial_id = strings
            .get(idx as usize)
            .cloned()
            .ok_or_else(|| DatasetError::Corrupt("provenance index out of range".into()))?;
        samples.push(Sample {
            features,
            label,
            subclass,
            horizon,
            stride,
            trial_id,
            focal,
            t_f,
        });
    }
    Ok(samples)
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DatasetError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DatasetError::Truncated
        } else {
            DatasetError::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, DatasetError> {
    let mut b = [0u8; 1];
    read_exact_or(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, DatasetError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, DatasetError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Seeded random pick of `n` samples without replacement.
pub fn draw_samples(samples: &[Sample], n: usize, seed: u64, stage: &str) -> Vec<Sample> {
    let mut rng = rng::stream(seed, stage, 0);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order.into_iter().take(n).map(|i| samples[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{AgentSample, Expertise, Frame};
    use crate::Vec2;
    use proptest::prelude::*;
    use rand::RngExt;

    fn labeled_trial(id: &str, n: usize, label_fn: impl Fn(usize) -> u8) -> Trial {
        let frames = (0..n)
            .map(|k| Frame {
                t: k as f64 / 50.0,
                herders: [
                    AgentSample::new(Vec2::new(k as f64 * 0.001, 0.0)),
                    AgentSample::new(Vec2::new(0.0, k as f64 * 0.001)),
                ],
                targets: [
                    AgentSample::new(Vec2::new(0.5, 0.5)),
                    AgentSample::new(Vec2::new(-0.5, 0.5)),
                    AgentSample::new(Vec2::new(0.5, -0.5)),
                    AgentSample::new(Vec2::new(-0.5, -0.5)),
                ],
                labels: Some([label_fn(k), 0]),
            })
            .collect();
        Trial {
            trial_id: id.into(),
            expertise: Expertise::Expert,
            hz: 50.0,
            success: true,
            frames,
        }
    }

    #[test]
    fn window_count_matches_brute_force() {
        let trial = labeled_trial("w", 100, |_| 1);
        let samples = window_trial(&trial, 0, 1, 16).unwrap();
        // brute force over all candidate window ends
        let mut expected = 0;
        for t_f in 0..100usize {
            if t_f >= 24 && t_f + 16 < 100 {
                expected += 1;
            }
        }
        assert_eq!(expected, 60);
        assert_eq!(samples.len(), expected);
    }

    #[test]
    fn short_trial_yields_no_samples() {
        // stride 2, horizon 16 needs 48 + 32 + 1 frames; 66 is too short
        let trial = labeled_trial("short", 66, |_| 1);
        let samples = window_trial(&trial, 0, 2, 16).unwrap();
        assert!(samples.is_empty());
    }

    #[test]
    fn stride_two_labels_thirty_two_frames_ahead() {
        // Labels encode the frame index so the horizon label is checkable.
        let trial = labeled_trial("h", 120, |k| (k % 5) as u8);
        let samples = window_trial(&trial, 0, 2, 16).unwrap();
        assert!(!samples.is_empty());
        for s in &samples {
            let expect = ((s.t_f as usize + 32) % 5) as u8;
            assert_eq!(s.label, expect);
        }
    }

    #[test]
    fn unlabeled_trial_is_rejected() {
        let mut trial = labeled_trial("u", 100, |_| 1);
        trial.frames[50].labels = None;
        assert!(matches!(
            window_trial(&trial, 0, 1, 16),
            Err(DatasetError::UnlabeledTrial(_))
        ));
    }

    #[test]
    fn bad_stride_is_rejected() {
        let trial = labeled_trial("s", 100, |_| 1);
        assert!(matches!(
            window_trial(&trial, 0, 3, 16),
            Err(DatasetError::BadStride(3))
        ));
    }

    #[test]
    fn subclass_examples() {
        assert_eq!(tag_subclass(&[1; 25], 1), NonTransitioningNonSwitching);
        assert_eq!(tag_subclass(&[3; 25], 0), NonTransitioningSwitching);
        let mut w = [1u8; 25];
        for l in w.iter_mut().skip(20) {
            *l = 2;
        }
        assert_eq!(tag_subclass(&w, 2), TransitioningNonSwitching);
        assert_eq!(tag_subclass(&w, 1), TransitioningSwitching);
    }

    fn pool_with_counts(counts: [usize; 4]) -> Vec<Sample> {
        let mut pool = Vec::new();
        let mut t_f = 0u32;
        for (ci, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                t_f += 1;
                pool.push(Sample {
                    features: Array2::zeros((N_SEQ, N_FEATURES)),
                    label: (ci % 5) as u8,
                    subclass: SUBCLASSES[ci],
                    horizon: 16,
                    stride: 2,
                    trial_id: Arc::from("pool"),
                    focal: 0,
                    t_f,
                });
            }
        }
        pool
    }

    #[test]
    fn balanced_quota_shortfall_errors_with_class_report() {
        let pool = pool_with_counts([500, 500, 500, 90]);
        let cfg = SplitConfig {
            n_train: 400,
            n_test: 4,
            n_test_sets: 0,
            balance: Balance::Balanced,
            seed: 9,
            ..Default::default()
        };
        let err = assemble_split(pool, &cfg).unwrap_err();
        match err {
            DatasetError::BalancedShortfall(msg) => {
                assert!(msg.contains("T-S"), "message: {msg}");
                assert!(msg.contains("short by 10"), "message: {msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        // A 90-per-class request (360 total) fits.
        let pool = pool_with_counts([500, 500, 500, 90]);
        let cfg_ok = SplitConfig {
            n_train: 360,
            n_test: 4,
            n_test_sets: 0,
            balance: Balance::Balanced,
            seed: 9,
            ..Default::default()
        };
        let split = assemble_split(pool, &cfg_ok).unwrap();
        assert_eq!(split.train.len() + split.validation.len(), 360);
    }

    #[test]
    fn balanced_draw_is_exactly_uniform() {
        let pool = pool_with_counts([800, 800, 800, 800]);
        let cfg = SplitConfig {
            n_train: 2000,
            n_test: 400,
            n_test_sets: 2,
            balance: Balance::Balanced,
            standardize: false,
            seed: 4,
            ..Default::default()
        };
        let split = assemble_split(pool, &cfg).unwrap();
        let mut counts = [0usize; 4];
        for s in split.train.iter().chain(split.validation.iter()) {
            counts[s.subclass.as_u8() as usize] += 1;
        }
        assert_eq!(counts, [500, 500, 500, 500]);
        for t in &split.test_sets {
            let mut counts = [0usize; 4];
            for s in t {
                counts[s.subclass.as_u8() as usize] += 1;
            }
            assert_eq!(counts, [100, 100, 100, 100]);
        }
    }

    #[test]
    fn representative_mode_preserves_proportions() {
        // 69% of the pool is NT-NS.
        let pool = pool_with_counts([6900, 1500, 1000, 600]);
        let cfg = SplitConfig {
            n_train: 5000,
            n_test: 500,
            n_test_sets: 2,
            balance: Balance::Representative,
            standardize: false,
            seed: 21,
            ..Default::default()
        };
        let split = assemble_split(pool, &cfg).unwrap();
        let n = split.train.len() + split.validation.len();
        let ntns = split
            .train
            .iter()
            .chain(split.validation.iter())
            .filter(|s| s.subclass == NonTransitioningNonSwitching)
            .count();
        let frac = ntns as f64 / n as f64;
        assert!((frac - 0.69).abs() < 0.02, "fraction {frac}");
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let pool = pool_with_counts([400, 400, 400, 400]);
        let cfg = SplitConfig {
            n_train: 800,
            n_test: 200,
            n_test_sets: 3,
            balance: Balance::Balanced,
            standardize: false,
            seed: 77,
            ..Default::default()
        };
        let a = assemble_split(pool.clone(), &cfg).unwrap();
        let b = assemble_split(pool, &cfg).unwrap();
        let keys =
            |set: &[Sample]| -> Vec<(Arc<str>, u8, u32)> { set.iter().map(|s| s.key()).collect() };
        assert_eq!(keys(&a.train), keys(&b.train));
        assert_eq!(keys(&a.validation), keys(&b.validation));
        for (x, y) in a.test_sets.iter().zip(&b.test_sets) {
            assert_eq!(keys(x), keys(y));
        }
        let mut seen = std::collections::HashSet::new();
        for s in a
            .train
            .iter()
            .chain(a.validation.iter())
            .chain(a.test_sets.iter().flatten())
        {
            assert!(seen.insert(s.key()), "duplicate sample across splits");
        }
    }

    #[test]
    fn standardized_train_has_zero_mean_unit_std() {
        let mut pool = pool_with_counts([100, 100, 100, 100]);
        let mut rng = crate::rng::stream(5, "std-test", 0);
        for s in pool.iter_mut() {
            for x in s.features.iter_mut() {
                *x = rng.random_range(-4.0..9.0);
            }
            // column 7 constant across the pool
            for mut row in s.features.rows_mut() {
                row[7] = 3.25;
            }
        }
        let cfg = SplitConfig {
            n_train: 200,
            n_test: 40,
            n_test_sets: 1,
            balance: Balance::Balanced,
            standardize: true,
            seed: 3,
            ..Default::default()
        };
        let split = assemble_split(pool, &cfg).unwrap();
        let stats = split.standardization.as_ref().unwrap();
        assert_eq!(stats.std[7], 1.0);
        assert!(split.train.iter().all(|s| s.features[[0, 7]] == 3.25));
        let n_rows = split.train.len() * N_SEQ;
        for j in 0..N_FEATURES {
            if j == 7 {
                continue;
            }
            let mean: f64 = split
                .train
                .iter()
                .flat_map(|s| s.features.column(j).to_vec())
                .sum::<f64>()
                / n_rows as f64;
            let var: f64 = split
                .train
                .iter()
                .flat_map(|s| s.features.column(j).to_vec())
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>()
                / n_rows as f64;
            assert!(mean.abs() < 1e-9, "column {j} mean {mean}");
            assert!(
                (var.sqrt() - 1.0).abs() < 1e-9,
                "column {j} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn trial_level_assembly_matches_pool_assembly() {
        let trials: Vec<Trial> = (0..4)
            .map(|i| labeled_trial(&format!("t{i}"), 160, move |k| ((k / 30 + i) % 5) as u8))
            .collect();
        let mut pool = Vec::new();
        for t in &trials {
            for focal in 0..2 {
                pool.extend(window_trial(t, focal, 2, 8).unwrap());
            }
        }
        let cfg = SplitConfig {
            n_train: 40,
            n_test: 8,
            n_test_sets: 2,
            balance: Balance::Representative,
            standardize: true,
            seed: 15,
            ..Default::default()
        };
        let a = assemble_split(pool, &cfg).unwrap();
        let b = assemble_from_trials(&trials, 2, 8, &cfg).unwrap();
        assert_eq!(a.train.len(), b.train.len());
        let key = |s: &Sample| (s.trial_id.to_string(), s.focal, s.t_f);
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(key(x), key(y));
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        for (x, y) in a.validation.iter().zip(&b.validation) {
            assert_eq!(key(x), key(y));
        }
        for (ts_a, ts_b) in a.test_sets.iter().zip(&b.test_sets) {
            for (x, y) in ts_a.iter().zip(ts_b) {
                assert_eq!(key(x), key(y));
                assert_eq!(x.features, y.features);
            }
        }
        assert_eq!(a.standardization, b.standardization);
    }

    #[test]
    fn hxs_roundtrip_and_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.hxs");
        let mut pool = pool_with_counts([3, 2, 1, 1]);
        let mut rng = crate::rng::stream(8, "hxs", 0);
        for s in pool.iter_mut() {
            for x in s.features.iter_mut() {
                *x = rng.random::<f64>() * 7.0 - 2.0;
            }
        }
        write_hxs(&path, &pool).unwrap();
        let back = read_hxs(&path).unwrap();
        assert_eq!(back.len(), pool.len());
        for (a, b) in pool.iter().zip(&back) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.label, b.label);
            assert_eq!(a.subclass, b.subclass);
            assert_eq!(a.trial_id, b.trial_id);
            assert_eq!(a.t_f, b.t_f);
        }

        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(read_hxs(&path), Err(DatasetError::BadMagic)));

        let mut bad_version = Vec::new();
        bad_version.extend_from_slice(b"HXS1");
        bad_version.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            read_hxs(&path),
            Err(DatasetError::UnsupportedVersion(99))
        ));

        write_hxs(&path, &pool_with_counts([2, 0, 0, 0])).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() / 2]).unwrap();
        assert!(matches!(read_hxs(&path), Err(DatasetError::Truncated)));
    }

    proptest! {
        /// tag_subclass against an independent two-predicate oracle.
        #[test]
        fn tag_subclass_matches_oracle(
            window in proptest::collection::vec(0u8..5, N_SEQ),
            horizon_label in 0u8..5,
        ) {
            let got = tag_subclass(&window, horizon_label);
            let mut distinct: Vec<u8> = window.clone();
            distinct.sort_unstable();
            distinct.dedup();
            let transitioning = distinct.len() > 1;
            let switching = horizon_label != window[N_SEQ - 1];
            let expect = match (transitioning, switching) {
                (false, false) => NonTransitioningNonSwitching,
                (false, true) => NonTransitioningSwitching,
                (true, false) => TransitioningNonSwitching,
                (true, true) => TransitioningSwitching,
            };
            prop_assert_eq!(got, expect);
        }
    }
}

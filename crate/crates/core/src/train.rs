//! Adam optimization with early stopping on validation log loss, and model
//! checkpoint persistence.

use crate::dataset::{Sample, Standardization};
use crate::features::N_FEATURES;
use crate::ingest::Expertise;
use crate::nn::{
    self, forward_batch, DropoutPlan, Gradients, LossMode, LstmLayer, LstmModel, ModelMeta,
    NnError,
};
use crate::rng;
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// Adam learning rate.
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Improvement below this does not reset patience.
    pub min_delta: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.0018,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 5,
            min_delta: 1e-4,
            seed: 0,
            loss_mode: LossMode::FinalStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.alpha > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.batch_size >= 1
            && self.patience >= 1;
        if ok {
            Ok(())
        } else {
            Err(TrainError::InvalidConfig)
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration violates its invariants")]
    InvalidConfig,
    #[error("gradient shapes do not match the optimizer state")]
    ShapeMismatch,
    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("empty training or validation set")]
    EmptySplit,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    NotACheckpoint,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),
}

/// First and second moment accumulators, aligned with the model's declared
/// parameter order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(model: &LstmModel) -> AdamState {
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(
    model: &mut LstmModel,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    let grad_slices = grads.param_slices();
    {
        let params = model.param_slices();
        if params.len() != grad_slices.len()
            || params
                .iter()
                .zip(&grad_slices)
                .any(|(p, g)| p.len() != g.len())
            || state.m.len() != params.len()
        {
            return Err(TrainError::ShapeMismatch);
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut params = model.param_slices_mut();
    for (ai, param) in params.iter_mut().enumerate() {
        let g = grad_slices[ai];
        let m = &mut state.m[ai];
        let v = &mut state.v[ai];
        for k in 0..g.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            param[k] -= cfg.alpha * m_hat / (v_hat.sqrt() + cfg.eps_adam);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainHistory {
    pub alpha: f64,
    pub seed: u64,
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean final-step log loss and accuracy over a set, dropout off.
pub fn evaluate_log_loss(
    model: &LstmModel,
    samples: &[Sample],
    mode: LossMode,
) -> Result<(f64, f64), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut loss_sum = 0.0;
    let mut loss_terms = 0usize;
    let mut correct = 0usize;
    for chunk in samples.chunks(512) {
        let mats: Vec<Array2<f64>> = chunk.iter().map(|s| s.features.clone()).collect();
        let xs = nn::stack_timesteps_matrices(&mats, model.input_size())?;
        let (probs, _) = forward_batch(model, &xs, &DropoutPlan::inference(), false)?;
        let steps: Vec<usize> = match mode {
            LossMode::FinalStep => vec![probs.len() - 1],
            LossMode::AllSteps => (0..probs.len()).collect(),
        };
        for &t in &steps {
            let p = &probs[t];
            for (bi, s) in chunk.iter().enumerate() {
                loss_sum -= p[[bi, s.label as usize]].max(1e-300).ln();
                loss_terms += 1;
            }
        }
        let last = probs.last().expect("nonempty");
        for (bi, s) in chunk.iter().enumerate() {
            let mut best = 0usize;
            for c in 1..model.n_classes() {
                if last[[bi, c]] > last[[bi, best]] {
                    best = c;
                }
            }
            if best == s.label as usize {
                correct += 1;
            }
        }
    }
    Ok((
        loss_sum / loss_terms as f64,
        correct as f64 / samples.len() as f64,
    ))
}

/// Train with shuffled mini-batches and Adam; stop when validation log
/// loss has not improved by more than `min_delta` for `patience` epochs;
/// return the weights of the best validation epoch.
///
/// The inputs must already be standardized if `init.standardization` says
/// so; `fit` does not transform features.
pub fn fit(
    init: LstmModel,
    train: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
) -> Result<(LstmModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut model = init;
    model.meta.alpha = cfg.alpha;
    model.meta.seed = cfg.seed;
    model.meta.loss_mode = cfg.loss_mode;
    if let Some(first) = train.first() {
        model.meta.horizon = first.horizon;
        model.meta.stride = first.stride;
    }
    let mut state = AdamState::new(&model);
    let mut history = TrainHistory {
        alpha: cfg.alpha,
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_loss = f64::INFINITY;
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut best_epoch = 0usize;
    let mut since_improve = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut shuffle_rng = rng::stream(cfg.seed, "train-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mats: Vec<Array2<f64>> = batch.iter().map(|&i| train[i].features.clone()).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| train[i].label).collect();
            let xs = nn::stack_timesteps_matrices(&mats, model.input_size())?;
            let plan = DropoutPlan::train(rng::derive_seed(
                cfg.seed,
                "train-dropout",
                (epoch as u64) << 32 | batch_idx as u64,
            ));
            let (loss, grads) =
                nn::loss_and_backward_matrices(&model, &xs, &labels, &plan, cfg.loss_mode)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            adam_step(&mut model, &grads, &mut state, cfg)?;
            epoch_loss += loss;
            n_batches += 1;
        }
        let train_loss = epoch_loss / n_batches as f64;
        let (val_loss, val_accuracy) = evaluate_log_loss(&model, validation, cfg.loss_mode)?;
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        history.epochs.push(EpochStats {
            train_loss,
            val_loss,
            val_accuracy,
        });
        if best_loss - val_loss > cfg.min_delta {
            best_loss = val_loss;
            best_epoch = epoch;
            best_params = Some(model.param_slices().iter().map(|s| s.to_vec()).collect());
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    if let Some(best) = best_params {
        let mut slices = model.param_slices_mut();
        for (dst, src) in slices.iter_mut().zip(&best) {
            dst.copy_from_slice(src);
        }
    }
    history.best_epoch = best_epoch;
    model.meta.epochs_trained = history.epochs.len() as u32;
    Ok((model, history))
}

const HXM_MAGIC: &[u8; 4] = b"HXM1";
const HXM_VERSION: u32 = 1;

/// Save a checkpoint: magic `HXM1`, u32 version, a fixed metadata block
/// (layer sizes, dropout rates, learning rate, seed, epochs, horizon,
/// stride, expertise, scale, loss mode, config hash, standardization
/// statistics), then every parameter array row-major little-endian f64 in
/// declared order.
pub fn save_checkpoint(model: &LstmModel, path: impl AsRef<Path>) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(HXM_MAGIC)?;
    w.write_all(&HXM_VERSION.to_le_bytes())?;
    let hidden = model.hidden_sizes();
    w.write_all(&(hidden.len() as u32).to_le_bytes())?;
    w.write_all(&(model.input_size() as u32).to_le_bytes())?;
    for h in &hidden {
        w.write_all(&(*h as u32).to_le_bytes())?;
    }
    w.write_all(&(model.n_classes() as u32).to_le_bytes())?;
    w.write_all(&model.lstm_dropout.to_le_bytes())?;
    w.write_all(&model.inter_layer_dropout.to_le_bytes())?;
    w.write_all(&model.meta.alpha.to_le_bytes())?;
    w.write_all(&model.meta.seed.to_le_bytes())?;
    w.write_all(&model.meta.epochs_trained.to_le_bytes())?;
    w.write_all(&model.meta.horizon.to_le_bytes())?;
    w.write_all(&[model.meta.stride])?;
    let expertise = match model.meta.expertise {
        None => 0u8,
        Some(Expertise::Expert) => 1,
        Some(Expertise::Novice) => 2,
    };
    w.write_all(&[expertise])?;
    w.write_all(&model.meta.scale.to_le_bytes())?;
    w.write_all(&[match model.meta.loss_mode {
        LossMode::FinalStep => 0u8,
        LossMode::AllSteps => 1,
    }])?;
    w.write_all(&model.meta.config_hash.to_le_bytes())?;
    match &model.standardization {
        None => w.write_all(&[0u8])?,
        Some(stats) => {
            w.write_all(&[1u8])?;
            w.write_all(&(stats.mean.len() as u32).to_le_bytes())?;
            for x in stats.mean.iter().chain(stats.std.iter()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    for slice in model.param_slices() {
        for x in slice {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<LstmModel, TrainError> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != HXM_MAGIC {
        return Err(TrainError::NotACheckpoint);
    }
    let version = read_u32(&mut r)?;
    if version != HXM_VERSION {
        return Err(TrainError::UnsupportedVersion(version));
    }
    let n_layers = read_u32(&mut r)? as usize;
    if n_layers == 0 || n_layers > 64 {
        return Err(TrainError::Corrupt(format!("implausible layer count {n_layers}")));
    }
    let input_size = read_u32(&mut r)? as usize;
    let mut hidden = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        hidden.push(read_u32(&mut r)? as usize);
    }
    let n_classes = read_u32(&mut r)? as usize;
    let lstm_dropout = read_f64(&mut r)?;
    let inter_layer_dropout = read_f64(&mut r)?;
    let alpha = read_f64(&mut r)?;
    let seed = read_u64(&mut r)?;
    let epochs_trained = read_u32(&mut r)?;
    let horizon = read_u16(&mut r)?;
    let stride = read_u8(&mut r)?;
    let expertise = match read_u8(&mut r)? {
        0 => None,
        1 => Some(Expertise::Expert),
        2 => Some(Expertise::Novice),
        other => return Err(TrainError::Corrupt(format!("expertise tag {other}"))),
    };
    let scale = read_f64(&mut r)?;
    let loss_mode = match read_u8(&mut r)? {
        0 => LossMode::FinalStep,
        1 => LossMode::AllSteps,
        other => return Err(TrainError::Corrupt(format!("loss mode tag {other}"))),
    };
    let config_hash = read_u64(&mut r)?;
    let standardization = match read_u8(&mut r)? {
        0 => None,
        1 => {
            let n = read_u32(&mut r)? as usize;
            if n != N_FEATURES {
                return Err(TrainError::Corrupt(format!(
                    "standardization over {n} features"
                )));
            }
            let mut mean = vec![0.0; n];
            let mut std = vec![0.0; n];
            for x in mean.iter_mut() {
                *x = read_f64(&mut r)?;
            }
            for x in std.iter_mut() {
                *x = read_f64(&mut r)?;
            }
            Some(Standardization { mean, std })
        }
        other => return Err(TrainError::Corrupt(format!("standardization tag {other}"))),
    };

    let mut layers = Vec::with_capacity(n_layers);
    let mut prev = input_size;
    for &h in &hidden {
        let w_ih = read_array2(&mut r, 4 * h, prev)?;
        let w_hh = read_array2(&mut r, 4 * h, h)?;
        let b = read_array1(&mut r, 4 * h)?;
        layers.push(LstmLayer { w_ih, w_hh, b });
        prev = h;
    }
    let dense_w = read_array2(&mut r, n_classes, prev)?;
    let dense_b = read_array1(&mut r, n_classes)?;
    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => return Err(TrainError::Corrupt("trailing data after parameters".into())),
    }
    Ok(LstmModel {
        layers,
        dense_w,
        dense_b,
        lstm_dropout,
        inter_layer_dropout,
        standardization,
        meta: ModelMeta {
            seed,
            epochs_trained,
            horizon,
            stride,
            expertise,
            scale,
            alpha,
            loss_mode,
            config_hash,
        },
    })
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8]) -> Result<(), TrainError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            TrainError::Truncated
        } else {
            TrainError::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read) -> Result<u8, TrainError> {
    let mut b = [0u8; 1];
    read_exact_or(r, &mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, TrainError> {
    let mut b = [0u8; 2];
    read_exact_or(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, TrainError> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_array2(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>, TrainError> {
    let mut a = Array2::zeros((rows, cols));
    for x in a.iter_mut() {
        *x = read_f64(r)?;
    }
    Ok(a)
}

fn read_array1(r: &mut impl Read, n: usize) -> Result<Array1<f64>, TrainError> {
    let mut a = Array1::zeros(n);
    for x in a.iter_mut() {
        *x = read_f64(r)?;
    }
    Ok(a)
}

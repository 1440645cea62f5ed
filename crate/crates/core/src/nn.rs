//! LSTM sequence classifier: forward pass, log loss, exact gradients via
//! backpropagation through time, and a finite-difference gradient checker.
//!
//! The network is a stack of LSTM layers followed by a per-timestep dense
//! head with softmax. Gate order in the packed weight matrices is
//! input, forget, cell, output:
//!
//! ```text
//! a = W_ih x_t + W_hh h_{t-1} + b          (4H rows)
//! i = sigmoid(a_i)  f = sigmoid(a_f)  g = tanh(a_g)  o = sigmoid(a_o)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```
//!
//! Dropout follows the inverted convention (train-time scaling by 1/keep,
//! inference applies no masks): each LSTM layer drops its input connections
//! at `lstm_dropout`, and separate dropout at `inter_layer_dropout` sits
//! between consecutive LSTM layers. Masks are Bernoulli per timestep and
//! per element.
//!
//! Everything is 64-bit; batches are processed as per-timestep matrices so
//! the hot path is matrix multiplication.

use crate::dataset::{Sample, Standardization};
use crate::ingest::Expertise;
use crate::rng;
use ndarray::{Array1, Array2, Axis};
use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Output width: four target ids plus "no target".
pub const N_CLASSES: usize = 5;

/// Hidden widths of the full-size architecture.
pub const FULL_HIDDEN: [usize; 3] = [253, 25, 8];

pub const DEFAULT_LSTM_DROPOUT: f64 = 0.1145;
pub const DEFAULT_INTER_LAYER_DROPOUT: f64 = 0.0145;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Cross-entropy at the final timestep only.
    FinalStep,
    /// Cross-entropy averaged over all timesteps, label broadcast.
    AllSteps,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite input rejected")]
    NonFiniteInput,
    #[error("input has {got} features, model expects {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("label {0} out of range")]
    BadLabel(u8),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    /// `(4H, I)` input weights.
    pub w_ih: Array2<f64>,
    /// `(4H, H)` recurrent weights.
    pub w_hh: Array2<f64>,
    /// `(4H,)` bias.
    pub b: Array1<f64>,
}

impl LstmLayer {
    fn init(input: usize, hidden: usize, rng: &mut ChaCha12Rng) -> LstmLayer {
        let mut w_ih = Array2::zeros((4 * hidden, input));
        let k = 1.0 / (input as f64).sqrt();
        for x in w_ih.iter_mut() {
            *x = rng.random_range(-k..k);
        }
        let mut w_hh = Array2::zeros((4 * hidden, hidden));
        let k = 1.0 / (hidden as f64).sqrt();
        for x in w_hh.iter_mut() {
            *x = rng.random_range(-k..k);
        }
        let mut b = Array1::zeros(4 * hidden);
        for x in b.iter_mut() {
            *x = rng.random_range(-k..k);
        }
        // forget-gate bias starts at 1 so early training does not flush the
        // cell state
        for x in b.slice_mut(ndarray::s![hidden..2 * hidden]).iter_mut() {
            *x = 1.0;
        }
        LstmLayer { w_ih, w_hh, b }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    pub fn input(&self) -> usize {
        self.w_ih.ncols()
    }
}

/// Training provenance carried by a model and its checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelMeta {
    pub seed: u64,
    pub epochs_trained: u32,
    pub horizon: u16,
    pub stride: u8,
    pub expertise: Option<Expertise>,
    pub scale: f64,
    pub alpha: f64,
    pub loss_mode: LossMode,
    pub config_hash: u64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        ModelMeta {
            seed: 0,
            epochs_trained: 0,
            horizon: 0,
            stride: 1,
            expertise: None,
            scale: 1.0,
            alpha: 0.0,
            loss_mode: LossMode::FinalStep,
            config_hash: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmModel {
    pub layers: Vec<LstmLayer>,
    /// `(C, H_last)` dense head weights.
    pub dense_w: Array2<f64>,
    /// `(C,)` dense head bias.
    pub dense_b: Array1<f64>,
    pub lstm_dropout: f64,
    pub inter_layer_dropout: f64,
    pub standardization: Option<Standardization>,
    pub meta: ModelMeta,
}

impl LstmModel {
    /// Fresh model with the default dropout rates.
    pub fn new(input_size: usize, hidden: &[usize], n_classes: usize, seed: u64) -> LstmModel {
        let mut rng = rng::stream(seed, "nn-init", 0);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = input_size;
        for &h in hidden {
            layers.push(LstmLayer::init(prev, h, &mut rng));
            prev = h;
        }
        let k = 1.0 / (prev as f64).sqrt();
        let mut dense_w = Array2::zeros((n_classes, prev));
        for x in dense_w.iter_mut() {
            *x = rng.random_range(-k..k);
        }
        let mut dense_b = Array1::zeros(n_classes);
        for x in dense_b.iter_mut() {
            *x = rng.random_range(-k..k);
        }
        LstmModel {
            layers,
            dense_w,
            dense_b,
            lstm_dropout: DEFAULT_LSTM_DROPOUT,
            inter_layer_dropout: DEFAULT_INTER_LAYER_DROPOUT,
            standardization: None,
            meta: ModelMeta {
                seed,
                ..Default::default()
            },
        }
    }

    /// Hidden widths scaled from the full architecture: every width is
    /// multiplied by `scale` and rounded up, with the last layer floored
    /// at 4 units. `scale = 1` reproduces the full sizes.
    pub fn scaled_hidden(scale: f64) -> [usize; 3] {
        [
            (FULL_HIDDEN[0] as f64 * scale).ceil().max(1.0) as usize,
            (FULL_HIDDEN[1] as f64 * scale).ceil().max(1.0) as usize,
            ((FULL_HIDDEN[2] as f64 * scale).ceil() as usize).max(4),
        ]
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input()
    }

    pub fn n_classes(&self) -> usize {
        self.dense_w.nrows()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.hidden()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter arrays in declared order: per layer `w_ih`, `w_hh`, `b`,
    /// then `dense_w`, `dense_b`. Checkpoints and the optimizer rely on
    /// this order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w_ih.as_slice().expect("standard layout"));
            out.push(l.w_hh.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out.push(self.dense_w.as_slice().expect("standard layout"));
        out.push(self.dense_b.as_slice().expect("standard layout"));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.w_ih.as_slice_mut().expect("standard layout"));
            out.push(l.w_hh.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        out.push(self.dense_w.as_slice_mut().expect("standard layout"));
        out.push(self.dense_b.as_slice_mut().expect("standard layout"));
        out
    }

    /// Standardize a raw feature matrix if this model carries statistics.
    pub fn standardize_matrix(&self, features: &mut Array2<f64>) {
        if let Some(stats) = &self.standardization {
            stats.apply_matrix(features);
        }
    }

    /// Final-timestep class probabilities for raw (unstandardized) feature
    /// matrices, in inference mode.
    pub fn predict_final_probs(&self, mats: &[Array2<f64>]) -> Result<Array2<f64>, NnError> {
        if mats.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let mut owned: Vec<Array2<f64>> = mats.to_vec();
        for m in owned.iter_mut() {
            self.standardize_matrix(m);
        }
        let xs = stack_timesteps_matrices(&owned, self.input_size())?;
        let (probs, _) = forward_batch(self, &xs, &DropoutPlan::inference(), false)?;
        Ok(probs.last().expect("nonempty sequence").clone())
    }

    /// Final-timestep class probabilities for samples holding raw features.
    pub fn predict_samples(&self, samples: &[Sample]) -> Result<Array2<f64>, NnError> {
        let mats: Vec<Array2<f64>> = samples.iter().map(|s| s.features.clone()).collect();
        self.predict_final_probs(&mats)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Inference,
}

/// Where a forward pass gets its dropout masks.
#[derive(Clone, Copy, Debug)]
pub struct DropoutPlan {
    pub mode: DropoutMode,
    pub seed: u64,
}

impl DropoutPlan {
    pub fn train(seed: u64) -> DropoutPlan {
        DropoutPlan {
            mode: DropoutMode::Train,
            seed,
        }
    }

    pub fn inference() -> DropoutPlan {
        DropoutPlan {
            mode: DropoutMode::Inference,
            seed: 0,
        }
    }
}

/// Activations retained for backpropagation.
pub struct ForwardCache {
    /// Per layer, per timestep: layer input after dropout, `(B, I_l)`.
    inputs: Vec<Vec<Array2<f64>>>,
    /// Per layer, per timestep: combined dropout mask (inverted scale
    /// included), or `None` when no dropout applied.
    masks: Vec<Vec<Option<Array2<f64>>>>,
    /// Gate activations `(B, H)`, per layer per timestep.
    i: Vec<Vec<Array2<f64>>>,
    f: Vec<Vec<Array2<f64>>>,
    g: Vec<Vec<Array2<f64>>>,
    o: Vec<Vec<Array2<f64>>>,
    c: Vec<Vec<Array2<f64>>>,
    tanh_c: Vec<Vec<Array2<f64>>>,
    h: Vec<Vec<Array2<f64>>>,
}

impl ForwardCache {
    /// Hidden state of the top layer at the final timestep.
    pub fn final_hidden(&self) -> &Array2<f64> {
        self.h.last().unwrap().last().unwrap()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax, numerically stabilized.
fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
    out
}

/// Reorganize per-sample `(T, F)` matrices into per-timestep `(B, F)`
/// matrices.
pub fn stack_timesteps_matrices(
    mats: &[Array2<f64>],
    n_features: usize,
) -> Result<Vec<Array2<f64>>, NnError> {
    if mats.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let t_len = mats[0].nrows();
    for m in mats {
        if m.ncols() != n_features {
            return Err(NnError::FeatureMismatch {
                expected: n_features,
                got: m.ncols(),
            });
        }
        if !m.iter().all(|x| x.is_finite()) {
            return Err(NnError::NonFiniteInput);
        }
    }
    let b = mats.len();
    let mut xs = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut x = Array2::zeros((b, n_features));
        for (bi, m) in mats.iter().enumerate() {
            x.row_mut(bi).assign(&m.row(t));
        }
        xs.push(x);
    }
    Ok(xs)
}

fn draw_mask(rng: &mut ChaCha12Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Array2::zeros(shape);
    for x in mask.iter_mut() {
        *x = if rng.random::<f64>() < keep { scale } else { 0.0 };
    }
    mask
}

/// Run the network over per-timestep input matrices.
///
/// Returns per-timestep `(B, C)` probability matrices (rows sum to one)
/// and, when requested, the cache needed by the backward pass.
pub fn forward_batch(
    model: &LstmModel,
    xs: &[Array2<f64>],
    plan: &DropoutPlan,
    want_cache: bool,
) -> Result<(Vec<Array2<f64>>, Option<ForwardCache>), NnError> {
    if xs.is_empty() || xs[0].nrows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if xs[0].ncols() != model.input_size() {
        return Err(NnError::FeatureMismatch {
            expected: model.input_size(),
            got: xs[0].ncols(),
        });
    }
    let t_len = xs.len();
    let batch = xs[0].nrows();
    let n_layers = model.layers.len();
    let mut drop_rng = rng::stream(plan.seed, "dropout", 0);
    let train = plan.mode == DropoutMode::Train;

    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(n_layers),
        masks: Vec::with_capacity(n_layers),
        i: Vec::with_capacity(n_layers),
        f: Vec::with_capacity(n_layers),
        g: Vec::with_capacity(n_layers),
        o: Vec::with_capacity(n_layers),
        c: Vec::with_capacity(n_layers),
        tanh_c: Vec::with_capacity(n_layers),
        h: Vec::with_capacity(n_layers),
    };

    let mut layer_input: Vec<Array2<f64>> = xs.to_vec();
    for (li, layer) in model.layers.iter().enumerate() {
        let hidden = layer.hidden();
        // combined dropout on this layer's input: inter-layer (for li > 0)
        // then the LSTM layer's own input dropout
        let mut rate_parts: Vec<f64> = Vec::new();
        if train && li > 0 && model.inter_layer_dropout > 0.0 {
            rate_parts.push(model.inter_layer_dropout);
        }
        if train && model.lstm_dropout > 0.0 {
            rate_parts.push(model.lstm_dropout);
        }
        let mut masks_t: Vec<Option<Array2<f64>>> = Vec::with_capacity(t_len);
        for x in layer_input.iter_mut() {
            if rate_parts.is_empty() {
                masks_t.push(None);
            } else {
                let mut combined = draw_mask(&mut drop_rng, (batch, x.ncols()), rate_parts[0]);
                for &rate in &rate_parts[1..] {
                    combined *= &draw_mask(&mut drop_rng, (batch, x.ncols()), rate);
                }
                *x *= &combined;
                masks_t.push(Some(combined));
            }
        }

        let mut h_prev = Array2::zeros((batch, hidden));
        let mut c_prev: Array2<f64> = Array2::zeros((batch, hidden));
        let mut hs = Vec::with_capacity(t_len);
        let (mut is, mut fs, mut gs, mut os) = (
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
            Vec::with_capacity(t_len),
        );
        let mut cs = Vec::with_capacity(t_len);
        let mut tanh_cs = Vec::with_capacity(t_len);
        for x in layer_input.iter() {
            let mut a = x.dot(&layer.w_ih.t()) + h_prev.dot(&layer.w_hh.t());
            a += &layer.b;
            let mut gi = Array2::zeros((batch, hidden));
            let mut gf = Array2::zeros((batch, hidden));
            let mut gg = Array2::zeros((batch, hidden));
            let mut go = Array2::zeros((batch, hidden));
            for bi in 0..batch {
                for hj in 0..hidden {
                    gi[[bi, hj]] = sigmoid(a[[bi, hj]]);
                    gf[[bi, hj]] = sigmoid(a[[bi, hidden + hj]]);
                    gg[[bi, hj]] = a[[bi, 2 * hidden + hj]].tanh();
                    go[[bi, hj]] = sigmoid(a[[bi, 3 * hidden + hj]]);
                }
            }
            let c = &gf * &c_prev + &gi * &gg;
            let tanh_c = c.mapv(f64::tanh);
            let h = &go * &tanh_c;
            h_prev = h.clone();
            c_prev = c.clone();
            hs.push(h);
            is.push(gi);
            fs.push(gf);
            gs.push(gg);
            os.push(go);
            cs.push(c);
            tanh_cs.push(tanh_c);
        }
        if want_cache {
            cache.inputs.push(std::mem::take(&mut layer_input));
            cache.masks.push(masks_t);
            cache.i.push(is);
            cache.f.push(fs);
            cache.g.push(gs);
            cache.o.push(os);
            cache.c.push(cs);
            cache.tanh_c.push(tanh_cs);
            cache.h.push(hs.clone());
        }
        layer_input = hs;
    }

    let probs: Vec<Array2<f64>> = layer_input
        .iter()
        .map(|h| {
            let mut logits = h.dot(&model.dense_w.t());
            logits += &model.dense_b;
            softmax_rows(&logits)
        })
        .collect();
    Ok((probs, want_cache.then_some(cache)))
}

/// Forward pass for one sample: per-timestep class probabilities plus the
/// cached activations.
pub fn lstm_forward(
    model: &LstmModel,
    features: &Array2<f64>,
    plan: &DropoutPlan,
) -> Result<(Array2<f64>, ForwardCache), NnError> {
    let xs = stack_timesteps_matrices(std::slice::from_ref(features), model.input_size())?;
    let (probs, cache) = forward_batch(model, &xs, plan, true)?;
    let t_len = probs.len();
    let mut out = Array2::zeros((t_len, model.n_classes()));
    for (t, p) in probs.iter().enumerate() {
        out.row_mut(t).assign(&p.row(0));
    }
    Ok((out, cache.expect("cache requested")))
}

/// Parameter gradients, shaped like the model.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub layers: Vec<LstmLayer>,
    pub dense_w: Array2<f64>,
    pub dense_b: Array1<f64>,
}

impl Gradients {
    fn zeros_like(model: &LstmModel) -> Gradients {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayer {
                    w_ih: Array2::zeros(l.w_ih.dim()),
                    w_hh: Array2::zeros(l.w_hh.dim()),
                    b: Array1::zeros(l.b.dim()),
                })
                .collect(),
            dense_w: Array2::zeros(model.dense_w.dim()),
            dense_b: Array1::zeros(model.dense_b.dim()),
        }
    }

    /// Gradient arrays in the same declared order as
    /// [`LstmModel::param_slices`].
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(3 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.w_ih.as_slice().expect("standard layout"));
            out.push(l.w_hh.as_slice().expect("standard layout"));
            out.push(l.b.as_slice().expect("standard layout"));
        }
        out.push(self.dense_w.as_slice().expect("standard layout"));
        out.push(self.dense_b.as_slice().expect("standard layout"));
        out
    }
}

/// Mean log loss of a batch and exact gradients for the sampled dropout
/// masks. Labels come from the samples; features must already match what
/// the model expects (standardized when the model carries statistics).
pub fn loss_and_backward(
    model: &LstmModel,
    samples: &[Sample],
    plan: &DropoutPlan,
    mode: LossMode,
) -> Result<(f64, Gradients), NnError> {
    if samples.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    for s in samples {
        if s.label as usize >= model.n_classes() {
            return Err(NnError::BadLabel(s.label));
        }
    }
    let mats: Vec<Array2<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let xs = stack_timesteps_matrices(&mats, model.input_size())?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    loss_and_backward_matrices(model, &xs, &labels, plan, mode)
}

/// [`loss_and_backward`] on pre-stacked per-timestep matrices.
pub fn loss_and_backward_matrices(
    model: &LstmModel,
    xs: &[Array2<f64>],
    labels: &[u8],
    plan: &DropoutPlan,
    mode: LossMode,
) -> Result<(f64, Gradients), NnError> {
    let (probs, cache) = forward_batch(model, xs, plan, true)?;
    let cache = cache.expect("cache requested");
    let batch = xs[0].nrows();
    let t_len = xs.len();

    let mut loss = 0.0;
    let steps: Vec<usize> = match mode {
        LossMode::FinalStep => vec![t_len - 1],
        LossMode::AllSteps => (0..t_len).collect(),
    };
    let norm = (batch * steps.len()) as f64;
    let mut dlogits: Vec<Option<Array2<f64>>> = vec![None; t_len];
    for &t in &steps {
        let p = &probs[t];
        let mut dl = p.clone();
        for bi in 0..batch {
            let y = labels[bi] as usize;
            loss -= p[[bi, y]].max(1e-300).ln();
            dl[[bi, y]] -= 1.0;
        }
        dl.mapv_inplace(|x| x / norm);
        dlogits[t] = Some(dl);
    }
    loss /= norm;

    let mut grads = Gradients::zeros_like(model);
    let n_layers = model.layers.len();

    // dense head gradients and the top layer's external dh
    let mut dh_ext: Vec<Array2<f64>> =
        vec![Array2::zeros((batch, model.layers[n_layers - 1].hidden())); t_len];
    for t in 0..t_len {
        if let Some(dl) = &dlogits[t] {
            let h_top = &cache.h[n_layers - 1][t];
            grads.dense_w += &dl.t().dot(h_top);
            grads.dense_b += &dl.sum_axis(Axis(0));
            dh_ext[t] = dl.dot(&model.dense_w);
        }
    }

    // backward through layers, top to bottom
    for li in (0..n_layers).rev() {
        let layer = &model.layers[li];
        let hidden = layer.hidden();
        let input_w = layer.input();
        let mut dh_rec: Array2<f64> = Array2::zeros((batch, hidden));
        let mut dc: Array2<f64> = Array2::zeros((batch, hidden));
        let mut dx_below: Vec<Array2<f64>> = if li > 0 {
            vec![Array2::zeros((batch, input_w)); t_len]
        } else {
            Vec::new()
        };
        for t in (0..t_len).rev() {
            let dh = &dh_ext[t] + &dh_rec;
            let i = &cache.i[li][t];
            let f = &cache.f[li][t];
            let g = &cache.g[li][t];
            let o = &cache.o[li][t];
            let tanh_c = &cache.tanh_c[li][t];
            let d_o = &dh * tanh_c;
            let da_o = &d_o * o * &o.mapv(|x| 1.0 - x);
            dc += &(&dh * o * &tanh_c.mapv(|x| 1.0 - x * x));
            let c_prev_owned;
            let c_prev: &Array2<f64> = if t > 0 {
                &cache.c[li][t - 1]
            } else {
                c_prev_owned = Array2::zeros((batch, hidden));
                &c_prev_owned
            };
            let da_f = &(&dc * c_prev) * f * &f.mapv(|x| 1.0 - x);
            let da_i = &(&dc * g) * i * &i.mapv(|x| 1.0 - x);
            let da_g = &(&dc * i) * &g.mapv(|x| 1.0 - x * x);
            dc = &dc * f;

            let mut da = Array2::zeros((batch, 4 * hidden));
            da.slice_mut(ndarray::s![.., 0..hidden]).assign(&da_i);
            da.slice_mut(ndarray::s![.., hidden..2 * hidden])
                .assign(&da_f);
            da.slice_mut(ndarray::s![.., 2 * hidden..3 * hidden])
                .assign(&da_g);
            da.slice_mut(ndarray::s![.., 3 * hidden..4 * hidden])
                .assign(&da_o);

            let x_t = &cache.inputs[li][t];
            grads.layers[li].w_ih += &da.t().dot(x_t);
            if t > 0 {
                grads.layers[li].w_hh += &da.t().dot(&cache.h[li][t - 1]);
            }
            grads.layers[li].b += &da.sum_axis(Axis(0));

            dh_rec = da.dot(&layer.w_hh);
            if li > 0 {
                let mut dx = da.dot(&layer.w_ih);
                if let Some(mask) = &cache.masks[li][t] {
                    dx *= mask;
                }
                dx_below[t] = dx;
            }
        }
        if li > 0 {
            dh_ext = dx_below;
        }
    }
    Ok((loss, grads))
}

/// Compare analytic gradients against central finite differences on a
/// random subset of at least `n_checks` parameters. Dropout must be off
/// (inference plan) so the loss is deterministic. Returns the maximum
/// relative error.
pub fn grad_check(
    model: &LstmModel,
    sample: &Sample,
    epsilon: f64,
    n_checks: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let plan = DropoutPlan::inference();
    let batch = std::slice::from_ref(sample);
    let (_, grads) = loss_and_backward(model, batch, &plan, LossMode::FinalStep)?;
    let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();
    let sizes: Vec<usize> = analytic.iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rng::stream(seed, "grad-check", 0);
    let mut work = model.clone();
    let mut max_rel = 0.0f64;
    for _ in 0..n_checks.max(1) {
        let flat = rng.random_range(0..total);
        let (arr, idx) = locate(&sizes, flat);
        let mut eval = |delta: f64| -> Result<f64, NnError> {
            {
                let mut slices = work.param_slices_mut();
                slices[arr][idx] += delta;
            }
            let (loss, _) = loss_and_backward(&work, batch, &plan, LossMode::FinalStep)?;
            {
                let mut slices = work.param_slices_mut();
                slices[arr][idx] -= delta;
            }
            Ok(loss)
        };
        let plus = eval(epsilon)?;
        let minus = eval(-epsilon)?;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[arr][idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn locate(sizes: &[usize], mut flat: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if flat < s {
            return (i, flat);
        }
        flat -= s;
    }
    unreachable!("flat index within total")
}

//! Fully-connected ReLU network with inverted dropout, softmax output and
//! cross-entropy training by mini-batch SGD with momentum.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bumped whenever the serialized layout changes.
pub const MODEL_FORMAT_VERSION: u32 = 1;

const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("InvalidTopology: {0}")]
    InvalidTopology(String),
    #[error("DimensionMismatch: expected {expected} inputs, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("InvalidTarget: {0}")]
    InvalidTarget(String),
    #[error("SingleClassData: training data holds fewer than two classes")]
    SingleClassData,
    #[error("NonFiniteLoss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("malformed model: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Whether hidden activations are dropped out.
pub enum Mode<'a> {
    Infer,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    /// `weights[l]` is `fan_in × fan_out`.
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    dropout_rate: f64,
    rng_seed: u64,
    input_mean: Array1<f64>,
    input_std: Array1<f64>,
}

fn check_sizes(layer_sizes: &[usize], min_layers: usize, dropout_rate: f64) -> Result<()> {
    if layer_sizes.len() < min_layers {
        return Err(NnError::InvalidTopology(format!(
            "need at least {min_layers} layers, got {}",
            layer_sizes.len()
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(NnError::InvalidTopology("every layer needs at least one unit".into()));
    }
    if !(0.0..1.0).contains(&dropout_rate) {
        return Err(NnError::InvalidTopology(format!("dropout rate {dropout_rate} outside [0, 1)")));
    }
    Ok(())
}

/// He-initialized network with zero biases; requires at least one hidden layer.
pub fn init_mlp(layer_sizes: &[usize], dropout_rate: f64, seed: u64) -> Result<Mlp> {
    check_sizes(layer_sizes, 3, dropout_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        weights.push(Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng)));
        biases.push(Array1::zeros(fan_out));
    }
    let n_in = layer_sizes[0];
    Ok(Mlp {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        dropout_rate,
        rng_seed: seed,
        input_mean: Array1::zeros(n_in),
        input_std: Array1::ones(n_in),
    })
}

/// Numerically stable softmax of each row.
fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let mut a = Array2::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
    softmax_rows(&mut a);
    a.into_raw_vec_and_offset().0
}

/// Cross-entropy against the class `target`; probabilities are floored at 1e-12.
pub fn loss(p: &[f64], target: usize) -> Result<f64> {
    if target >= p.len() {
        return Err(NnError::InvalidTarget(format!("class {target} with {} outputs", p.len())));
    }
    Ok(clamped_nll(p[target]))
}

/// NaN passes through so divergence is not hidden by the floor.
fn clamped_nll(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        -p.max(PROB_FLOOR).ln()
    }
}

/// Cross-entropy against a one-hot vector.
pub fn loss_one_hot(p: &[f64], t: &[f64]) -> Result<f64> {
    if p.len() != t.len() {
        return Err(NnError::InvalidTarget(format!("{} targets for {} outputs", t.len(), p.len())));
    }
    let ones: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1.0).collect();
    if ones.len() != 1 || t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(NnError::InvalidTarget("target must be one-hot".into()));
    }
    loss(p, ones[0])
}

/// Activations kept for back-propagation.
struct Trace {
    /// Input to each layer (the standardized input first).
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    /// Hidden dropout scale factors (0 or 1/(1−rate)); absent in infer mode.
    masks: Vec<Option<Array2<f64>>>,
    probs: Array2<f64>,
}

impl Mlp {
    /// A network from explicit parameters; zero hidden layers are allowed.
    /// `weights[l]` is row-major `fan_in × fan_out`.
    pub fn from_parameters(
        layer_sizes: &[usize],
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
        dropout_rate: f64,
    ) -> Result<Mlp> {
        check_sizes(layer_sizes, 2, dropout_rate)?;
        let n_layers = layer_sizes.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(NnError::Malformed(format!(
                "{} weight and {} bias arrays for {n_layers} layers",
                weights.len(),
                biases.len()
            )));
        }
        let mut ws = Vec::new();
        let mut bs = Vec::new();
        for (l, (w, b)) in weights.into_iter().zip(biases).enumerate() {
            let shape = (layer_sizes[l], layer_sizes[l + 1]);
            ws.push(
                Array2::from_shape_vec(shape, w)
                    .map_err(|_| NnError::Malformed(format!("layer {l} weights are not {}×{}", shape.0, shape.1)))?,
            );
            if b.len() != shape.1 {
                return Err(NnError::Malformed(format!("layer {l} has {} biases, expected {}", b.len(), shape.1)));
            }
            bs.push(Array1::from(b));
        }
        let n_in = layer_sizes[0];
        Ok(Mlp {
            layer_sizes: layer_sizes.to_vec(),
            weights: ws,
            biases: bs,
            dropout_rate,
            rng_seed: 0,
            input_mean: Array1::zeros(n_in),
            input_std: Array1::ones(n_in),
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("non-empty")
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (
            self.input_mean.as_slice().expect("contiguous"),
            self.input_std.as_slice().expect("contiguous"),
        )
    }

    /// Sets the per-feature z-score applied before the first layer.
    /// Zero spreads are replaced by one.
    pub fn set_standardization(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let n = self.input_size();
        for len in [mean.len(), std.len()] {
            if len != n {
                return Err(NnError::DimensionMismatch { expected: n, found: len });
            }
        }
        self.input_mean = Array1::from(mean.to_vec());
        self.input_std = std.iter().map(|&s| if s > 0.0 && s.is_finite() { s } else { 1.0 }).collect();
        Ok(())
    }

    fn standardize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_std
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_size() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_size(),
                found: len,
            });
        }
        Ok(())
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f64], mode: Mode<'_>) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let batch = ArrayView2::from_shape((1, x.len()), x).expect("row");
        let rng = match mode {
            Mode::Infer => None,
            Mode::Train(rng) => Some(rng),
        };
        let trace = self.run(self.standardize(batch), rng);
        Ok(trace.probs.into_raw_vec_and_offset().0)
    }

    /// Infer-mode probabilities for a batch of rows.
    pub fn predict_proba(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let batch = self.batch(xs)?;
        let probs = self.run(self.standardize(batch.view()), None).probs;
        Ok(probs.rows().into_iter().map(|r| r.to_vec()).collect())
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(xs)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        let pred = self.predict(xs)?;
        let correct = pred.iter().zip(ys).filter(|(p, y)| p == y).count();
        Ok(correct as f64 / ys.len().max(1) as f64)
    }

    /// Mean infer-mode cross-entropy.
    pub fn mean_loss(&self, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64> {
        let probs = self.predict_proba(xs)?;
        let mut total = 0.0;
        for (p, &y) in probs.iter().zip(ys) {
            total += loss(p, y)?;
        }
        Ok(total / ys.len().max(1) as f64)
    }

    fn batch(&self, xs: &[Vec<f64>]) -> Result<Array2<f64>> {
        let n_in = self.input_size();
        let mut flat = Vec::with_capacity(xs.len() * n_in);
        for x in xs {
            self.check_input(x.len())?;
            flat.extend_from_slice(x);
        }
        Ok(Array2::from_shape_vec((xs.len(), n_in), flat).expect("shape checked"))
    }

    fn run(&self, input: Array2<f64>, mut rng: Option<&mut ChaCha8Rng>) -> Trace {
        let n_layers = self.weights.len();
        let keep = 1.0 - self.dropout_rate;
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut a = input;
        for l in 0..n_layers {
            let z = a.dot(&self.weights[l]) + &self.biases[l];
            inputs.push(a);
            if l + 1 == n_layers {
                let mut probs = z;
                softmax_rows(&mut probs);
                return Trace {
                    inputs,
                    pre,
                    masks,
                    probs,
                };
            }
            let mut act = z.mapv(|v| v.max(0.0));
            let mask = match rng.as_deref_mut() {
                Some(rng) if self.dropout_rate > 0.0 => {
                    let m = Array2::from_shape_fn(act.raw_dim(), |_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                    act *= &m;
                    Some(m)
                }
                _ => None,
            };
            pre.push(z);
            masks.push(mask);
            a = act;
        }
        unreachable!("at least one layer")
    }

    /// Mean loss and its gradients over a standardized batch.
    fn gradients(
        &self,
        input: Array2<f64>,
        targets: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> (f64, Vec<Array2<f64>>, Vec<Array1<f64>>) {
        let n = targets.len() as f64;
        let trace = self.run(input, rng);
        let mut loss_sum = 0.0;
        let mut delta = trace.probs.clone();
        for (i, &t) in targets.iter().enumerate() {
            loss_sum += clamped_nll(trace.probs[[i, t]]);
            delta[[i, t]] -= 1.0;
        }
        delta /= n;

        let n_layers = self.weights.len();
        let mut grad_w = vec![Array2::zeros((0, 0)); n_layers];
        let mut grad_b = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            grad_w[l] = trace.inputs[l].t().dot(&delta);
            grad_b[l] = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut back = delta.dot(&self.weights[l].t());
            // ReLU'(0) is taken as 1/2, the mean of the one-sided derivatives
            back.zip_mut_with(&trace.pre[l - 1], |d, &z| {
                *d *= if z > 0.0 {
                    1.0
                } else if z == 0.0 {
                    0.5
                } else {
                    0.0
                }
            });
            if let Some(mask) = &trace.masks[l - 1] {
                back *= mask;
            }
            delta = back;
        }
        (loss_sum / n, grad_w, grad_b)
    }

    /// Parameter `k` in layer order, weights (row-major) before biases.
    fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            if k < w.len() {
                let cols = w.ncols();
                return &mut w[[k / cols, k % cols]];
            }
            k -= w.len();
            if k < b.len() {
                return &mut b[k];
            }
            k -= b.len();
        }
        panic!("parameter index out of range")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile::from(self)).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Mlp> {
        serde_json::from_str::<ModelFile>(text)?.into_mlp()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Mlp> {
        Mlp::from_json(&std::fs::read_to_string(path)?)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    layer_sizes: Vec<usize>,
    dropout_rate: f64,
    rng_seed: u64,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    /// Row-major `fan_in × fan_out` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<&Mlp> for ModelFile {
    fn from(m: &Mlp) -> Self {
        Self {
            format_version: MODEL_FORMAT_VERSION,
            layer_sizes: m.layer_sizes.clone(),
            dropout_rate: m.dropout_rate,
            rng_seed: m.rng_seed,
            input_mean: m.input_mean.to_vec(),
            input_std: m.input_std.to_vec(),
            weights: m.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: m.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl ModelFile {
    fn into_mlp(self) -> Result<Mlp> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(NnError::VersionMismatch {
                found: self.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let mut m = Mlp::from_parameters(&self.layer_sizes, self.weights, self.biases, self.dropout_rate)?;
        m.rng_seed = self.rng_seed;
        m.set_standardization(&self.input_mean, &self.input_std)?;
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Mini-batch gradients are rescaled to at most this global L2 norm.
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            patience: 20,
            validation_fraction: 0.15,
            max_grad_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(NnError::InvalidConfig(msg.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if self.max_epochs < 1 {
            return bad("max_epochs must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean train-mode batch loss per epoch.
    pub train_loss: Vec<f64>,
    /// Infer-mode loss on the held-out split per epoch (empty without one).
    pub validation_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs_run(&self) -> usize {
        self.train_loss.len()
    }
}

/// Stratified hold-out: `fraction` of each class, keeping at least one
/// training example per class.
fn stratified_split(ys: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n_classes = ys.iter().max().map_or(0, |m| m + 1);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..ys.len()).filter(|&i| ys[i] == c).collect();
        idx.shuffle(rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        valid.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    valid.sort_unstable();
    (train, valid)
}

fn column_stats(xs: &[Vec<f64>], idx: &[usize], dims: usize) -> (Vec<f64>, Vec<f64>) {
    let n = idx.len() as f64;
    let mut mean = vec![0.0; dims];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(&xs[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dims];
    for &i in idx {
        for ((s, v), m) in var.iter_mut().zip(&xs[i]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

/// Trains `model` and returns the parameters of the best validation epoch.
///
/// Without a validation split (tiny data), the infer-mode training loss
/// drives early stopping instead.
pub fn train(mut model: Mlp, xs: &[Vec<f64>], ys: &[usize], cfg: &TrainConfig) -> Result<(Mlp, TrainHistory)> {
    cfg.validate()?;
    if xs.len() != ys.len() {
        return Err(NnError::InvalidTarget(format!("{} inputs but {} targets", xs.len(), ys.len())));
    }
    for x in xs {
        model.check_input(x.len())?;
    }
    if let Some(&bad) = ys.iter().find(|&&y| y >= model.output_size()) {
        return Err(NnError::InvalidTarget(format!("class {bad} with {} outputs", model.output_size())));
    }
    let mut seen = ys.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(NnError::SingleClassData);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
    rng.set_stream(1);
    let (train_idx, val_idx) = stratified_split(ys, cfg.validation_fraction, &mut rng);
    let (mean, std) = column_stats(xs, &train_idx, model.input_size());
    model.set_standardization(&mean, &std)?;

    let gather = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<usize>) {
        (idx.iter().map(|&i| xs[i].clone()).collect(), idx.iter().map(|&i| ys[i]).collect())
    };
    let (train_x, train_y) = gather(&train_idx);
    let (val_x, val_y) = gather(&val_idx);
    let train_all = model.standardize(model.batch(&train_x)?.view());

    let mut velocity_w: Vec<Array2<f64>> = model.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect();
    let mut velocity_b: Vec<Array1<f64>> = model.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.clone());
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut since_best = 0;

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Array2::zeros((chunk.len(), model.input_size()));
            for (r, &i) in chunk.iter().enumerate() {
                batch.row_mut(r).assign(&train_all.slice(s![i, ..]));
            }
            let targets: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let (batch_loss, gw, gb) = model.gradients(batch, &targets, Some(&mut rng));
            if !batch_loss.is_finite() {
                return Err(NnError::NonFiniteLoss { epoch });
            }
            epoch_loss += batch_loss * chunk.len() as f64;
            let norm = gw.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
                + gb.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
            let step = cfg.learning_rate * (cfg.max_grad_norm / norm.sqrt()).min(1.0);
            for l in 0..model.weights.len() {
                velocity_w[l] *= cfg.momentum;
                velocity_w[l].scaled_add(-step, &gw[l]);
                model.weights[l] += &velocity_w[l];
                velocity_b[l] *= cfg.momentum;
                velocity_b[l].scaled_add(-step, &gb[l]);
                model.biases[l] += &velocity_b[l];
            }
        }
        history.train_loss.push(epoch_loss / train_y.len() as f64);

        let monitored = if val_y.is_empty() {
            model.mean_loss(&train_x, &train_y)?
        } else {
            let v = model.mean_loss(&val_x, &val_y)?;
            history.validation_loss.push(v);
            v
        };
        if !monitored.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch });
        }
        if monitored < best.0 {
            best = (monitored, model.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.1, history))
}

/// Largest relative difference between back-propagated and central-difference
/// gradients of the infer-mode loss, over up to 400 sampled parameters
/// (all of them for small nets).
pub fn gradient_check(model: &Mlp, x: &[f64], target: usize, epsilon: f64) -> Result<f64> {
    model.check_input(x.len())?;
    if target >= model.output_size() {
        return Err(NnError::InvalidTarget(format!("class {target} with {} outputs", model.output_size())));
    }
    let input = model.standardize(ArrayView2::from_shape((1, x.len()), x).expect("row"));
    let (_, gw, gb) = model.gradients(input.clone(), &[target], None);
    let analytic: Vec<f64> = gw
        .iter()
        .zip(&gb)
        .flat_map(|(w, b)| w.iter().chain(b.iter()).copied().collect::<Vec<_>>())
        .collect();

    let total = analytic.len();
    let mut picks: Vec<usize> = (0..total).collect();
    if total > 400 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6c_6f_73_73);
        picks.shuffle(&mut rng);
        picks.truncate(400);
        picks.sort_unstable();
    }

    let loss_at = |m: &Mlp| -> f64 {
        let p = m.run(input.clone(), None).probs;
        clamped_nll(p[[0, target]])
    };
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for &k in &picks {
        let original = *probe.param_mut(k);
        *probe.param_mut(k) = original + epsilon;
        let plus = loss_at(&probe);
        *probe.param_mut(k) = original - epsilon;
        let minus = loss_at(&probe);
        *probe.param_mut(k) = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_node_topologies() {
        let m = init_mlp(&[6, 560, 560, 560, 560, 2], 0.5, 1).unwrap();
        assert_eq!(m.output_size(), 2);
        assert_eq!(m.parameter_count(), 6 * 560 + 3 * 560 * 560 + 560 * 2 + 4 * 560 + 2);
        let m = init_mlp(&[7, 560, 560, 560, 560, 4], 0.5, 1).unwrap();
        assert_eq!(m.layer_sizes(), &[7, 560, 560, 560, 560, 4]);
    }

    #[test]
    fn init_is_deterministic_and_he_scaled() {
        let a = init_mlp(&[50, 400, 3], 0.5, 9).unwrap();
        assert_eq!(a, init_mlp(&[50, 400, 3], 0.5, 9).unwrap());
        assert_ne!(a, init_mlp(&[50, 400, 3], 0.5, 10).unwrap());
        let w = &a.weights[0];
        let var = w.iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.004, "variance {var}");
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn invalid_topologies() {
        assert!(matches!(init_mlp(&[3, 2], 0.0, 0), Err(NnError::InvalidTopology(_))));
        assert!(matches!(init_mlp(&[3, 0, 2], 0.0, 0), Err(NnError::InvalidTopology(_))));
        assert!(matches!(init_mlp(&[3, 4, 2], 1.0, 0), Err(NnError::InvalidTopology(_))));
    }

    #[test]
    fn equal_logits_give_uniform_output() {
        let m = Mlp::from_parameters(&[2, 4], vec![vec![0.0; 8]], vec![vec![0.3; 4]], 0.0).unwrap();
        let p = m.forward(&[1.0, -2.0], Mode::Infer).unwrap();
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn relu_clips_negative_units() {
        // one hidden unit with pre-activation −3 feeding a 2-way output
        let m = Mlp::from_parameters(&[1, 1, 2], vec![vec![-3.0], vec![1.0, -1.0]], vec![vec![0.0], vec![0.0, 0.0]], 0.0)
            .unwrap();
        let p = m.forward(&[1.0], Mode::Infer).unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn affine_softmax_matches_hand_evaluation() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let m = Mlp::from_parameters(&[3, 3], vec![w], vec![vec![0.1, -0.2, 0.0]], 0.0).unwrap();
        let p = m.forward(&[1.0, 2.0, 0.5], Mode::Infer).unwrap();
        let z = [1.1f64, 1.8, 0.5];
        let sum: f64 = z.iter().map(|v| v.exp()).sum();
        for (pi, zi) in p.iter().zip(z) {
            assert!((pi - zi.exp() / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let m = init_mlp(&[3, 4, 2], 0.0, 0).unwrap();
        assert!(matches!(
            m.forward(&[1.0], Mode::Infer),
            Err(NnError::DimensionMismatch { expected: 3, found: 1 })
        ));
    }

    #[test]
    fn loss_examples() {
        assert!((loss(&[0.25; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss(&[0.0, 1.0], 1).unwrap(), 0.0);
        assert!((loss(&[1.0, 0.0], 1).unwrap() - 27.631021115928547).abs() < 1e-9);
        assert!(matches!(loss_one_hot(&[0.5, 0.5], &[1.0, 1.0]), Err(NnError::InvalidTarget(_))));
        assert!(matches!(loss(&[0.5, 0.5], 2), Err(NnError::InvalidTarget(_))));
    }

    #[test]
    fn gradient_check_small_net() {
        let m = init_mlp(&[4, 8, 3], 0.0, 3).unwrap();
        let err = gradient_check(&m, &[0.3, -1.2, 0.8, 2.0], 1, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradient_check_all_units_active() {
        let w1: Vec<f64> = (0..12).map(|i| 0.1 + 0.05 * i as f64).collect();
        let w2: Vec<f64> = (0..8).map(|i| 0.2 - 0.07 * i as f64).collect();
        let m = Mlp::from_parameters(&[3, 4, 2], vec![w1, w2], vec![vec![0.1; 4], vec![0.0; 2]], 0.0).unwrap();
        let err = gradient_check(&m, &[0.5, 1.0, 1.5], 0, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn gradient_check_at_zero_input() {
        let mut m = init_mlp(&[4, 6, 3], 0.0, 5).unwrap();
        for b in &mut m.biases {
            b.fill(0.0);
        }
        let err = gradient_check(&m, &[0.0; 4], 2, 1e-7).unwrap();
        assert!(err.is_finite() && err < 1e-6, "relative error {err}");
    }

    #[test]
    fn serialization_round_trips_bit_exactly() {
        let mut m = init_mlp(&[3, 5, 2], 0.5, 11).unwrap();
        m.set_standardization(&[1.0, 2.0, 3.0], &[0.5, 0.0, 2.0]).unwrap();
        let back = Mlp::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let stale = m.to_json().replace("\"format_version\":1", "\"format_version\":99");
        assert!(matches!(Mlp::from_json(&stale), Err(NnError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn memorizes_one_sample_per_class() {
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let ys = vec![0, 1, 2];
        let m = init_mlp(&[2, 16, 3], 0.0, 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3000,
            patience: 3000,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (m, history) = train(m, &xs, &ys, &cfg).unwrap();
        assert!(history.validation_loss.is_empty());
        let l = m.mean_loss(&xs, &ys).unwrap();
        assert!(l < 1e-3, "loss {l} after {} epochs", history.epochs_run());
    }

    #[test]
    fn single_class_is_rejected() {
        let m = init_mlp(&[2, 4, 2], 0.0, 2).unwrap();
        let err = train(m, &[vec![0.0, 1.0], vec![1.0, 0.0]], &[1, 1], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, NnError::SingleClassData));
    }

    #[test]
    fn divergence_is_reported() {
        let xs: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64, (i % 7) as f64]).collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let m = init_mlp(&[2, 32, 32, 2], 0.0, 2).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e200,
            ..TrainConfig::default()
        };
        assert!(matches!(train(m, &xs, &ys, &cfg), Err(NnError::NonFiniteLoss { .. })));
    }

    #[test]
    fn stratified_split_keeps_class_balance() {
        let ys: Vec<usize> = (0..100).map(|i| usize::from(i >= 80)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (train, valid) = stratified_split(&ys, 0.15, &mut rng);
        assert_eq!(valid.iter().filter(|&&i| ys[i] == 0).count(), 12);
        assert_eq!(valid.iter().filter(|&&i| ys[i] == 1).count(), 3);
        assert_eq!(train.len() + valid.len(), 100);
    }
}

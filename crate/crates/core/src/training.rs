//! Loss assembly, Adam, and the epoch loop with early stopping.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::dataio::WindowSet;
use crate::error::{Error, Result};
use crate::recurrent::{Network, Noise};
use crate::variational::{
    ab_coefficient, ab_combine, draw_samples, kl_gaussian, log_prior, sum_scalars, DivergenceKind,
    DivergenceSpec,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::validation_fraction")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub divergence: DivergenceSpec,
    /// Likelihood scale in scaled units.
    #[serde(default = "defaults::obs_sigma")]
    pub obs_sigma: f64,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    #[serde(default = "defaults::patience")]
    pub patience: usize,
    #[serde(default = "defaults::min_delta")]
    pub min_delta: f64,
    #[serde(default)]
    pub seed: u64,
    /// Dropout on encoder features during training.
    #[serde(default)]
    pub dropout: f64,
    /// Rescale the global gradient to at most this norm.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

mod defaults {
    pub fn epochs() -> usize {
        100
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn learning_rate() -> f64 {
        1e-3
    }
    pub fn validation_fraction() -> f64 {
        0.2
    }
    pub fn obs_sigma() -> f64 {
        0.05
    }
    pub fn patience() -> usize {
        10
    }
    pub fn min_delta() -> f64 {
        1e-6
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            validation_fraction: defaults::validation_fraction(),
            divergence: DivergenceSpec::default(),
            obs_sigma: defaults::obs_sigma(),
            patience: defaults::patience(),
            min_delta: defaults::min_delta(),
            seed: 0,
            dropout: 0.0,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate", "must be a positive number"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation_fraction", "must lie in (0, 1)"));
        }
        if !(self.obs_sigma > 0.0) || !self.obs_sigma.is_finite() {
            return Err(Error::config("obs_sigma", "must be a positive number"));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::config("min_delta", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if let Some(n) = self.max_grad_norm {
            if !(n > 0.0) {
                return Err(Error::config("max_grad_norm", "must be > 0"));
            }
        }
        self.divergence
            .validate()
            .map_err(|e| Error::config("divergence", e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epochs_run: usize,
    pub stopped_early: bool,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    /// Seconds.
    pub wall_time: f64,
}

/// Equality ignores `wall_time`.
impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.val_loss == other.val_loss
            && self.epochs_run == other.epochs_run
            && self.stopped_early == other.stopped_early
            && self.best_epoch == other.best_epoch
    }
}

impl TrainReport {
    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch - 1]
    }

    /// `epoch,train_loss,val_loss` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for (i, (t, v)) in self.train_loss.iter().zip(&self.val_loss).enumerate() {
            let _ = writeln!(out, "{},{},{}", i + 1, t, v);
        }
        out
    }
}

/// Independent Gaussian negative log-likelihood summed over every entry of
/// `predicted` (any shape, equal to `target`).
pub fn gaussian_nll(g: &mut Graph, predicted: NodeId, target: &Matrix, obs_sigma: f64) -> Result<NodeId> {
    if !(obs_sigma > 0.0) {
        return Err(Error::InvalidValue(format!("obs_sigma must be > 0, got {obs_sigma}")));
    }
    if g.value(predicted).dim() != target.dim() {
        return Err(Error::ShapeError(format!(
            "prediction {:?} vs target {:?}",
            g.value(predicted).dim(),
            target.dim()
        )));
    }
    let n = target.len() as f64;
    let t = g.constant(target.clone())?;
    let r = g.sub(predicted, t)?;
    let r2 = g.square(r)?;
    let s = g.sum(r2)?;
    let s = g.scale(s, 0.5 / (obs_sigma * obs_sigma))?;
    g.add_scalar(s, 0.5 * n * (2.0 * PI * obs_sigma * obs_sigma).ln())
}

/// What a batch loss needs to know beyond the batch itself.
#[derive(Clone, Debug)]
pub struct LossSettings<'a> {
    pub divergence: &'a DivergenceSpec,
    pub obs_sigma: f64,
    pub num_batches: usize,
    /// Number of training windows; scales the batch likelihood to the data
    /// set inside the alpha-beta joint.
    pub num_train: usize,
    pub dropout: f64,
}

/// One batch: `inputs` is `k × B`, `targets` is `horizon × B`.
pub struct Batch<'a> {
    pub inputs: &'a Matrix,
    pub targets: &'a Matrix,
}

/// Graph nodes of an assembled batch loss.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub nll: NodeId,
    pub divergence: NodeId,
}

fn forward_with_dropout(
    g: &mut Graph,
    net: &Network,
    weights: &[NodeId],
    inputs: &Matrix,
    dropout: f64,
    rng: &mut dyn rand::RngCore,
) -> Result<NodeId> {
    if dropout <= 0.0 {
        return net.forward(g, weights, inputs);
    }
    let seq = net.sequence(g, inputs)?;
    let features = net.encode(g, weights, &seq)?;
    let (r, c) = g.value(features).dim();
    let keep = 1.0 - dropout;
    let mask = Matrix::from_shape_simple_fn((r, c), || {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let mask = g.constant(mask)?;
    let dropped = g.mul(features, mask)?;
    net.head(g, weights, dropped)
}

/// Mean per-window NLL over the batch plus `divergence / num_batches`.
/// Bayesian networks draw fresh weights; the alpha-beta estimator draws
/// `mc_samples` sets and averages the NLL over them.
pub fn batch_loss(
    g: &mut Graph,
    net: &Network,
    batch: &Batch<'_>,
    settings: &LossSettings<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<(LossNodes, Vec<NodeId>)> {
    let b = batch.inputs.ncols();
    if b == 0 || batch.targets.ncols() != b {
        return Err(Error::InvalidValue("empty or misaligned batch".into()));
    }
    if settings.num_batches == 0 {
        return Err(Error::InvalidValue("num_batches must be >= 1".into()));
    }
    let spec = settings.divergence;
    let bound = net.bind(g, true)?;
    let leaves = bound.leaves();
    let per_window = 1.0 / b as f64;
    let div_weight = 1.0 / settings.num_batches as f64;

    let mean_nll = |g: &mut Graph, rng: &mut ChaCha8Rng, weights: &[NodeId]| -> Result<NodeId> {
        let pred = forward_with_dropout(g, net, weights, batch.inputs, settings.dropout, rng)?;
        let nll = gaussian_nll(g, pred, batch.targets, settings.obs_sigma)?;
        g.scale(nll, per_window)
    };

    if !net.config.bayesian || spec.kind == DivergenceKind::None {
        let weights = if net.config.bayesian {
            net.weights(g, &bound, Noise::Draw(rng))?
        } else {
            net.weights(g, &bound, Noise::Zero)?
        };
        let nll = mean_nll(g, rng, &weights)?;
        let zero = g.scalar(0.0)?;
        return Ok((
            LossNodes {
                total: nll,
                nll,
                divergence: zero,
            },
            leaves,
        ));
    }

    let layers = bound.variational_layers();
    let (nll, divergence) = match spec.kind {
        DivergenceKind::KlClosedForm => {
            let weights = net.weights(g, &bound, Noise::Draw(rng))?;
            let nll = mean_nll(g, rng, &weights)?;
            let parts = layers
                .iter()
                .map(|vg| kl_gaussian(g, vg))
                .collect::<Result<Vec<_>>>()?;
            (nll, sum_scalars(g, &parts)?)
        }
        DivergenceKind::AbCollapsed => {
            let (weights, lq) = draw_samples(g, &layers, rng)?;
            let nll = mean_nll(g, rng, &weights)?;
            let coefficient = ab_coefficient(spec.alpha, spec.beta)?;
            (nll, g.scale(lq, coefficient)?)
        }
        DivergenceKind::AbMonteCarlo => {
            let data_scale = settings.num_train as f64 / b as f64;
            let mut nlls = Vec::with_capacity(spec.mc_samples);
            let mut log_q = Vec::with_capacity(spec.mc_samples);
            let mut log_p = Vec::with_capacity(spec.mc_samples);
            for _ in 0..spec.mc_samples {
                let (weights, lq) = draw_samples(g, &layers, rng)?;
                let nll = mean_nll(g, rng, &weights)?;
                // log p(data | w) for the whole training set, estimated
                // from this batch, plus log p(w).
                let log_lik = g.scale(nll, -(b as f64) * data_scale)?;
                let priors = weights
                    .iter()
                    .zip(&layers)
                    .map(|(w, vg)| log_prior(g, *w, vg.prior_sigma))
                    .collect::<Result<Vec<_>>>()?;
                let prior = sum_scalars(g, &priors)?;
                log_p.push(g.add(log_lik, prior)?);
                log_q.push(lq);
                nlls.push(nll);
            }
            let stacked = g.concat_rows(&nlls)?;
            let nll = g.mean(stacked)?;
            (nll, ab_combine(g, &log_q, &log_p, spec.alpha, spec.beta)?)
        }
        DivergenceKind::None => unreachable!("handled above"),
    };
    let weighted = g.scale(divergence, div_weight)?;
    let total = g.add(nll, weighted)?;
    Ok((
        LossNodes {
            total,
            nll,
            divergence,
        },
        leaves,
    ))
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: shapes.iter().map(|s| Matrix::zeros(*s)).collect(),
            v: shapes.iter().map(|s| Matrix::zeros(*s)).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeError(format!(
                "optimizer holds {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.dim() != g.dim() || p.dim() != m.dim() {
                return Err(Error::ShapeError(format!(
                    "param {:?}, grad {:?}, state {:?}",
                    p.dim(),
                    g.dim(),
                    m.dim()
                )));
            }
        }
        self.t += 1;
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.epsilon, self.learning_rate);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) {
    let norm = grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads {
            g.mapv_inplace(|v| v * f);
        }
    }
}

const VALIDATION_CHUNK: usize = 512;

/// Mean per-window NLL of the zero-noise network over the given horizon
/// slice `start..start + net.config.horizon` of `windows`.
pub fn validation_loss(net: &Network, windows: &WindowSet, start: usize, obs_sigma: f64) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidValue("empty validation set".into()));
    }
    let end = start + net.config.horizon;
    let all: Vec<usize> = (0..windows.len()).collect();
    let mut total = 0.0;
    for chunk in all.chunks(VALIDATION_CHUNK) {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false)?;
        let weights = net.weights(&mut g, &bound, Noise::Zero)?;
        let pred = net.forward(&mut g, &weights, &windows.input_block(chunk))?;
        let nll = gaussian_nll(&mut g, pred, &windows.target_block(chunk, start, end), obs_sigma)?;
        total += g.scalar_value(nll);
    }
    Ok(total / windows.len() as f64)
}

/// Trains `net` on the full horizon of the window sets.
pub fn train(net: &mut Network, train_set: &WindowSet, val_set: &WindowSet, config: &TrainConfig) -> Result<TrainReport> {
    train_block(net, train_set, val_set, config, 0)
}

/// Trains `net` on target steps `start..start + net.config.horizon`.
/// Validation runs at the posterior mean after every epoch; the parameters
/// of the best validation epoch are restored at the end.
pub fn train_block(
    net: &mut Network,
    train_set: &WindowSet,
    val_set: &WindowSet,
    config: &TrainConfig,
    start: usize,
) -> Result<TrainReport> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidValue("training and validation sets must be nonempty".into()));
    }
    let end = start + net.config.horizon;
    if end > train_set.horizon || end > val_set.horizon {
        return Err(Error::ShapeError(format!(
            "block {start}..{end} exceeds window horizon {}",
            train_set.horizon
        )));
    }
    if train_set.k != val_set.k {
        return Err(Error::ShapeError("train and validation windows differ in k".into()));
    }
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shapes: Vec<(usize, usize)> = net.tensors().iter().map(|m| m.dim()).collect();
    let mut adam = Adam::new(config.learning_rate, &shapes);
    let num_batches = train_set.len().div_ceil(config.batch_size);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut train_loss = Vec::new();
    let mut val_loss = Vec::new();
    let mut best = (f64::INFINITY, 0usize, net.flat_parameters());
    let mut stall = 0;
    let mut stopped_early = false;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let inputs = train_set.input_block(chunk);
            let targets = train_set.target_block(chunk, start, end);
            let settings = LossSettings {
                divergence: &config.divergence,
                obs_sigma: config.obs_sigma,
                num_batches,
                num_train: train_set.len(),
                dropout: config.dropout,
            };
            let mut g = Graph::new();
            let (nodes, leaves) = batch_loss(
                &mut g,
                net,
                &Batch {
                    inputs: &inputs,
                    targets: &targets,
                },
                &settings,
                &mut rng,
            )?;
            let loss = g.scalar_value(nodes.total);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            epoch_total += loss;
            g.backward(nodes.total)?;
            let mut grads: Vec<Matrix> = leaves.iter().map(|id| g.grad(*id)).collect();
            if let Some(max_norm) = config.max_grad_norm {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.step(net.tensors_mut(), &grads)?;
        }
        let epoch_loss = epoch_total / num_batches as f64;
        if net.flat_parameters().iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        let v = validation_loss(net, val_set, start, config.obs_sigma)?;
        if !v.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        train_loss.push(epoch_loss);
        val_loss.push(v);
        if v < best.0 - config.min_delta {
            best = (v, epoch, net.flat_parameters());
            stall = 0;
        } else {
            stall += 1;
        }
        if config.patience > 0 && stall >= config.patience {
            stopped_early = epoch < config.epochs;
            break;
        }
    }
    // The first epoch always improves on infinity, so `best` is populated.
    let (_, best_epoch, params) = best;
    net.set_flat_parameters(&params)?;
    Ok(TrainReport {
        epochs_run: train_loss.len(),
        train_loss,
        val_loss,
        stopped_early,
        best_epoch,
        wall_time: clock.elapsed().as_secs_f64(),
    })
}

//! Recurrent cells (Elman RNN, LSTM, bidirectional LSTM) and the dense
//! multi-output head.
//!
//! Activations are laid out feature-major: a batch of `B` windows at one
//! time step is an `input_dim × B` matrix, hidden states are `hidden × B`,
//! and the head emits `horizon × B`.

use rand::{Rng, RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix, NodeId};
use crate::error::{Error, Result};
use crate::variational::{sample_weights, standard_normal, BoundGaussian, VariationalGaussian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Rnn,
    Lstm,
    Bilstm,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Bilstm => "bilstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(CellKind::Rnn),
            "lstm" => Ok(CellKind::Lstm),
            "bilstm" => Ok(CellKind::Bilstm),
            other => Err(Error::config("cell_kind", format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub cell_kind: CellKind,
    pub hidden: usize,
    pub input_dim: usize,
    pub horizon: usize,
    pub bayesian: bool,
    #[serde(default = "default_prior_sigma")]
    pub prior_sigma: f64,
    #[serde(default = "default_rho_init")]
    pub rho_init: f64,
}

fn default_prior_sigma() -> f64 {
    1.0
}

fn default_rho_init() -> f64 {
    -3.0
}

impl NetworkConfig {
    pub fn new(cell_kind: CellKind, hidden: usize, horizon: usize, bayesian: bool) -> Self {
        NetworkConfig {
            cell_kind,
            hidden,
            input_dim: 1,
            horizon,
            bayesian,
            prior_sigma: default_prior_sigma(),
            rho_init: default_rho_init(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be >= 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input_dim", "must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if !(self.prior_sigma > 0.0) {
            return Err(Error::config("prior_sigma", "must be > 0"));
        }
        Ok(())
    }

    /// Width of the feature vector feeding the head.
    pub fn feature_dim(&self) -> usize {
        match self.cell_kind {
            CellKind::Bilstm => 2 * self.hidden,
            _ => self.hidden,
        }
    }
}

/// One weight tensor, either a point value or a variational posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTensor {
    Fixed(Matrix),
    Variational(VariationalGaussian),
}

impl ParamTensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            ParamTensor::Fixed(m) => m.dim(),
            ParamTensor::Variational(vg) => vg.shape(),
        }
    }

    /// Point value used by zero-noise passes.
    pub fn mean(&self) -> &Matrix {
        match self {
            ParamTensor::Fixed(m) => m,
            ParamTensor::Variational(vg) => vg.mu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub tensor: ParamTensor,
}

/// Graph handles for one [`ParamTensor`].
#[derive(Clone, Copy, Debug)]
pub enum BoundParam {
    Fixed(NodeId),
    Variational(BoundGaussian),
}

#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub params: Vec<BoundParam>,
}

impl BoundNetwork {
    pub fn variational_layers(&self) -> Vec<BoundGaussian> {
        self.params
            .iter()
            .filter_map(|p| match p {
                BoundParam::Variational(vg) => Some(*vg),
                BoundParam::Fixed(_) => None,
            })
            .collect()
    }

    /// Trainable leaves in the same order as [`Network::tensors_mut`].
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for p in &self.params {
            match p {
                BoundParam::Fixed(id) => out.push(*id),
                BoundParam::Variational(vg) => {
                    out.push(vg.mu);
                    out.push(vg.rho);
                }
            }
        }
        out
    }
}

/// Where weight-sampling noise comes from on a forward pass.
pub enum Noise<'a> {
    /// Use posterior means.
    Zero,
    /// Fresh standard-normal draws.
    Draw(&'a mut dyn RngCore),
    /// Explicit noise, one matrix per variational tensor in layout order.
    Given(&'a [Matrix]),
}

#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub c: NodeId,
    pub y: NodeId,
}

/// LSTM weights with the four gates stacked row-wise as `[i; f; o; c~]`.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    pub w: NodeId,
    pub b: NodeId,
    pub hidden: usize,
}

impl LstmWeights {
    /// Stacks `w_i, w_f, w_o, w_c` (each `hidden × (hidden + input)`) and the
    /// matching `hidden × 1` biases.
    pub fn from_gates(g: &mut Graph, w: [NodeId; 4], b: [NodeId; 4]) -> Result<Self> {
        let (hidden, cols) = g.value(w[0]).dim();
        for id in &w[1..] {
            if g.value(*id).dim() != (hidden, cols) {
                return Err(Error::ShapeError("LSTM gate weights differ in shape".into()));
            }
        }
        for id in &b {
            if g.value(*id).dim() != (hidden, 1) {
                return Err(Error::ShapeError(format!(
                    "LSTM bias must be {hidden}x1, got {:?}",
                    g.value(*id).dim()
                )));
            }
        }
        if cols <= hidden {
            return Err(Error::ShapeError(format!(
                "gate weights need hidden + input columns, got {cols} for hidden {hidden}"
            )));
        }
        Ok(LstmWeights {
            w: g.concat_rows(&w)?,
            b: g.concat_rows(&b)?,
            hidden,
        })
    }

    pub fn input_dim(&self, g: &Graph) -> usize {
        g.value(self.w).ncols() - self.hidden
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineWeights {
    pub w: NodeId,
    pub b: NodeId,
}

pub fn zero_state(g: &mut Graph, hidden: usize, batch: usize) -> Result<CellState> {
    let c = g.constant(Matrix::zeros((hidden, batch)))?;
    let y = g.constant(Matrix::zeros((hidden, batch)))?;
    Ok(CellState { c, y })
}

fn check_step_shapes(g: &Graph, x_t: NodeId, hidden: usize, input: usize, prev_y: NodeId) -> Result<()> {
    let x = g.value(x_t).dim();
    let y = g.value(prev_y).dim();
    if x.0 != input || y.0 != hidden || x.1 != y.1 {
        return Err(Error::ShapeError(format!(
            "step input {x:?} / state {y:?} incompatible with input {input}, hidden {hidden}"
        )));
    }
    Ok(())
}

/// One LSTM step on `[y_{t-1}; x_t]`:
///
/// ```text
/// i = σ(W_i z + b_i)   f = σ(W_f z + b_f)   o = σ(W_o z + b_o)
/// c~ = tanh(W_c z + b_c)
/// c_t = c_{t-1} ⊙ f + i ⊙ c~      y_t = o ⊙ tanh(c_t)
/// ```
pub fn lstm_cell_step(g: &mut Graph, params: &LstmWeights, x_t: NodeId, prev: CellState) -> Result<CellState> {
    let h = params.hidden;
    check_step_shapes(g, x_t, h, params.input_dim(g), prev.y)?;
    if g.value(prev.c).dim() != g.value(prev.y).dim() {
        return Err(Error::ShapeError("cell and hidden state differ in shape".into()));
    }
    let z = g.concat_rows(&[prev.y, x_t])?;
    let pre = g.matmul(params.w, z)?;
    let pre = g.add_column(pre, params.b)?;
    let i_pre = g.slice_rows(pre, 0, h)?;
    let f_pre = g.slice_rows(pre, h, 2 * h)?;
    let o_pre = g.slice_rows(pre, 2 * h, 3 * h)?;
    let c_pre = g.slice_rows(pre, 3 * h, 4 * h)?;
    let i = g.sigmoid(i_pre)?;
    let f = g.sigmoid(f_pre)?;
    let o = g.sigmoid(o_pre)?;
    let candidate = g.tanh(c_pre)?;
    let keep = g.mul(prev.c, f)?;
    let write = g.mul(i, candidate)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let y = g.mul(o, tc)?;
    Ok(CellState { c, y })
}

/// Elman update `y_t = tanh(W [y_{t-1}; x_t] + b)`.
pub fn rnn_cell_step(g: &mut Graph, params: &AffineWeights, x_t: NodeId, prev_y: NodeId) -> Result<NodeId> {
    let (hidden, cols) = g.value(params.w).dim();
    if cols <= hidden {
        return Err(Error::ShapeError("RNN weights need hidden + input columns".into()));
    }
    check_step_shapes(g, x_t, hidden, cols - hidden, prev_y)?;
    let z = g.concat_rows(&[prev_y, x_t])?;
    let pre = g.matmul(params.w, z)?;
    let pre = g.add_column(pre, params.b)?;
    g.tanh(pre)
}

fn batch_of(g: &Graph, sequence: &[NodeId]) -> Result<usize> {
    let first = sequence
        .first()
        .ok_or_else(|| Error::InvalidValue("empty input sequence".into()))?;
    Ok(g.value(*first).ncols())
}

/// Final hidden output of a unidirectional LSTM over `sequence`.
pub fn lstm_forward(g: &mut Graph, params: &LstmWeights, sequence: &[NodeId]) -> Result<NodeId> {
    let batch = batch_of(g, sequence)?;
    let mut state = zero_state(g, params.hidden, batch)?;
    for x in sequence {
        state = lstm_cell_step(g, params, *x, state)?;
    }
    Ok(state.y)
}

/// `[y_fwd_last; y_bwd_last]`: the forward cell reads left to right, the
/// backward cell right to left, both from zero states.
pub fn bilstm_forward(g: &mut Graph, fwd: &LstmWeights, bwd: &LstmWeights, sequence: &[NodeId]) -> Result<NodeId> {
    let batch = batch_of(g, sequence)?;
    let mut forward = zero_state(g, fwd.hidden, batch)?;
    let mut backward = zero_state(g, bwd.hidden, batch)?;
    for x in sequence {
        forward = lstm_cell_step(g, fwd, *x, forward)?;
    }
    for x in sequence.iter().rev() {
        backward = lstm_cell_step(g, bwd, *x, backward)?;
    }
    g.concat_rows(&[forward.y, backward.y])
}

pub fn rnn_forward(g: &mut Graph, params: &AffineWeights, sequence: &[NodeId]) -> Result<NodeId> {
    let batch = batch_of(g, sequence)?;
    let hidden = g.value(params.w).nrows();
    let mut y = g.constant(Matrix::zeros((hidden, batch)))?;
    for x in sequence {
        y = rnn_cell_step(g, params, *x, y)?;
    }
    Ok(y)
}

/// Affine regression head, no output activation.
pub fn dense_head(g: &mut Graph, params: &AffineWeights, features: NodeId) -> Result<NodeId> {
    let (_, cols) = g.value(params.w).dim();
    let rows = g.value(features).nrows();
    if rows != cols {
        return Err(Error::ShapeError(format!(
            "head expects {cols} features, got {rows}"
        )));
    }
    let out = g.matmul(params.w, features)?;
    g.add_column(out, params.b)
}

const LSTM_TENSORS: [&str; 8] = ["w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c"];

/// A recurrent encoder plus dense head, deterministic or Bayesian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<NamedParam>,
}

impl Network {
    /// Weights uniform in `±1/sqrt(fan_in)`; Bayesian tensors use that as
    /// `mu` and a constant `rho_init`.
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let z = h + config.input_dim;
        let mut shapes: Vec<(String, (usize, usize), usize)> = Vec::new();
        match config.cell_kind {
            CellKind::Rnn => {
                shapes.push(("rnn.w".into(), (h, z), z));
                shapes.push(("rnn.b".into(), (h, 1), z));
            }
            CellKind::Lstm | CellKind::Bilstm => {
                let dirs: &[&str] = if config.cell_kind == CellKind::Bilstm {
                    &["fwd", "bwd"]
                } else {
                    &["fwd"]
                };
                for dir in dirs {
                    for (k, name) in LSTM_TENSORS.iter().enumerate() {
                        let shape = if k < 4 { (h, z) } else { (h, 1) };
                        shapes.push((format!("{dir}.{name}"), shape, z));
                    }
                }
            }
        }
        let feat = config.feature_dim();
        shapes.push(("head.w".into(), (config.horizon, feat), feat));
        shapes.push(("head.b".into(), (config.horizon, 1), feat));

        let mut params = Vec::with_capacity(shapes.len());
        for (name, shape, fan_in) in shapes {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mean = Matrix::from_shape_simple_fn(shape, || rng.random_range(-bound..=bound));
            let tensor = if config.bayesian {
                let rho = Matrix::from_elem(shape, config.rho_init);
                ParamTensor::Variational(VariationalGaussian::new(mean, rho, config.prior_sigma)?)
            } else {
                ParamTensor::Fixed(mean)
            };
            params.push(NamedParam { name, tensor });
        }
        Ok(Network { config, params })
    }

    /// Builds a network from explicit tensors, checking names and shapes
    /// against the layout `Network::new` would produce.
    pub fn from_params(config: NetworkConfig, params: Vec<NamedParam>) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Network::new(config.clone(), &mut rng)?;
        if template.params.len() != params.len() {
            return Err(Error::ShapeError(format!(
                "expected {} tensors, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.tensor.shape() != p.tensor.shape() {
                return Err(Error::ShapeError(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.name,
                    t.tensor.shape()
                )));
            }
            if matches!(p.tensor, ParamTensor::Variational(_)) != config.bayesian {
                return Err(Error::InvalidValue(format!(
                    "tensor `{}` mode does not match bayesian={}",
                    p.name, config.bayesian
                )));
            }
        }
        Ok(Network { config, params })
    }

    pub fn param(&self, name: &str) -> Option<&ParamTensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    /// Number of scalar trainable values (`mu` and `rho` both counted).
    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    /// Trainable matrices in binding order (`mu`, `rho` for variational).
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for p in &self.params {
            match &p.tensor {
                ParamTensor::Fixed(m) => out.push(m),
                ParamTensor::Variational(vg) => {
                    out.push(vg.mu());
                    out.push(vg.rho());
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for p in &mut self.params {
            match &mut p.tensor {
                ParamTensor::Fixed(m) => out.push(m),
                ParamTensor::Variational(vg) => {
                    let (mu, rho) = vg.parts_mut();
                    out.push(mu);
                    out.push(rho);
                }
            }
        }
        out
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|m| m.iter().copied()).collect()
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::ShapeError(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for m in self.tensors_mut() {
            for v in m.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundNetwork> {
        let params = self
            .params
            .iter()
            .map(|p| match &p.tensor {
                ParamTensor::Fixed(m) => g.leaf(m.clone(), requires_grad).map(BoundParam::Fixed),
                ParamTensor::Variational(vg) => vg.bind(g, requires_grad).map(BoundParam::Variational),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BoundNetwork { params })
    }

    /// Effective weights for one pass: fixed tensors as-is, variational
    /// tensors sampled once from `noise`.
    pub fn weights(&self, g: &mut Graph, bound: &BoundNetwork, noise: Noise<'_>) -> Result<Vec<NodeId>> {
        let mut noise = noise;
        let mut given_idx = 0;
        let mut out = Vec::with_capacity(bound.params.len());
        for p in &bound.params {
            match p {
                BoundParam::Fixed(id) => out.push(*id),
                BoundParam::Variational(vg) => match &mut noise {
                    Noise::Zero => out.push(vg.mu),
                    Noise::Draw(rng) => {
                        let (r, c) = g.value(vg.mu).dim();
                        let eps = standard_normal(r, c, &mut **rng);
                        out.push(sample_weights(g, vg, &eps)?);
                    }
                    Noise::Given(list) => {
                        let eps = list.get(given_idx).ok_or_else(|| {
                            Error::ShapeError("not enough noise matrices".into())
                        })?;
                        given_idx += 1;
                        out.push(sample_weights(g, vg, eps)?);
                    }
                },
            }
        }
        if let Noise::Given(list) = noise {
            if given_idx != list.len() {
                return Err(Error::ShapeError(format!(
                    "{} noise matrices supplied for {given_idx} variational tensors",
                    list.len()
                )));
            }
        }
        Ok(out)
    }

    /// Encoder features (`feature_dim × B`) from effective weights.
    pub fn encode(&self, g: &mut Graph, weights: &[NodeId], sequence: &[NodeId]) -> Result<NodeId> {
        if weights.len() != self.params.len() {
            return Err(Error::ShapeError("weight list does not match layout".into()));
        }
        match self.config.cell_kind {
            CellKind::Rnn => {
                let p = AffineWeights {
                    w: weights[0],
                    b: weights[1],
                };
                rnn_forward(g, &p, sequence)
            }
            CellKind::Lstm => {
                let fwd = lstm_block(g, &weights[0..8])?;
                lstm_forward(g, &fwd, sequence)
            }
            CellKind::Bilstm => {
                let fwd = lstm_block(g, &weights[0..8])?;
                let bwd = lstm_block(g, &weights[8..16])?;
                bilstm_forward(g, &fwd, &bwd, sequence)
            }
        }
    }

    pub fn head(&self, g: &mut Graph, weights: &[NodeId], features: NodeId) -> Result<NodeId> {
        let n = weights.len();
        let p = AffineWeights {
            w: weights[n - 2],
            b: weights[n - 1],
        };
        dense_head(g, &p, features)
    }

    /// `horizon × B` predictions for a batch of windows given as `k × B`
    /// (univariate lags, one window per column).
    pub fn forward(&self, g: &mut Graph, weights: &[NodeId], windows: &Matrix) -> Result<NodeId> {
        let sequence = self.sequence(g, windows)?;
        let features = self.encode(g, weights, &sequence)?;
        self.head(g, weights, features)
    }

    /// Splits a `k × B` block of univariate windows into `k` step inputs.
    pub fn sequence(&self, g: &mut Graph, windows: &Matrix) -> Result<Vec<NodeId>> {
        if self.config.input_dim != 1 {
            return Err(Error::ShapeError(
                "k × B window blocks are univariate; use encode with explicit steps".into(),
            ));
        }
        if windows.nrows() == 0 || windows.ncols() == 0 {
            return Err(Error::InvalidValue("empty window block".into()));
        }
        windows
            .rows()
            .into_iter()
            .map(|row| g.constant(row.to_owned().insert_axis(ndarray::Axis(0))))
            .collect()
    }
}

fn lstm_block(g: &mut Graph, w: &[NodeId]) -> Result<LstmWeights> {
    LstmWeights::from_gates(g, [w[0], w[1], w[2], w[3]], [w[4], w[5], w[6], w[7]])
}

/// Single-window forward pass: `window` is `k × input_dim`, returns the
/// `horizon` predictions.
pub fn network_forward(net: &Network, window: &Matrix, noise: Noise<'_>) -> Result<Vec<f64>> {
    if window.ncols() != net.config.input_dim {
        return Err(Error::ShapeError(format!(
            "window has {} features, network expects {}",
            window.ncols(),
            net.config.input_dim
        )));
    }
    if window.nrows() == 0 {
        return Err(Error::InvalidValue("empty window".into()));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false)?;
    let weights = net.weights(&mut g, &bound, noise)?;
    let sequence = window
        .rows()
        .into_iter()
        .map(|row| g.constant(row.to_owned().insert_axis(ndarray::Axis(1))))
        .collect::<Result<Vec<_>>>()?;
    let features = net.encode(&mut g, &weights, &sequence)?;
    let out = net.head(&mut g, &weights, features)?;
    Ok(g.value(out).column(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand_chacha::ChaCha8Rng;

    fn zero_lstm(g: &mut Graph, hidden: usize, input: usize) -> LstmWeights {
        let w = g.constant(Matrix::zeros((4 * hidden, hidden + input))).unwrap();
        let b = g.constant(Matrix::zeros((4 * hidden, 1))).unwrap();
        LstmWeights { w, b, hidden }
    }

    #[test]
    fn zero_lstm_from_zero_state() {
        let mut g = Graph::new();
        let p = zero_lstm(&mut g, 1, 1);
        let prev = zero_state(&mut g, 1, 1).unwrap();
        let x = g.constant(array![[0.7]]).unwrap();
        let s = lstm_cell_step(&mut g, &p, x, prev).unwrap();
        assert_eq!(g.scalar_value(s.c), 0.0);
        assert_eq!(g.scalar_value(s.y), 0.0);
    }

    #[test]
    fn zero_lstm_halves_cell_state() {
        let mut g = Graph::new();
        let p = zero_lstm(&mut g, 1, 1);
        let c = g.constant(array![[2.0]]).unwrap();
        let y = g.constant(array![[0.0]]).unwrap();
        let x = g.constant(array![[0.0]]).unwrap();
        let s = lstm_cell_step(&mut g, &p, x, CellState { c, y }).unwrap();
        assert_eq!(g.scalar_value(s.c), 1.0);
        assert!((g.scalar_value(s.y) - 0.5 * 1f64.tanh()).abs() < 1e-15);
        assert!((g.scalar_value(s.y) - 0.3808).abs() < 1e-4);
    }

    #[test]
    fn lstm_step_shape_errors() {
        let mut g = Graph::new();
        let p = zero_lstm(&mut g, 2, 1);
        let prev = zero_state(&mut g, 2, 1).unwrap();
        let x = g.constant(array![[0.0], [1.0]]).unwrap();
        assert!(matches!(
            lstm_cell_step(&mut g, &p, x, prev),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn gate_weights_must_agree() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros((2, 3))).unwrap();
        let bad = g.constant(Matrix::zeros((2, 4))).unwrap();
        let b = g.constant(Matrix::zeros((2, 1))).unwrap();
        assert!(LstmWeights::from_gates(&mut g, [a, a, a, bad], [b, b, b, b]).is_err());
    }

    #[test]
    fn rnn_steps() {
        let mut g = Graph::new();
        let w = g.constant(array![[0.0, 1.0]]).unwrap();
        let b = g.constant(array![[0.0]]).unwrap();
        let p = AffineWeights { w, b };
        let y0 = g.constant(array![[0.0]]).unwrap();
        let x = g.constant(array![[0.5]]).unwrap();
        let y = rnn_cell_step(&mut g, &p, x, y0).unwrap();
        assert!((g.scalar_value(y) - 0.5f64.tanh()).abs() < 1e-15);

        let wz = g.constant(array![[0.0, 0.0]]).unwrap();
        let pz = AffineWeights { w: wz, b };
        let y = rnn_cell_step(&mut g, &pz, x, y0).unwrap();
        assert_eq!(g.scalar_value(y), 0.0);
    }

    #[test]
    fn bilstm_empty_sequence_rejected() {
        let mut g = Graph::new();
        let p = zero_lstm(&mut g, 2, 1);
        assert!(matches!(
            bilstm_forward(&mut g, &p, &p, &[]),
            Err(Error::InvalidValue(_))
        ));
    }

    #[test]
    fn bilstm_zero_params_give_zeros() {
        let mut g = Graph::new();
        let p = zero_lstm(&mut g, 3, 1);
        let seq: Vec<_> = [0.1, 0.5, 0.9]
            .iter()
            .map(|v| g.constant(array![[*v]]).unwrap())
            .collect();
        let out = bilstm_forward(&mut g, &p, &p, &seq).unwrap();
        assert_eq!(g.value(out), &Matrix::zeros((6, 1)));
    }

    #[test]
    fn dense_head_cases() {
        let mut g = Graph::new();
        let w = g.constant(Matrix::zeros((2, 3))).unwrap();
        let b = g.constant(array![[0.25], [-1.0]]).unwrap();
        let feat = g.constant(array![[1.0], [2.0], [3.0]]).unwrap();
        let out = dense_head(&mut g, &AffineWeights { w, b }, feat).unwrap();
        assert_eq!(g.value(out), &array![[0.25], [-1.0]]);

        let eye = g.constant(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let zb = g.constant(Matrix::zeros((2, 1))).unwrap();
        let feat2 = g.constant(array![[0.3], [0.8]]).unwrap();
        let out = dense_head(&mut g, &AffineWeights { w: eye, b: zb }, feat2).unwrap();
        assert_eq!(g.value(out), &array![[0.3], [0.8]]);

        assert!(dense_head(&mut g, &AffineWeights { w, b }, feat2).is_err());
    }

    #[test]
    fn layouts_and_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Bilstm] {
            for bayes in [false, true] {
                let cfg = NetworkConfig::new(kind, 3, 2, bayes);
                let net = Network::new(cfg.clone(), &mut rng).unwrap();
                let rebuilt = Network::from_params(cfg, net.params.clone()).unwrap();
                assert_eq!(rebuilt, net);
                let flat = net.flat_parameters();
                let mut other = net.clone();
                other.set_flat_parameters(&flat).unwrap();
                assert_eq!(other, net);
            }
        }
    }

    #[test]
    fn initial_rho_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Network::new(NetworkConfig::new(CellKind::Lstm, 4, 3, true), &mut rng).unwrap();
        for p in &net.params {
            let ParamTensor::Variational(vg) = &p.tensor else {
                panic!("expected variational");
            };
            assert!(vg.rho().iter().all(|r| *r == -3.0));
            let bound = if p.name.starts_with("head") {
                1.0 / 2.0
            } else {
                1.0 / 5f64.sqrt()
            };
            assert!(vg.mu().iter().all(|m| m.abs() <= bound));
        }
    }

    #[test]
    fn single_window_length_is_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::new(NetworkConfig::new(CellKind::Bilstm, 3, 5, false), &mut rng).unwrap();
        for k in [1, 2, 7] {
            let window = Matrix::from_elem((k, 1), 0.3);
            assert_eq!(network_forward(&net, &window, Noise::Zero).unwrap().len(), 5);
        }
    }
}

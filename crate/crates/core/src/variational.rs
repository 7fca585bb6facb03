//! Mean-field Gaussian posteriors over weight tensors and the divergences
//! used to fit them.
//!
//! A weight tensor `w` has posterior `N(mu, softplus(rho)^2)` per entry and a
//! zero-mean prior `N(0, prior_sigma^2)`. Samples are reparameterized as
//! `mu + softplus(rho) * eps` so gradients reach `mu` and `rho`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Matrix, NodeId};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalGaussian {
    mu: Matrix,
    rho: Matrix,
    prior_sigma: f64,
}

impl VariationalGaussian {
    pub fn new(mu: Matrix, rho: Matrix, prior_sigma: f64) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::ShapeError(format!(
                "mu {:?} and rho {:?} differ",
                mu.shape(),
                rho.shape()
            )));
        }
        if !(prior_sigma > 0.0) || !prior_sigma.is_finite() {
            return Err(Error::InvalidValue(format!(
                "prior_sigma must be positive, got {prior_sigma}"
            )));
        }
        if mu.iter().chain(rho.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("mu/rho contain NaN or Inf".into()));
        }
        Ok(VariationalGaussian {
            mu,
            rho,
            prior_sigma,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mu.dim()
    }

    pub fn mu(&self) -> &Matrix {
        &self.mu
    }

    pub fn rho(&self) -> &Matrix {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut Matrix {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut Matrix {
        &mut self.rho
    }

    pub fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.mu, &mut self.rho)
    }

    pub fn prior_sigma(&self) -> f64 {
        self.prior_sigma
    }

    /// Posterior standard deviation `softplus(rho)`.
    pub fn sigma(&self) -> Matrix {
        self.rho.mapv(softplus)
    }

    /// Registers `mu` and `rho` as leaves of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Result<BoundGaussian> {
        let mu = g.leaf(self.mu.clone(), requires_grad)?;
        let rho = g.leaf(self.rho.clone(), requires_grad)?;
        let sigma = g.softplus(rho)?;
        Ok(BoundGaussian {
            mu,
            rho,
            sigma,
            prior_sigma: self.prior_sigma,
        })
    }
}

/// Graph handles for one bound [`VariationalGaussian`].
#[derive(Clone, Copy, Debug)]
pub struct BoundGaussian {
    pub mu: NodeId,
    pub rho: NodeId,
    pub sigma: NodeId,
    pub prior_sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    KlClosedForm,
    AbMonteCarlo,
    AbCollapsed,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceSpec {
    pub kind: DivergenceKind,
    pub alpha: f64,
    pub beta: f64,
    pub mc_samples: usize,
}

impl Default for DivergenceSpec {
    fn default() -> Self {
        DivergenceSpec::ab_monte_carlo(1.0, 2.0, 4)
    }
}

impl DivergenceSpec {
    pub fn none() -> Self {
        DivergenceSpec {
            kind: DivergenceKind::None,
            alpha: 1.0,
            beta: 2.0,
            mc_samples: 1,
        }
    }

    pub fn kl() -> Self {
        DivergenceSpec {
            kind: DivergenceKind::KlClosedForm,
            alpha: 1.0,
            beta: 2.0,
            mc_samples: 1,
        }
    }

    pub fn ab_monte_carlo(alpha: f64, beta: f64, mc_samples: usize) -> Self {
        DivergenceSpec {
            kind: DivergenceKind::AbMonteCarlo,
            alpha,
            beta,
            mc_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mc_samples == 0 {
            return Err(Error::InvalidValue("mc_samples must be >= 1".into()));
        }
        if matches!(
            self.kind,
            DivergenceKind::AbMonteCarlo | DivergenceKind::AbCollapsed
        ) {
            check_ab(self.alpha, self.beta)?;
        }
        Ok(())
    }
}

fn check_ab(alpha: f64, beta: f64) -> Result<()> {
    if alpha == 0.0 || beta == 0.0 || alpha + beta == 0.0 {
        return Err(Error::DomainError(format!(
            "alpha-beta divergence undefined for alpha={alpha}, beta={beta}"
        )));
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::InvalidValue("alpha/beta must be finite".into()));
    }
    Ok(())
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// `mu + softplus(rho) * noise`, differentiable in `mu` and `rho`.
pub fn sample_weights(g: &mut Graph, vg: &BoundGaussian, noise: &Matrix) -> Result<NodeId> {
    let shape = g.value(vg.mu).dim();
    if noise.dim() != shape {
        return Err(Error::ShapeError(format!(
            "noise {:?} does not match weights {:?}",
            noise.dim(),
            shape
        )));
    }
    let eps = g.constant(noise.clone())?;
    let scaled = g.mul(vg.sigma, eps)?;
    g.add(vg.mu, scaled)
}

/// Closed-form `KL(N(mu, sigma^2) || N(0, prior_sigma^2))` summed over entries.
pub fn kl_gaussian(g: &mut Graph, vg: &BoundGaussian) -> Result<NodeId> {
    let n = g.value(vg.mu).len() as f64;
    let s_i = vg.prior_sigma;
    let log_sigma = g.log(vg.sigma)?;
    let sum_log_sigma = g.sum(log_sigma)?;
    let sigma_sq = g.square(vg.sigma)?;
    let mu_sq = g.square(vg.mu)?;
    let second = g.add(sigma_sq, mu_sq)?;
    let second = g.sum(second)?;
    let second = g.scale(second, 1.0 / (2.0 * s_i * s_i))?;
    let kl = g.sub(second, sum_log_sigma)?;
    g.add_scalar(kl, n * (s_i.ln() - 0.5))
}

/// `log q(w | mu, sigma)` for a sampled tensor `w`.
pub fn log_posterior(g: &mut Graph, vg: &BoundGaussian, w: NodeId) -> Result<NodeId> {
    let n = g.value(w).len() as f64;
    let d = g.sub(w, vg.mu)?;
    let d2 = g.square(d)?;
    let log_sigma = g.log(vg.sigma)?;
    let inv_var = g.scale(log_sigma, -2.0)?;
    let inv_var = g.exp(inv_var)?;
    let quad = g.mul(d2, inv_var)?;
    let quad = g.sum(quad)?;
    let quad = g.scale(quad, 0.5)?;
    let sum_log_sigma = g.sum(log_sigma)?;
    let neg = g.add(quad, sum_log_sigma)?;
    let lq = g.neg(neg)?;
    g.add_scalar(lq, -0.5 * n * (2.0 * PI).ln())
}

/// `log N(w | 0, prior_sigma^2)` summed over entries.
pub fn log_prior(g: &mut Graph, w: NodeId, prior_sigma: f64) -> Result<NodeId> {
    let n = g.value(w).len() as f64;
    let w2 = g.square(w)?;
    let w2 = g.sum(w2)?;
    let lp = g.scale(w2, -0.5 / (prior_sigma * prior_sigma))?;
    g.add_scalar(lp, -0.5 * n * (2.0 * PI * prior_sigma * prior_sigma).ln())
}

/// The scalar multiplying `E[log theta]` in the collapsed (post-Jensen)
/// alpha-beta expression:
///
/// `(a+b-1)/(b(a+b)) - (a+b-1)/(ab) - 1/(a(a+b)) + 1/a`
///
/// Over a common denominator `ab(a+b)` the numerator is
/// `a(a+b-1) - (a+b)(a+b-1) - b + b(a+b) = 0`, so this is zero for every
/// admissible pair and the expression carries no training signal.
pub fn ab_coefficient(alpha: f64, beta: f64) -> Result<f64> {
    check_ab(alpha, beta)?;
    let s = alpha + beta;
    Ok((s - 1.0) / (beta * s) - (s - 1.0) / (alpha * beta) - 1.0 / (alpha * s) + 1.0 / alpha)
}

fn term_coefficients(alpha: f64, beta: f64) -> (f64, f64) {
    let s = alpha + beta;
    (1.0 / (alpha * s), 1.0 / (beta * s))
}

fn log_mean_exp_node(g: &mut Graph, v: NodeId) -> Result<NodeId> {
    let n = g.value(v).len() as f64;
    let lse = g.logsumexp(v)?;
    g.add_scalar(lse, -n.ln())
}

/// Monte-Carlo scale-invariant alpha-beta divergence `D(q || p)` from
/// per-sample `log q(w_j)` and unnormalized `log p(w_j)`, `w_j ~ q`.
///
/// With `s_j = log p - log q` the three log-expectations are over
///
/// * `t1 = (a+b) s + (a+b-1) log q`  (`p^(a+b) / q`)
/// * `t2 = (a+b-1) log q`            (`q^(a+b-1)`)
/// * `t3 = (a+b-1) log q + b s`      (`q^(a+b-1) (p/q)^b`)
///
/// and `D = c1 L1 + c2 L2 - c3 L3` with `c3 = c1 + c2`, evaluated as
/// `c1 (L1 - L3) + c2 (L2 - L3)`. Each `L` is a log-mean-exp.
pub fn ab_combine(
    g: &mut Graph,
    log_q: &[NodeId],
    log_p: &[NodeId],
    alpha: f64,
    beta: f64,
) -> Result<NodeId> {
    check_ab(alpha, beta)?;
    if log_q.is_empty() || log_q.len() != log_p.len() {
        return Err(Error::InvalidValue(format!(
            "need matching nonempty sample sets, got {} and {}",
            log_q.len(),
            log_p.len()
        )));
    }
    for id in log_p.iter().chain(log_q) {
        if !g.scalar_value(*id).is_finite() {
            return Err(Error::InvalidValue("log density is not finite".into()));
        }
    }
    let s = alpha + beta;
    let lq = g.concat_rows(log_q)?;
    let lp = g.concat_rows(log_p)?;
    let ratio = g.sub(lp, lq)?;
    let base = g.scale(lq, s - 1.0)?;
    let r1 = g.scale(ratio, s)?;
    let t1 = g.add(base, r1)?;
    let r3 = g.scale(ratio, beta)?;
    let t3 = g.add(base, r3)?;
    let l1 = log_mean_exp_node(g, t1)?;
    let l2 = log_mean_exp_node(g, base)?;
    let l3 = log_mean_exp_node(g, t3)?;
    let (c1, c2) = term_coefficients(alpha, beta);
    let d1 = g.sub(l1, l3)?;
    let d1 = g.scale(d1, c1)?;
    let d2 = g.sub(l2, l3)?;
    let d2 = g.scale(d2, c2)?;
    g.add(d1, d2)
}

/// Reparameterized draws of every layer in `layers`.
pub fn draw_samples<R: Rng + ?Sized>(
    g: &mut Graph,
    layers: &[BoundGaussian],
    rng: &mut R,
) -> Result<(Vec<NodeId>, NodeId)> {
    let mut weights = Vec::with_capacity(layers.len());
    let mut log_q = Vec::with_capacity(layers.len());
    for vg in layers {
        let (r, c) = g.value(vg.mu).dim();
        let noise = standard_normal(r, c, rng);
        let w = sample_weights(g, vg, &noise)?;
        log_q.push(log_posterior(g, vg, w)?);
        weights.push(w);
    }
    let total = sum_scalars(g, &log_q)?;
    Ok((weights, total))
}

pub(crate) fn sum_scalars(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    match parts {
        [] => g.scalar(0.0),
        [only] => Ok(*only),
        _ => {
            let stacked = g.concat_rows(parts)?;
            g.sum(stacked)
        }
    }
}

/// Alpha-beta divergence estimated with `spec.mc_samples` reparameterized
/// draws. `log_joint` maps one set of sampled weights (one node per layer)
/// to the unnormalized `log p(data, w)`.
pub fn ab_divergence_mc<F, R>(
    g: &mut Graph,
    layers: &[BoundGaussian],
    mut log_joint: F,
    spec: &DivergenceSpec,
    rng: &mut R,
) -> Result<NodeId>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    if spec.kind != DivergenceKind::AbMonteCarlo {
        return Err(Error::InvalidValue(format!(
            "ab_divergence_mc called with {:?}",
            spec.kind
        )));
    }
    spec.validate()?;
    let mut log_q = Vec::with_capacity(spec.mc_samples);
    let mut log_p = Vec::with_capacity(spec.mc_samples);
    for _ in 0..spec.mc_samples {
        let (weights, lq) = draw_samples(g, layers, rng)?;
        let lp = log_joint(g, &weights)?;
        log_q.push(lq);
        log_p.push(lp);
    }
    ab_combine(g, &log_q, &log_p, spec.alpha, spec.beta)
}

/// Dispatches on `spec.kind`.
pub fn divergence<F, R>(
    g: &mut Graph,
    layers: &[BoundGaussian],
    log_joint: F,
    spec: &DivergenceSpec,
    rng: &mut R,
) -> Result<NodeId>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    spec.validate()?;
    match spec.kind {
        DivergenceKind::None => g.scalar(0.0),
        DivergenceKind::KlClosedForm => {
            let parts = layers
                .iter()
                .map(|vg| kl_gaussian(g, vg))
                .collect::<Result<Vec<_>>>()?;
            sum_scalars(g, &parts)
        }
        DivergenceKind::AbMonteCarlo => ab_divergence_mc(g, layers, log_joint, spec, rng),
        DivergenceKind::AbCollapsed => {
            let coefficient = ab_coefficient(spec.alpha, spec.beta)?;
            let mut draws = Vec::with_capacity(spec.mc_samples);
            for _ in 0..spec.mc_samples {
                draws.push(draw_samples(g, layers, rng)?.1);
            }
            let stacked = g.concat_rows(&draws)?;
            let expected = g.mean(stacked)?;
            g.scale(expected, coefficient)
        }
    }
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

fn log_mean_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    (m + mean.ln(), w.into_iter().map(|v| v / mean).collect())
}

/// Plain-value counterpart of [`ab_combine`] that also reports a
/// delta-method standard error accounting for the correlation between the
/// three log-expectations.
pub fn ab_estimate(log_q: &[f64], log_p: &[f64], alpha: f64, beta: f64) -> Result<McEstimate> {
    check_ab(alpha, beta)?;
    let n = log_q.len();
    if n == 0 || n != log_p.len() {
        return Err(Error::InvalidValue("need matching nonempty sample sets".into()));
    }
    if log_q.iter().chain(log_p).any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("log density is not finite".into()));
    }
    let s = alpha + beta;
    let mut t1 = Vec::with_capacity(n);
    let mut t2 = Vec::with_capacity(n);
    let mut t3 = Vec::with_capacity(n);
    for (&q, &p) in log_q.iter().zip(log_p) {
        let ratio = p - q;
        let base = (s - 1.0) * q;
        t1.push(base + s * ratio);
        t2.push(base);
        t3.push(base + beta * ratio);
    }
    let (l1, w1) = log_mean_exp(&t1);
    let (l2, w2) = log_mean_exp(&t2);
    let (l3, w3) = log_mean_exp(&t3);
    let (c1, c2) = term_coefficients(alpha, beta);
    let value = c1 * (l1 - l3) + c2 * (l2 - l3);
    let std_error = if n > 1 {
        // Influence of sample j on the estimate (weights already divided by
        // their means).
        let z: Vec<f64> = (0..n)
            .map(|j| c1 * (w1[j] - w3[j]) + c2 * (w2[j] - w3[j]))
            .collect();
        let zm = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - zm) * (v - zm)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(McEstimate { value, std_error })
}

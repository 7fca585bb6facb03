//! Monte-Carlo predictive distributions, prediction intervals, and the
//! multi-step forecast pipeline.

use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Matrix};
use crate::dataio::Scaler;
use crate::error::{Error, Result};
use crate::recurrent::{Network, NetworkConfig, Noise};

pub const DEFAULT_LEVELS: [f64; 3] = [0.2, 0.5, 0.9];
pub const DEFAULT_SAMPLES: usize = 200;

/// A trained forecaster: one network per horizon block plus the scaler
/// fitted on the training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub k: usize,
    pub horizon: usize,
    pub block_size: usize,
    pub scaler: Scaler,
    pub blocks: Vec<Network>,
}

/// Horizon blocks `0..s, s..2s, …` covering `0..horizon`.
pub fn block_ranges(horizon: usize, block_size: usize) -> Vec<Range<usize>> {
    (0..horizon)
        .step_by(block_size.max(1))
        .map(|start| start..(start + block_size).min(horizon))
        .collect()
}

impl ForecastModel {
    /// Freshly initialized networks, one per block; `template.horizon` is
    /// overwritten with each block's width.
    pub fn new<R: Rng + ?Sized>(
        k: usize,
        horizon: usize,
        block_size: usize,
        scaler: Scaler,
        template: &NetworkConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if block_size == 0 || block_size > horizon {
            return Err(Error::config("block_size", format!("must lie in 1..={horizon}")));
        }
        let blocks = block_ranges(horizon, block_size)
            .into_iter()
            .map(|r| {
                let mut cfg = template.clone();
                cfg.horizon = r.len();
                Network::new(cfg, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ForecastModel {
            k,
            horizon,
            block_size,
            scaler,
            blocks,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = block_ranges(self.horizon, self.block_size);
        if ranges.len() != self.blocks.len() {
            return Err(Error::ShapeError(format!(
                "{} blocks stored, {} expected",
                self.blocks.len(),
                ranges.len()
            )));
        }
        for (r, net) in ranges.iter().zip(&self.blocks) {
            if net.config.horizon != r.len() {
                return Err(Error::ShapeError("block horizon mismatch".into()));
            }
            net.config.validate()?;
        }
        Ok(())
    }

    pub fn block_ranges(&self) -> Vec<Range<usize>> {
        block_ranges(self.horizon, self.block_size)
    }

    pub fn is_bayesian(&self) -> bool {
        self.blocks.iter().any(|n| n.config.bayesian)
    }
}

/// `S × H` Monte-Carlo sample paths in kWh.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastDistribution {
    samples: Array2<f64>,
    floor: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBand {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Empirical quantile of ascending `sorted` by linear interpolation between
/// order statistics (`h = (S-1) tau`). When fewer than one sample lies
/// beyond `tau` on either side the extreme order statistic is returned.
pub fn quantile_sorted(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let nf = n as f64;
    if tau * nf < 1.0 {
        return sorted[0];
    }
    if (1.0 - tau) * nf < 1.0 {
        return sorted[n - 1];
    }
    let h = (nf - 1.0) * tau;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn check_level(level: f64) -> Result<()> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidValue(format!("coverage level {level} not in (0, 1)")));
    }
    Ok(())
}

impl ForecastDistribution {
    pub fn new(samples: Array2<f64>) -> Result<Self> {
        if samples.nrows() == 0 || samples.ncols() == 0 {
            return Err(Error::InvalidValue("need at least one sample and one step".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("forecast samples must be finite".into()));
        }
        Ok(ForecastDistribution { samples, floor: None })
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn sample_count(&self) -> usize {
        self.samples.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.samples.ncols()
    }

    fn floored(&self, v: f64) -> f64 {
        match self.floor {
            Some(f) => v.max(f),
            None => v,
        }
    }

    /// Columnwise arithmetic mean.
    pub fn mean(&self) -> Vec<f64> {
        self.samples
            .mean_axis(Axis(0))
            .expect("at least one sample")
            .iter()
            .map(|&v| self.floored(v))
            .collect()
    }

    /// Copy whose mean, quantiles and bands are clamped at zero after
    /// being computed from the raw samples.
    pub fn clamp_nonnegative(&self) -> ForecastDistribution {
        ForecastDistribution {
            samples: self.samples.clone(),
            floor: Some(0.0),
        }
    }

    fn sorted_columns(&self) -> Vec<Vec<f64>> {
        self.samples
            .columns()
            .into_iter()
            .map(|c| {
                let mut v = c.to_vec();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect()
    }

    /// Per-step empirical quantile.
    pub fn quantile(&self, tau: f64) -> Result<Vec<f64>> {
        Ok(self.quantiles(&[tau])?.remove(0))
    }

    /// Per-step quantiles for each `tau`, one vector per `tau`.
    pub fn quantiles(&self, taus: &[f64]) -> Result<Vec<Vec<f64>>> {
        for &t in taus {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::InvalidValue(format!("quantile {t} not in (0, 1)")));
            }
        }
        let cols = self.sorted_columns();
        Ok(taus
            .iter()
            .map(|&t| cols.iter().map(|c| self.floored(quantile_sorted(c, t))).collect())
            .collect())
    }

    /// Central bands at each coverage level from the quantiles
    /// `(1-level)/2` and `1-(1-level)/2`.
    pub fn intervals(&self, levels: &[f64]) -> Result<Vec<IntervalBand>> {
        if self.sample_count() < 2 {
            return Err(Error::InvalidValue("intervals need at least 2 samples".into()));
        }
        for &l in levels {
            check_level(l)?;
        }
        let cols = self.sorted_columns();
        Ok(levels
            .iter()
            .map(|&level| {
                let lo = (1.0 - level) / 2.0;
                IntervalBand {
                    level,
                    lower: cols.iter().map(|c| self.floored(quantile_sorted(c, lo))).collect(),
                    upper: cols.iter().map(|c| self.floored(quantile_sorted(c, 1.0 - lo))).collect(),
                }
            })
            .collect())
    }
}

fn draw_rng(seed: u64, draw: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    rng
}

/// Scaled-space predictions of every block for one weight draw,
/// `horizon × B`.
fn predict_scaled(model: &ForecastModel, windows: &Matrix, draw: Option<&mut ChaCha8Rng>) -> Result<Matrix> {
    let mut out = Matrix::zeros((model.horizon, windows.ncols()));
    let mut draw = draw;
    for (range, net) in model.block_ranges().into_iter().zip(&model.blocks) {
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false)?;
        let noise = match draw.as_deref_mut() {
            Some(rng) if net.config.bayesian => Noise::Draw(rng),
            _ => Noise::Zero,
        };
        let weights = net.weights(&mut g, &bound, noise)?;
        let pred = net.forward(&mut g, &weights, windows)?;
        out.slice_mut(ndarray::s![range, ..]).assign(g.value(pred));
    }
    Ok(out)
}

/// Predictive distributions for a batch of scaled windows (`k × B`).
/// Draw `j` uses its own seeded stream shared by every window in the
/// batch, so results do not depend on thread scheduling. With
/// `zero_noise`, or for deterministic models, every sample is the
/// posterior-mean forecast.
pub fn mc_forecast_batch(
    model: &ForecastModel,
    windows: &Matrix,
    samples: usize,
    seed: u64,
    zero_noise: bool,
) -> Result<Vec<ForecastDistribution>> {
    if samples == 0 {
        return Err(Error::InvalidValue("sample count must be >= 1".into()));
    }
    if windows.nrows() != model.k {
        return Err(Error::ShapeError(format!(
            "windows have {} lags, model expects {}",
            windows.nrows(),
            model.k
        )));
    }
    let draws: Vec<Matrix> = if zero_noise || !model.is_bayesian() {
        let point = predict_scaled(model, windows, None)?;
        vec![point; samples]
    } else {
        (0..samples)
            .into_par_iter()
            .map(|j| predict_scaled(model, windows, Some(&mut draw_rng(seed, j))))
            .collect::<Result<Vec<_>>>()?
    };
    let b = windows.ncols();
    (0..b)
        .map(|col| {
            let mut s = Array2::zeros((samples, model.horizon));
            for (j, d) in draws.iter().enumerate() {
                for h in 0..model.horizon {
                    s[[j, h]] = model.scaler.inverse_one(d[[h, col]]);
                }
            }
            ForecastDistribution::new(s)
        })
        .collect()
}

/// Predictive distribution for one scaled window of `k` values.
pub fn mc_forecast(
    model: &ForecastModel,
    window: &[f64],
    samples: usize,
    seed: u64,
    zero_noise: bool,
) -> Result<ForecastDistribution> {
    if window.len() != model.k {
        return Err(Error::ShapeError(format!(
            "window has {} values, model expects {}",
            window.len(),
            model.k
        )));
    }
    let column = Matrix::from_shape_vec((model.k, 1), window.to_vec()).expect("k × 1");
    Ok(mc_forecast_batch(model, &column, samples, seed, zero_noise)?.remove(0))
}

/// Mean and bands in kWh, clamped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MsaForecast {
    pub mean: Vec<f64>,
    pub bands: Vec<IntervalBand>,
}

/// Point and interval forecast from the last `k` observations in kWh.
/// Negative values are clamped to zero after the quantiles are taken.
pub fn msa_predict(
    model: &ForecastModel,
    series_tail: &[f64],
    samples: usize,
    levels: &[f64],
    seed: u64,
) -> Result<MsaForecast> {
    if series_tail.len() != model.k {
        return Err(Error::ShapeError(format!(
            "need the last {} observations, got {}",
            model.k,
            series_tail.len()
        )));
    }
    for &l in levels {
        check_level(l)?;
    }
    let scaled = model.scaler.transform(series_tail);
    let dist = mc_forecast(model, &scaled, samples, seed, false)?;
    summarize(&dist, levels)
}

/// Mean and bands of a distribution, clamped at zero. With a single
/// sample the bands collapse onto it.
pub fn summarize(dist: &ForecastDistribution, levels: &[f64]) -> Result<MsaForecast> {
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
    let mean = clamp(dist.mean());
    let bands = if dist.sample_count() >= 2 {
        dist.intervals(levels)?
    } else {
        for &l in levels {
            check_level(l)?;
        }
        let only = dist.samples().row(0).to_vec();
        levels
            .iter()
            .map(|&level| IntervalBand {
                level,
                lower: only.clone(),
                upper: only.clone(),
            })
            .collect()
    };
    let bands = bands
        .into_iter()
        .map(|b| IntervalBand {
            level: b.level,
            lower: clamp(b.lower),
            upper: clamp(b.upper),
        })
        .collect();
    Ok(MsaForecast { mean, bands })
}

fn level_tag(level: f64) -> String {
    let pct = level * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("{}", pct.round() as i64)
    } else {
        format!("{pct}")
    }
}

/// `step,mean_kwh,lbXX,ubXX,…[,actual_kwh]` with `# ` header lines first.
pub fn forecast_csv(forecast: &MsaForecast, actual: Option<&[f64]>, header: &[String]) -> Result<String> {
    let h = forecast.mean.len();
    if let Some(a) = actual {
        if a.len() != h {
            return Err(Error::ShapeError(format!("{} actuals for {h} steps", a.len())));
        }
    }
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("step,mean_kwh");
    for b in &forecast.bands {
        let tag = level_tag(b.level);
        let _ = write!(out, ",lb{tag},ub{tag}");
    }
    if actual.is_some() {
        out.push_str(",actual_kwh");
    }
    out.push('\n');
    for step in 0..h {
        let _ = write!(out, "{},{}", step + 1, forecast.mean[step]);
        for b in &forecast.bands {
            let _ = write!(out, ",{},{}", b.lower[step], b.upper[step]);
        }
        if let Some(a) = actual {
            let _ = write!(out, ",{}", a[step]);
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recurrent::CellKind;

    fn dist(rows: Vec<Vec<f64>>) -> ForecastDistribution {
        let s = rows.len();
        let h = rows[0].len();
        ForecastDistribution::new(Array2::from_shape_vec((s, h), rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn quantiles_on_one_to_hundred() {
        let d = dist((1..=100).map(|i| vec![i as f64]).collect());
        let band = &d.intervals(&[0.9]).unwrap()[0];
        assert!((band.lower[0] - 5.95).abs() < 1e-12);
        assert!((band.upper[0] - 95.05).abs() < 1e-12);
    }

    #[test]
    fn tiny_sample_clamp() {
        let d = dist(vec![vec![3.0], vec![1.0]]);
        let band = &d.intervals(&[0.9]).unwrap()[0];
        assert_eq!((band.lower[0], band.upper[0]), (1.0, 3.0));
        assert_eq!(d.quantile(0.5).unwrap(), vec![2.0]);
    }

    #[test]
    fn bands_nest() {
        let d = dist((0..50).map(|i| vec![(i as f64 * 1.7).sin(), i as f64]).collect());
        let bands = d.intervals(&[0.2, 0.5, 0.9]).unwrap();
        for h in 0..2 {
            assert!(bands[2].lower[h] <= bands[1].lower[h] && bands[1].lower[h] <= bands[0].lower[h]);
            assert!(bands[0].upper[h] <= bands[1].upper[h] && bands[1].upper[h] <= bands[2].upper[h]);
        }
        assert!(d.intervals(&[1.0]).is_err());
        assert!(dist(vec![vec![1.0]]).intervals(&[0.5]).is_err());
    }

    #[test]
    fn mean_cases() {
        assert_eq!(dist(vec![vec![0.0, 4.0], vec![2.0, 4.0]]).mean(), vec![1.0, 4.0]);
        assert_eq!(dist(vec![vec![0.5, 1.5]; 3]).mean(), vec![0.5, 1.5]);
    }

    #[test]
    fn block_layout() {
        assert_eq!(block_ranges(48, 48), vec![0..48]);
        assert_eq!(block_ranges(5, 2), vec![0..2, 2..4, 4..5]);
    }

    fn model(bayesian: bool, block: usize) -> ForecastModel {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = NetworkConfig::new(CellKind::Bilstm, 3, 4, bayesian);
        ForecastModel::new(4, 4, block, Scaler { min: 0.0, max: 2.0 }, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn zero_noise_single_sample_matches_point_pass() {
        let m = model(true, 4);
        let window = [0.1, 0.4, 0.3, 0.2];
        let d = mc_forecast(&m, &window, 1, 0, true).unwrap();
        let w = Matrix::from_shape_vec((4, 1), window.to_vec()).unwrap();
        let point = crate::recurrent::network_forward(&m.blocks[0], &w, Noise::Zero).unwrap();
        let expect: Vec<f64> = point.iter().map(|v| m.scaler.inverse_one(*v)).collect();
        assert_eq!(d.samples().row(0).to_vec(), expect);
    }

    #[test]
    fn seeded_sampling_is_reproducible_and_varies() {
        let m = model(true, 2);
        let window = [0.1, 0.4, 0.3, 0.2];
        let a = mc_forecast(&m, &window, 30, 7, false).unwrap();
        let b = mc_forecast(&m, &window, 30, 7, false).unwrap();
        assert_eq!(a, b);
        let c = mc_forecast(&m, &window, 30, 8, false).unwrap();
        assert_ne!(a, c);
        let spread = a.samples().std_axis(Axis(0), 0.0);
        assert!(spread.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn deterministic_model_has_no_spread() {
        let m = model(false, 4);
        let d = mc_forecast(&m, &[0.1, 0.2, 0.3, 0.4], 5, 1, false).unwrap();
        let first = d.samples().row(0).to_owned();
        assert!(d.samples().rows().into_iter().all(|r| r == first));
    }

    #[test]
    fn msa_output_is_nonnegative_and_csv_projects_levels() {
        let m = model(true, 4);
        let f = msa_predict(&m, &[0.0, 0.0, 0.0, 0.0], 50, &[0.5], 3).unwrap();
        assert!(f.mean.iter().all(|v| *v >= 0.0));
        assert!(f.bands[0].lower.iter().all(|v| *v >= 0.0));
        let csv = forecast_csv(&f, None, &["v".into()]).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("# v"));
        assert_eq!(lines.next(), Some("step,mean_kwh,lb50,ub50"));
        assert_eq!(csv.lines().count(), 6);
        assert!(msa_predict(&m, &[0.0; 3], 5, &[0.5], 3).is_err());
    }

    #[test]
    fn single_sample_bands_collapse() {
        let d = dist(vec![vec![0.5, -0.1]]);
        let f = summarize(&d, &DEFAULT_LEVELS).unwrap();
        assert_eq!(f.mean, vec![0.5, 0.0]);
        assert_eq!(f.bands[2].lower, f.bands[2].upper);
    }
}

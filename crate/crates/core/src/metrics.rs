//! Point and probabilistic forecast scores in kWh.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::ForecastDistribution;

/// Deciles used for the averaged pinball loss.
pub const DEFAULT_QUANTILES: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const DEFAULT_GAMMA: f64 = 0.1;

fn check_open_unit(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidValue(format!("{name} = {v} not in (0, 1)")));
    }
    Ok(())
}

pub fn pinball(y: f64, y_hat: f64, tau: f64) -> Result<f64> {
    check_open_unit("tau", tau)?;
    Ok(if y >= y_hat {
        tau * (y - y_hat)
    } else {
        (1.0 - tau) * (y_hat - y)
    })
}

pub fn winkler(y: f64, lb: f64, ub: f64, gamma: f64) -> Result<f64> {
    check_open_unit("gamma", gamma)?;
    if lb > ub {
        return Err(Error::InvalidValue(format!("lower bound {lb} above upper bound {ub}")));
    }
    let delta = ub - lb;
    Ok(if y < lb {
        delta + 2.0 * (lb - y) / gamma
    } else if y > ub {
        delta + 2.0 * (y - ub) / gamma
    } else {
        delta
    })
}

fn check_pairs(y_hat: &[f64], y: &[f64]) -> Result<()> {
    if y_hat.is_empty() || y_hat.len() != y.len() {
        return Err(Error::ShapeError(format!(
            "need equal nonempty lengths, got {} and {}",
            y_hat.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn rmse(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(y_hat, y)?;
    let sse: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

pub fn mae(y_hat: &[f64], y: &[f64]) -> Result<f64> {
    check_pairs(y_hat, y)?;
    let sae: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    Ok(sae / y.len() as f64)
}

/// Fraction of `y` inside `[lower, upper]`.
pub fn coverage(y: &[f64], lower: &[f64], upper: &[f64]) -> Result<f64> {
    check_pairs(lower, y)?;
    check_pairs(upper, y)?;
    let inside = y
        .iter()
        .zip(lower.iter().zip(upper))
        .filter(|(v, (l, u))| *l <= *v && *v <= *u)
        .count();
    Ok(inside as f64 / y.len() as f64)
}

fn check_windows(dists: &[ForecastDistribution], actuals: &[Vec<f64>]) -> Result<()> {
    if dists.is_empty() || dists.len() != actuals.len() {
        return Err(Error::ShapeError(format!(
            "{} distributions for {} actual paths",
            dists.len(),
            actuals.len()
        )));
    }
    for (d, a) in dists.iter().zip(actuals) {
        if d.horizon() != a.len() {
            return Err(Error::ShapeError(format!(
                "distribution horizon {} vs {} actuals",
                d.horizon(),
                a.len()
            )));
        }
    }
    Ok(())
}

/// Mean pinball loss over every (window, step, tau), using the empirical
/// quantiles of each distribution. Also returns the per-tau means.
pub fn pinball_avg(
    dists: &[ForecastDistribution],
    actuals: &[Vec<f64>],
    taus: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    check_windows(dists, actuals)?;
    if taus.is_empty() {
        return Err(Error::InvalidValue("empty quantile set".into()));
    }
    let mut per_tau = vec![0.0; taus.len()];
    let mut count = 0usize;
    for (d, a) in dists.iter().zip(actuals) {
        let qs = d.quantiles(taus)?;
        for (i, (&tau, q)) in taus.iter().zip(&qs).enumerate() {
            for (y, y_hat) in a.iter().zip(q) {
                per_tau[i] += pinball(*y, *y_hat, tau)?;
            }
        }
        count += a.len();
    }
    let per_tau: Vec<(f64, f64)> = taus
        .iter()
        .zip(per_tau)
        .map(|(t, s)| (*t, s / count as f64))
        .collect();
    let avg = per_tau.iter().map(|(_, v)| v).sum::<f64>() / taus.len() as f64;
    Ok((avg, per_tau))
}

/// Mean Winkler score of the central `1 - gamma` band over every
/// (window, step).
pub fn winkler_avg(dists: &[ForecastDistribution], actuals: &[Vec<f64>], gamma: f64) -> Result<f64> {
    check_windows(dists, actuals)?;
    check_open_unit("gamma", gamma)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (d, a) in dists.iter().zip(actuals) {
        let qs = d.quantiles(&[gamma / 2.0, 1.0 - gamma / 2.0])?;
        for ((y, lb), ub) in a.iter().zip(&qs[0]).zip(&qs[1]) {
            total += winkler(*y, *lb, *ub, gamma)?;
        }
        count += a.len();
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// Number of scored (window, step) pairs.
    pub n: usize,
    pub rmse: f64,
    pub mae: f64,
    /// Absent for point forecasters.
    pub pinball_avg: Option<f64>,
    pub winkler: Option<f64>,
    pub pinball_by_quantile: Vec<(f64, f64)>,
}

pub const CSV_HEADER: &str = "rmse,mae,pinball_avg,winkler,n";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ScoreReport {
    /// Scores distributions against actual paths. RMSE and MAE use the
    /// predictive mean; the interval scores are only filled in when
    /// `probabilistic` is set.
    pub fn compute(
        dists: &[ForecastDistribution],
        actuals: &[Vec<f64>],
        taus: &[f64],
        gamma: f64,
        probabilistic: bool,
    ) -> Result<Self> {
        check_windows(dists, actuals)?;
        let mut means = Vec::new();
        let mut ys = Vec::new();
        for (d, a) in dists.iter().zip(actuals) {
            means.extend(d.mean());
            ys.extend_from_slice(a);
        }
        let (pinball_avg, pinball_by_quantile, winkler) = if probabilistic {
            let (avg, per) = pinball_avg(dists, actuals, taus)?;
            (Some(avg), per, Some(winkler_avg(dists, actuals, gamma)?))
        } else {
            (None, Vec::new(), None)
        };
        Ok(ScoreReport {
            n: ys.len(),
            rmse: rmse(&means, &ys)?,
            mae: mae(&means, &ys)?,
            pinball_avg,
            winkler,
            pinball_by_quantile,
        })
    }

    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "rmse = {}", self.rmse);
        let _ = writeln!(out, "mae = {}", self.mae);
        let _ = writeln!(out, "pinball_avg = {}", opt(self.pinball_avg));
        let _ = writeln!(out, "winkler = {}", opt(self.winkler));
        let _ = writeln!(out, "n = {}", self.n);
        for (tau, v) in &self.pinball_by_quantile {
            let _ = writeln!(out, "pinball_q{} = {}", (tau * 100.0).round() as i64, v);
        }
        out
    }

    /// Row matching [`CSV_HEADER`]; missing scores are empty cells.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.rmse,
            self.mae,
            opt(self.pinball_avg),
            opt(self.winkler),
            self.n
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn dist(rows: Vec<Vec<f64>>) -> ForecastDistribution {
        let s = rows.len();
        let h = rows[0].len();
        ForecastDistribution::new(Array2::from_shape_vec((s, h), rows.concat()).unwrap()).unwrap()
    }

    #[test]
    fn pinball_examples() {
        assert_eq!(pinball(2.0, 1.0, 0.9).unwrap(), 0.9);
        assert!((pinball(1.0, 2.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(pinball(1.5, 1.5, 0.3).unwrap(), 0.0);
        assert!(pinball(1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn winkler_examples() {
        assert_eq!(winkler(2.0, 1.0, 3.0, 0.1).unwrap(), 2.0);
        assert!((winkler(0.5, 1.0, 3.0, 0.1).unwrap() - 12.0).abs() < 1e-12);
        assert!((winkler(3.5, 1.0, 3.0, 0.1).unwrap() - 12.0).abs() < 1e-12);
        assert!(winkler(2.0, 3.0, 1.0, 0.1).is_err());
        assert!(winkler(2.0, 1.0, 3.0, 0.0).is_err());
    }

    #[test]
    fn point_error_examples() {
        assert!((rmse(&[0.0, 3.0], &[0.0, 0.0]).unwrap() - 4.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae(&[0.0, 3.0], &[0.0, 0.0]).unwrap(), 1.5);
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!((rmse(&[1.5, 2.5], &[1.0, 2.0]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(rmse(&[1.0], &[1.0, 2.0]), Err(Error::ShapeError(_))));
        assert!(matches!(mae(&[], &[]), Err(Error::ShapeError(_))));
    }

    #[test]
    fn median_of_two_samples() {
        let (avg, _) = pinball_avg(&[dist(vec![vec![0.0], vec![2.0]])], &[vec![1.0]], &[0.5]).unwrap();
        assert_eq!(avg, 0.0);
    }

    #[test]
    fn collapsed_distribution_scores_zero() {
        let d = dist(vec![vec![0.3, 0.7]; 10]);
        let r = ScoreReport::compute(&[d], &[vec![0.3, 0.7]], &DEFAULT_QUANTILES, 0.1, true).unwrap();
        assert_eq!(r.pinball_avg, Some(0.0));
        assert_eq!(r.winkler, Some(0.0));
        assert!(r.rmse < 1e-15);
        assert_eq!(r.n, 2);
    }

    #[test]
    fn offset_grows_linearly() {
        let base: Vec<Vec<f64>> = (0..21).map(|i| vec![(i as f64 - 10.0) * 0.1]).collect();
        let score = |c: f64| {
            let rows = base.iter().map(|r| vec![r[0] + c]).collect();
            pinball_avg(&[dist(rows)], &[vec![0.0]], &DEFAULT_QUANTILES).unwrap().0
        };
        let (a, b, c) = (score(5.0), score(6.0), score(7.0));
        assert!(((c - b) - (b - a)).abs() < 1e-12);
        assert!(c > b);
    }

    #[test]
    fn report_layouts() {
        let point = ScoreReport {
            n: 4,
            rmse: 0.5,
            mae: 0.25,
            pinball_avg: None,
            winkler: None,
            pinball_by_quantile: vec![],
        };
        assert_eq!(point.csv_row(), "0.5,0.25,,,4");
        let text = ScoreReport {
            pinball_avg: Some(0.1),
            winkler: Some(1.0),
            pinball_by_quantile: vec![(0.1, 0.05)],
            ..point
        }
        .to_text();
        assert!(text.contains("pinball_q10 = 0.05"));
        assert!(text.starts_with("rmse = 0.5\nmae = 0.25\npinball_avg = 0.1\nwinkler = 1\n"));
    }

    #[test]
    fn coverage_counts_inclusive_bounds() {
        assert_eq!(coverage(&[1.0, 2.0, 5.0], &[1.0, 0.0, 0.0], &[2.0, 2.0, 4.0]).unwrap(), 2.0 / 3.0);
    }
}

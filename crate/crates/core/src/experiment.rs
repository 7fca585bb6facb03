//! End-to-end pipeline shared by the command-line tool and the tests:
//! configuration, data preparation, training, evaluation, and the method
//! comparison matrix.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataio::{self, ColumnSpec, Scaler, Series, Split, SynthSpec, WindowSet};
use crate::error::{Error, Result};
use crate::forecast::{self, ForecastDistribution, ForecastModel};
use crate::metrics::{self, ScoreReport};
use crate::recurrent::{CellKind, NetworkConfig};
use crate::training::{self, TrainConfig, TrainReport};
use crate::variational::{DivergenceKind, DivergenceSpec};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Where the series comes from: a long CSV or the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSpec>,
    #[serde(default)]
    pub columns: ColumnSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::cell_kind")]
    pub cell_kind: CellKind,
    #[serde(default = "defaults::hidden")]
    pub hidden: usize,
    #[serde(default = "defaults::bayesian")]
    pub bayesian: bool,
    #[serde(default = "defaults::prior_sigma")]
    pub prior_sigma: f64,
    #[serde(default = "defaults::rho_init")]
    pub rho_init: f64,
    /// Horizon steps per network; 0 means the whole horizon.
    #[serde(default)]
    pub block_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cell_kind: defaults::cell_kind(),
            hidden: defaults::hidden(),
            bayesian: defaults::bayesian(),
            prior_sigma: defaults::prior_sigma(),
            rho_init: defaults::rho_init(),
            block_size: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    #[serde(default = "defaults::train_fraction")]
    pub train_fraction: f64,
    /// Spacing of forecast origins in the test segment.
    #[serde(default = "defaults::eval_stride")]
    pub eval_stride: usize,
    /// Spacing of validation window origins.
    #[serde(default = "defaults::validation_stride")]
    pub validation_stride: usize,
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    #[serde(default = "defaults::levels")]
    pub levels: Vec<f64>,
    #[serde(default = "defaults::quantiles")]
    pub quantiles: Vec<f64>,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

mod defaults {
    use super::*;
    pub fn cell_kind() -> CellKind {
        CellKind::Bilstm
    }
    pub fn hidden() -> usize {
        64
    }
    pub fn bayesian() -> bool {
        true
    }
    pub fn prior_sigma() -> f64 {
        1.0
    }
    pub fn rho_init() -> f64 {
        -3.0
    }
    pub fn k() -> usize {
        48
    }
    pub fn horizon() -> usize {
        48
    }
    pub fn train_fraction() -> f64 {
        0.75
    }
    pub fn eval_stride() -> usize {
        48
    }
    pub fn validation_stride() -> usize {
        1
    }
    pub fn samples() -> usize {
        forecast::DEFAULT_SAMPLES
    }
    pub fn levels() -> Vec<f64> {
        forecast::DEFAULT_LEVELS.to_vec()
    }
    pub fn quantiles() -> Vec<f64> {
        metrics::DEFAULT_QUANTILES.to_vec()
    }
    pub fn gamma() -> f64 {
        metrics::DEFAULT_GAMMA
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("out")
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            k: defaults::k(),
            horizon: defaults::horizon(),
            train_fraction: defaults::train_fraction(),
            eval_stride: defaults::eval_stride(),
            validation_stride: defaults::validation_stride(),
            samples: defaults::samples(),
            levels: defaults::levels(),
            quantiles: defaults::quantiles(),
            gamma: defaults::gamma(),
            output_dir: defaults::output_dir(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn open_unit(field: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::config(field, format!("{v} must lie in (0, 1)")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .map(|s| text[s].lines().next().unwrap_or("").trim().to_string())
                .filter(|s| !s.is_empty())
                .unwrap_or_else(|| "config".to_string());
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Loads a config file after applying `dotted.key=value` overrides.
    /// Values are read as TOML literals, falling back to plain strings.
    pub fn load_with_overrides(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let text = apply_overrides(&text, overrides)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(p) = &cfg.data.path {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.data.path = Some(dir.join(p));
                }
            }
        }
        Ok(cfg)
    }

    /// Fully materialized TOML, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the materialized config,
    /// ignoring `output_dir` so that a run hashes the same wherever it is written.
    pub fn hash(&self) -> String {
        let mut cfg = self.clone();
        cfg.output_dir = PathBuf::new();
        short_hash(&cfg.to_toml())
    }

    pub fn block_size(&self) -> usize {
        if self.model.block_size == 0 {
            self.horizon
        } else {
            self.model.block_size
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k", "must be >= 1"));
        }
        if self.horizon == 0 {
            return Err(Error::config("horizon", "must be >= 1"));
        }
        if self.block_size() > self.horizon {
            return Err(Error::config("model.block_size", "must not exceed horizon"));
        }
        if self.model.hidden == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if !(self.model.prior_sigma > 0.0) {
            return Err(Error::config("model.prior_sigma", "must be > 0"));
        }
        open_unit("train_fraction", self.train_fraction)?;
        if self.train_fraction + self.train.validation_fraction >= 1.0 {
            return Err(Error::config("train.validation_fraction", "train + validation fractions must be < 1"));
        }
        if self.eval_stride == 0 {
            return Err(Error::config("eval_stride", "must be >= 1"));
        }
        if self.validation_stride == 0 {
            return Err(Error::config("validation_stride", "must be >= 1"));
        }
        if self.samples == 0 {
            return Err(Error::config("samples", "must be >= 1"));
        }
        for &l in &self.levels {
            open_unit("levels", l)?;
        }
        for &q in &self.quantiles {
            open_unit("quantiles", q)?;
        }
        if self.quantiles.is_empty() {
            return Err(Error::config("quantiles", "must not be empty"));
        }
        open_unit("gamma", self.gamma)?;
        match (&self.data.path, &self.data.synth) {
            (Some(_), Some(_)) => return Err(Error::config("data", "give either `path` or `synth`, not both")),
            (None, None) => return Err(Error::config("data", "one of `path` or `synth` is required")),
            _ => {}
        }
        if let Some(s) = &self.data.synth {
            if s.days == 0 {
                return Err(Error::config("data.synth.days", "must be >= 1"));
            }
            if !(0.0..1.0).contains(&s.outlier_rate) {
                return Err(Error::config("data.synth.outlier_rate", "must lie in [0, 1)"));
            }
        }
        self.train.validate()
    }

    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            cell_kind: self.model.cell_kind,
            hidden: self.model.hidden,
            input_dim: 1,
            horizon: self.block_size(),
            bayesian: self.model.bayesian,
            prior_sigma: self.model.prior_sigma,
            rho_init: self.model.rho_init,
        }
    }

    pub fn header_lines(&self) -> Vec<String> {
        vec![format!("solarbnn {VERSION} config_hash={}", self.hash())]
    }
}

pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<String> {
    if overrides.is_empty() {
        return Ok(text.to_string());
    }
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.as_str(), "override must look like key=value"))?;
        let key = key.trim();
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| Error::config(key, "empty key"))?;
        let mut node = &mut table;
        for part in parts {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{part}` is not a table")))?;
        }
        node.insert(last.to_string(), value);
    }
    Ok(toml::to_string(&table).expect("table serializes"))
}

/// Stable sub-seed for a named purpose.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// First 16 hex digits of the SHA-256 of `text`.
pub fn short_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Output file header for artifacts not tied to an experiment config.
pub fn header_for(description: &str) -> Vec<String> {
    vec![format!("solarbnn {VERSION} config_hash={}", short_hash(description))]
}

pub fn load_series(data: &DataConfig) -> Result<Series> {
    match (&data.path, &data.synth) {
        (Some(p), None) => dataio::load_csv(p, &data.columns),
        (None, Some(s)) => dataio::synth_solar(s.days, s.seed, s.outlier_rate, s.outlier_scale),
        _ => Err(Error::config("data", "exactly one of `path` or `synth` is required")),
    }
}

/// Scaled series, split, and window sets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: Series,
    pub scaler: Scaler,
    pub scaled: Vec<f64>,
    pub split: Split,
    pub train: WindowSet,
    pub validation: WindowSet,
    pub test: WindowSet,
}

pub fn prepare(series: Series, cfg: &ExperimentConfig) -> Result<Prepared> {
    let split = dataio::split_indices(series.len(), cfg.train_fraction, cfg.train.validation_fraction)?;
    let scaler = Scaler::fit(&series.values()[split.train.clone()])?;
    let scaled = scaler.transform(series.values());
    let (k, h) = (cfg.k, cfg.horizon);
    let train = dataio::segment_windows(&scaled, split.train.start, split.train.end, k, h, 1)?;
    let validation = dataio::segment_windows(
        &scaled,
        split.validation.start,
        split.validation.end,
        k,
        h,
        cfg.validation_stride,
    )?;
    let test = dataio::segment_windows(&scaled, split.test.start, split.test.end, k, h, cfg.eval_stride)?;
    Ok(Prepared {
        series,
        scaler,
        scaled,
        split,
        train,
        validation,
        test,
    })
}

/// Trains one network per horizon block.
pub fn train_model(prepared: &Prepared, cfg: &ExperimentConfig) -> Result<(ForecastModel, Vec<TrainReport>)> {
    cfg.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "init"));
    let mut model = ForecastModel::new(
        cfg.k,
        cfg.horizon,
        cfg.block_size(),
        prepared.scaler,
        &cfg.network_config(),
        &mut init_rng,
    )?;
    let ranges = model.block_ranges();
    let mut reports = Vec::with_capacity(ranges.len());
    for (i, (range, net)) in ranges.into_iter().zip(model.blocks.iter_mut()).enumerate() {
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, &format!("train/{i}")),
            ..cfg.train.clone()
        };
        reports.push(training::train_block(
            net,
            &prepared.train,
            &prepared.validation,
            &train_cfg,
            range.start,
        )?);
    }
    Ok((model, reports))
}

/// Scores plus empirical coverage per interval level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scores: ScoreReport,
    pub coverage: Vec<(f64, f64)>,
}

/// Predictive distributions (statistics clamped at zero) and actual kWh
/// paths for the test windows.
pub fn test_forecasts(
    model: &ForecastModel,
    windows: &WindowSet,
    samples: usize,
    seed: u64,
) -> Result<(Vec<ForecastDistribution>, Vec<Vec<f64>>)> {
    let idx: Vec<usize> = (0..windows.len()).collect();
    let inputs = windows.input_block(&idx);
    let dists = forecast::mc_forecast_batch(model, &inputs, samples, seed, false)?
        .into_iter()
        .map(|d| d.clamp_nonnegative())
        .collect();
    let actuals = (0..windows.len())
        .map(|i| model.scaler.inverse(&windows.targets.row(i).to_vec()))
        .collect();
    Ok((dists, actuals))
}

pub fn evaluate(model: &ForecastModel, prepared: &Prepared, cfg: &ExperimentConfig) -> Result<Evaluation> {
    evaluate_windows(model, &prepared.test, cfg)
}

/// Windows of a whole series taken as test data, scaled with the model's
/// own scaler.
pub fn series_windows(model: &ForecastModel, series: &Series, stride: usize) -> Result<WindowSet> {
    let scaled = model.scaler.transform(series.values());
    dataio::segment_windows(&scaled, 0, scaled.len(), model.k, model.horizon, stride)
}

pub fn evaluate_windows(model: &ForecastModel, windows: &WindowSet, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let (dists, actuals) = test_forecasts(model, windows, cfg.samples, derive_seed(cfg.seed, "forecast"))?;
    let probabilistic = model.is_bayesian();
    let scores = ScoreReport::compute(&dists, &actuals, &cfg.quantiles, cfg.gamma, probabilistic)?;
    let mut coverage = Vec::new();
    if probabilistic && cfg.samples >= 2 {
        let ys: Vec<f64> = actuals.concat();
        for &level in &cfg.levels {
            let mut lo = Vec::new();
            let mut hi = Vec::new();
            for d in &dists {
                let band = d.intervals(&[level])?.remove(0);
                lo.extend(band.lower);
                hi.extend(band.upper);
            }
            coverage.push((level, metrics::coverage(&ys, &lo, &hi)?));
        }
    }
    Ok(Evaluation { scores, coverage })
}

/// Training mode of a comparison cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Deterministic,
    Kl,
    Ab { alpha: f64, beta: f64 },
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Deterministic => "det".into(),
            Mode::Kl => "kl".into(),
            Mode::Ab { alpha, beta } => format!("ab({alpha},{beta})"),
        }
    }

    /// Applies the mode to a copy of the base configuration. The
    /// alpha-beta sample count comes from the base divergence when it is
    /// already alpha-beta.
    pub fn configure(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        match *self {
            Mode::Deterministic => {
                cfg.model.bayesian = false;
                cfg.train.divergence = DivergenceSpec::none();
            }
            Mode::Kl => {
                cfg.model.bayesian = true;
                cfg.train.divergence = DivergenceSpec::kl();
            }
            Mode::Ab { alpha, beta } => {
                let mc = match base.train.divergence.kind {
                    DivergenceKind::AbMonteCarlo => base.train.divergence.mc_samples,
                    _ => DivergenceSpec::default().mc_samples,
                };
                cfg.model.bayesian = true;
                cfg.train.divergence = DivergenceSpec::ab_monte_carlo(alpha, beta, mc);
            }
        }
        cfg
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let d = DivergenceSpec::default();
        match s.to_ascii_lowercase().as_str() {
            "det" | "deterministic" => Ok(Mode::Deterministic),
            "kl" => Ok(Mode::Kl),
            "ab" => Ok(Mode::Ab {
                alpha: d.alpha,
                beta: d.beta,
            }),
            other => Err(Error::config("modes", format!("unknown mode `{other}`"))),
        }
    }
}

/// Display name in the style of the comparison tables.
pub fn method_name(cell: CellKind, mode: &Mode) -> String {
    let arch = match cell {
        CellKind::Rnn => "RNN",
        CellKind::Lstm => "LSTM",
        CellKind::Bilstm => "BiLSTM",
    };
    match mode {
        Mode::Deterministic => arch.to_string(),
        Mode::Kl => format!("Bayesian {arch} (KL)"),
        Mode::Ab { alpha, beta } => format!("Bayesian {arch} (AB {alpha},{beta})"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareSpec {
    pub cells: Vec<CellKind>,
    pub modes: Vec<Mode>,
    pub horizons: Vec<usize>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub method: String,
    pub cell: CellKind,
    pub mode: Mode,
    pub horizon: usize,
    pub seed: u64,
    pub scores: ScoreReport,
    pub coverage: Vec<(f64, f64)>,
    pub epochs_run: usize,
    /// Per-epoch training loss of the first horizon block.
    pub train_loss: Vec<f64>,
}

/// Data for one comparison seed. Synthetic series are regenerated with a
/// seed-specific generator seed; file data is shared by every seed. All
/// methods at the same seed see the same split.
pub fn seed_series(base: &ExperimentConfig, seed: u64) -> Result<Series> {
    let mut data = base.data.clone();
    if let Some(s) = &mut data.synth {
        s.seed = s.seed.wrapping_add(seed);
    }
    load_series(&data)
}

pub fn run_cell(series: &Series, base: &ExperimentConfig, cell: CellKind, mode: Mode, horizon: usize, seed: u64) -> Result<CompareRow> {
    let mut cfg = mode.configure(base);
    cfg.model.cell_kind = cell;
    cfg.horizon = horizon;
    if cfg.model.block_size > horizon {
        cfg.model.block_size = 0;
    }
    let cell_id = format!("{}/{}/{}", cell.as_str(), mode.label(), horizon);
    cfg.seed = derive_seed(seed, &cell_id);
    let prepared = prepare(series.clone(), &cfg)?;
    let (model, reports) = train_model(&prepared, &cfg)?;
    let eval = evaluate(&model, &prepared, &cfg)?;
    Ok(CompareRow {
        method: method_name(cell, &mode),
        cell,
        mode,
        horizon,
        seed,
        scores: eval.scores,
        coverage: eval.coverage,
        epochs_run: reports.iter().map(|r| r.epochs_run).max().unwrap_or(0),
        train_loss: reports.first().map(|r| r.train_loss.clone()).unwrap_or_default(),
    })
}

/// One cell of a comparison run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Job {
    pub cell: CellKind,
    pub mode: Mode,
    pub horizon: usize,
    pub seed: u64,
}

/// Runs every (seed, horizon, cell, mode) combination. Rows come back in
/// that nesting order regardless of scheduling.
pub fn compare(base: &ExperimentConfig, spec: &CompareSpec) -> Result<Vec<CompareRow>> {
    let mut jobs = Vec::new();
    for &seed in &spec.seeds {
        for &horizon in &spec.horizons {
            for &cell in &spec.cells {
                for &mode in &spec.modes {
                    jobs.push(Job {
                        cell,
                        mode,
                        horizon,
                        seed,
                    });
                }
            }
        }
    }
    run_jobs(base, &jobs)
}

/// Runs arbitrary cells in parallel; rows follow the order of `jobs`.
pub fn run_jobs(base: &ExperimentConfig, jobs: &[Job]) -> Result<Vec<CompareRow>> {
    let mut seeds: Vec<u64> = jobs.iter().map(|j| j.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let series: Vec<Series> = seeds.iter().map(|s| seed_series(base, *s)).collect::<Result<_>>()?;
    jobs.par_iter()
        .map(|j| {
            let si = seeds.binary_search(&j.seed).expect("seed listed");
            run_cell(&series[si], base, j.cell, j.mode, j.horizon, j.seed)
        })
        .collect()
}

pub const COMPARE_HEADER: &str =
    "method,cell,mode,horizon,seed,rmse,mae,pinball_avg,winkler,n,coverage50,coverage90,epochs_run";

fn coverage_at(cov: &[(f64, f64)], level: f64) -> String {
    cov.iter()
        .find(|(l, _)| (l - level).abs() < 1e-12)
        .map(|(_, c)| c.to_string())
        .unwrap_or_default()
}

pub fn compare_csv(rows: &[CompareRow], header: &[String]) -> String {
    let mut out = String::new();
    for line in header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str(COMPARE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},{},{},{}\n",
            r.method,
            r.cell.as_str(),
            r.mode.label().replace(',', ";"),
            r.horizon,
            r.seed,
            r.scores.csv_row(),
            coverage_at(&r.coverage, 0.5),
            coverage_at(&r.coverage, 0.9),
            r.epochs_run
        ));
    }
    out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-(method, horizon) medians over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub horizon: usize,
    pub rmse: f64,
    pub mae: f64,
    pub pinball_avg: Option<f64>,
    pub winkler: Option<f64>,
    pub seeds: usize,
}

pub fn summarize(rows: &[CompareRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.method.clone(), r.horizon);
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    keys.into_iter()
        .map(|(method, horizon)| {
            let group: Vec<&CompareRow> = rows
                .iter()
                .filter(|r| r.method == method && r.horizon == horizon)
                .collect();
            let med = |f: &dyn Fn(&CompareRow) -> Option<f64>| {
                let mut v: Vec<f64> = group.iter().filter_map(|r| f(r)).collect();
                if v.is_empty() {
                    None
                } else {
                    Some(median(&mut v))
                }
            };
            SummaryRow {
                rmse: med(&|r| Some(r.scores.rmse)).unwrap_or(f64::NAN),
                mae: med(&|r| Some(r.scores.mae)).unwrap_or(f64::NAN),
                pinball_avg: med(&|r| r.scores.pinball_avg),
                winkler: med(&|r| r.scores.winkler),
                seeds: group.len(),
                method,
                horizon,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow], header: &[String]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::new();
    for line in header {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("method,horizon,rmse,mae,pinball_avg,winkler,seeds\n");
    for r in rows {
        out.push_str(&format!(
            "\"{}\",{},{},{},{},{},{}\n",
            r.method,
            r.horizon,
            r.rmse,
            r.mae,
            opt(r.pinball_avg),
            opt(r.winkler),
            r.seeds
        ));
    }
    out
}


/// Trained model together with the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub model: ForecastModel,
}

impl Checkpoint {
    pub fn new(config: &ExperimentConfig, model: ForecastModel) -> Self {
        Checkpoint {
            version: VERSION.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            model,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text).map_err(|e| Error::ParseError {
            line: e.line(),
            message: e.to_string(),
        })?;
        ckpt.model.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        dataio::write_text(path, &self.to_json())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

//! Command-line front end. Every subcommand is deterministic given its
//! inputs and seed, and every output file starts with a header comment
//! carrying the artifact version and a config hash.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::dataio::{self, Series, SynthSpec};
use crate::error::{Error, Result};
use crate::experiment::{self, Checkpoint, CompareSpec, ExperimentConfig, Mode};
use crate::forecast;
use crate::recurrent::CellKind;
use crate::training::TrainReport;

#[derive(Debug, Parser)]
#[command(name = "solarbnn", version, about = "Bayesian BiLSTM solar generation forecaster")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract one customer's gross generation from a wide half-hourly CSV.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        customer: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a synthetic rooftop-PV series.
    Synth {
        #[arg(long, default_value_t = 120)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.02)]
        outlier_rate: f64,
        #[arg(long, default_value_t = 1.0)]
        outlier_scale: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Train a model from a config file.
    Train(ConfigArgs),
    /// Forecast the next steps after the end of a series (or an origin).
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Long CSV to read the lookback window from; defaults to the
        /// checkpoint's data source.
        #[arg(long)]
        series: Option<PathBuf>,
        /// Timestamp of the first forecast step; defaults to just after
        /// the last observation.
        #[arg(long)]
        origin: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split, or on a whole test series.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Treat this long CSV as the test series.
        #[arg(long)]
        series: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the method comparison matrix.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "rnn,lstm,bilstm")]
        cells: Vec<CellKind>,
        #[arg(long, value_delimiter = ',', default_value = "det,kl,ab")]
        modes: Vec<Mode>,
        #[arg(long, value_delimiter = ',', default_value = "1,12,24,48")]
        horizons: Vec<usize>,
        /// Number of seeds, run as 0..n.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Alpha-beta sweep as `alpha:beta` pairs; replaces the mode list.
        #[arg(long, value_delimiter = ',')]
        ab_grid: Option<Vec<String>>,
    },
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config entry, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load_with_overrides(&self.config, &self.overrides)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        Ok(cfg)
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Convert {
            input,
            customer,
            output,
        } => cmd_convert(&input, &customer, &output),
        Command::Synth {
            days,
            seed,
            outlier_rate,
            outlier_scale,
            output,
        } => cmd_synth(
            &SynthSpec {
                days,
                seed,
                outlier_rate,
                outlier_scale,
            },
            &output,
        ),
        Command::Train(args) => cmd_train(&args.load()?).map(|_| ()),
        Command::Forecast {
            checkpoint,
            series,
            origin,
            steps,
            samples,
            levels,
            seed,
            output,
        } => {
            let opts = ForecastOptions {
                series,
                origin,
                steps,
                samples,
                levels,
                seed,
                output,
            };
            cmd_forecast(&checkpoint, &opts).map(|_| ())
        }
        Command::Evaluate {
            checkpoint,
            config,
            series,
            output_dir,
        } => cmd_evaluate(&checkpoint, config.as_deref(), series.as_deref(), output_dir.as_deref()).map(|_| ()),
        Command::Compare {
            config,
            cells,
            modes,
            horizons,
            seeds,
            ab_grid,
        } => {
            let cfg = config.load()?;
            let modes = match ab_grid {
                Some(pairs) => pairs.iter().map(|p| parse_ab_pair(p)).collect::<Result<_>>()?,
                None => modes,
            };
            let spec = CompareSpec {
                cells,
                modes,
                horizons,
                seeds: (0..seeds).collect(),
            };
            cmd_compare(&cfg, &spec).map(|_| ())
        }
    }
}

fn parse_ab_pair(text: &str) -> Result<Mode> {
    let bad = || Error::config("ab_grid", format!("`{text}` is not an alpha:beta pair"));
    let (a, b) = text.split_once(':').ok_or_else(bad)?;
    let alpha: f64 = a.trim().parse().map_err(|_| bad())?;
    let beta: f64 = b.trim().parse().map_err(|_| bad())?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::config("ab_grid", "alpha and beta must be > 0"));
    }
    Ok(Mode::Ab { alpha, beta })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn commented(header: &[String], body: &str) -> String {
    let mut out: String = header.iter().map(|l| format!("# {l}\n")).collect();
    out.push_str(body);
    out
}

pub fn cmd_convert(input: &Path, customer: &str, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let series = dataio::convert_wide(&text, customer)?;
    let name = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let header = experiment::header_for(&format!("convert {name} customer={customer}"));
    ensure_parent(output)?;
    dataio::write_csv(&series, output, &header)
}

pub fn cmd_synth(spec: &SynthSpec, output: &Path) -> Result<()> {
    if spec.days == 0 {
        return Err(Error::config("days", "must be >= 1"));
    }
    let series = dataio::synth_solar(spec.days, spec.seed, spec.outlier_rate, spec.outlier_scale)?;
    let desc = toml::to_string(spec).expect("spec serializes");
    ensure_parent(output)?;
    dataio::write_csv(&series, output, &experiment::header_for(&desc))
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    version: &'a str,
    config_hash: String,
    reports: &'a [TrainReport],
}

/// Files written by `cmd_train`.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub training_log: PathBuf,
    pub config_echo: PathBuf,
    pub report: PathBuf,
    pub reports: Vec<TrainReport>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainOutputs> {
    cfg.validate()?;
    let started = Instant::now();
    let series = experiment::load_series(&cfg.data)?;
    let prepared = experiment::prepare(series, cfg)?;
    let (model, reports) = experiment::train_model(&prepared, cfg)?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let header = cfg.header_lines();

    let checkpoint = dir.join("checkpoint.json");
    Checkpoint::new(cfg, model).save(&checkpoint)?;

    let mut log = String::from("block,epoch,train_loss,val_loss\n");
    for (b, r) in reports.iter().enumerate() {
        for (e, (t, v)) in r.train_loss.iter().zip(&r.val_loss).enumerate() {
            log.push_str(&format!("{b},{},{t},{v}\n", e + 1));
        }
    }
    let training_log = dir.join("training_log.csv");
    dataio::write_text(&training_log, &commented(&header, &log))?;

    let config_echo = dir.join("config_echo.toml");
    dataio::write_text(&config_echo, &commented(&header, &cfg.to_toml()))?;

    let report = dir.join("train_report.json");
    let summary = TrainSummary {
        version: experiment::VERSION,
        config_hash: cfg.hash(),
        reports: &reports,
    };
    dataio::write_text(&report, &serde_json::to_string_pretty(&summary).expect("report serializes"))?;
    eprintln!(
        "trained {} block(s) in {:.1}s -> {}",
        reports.len(),
        started.elapsed().as_secs_f64(),
        checkpoint.display()
    );
    Ok(TrainOutputs {
        checkpoint,
        training_log,
        config_echo,
        report,
        reports,
    })
}

#[derive(Clone, Debug, Default)]
pub struct ForecastOptions {
    pub series: Option<PathBuf>,
    pub origin: Option<String>,
    pub steps: Option<usize>,
    pub samples: Option<usize>,
    pub levels: Option<Vec<f64>>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

fn load_data(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Series> {
    match path {
        Some(p) => dataio::load_csv(p, &cfg.data.columns),
        None => experiment::load_series(&cfg.data),
    }
}

/// Writes the forecast CSV and returns its path.
pub fn cmd_forecast(checkpoint: &Path, opts: &ForecastOptions) -> Result<PathBuf> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (cfg, model) = (&ckpt.config, &ckpt.model);
    let steps = opts.steps.unwrap_or(model.horizon);
    if steps == 0 || steps > model.horizon {
        return Err(Error::config("steps", format!("must lie in 1..={}", model.horizon)));
    }
    let samples = opts.samples.unwrap_or(cfg.samples);
    if samples == 0 {
        return Err(Error::config("samples", "must be >= 1"));
    }
    let levels = opts.levels.clone().unwrap_or_else(|| cfg.levels.clone());
    for &l in &levels {
        if !(l > 0.0 && l < 1.0) {
            return Err(Error::config("levels", format!("{l} must lie in (0, 1)")));
        }
    }
    let seed = opts.seed.unwrap_or_else(|| experiment::derive_seed(cfg.seed, "forecast"));

    let series = load_data(cfg, opts.series.as_deref())?;
    let origin = match &opts.origin {
        None => series.len(),
        Some(text) => {
            let t = dataio::parse_timestamp(text)
                .ok_or_else(|| Error::config("origin", format!("cannot parse timestamp `{text}`")))?;
            series
                .position(&t)
                .ok_or_else(|| Error::NotFound(format!("origin {text} is not in the series")))?
        }
    };
    if origin < model.k {
        return Err(Error::TooShort {
            needed: model.k,
            have: origin,
        });
    }
    let window = model.scaler.transform(&series.values()[origin - model.k..origin]);
    let dist = forecast::mc_forecast(model, &window, samples, seed, false)?;
    let mut fc = forecast::summarize(&dist, &levels)?;
    fc.mean.truncate(steps);
    for b in &mut fc.bands {
        b.lower.truncate(steps);
        b.upper.truncate(steps);
    }
    let actual = (origin + steps <= series.len()).then(|| &series.values()[origin..origin + steps]);
    let csv = forecast::forecast_csv(&fc, actual, &cfg.header_lines())?;
    let output = opts.output.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("forecast.csv")
    });
    ensure_parent(&output)?;
    dataio::write_text(&output, &csv)?;
    Ok(output)
}

/// Writes `scores.txt` and `scores.csv`; the checkpoint is only read.
pub fn cmd_evaluate(
    checkpoint: &Path,
    config: Option<&Path>,
    series: Option<&Path>,
    output_dir: Option<&Path>,
) -> Result<experiment::Evaluation> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ckpt.config.clone(),
    };
    let model = &ckpt.model;
    let windows = match series {
        Some(p) => {
            let s = dataio::load_csv(p, &cfg.data.columns)?;
            experiment::series_windows(model, &s, cfg.eval_stride)?
        }
        None => {
            let s = experiment::load_series(&cfg.data)?;
            let split = dataio::split_indices(s.len(), cfg.train_fraction, cfg.train.validation_fraction)?;
            let scaled = model.scaler.transform(s.values());
            dataio::segment_windows(&scaled, split.test.start, split.test.end, model.k, model.horizon, cfg.eval_stride)?
        }
    };
    let eval = experiment::evaluate_windows(model, &windows, &cfg)?;
    let dir = output_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().unwrap_or_else(|| Path::new(".")).to_path_buf());
    ensure_dir(&dir)?;
    let header = cfg.header_lines();
    let mut text = eval.scores.to_text();
    for (level, c) in &eval.coverage {
        text.push_str(&format!("coverage{} = {c}\n", (level * 100.0).round()));
    }
    dataio::write_text(dir.join("scores.txt"), &commented(&header, &text))?;
    let csv = format!("{}\n{}\n", crate::metrics::CSV_HEADER, eval.scores.csv_row());
    dataio::write_text(dir.join("scores.csv"), &commented(&header, &csv))?;
    Ok(eval)
}

/// Writes `compare.csv` (one row per run) and `compare_summary.csv`
/// (medians over seeds).
pub fn cmd_compare(cfg: &ExperimentConfig, spec: &CompareSpec) -> Result<Vec<experiment::CompareRow>> {
    cfg.validate()?;
    if spec.cells.is_empty() || spec.modes.is_empty() || spec.horizons.is_empty() || spec.seeds.is_empty() {
        return Err(Error::config("compare", "cells, modes, horizons and seeds must be non-empty"));
    }
    if spec.horizons.contains(&0) {
        return Err(Error::config("horizons", "must be >= 1"));
    }
    let rows = experiment::compare(cfg, spec)?;
    let dir = &cfg.output_dir;
    ensure_dir(dir)?;
    let header = cfg.header_lines();
    dataio::write_text(dir.join("compare.csv"), &experiment::compare_csv(&rows, &header))?;
    let summary = experiment::summarize(&rows);
    dataio::write_text(dir.join("compare_summary.csv"), &experiment::summary_csv(&summary, &header))?;
    Ok(rows)
}


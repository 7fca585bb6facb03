//! Acceptance suite. Each test writes one `criterion N: PASS|FAIL` line to
//! stdout, bypassing the test harness's capture so the verdict shows up in a
//! plain `cargo test` run. A FAIL is reported, not raised, so the rest of the
//! workspace still runs. The experiment criteria share one set of training
//! runs.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use solarbnn_core::autodiff::{Graph, Matrix, NodeId, Primitive};
use solarbnn_core::cli::{self, ForecastOptions};
use solarbnn_core::dataio::SynthSpec;
use solarbnn_core::experiment::{self, CompareRow, DataConfig, ExperimentConfig, Job, Mode, ModelConfig};
use solarbnn_core::metrics;
use solarbnn_core::recurrent::{CellKind, Network, NetworkConfig};
use solarbnn_core::training::{self, Batch, LossSettings, TrainConfig};
use solarbnn_core::variational::{self, DivergenceSpec, VariationalGaussian};

const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
const GRAD_BUDGET_SECS: f64 = 60.0;
const COEFF_TOL: f64 = 1e-12;
const MC_DRAWS: usize = 100_000;
const MC_SIGMAS: f64 = 3.0;
const METRIC_TOL: f64 = 1e-12;
const MATRIX_BUDGET_SECS: f64 = 15.0 * 60.0;
const HORIZON_SLACK: f64 = 0.05;
const COVERAGE_RANGE: (f64, f64) = (0.80, 0.99);
const SMOOTHING: usize = 5;
const FINAL_UPTURN: f64 = 0.02;
const SEEDS: u64 = 5;

fn emit(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: u32, pass: bool, detail: String) {
    emit(format!("criterion {n}: {} {detail}", if pass { "PASS" } else { "FAIL" }));
}

// ---------------------------------------------------------------- gradients

/// `|a - n| / max(1, |a|)` over every coordinate.
fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

fn central_differences(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let up = f(&x);
            x[i] = orig - eps;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

type Build = fn(&mut Graph, &[NodeId]) -> NodeId;

/// Operand shapes, a domain shift for the inputs, and the graph builder.
fn primitive_case(p: &Primitive) -> (Vec<(usize, usize)>, f64, Build) {
    fn ap(g: &mut Graph, p: Primitive, xs: &[NodeId]) -> NodeId {
        g.apply(p, xs).unwrap()
    }
    match p {
        Primitive::Add => (vec![(2, 3), (2, 3)], 0.0, |g, x| ap(g, Primitive::Add, x)),
        Primitive::Sub => (vec![(2, 3), (2, 3)], 0.0, |g, x| ap(g, Primitive::Sub, x)),
        Primitive::MulElementwise => (vec![(2, 3), (2, 3)], 0.0, |g, x| ap(g, Primitive::MulElementwise, x)),
        Primitive::MatMul => (vec![(2, 3), (3, 4)], 0.0, |g, x| ap(g, Primitive::MatMul, x)),
        Primitive::Scale(_) => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Scale(-1.7), x)),
        Primitive::Sigmoid => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Sigmoid, x)),
        Primitive::Tanh => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Tanh, x)),
        Primitive::Softplus => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Softplus, x)),
        Primitive::Log => (vec![(2, 3)], 2.0, |g, x| ap(g, Primitive::Log, x)),
        Primitive::Exp => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Exp, x)),
        Primitive::Square => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Square, x)),
        Primitive::Sum => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Sum, x)),
        Primitive::Mean => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Mean, x)),
        Primitive::ConcatRows => (vec![(1, 3), (2, 3), (1, 3)], 0.0, |g, x| ap(g, Primitive::ConcatRows, x)),
        Primitive::SliceRows { .. } => (vec![(4, 3)], 0.0, |g, x| {
            ap(g, Primitive::SliceRows { start: 1, end: 3 }, x)
        }),
        Primitive::Negate => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::Negate, x)),
        Primitive::AddColumn => (vec![(2, 3), (2, 1)], 0.0, |g, x| ap(g, Primitive::AddColumn, x)),
        Primitive::LogSumExp => (vec![(2, 3)], 0.0, |g, x| ap(g, Primitive::LogSumExp, x)),
    }
}

fn all_primitives() -> Vec<Primitive> {
    vec![
        Primitive::Add,
        Primitive::Sub,
        Primitive::MulElementwise,
        Primitive::MatMul,
        Primitive::Scale(0.0),
        Primitive::Sigmoid,
        Primitive::Tanh,
        Primitive::Softplus,
        Primitive::Log,
        Primitive::Exp,
        Primitive::Square,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::ConcatRows,
        Primitive::SliceRows { start: 0, end: 0 },
        Primitive::Negate,
        Primitive::AddColumn,
        Primitive::LogSumExp,
    ]
}

/// Gradient of `sum(W ⊙ op(x))` for a fixed random `W`, plus its value.
fn primitive_eval(shapes: &[(usize, usize)], build: Build, weights: &mut Option<Matrix>, flat: &[f64]) -> (f64, Vec<f64>) {
    let mut g = Graph::new();
    let mut offset = 0;
    let mut leaves = Vec::new();
    for &(r, c) in shapes {
        let m = Array2::from_shape_vec((r, c), flat[offset..offset + r * c].to_vec()).unwrap();
        offset += r * c;
        leaves.push(g.leaf(m, true).unwrap());
    }
    let out = build(&mut g, &leaves);
    let dim = g.value(out).raw_dim();
    let w = weights.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Array2::from_shape_simple_fn((dim[0], dim[1]), || rng.random_range(-1.0..1.0))
    });
    let wn = g.constant(w.clone()).unwrap();
    let prod = g.mul(out, wn).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let grad = leaves.iter().flat_map(|l| g.grad(*l).into_iter()).collect();
    (g.scalar_value(loss), grad)
}

fn batch_loss_eval(net: &mut Network, spec: &DivergenceSpec, flat: &[f64]) -> (f64, Vec<f64>) {
    net.set_flat_parameters(flat).unwrap();
    let mut data_rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = Array2::from_shape_simple_fn((4, 3), || data_rng.random_range(0.0..1.0));
    let targets = Array2::from_shape_simple_fn((2, 3), || data_rng.random_range(0.0..1.0));
    let settings = LossSettings {
        divergence: spec,
        obs_sigma: 0.5,
        num_batches: 2,
        num_train: 6,
        dropout: 0.0,
    };
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let batch = Batch {
        inputs: &inputs,
        targets: &targets,
    };
    let (nodes, leaves) = training::batch_loss(&mut g, net, &batch, &settings, &mut rng).unwrap();
    g.backward(nodes.total).unwrap();
    let grad = leaves.iter().flat_map(|l| g.grad(*l).into_iter()).collect();
    (g.scalar_value(nodes.total), grad)
}

#[test]
fn criterion_1_gradient_oracle() {
    let started = Instant::now();
    let mut worst_primitive: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in all_primitives() {
        let (shapes, shift, build) = primitive_case(&p);
        let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let x: Vec<f64> = (0..n).map(|_| shift + rng.random_range(-1.0..1.0)).collect();
        let mut w = None;
        let (_, analytic) = primitive_eval(&shapes, build, &mut w, &x);
        let numeric = central_differences(&mut |v| primitive_eval(&shapes, build, &mut w, v).0, &x, FD_EPS);
        let err = max_rel_error(&analytic, &numeric);
        assert!(err.is_finite(), "{p:?}");
        worst_primitive = worst_primitive.max(err);
    }

    let mut worst_network: f64 = 0.0;
    for spec in [DivergenceSpec::kl(), DivergenceSpec::ab_monte_carlo(1.0, 2.0, 3)] {
        let mut init = ChaCha8Rng::seed_from_u64(3);
        let mut net = Network::new(NetworkConfig::new(CellKind::Bilstm, 3, 2, true), &mut init).unwrap();
        let x = net.flat_parameters();
        let (_, analytic) = batch_loss_eval(&mut net, &spec, &x);
        let numeric = central_differences(&mut |v| batch_loss_eval(&mut net, &spec, v).0, &x, FD_EPS);
        worst_network = worst_network.max(max_rel_error(&analytic, &numeric));
    }
    let secs = started.elapsed().as_secs_f64();
    report(
        1,
        worst_primitive < GRAD_TOL && worst_network < GRAD_TOL && secs < GRAD_BUDGET_SECS,
        format!("primitives max rel err {worst_primitive:.2e}, Bayesian BiLSTM loss max rel err {worst_network:.2e}, {secs:.1}s"),
    );
}

// ------------------------------------------------------------- coefficient

#[test]
fn criterion_2_collapsed_coefficient() {
    let grid: Vec<f64> = (0..20).map(|i| 0.25 + (15.0 - 0.25) * i as f64 / 19.0).collect();
    let mut pairs: Vec<(f64, f64)> = grid.iter().flat_map(|a| grid.iter().map(move |b| (*a, *b))).collect();
    pairs.extend([(1.0, 2.0), (2.0, 3.0), (3.0, 4.0), (2.0, 6.0), (3.0, 8.0), (5.0, 15.0)]);
    let worst = pairs
        .iter()
        .map(|&(a, b)| variational::ab_coefficient(a, b).unwrap().abs())
        .fold(0.0, f64::max);
    report(2, worst <= COEFF_TOL, format!("max |coefficient| {worst:.2e} over {} pairs", pairs.len()));
}

// -------------------------------------------------------------- divergences

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[test]
fn criterion_3_divergence_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut kl_ok = true;
    let mut details = Vec::new();
    for layer in 0..5 {
        let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
        let mu = Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
        let rho = Array2::from_shape_simple_fn((r, c), || rng.random_range(-3.0..1.0));
        let prior: f64 = rng.random_range(0.5..2.0);
        let vg = VariationalGaussian::new(mu.clone(), rho.clone(), prior).unwrap();
        let mut g = Graph::new();
        let bound = vg.bind(&mut g, false).unwrap();
        let kl = variational::kl_gaussian(&mut g, &bound).unwrap();
        let closed = g.scalar_value(kl);

        let sigma = rho.mapv(softplus);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..MC_DRAWS {
            let mut v = 0.0;
            for (m, s) in mu.iter().zip(sigma.iter()) {
                let eps: f64 = rng.sample(StandardNormal);
                let w = m + s * eps;
                v += -s.ln() - 0.5 * eps * eps + prior.ln() + w * w / (2.0 * prior * prior);
            }
            sum += v;
            sum_sq += v * v;
        }
        let n = MC_DRAWS as f64;
        let mean = sum / n;
        let se = ((sum_sq / n - mean * mean) * n / (n - 1.0)).sqrt() / n.sqrt();
        let ok = (closed - mean).abs() <= MC_SIGMAS * se;
        kl_ok &= ok;
        details.push(format!("layer{layer} {:.2}se", (closed - mean).abs() / se));
    }

    let vg = VariationalGaussian::new(
        Array2::from_shape_vec((1, 2), vec![0.3, -0.4]).unwrap(),
        Array2::from_shape_vec((1, 2), vec![-1.0, 0.5]).unwrap(),
        1.0,
    )
    .unwrap();
    let mut g = Graph::new();
    let bound = vg.bind(&mut g, false).unwrap();
    let spec = DivergenceSpec::ab_monte_carlo(1.0, 2.0, MC_DRAWS);
    let mut log_p_values = Vec::with_capacity(MC_DRAWS);
    let d = variational::ab_divergence_mc(
        &mut g,
        &[bound],
        |g, w| {
            let lq = variational::log_posterior(g, &bound, w[0])?;
            log_p_values.push(g.scalar_value(lq));
            Ok(lq)
        },
        &spec,
        &mut rng,
    )
    .unwrap();
    let value = g.scalar_value(d);
    let se = variational::ab_estimate(&log_p_values, &log_p_values, 1.0, 2.0).unwrap().std_error;
    let ab_ok = value.abs() <= MC_SIGMAS * se;
    report(
        3,
        kl_ok && ab_ok,
        format!("KL vs MC [{}]; AB(1,2) with target = posterior: {value:.2e} (se {se:.2e})", details.join(", ")),
    );
}

// ------------------------------------------------------------------ metrics

#[test]
fn criterion_4_metric_oracles() {
    let cases = [
        (metrics::winkler(0.5, 1.0, 3.0, 0.1).unwrap(), 12.0),
        (metrics::pinball(2.0, 1.0, 0.9).unwrap(), 0.9),
        (metrics::rmse(&[0.0, 3.0], &[0.0, 0.0]).unwrap(), 4.5f64.sqrt()),
        (metrics::mae(&[0.0, 3.0], &[0.0, 0.0]).unwrap(), 1.5),
    ];
    let worst = cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    report(4, worst <= METRIC_TOL, format!("max deviation {worst:.2e}"));
}

// -------------------------------------------------------------- experiments

fn study_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        samples: 100,
        data: DataConfig {
            synth: Some(SynthSpec {
                days: 120,
                seed: 1,
                outlier_rate: 0.02,
                outlier_scale: 1.0,
            }),
            ..Default::default()
        },
        model: ModelConfig {
            hidden: 16,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 30,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.train.divergence.mc_samples = 2;
    cfg
}

fn ab() -> Mode {
    Mode::Ab { alpha: 1.0, beta: 2.0 }
}

const MATRIX: [(CellKind, fn() -> Mode); 5] = [
    (CellKind::Bilstm, ab),
    (CellKind::Bilstm, || Mode::Kl),
    (CellKind::Bilstm, || Mode::Deterministic),
    (CellKind::Lstm, || Mode::Kl),
    (CellKind::Lstm, || Mode::Deterministic),
];

struct Matrix5 {
    rows: Vec<CompareRow>,
    secs: f64,
}

fn matrix() -> &'static Matrix5 {
    static CELL: OnceLock<Matrix5> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let jobs: Vec<Job> = (0..SEEDS)
            .flat_map(|seed| {
                MATRIX.iter().map(move |(cell, mode)| Job {
                    cell: *cell,
                    mode: mode(),
                    horizon: 48,
                    seed,
                })
            })
            .collect();
        let rows = experiment::run_jobs(&study_config(), &jobs).unwrap();
        let secs = started.elapsed().as_secs_f64();
        for r in &rows {
            emit(format!(
                "  seed {} {:26} rmse {:.4} pinball {:?} winkler {:?} coverage {:?}",
                r.seed, r.method, r.scores.rmse, r.scores.pinball_avg, r.scores.winkler, r.coverage
            ));
        }
        Matrix5 { rows, secs }
    })
}

fn median_of(rows: &[CompareRow], cell: CellKind, mode: Mode, horizon: usize, f: impl Fn(&CompareRow) -> f64) -> f64 {
    let mut v: Vec<f64> = rows
        .iter()
        .filter(|r| r.cell == cell && r.mode == mode && r.horizon == horizon)
        .map(f)
        .collect();
    assert!(!v.is_empty());
    experiment::median(&mut v)
}

#[test]
fn criterion_5_directional_comparison() {
    let m = matrix();
    let rows = &m.rows;
    let pin = |mode| median_of(rows, CellKind::Bilstm, mode, 48, |r| r.scores.pinball_avg.unwrap());
    let wink = |mode| median_of(rows, CellKind::Bilstm, mode, 48, |r| r.scores.winkler.unwrap());
    let rmse = |cell, mode| median_of(rows, cell, mode, 48, |r| r.scores.rmse);
    let (pin_ab, pin_kl) = (pin(ab()), pin(Mode::Kl));
    let (wink_ab, wink_kl) = (wink(ab()), wink(Mode::Kl));
    let bilstm = rmse(CellKind::Bilstm, Mode::Deterministic);
    let lstm = rmse(CellKind::Lstm, Mode::Deterministic);
    let bayes = [
        ("Bayesian BiLSTM (AB)", rmse(CellKind::Bilstm, ab()), bilstm),
        ("Bayesian BiLSTM (KL)", rmse(CellKind::Bilstm, Mode::Kl), bilstm),
        ("Bayesian LSTM (KL)", rmse(CellKind::Lstm, Mode::Kl), lstm),
    ];
    let rmse_ok = bayes.iter().all(|(_, b, d)| b < d);
    let pass = pin_ab <= pin_kl && wink_ab <= wink_kl && rmse_ok && m.secs < MATRIX_BUDGET_SECS;
    let rmse_text: Vec<String> = bayes.iter().map(|(n, b, d)| format!("{n} {b:.4} vs {d:.4}")).collect();
    report(
        5,
        pass,
        format!(
            "pinball AB {pin_ab:.4} vs KL {pin_kl:.4}; winkler AB {wink_ab:.4} vs KL {wink_kl:.4}; rmse {}; {:.0}s",
            rmse_text.join(", "),
            m.secs
        ),
    );
}

#[test]
fn criterion_6_horizon_trend() {
    let shared = matrix();
    let jobs: Vec<Job> = (0..SEEDS)
        .flat_map(|seed| {
            [1, 12, 24].into_iter().map(move |horizon| Job {
                cell: CellKind::Bilstm,
                mode: ab(),
                horizon,
                seed,
            })
        })
        .collect();
    let mut rows = experiment::run_jobs(&study_config(), &jobs).unwrap();
    rows.extend(shared.rows.iter().cloned());
    let medians: Vec<f64> = [1, 12, 24, 48]
        .iter()
        .map(|&h| median_of(&rows, CellKind::Bilstm, ab(), h, |r| r.scores.rmse))
        .collect();
    let pass = medians.windows(2).all(|w| w[0] <= w[1] * (1.0 + HORIZON_SLACK));
    let text: Vec<String> = [1, 12, 24, 48]
        .iter()
        .zip(&medians)
        .map(|(h, m)| format!("H={h} {m:.4}"))
        .collect();
    report(6, pass, format!("median rmse {}", text.join(", ")));
}

#[test]
fn criterion_7_calibration() {
    let rows: Vec<&CompareRow> = matrix().rows.iter().filter(|r| r.cell == CellKind::Bilstm && r.mode == ab()).collect();
    let at = |r: &CompareRow, level: f64| r.coverage.iter().find(|(l, _)| (l - level).abs() < 1e-12).unwrap().1;
    let mut c90: Vec<f64> = rows.iter().map(|r| at(r, 0.9)).collect();
    let nested = rows.iter().all(|r| at(r, 0.5) < at(r, 0.9));
    let median90 = experiment::median(&mut c90);
    let pass = (COVERAGE_RANGE.0..=COVERAGE_RANGE.1).contains(&median90) && nested;
    report(
        7,
        pass,
        format!("median 90% coverage {median90:.3}; 50% below 90% in every seed: {nested}"),
    );
}

fn moving_average(v: &[f64], width: usize) -> Vec<f64> {
    v.windows(width).map(|w| w.iter().sum::<f64>() / width as f64).collect()
}

#[test]
fn criterion_8_convergence_shape() {
    let row = matrix()
        .rows
        .iter()
        .find(|r| r.cell == CellKind::Bilstm && r.mode == ab() && r.seed == 0)
        .unwrap();
    let loss = &row.train_loss;
    let smooth = moving_average(loss, SMOOTHING);
    let rises = smooth.windows(2).filter(|w| w[1] > w[0]).count();
    let n = loss.len();
    let upturn = (loss[n - 1] - loss[n - 2]) / loss[n - 2].abs();
    let pass = rises == 0 && upturn <= FINAL_UPTURN;
    report(
        8,
        pass,
        format!("{n} epochs, smoothed increases {rises}, final-epoch change {:+.2}%", 100.0 * upturn),
    );
}

// ---------------------------------------------------------------- determinism

#[test]
fn criterion_9_end_to_end_determinism() {
    let dir = TempDir::new().unwrap();
    let run = |name: &str| {
        let mut cfg = ExperimentConfig {
            seed: 42,
            k: 12,
            horizon: 6,
            samples: 50,
            output_dir: dir.path().join(name),
            data: DataConfig {
                synth: Some(SynthSpec {
                    days: 20,
                    seed: 9,
                    outlier_rate: 0.02,
                    outlier_scale: 1.0,
                }),
                ..Default::default()
            },
            model: ModelConfig {
                hidden: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        cfg.train.epochs = 3;
        let out = cli::cmd_train(&cfg).unwrap();
        let path = cli::cmd_forecast(&out.checkpoint, &ForecastOptions::default()).unwrap();
        std::fs::read(path).unwrap()
    };
    let a = run("a");
    let b = run("b");
    report(9, a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b));
}

use ndarray::Array2;
use proptest::prelude::*;
use solarbnn_core::autodiff::Graph;
use solarbnn_core::dataio::{self, Scaler};
use solarbnn_core::forecast::{self, ForecastDistribution};
use solarbnn_core::metrics;
use solarbnn_core::variational::{self, VariationalGaussian};

fn samples_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..40, 1usize..5).prop_flat_map(|(s, h)| (Just(s), Just(h), prop::collection::vec(-5.0f64..5.0, s * h)))
}

proptest! {
    #[test]
    fn quantiles_increase_with_tau((s, h, data) in samples_strategy(), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let dist = ForecastDistribution::new(Array2::from_shape_vec((s, h), data).unwrap()).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let ql = dist.quantile(lo).unwrap();
        let qh = dist.quantile(hi).unwrap();
        for j in 0..h {
            prop_assert!(ql[j] <= qh[j] + 1e-12);
            let col = dist.samples().column(j);
            let min = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(ql[j] >= min - 1e-12 && qh[j] <= max + 1e-12);
        }
    }

    #[test]
    fn wider_levels_nest((s, h, data) in samples_strategy()) {
        prop_assume!(s >= 2);
        let dist = ForecastDistribution::new(Array2::from_shape_vec((s, h), data).unwrap()).unwrap();
        let bands = dist.intervals(&[0.2, 0.5, 0.9]).unwrap();
        for w in bands.windows(2) {
            for j in 0..h {
                prop_assert!(w[1].lower[j] <= w[0].lower[j] + 1e-12);
                prop_assert!(w[0].upper[j] <= w[1].upper[j] + 1e-12);
            }
        }
    }

    #[test]
    fn clamping_keeps_shape_and_sign((s, h, data) in samples_strategy()) {
        let dist = ForecastDistribution::new(Array2::from_shape_vec((s, h), data).unwrap()).unwrap();
        let c = dist.clamp_nonnegative();
        prop_assert_eq!(c.samples(), dist.samples());
        prop_assert!(c.mean().iter().all(|v| *v >= 0.0));
        for (raw, clamped) in dist.quantile(0.3).unwrap().iter().zip(c.quantile(0.3).unwrap()) {
            prop_assert_eq!(raw.max(0.0), clamped);
        }
        let summary = forecast::summarize(&dist, &[0.5, 0.9]).unwrap();
        prop_assert!(summary.mean.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn pinball_reflects(y in -10.0f64..10.0, q in -10.0f64..10.0, tau in 0.01f64..0.99) {
        let a = metrics::pinball(y, q, tau).unwrap();
        let b = metrics::pinball(-y, -q, 1.0 - tau).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn winkler_is_at_least_width(y in -10.0f64..10.0, lb in -10.0f64..10.0, w in 0.0f64..5.0, gamma in 0.01f64..0.99) {
        let ub = lb + w;
        let score = metrics::winkler(y, lb, ub, gamma).unwrap();
        prop_assert!(score >= w - 1e-12);
        if (lb..=ub).contains(&y) {
            prop_assert!((score - w).abs() < 1e-12);
        }
    }

    #[test]
    fn point_errors_ignore_order(pairs in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..50), rot in 0usize..50) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
        let r = rot % a.len();
        let mut ar = a.clone();
        let mut br = b.clone();
        ar.rotate_left(r);
        br.rotate_left(r);
        let rmse = metrics::rmse(&a, &b).unwrap();
        let mae = metrics::mae(&a, &b).unwrap();
        prop_assert!((rmse - metrics::rmse(&ar, &br).unwrap()).abs() < 1e-12);
        prop_assert!((mae - metrics::mae(&ar, &br).unwrap()).abs() < 1e-12);
        prop_assert!(rmse + 1e-12 >= mae);
    }

    #[test]
    fn coverage_is_a_fraction(ys in prop::collection::vec(-3.0f64..3.0, 1..30)) {
        let lo = vec![-1.0; ys.len()];
        let hi = vec![1.0; ys.len()];
        let c = metrics::coverage(&ys, &lo, &hi).unwrap();
        let inside = ys.iter().filter(|y| (-1.0..=1.0).contains(*y)).count();
        prop_assert!((c - inside as f64 / ys.len() as f64).abs() < 1e-12);
    }

    #[test]
    fn scaler_round_trips(values in prop::collection::vec(0.0f64..5.0, 2..40)) {
        let scaler = match Scaler::fit(&values) {
            Ok(s) => s,
            Err(_) => return Ok(()),
        };
        let scaled = scaler.transform(&values);
        prop_assert!(scaled.iter().all(|v| (-1e-12..=1.0 + 1e-12).contains(v)));
        let back = scaler.inverse(&scaled);
        for (a, b) in values.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn windows_are_slices(len in 3usize..60, k in 1usize..8, h in 1usize..8) {
        prop_assume!(len >= k + h);
        let data: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let ws = dataio::make_windows(&data, k, h).unwrap();
        prop_assert_eq!(ws.len(), len - k - h + 1);
        for i in [0, ws.len() - 1] {
            let input = ws.input_block(&[i]);
            for t in 0..k {
                prop_assert_eq!(input[[t, 0]], data[i + t]);
            }
            for j in 0..h {
                prop_assert_eq!(ws.targets[[i, j]], data[i + k + j]);
            }
        }
    }

    #[test]
    fn window_sets_concat(len in 10usize..40, cut in 4usize..10) {
        let data: Vec<f64> = (0..len).map(|i| (i as f64).sin().abs()).collect();
        let all = dataio::segment_windows(&data, 0, len, 2, 2, 1).unwrap();
        let left = dataio::segment_windows(&data, 0, cut, 2, 2, 1).unwrap();
        let right = dataio::segment_windows(&data, cut - 1, len, 2, 2, 1).unwrap();
        let joined = left.concat(&right).unwrap();
        prop_assert_eq!(joined.targets, all.targets);
        prop_assert_eq!(joined.inputs, all.inputs);
    }

    #[test]
    fn blocks_partition_horizon(h in 1usize..60, s in 1usize..60) {
        prop_assume!(s <= h);
        let ranges = forecast::block_ranges(h, s);
        prop_assert_eq!(ranges.len(), h.div_ceil(s));
        let mut next = 0;
        for r in ranges {
            prop_assert_eq!(r.start, next);
            prop_assert!(r.end > r.start && r.end - r.start <= s);
            next = r.end;
        }
        prop_assert_eq!(next, h);
    }

    #[test]
    fn kl_is_nonnegative(mu in prop::collection::vec(-2.0f64..2.0, 6), rho in prop::collection::vec(-4.0f64..2.0, 6), prior in 0.1f64..3.0) {
        let vg = VariationalGaussian::new(
            Array2::from_shape_vec((2, 3), mu).unwrap(),
            Array2::from_shape_vec((2, 3), rho).unwrap(),
            prior,
        ).unwrap();
        let mut g = Graph::new();
        let bound = vg.bind(&mut g, false).unwrap();
        let kl = variational::kl_gaussian(&mut g, &bound).unwrap();
        prop_assert!(g.scalar_value(kl) >= -1e-12);
    }

    #[test]
    fn ab_coefficient_vanishes(alpha in 0.05f64..20.0, beta in 0.05f64..20.0) {
        prop_assert!(variational::ab_coefficient(alpha, beta).unwrap().abs() < 1e-12);
    }
}

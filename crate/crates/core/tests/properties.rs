use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use shockcast::fit::fit_model;
use shockcast::horseshoe::regularized_variance;
use shockcast::model::{ModelConfig, ShockModel};
use shockcast::panel::{
    read_panel, simulate_panel, write_panel_to, ColumnSchema, Period, SeriesPanel, SyntheticSpec,
};
use shockcast::projection::{project, shock_threshold, ProjectionConfig, ProjectionMode};
use shockcast::sampler::{PosteriorDraws, SamplerConfig};
use shockcast::validation::{MetricRow, PredictionCell, ValidationReport, OVERALL};

fn plain_median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn cell_strategy() -> impl Strategy<Value = PredictionCell> {
    (0usize..3, 40.0f64..80.0, 40.0f64..80.0, 0.0f64..5.0, 0.0f64..5.0).prop_map(
        |(r, observed, median, lo, hi)| PredictionCell {
            country: format!("X{observed:.6}"),
            region: ["Africa", "Asia", "Europe"][r].to_string(),
            period: Period::starting(2015),
            observed,
            lower: median - lo,
            median,
            upper: median + hi,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regularized_variance_is_bounded(g in 1e-3f64..1e3, t in 1e-4f64..10.0, th in 0.1f64..50.0) {
        let v = regularized_variance(g, t, th).unwrap();
        prop_assert!(v > 0.0);
        prop_assert!(v <= g * g * (1.0 + 1e-12));
        prop_assert!(t * t * v <= th * th * (1.0 + 1e-12));
        let v2 = regularized_variance(g * 1.5, t, th).unwrap();
        prop_assert!(v2 >= v);
    }

    #[test]
    fn coverage_shares_sum_to_100(cells in prop::collection::vec(cell_strategy(), 1..40)) {
        let report = ValidationReport::from_cells("m", Period::starting(2015), cells.clone());
        let total: usize = report.rows.iter().filter(|r| r.region != OVERALL).map(|r| r.n).sum();
        prop_assert_eq!(total, cells.len());
        for row in &report.rows {
            prop_assert!((row.pct_below + row.pct_included + row.pct_above - 100.0).abs() < 1e-9);
        }
        let overall = report.overall().unwrap();
        let errors: Vec<f64> = cells.iter().map(|c| c.observed - c.median).collect();
        let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        let widths: Vec<f64> = cells.iter().map(|c| c.upper - c.lower).collect();
        prop_assert!((overall.me - plain_median(&errors)).abs() < 1e-12);
        prop_assert!((overall.mae - plain_median(&abs)).abs() < 1e-12);
        prop_assert!((overall.pi_width - plain_median(&widths)).abs() < 1e-12);
        let inside = cells.iter().filter(|c| c.lower <= c.observed && c.observed <= c.upper).count();
        prop_assert!((overall.pct_included - 100.0 * inside as f64 / cells.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn single_region_overall_matches(cells in prop::collection::vec(cell_strategy(), 1..20)) {
        let cells: Vec<_> = cells.into_iter().map(|mut c| { c.region = "Europe".into(); c }).collect();
        let refs: Vec<&PredictionCell> = cells.iter().collect();
        let region = MetricRow::from_cells("Europe", &refs).unwrap();
        let report = ValidationReport::from_cells("m", Period::starting(2015), cells.clone());
        let overall = report.overall().unwrap();
        prop_assert_eq!(region.n, overall.n);
        prop_assert_eq!(region.me, overall.me);
        prop_assert_eq!(region.pi_width, overall.pi_width);
    }

    #[test]
    fn threshold_is_twice_the_median(v in prop::collection::vec(0.05f64..3.0, 1..200)) {
        let rows: Vec<Vec<f64>> = v.iter().map(|x| vec![*x]).collect();
        let draws = PosteriorDraws::from_values(vec!["tau_eps".into()], 1, rows).unwrap();
        let d = shock_threshold(&draws).unwrap();
        prop_assert!((d - 2.0 * plain_median(&v)).abs() < 1e-12);
    }

    #[test]
    fn period_labels_round_trip(start in 1900i32..2200) {
        let p = Period::starting(start);
        prop_assert_eq!(p.to_string().parse::<Period>().unwrap(), p);
        prop_assert_eq!(p.next().start, start + 5);
    }

    #[test]
    fn panel_csv_round_trip(seed in 0u64..1000, n in 1usize..6, t in 2usize..9) {
        let spec = SyntheticSpec::generate(n, t, 0.8, 0, (5.0, 15.0), seed).unwrap();
        let (panel, _) = simulate_panel(&spec).unwrap();
        let mut buf = Vec::new();
        write_panel_to(&panel, &mut buf).unwrap();
        let back = read_panel(buf.as_slice(), &ColumnSchema::default()).unwrap();
        prop_assert_eq!(back, panel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn log_posterior_finite_and_gradient_consistent(seed in 0u64..10_000) {
        let spec = SyntheticSpec::generate(3, 6, 0.8, 1, (5.0, 15.0), 5).unwrap();
        let (panel, _) = simulate_panel(&spec).unwrap();
        let model = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = model.initial_point(&mut rng, 2.0);
        let (lp, grad) = model.log_posterior(&theta).unwrap();
        prop_assert!(lp.is_finite());
        // directional derivative along a fixed direction
        let dir: Vec<f64> = (0..theta.len()).map(|k| ((k * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let h = 1e-5;
        let shifted = |s: f64| {
            let t: Vec<f64> = theta.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
            model.log_posterior(&t).unwrap().0
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
        prop_assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "fd {} vs analytic {}", fd, an);
        let back = model.unconstrain(&model.constrain(&theta).unwrap()).unwrap();
        for (a, b) in back.iter().zip(&theta) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

fn small_fit() -> shockcast::fit::Fit {
    let spec = SyntheticSpec::generate(4, 8, 0.8, 1, (6.0, 10.0), 17).unwrap();
    let (panel, _) = simulate_panel(&spec).unwrap();
    let sampler = SamplerConfig {
        n_chains: 2,
        n_warmup: 200,
        n_sampling: 200,
        seed: 17,
        ..SamplerConfig::default()
    };
    fit_model(&panel, &ModelConfig::default(), &sampler).unwrap()
}

#[test]
fn fan_quantiles_are_monotone_in_every_mode() {
    let fit = small_fit();
    let cfg = ProjectionConfig {
        horizon: 6,
        allow_unconverged: true,
        ..ProjectionConfig::default()
    };
    let last = *fit.panel.periods().last().unwrap();
    let modes = [
        ProjectionMode::WithShock,
        ProjectionMode::ShockFree,
        ProjectionMode::Crisis {
            country: fit.panel.countries()[0].clone(),
            period: last.next(),
            gamma: 50.0,
        },
    ];
    for mode in &modes {
        let fan = project(&fit, &cfg, mode).unwrap();
        for c in &fan.countries {
            assert_eq!(c.periods.len(), 6);
            for q in &c.quantiles {
                assert!(q.windows(2).all(|w| w[0] <= w[1]), "{mode:?}: {q:?}");
            }
        }
    }
}

#[test]
fn projection_is_deterministic_and_seed_sensitive() {
    let fit = small_fit();
    let cfg = ProjectionConfig {
        horizon: 3,
        allow_unconverged: true,
        ..ProjectionConfig::default()
    };
    let a = project(&fit, &cfg, &ProjectionMode::WithShock).unwrap();
    let b = project(&fit, &cfg, &ProjectionMode::WithShock).unwrap();
    assert_eq!(a, b);
    let c = project(&fit, &ProjectionConfig { seed: 2, ..cfg }, &ProjectionMode::WithShock).unwrap();
    assert_ne!(a, c);
}

#[test]
fn panel_with_leading_gap_reads() {
    let csv = "country_code,country_name,region,period_start,e0\n\
               A,Alpha,Europe,1950,60\nA,Alpha,Europe,1955,62\n\
               A,Alpha,Europe,1960,64\n\
               B,Beta,Asia,1955,50\nB,Beta,Asia,1960,51\n";
    let panel: SeriesPanel = read_panel(csv.as_bytes(), &ColumnSchema::default()).unwrap();
    assert_eq!(panel.n_periods(), 3);
    assert_eq!(panel.value(1, 0), None);
    assert_eq!(panel.observed_span(1), Some((1, 2)));
}

use super::*;
use crate::numeric::{mean, variance};
use statrs::distribution::{ContinuousCDF, Normal};

struct StdNormal(usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }
    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = -xi;
        }
        -0.5 * x.iter().map(|v| v * v).sum::<f64>()
    }
}

struct Correlated {
    rho: f64,
    scale: [f64; 2],
}

impl LogDensity for Correlated {
    fn dim(&self) -> usize {
        2
    }
    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0] / self.scale[0], x[1] / self.scale[1]);
        let k = 1.0 / (1.0 - self.rho * self.rho);
        g[0] = -k * (a - self.rho * b) / self.scale[0];
        g[1] = -k * (b - self.rho * a) / self.scale[1];
        -0.5 * k * (a * a - 2.0 * self.rho * a * b + b * b)
    }
}

/// Finite only for x > 0.
struct Positive;

impl LogDensity for Positive {
    fn dim(&self) -> usize {
        1
    }
    fn log_density_grad(&self, x: &[f64], g: &mut [f64]) -> f64 {
        if x[0] <= 0.0 {
            g[0] = 0.0;
            return f64::NEG_INFINITY;
        }
        g[0] = 1.0 / x[0] - 1.0;
        x[0].ln() - x[0]
    }
}

struct Nowhere;

impl LogDensity for Nowhere {
    fn dim(&self) -> usize {
        1
    }
    fn log_density_grad(&self, _: &[f64], g: &mut [f64]) -> f64 {
        g[0] = f64::NAN;
        f64::NAN
    }
}

fn cfg(seed: u64) -> SamplerConfig {
    SamplerConfig {
        seed,
        ..SamplerConfig::default()
    }
}

#[test]
fn recovers_ten_dimensional_standard_normal() {
    let draws = run_chains(&StdNormal(10), &cfg(11), &[]).unwrap();
    assert_eq!(draws.n_draws(), 4000);
    for s in draws.summaries() {
        let ess = s.ess.unwrap();
        assert!(s.mean.abs() < 3.0 * s.sd / ess.sqrt(), "{s:?}");
        assert!((s.sd * s.sd - 1.0).abs() < 0.1, "{s:?}");
        assert!(s.rhat.unwrap() < 1.02);
    }
    assert_eq!(draws.divergences(), 0);
}

#[test]
fn recovers_correlated_gaussian() {
    let target = Correlated {
        rho: 0.9,
        scale: [1.0, 2.0],
    };
    let draws = run_chains(&target, &cfg(12), &[]).unwrap();
    let x = draws.column(0);
    let y = draws.column(1);
    let (mx, my) = (mean(&x), mean(&y));
    let cov = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() - 1) as f64;
    assert!((variance(&x) / 1.0 - 1.0).abs() < 0.15);
    assert!((variance(&y) / 4.0 - 1.0).abs() < 0.15);
    assert!((cov / 1.8 - 1.0).abs() < 0.15);
}

#[test]
fn same_seed_same_draws() {
    let a = run_chains(&StdNormal(3), &cfg(5), &[]).unwrap();
    let b = run_chains(&StdNormal(3), &cfg(5), &[]).unwrap();
    assert_eq!(a, b);
    let c = run_chains(&StdNormal(3), &cfg(6), &[]).unwrap();
    assert_ne!(a.column(0), c.column(0));
}

#[test]
fn kolmogorov_smirnov_smoke() {
    let draws = run_chains(&StdNormal(1), &cfg(13), &[]).unwrap();
    let mut x = draws.column(0);
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    let phi = Normal::new(0.0, 1.0).unwrap();
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = phi.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    let ess = draws.summaries()[0].ess.unwrap().min(n);
    assert!(d < 1.628 / ess.sqrt(), "D = {d}, ess = {ess}");
}

#[test]
fn adapted_step_size_and_metric_are_positive() {
    let draws = run_chains(&StdNormal(4), &cfg(14), &[]).unwrap();
    assert!(draws.step_sizes().iter().all(|e| e.is_finite() && *e > 0.0));
    assert!(draws.inv_metrics().iter().flatten().all(|m| *m > 0.0));
}

#[test]
fn static_hmc_fallback_samples_normal() {
    let mut c = cfg(15);
    c.algorithm = Algorithm::StaticHmc { n_leapfrog: 8 };
    let draws = run_chains(&StdNormal(2), &c, &[]).unwrap();
    for k in 0..2 {
        let v = draws.column(k);
        assert!(mean(&v).abs() < 0.1);
        assert!((variance(&v) - 1.0).abs() < 0.15);
    }
}

#[test]
fn boundary_support_is_respected() {
    let inits = vec![vec![1.0]; 4];
    let draws = run_chains(&Positive, &cfg(16), &inits).unwrap();
    let x = draws.column(0);
    assert!(x.iter().all(|v| *v > 0.0));
    // Gamma(2, 1) has mean 2
    assert!((mean(&x) - 2.0).abs() < 0.15);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(run_chains(&StdNormal(2), &cfg(1), &vec![vec![0.0, f64::NAN]; 4]).is_err());
    assert!(run_chains(&StdNormal(2), &cfg(1), &vec![vec![0.0]; 4]).is_err());
    assert!(run_chains(&StdNormal(2), &cfg(1), &vec![vec![0.0, 0.0]; 3]).is_err());
    assert!(run_chains(&Nowhere, &cfg(1), &[]).is_err());
    let mut c = cfg(1);
    c.target_accept = 1.0;
    assert!(run_chains(&StdNormal(2), &c, &[]).is_err());
}

#[test]
fn csv_round_trip() {
    let mut c = cfg(17);
    c.n_sampling = 20;
    c.n_warmup = 50;
    let draws = run_chains(&StdNormal(3), &c, &[]).unwrap();
    let mut buf = Vec::new();
    draws.write_csv(&mut buf).unwrap();
    let back = PosteriorDraws::read_csv(buf.as_slice(), 50).unwrap();
    assert_eq!(back.names(), draws.names());
    assert_eq!(back.n_chains(), 4);
    assert_eq!(back.n_iter(), 20);
    for d in 0..back.n_draws() {
        assert_eq!(back.draw(d), draws.draw(d));
        assert_eq!(back.stats()[d], draws.stats()[d]);
    }
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("chain,iteration,lp__,accept_stat__"));
}

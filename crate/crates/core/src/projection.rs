//! Forward simulation of posterior trajectories, shock detection and
//! shock-corrected estimates.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::Fit;
use crate::numeric::{median, quantile_sorted, sort_values};
use crate::panel::Period;
use crate::sampler::PosteriorDraws;

/// Exceedance probability above which a cell is reported as a shock.
pub const DEFAULT_DETECTION_PROBABILITY: f64 = 0.975;

const SHOCK_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// `2 * median(tau_eps)` over all draws.
pub fn shock_threshold(draws: &PosteriorDraws) -> Result<f64> {
    let tau = draws.column_by_name("tau_eps")?;
    if tau.is_empty() {
        return Err(Error::MissingParameter("tau_eps".into()));
    }
    Ok(2.0 * median(&tau))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockCell {
    pub country: String,
    pub period: Period,
    pub observed: f64,
    pub delta_median: f64,
    pub delta_lower: f64,
    pub delta_upper: f64,
    pub exceedance: f64,
    pub flagged: bool,
    /// Observed level with the median shock added back.
    pub corrected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockReport {
    pub delta_star: f64,
    pub probability_threshold: f64,
    pub cells: Vec<ShockCell>,
}

impl ShockReport {
    pub fn flagged(&self) -> impl Iterator<Item = &ShockCell> {
        self.cells.iter().filter(|c| c.flagged)
    }

    pub fn cell(&self, country: &str, period: Period) -> Option<&ShockCell> {
        self.cells
            .iter()
            .find(|c| c.country == country && c.period == period)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Simulation(e.to_string());
        w.write_record([
            "country",
            "period",
            "observed",
            "delta_median",
            "delta_lower",
            "delta_upper",
            "exceedance",
            "flagged",
            "corrected",
        ])
        .map_err(fail)?;
        for c in &self.cells {
            w.write_record([
                c.country.clone(),
                c.period.to_string(),
                c.observed.to_string(),
                c.delta_median.to_string(),
                c.delta_lower.to_string(),
                c.delta_upper.to_string(),
                c.exceedance.to_string(),
                u8::from(c.flagged).to_string(),
                c.corrected.to_string(),
            ])
            .map_err(fail)?;
        }
        w.flush().map_err(|e| Error::Simulation(e.to_string()))
    }
}

/// Posterior summaries of every shock cell; a cell is flagged when the share
/// of draws with `delta > delta_star` exceeds `probability`.
pub fn detect_shocks(fit: &Fit, delta_star: f64, probability: f64) -> Result<ShockReport> {
    if !fit.shocks_enabled() {
        return Err(Error::ShocksDisabled);
    }
    if !(0.0..=1.0).contains(&probability) || !(delta_star >= 0.0) {
        return Err(Error::InvalidConfig(
            "detection needs delta_star >= 0 and a probability in [0, 1]".into(),
        ));
    }
    let n = fit.n_draws();
    let cells = fit
        .layout
        .cells
        .iter()
        .enumerate()
        .map(|(k, cell)| {
            let mut d: Vec<f64> = (0..n).map(|i| fit.delta(i, k).unwrap()).collect();
            sort_values(&mut d);
            let exceedance = d.iter().filter(|&&x| x > delta_star).count() as f64 / n as f64;
            let observed = fit.panel.value(cell.country, cell.period).unwrap_or(f64::NAN);
            let med = quantile_sorted(&d, 0.5);
            ShockCell {
                country: fit.panel.countries()[cell.country].clone(),
                period: fit.panel.periods()[cell.period],
                observed,
                delta_median: med,
                delta_lower: quantile_sorted(&d, 0.025),
                delta_upper: quantile_sorted(&d, 0.975),
                exceedance,
                flagged: exceedance > probability,
                corrected: observed + med,
            }
        })
        .collect();
    Ok(ShockReport {
        delta_star,
        probability_threshold: probability,
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ProjectionMode {
    WithShock,
    ShockFree,
    /// Experimental: with-shock simulation where one future country-period
    /// uses a fixed local scale instead of a prior draw.
    Crisis {
        country: String,
        period: Period,
        gamma: f64,
    },
}

impl ProjectionMode {
    pub fn label(&self) -> &'static str {
        match self {
            ProjectionMode::WithShock => "with-shock",
            ProjectionMode::ShockFree => "shock-free",
            ProjectionMode::Crisis { .. } => "crisis",
        }
    }

    fn draws_shocks(&self) -> bool {
        !matches!(self, ProjectionMode::ShockFree)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectionConfig {
    pub horizon: usize,
    pub probabilities: Vec<f64>,
    pub seed: u64,
    pub allow_unconverged: bool,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            horizon: 16,
            probabilities: vec![0.1, 0.5, 0.9],
            seed: 1,
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountryFan {
    pub country: String,
    pub last_observed: Period,
    pub last_value: f64,
    pub periods: Vec<Period>,
    /// `quantiles[h][j]` is probability `j` at horizon step `h`.
    pub quantiles: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFan {
    pub mode: String,
    pub probabilities: Vec<f64>,
    pub n_draws: usize,
    pub countries: Vec<CountryFan>,
}

/// Simulated levels: `values[country][step][draw]`.
#[derive(Debug, Clone)]
pub struct Trajectories {
    pub values: Vec<Vec<Vec<f64>>>,
}

fn quantile_label(p: f64) -> String {
    let pct = p * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{}", pct.round() as i64)
    } else {
        format!("q{pct}")
    }
}

impl ProjectionFan {
    pub fn country(&self, code: &str) -> Option<&CountryFan> {
        self.countries.iter().find(|c| c.country == code)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fail = |e: csv::Error| Error::Simulation(e.to_string());
        let mut header = vec![
            "country".to_string(),
            "period".into(),
            "mode".into(),
            "n_draws".into(),
        ];
        header.extend(self.probabilities.iter().map(|&p| quantile_label(p)));
        w.write_record(&header).map_err(fail)?;
        for c in &self.countries {
            for (period, q) in c.periods.iter().zip(&c.quantiles) {
                let mut row = vec![
                    c.country.clone(),
                    period.to_string(),
                    self.mode.clone(),
                    self.n_draws.to_string(),
                ];
                row.extend(q.iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(fail)?;
            }
        }
        w.flush().map_err(|e| Error::Simulation(e.to_string()))
    }
}

/// Iterates every posterior draw forward `horizon` periods from each
/// country's last observation.
pub fn simulate_trajectories(
    fit: &Fit,
    config: &ProjectionConfig,
    mode: &ProjectionMode,
) -> Result<Trajectories> {
    if config.horizon == 0 {
        return Err(Error::InvalidConfig("horizon must be at least one period".into()));
    }
    if !config.allow_unconverged {
        fit.require_converged()?;
    }
    if mode.draws_shocks() && !fit.shocks_enabled() {
        return Err(Error::ShocksDisabled);
    }
    let crisis = match mode {
        ProjectionMode::Crisis {
            country,
            period,
            gamma,
        } => {
            let c = fit
                .panel
                .country_index(country)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown country {country}")))?;
            let (_, last) = fit.panel.observed_span(c).expect("validated panel");
            let last_period = fit.panel.periods()[last];
            let step = (period.start - last_period.start) / crate::panel::PERIOD_WIDTH;
            if step < 1 || step as usize > config.horizon || !(*gamma > 0.0) {
                return Err(Error::InvalidConfig(
                    "crisis period must fall inside the horizon with gamma > 0".into(),
                ));
            }
            Some((c, step as usize - 1, *gamma))
        }
        _ => None,
    };
    let basis = fit.basis()?;
    let n_countries = fit.panel.n_countries();
    let starts: Vec<f64> = (0..n_countries)
        .map(|c| {
            let (_, last) = fit.panel.observed_span(c).expect("validated panel");
            fit.panel.value(c, last).unwrap()
        })
        .collect();
    let with_shocks = mode.draws_shocks();
    let horizon = config.horizon;

    let per_draw: Vec<Vec<f64>> = (0..fit.n_draws())
        .into_par_iter()
        .map(|d| -> Result<Vec<f64>> {
            let mut eps_rng = ChaCha8Rng::seed_from_u64(config.seed);
            eps_rng.set_stream(d as u64);
            let mut shock_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHOCK_STREAM_SALT);
            shock_rng.set_stream(d as u64);
            let cauchy = Cauchy::new(0.0, 1.0).expect("unit cauchy");
            let tau_eps = fit.tau_eps(d);
            let globals = fit.shock_globals(d);
            let mut out = Vec::with_capacity(n_countries * horizon);
            for (c, &start) in starts.iter().enumerate() {
                let coeffs = fit.coefficients(d, c)?;
                let mut level = start;
                for h in 0..horizon {
                    let z: f64 = eps_rng.sample(StandardNormal);
                    let mut delta = 0.0;
                    if with_shocks {
                        let (tau, theta) = globals.expect("shock fit");
                        let draw_gamma: f64 = cauchy.sample(&mut shock_rng);
                        let gamma = match crisis {
                            Some((cc, hh, g)) if cc == c && hh == h => g,
                            _ => draw_gamma.abs(),
                        };
                        let var = crate::horseshoe::regularized_variance(gamma, tau, theta)?;
                        let u: f64 = shock_rng.sample(StandardNormal);
                        delta = tau * var.sqrt() * u.abs();
                    }
                    level += basis.transition(&coeffs, level) - delta + tau_eps * z;
                    out.push(level);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let values = (0..n_countries)
        .map(|c| {
            (0..horizon)
                .map(|h| per_draw.iter().map(|row| row[c * horizon + h]).collect())
                .collect()
        })
        .collect();
    Ok(Trajectories { values })
}

pub fn project(fit: &Fit, config: &ProjectionConfig, mode: &ProjectionMode) -> Result<ProjectionFan> {
    let probs = &config.probabilities;
    if probs.is_empty()
        || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        || probs.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::InvalidConfig(
            "quantile probabilities must be increasing within [0, 1]".into(),
        ));
    }
    let traj = simulate_trajectories(fit, config, mode)?;
    let countries = traj
        .values
        .into_iter()
        .enumerate()
        .map(|(c, steps)| {
            let (_, last) = fit.panel.observed_span(c).expect("validated panel");
            let last_observed = fit.panel.periods()[last];
            let quantiles = steps
                .into_iter()
                .map(|mut v| {
                    sort_values(&mut v);
                    probs.iter().map(|&p| quantile_sorted(&v, p)).collect()
                })
                .collect();
            CountryFan {
                country: fit.panel.countries()[c].clone(),
                last_observed,
                last_value: fit.panel.value(c, last).unwrap(),
                periods: (1..=config.horizon as i32)
                    .map(|k| last_observed.offset(k))
                    .collect(),
                quantiles,
            }
        })
        .collect();
    Ok(ProjectionFan {
        mode: mode.label().to_string(),
        probabilities: probs.clone(),
        n_draws: fit.n_draws(),
        countries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanDifference {
    pub country: String,
    pub period: Period,
    /// Median of `a` minus median of `b`.
    pub median_difference: f64,
    /// Outer interval width of `a` over that of `b`.
    pub width_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanComparison {
    pub cells: Vec<FanDifference>,
    /// Share of countries whose `a` interval is narrower at the final step.
    pub share_a_narrower_final: f64,
}

fn outer_width(q: &[f64]) -> f64 {
    q[q.len() - 1] - q[0]
}

fn median_of(fan: &ProjectionFan, q: &[f64]) -> f64 {
    match fan.probabilities.iter().position(|&p| p == 0.5) {
        Some(j) => q[j],
        None => q[q.len() / 2],
    }
}

pub fn compare_fans(a: &ProjectionFan, b: &ProjectionFan) -> Result<FanComparison> {
    let same_shape = a.countries.len() == b.countries.len()
        && a.probabilities == b.probabilities
        && a.countries
            .iter()
            .zip(&b.countries)
            .all(|(x, y)| x.country == y.country && x.periods == y.periods);
    if !same_shape {
        return Err(Error::ShapeMismatch(
            "fans differ in countries, horizons or quantiles".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut narrower = 0usize;
    for (x, y) in a.countries.iter().zip(&b.countries) {
        for ((period, qa), qb) in x.periods.iter().zip(&x.quantiles).zip(&y.quantiles) {
            let (wa, wb) = (outer_width(qa), outer_width(qb));
            cells.push(FanDifference {
                country: x.country.clone(),
                period: *period,
                median_difference: median_of(a, qa) - median_of(b, qb),
                width_ratio: if wa == wb { 1.0 } else { wa / wb },
            });
        }
        if let (Some(qa), Some(qb)) = (x.quantiles.last(), y.quantiles.last()) {
            if outer_width(qa) < outer_width(qb) {
                narrower += 1;
            }
        }
    }
    let n = a.countries.len().max(1) as f64;
    Ok(FanComparison {
        cells,
        share_a_narrower_final: narrower as f64 / n,
    })
}

//! Unnormalized log posterior of the transition model with optional shock terms.
//!
//! Observed levels follow
//! `eta[t] = eta[t-1] + f(eta[t-1]; beta_c) - delta[t] + eps[t]` with
//! `eps ~ N(0, tau_eps^2)`, conditioning on each country's first observation.
//!
//! Sampling happens on an unconstrained vector:
//!
//! | block            | unconstrained            | constrained                        |
//! |------------------|--------------------------|------------------------------------|
//! | spline           | `z[c,i]`                 | `beta_star = beta_bar + sigma * z` |
//! | hierarchy mean   | `beta_bar[i]`            | identity                           |
//! | hierarchy scale  | `log sigma[i]`           | `sigma`                            |
//! | smoothing        | `log tau_eps^2`          | `tau_eps^2`                        |
//! | local scales     | `log gamma[s]`           | `gamma`                            |
//! | shock            | `log z_delta[s]`         | `delta = tau * gamma_reg * z_delta`|
//! | global scale     | `log tau`                | `tau`                              |
//! | slab             | `log theta^2`            | `theta^2`                          |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horseshoe::{inv_gamma_lpdf, shock_log_prior, HorseshoeConfig, ShockBlock};
use crate::numeric::{half_cauchy_lpdf, LN_2PI};
use crate::panel::SeriesPanel;
use crate::sampler::LogDensity;
use crate::spline::{Coefficients, SplineBasis, SplineConfig};

/// Returned in place of a non-finite log density; the sampler treats it as a
/// rejected, divergent proposal.
pub const REJECTED_LOG_DENSITY: f64 = -1e300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HierarchyPrior {
    /// Standard deviation of the normal prior on each hierarchy mean.
    pub mean_sd: f64,
    /// Standard deviation of the half-normal prior on each hierarchy scale.
    pub scale_sd: f64,
}

impl Default for HierarchyPrior {
    fn default() -> Self {
        HierarchyPrior {
            mean_sd: 15.0,
            scale_sd: 5.0,
        }
    }
}

/// Inverse-gamma prior on `tau_eps^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingPrior {
    pub shape: f64,
    pub rate: f64,
}

impl Default for SmoothingPrior {
    fn default() -> Self {
        SmoothingPrior {
            shape: 0.1,
            rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub spline: SplineConfig,
    pub horseshoe: HorseshoeConfig,
    pub hierarchy: HierarchyPrior,
    pub smoothing: SmoothingPrior,
}

impl ModelConfig {
    pub fn without_shocks() -> Self {
        let mut cfg = ModelConfig::default();
        cfg.horseshoe.shocks_enabled = false;
        cfg
    }

    pub fn shocks_enabled(&self) -> bool {
        self.horseshoe.shocks_enabled
    }

    pub fn validate(&self) -> Result<()> {
        self.spline.validate()?;
        self.horseshoe.validate()?;
        let h = &self.hierarchy;
        let s = &self.smoothing;
        if !(h.mean_sd > 0.0 && h.scale_sd > 0.0 && s.shape > 0.0 && s.rate > 0.0) {
            return Err(Error::InvalidConfig("prior scales must be positive".into()));
        }
        Ok(())
    }
}

/// One transition `period - 1 -> period` of one country.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCell {
    pub country: usize,
    pub period: usize,
}

/// How a block of the unconstrained vector maps to constrained values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    Exp,
    /// `beta_star = beta_bar + sigma * z`
    NonCenteredNormal,
    /// `delta = tau * gamma_reg * exp(u)`
    NonCenteredShock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

/// Positions of every parameter in the flat unconstrained vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub n_countries: usize,
    pub n_free: usize,
    pub countries: Vec<String>,
    pub period_labels: Vec<String>,
    pub cells: Vec<TransitionCell>,
    pub shocks: bool,
    pub blocks: Vec<LayoutBlock>,
}

impl Layout {
    fn new(panel: &SeriesPanel, n_free: usize, shocks: bool) -> Self {
        let mut cells = Vec::new();
        for c in 0..panel.n_countries() {
            let (first, last) = panel.observed_span(c).expect("validated panel");
            cells.extend((first + 1..=last).map(|period| TransitionCell { country: c, period }));
        }
        let c = panel.n_countries();
        let s = cells.len();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, len: usize, transform: Transform| {
            blocks.push(LayoutBlock {
                name: name.into(),
                offset,
                len,
                transform,
            });
            offset += len;
        };
        push("beta_star", c * n_free, Transform::NonCenteredNormal);
        push("beta_bar", n_free, Transform::Identity);
        push("sigma", n_free, Transform::Exp);
        push("tau_eps_sq", 1, Transform::Exp);
        if shocks {
            push("tau", 1, Transform::Exp);
            push("theta_sq", 1, Transform::Exp);
            push("gamma", s, Transform::Exp);
            push("delta", s, Transform::NonCenteredShock);
        }
        Layout {
            n_countries: c,
            n_free,
            countries: panel.countries().to_vec(),
            period_labels: panel.periods().iter().map(|p| p.to_string()).collect(),
            cells,
            shocks,
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    fn block(&self, name: &str) -> &LayoutBlock {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .expect("known block")
    }

    pub fn beta(&self, country: usize, i: usize) -> usize {
        country * self.n_free + i
    }

    pub fn beta_bar(&self, i: usize) -> usize {
        self.n_countries * self.n_free + i
    }

    pub fn log_sigma(&self, i: usize) -> usize {
        (self.n_countries + 1) * self.n_free + i
    }

    pub fn log_tau_eps_sq(&self) -> usize {
        (self.n_countries + 2) * self.n_free
    }

    pub fn log_tau(&self) -> Option<usize> {
        self.shocks.then(|| self.log_tau_eps_sq() + 1)
    }

    pub fn log_theta_sq(&self) -> Option<usize> {
        self.shocks.then(|| self.log_tau_eps_sq() + 2)
    }

    pub fn log_gamma(&self, cell: usize) -> Option<usize> {
        self.shocks.then(|| self.block("gamma").offset + cell)
    }

    pub fn log_z_delta(&self, cell: usize) -> Option<usize> {
        self.shocks.then(|| self.block("delta").offset + cell)
    }

    fn cell_label(&self, cell: &TransitionCell) -> String {
        format!(
            "{},{}",
            self.countries[cell.country], self.period_labels[cell.period]
        )
    }

    /// Names of the constrained quantities, in [`ShockModel::constrained_values`] order.
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.dim());
        for code in &self.countries {
            names.extend((1..=self.n_free).map(|i| format!("beta_star[{code},{i}]")));
        }
        names.extend((1..=self.n_free).map(|i| format!("beta_bar[{i}]")));
        names.extend((1..=self.n_free).map(|i| format!("sigma[{i}]")));
        names.push("tau_eps".into());
        if self.shocks {
            names.push("tau".into());
            names.push("theta".into());
            names.extend(self.cells.iter().map(|c| format!("gamma[{}]", self.cell_label(c))));
            names.extend(self.cells.iter().map(|c| format!("delta[{}]", self.cell_label(c))));
        }
        names
    }
}

/// Constrained view of a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBlock {
    /// `beta_star[c][i]`
    pub beta_star: Vec<Vec<f64>>,
    pub beta_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tau_eps: f64,
    pub shocks: Option<ShockBlock>,
}

/// Positive parameter through the exponential map: value and log-Jacobian.
pub fn positive_transform(u: f64) -> (f64, f64) {
    (u.exp(), u)
}

/// `tau * gamma_reg` and `d log(tau * gamma_reg) / d log gamma` (equal to the
/// derivative with respect to `log tau`).
#[inline]
fn shock_scale(gamma: f64, tau: f64, theta: f64) -> (f64, f64) {
    let r = tau * gamma / theta;
    let a = 1.0 / (1.0 + r * r);
    let scale = tau * theta / (theta * theta / (gamma * gamma) + tau * tau).sqrt();
    (scale, a)
}

#[derive(Debug, Clone)]
struct CountrySeries {
    levels: Vec<f64>,
    first_period: usize,
    first_cell: usize,
}

/// The assembled model for one panel and configuration.
#[derive(Debug, Clone)]
pub struct ShockModel {
    config: ModelConfig,
    basis: SplineBasis,
    layout: Layout,
    series: Vec<CountrySeries>,
}

impl ShockModel {
    pub fn new(panel: &SeriesPanel, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let max_obs = panel
            .max_observed()
            .ok_or_else(|| Error::InvalidPanel("panel has no observations".into()))?;
        let basis = SplineBasis::new(&config.spline, max_obs)?;
        let layout = Layout::new(panel, config.spline.n_free(), config.shocks_enabled());
        let mut series = Vec::with_capacity(panel.n_countries());
        let mut first_cell = 0;
        for c in 0..panel.n_countries() {
            let (first, last) = panel.observed_span(c).expect("validated panel");
            let levels: Vec<f64> = (first..=last).map(|t| panel.value(c, t).unwrap()).collect();
            series.push(CountrySeries {
                levels,
                first_period: first,
                first_cell,
            });
            first_cell += last - first;
        }
        let mut config = config;
        config.spline = basis.config().clone();
        Ok(ShockModel {
            config,
            basis,
            layout,
            series,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn check_dim(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: theta.len(),
            });
        }
        Ok(())
    }

    /// Log posterior and gradient with respect to the unconstrained vector.
    pub fn log_posterior(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(theta)?;
        let mut grad = vec![0.0; theta.len()];
        let lp = self.evaluate(theta, &mut grad);
        Ok((lp, grad))
    }

    /// Log-likelihood of the observed transitions only, without gradient.
    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        self.check_dim(theta)?;
        let block = self.constrain(theta)?;
        self.log_likelihood_constrained(&block)
    }

    fn log_likelihood_constrained(&self, block: &ParameterBlock) -> Result<f64> {
        let var = block.tau_eps * block.tau_eps;
        let mut ll = 0.0;
        for (c, s) in self.series.iter().enumerate() {
            let coeffs = Coefficients::from_unconstrained(&self.config.spline, &block.beta_star[c])?;
            for k in 1..s.levels.len() {
                let delta = block
                    .shocks
                    .as_ref()
                    .map_or(0.0, |b| b.delta[s.first_cell + k - 1]);
                let prev = s.levels[k - 1];
                let r = s.levels[k] - prev - self.basis.transition(&coeffs, prev) + delta;
                ll += -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var;
            }
        }
        Ok(ll)
    }

    /// Log density of the constrained parameters under the centered
    /// parameterization (no Jacobian terms).
    pub fn log_density_constrained(&self, block: &ParameterBlock) -> Result<f64> {
        let cfg = &self.config;
        let mut lp = self.log_likelihood_constrained(block)?;
        let j = self.layout.n_free;
        let normal = |x: f64, m: f64, sd: f64| -0.5 * LN_2PI - sd.ln() - 0.5 * ((x - m) / sd).powi(2);
        for i in 0..j {
            lp += normal(block.beta_bar[i], 0.0, cfg.hierarchy.mean_sd);
            lp += std::f64::consts::LN_2 + normal(block.sigma[i], 0.0, cfg.hierarchy.scale_sd);
            for row in &block.beta_star {
                lp += normal(row[i], block.beta_bar[i], block.sigma[i]);
            }
        }
        lp += inv_gamma_lpdf(
            block.tau_eps * block.tau_eps,
            cfg.smoothing.shape,
            cfg.smoothing.rate,
        );
        if let Some(shocks) = &block.shocks {
            lp += shock_log_prior(shocks, &cfg.horseshoe)?.log_density;
        }
        Ok(lp)
    }

    /// Log absolute Jacobian determinant of the unconstrained-to-constrained
    /// map, and its gradient.
    pub fn transform_jacobians(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_dim(theta)?;
        let terms = self.jacobian_terms(theta);
        let total = terms.iter().sum();
        let l = &self.layout;
        let mut grad = vec![0.0; theta.len()];
        for i in 0..l.n_free {
            grad[l.log_sigma(i)] = 1.0 + l.n_countries as f64;
        }
        grad[l.log_tau_eps_sq()] = 1.0;
        if l.shocks {
            let (lt, lth) = (l.log_tau().unwrap(), l.log_theta_sq().unwrap());
            let tau = theta[lt].exp();
            let theta_sd = (0.5 * theta[lth]).exp();
            grad[lt] = 1.0;
            grad[lth] = 1.0;
            for s in 0..l.n_cells() {
                let lg = l.log_gamma(s).unwrap();
                let (_, a) = shock_scale(theta[lg].exp(), tau, theta_sd);
                // log|J| contains log(delta) = log scale + u_z
                grad[lg] = 1.0 + a;
                grad[lt] += a;
                grad[lth] += 0.5 * (1.0 - a);
                grad[l.log_z_delta(s).unwrap()] = 1.0;
            }
        }
        Ok((total, grad))
    }

    /// Per-parameter log-Jacobian contributions in layout order; the
    /// non-centered spline block contributes `log sigma[i]` per country.
    pub fn jacobian_terms(&self, theta: &[f64]) -> Vec<f64> {
        let l = &self.layout;
        let mut terms = Vec::with_capacity(theta.len());
        for _c in 0..l.n_countries {
            terms.extend((0..l.n_free).map(|i| theta[l.log_sigma(i)]));
        }
        terms.extend(std::iter::repeat_n(0.0, l.n_free));
        terms.extend((0..l.n_free).map(|i| positive_transform(theta[l.log_sigma(i)]).1));
        terms.push(positive_transform(theta[l.log_tau_eps_sq()]).1);
        if l.shocks {
            let lt = l.log_tau().unwrap();
            let lth = l.log_theta_sq().unwrap();
            terms.push(theta[lt]);
            terms.push(theta[lth]);
            let tau = theta[lt].exp();
            let theta_sd = (0.5 * theta[lth]).exp();
            for s in 0..l.n_cells() {
                terms.push(theta[l.log_gamma(s).unwrap()]);
            }
            for s in 0..l.n_cells() {
                let (scale, _) = shock_scale(theta[l.log_gamma(s).unwrap()].exp(), tau, theta_sd);
                terms.push(scale.ln() + theta[l.log_z_delta(s).unwrap()]);
            }
        }
        terms
    }

    pub fn constrain(&self, theta: &[f64]) -> Result<ParameterBlock> {
        self.check_dim(theta)?;
        let l = &self.layout;
        let j = l.n_free;
        let beta_bar: Vec<f64> = (0..j).map(|i| theta[l.beta_bar(i)]).collect();
        let sigma: Vec<f64> = (0..j).map(|i| theta[l.log_sigma(i)].exp()).collect();
        let beta_star = (0..l.n_countries)
            .map(|c| {
                (0..j)
                    .map(|i| beta_bar[i] + sigma[i] * theta[l.beta(c, i)])
                    .collect()
            })
            .collect();
        let tau_eps = (0.5 * theta[l.log_tau_eps_sq()]).exp();
        let shocks = l.shocks.then(|| {
            let tau = theta[l.log_tau().unwrap()].exp();
            let theta_sd = (0.5 * theta[l.log_theta_sq().unwrap()]).exp();
            let gamma: Vec<f64> = (0..l.n_cells())
                .map(|s| theta[l.log_gamma(s).unwrap()].exp())
                .collect();
            let delta = (0..l.n_cells())
                .map(|s| {
                    shock_scale(gamma[s], tau, theta_sd).0 * theta[l.log_z_delta(s).unwrap()].exp()
                })
                .collect();
            ShockBlock {
                delta,
                gamma,
                tau,
                theta: theta_sd,
            }
        });
        Ok(ParameterBlock {
            beta_star,
            beta_bar,
            sigma,
            tau_eps,
            shocks,
        })
    }

    pub fn unconstrain(&self, block: &ParameterBlock) -> Result<Vec<f64>> {
        let l = &self.layout;
        if block.beta_star.len() != l.n_countries || block.shocks.is_some() != l.shocks {
            return Err(Error::ShapeMismatch(
                "parameter block does not match the model layout".into(),
            ));
        }
        let mut theta = vec![0.0; self.dim()];
        for i in 0..l.n_free {
            theta[l.beta_bar(i)] = block.beta_bar[i];
            theta[l.log_sigma(i)] = block.sigma[i].ln();
            for c in 0..l.n_countries {
                theta[l.beta(c, i)] = (block.beta_star[c][i] - block.beta_bar[i]) / block.sigma[i];
            }
        }
        theta[l.log_tau_eps_sq()] = 2.0 * block.tau_eps.ln();
        if let Some(s) = &block.shocks {
            theta[l.log_tau().unwrap()] = s.tau.ln();
            theta[l.log_theta_sq().unwrap()] = 2.0 * s.theta.ln();
            for k in 0..l.n_cells() {
                theta[l.log_gamma(k).unwrap()] = s.gamma[k].ln();
                let (scale, _) = shock_scale(s.gamma[k], s.tau, s.theta);
                theta[l.log_z_delta(k).unwrap()] = (s.delta[k] / scale).ln();
            }
        }
        Ok(theta)
    }

    /// Constrained values in [`Layout::constrained_names`] order.
    pub fn constrained_values(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let b = self.constrain(theta)?;
        let mut out = Vec::with_capacity(self.dim());
        for row in &b.beta_star {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&b.beta_bar);
        out.extend_from_slice(&b.sigma);
        out.push(b.tau_eps);
        if let Some(s) = &b.shocks {
            out.push(s.tau);
            out.push(s.theta);
            out.extend_from_slice(&s.gamma);
            out.extend_from_slice(&s.delta);
        }
        Ok(out)
    }

    /// Core evaluation; returns [`REJECTED_LOG_DENSITY`] with a zero gradient
    /// when any intermediate is non-finite.
    fn evaluate(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.fill(0.0);
        let cfg = &self.config;
        let l = &self.layout;
        let j = l.n_free;
        let mut lp = 0.0;

        let mean_var = cfg.hierarchy.mean_sd * cfg.hierarchy.mean_sd;
        let scale_var = cfg.hierarchy.scale_sd * cfg.hierarchy.scale_sd;
        let mut sigma = vec![0.0; j];
        let mut beta_bar = vec![0.0; j];
        for i in 0..j {
            let b = theta[l.beta_bar(i)];
            beta_bar[i] = b;
            lp += -0.5 * LN_2PI - cfg.hierarchy.mean_sd.ln() - 0.5 * b * b / mean_var;
            grad[l.beta_bar(i)] += -b / mean_var;
            let u = theta[l.log_sigma(i)];
            let s = u.exp();
            sigma[i] = s;
            lp += std::f64::consts::LN_2 - 0.5 * LN_2PI - cfg.hierarchy.scale_sd.ln()
                - 0.5 * s * s / scale_var
                + u;
            grad[l.log_sigma(i)] += -s * s / scale_var + 1.0;
        }

        let ue = theta[l.log_tau_eps_sq()];
        let var = ue.exp();
        let (shape, rate) = (cfg.smoothing.shape, cfg.smoothing.rate);
        lp += inv_gamma_lpdf(var, shape, rate) + ue;
        grad[l.log_tau_eps_sq()] += -(shape + 1.0) + rate / var + 1.0;

        let mut globals = None;
        if l.shocks {
            let (lt, lth) = (l.log_tau().unwrap(), l.log_theta_sq().unwrap());
            let tau = theta[lt].exp();
            let theta2 = theta[lth].exp();
            let tau0 = cfg.horseshoe.tau0;
            lp += half_cauchy_lpdf(tau, tau0) + theta[lt];
            grad[lt] += -2.0 * tau * tau / (tau0 * tau0 + tau * tau) + 1.0;
            let (a, b) = cfg.horseshoe.slab_inv_gamma();
            lp += inv_gamma_lpdf(theta2, a, b) + theta[lth];
            grad[lth] += -(a + 1.0) + b / theta2 + 1.0;
            globals = Some((tau, theta2.sqrt(), lt, lth));
        }

        let mut beta_star = vec![0.0; j];
        let mut g_beta = vec![0.0; j];
        for (c, series) in self.series.iter().enumerate() {
            for i in 0..j {
                let z = theta[l.beta(c, i)];
                lp += -0.5 * LN_2PI - 0.5 * z * z;
                grad[l.beta(c, i)] += -z;
                beta_star[i] = beta_bar[i] + sigma[i] * z;
            }
            let coeffs = match Coefficients::from_unconstrained(&cfg.spline, &beta_star) {
                Ok(c) => c,
                Err(_) => return reject(grad),
            };
            g_beta.fill(0.0);
            for k in 1..series.levels.len() {
                let prev = series.levels[k - 1];
                let tg = self.basis.transition_grad(&coeffs, prev);
                let mut delta = 0.0;
                let mut shock = None;
                if let Some((tau, theta_sd, _, _)) = globals {
                    let cell = series.first_cell + k - 1;
                    let (ug, uz) = (l.log_gamma(cell).unwrap(), l.log_z_delta(cell).unwrap());
                    let gamma = theta[ug].exp();
                    let z = theta[uz].exp();
                    let (scale, a) = shock_scale(gamma, tau, theta_sd);
                    delta = scale * z;
                    lp += std::f64::consts::LN_2 - 0.5 * LN_2PI - 0.5 * z * z + theta[uz];
                    grad[uz] += -z * z + 1.0;
                    lp += half_cauchy_lpdf(gamma, 1.0) + theta[ug];
                    grad[ug] += -2.0 * gamma * gamma / (1.0 + gamma * gamma) + 1.0;
                    shock = Some((ug, uz, a));
                }
                let r = series.levels[k] - prev - tg.value + delta;
                lp += -0.5 * (LN_2PI + ue) - 0.5 * r * r / var;
                grad[l.log_tau_eps_sq()] += -0.5 + 0.5 * r * r / var;
                let d_f = r / var;
                for (g, d) in g_beta.iter_mut().zip(&tg.d_beta_star) {
                    *g += d_f * d;
                }
                if let (Some((ug, uz, a)), Some((_, _, lt, lth))) = (shock, globals) {
                    let d_delta = -r / var * delta;
                    grad[uz] += d_delta;
                    grad[ug] += d_delta * a;
                    grad[lt] += d_delta * a;
                    grad[lth] += d_delta * 0.5 * (1.0 - a);
                }
            }
            for i in 0..j {
                let z = theta[l.beta(c, i)];
                grad[l.beta(c, i)] += g_beta[i] * sigma[i];
                grad[l.beta_bar(i)] += g_beta[i];
                grad[l.log_sigma(i)] += g_beta[i] * sigma[i] * z;
            }
        }

        if !lp.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return reject(grad);
        }
        lp
    }

    /// Uniform draws on `[-radius, radius]` for every unconstrained coordinate.
    pub fn initial_point<R: rand::Rng>(&self, rng: &mut R, radius: f64) -> Vec<f64> {
        (0..self.dim())
            .map(|_| rng.random_range(-radius..=radius))
            .collect()
    }

    /// Index of the transition cell for (country, period), if it exists.
    pub fn cell_index(&self, country: usize, period: usize) -> Option<usize> {
        let s = &self.series[country];
        if period > s.first_period && period < s.first_period + s.levels.len() {
            Some(s.first_cell + period - s.first_period - 1)
        } else {
            None
        }
    }
}

fn reject(grad: &mut [f64]) -> f64 {
    grad.fill(0.0);
    REJECTED_LOG_DENSITY
}

impl LogDensity for ShockModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64 {
        if position.len() != self.dim() {
            return reject(grad);
        }
        self.evaluate(position, grad)
    }

    fn param_names(&self) -> Vec<String> {
        self.layout.constrained_names()
    }

    fn constrained(&self, position: &[f64]) -> Vec<f64> {
        self.constrained_values(position)
            .unwrap_or_else(|_| vec![f64::NAN; self.dim()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{simulate_panel, Period, SyntheticSpec};
    use crate::numeric::logit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_panel(n_countries: usize, n_periods: usize, seed: u64) -> SeriesPanel {
        let spec = SyntheticSpec::generate(n_countries, n_periods, 0.8, 2, (5.0, 15.0), seed).unwrap();
        simulate_panel(&spec).unwrap().0
    }

    fn check_gradient(model: &ShockModel, theta: &[f64]) {
        let (_, grad) = model.log_posterior(theta).unwrap();
        let h = 1e-5;
        for k in 0..theta.len() {
            let mut up = theta.to_vec();
            up[k] += h;
            let mut dn = theta.to_vec();
            dn[k] -= h;
            let fd = (model.log_posterior(&up).unwrap().0 - model.log_posterior(&dn).unwrap().0)
                / (2.0 * h);
            let err = (grad[k] - fd).abs() / fd.abs().max(1.0);
            assert!(err < 1e-6, "coordinate {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }

    #[test]
    fn layout_dimensions() {
        let panel = small_panel(3, 5, 1);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        // 3*4 spline + 4 + 4 + 1 + tau + theta + 2 * 12 cells
        assert_eq!(m.dim(), 12 + 8 + 1 + 2 + 24);
        assert_eq!(m.layout().constrained_names().len(), m.dim());
        let m0 = ShockModel::new(&panel, ModelConfig::without_shocks()).unwrap();
        assert_eq!(m0.dim(), 21);
        assert!(m.log_posterior(&[0.0; 3]).is_err());
    }

    #[test]
    fn hand_computed_likelihood() {
        let panel = SeriesPanel::new(
            vec!["A".into()],
            vec!["A".into()],
            vec!["R".into()],
            (0..3).map(|t| Period::starting(1950 + 5 * t)).collect(),
            vec![vec![Some(50.0), Some(51.7), Some(52.1)]],
        )
        .unwrap();
        let m = ShockModel::new(&panel, ModelConfig::without_shocks()).unwrap();
        let l = m.layout().clone();
        let mut theta = vec![0.0; m.dim()];
        // f == 1 everywhere: beta_bar carries the value, z = 0
        for i in 0..3 {
            theta[l.beta_bar(i)] = logit((1.0 - 0.001) / 9.999);
        }
        theta[l.beta_bar(3)] = logit((1.0 - 0.001) / 1.149);
        theta[l.log_tau_eps_sq()] = 0.0;
        let ll = m.log_likelihood(&theta).unwrap();
        let std_normal = |x: f64| -0.5 * LN_2PI - 0.5 * x * x;
        let expect = std_normal(51.7 - 50.0 - 1.0) + std_normal(52.1 - 51.7 - 1.0);
        assert!((ll - expect).abs() < 1e-12, "{ll} vs {expect}");
    }

    #[test]
    fn shock_shifts_the_residual() {
        let panel = small_panel(1, 4, 3);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = m.initial_point(&mut rng, 1.0);
        let mut block = m.constrain(&theta).unwrap();
        let base = block.clone();
        let r = 2.5;
        block.shocks.as_mut().unwrap().delta[1] += r;
        let residual = |b: &ParameterBlock| {
            let c = Coefficients::from_unconstrained(&m.config.spline, &b.beta_star[0]).unwrap();
            let prev = panel.value(0, 1).unwrap();
            panel.value(0, 2).unwrap() - prev - m.basis.transition(&c, prev)
                + b.shocks.as_ref().unwrap().delta[1]
        };
        assert!((residual(&block) - residual(&base) - r).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let panel = small_panel(3, 6, 4);
        for shocks in [true, false] {
            let mut cfg = ModelConfig::default();
            cfg.horseshoe.shocks_enabled = shocks;
            let m = ShockModel::new(&panel, cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..5 {
                let theta = m.initial_point(&mut rng, 1.5);
                check_gradient(&m, &theta);
            }
        }
    }

    #[test]
    fn two_routes_agree() {
        // non-centered evaluation == centered density + log Jacobian
        let panel = small_panel(4, 7, 6);
        for shocks in [true, false] {
            let mut cfg = ModelConfig::default();
            cfg.horseshoe.shocks_enabled = shocks;
            let m = ShockModel::new(&panel, cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for _ in 0..20 {
                let theta = m.initial_point(&mut rng, 2.0);
                let (lp, _) = m.log_posterior(&theta).unwrap();
                let block = m.constrain(&theta).unwrap();
                let centered = m.log_density_constrained(&block).unwrap();
                let (jac, _) = m.transform_jacobians(&theta).unwrap();
                assert!(
                    (lp - (centered + jac)).abs() < 1e-8 * lp.abs().max(1.0),
                    "{lp} vs {}",
                    centered + jac
                );
            }
        }
    }

    #[test]
    fn jacobian_gradient_matches_finite_differences() {
        let panel = small_panel(2, 5, 9);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let theta = m.initial_point(&mut rng, 1.0);
        let (_, grad) = m.transform_jacobians(&theta).unwrap();
        let h = 1e-6;
        for k in 0..theta.len() {
            let mut up = theta.clone();
            up[k] += h;
            let mut dn = theta.clone();
            dn[k] -= h;
            let fd = (m.transform_jacobians(&up).unwrap().0 - m.transform_jacobians(&dn).unwrap().0)
                / (2.0 * h);
            assert!((grad[k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn positive_transform_examples() {
        assert_eq!(positive_transform(0.0), (1.0, 0.0));
        let (v, j) = positive_transform(3f64.ln());
        assert!((v - 3.0).abs() < 1e-15);
        assert_eq!(j, 3f64.ln());
    }

    #[test]
    fn jacobian_is_sum_of_terms() {
        let panel = small_panel(2, 5, 12);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let theta = m.initial_point(&mut rng, 2.0);
        let (total, _) = m.transform_jacobians(&theta).unwrap();
        let terms = m.jacobian_terms(&theta);
        assert_eq!(terms.len(), m.dim());
        assert!((total - terms.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn constrain_round_trip() {
        let panel = small_panel(3, 6, 14);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let theta = m.initial_point(&mut rng, 2.0);
            let back = m.unconstrain(&m.constrain(&theta).unwrap()).unwrap();
            for (a, b) in theta.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shock_free_model_matches_shared_terms() {
        // with the shock block removed the remaining density is identical
        let panel = small_panel(3, 6, 16);
        let with = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let without = ShockModel::new(&panel, ModelConfig::without_shocks()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let theta0 = without.initial_point(&mut rng, 1.0);
        let mut block = without.constrain(&theta0).unwrap();
        let lp0 = without.log_density_constrained(&block).unwrap();
        block.shocks = Some(ShockBlock {
            delta: vec![0.0; with.layout().n_cells()],
            gamma: vec![1.0; with.layout().n_cells()],
            tau: 0.01,
            theta: 10.0,
        });
        let cfg = &with.config().horseshoe;
        let prior = shock_log_prior(block.shocks.as_ref().unwrap(), cfg).unwrap().log_density;
        let lp1 = with.log_density_constrained(&block).unwrap();
        assert!((lp1 - prior - lp0).abs() < 1e-12);
    }

    #[test]
    fn country_order_permutes_gradient() {
        let panel = small_panel(3, 6, 18);
        let swapped = panel.select_countries(&["C003", "C001", "C002"]).unwrap();
        let a = ShockModel::new(&panel, ModelConfig::without_shocks()).unwrap();
        let b = ShockModel::new(&swapped, ModelConfig::without_shocks()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let theta_a = a.initial_point(&mut rng, 1.0);
        let mut theta_b = theta_a.clone();
        let perm = [2usize, 0, 1];
        let la = a.layout();
        for (new_c, &old_c) in perm.iter().enumerate() {
            for i in 0..la.n_free {
                theta_b[la.beta(new_c, i)] = theta_a[la.beta(old_c, i)];
            }
        }
        let (lpa, ga) = a.log_posterior(&theta_a).unwrap();
        let (lpb, gb) = b.log_posterior(&theta_b).unwrap();
        assert!((lpa - lpb).abs() < 1e-9);
        for (new_c, &old_c) in perm.iter().enumerate() {
            for i in 0..la.n_free {
                assert!((gb[la.beta(new_c, i)] - ga[la.beta(old_c, i)]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected_not_panicking() {
        let panel = small_panel(2, 4, 20);
        let m = ShockModel::new(&panel, ModelConfig::default()).unwrap();
        let mut theta = vec![0.0; m.dim()];
        theta[m.layout().log_tau_eps_sq()] = f64::NAN;
        let mut grad = vec![1.0; m.dim()];
        assert_eq!(m.log_density_grad(&theta, &mut grad), REJECTED_LOG_DENSITY);
        assert!(grad.iter().all(|&g| g == 0.0));
        theta[m.layout().log_tau_eps_sq()] = -800.0;
        assert_eq!(m.log_density_grad(&theta, &mut grad), REJECTED_LOG_DENSITY);
    }
}

//! Regularized horseshoe prior on non-negative shock magnitudes.
//!
//! ```text
//! delta | gamma, tau, theta ~ N+(0, tau^2 * gamma_reg^2)
//! gamma_reg^2 = theta^2 gamma^2 / (theta^2 + tau^2 gamma^2)
//! gamma ~ C+(0, 1),  tau ~ C+(0, tau0),  theta^2 ~ Inv-Gamma(nu/2, nu s^2/2)
//! ```

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Cauchy, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numeric::{bisect, half_cauchy_lpdf, integrate, LN_2PI};

/// How `slab_parameter` is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlabInterpretation {
    /// `slab_parameter` is the scale `s`.
    Scale,
    /// `slab_parameter` is `s^2`.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorseshoeConfig {
    /// Scale of the half-Cauchy prior on the global scale.
    pub tau0: f64,
    /// Slab degrees of freedom.
    pub nu: f64,
    pub slab_parameter: f64,
    pub slab_interpretation: SlabInterpretation,
    pub shocks_enabled: bool,
}

impl Default for HorseshoeConfig {
    fn default() -> Self {
        HorseshoeConfig {
            tau0: 0.01,
            nu: 6.0,
            slab_parameter: 10.0,
            slab_interpretation: SlabInterpretation::Scale,
            shocks_enabled: true,
        }
    }
}

impl HorseshoeConfig {
    pub fn slab_scale_sq(&self) -> f64 {
        match self.slab_interpretation {
            SlabInterpretation::Scale => self.slab_parameter * self.slab_parameter,
            SlabInterpretation::Variance => self.slab_parameter,
        }
    }

    pub fn slab_scale(&self) -> f64 {
        self.slab_scale_sq().sqrt()
    }

    /// Shape and rate of the inverse-gamma prior on `theta^2`.
    pub fn slab_inv_gamma(&self) -> (f64, f64) {
        (0.5 * self.nu, 0.5 * self.nu * self.slab_scale_sq())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.nu > 0.0 && self.slab_parameter > 0.0) {
            return Err(Error::InvalidConfig(
                "horseshoe: tau0, nu and slab_parameter must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Constrained-space shock parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShockBlock {
    pub delta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub tau: f64,
    pub theta: f64,
}

impl ShockBlock {
    pub fn regularized_variances(&self) -> Vec<f64> {
        let t2 = self.theta * self.theta;
        let tau2 = self.tau * self.tau;
        self.gamma
            .iter()
            .map(|g| t2 * g * g / (t2 + tau2 * g * g))
            .collect()
    }
}

/// `theta^2 gamma^2 / (theta^2 + tau^2 gamma^2)`.
pub fn regularized_variance(gamma: f64, tau: f64, theta: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositive("gamma"));
    }
    if !(tau > 0.0) {
        return Err(Error::NonPositive("tau"));
    }
    if !(theta > 0.0) {
        return Err(Error::NonPositive("theta"));
    }
    let t2 = theta * theta;
    let g2 = gamma * gamma;
    Ok(t2 * g2 / (t2 + tau * tau * g2))
}

/// Log prior split by component.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ShockPriorTerms {
    pub half_normal: f64,
    pub local: f64,
    pub global: f64,
    pub slab: f64,
}

impl ShockPriorTerms {
    pub fn total(&self) -> f64 {
        self.half_normal + self.local + self.global + self.slab
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShockPriorEval {
    pub log_density: f64,
    pub terms: ShockPriorTerms,
    /// Gradient with respect to the members of the block, same layout.
    pub grad: ShockBlock,
}

/// Log density of the block (half-normal shocks, half-Cauchy local and global
/// scales, inverse-gamma on `theta^2`) with its gradient with respect to
/// `delta`, `gamma`, `tau` and `theta`.
pub fn shock_log_prior(block: &ShockBlock, config: &HorseshoeConfig) -> Result<ShockPriorEval> {
    let n = block.delta.len();
    if block.gamma.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: block.gamma.len(),
        });
    }
    let mut grad = ShockBlock {
        delta: vec![0.0; n],
        gamma: vec![0.0; n],
        tau: 0.0,
        theta: 0.0,
    };
    if !config.shocks_enabled {
        return Ok(ShockPriorEval {
            log_density: 0.0,
            terms: ShockPriorTerms::default(),
            grad,
        });
    }
    let ShockBlock {
        delta,
        gamma,
        tau,
        theta,
    } = block;
    let (tau, theta) = (*tau, *theta);
    if !(tau > 0.0) {
        return Err(Error::NonPositive("tau"));
    }
    if !(theta > 0.0) {
        return Err(Error::NonPositive("theta"));
    }
    let t2 = theta * theta;
    let tau2 = tau * tau;
    let mut terms = ShockPriorTerms::default();
    for i in 0..n {
        let (d, g) = (delta[i], gamma[i]);
        if !(g > 0.0) {
            return Err(Error::NonPositive("gamma"));
        }
        if d < 0.0 {
            return Err(Error::InvalidConfig(format!("negative shock {d}")));
        }
        let g2 = g * g;
        let denom = t2 + tau2 * g2;
        let a = t2 / denom;
        let v = tau2 * t2 * g2 / denom;
        terms.half_normal += std::f64::consts::LN_2 - 0.5 * (LN_2PI + v.ln()) - 0.5 * d * d / v;
        grad.delta[i] = -d / v;
        // d/d(log v) of the half-normal term
        let dlogv = -0.5 + 0.5 * d * d / v;
        grad.gamma[i] = dlogv * 2.0 * a / g;
        grad.tau += dlogv * 2.0 * a / tau;
        grad.theta += dlogv * 2.0 * (1.0 - a) / theta;

        terms.local += half_cauchy_lpdf(g, 1.0);
        grad.gamma[i] += -2.0 * g / (1.0 + g2);
    }
    terms.global = half_cauchy_lpdf(tau, config.tau0);
    grad.tau += -2.0 * tau / (config.tau0 * config.tau0 + tau2);

    let (shape, rate) = config.slab_inv_gamma();
    terms.slab = inv_gamma_lpdf(t2, shape, rate);
    grad.theta += (-(shape + 1.0) / t2 + rate / (t2 * t2)) * 2.0 * theta;

    Ok(ShockPriorEval {
        log_density: terms.total(),
        terms,
        grad,
    })
}

pub(crate) fn inv_gamma_lpdf(x: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - rate / x
}

/// Tail probability of a half-Student-t with `nu` degrees of freedom and the
/// given scale, `P(X > threshold)`, by quadrature of the density.
/// `nu = inf` gives the half-normal.
pub fn half_student_t_exceedance(threshold: f64, nu: f64, scale: f64) -> f64 {
    if threshold <= 0.0 {
        return 1.0;
    }
    2.0 * student_t_upper_tail(threshold / scale, nu)
}

fn student_t_upper_tail(u: f64, nu: f64) -> f64 {
    let log_norm = if nu.is_infinite() {
        -0.5 * LN_2PI
    } else {
        ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln()
    };
    let pdf = move |t: f64| {
        if nu.is_infinite() {
            (log_norm - 0.5 * t * t).exp()
        } else {
            (log_norm - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()).exp()
        }
    };
    const TOL: f64 = 1e-13;
    if u <= 1.0 {
        0.5 - integrate(pdf, 0.0, u, TOL)
    } else {
        // substitute t = 1/y to integrate the tail over a finite interval
        let mapped = move |y: f64| if y <= 0.0 { 0.0 } else { pdf(1.0 / y) / (y * y) };
        integrate(mapped, 0.0, 1.0 / u, TOL)
    }
}

/// A `(threshold, probability)` tail constraint on the escaped-shock prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailTarget {
    pub threshold: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlabCalibration {
    pub slab_scale: f64,
    pub nu: f64,
    pub p_target: f64,
    pub p_ceiling: f64,
}

/// Solves for the half-Student-t scale that puts `target.probability` mass
/// above `target.threshold`, then checks that the mass above
/// `ceiling.threshold` stays below `ceiling.probability`.
pub fn calibrate_slab(target: TailTarget, ceiling: TailTarget, nu: f64) -> Result<SlabCalibration> {
    for p in [target.probability, ceiling.probability] {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Calibration(format!(
                "tail probability {p} must lie in (0, 1)"
            )));
        }
    }
    if !(nu > 0.0) || !(target.threshold > 0.0) {
        return Err(Error::Calibration("nu and thresholds must be positive".into()));
    }
    let a = target.threshold;
    let scale = bisect(
        |s| half_student_t_exceedance(a, nu, s) - target.probability,
        a * 1e-3,
        a * 1e3,
        1e-12 * a,
    )
    .ok_or_else(|| Error::Calibration("no scale attains the target tail probability".into()))?;
    let p_target = half_student_t_exceedance(a, nu, scale);
    let p_ceiling = half_student_t_exceedance(ceiling.threshold, nu, scale);
    if (p_target - target.probability).abs() > 0.01 || p_ceiling >= ceiling.probability {
        return Err(Error::Calibration(format!(
            "scale {scale:.4} gives P(>{a}) = {p_target:.4} and P(>{}) = {p_ceiling:.2e}",
            ceiling.threshold
        )));
    }
    Ok(SlabCalibration {
        slab_scale: scale,
        nu,
        p_target,
        p_ceiling,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub tau0: f64,
    pub estimate: f64,
    pub mc_se: f64,
}

/// Monte Carlo estimate of the marginal prior `P(delta > delta_star)` for each
/// global-scale hyperparameter in `grid`.
pub fn prior_predictive_tune(
    grid: &[f64],
    config: &HorseshoeConfig,
    delta_star: f64,
    n_sims: usize,
    seed: u64,
) -> Result<Vec<TuneRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty tau0 grid".into()));
    }
    if !(delta_star > 0.0) {
        return Err(Error::InvalidConfig("delta_star must be positive".into()));
    }
    if n_sims < 100_000 {
        return Err(Error::InvalidConfig(
            "prior predictive tuning needs at least 1e5 simulations".into(),
        ));
    }
    config.validate()?;
    if let Some(t) = grid.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::InvalidConfig(format!("tau0 grid value {t} must be positive")));
    }
    let (shape, rate) = config.slab_inv_gamma();
    let slab_gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::InvalidConfig(format!("slab prior: {e}")))?;
    let cauchy: Cauchy<f64> = Cauchy::new(0.0, 1.0).expect("unit cauchy");
    let rows = grid
        .par_iter()
        .enumerate()
        .map(|(i, &tau0)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut hits = 0usize;
            for _ in 0..n_sims {
                let tau = tau0 * cauchy.sample(&mut rng).abs();
                let theta2 = 1.0 / slab_gamma.sample(&mut rng);
                let gamma = cauchy.sample(&mut rng).abs();
                let g2 = gamma * gamma;
                let reg = theta2 * g2 / (theta2 + tau * tau * g2);
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() * tau * reg.sqrt() > delta_star {
                    hits += 1;
                }
            }
            let p = hits as f64 / n_sims as f64;
            TuneRow {
                tau0,
                estimate: p,
                mc_se: (p * (1.0 - p) / n_sims as f64).sqrt(),
            }
        })
        .collect();
    Ok(rows)
}

//! Gradient-based MCMC: multinomial NUTS with windowed warmup adaptation,
//! a fixed-length HMC fallback, and convergence diagnostics.

mod adapt;
mod diagnostics;
mod draws;
mod nuts;

pub use diagnostics::{effective_sample_size, split_rhat, split_rhat_classic, ParameterSummary};
pub use draws::{ConvergenceSummary, DiagnosticsReport, IterationStats, PosteriorDraws};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use adapt::{StepSizeAdapter, WindowedVariance};
use nuts::Integrator;

/// A differentiable log density on an unconstrained space.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `grad` and returns the log density. Returns
    /// a non-finite value or [`crate::model::REJECTED_LOG_DENSITY`] when the
    /// point is unusable.
    fn log_density_grad(&self, position: &[f64], grad: &mut [f64]) -> f64;

    /// Names of the constrained quantities reported per draw.
    fn param_names(&self) -> Vec<String> {
        (0..self.dim()).map(|k| format!("theta[{}]", k + 1)).collect()
    }

    fn constrained(&self, position: &[f64]) -> Vec<f64> {
        position.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Algorithm {
    Nuts,
    /// Fixed trajectory length; intended for debugging.
    StaticHmc { n_leapfrog: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_sampling: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub max_energy_error: f64,
    pub algorithm: Algorithm,
    pub init_radius: f64,
    pub rhat_threshold: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 4,
            n_warmup: 500,
            n_sampling: 1000,
            target_accept: 0.8,
            max_tree_depth: 10,
            max_energy_error: 1000.0,
            algorithm: Algorithm::Nuts,
            init_radius: 2.0,
            rhat_threshold: 1.05,
            seed: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_sampling == 0 {
            return Err(Error::InvalidConfig(
                "chain and sampling counts must be positive".into(),
            ));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::InvalidConfig(
                "target acceptance must lie in (0, 1)".into(),
            ));
        }
        if self.max_tree_depth == 0 || self.max_tree_depth > 30 {
            return Err(Error::InvalidConfig("max tree depth must be in 1..=30".into()));
        }
        if let Algorithm::StaticHmc { n_leapfrog: 0 } = self.algorithm {
            return Err(Error::InvalidConfig("leapfrog count must be positive".into()));
        }
        if !(self.init_radius >= 0.0 && self.max_energy_error > 0.0 && self.rhat_threshold > 1.0) {
            return Err(Error::InvalidConfig("invalid sampler tolerances".into()));
        }
        Ok(())
    }

    /// Per-chain generator: the master seed with the chain index as stream.
    pub fn chain_rng(&self, chain: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chain as u64);
        rng
    }
}

/// State of one finished chain.
#[derive(Debug, Clone)]
pub(crate) struct ChainResult {
    pub unconstrained: Vec<f64>,
    pub constrained: Vec<f64>,
    pub stats: Vec<IterationStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Draws uniform inits and keeps the first finite one, up to 100 attempts.
pub fn random_init<M: LogDensity + ?Sized>(
    model: &M,
    rng: &mut ChaCha8Rng,
    radius: f64,
) -> Result<Vec<f64>> {
    use rand::Rng;
    let mut grad = vec![0.0; model.dim()];
    for _ in 0..100 {
        let q: Vec<f64> = (0..model.dim())
            .map(|_| rng.random_range(-radius..=radius))
            .collect();
        if usable(model.log_density_grad(&q, &mut grad)) && grad.iter().all(|g| g.is_finite()) {
            return Ok(q);
        }
    }
    Err(Error::Sampler(
        "no finite log density found in 100 random initializations".into(),
    ))
}

pub(crate) fn usable(lp: f64) -> bool {
    lp.is_finite() && lp > crate::model::REJECTED_LOG_DENSITY
}

/// Runs all chains in parallel. `inits` may be empty (random uniform inits)
/// or hold one vector per chain.
pub fn run_chains<M: LogDensity + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<PosteriorDraws> {
    config.validate()?;
    if !inits.is_empty() && inits.len() != config.n_chains {
        return Err(Error::DimensionMismatch {
            expected: config.n_chains,
            actual: inits.len(),
        });
    }
    for init in inits {
        if init.len() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                actual: init.len(),
            });
        }
        if init.iter().any(|x| !x.is_finite()) {
            return Err(Error::Sampler("non-finite initial value".into()));
        }
    }
    let results: Vec<ChainResult> = (0..config.n_chains)
        .into_par_iter()
        .map(|chain| run_chain(model, config, chain, inits.get(chain).cloned()))
        .collect::<Result<_>>()?;
    Ok(PosteriorDraws::from_chains(
        model.param_names(),
        model.dim(),
        config.n_warmup,
        results,
    ))
}

fn run_chain<M: LogDensity + ?Sized>(
    model: &M,
    config: &SamplerConfig,
    chain: usize,
    init: Option<Vec<f64>>,
) -> Result<ChainResult> {
    let mut rng = config.chain_rng(chain);
    let q0 = match init {
        Some(q) => q,
        None => random_init(model, &mut rng, config.init_radius)?,
    };
    let dim = model.dim();
    let mut integ = Integrator::new(model, q0, config.max_energy_error)?;
    let mut step = StepSizeAdapter::new(config.target_accept);
    let mut metric = WindowedVariance::new(dim, config.n_warmup);

    integ.init_step_size(&mut rng)?;
    step.set_mu((10.0 * integ.step_size).ln());

    let mut warmup_divergences = 0;
    for _ in 0..config.n_warmup {
        let stats = integ.transition(config, &mut rng);
        if stats.divergent {
            warmup_divergences += 1;
        }
        integ.step_size = step.learn(stats.accept_stat);
        if metric.learn(&integ.point.q, &mut integ.inv_metric) {
            integ.init_step_size(&mut rng)?;
            step.set_mu((10.0 * integ.step_size).ln());
            step.restart();
        }
    }
    if config.n_warmup > 0 {
        if warmup_divergences == config.n_warmup {
            return Err(Error::Sampler(format!(
                "chain {chain}: every warmup transition diverged"
            )));
        }
        integ.step_size = step.final_step_size();
    }
    if !(integ.step_size.is_finite() && integ.step_size > 0.0) {
        return Err(Error::Sampler(format!(
            "chain {chain}: adapted step size {} is unusable",
            integ.step_size
        )));
    }

    let n = config.n_sampling;
    let mut unconstrained = Vec::with_capacity(n * dim);
    let mut constrained = Vec::with_capacity(n * dim);
    let mut stats = Vec::with_capacity(n);
    for _ in 0..n {
        let s = integ.transition(config, &mut rng);
        unconstrained.extend_from_slice(&integ.point.q);
        constrained.extend(model.constrained(&integ.point.q));
        stats.push(s);
    }
    Ok(ChainResult {
        unconstrained,
        constrained,
        stats,
        step_size: integ.step_size,
        inv_metric: integ.inv_metric.clone(),
    })
}

#[cfg(test)]
mod tests;

//! Rank-normalized split-R̂ and autocorrelation-based effective sample size.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::numeric::{mean, median, quantiles};

fn check_shape(chains: &[&[f64]]) -> Result<usize> {
    if chains.len() < 2 {
        return Err(Error::ShapeMismatch("at least 2 chains are required".into()));
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(Error::ShapeMismatch("at least 4 iterations are required".into()));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::ShapeMismatch("chains differ in length".into()));
    }
    Ok(n)
}

fn split(chains: &[&[f64]]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    let odd = chains[0].len() % 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[half + odd..].to_vec()])
        .collect()
}

/// Normal scores of pooled fractional ranks (ties share their average rank).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len() as f64;
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        let z = std.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, k) in &pooled[i..=j] {
            out[c][k] = z;
        }
        i = j + 1;
    }
    out
}

fn rhat_basic(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
        .collect();
    let w = mean(&vars);
    if !(w > 0.0) || !w.is_finite() {
        return None;
    }
    let grand = mean(&means);
    let b = n * means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (means.len() as f64 - 1.0);
    let var_plus = (n - 1.0) / n * w + b / n;
    Some((var_plus / w).sqrt())
}

/// Split-R̂ on the raw draws, without rank normalization.
pub fn split_rhat_classic(chains: &[&[f64]]) -> Result<Option<f64>> {
    check_shape(chains)?;
    Ok(rhat_basic(&split(chains)))
}

/// Rank-normalized split-R̂: the larger of the bulk and folded-tail values.
/// `None` when the within-chain variance is zero.
pub fn split_rhat(chains: &[&[f64]]) -> Result<Option<f64>> {
    check_shape(chains)?;
    let halves = split(chains);
    if rhat_basic(&halves).is_none() {
        return Ok(None);
    }
    let bulk = rhat_basic(&rank_normalize(&halves));
    let pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    let med = median(&pooled);
    let folded: Vec<Vec<f64>> = halves
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    Ok(match (bulk, tail) {
        (Some(b), Some(t)) => Some(b.max(t)),
        (b, t) => b.or(t),
    })
}

fn autocovariance(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    let m = mean(x);
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS on split chains, truncating the autocorrelation sum with
/// Geyer's initial monotone sequence. `None` for zero variance.
pub fn effective_sample_size(chains: &[&[f64]]) -> Result<Option<f64>> {
    check_shape(chains)?;
    let halves = split(chains);
    Ok(ess_geyer(&halves))
}

fn ess_geyer(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len() as f64;
    let n = chains[0].len();
    let nf = n as f64;
    let chain_var: Vec<f64> = chains
        .iter()
        .map(|c| autocovariance(c, 0) * nf / (nf - 1.0))
        .collect();
    let mean_var = mean(&chain_var);
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mut var_plus = mean_var * (nf - 1.0) / nf;
    if chains.len() > 1 {
        let g = mean(&means);
        var_plus += means.iter().map(|x| (x - g).powi(2)).sum::<f64>() / (m - 1.0);
    }
    if !(mean_var > 0.0) || !var_plus.is_finite() {
        return None;
    }
    let rho_at = |lag: usize| {
        let acov = chains.iter().map(|c| autocovariance(c, lag)).sum::<f64>() / m;
        1.0 - (mean_var - acov) / var_plus
    };

    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t + 2 < n.saturating_sub(4) && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            let avg = (rho[t - 1] + rho[t]) / 2.0;
            rho[t + 1] = avg;
            rho[t + 2] = avg;
        }
        t += 2;
    }
    let total = m * nf;
    let tail = if max_t + 1 < n { rho[max_t + 1] } else { 0.0 };
    let tau = (-1.0 + 2.0 * rho[..=max_t].iter().sum::<f64>() + tail).max(1.0 / total.log10());
    Some(total / tau)
}

/// Posterior summary of one named quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

impl ParameterSummary {
    pub fn from_chains(name: &str, chains: &[&[f64]]) -> Self {
        let pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
        let q = quantiles(&pooled, &[0.05, 0.5, 0.95]);
        let mu = mean(&pooled);
        let sd = if pooled.len() > 1 {
            crate::numeric::variance(&pooled).sqrt()
        } else {
            0.0
        };
        let (rhat, ess) = if chains.len() >= 2 && chains[0].len() >= 4 {
            (
                split_rhat(chains).ok().flatten(),
                effective_sample_size(chains).ok().flatten(),
            )
        } else {
            (None, None)
        };
        ParameterSummary {
            name: name.to_string(),
            mean: mu,
            sd,
            q05: q[0],
            q50: q[1],
            q95: q[2],
            rhat,
            ess,
        }
    }
}

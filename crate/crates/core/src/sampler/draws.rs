use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::diagnostics::ParameterSummary;
use super::ChainResult;
use crate::error::{Error, Result};

/// Per-iteration sampler state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub lp: f64,
    pub accept_stat: f64,
    pub step_size: f64,
    pub tree_depth: u32,
    pub n_leapfrog: u32,
    pub divergent: bool,
    pub energy: f64,
}

const STAT_COLUMNS: [&str; 9] = [
    "chain",
    "iteration",
    "lp__",
    "accept_stat__",
    "stepsize__",
    "treedepth__",
    "n_leapfrog__",
    "divergent__",
    "energy__",
];

/// Post-warmup draws of all chains.
///
/// Constrained values are stored chain-major: the value of parameter `k` at
/// iteration `i` of chain `c` sits at `(c * n_iter + i) * n_params + k`.
/// Unconstrained values follow the same layout when present; draws read back
/// from CSV carry only the constrained view.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    names: Vec<String>,
    n_chains: usize,
    n_iter: usize,
    n_warmup: usize,
    constrained: Vec<f64>,
    unconstrained_dim: usize,
    unconstrained: Vec<f64>,
    stats: Vec<IterationStats>,
    step_sizes: Vec<f64>,
    inv_metrics: Vec<Vec<f64>>,
}

impl PosteriorDraws {
    pub(crate) fn from_chains(
        names: Vec<String>,
        dim: usize,
        n_warmup: usize,
        chains: Vec<ChainResult>,
    ) -> Self {
        let n_chains = chains.len();
        let n_iter = chains.first().map_or(0, |c| c.stats.len());
        let mut out = PosteriorDraws {
            names,
            n_chains,
            n_iter,
            n_warmup,
            constrained: Vec::new(),
            unconstrained_dim: dim,
            unconstrained: Vec::new(),
            stats: Vec::new(),
            step_sizes: Vec::new(),
            inv_metrics: Vec::new(),
        };
        for c in chains {
            out.constrained.extend(c.constrained);
            out.unconstrained.extend(c.unconstrained);
            out.stats.extend(c.stats);
            out.step_sizes.push(c.step_size);
            out.inv_metrics.push(c.inv_metric);
        }
        out
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_chains(&self) -> usize {
        self.n_chains
    }

    pub fn n_iter(&self) -> usize {
        self.n_iter
    }

    pub fn n_warmup(&self) -> usize {
        self.n_warmup
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains * self.n_iter
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn step_sizes(&self) -> &[f64] {
        &self.step_sizes
    }

    pub fn inv_metrics(&self) -> &[Vec<f64>] {
        &self.inv_metrics
    }

    pub fn stats(&self) -> &[IterationStats] {
        &self.stats
    }

    pub fn chain_stats(&self, chain: usize) -> &[IterationStats] {
        &self.stats[chain * self.n_iter..(chain + 1) * self.n_iter]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Constrained values of draw `d` (chain-major flat index).
    pub fn draw(&self, d: usize) -> &[f64] {
        let k = self.n_params();
        &self.constrained[d * k..(d + 1) * k]
    }

    pub fn has_unconstrained(&self) -> bool {
        !self.unconstrained.is_empty()
    }

    pub fn unconstrained_draw(&self, d: usize) -> Option<&[f64]> {
        let k = self.unconstrained_dim;
        self.has_unconstrained()
            .then(|| &self.unconstrained[d * k..(d + 1) * k])
    }

    /// All draws of one parameter, pooled across chains.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.draw(d)[k]).collect()
    }

    pub fn column_by_name(&self, name: &str) -> Result<Vec<f64>> {
        let k = self
            .param_index(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        Ok(self.column(k))
    }

    /// Per-chain draws of one parameter.
    pub fn chains_of(&self, k: usize) -> Vec<Vec<f64>> {
        (0..self.n_chains)
            .map(|c| {
                (0..self.n_iter)
                    .map(|i| self.draw(c * self.n_iter + i)[k])
                    .collect()
            })
            .collect()
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }

    pub fn summaries(&self) -> Vec<ParameterSummary> {
        (0..self.n_params())
            .map(|k| {
                let chains = self.chains_of(k);
                let refs: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
                ParameterSummary::from_chains(&self.names[k], &refs)
            })
            .collect()
    }

    pub fn convergence(&self, rhat_threshold: f64) -> ConvergenceSummary {
        ConvergenceSummary::from_summaries(&self.summaries(), rhat_threshold, self)
    }

    pub fn diagnostics(&self, rhat_threshold: f64) -> DiagnosticsReport {
        let parameters = self.summaries();
        DiagnosticsReport {
            n_chains: self.n_chains,
            n_warmup: self.n_warmup,
            n_sampling: self.n_iter,
            step_sizes: self.step_sizes.clone(),
            divergences_per_chain: (0..self.n_chains)
                .map(|c| self.chain_stats(c).iter().filter(|s| s.divergent).count())
                .collect(),
            mean_tree_depth: if self.stats.is_empty() {
                0.0
            } else {
                self.stats.iter().map(|s| s.tree_depth as f64).sum::<f64>()
                    / self.stats.len() as f64
            },
            convergence: ConvergenceSummary::from_summaries(&parameters, rhat_threshold, self),
            parameters,
        }
    }

    /// One row per chain-iteration: sampler statistics, then one column per
    /// named constrained parameter.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<&str> = STAT_COLUMNS
            .iter()
            .copied()
            .chain(self.names.iter().map(|s| s.as_str()))
            .collect();
        w.write_record(&header).map_err(csv_err)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for c in 0..self.n_chains {
            for i in 0..self.n_iter {
                let d = c * self.n_iter + i;
                let s = &self.stats[d];
                row.clear();
                row.push((c + 1).to_string());
                row.push((i + 1).to_string());
                row.push(s.lp.to_string());
                row.push(s.accept_stat.to_string());
                row.push(s.step_size.to_string());
                row.push(s.tree_depth.to_string());
                row.push(s.n_leapfrog.to_string());
                row.push(u8::from(s.divergent).to_string());
                row.push(s.energy.to_string());
                row.extend(self.draw(d).iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R, n_warmup: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers().map_err(csv_err)?.clone();
        if header.len() < STAT_COLUMNS.len()
            || header.iter().zip(STAT_COLUMNS).any(|(a, b)| a != b)
        {
            return Err(Error::Parse {
                row: 1,
                message: "draws header does not start with the sampler columns".into(),
            });
        }
        let names: Vec<String> = header.iter().skip(STAT_COLUMNS.len()).map(String::from).collect();
        let mut constrained = Vec::new();
        let mut stats = Vec::new();
        let mut chain_ids: Vec<usize> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let row = line + 2;
            let num = |k: usize| -> Result<f64> {
                rec.get(k)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Parse {
                        row,
                        message: format!("column {} is not numeric", header.get(k).unwrap_or("?")),
                    })
            };
            if rec.len() != header.len() {
                return Err(Error::Parse {
                    row,
                    message: "wrong number of fields".into(),
                });
            }
            let chain = num(0)? as usize;
            if chain_ids.last() != Some(&chain) {
                chain_ids.push(chain);
            }
            stats.push(IterationStats {
                lp: num(2)?,
                accept_stat: num(3)?,
                step_size: num(4)?,
                tree_depth: num(5)? as u32,
                n_leapfrog: num(6)? as u32,
                divergent: num(7)? != 0.0,
                energy: num(8)?,
            });
            for k in STAT_COLUMNS.len()..header.len() {
                constrained.push(num(k)?);
            }
        }
        let n_chains = chain_ids.len();
        if n_chains == 0 || stats.len() % n_chains != 0 {
            return Err(Error::ShapeMismatch("draws are not a full chains x iterations grid".into()));
        }
        let n_iter = stats.len() / n_chains;
        let step_sizes = (0..n_chains).map(|c| stats[c * n_iter].step_size).collect();
        Ok(PosteriorDraws {
            names,
            n_chains,
            n_iter,
            n_warmup,
            constrained,
            unconstrained_dim: 0,
            unconstrained: Vec::new(),
            stats,
            step_sizes,
            inv_metrics: Vec::new(),
        })
    }

    /// Builds draws directly from constrained values (chain-major rows).
    pub fn from_values(names: Vec<String>, n_chains: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        if n_chains == 0 || !rows.len().is_multiple_of(n_chains) {
            return Err(Error::ShapeMismatch("rows do not split evenly into chains".into()));
        }
        if rows.iter().any(|r| r.len() != names.len()) {
            return Err(Error::ShapeMismatch("row width differs from the name count".into()));
        }
        let n_iter = rows.len() / n_chains;
        let stats = vec![
            IterationStats {
                lp: 0.0,
                accept_stat: 1.0,
                step_size: 1.0,
                tree_depth: 0,
                n_leapfrog: 0,
                divergent: false,
                energy: 0.0,
            };
            rows.len()
        ];
        Ok(PosteriorDraws {
            names,
            n_chains,
            n_iter,
            n_warmup: 0,
            constrained: rows.into_iter().flatten().collect(),
            unconstrained_dim: 0,
            unconstrained: Vec::new(),
            stats,
            step_sizes: vec![1.0; n_chains],
            inv_metrics: Vec::new(),
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        row,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub rhat_threshold: f64,
    /// Largest split-R̂ among parameters where it is defined.
    pub max_rhat: Option<f64>,
    pub worst_parameter: Option<String>,
    pub min_ess: Option<f64>,
    pub divergences: usize,
    pub n_draws: usize,
    pub converged: bool,
}

impl ConvergenceSummary {
    fn from_summaries(
        summaries: &[ParameterSummary],
        threshold: f64,
        draws: &PosteriorDraws,
    ) -> Self {
        let worst = summaries
            .iter()
            .filter_map(|s| s.rhat.map(|r| (r, &s.name)))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let min_ess = summaries
            .iter()
            .filter_map(|s| s.ess)
            .min_by(|a, b| a.total_cmp(b));
        let max_rhat = worst.map(|w| w.0);
        ConvergenceSummary {
            rhat_threshold: threshold,
            max_rhat,
            worst_parameter: worst.map(|w| w.1.clone()),
            min_ess,
            divergences: draws.divergences(),
            n_draws: draws.n_draws(),
            converged: max_rhat.is_none_or(|r| r <= threshold),
        }
    }
}

/// JSON companion of the draws CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_sampling: usize,
    pub step_sizes: Vec<f64>,
    pub divergences_per_chain: Vec<usize>,
    pub mean_tree_depth: f64,
    pub convergence: ConvergenceSummary,
    pub parameters: Vec<ParameterSummary>,
}

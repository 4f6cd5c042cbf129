//! A fitted model: panel, configuration, layout and posterior draws, with
//! on-disk persistence.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::horseshoe::ShockBlock;
use crate::model::{Layout, ModelConfig, ShockModel};
use crate::panel::{load_panel, write_panel, ColumnSchema, SeriesPanel};
use crate::sampler::{run_chains, ConvergenceSummary, PosteriorDraws, SamplerConfig};
use crate::spline::{Coefficients, SplineBasis};

pub const DRAWS_FILE: &str = "draws.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const FIT_FILE: &str = "fit.json";
pub const DATA_FILE: &str = "data.csv";

/// Everything needed to reinterpret a draws file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub format_version: u32,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub layout: Layout,
}

#[derive(Debug, Clone)]
pub struct Fit {
    pub panel: SeriesPanel,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub layout: Layout,
    pub draws: PosteriorDraws,
}

/// Builds the model and runs the sampler. Convergence is not enforced here;
/// see [`Fit::require_converged`].
pub fn fit_model(panel: &SeriesPanel, model: &ModelConfig, sampler: &SamplerConfig) -> Result<Fit> {
    let m = ShockModel::new(panel, model.clone())?;
    let draws = run_chains(&m, sampler, &[])?;
    Ok(Fit {
        panel: panel.clone(),
        model: m.config().clone(),
        sampler: sampler.clone(),
        layout: m.layout().clone(),
        draws,
    })
}

impl Fit {
    pub fn shocks_enabled(&self) -> bool {
        self.layout.shocks
    }

    pub fn basis(&self) -> Result<SplineBasis> {
        let anchor = self
            .model
            .spline
            .knot_anchor
            .or_else(|| self.panel.max_observed())
            .ok_or_else(|| Error::InvalidPanel("panel has no observations".into()))?;
        SplineBasis::new(&self.model.spline, anchor)
    }

    pub fn convergence(&self) -> ConvergenceSummary {
        self.draws.convergence(self.sampler.rhat_threshold)
    }

    pub fn require_converged(&self) -> Result<()> {
        let c = self.convergence();
        if c.converged {
            Ok(())
        } else {
            Err(Error::Unconverged {
                max_rhat: c.max_rhat.unwrap_or(f64::NAN),
                threshold: c.rhat_threshold,
            })
        }
    }

    pub fn n_draws(&self) -> usize {
        self.draws.n_draws()
    }

    pub fn tau_eps(&self, draw: usize) -> f64 {
        self.draws.draw(draw)[self.layout.log_tau_eps_sq()]
    }

    pub fn tau_eps_draws(&self) -> Vec<f64> {
        (0..self.n_draws()).map(|d| self.tau_eps(d)).collect()
    }

    pub fn beta_star(&self, draw: usize, country: usize) -> &[f64] {
        let start = self.layout.beta(country, 0);
        &self.draws.draw(draw)[start..start + self.layout.n_free]
    }

    pub fn coefficients(&self, draw: usize, country: usize) -> Result<Coefficients> {
        Coefficients::from_unconstrained(&self.model.spline, self.beta_star(draw, country))
    }

    /// Global shock parameters `(tau, theta)` of one draw.
    pub fn shock_globals(&self, draw: usize) -> Option<(f64, f64)> {
        let row = self.draws.draw(draw);
        Some((row[self.layout.log_tau()?], row[self.layout.log_theta_sq()?]))
    }

    pub fn delta(&self, draw: usize, cell: usize) -> Option<f64> {
        Some(self.draws.draw(draw)[self.layout.log_z_delta(cell)?])
    }

    pub fn shock_block(&self, draw: usize) -> Option<ShockBlock> {
        let (tau, theta) = self.shock_globals(draw)?;
        let row = self.draws.draw(draw);
        let n = self.layout.n_cells();
        let g0 = self.layout.log_gamma(0)?;
        let d0 = self.layout.log_z_delta(0)?;
        Some(ShockBlock {
            gamma: row[g0..g0 + n].to_vec(),
            delta: row[d0..d0 + n].to_vec(),
            tau,
            theta,
        })
    }

    pub fn metadata(&self) -> FitMetadata {
        FitMetadata {
            format_version: 1,
            model: self.model.clone(),
            sampler: self.sampler.clone(),
            layout: self.layout.clone(),
        }
    }

    /// Writes draws, diagnostics, metadata and the fitted panel into `dir`,
    /// which must exist.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let draws_path = dir.join(DRAWS_FILE);
        let f = File::create(&draws_path).map_err(|e| Error::io(&draws_path, e))?;
        self.draws.write_csv(BufWriter::new(f))?;
        write_json(&dir.join(DIAGNOSTICS_FILE), &self.draws.diagnostics(self.sampler.rhat_threshold))?;
        write_json(&dir.join(FIT_FILE), &self.metadata())?;
        write_panel(&self.panel, dir.join(DATA_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Fit> {
        let meta_path = dir.join(FIT_FILE);
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: FitMetadata = serde_json::from_str(&text)?;
        let panel = load_panel(dir.join(DATA_FILE), &ColumnSchema::default())?;
        let draws_path = dir.join(DRAWS_FILE);
        let f = File::open(&draws_path).map_err(|e| Error::io(&draws_path, e))?;
        let draws = PosteriorDraws::read_csv(std::io::BufReader::new(f), meta.sampler.n_warmup)?;
        let expected = meta.layout.constrained_names();
        if draws.names() != expected.as_slice() {
            return Err(Error::ShapeMismatch(
                "draws columns do not match the stored layout".into(),
            ));
        }
        if panel.countries() != meta.layout.countries.as_slice() {
            return Err(Error::ShapeMismatch(
                "stored panel does not match the stored layout".into(),
            ));
        }
        Ok(Fit {
            panel,
            model: meta.model,
            sampler: meta.sampler,
            layout: meta.layout,
            draws,
        })
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::{simulate_panel, SyntheticSpec};

    fn quick_sampler() -> SamplerConfig {
        SamplerConfig {
            n_chains: 2,
            n_warmup: 100,
            n_sampling: 50,
            seed: 3,
            ..SamplerConfig::default()
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let spec = SyntheticSpec::generate(3, 6, 0.8, 1, (6.0, 8.0), 2).unwrap();
        let (panel, _) = simulate_panel(&spec).unwrap();
        let fit = fit_model(&panel, &ModelConfig::default(), &quick_sampler()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fit.save(dir.path()).unwrap();
        let back = Fit::load(dir.path()).unwrap();
        assert_eq!(back.layout, fit.layout);
        assert_eq!(back.model, fit.model);
        assert_eq!(back.n_draws(), 100);
        for d in 0..back.n_draws() {
            assert_eq!(back.draws.draw(d), fit.draws.draw(d));
        }
        assert_eq!(back.basis().unwrap(), fit.basis().unwrap());
    }

    #[test]
    fn accessors_respect_bounds() {
        let spec = SyntheticSpec::generate(2, 5, 0.8, 1, (6.0, 8.0), 4).unwrap();
        let (panel, _) = simulate_panel(&spec).unwrap();
        let fit = fit_model(&panel, &ModelConfig::default(), &quick_sampler()).unwrap();
        for d in 0..fit.n_draws() {
            assert!(fit.tau_eps(d) > 0.0);
            let b = fit.shock_block(d).unwrap();
            assert!(b.tau > 0.0 && b.theta > 0.0);
            assert!(b.gamma.iter().all(|g| *g > 0.0));
            assert!(b.delta.iter().all(|x| *x >= 0.0));
            let sigma_start = fit.layout.log_sigma(0);
            let row = fit.draws.draw(d);
            assert!(row[sigma_start..sigma_start + fit.layout.n_free].iter().all(|s| *s > 0.0));
        }
    }
}

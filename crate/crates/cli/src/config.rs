//! Run configuration: one JSON document with a section per module.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use shockcast::model::ModelConfig;
use shockcast::panel::ColumnSchema;
use shockcast::projection::{ProjectionConfig, DEFAULT_DETECTION_PROBABILITY};
use shockcast::sampler::SamplerConfig;
use shockcast::validation::ValidationConfig;

use crate::UsageError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub data: ColumnSchema,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub projection: ProjectionConfig,
    pub detection: DetectionConfig,
    pub validation: ValidationConfig,
    pub tuning: TuningConfig,
    pub simulation: SimulationConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    /// Fixed threshold; `None` derives it from the fit.
    pub delta_star: Option<f64>,
    pub probability: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            delta_star: None,
            probability: DEFAULT_DETECTION_PROBABILITY,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TuningConfig {
    pub delta_star: Option<f64>,
    pub grid: Vec<f64>,
    pub n_sims: usize,
    pub seed: u64,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            delta_star: None,
            grid: vec![0.001, 0.01, 0.1],
            n_sims: 1_000_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_countries: usize,
    pub n_periods: usize,
    pub tau_eps: f64,
    pub n_shocks: usize,
    pub shock_min: f64,
    pub shock_max: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_countries: 30,
            n_periods: 14,
            tau_eps: 0.8,
            n_shocks: 3,
            shock_min: 5.0,
            shock_max: 15.0,
            seed: 1,
        }
    }
}

/// Reads a config document. A run manifest is accepted too, in which case its
/// `config` snapshot is used.
pub fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default());
    };
    if !path.is_file() {
        return Err(UsageError(format!("config file not found: {}", path.display())).into());
    }
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("config {} is not valid JSON: {e}", path.display())))?;
    if value.get("command").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    serde_json::from_value(value)
        .map_err(|e| UsageError(format!("config {}: {e}", path.display())).into())
}

pub fn parse_grid(text: &str) -> anyhow::Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| UsageError(format!("bad grid value {s:?}")).into())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_document_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sampler": {"n_chains": 2}, "model": {"horseshoe": {"tau0": 0.1}}}"#)
            .unwrap();
        let cfg = load_config(Some(&p)).unwrap();
        assert_eq!(cfg.sampler.n_chains, 2);
        assert_eq!(cfg.sampler.n_warmup, 500);
        assert_eq!(cfg.model.horseshoe.tau0, 0.1);
        assert!(cfg.model.shocks_enabled());
    }

    #[test]
    fn manifest_snapshot_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, r#"{"command": "fit", "config": {"sampler": {"seed": 9}}}"#).unwrap();
        assert_eq!(load_config(Some(&p)).unwrap().sampler.seed, 9);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_config(Some(Path::new("/nonexistent/x.json"))).unwrap_err();
        assert!(err.downcast_ref::<UsageError>().is_some());
        assert!(err.to_string().contains("/nonexistent/x.json"));
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0.001, 0.01,0.1").unwrap(), vec![0.001, 0.01, 0.1]);
        assert!(parse_grid("").unwrap().is_empty());
        assert!(parse_grid("a").is_err());
    }
}

//! Out-of-sample validation: fit on periods up to a cutoff, project to a
//! held-out target period and score the 80% intervals.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::fit_model;
use crate::model::ModelConfig;
use crate::numeric::{mean, median};
use crate::panel::{Period, SeriesPanel, PERIOD_WIDTH};
use crate::projection::{project, ProjectionConfig, ProjectionMode};
use crate::sampler::SamplerConfig;

pub const OVERALL: &str = "Overall";

pub const REPORT_COLUMNS: [&str; 9] = [
    "model",
    "region",
    "n",
    "me",
    "mae",
    "pct_below",
    "pct_included",
    "pct_above",
    "pi_width",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coverage {
    Below,
    Included,
    Above,
}

/// One held-out prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionCell {
    pub country: String,
    pub region: String,
    pub period: Period,
    pub observed: f64,
    pub lower: f64,
    pub median: f64,
    pub upper: f64,
}

impl PredictionCell {
    /// Observed minus predicted median.
    pub fn error(&self) -> f64 {
        self.observed - self.median
    }

    /// Closed interval: endpoints count as included.
    pub fn coverage(&self) -> Coverage {
        if self.observed < self.lower {
            Coverage::Below
        } else if self.observed > self.upper {
            Coverage::Above
        } else {
            Coverage::Included
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub region: String,
    pub n: usize,
    pub me: f64,
    pub mae: f64,
    pub pct_below: f64,
    pub pct_included: f64,
    pub pct_above: f64,
    /// Median interval width.
    pub pi_width: f64,
    pub pi_width_mean: f64,
}

impl MetricRow {
    pub fn from_cells(region: &str, cells: &[&PredictionCell]) -> Option<Self> {
        if cells.is_empty() {
            return None;
        }
        let n = cells.len();
        let errors: Vec<f64> = cells.iter().map(|c| c.error()).collect();
        let abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        let widths: Vec<f64> = cells.iter().map(|c| c.width()).collect();
        let pct = |k: Coverage| {
            100.0 * cells.iter().filter(|c| c.coverage() == k).count() as f64 / n as f64
        };
        Some(MetricRow {
            region: region.to_string(),
            n,
            me: median(&errors),
            mae: median(&abs),
            pct_below: pct(Coverage::Below),
            pct_included: pct(Coverage::Included),
            pct_above: pct(Coverage::Above),
            pi_width: median(&widths),
            pi_width_mean: mean(&widths),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub model: String,
    pub converged: bool,
    pub max_rhat: Option<f64>,
    pub target: Period,
    /// Target-period predictions used for the metrics.
    pub cells: Vec<PredictionCell>,
    /// Predictions for periods between the cutoff and the target.
    pub intermediate: Vec<PredictionCell>,
    /// Countries without an observation at the target period.
    pub excluded: Vec<String>,
    /// Region rows in name order, then the overall row.
    pub rows: Vec<MetricRow>,
}

impl ValidationReport {
    pub fn from_cells(model: &str, target: Period, cells: Vec<PredictionCell>) -> Self {
        let mut by_region: BTreeMap<&str, Vec<&PredictionCell>> = BTreeMap::new();
        for c in &cells {
            by_region.entry(c.region.as_str()).or_default().push(c);
        }
        let mut rows: Vec<MetricRow> = by_region
            .iter()
            .filter_map(|(r, cs)| MetricRow::from_cells(r, cs))
            .collect();
        let all: Vec<&PredictionCell> = cells.iter().collect();
        rows.extend(MetricRow::from_cells(OVERALL, &all));
        ValidationReport {
            model: model.to_string(),
            converged: true,
            max_rhat: None,
            target,
            cells,
            intermediate: Vec::new(),
            excluded: Vec::new(),
            rows,
        }
    }

    pub fn overall(&self) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.region == OVERALL)
    }

    pub fn region(&self, name: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.region == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationModel {
    pub label: String,
    pub config: ModelConfig,
}

impl ValidationModel {
    /// The shocks / no-shocks pair compared in the standard protocol.
    pub fn standard_pair(base: &ModelConfig) -> Vec<ValidationModel> {
        let mut with = base.clone();
        with.horseshoe.shocks_enabled = true;
        let mut without = base.clone();
        without.horseshoe.shocks_enabled = false;
        vec![
            ValidationModel {
                label: "shocks".into(),
                config: with,
            },
            ValidationModel {
                label: "no shocks".into(),
                config: without,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    /// Last period kept for fitting.
    pub cutoff: Option<Period>,
    pub target: Option<Period>,
    /// Fit models concurrently instead of one after another.
    pub parallel: bool,
    pub seed: u64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        ValidationConfig {
            cutoff: None,
            target: None,
            parallel: false,
            seed: 1,
        }
    }
}

/// Holds out everything after `cutoff`, fits each model, projects to
/// `target` and scores the predictions. Shock models project in with-shock
/// mode, others shock-free.
pub fn validate(
    panel: &SeriesPanel,
    cutoff: Period,
    target: Period,
    models: &[ValidationModel],
    sampler: &SamplerConfig,
    parallel: bool,
    seed: u64,
) -> Result<Vec<ValidationReport>> {
    let (train, test) = panel.holdout_split(cutoff)?;
    let t_idx = test.period_index(target).ok_or(Error::PeriodNotFound(target))?;
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models to validate".into()));
    }
    let run = |m: &ValidationModel| validate_one(&train, &test, t_idx, m, sampler, seed);
    if parallel {
        models.par_iter().map(run).collect()
    } else {
        models.iter().map(run).collect()
    }
}

fn validate_one(
    train: &SeriesPanel,
    test: &SeriesPanel,
    t_idx: usize,
    model: &ValidationModel,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ValidationReport> {
    let target = test.periods()[t_idx];
    let fit = fit_model(train, &model.config, sampler)?;
    let convergence = fit.convergence();
    let last_train = *train.periods().last().expect("non-empty panel");
    let horizon = ((target.start - last_train.start) / PERIOD_WIDTH) as usize
        + (0..train.n_countries())
            .map(|c| train.n_periods() - 1 - train.observed_span(c).unwrap().1)
            .max()
            .unwrap_or(0);
    let mode = if fit.shocks_enabled() {
        ProjectionMode::WithShock
    } else {
        ProjectionMode::ShockFree
    };
    let pcfg = ProjectionConfig {
        horizon,
        probabilities: vec![0.1, 0.5, 0.9],
        seed,
        allow_unconverged: true,
    };
    let fan = project(&fit, &pcfg, &mode)?;

    let mut cells = Vec::new();
    let mut intermediate = Vec::new();
    let mut excluded = Vec::new();
    for (c, code) in train.countries().iter().enumerate() {
        let cf = fan.country(code).expect("fan covers every country");
        let region = train.region(c).to_string();
        let tc = test.country_index(code);
        for (period, q) in cf.periods.iter().zip(&cf.quantiles) {
            if period.start > target.start {
                break;
            }
            let observed = tc
                .and_then(|k| test.period_index(*period).and_then(|t| test.value(k, t)));
            let cell = |observed: f64| PredictionCell {
                country: code.clone(),
                region: region.clone(),
                period: *period,
                observed,
                lower: q[0],
                median: q[1],
                upper: q[2],
            };
            if *period == target {
                match observed {
                    Some(v) => cells.push(cell(v)),
                    None => excluded.push(code.clone()),
                }
            } else {
                intermediate.push(cell(observed.unwrap_or(f64::NAN)));
            }
        }
    }
    let mut report = ValidationReport::from_cells(&model.label, target, cells);
    report.converged = convergence.converged;
    report.max_rhat = convergence.max_rhat;
    report.intermediate = intermediate;
    report.excluded = excluded;
    Ok(report)
}

/// CSV rendering with the fixed column order of [`REPORT_COLUMNS`].
pub fn metric_table_csv(reports: &[ValidationReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Simulation(e.to_string());
    w.write_record(REPORT_COLUMNS).map_err(fail)?;
    for r in reports {
        for row in &r.rows {
            w.write_record([
                r.model.clone(),
                row.region.clone(),
                row.n.to_string(),
                format!("{:.4}", row.me),
                format!("{:.4}", row.mae),
                format!("{:.2}", row.pct_below),
                format!("{:.2}", row.pct_included),
                format!("{:.2}", row.pct_above),
                format!("{:.4}", row.pi_width),
            ])
            .map_err(fail)?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Simulation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Aligned plain-text table; adds the mean interval width as a last column.
pub fn metric_table_text(reports: &[ValidationReport]) -> String {
    let header = [
        "Model", "Region", "n", "ME", "MAE", "% Below", "% Included", "% Above", "PI Width",
        "PI Width (mean)",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in reports {
        for m in &r.rows {
            rows.push(vec![
                r.model.clone(),
                m.region.clone(),
                m.n.to_string(),
                format!("{:.2}", m.me),
                format!("{:.2}", m.mae),
                format!("{:.1}", m.pct_below),
                format!("{:.1}", m.pct_included),
                format!("{:.1}", m.pct_above),
                format!("{:.2}", m.pi_width),
                format!("{:.2}", m.pi_width_mean),
            ]);
        }
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(j, s)| {
                if j < 2 {
                    format!("{s:<w$}", w = widths[j])
                } else {
                    format!("{s:>w$}", w = widths[j])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

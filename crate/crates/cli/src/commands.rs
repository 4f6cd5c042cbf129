use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use shockcast::fit::{fit_model, Fit, DATA_FILE, DRAWS_FILE, FIT_FILE};
use shockcast::horseshoe::prior_predictive_tune;
use shockcast::panel::{load_panel, simulate_panel, write_panel, Period, SyntheticSpec};
use shockcast::projection::{self, detect_shocks, shock_threshold, ProjectionMode, ShockReport};
use shockcast::validation::{self, metric_table_csv, metric_table_text, ValidationModel, ValidationReport};

use crate::config::{load_config, parse_grid, RunConfig};
use crate::manifest::{read_manifest, Recorder};
use crate::svg::{file_stem, Plot};
use crate::{
    Common, DetectArgs, FitArgs, GateError, ModeArg, ProjectArgs, ReportArgs, SimulateArgs, TuneArgs,
    UsageError, ValidateArgs,
};

pub const TUNING_FILE: &str = "tuning.csv";
pub const FAN_FILE: &str = "fan.csv";
pub const SHOCKS_FILE: &str = "shocks.csv";
pub const SHOCKS_JSON: &str = "shocks.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";
pub const VALIDATION_JSON: &str = "validation.json";
pub const PANEL_FILE: &str = "panel.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const PLOTS_DIR: &str = "plots";

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} not found: {}", path.display())))
    }
}

/// Creates `out`, refusing to touch an existing non-empty directory unless
/// `force` is set. `inputs` may not live inside `out`.
fn prepare_out(out: &Path, force: bool, inputs: &[&Path]) -> Result<()> {
    if out.exists() {
        let occupied = !out.is_dir()
            || std::fs::read_dir(out)
                .with_context(|| format!("listing {}", out.display()))?
                .next()
                .is_some();
        if occupied {
            if !force {
                return Err(usage(format!(
                    "output {} already exists; pass --force to replace it",
                    out.display()
                )));
            }
            let target = out.canonicalize()?;
            for input in inputs {
                if let Ok(p) = input.canonicalize() {
                    if p.starts_with(&target) {
                        return Err(usage(format!(
                            "refusing to replace {}: it contains input {}",
                            out.display(),
                            input.display()
                        )));
                    }
                }
            }
            if out.is_dir() {
                std::fs::remove_dir_all(out)
            } else {
                std::fs::remove_file(out)
            }
            .with_context(|| format!("removing {}", out.display()))?;
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn record_config(rec: &mut Recorder, common: &Common) -> Result<()> {
    if let Some(p) = &common.config {
        rec.input(p)?;
    }
    Ok(())
}

fn record_fit_dir(rec: &mut Recorder, dir: &Path) -> Result<()> {
    for name in [FIT_FILE, DRAWS_FILE, DATA_FILE] {
        rec.input(&dir.join(name))?;
    }
    Ok(())
}

fn load_fit(dir: &Path) -> Result<Fit> {
    require_file(&dir.join(FIT_FILE), "fit metadata")?;
    Fit::load(dir).with_context(|| format!("loading fit from {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn apply_sampler_overrides(
    cfg: &mut RunConfig,
    chains: Option<usize>,
    warmup: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
) {
    if let Some(n) = chains {
        cfg.sampler.n_chains = n;
    }
    if let Some(n) = warmup {
        cfg.sampler.n_warmup = n;
    }
    if let Some(n) = samples {
        cfg.sampler.n_sampling = n;
    }
    if let Some(s) = seed {
        cfg.sampler.seed = s;
    }
}

pub fn fit(a: FitArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    apply_sampler_overrides(&mut cfg, a.chains, a.warmup, a.samples, a.common.seed);
    if a.no_shocks {
        cfg.model.horseshoe.shocks_enabled = false;
    }
    if let Some(t) = a.tau0 {
        cfg.model.horseshoe.tau0 = t;
    }
    cfg.model.validate()?;
    cfg.sampler.validate()?;
    require_file(&a.data, "data file")?;
    let panel = load_panel(&a.data, &cfg.data)?;
    prepare_out(&a.common.out, a.common.force, &[&a.data])?;

    let mut rec = Recorder::start("fit");
    rec.input(&a.data)?;
    record_config(&mut rec, &a.common)?;
    let fit = fit_model(&panel, &cfg.model, &cfg.sampler)?;
    fit.save(&a.common.out)?;
    let conv = fit.convergence();
    rec.finish(&a.common.out, cfg.sampler.seed, &cfg, Some(serde_json::to_value(&conv)?))?;

    println!(
        "fit {} countries, {} draws: max split-R-hat {}, divergences {}, converged {}",
        panel.n_countries(),
        fit.n_draws(),
        conv.max_rhat.map_or("n/a".into(), |r| format!("{r:.4}")),
        conv.divergences,
        conv.converged
    );
    if !conv.converged && !a.allow_unconverged {
        return Err(GateError(format!(
            "fit did not pass the convergence gate (R-hat threshold {}); outputs kept in {}; rerun with --allow-unconverged to accept",
            conv.rhat_threshold,
            a.common.out.display()
        ))
        .into());
    }
    Ok(())
}

pub fn tune_prior(a: TuneArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(g) = &a.grid {
        cfg.tuning.grid = parse_grid(g)?;
    }
    if cfg.tuning.grid.is_empty() {
        return Err(usage("the tau0 grid is empty"));
    }
    if let Some(n) = a.n_sims {
        cfg.tuning.n_sims = n;
    }
    if let Some(s) = a.common.seed {
        cfg.tuning.seed = s;
    }
    let mut rec = Recorder::start("tune-prior");
    record_config(&mut rec, &a.common)?;
    let delta_star = match (a.delta_star, &a.from_fit) {
        (Some(d), _) => d,
        (None, Some(dir)) => {
            let fit = load_fit(dir)?;
            record_fit_dir(&mut rec, dir)?;
            shock_threshold(&fit.draws)?
        }
        (None, None) => cfg
            .tuning
            .delta_star
            .ok_or_else(|| usage("tune-prior needs --delta-star or --from-fit"))?,
    };
    cfg.tuning.delta_star = Some(delta_star);
    let mut protected: Vec<&Path> = Vec::new();
    if let Some(d) = &a.from_fit {
        protected.push(d);
    }
    prepare_out(&a.common.out, a.common.force, &protected)?;

    let rows = prior_predictive_tune(
        &cfg.tuning.grid,
        &cfg.model.horseshoe,
        delta_star,
        cfg.tuning.n_sims,
        cfg.tuning.seed,
    )?;
    let mut text = String::from("tau0,delta_star,estimate,mc_se\n");
    for r in &rows {
        text.push_str(&format!("{},{},{},{}\n", r.tau0, delta_star, r.estimate, r.mc_se));
    }
    let path = a.common.out.join(TUNING_FILE);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    rec.finish(&a.common.out, cfg.tuning.seed, &cfg, None)?;

    println!("delta* = {delta_star}");
    for r in &rows {
        println!(
            "tau0 {:<8} P(delta > delta*) = {:.4}% (mc se {:.4}%)",
            r.tau0,
            100.0 * r.estimate,
            100.0 * r.mc_se
        );
    }
    Ok(())
}

fn observed_points(fit: &Fit, c: usize) -> Vec<(f64, f64)> {
    fit.panel
        .periods()
        .iter()
        .enumerate()
        .filter_map(|(t, p)| fit.panel.value(c, t).map(|v| (p.start as f64, v)))
        .collect()
}

fn write_plots(out: &Path, plots: Vec<(String, Plot)>) -> Result<()> {
    let dir = out.join(PLOTS_DIR);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (code, plot) in plots {
        let path = dir.join(format!("{}.svg", file_stem(&code)));
        std::fs::write(&path, plot.render()).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn project(a: ProjectArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(h) = a.horizon {
        cfg.projection.horizon = h;
    }
    if let Some(s) = a.common.seed {
        cfg.projection.seed = s;
    }
    cfg.projection.allow_unconverged |= a.allow_unconverged;
    let fit = load_fit(&a.fit)?;
    let mode = match a.mode {
        ModeArg::WithShock => ProjectionMode::WithShock,
        ModeArg::ShockFree => ProjectionMode::ShockFree,
        ModeArg::Crisis => ProjectionMode::Crisis {
            country: a.crisis_country.clone().unwrap_or_default(),
            period: a.crisis_period.as_deref().unwrap_or_default().parse::<Period>()?,
            gamma: a.crisis_gamma.unwrap_or_default(),
        },
    };
    if !matches!(mode, ProjectionMode::ShockFree) && !fit.shocks_enabled() {
        return Err(usage(format!(
            "mode {} needs a fit with shock terms; {} was fit without them",
            mode.label(),
            a.fit.display()
        )));
    }
    if !cfg.projection.allow_unconverged {
        fit.require_converged()?;
    }
    prepare_out(&a.common.out, a.common.force, &[&a.fit])?;
    let mut rec = Recorder::start("project");
    record_fit_dir(&mut rec, &a.fit)?;
    record_config(&mut rec, &a.common)?;

    let fan = projection::project(&fit, &cfg.projection, &mode)?;
    fan.write_csv(create(&a.common.out.join(FAN_FILE))?)?;
    let probs = &fan.probabilities;
    let mid = probs
        .iter()
        .position(|p| (p - 0.5).abs() < 1e-12)
        .unwrap_or(probs.len() / 2);
    let last = probs.len() - 1;
    let plots = fan
        .countries
        .iter()
        .enumerate()
        .map(|(c, cf)| {
            let xs = cf.periods.iter().map(|p| p.start as f64);
            let plot = Plot {
                title: format!("{} ({})", cf.country, fan.mode),
                points: observed_points(&fit, c),
                line: xs.clone().zip(&cf.quantiles).map(|(x, q)| (x, q[mid])).collect(),
                band: xs.zip(&cf.quantiles).map(|(x, q)| (x, q[0], q[last])).collect(),
            };
            (cf.country.clone(), plot)
        })
        .collect();
    write_plots(&a.common.out, plots)?;
    rec.finish(&a.common.out, cfg.projection.seed, &cfg, None)?;
    println!(
        "projected {} countries {} periods ahead ({}, {} draws)",
        fan.countries.len(),
        cfg.projection.horizon,
        fan.mode,
        fan.n_draws
    );
    Ok(())
}

fn shock_plots(fit: &Fit, report: &ShockReport) -> Vec<(String, Plot)> {
    fit.panel
        .countries()
        .iter()
        .enumerate()
        .map(|(c, code)| {
            let cells: Vec<_> = report.cells.iter().filter(|s| &s.country == code).collect();
            let plot = Plot {
                title: format!("{code} (shock-corrected)"),
                points: observed_points(fit, c),
                line: cells.iter().map(|s| (s.period.start as f64, s.corrected)).collect(),
                band: cells
                    .iter()
                    .map(|s| {
                        (
                            s.period.start as f64,
                            s.observed + s.delta_lower,
                            s.observed + s.delta_upper,
                        )
                    })
                    .collect(),
            };
            (code.clone(), plot)
        })
        .collect()
}

pub fn detect(a: DetectArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(p) = a.probability {
        cfg.detection.probability = p;
    }
    let fit = load_fit(&a.fit)?;
    if !fit.shocks_enabled() {
        return Err(usage(format!(
            "detect needs a fit with shock terms; {} was fit without them",
            a.fit.display()
        )));
    }
    let delta_star = match a.delta_star.or(cfg.detection.delta_star) {
        Some(d) => d,
        None => shock_threshold(&fit.draws)?,
    };
    cfg.detection.delta_star = Some(delta_star);
    if !fit.convergence().converged {
        eprintln!("warning: fit in {} did not pass the convergence gate", a.fit.display());
    }
    prepare_out(&a.common.out, a.common.force, &[&a.fit])?;
    let mut rec = Recorder::start("detect");
    record_fit_dir(&mut rec, &a.fit)?;
    record_config(&mut rec, &a.common)?;

    let report = detect_shocks(&fit, delta_star, cfg.detection.probability)?;
    report.write_csv(create(&a.common.out.join(SHOCKS_FILE))?)?;
    write_json(&a.common.out.join(SHOCKS_JSON), &report)?;
    write_plots(&a.common.out, shock_plots(&fit, &report))?;
    rec.finish(&a.common.out, fit.sampler.seed, &cfg, None)?;

    let flagged: Vec<_> = report.flagged().collect();
    println!(
        "delta* = {delta_star:.4}; {} of {} cells flagged at P > {}",
        flagged.len(),
        report.cells.len(),
        cfg.detection.probability
    );
    for s in flagged {
        println!(
            "  {} {}: median delta {:.2} [{:.2}, {:.2}], P = {:.3}",
            s.country, s.period, s.delta_median, s.delta_lower, s.delta_upper, s.exceedance
        );
    }
    Ok(())
}

pub fn validate(a: ValidateArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    apply_sampler_overrides(&mut cfg, a.chains, a.warmup, a.samples, a.common.seed);
    if let Some(s) = a.common.seed {
        cfg.validation.seed = s;
    }
    if let Some(c) = &a.cutoff {
        cfg.validation.cutoff = Some(c.parse()?);
    }
    if let Some(t) = &a.target {
        cfg.validation.target = Some(t.parse()?);
    }
    cfg.validation.parallel |= a.parallel;
    let cutoff = cfg.validation.cutoff.ok_or_else(|| usage("validate needs --cutoff"))?;
    let target = cfg.validation.target.ok_or_else(|| usage("validate needs --target"))?;
    cfg.model.validate()?;
    cfg.sampler.validate()?;
    require_file(&a.data, "data file")?;
    let panel = load_panel(&a.data, &cfg.data)?;
    prepare_out(&a.common.out, a.common.force, &[&a.data])?;
    let mut rec = Recorder::start("validate");
    rec.input(&a.data)?;
    record_config(&mut rec, &a.common)?;

    let models = ValidationModel::standard_pair(&cfg.model);
    let reports = validation::validate(
        &panel,
        cutoff,
        target,
        &models,
        &cfg.sampler,
        cfg.validation.parallel,
        cfg.validation.seed,
    )?;
    std::fs::write(a.common.out.join(REPORT_CSV), metric_table_csv(&reports)?)?;
    let table = metric_table_text(&reports);
    std::fs::write(a.common.out.join(REPORT_TXT), &table)?;
    write_json(&a.common.out.join(VALIDATION_JSON), &reports)?;
    let convergence: Vec<_> = reports
        .iter()
        .map(|r| serde_json::json!({"model": r.model, "converged": r.converged, "max_rhat": r.max_rhat}))
        .collect();
    rec.finish(
        &a.common.out,
        cfg.validation.seed,
        &cfg,
        Some(serde_json::Value::Array(convergence)),
    )?;
    print!("{table}");

    let failed: Vec<&str> = reports.iter().filter(|r| !r.converged).map(|r| r.model.as_str()).collect();
    if !failed.is_empty() && !a.allow_unconverged {
        return Err(GateError(format!(
            "models failed the convergence gate: {}; outputs kept in {}",
            failed.join(", "),
            a.common.out.display()
        ))
        .into());
    }
    Ok(())
}

pub fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = load_config(a.common.config.as_deref())?;
    let s = &mut cfg.simulation;
    if let Some(n) = a.countries {
        s.n_countries = n;
    }
    if let Some(n) = a.periods {
        s.n_periods = n;
    }
    if let Some(t) = a.tau_eps {
        s.tau_eps = t;
    }
    if let Some(n) = a.shocks {
        s.n_shocks = n;
    }
    if let Some(seed) = a.common.seed {
        s.seed = seed;
    }
    let s = cfg.simulation.clone();
    let spec = SyntheticSpec::generate(
        s.n_countries,
        s.n_periods,
        s.tau_eps,
        s.n_shocks,
        (s.shock_min, s.shock_max),
        s.seed,
    )?;
    let (panel, truth) = simulate_panel(&spec)?;
    prepare_out(&a.common.out, a.common.force, &[])?;
    let mut rec = Recorder::start("simulate");
    record_config(&mut rec, &a.common)?;
    write_panel(&panel, a.common.out.join(PANEL_FILE))?;
    write_json(&a.common.out.join(TRUTH_FILE), &truth)?;
    rec.finish(&a.common.out, s.seed, &cfg, None)?;
    println!(
        "simulated {} countries x {} periods with {} shocks",
        panel.n_countries(),
        panel.n_periods(),
        truth.shocks.len()
    );
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let dir: PathBuf = a.run;
    if !dir.join(crate::manifest::MANIFEST_FILE).is_file() {
        return Err(usage(format!("no run manifest in {}", dir.display())));
    }
    let m = read_manifest(&dir)?;
    println!(
        "{} run, shockcast {}, seed {}, {:.1}s",
        m.command, m.version, m.seed, m.elapsed_seconds
    );
    for f in &m.inputs {
        println!("  input {} sha256 {}", f.path, f.sha256);
    }
    match m.command.as_str() {
        "fit" => {
            let fit = load_fit(&dir)?;
            let c = fit.convergence();
            println!(
                "  draws {}, max split-R-hat {}, worst {}, min ESS {}, divergences {}, converged {}",
                c.n_draws,
                c.max_rhat.map_or("n/a".into(), |r| format!("{r:.4}")),
                c.worst_parameter.as_deref().unwrap_or("n/a"),
                c.min_ess.map_or("n/a".into(), |e| format!("{e:.0}")),
                c.divergences,
                c.converged
            );
            println!("  {:<14} {:>9} {:>9} {:>9} {:>9} {:>8}", "parameter", "q05", "median", "q95", "R-hat", "ESS");
            for s in fit.draws.summaries().iter().filter(|s| {
                !s.name.starts_with("beta_star") && !s.name.starts_with("gamma") && !s.name.starts_with("delta")
            }) {
                println!(
                    "  {:<14} {:>9.4} {:>9.4} {:>9.4} {:>9} {:>8}",
                    s.name,
                    s.q05,
                    s.q50,
                    s.q95,
                    s.rhat.map_or("n/a".into(), |r| format!("{r:.4}")),
                    s.ess.map_or("n/a".into(), |e| format!("{e:.0}"))
                );
            }
        }
        "validate" => {
            let text = std::fs::read_to_string(dir.join(VALIDATION_JSON))?;
            let reports: Vec<ValidationReport> = serde_json::from_str(&text)?;
            print!("{}", metric_table_text(&reports));
        }
        "detect" => {
            let text = std::fs::read_to_string(dir.join(SHOCKS_JSON))?;
            let report: ShockReport = serde_json::from_str(&text)?;
            println!(
                "  delta* {:.4}, threshold {}, {} flagged of {}",
                report.delta_star,
                report.probability_threshold,
                report.flagged().count(),
                report.cells.len()
            );
            for s in report.flagged() {
                println!("  {} {}: median delta {:.2}, P = {:.3}", s.country, s.period, s.delta_median, s.exceedance);
            }
        }
        "tune-prior" => print!("{}", std::fs::read_to_string(dir.join(TUNING_FILE))?),
        _ => {
            for f in &m.outputs {
                println!("  output {} sha256 {}", f.path, f.sha256);
            }
        }
    }
    Ok(())
}

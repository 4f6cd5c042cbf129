use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shockcast"));
    cmd.env_remove("SHOCKCAST_THREADS");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn shockcast")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(p: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(p).unwrap()))
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Small synthetic panel plus a short-run sampler config.
    fn setup(&self, countries: usize) -> (PathBuf, PathBuf) {
        let sim = self.path("sim");
        let n = countries.to_string();
        let out = run(&["simulate", "--out", s(&sim), "--countries", &n, "--periods", "8", "--seed", "3"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let cfg = self.path("config.json");
        std::fs::write(
            &cfg,
            r#"{"sampler": {"n_chains": 2, "n_warmup": 150, "n_sampling": 150, "rhat_threshold": 1.5}}"#,
        )
        .unwrap();
        (sim.join("panel.csv"), cfg)
    }
}

#[test]
fn simulate_writes_panel_and_truth() {
    let ws = Workspace::new();
    let (panel, _) = ws.setup(4);
    let text = std::fs::read_to_string(&panel).unwrap();
    assert!(text.starts_with("country_code,"));
    assert_eq!(text.lines().count(), 1 + 4 * 8);
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path("sim/truth.json")).unwrap()).unwrap();
    assert_eq!(truth["shocks"].as_array().unwrap().len(), 3);
    assert!(ws.path("sim/manifest.json").is_file());
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let ws = Workspace::new();
    let (panel, _) = ws.setup(3);
    let missing = ws.path("nope/model.json");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&missing), "--out", s(&ws.path("r"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(s(&missing)));
    assert!(!ws.path("r").exists());
}

#[test]
fn fit_detect_project_report_pipeline() {
    let ws = Workspace::new();
    let (panel, cfg) = ws.setup(4);
    let run1 = ws.path("run1");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&run1), "--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["draws.csv", "diagnostics.json", "fit.json", "data.csv", "manifest.json"] {
        assert!(run1.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run1.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["sampler"]["seed"], 7);
    assert_eq!(manifest["config"]["sampler"]["n_chains"], 2);
    assert_eq!(manifest["inputs"][0]["sha256"], digest(&panel));
    assert!(manifest["convergence"]["max_rhat"].is_number());

    // refuses to overwrite
    let again = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&run1)]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));

    let det = ws.path("det");
    let out = run(&["detect", "--fit", s(&run1), "--out", s(&det)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let shocks = std::fs::read_to_string(det.join("shocks.csv")).unwrap();
    assert!(shocks.starts_with(
        "country,period,observed,delta_median,delta_lower,delta_upper,exceedance,flagged,corrected\n"
    ));
    assert_eq!(shocks.lines().count(), 1 + 4 * 7);
    assert_eq!(std::fs::read_dir(det.join("plots")).unwrap().count(), 4);

    let proj = ws.path("proj");
    let out = run(&[
        "project", "--fit", s(&run1), "--horizon", "16", "--mode", "shock-free", "--out", s(&proj),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let fan = std::fs::read_to_string(proj.join("fan.csv")).unwrap();
    let mut lines = fan.lines();
    assert_eq!(lines.next().unwrap(), "country,period,mode,n_draws,q10,q50,q90");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 16);
    assert!(rows.iter().all(|r| r.contains(",shock-free,300,")));
    let svg = std::fs::read_to_string(proj.join("plots/C001.svg")).unwrap();
    assert!(svg.contains("<polyline") && svg.contains("<circle"));

    let rep = run(&["report", "--run", s(&run1)]);
    assert_eq!(code(&rep), 0, "{}", stderr(&rep));
    assert!(String::from_utf8_lossy(&rep.stdout).contains("tau_eps"));
}

#[test]
fn manifest_replay_reproduces_outputs() {
    let ws = Workspace::new();
    let (panel, cfg) = ws.setup(3);
    let a = ws.path("a");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&a), "--seed", "11"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let b = ws.path("b");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&a.join("manifest.json")), "--out", s(&b)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["draws.csv", "diagnostics.json", "fit.json", "data.csv"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f} differs");
    }
    // --force replaces the directory and keeps results identical
    let out = run(&[
        "fit", "--data", s(&panel), "--config", s(&a.join("manifest.json")), "--out", s(&b), "--force",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(digest(&a.join("draws.csv")), digest(&b.join("draws.csv")));
}

#[test]
fn no_shocks_fit_and_mode_conflicts() {
    let ws = Workspace::new();
    let (panel, cfg) = ws.setup(3);
    let run0 = ws.path("run0");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&run0), "--no-shocks"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let header = std::fs::read_to_string(run0.join("draws.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.contains("tau_eps"));
    assert!(!header.contains(",tau,") && !header.contains("delta["));

    let out = run(&["detect", "--fit", s(&run0), "--out", s(&ws.path("d"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("shock terms"));

    let out = run(&["project", "--fit", s(&run0), "--mode", "with-shock", "--out", s(&ws.path("p"))]);
    assert_eq!(code(&out), 2);

    // threshold from the no-shocks fit
    let tune = ws.path("tune");
    let out = run(&[
        "tune-prior", "--from-fit", s(&run0), "--grid", "0.001,0.01,0.1", "--n-sims", "100000", "--out", s(&tune),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(tune.join("tuning.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tune.join("manifest.json")).unwrap()).unwrap();
    let ds = manifest["config"]["tuning"]["delta_star"].as_f64().unwrap();
    let row: Vec<&str> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), ds);
    assert!(ds > 0.0);
}

#[test]
fn tune_prior_table_and_errors() {
    let ws = Workspace::new();
    let t = ws.path("t");
    let out = run(&[
        "tune-prior", "--delta-star", "1.64", "--grid", "0.001,0.01,0.1", "--n-sims", "100000", "--out", s(&t),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(t.join("tuning.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "tau0,delta_star,estimate,mc_se");
    assert_eq!(lines.len(), 4);
    let est: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(est.windows(2).all(|w| w[0] < w[1]));

    let out = run(&["tune-prior", "--delta-star", "1.64", "--grid", "", "--out", s(&ws.path("e"))]);
    assert_eq!(code(&out), 2);
    let out = run(&["tune-prior", "--grid", "0.01", "--out", s(&ws.path("n"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--delta-star"));
}

#[test]
fn convergence_gate_exits_3_unless_allowed() {
    let ws = Workspace::new();
    let (panel, _) = ws.setup(4);
    let cfg = ws.path("strict.json");
    std::fs::write(
        &cfg,
        r#"{"sampler": {"n_chains": 2, "n_warmup": 20, "n_sampling": 10, "rhat_threshold": 1.0001}}"#,
    )
    .unwrap();
    let g = ws.path("g");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&g)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(g.join("draws.csv").is_file());

    let p = ws.path("p");
    let out = run(&["project", "--fit", s(&g), "--out", s(&p)]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    let out = run(&["project", "--fit", s(&g), "--out", s(&p), "--allow-unconverged", "--horizon", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let ok = ws.path("ok");
    let out = run(&["fit", "--data", s(&panel), "--config", s(&cfg), "--out", s(&ok), "--allow-unconverged"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn validate_writes_report() {
    let ws = Workspace::new();
    let (panel, cfg) = ws.setup(6);
    let v = ws.path("v");
    let out = run(&[
        "validate", "--data", s(&panel), "--config", s(&cfg), "--cutoff", "1975-1980", "--target", "1985-1990",
        "--out", s(&v), "--allow-unconverged",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(v.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,region,n,me,mae,pct_below,pct_included,pct_above,pi_width"
    );
    let rows: Vec<&str> = lines.collect();
    assert!(rows.iter().any(|r| r.starts_with("shocks,Overall,6,")));
    assert!(rows.iter().any(|r| r.starts_with("no shocks,Overall,6,")));
    assert!(v.join("report.txt").is_file() && v.join("validation.json").is_file());

    let out = run(&["validate", "--data", s(&panel), "--target", "1985-1990", "--out", s(&ws.path("w"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn bad_thread_setting_is_a_usage_error() {
    let ws = Workspace::new();
    let out = bin()
        .env("SHOCKCAST_THREADS", "zero")
        .args(["simulate", "--out", s(&ws.path("x"))])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = bin()
        .env("SHOCKCAST_THREADS", "1")
        .args(["simulate", "--out", s(&ws.path("y")), "--countries", "2"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

//! Command-line front end: simulate trials, fit the joint estimator, build
//! sequential designs, measure operating characteristics, search sample
//! sizes, tabulate the large-sample curvature product, and run the numeric
//! verification battery.
//!
//! Exit codes: 0 success, 1 invalid input or configuration, 2 numerical
//! failure, 3 verification failure.  Files written under `--out` embed the
//! configuration hash and master seed; reruns with the same inputs are
//! byte-identical.  Stdout carries human progress only.

use clap::{Args, Parser, Subcommand};
use jmgst::config::RunConfig;
use jmgst::cscore::{eta_covariance, fit_analysis};
use jmgst::harness::{
    operating_characteristics, plan_design, run_manifest, sample_size_search, curvature_table,
    AnalysisMethod, PlannedDesign,
};
use jmgst::sim::{draw_trial, read_trial_csv, snapshot, write_trial_csv};
use jmgst::verify;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug)]
enum CliError {
    Validation(String),
    Numeric(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) | CliError::Verification(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliError {
    CliError::Validation(e.to_string())
}

fn numeric(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "jmgst",
    about = "Group-sequential joint longitudinal/survival trial toolkit",
    version
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults to the built-in reference setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicate loops.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Replicate-count override.
    #[arg(long, global = true)]
    replicates: Option<usize>,
    /// Run Monte Carlo tables at full scale (10000 replicates).
    #[arg(long, global = true)]
    paper_scale: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw one trial and write it as patients.csv + visits.csv.
    Simulate,
    /// Fit the joint estimator on a stored trial at analyses 1..=K.
    Fit {
        /// Directory holding patients.csv and visits.csv.
        #[arg(long)]
        trial: PathBuf,
        /// Analysis to fit through (1-based).
        #[arg(long)]
        analysis: usize,
    },
    /// Build the planned sequential design and write its boundaries.
    Design,
    /// Estimate rejection, failure and stopping behaviour by simulation.
    Oc {
        /// Methods to evaluate (cscore-m1, cscore-m2, cscore-m3, cox).
        #[arg(long, value_delimiter = ',', default_value = "cscore-m1,cscore-m2,cscore-m3,cox")]
        methods: Vec<String>,
    },
    /// Bisect for the smallest n meeting a power target.
    Samplesize {
        /// Method whose power drives the search (cscore-m1 or cox).
        #[arg(long, default_value = "cscore-m1")]
        method: String,
        /// Power target; defaults to 1 - beta from the configuration.
        #[arg(long)]
        target: Option<f64>,
        /// Lower end of the n bracket.
        #[arg(long, default_value_t = 120)]
        lo: usize,
        /// Upper end of the n bracket.
        #[arg(long, default_value_t = 1500)]
        hi: usize,
    },
    /// Large-sample curvature table over the gamma x sigma_sq grid.
    Table,
    /// Run the verification battery (inequality grids, derivative and
    /// identity checks); exits 3 on any failure.
    Verify,
}

fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).map_err(validation)?,
        None => RunConfig::reference(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(reps) = common.replicates {
        cfg.replicates = reps;
    } else if common.paper_scale {
        cfg.replicates = 10_000;
    }
    cfg.validate().map_err(validation)?;
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(validation)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).map_err(validation)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Shortest decimal form that round-trips, with explicit infinities.
fn fmt_num(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".into()
    } else if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x}")
    }
}

fn artifact_header(cfg: &RunConfig) -> String {
    format!("# config_sha256={} seed={}\n", cfg.content_hash(), cfg.seed)
}

fn parse_methods(names: &[String]) -> Result<Vec<AnalysisMethod>, CliError> {
    let mut out = Vec::new();
    for n in names {
        let m = AnalysisMethod::parse(n).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown method {n:?}; expected cscore-m1, cscore-m2, cscore-m3 or cox"
            ))
        })?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("no methods requested".into()));
    }
    Ok(out)
}

fn boundaries_csv(cfg: &RunConfig, plan: &PlannedDesign) -> String {
    let mut s = artifact_header(cfg);
    s.push_str("k,info,lower,upper,spent_alpha,spent_beta\n");
    for k in 0..plan.info.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            k + 1,
            fmt_num(plan.info[k]),
            fmt_num(plan.lower[k]),
            fmt_num(plan.upper[k]),
            fmt_num(plan.alpha_cum[k]),
            fmt_num(plan.beta_cum[k]),
        );
    }
    s
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    ensure_out(out)?;
    let mut rng = ChaCha12Rng::seed_from_u64(jmgst::harness::derive_seed(cfg.seed, 0));
    let trial = draw_trial(&cfg.model, &cfg.design, cfg.n_patients, &mut rng);
    write_trial_csv(&trial, out, &cfg.content_hash(), cfg.seed).map_err(validation)?;
    println!(
        "simulated {} patients into {} (trial stream 0 of seed {})",
        cfg.n_patients,
        out.display(),
        cfg.seed
    );
    Ok(())
}

fn cmd_fit(cfg: &RunConfig, out: &Path, trial_dir: &Path, analysis: usize) -> Result<(), CliError> {
    let kk = cfg.design.k();
    if analysis == 0 || analysis > kk {
        return Err(CliError::Validation(format!(
            "analysis {analysis} out of range: the design has {kk} analyses"
        )));
    }
    let trial = read_trial_csv(trial_dir).map_err(validation)?;
    if trial.patients.is_empty() {
        return Err(CliError::Validation("trial holds no patients".into()));
    }
    let mut fits = Vec::with_capacity(analysis);
    for k in 0..analysis {
        let snap = snapshot(&trial, &cfg.design, k);
        fits.push(fit_analysis(&trial, &snap).map_err(numeric)?);
    }
    let cov = eta_covariance(&fits).map_err(numeric)?;
    let z: Vec<f64> = fits
        .iter()
        .enumerate()
        .map(|(k, f)| -f.eta / cov[k][k].sqrt())
        .collect();
    ensure_out(out)?;
    let mut doc = run_manifest(cfg, "fit");
    doc["analysis"] = analysis.into();
    doc["fits"] = serde_json::to_value(&fits).expect("serializable");
    doc["eta_covariance"] = serde_json::to_value(&cov).expect("serializable");
    doc["z"] = serde_json::to_value(&z).expect("serializable");
    write_json(&out.join("fit.json"), &doc)?;
    let last = fits.last().unwrap();
    println!(
        "analysis {analysis}: gamma {:.5} eta {:.5} sigma_sq {:.5} events {} z {:.4}",
        last.gamma,
        last.eta,
        last.sigma_sq,
        last.n_events,
        z[analysis - 1]
    );
    Ok(())
}

fn cmd_design(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let plan = plan_design(cfg, true).map_err(numeric)?;
    ensure_out(out)?;
    std::fs::write(out.join("boundaries.csv"), boundaries_csv(cfg, &plan)).map_err(validation)?;
    println!("wrote {}", out.join("boundaries.csv").display());
    let mut doc = run_manifest(cfg, "design");
    doc["design"] = serde_json::to_value(&plan).expect("serializable");
    write_json(&out.join("design.json"), &doc)?;
    println!(
        "planned {} analyses, i_max {:.4}, first/last upper bounds {:.5}/{:.5}",
        plan.info.len(),
        plan.i_max,
        plan.upper.first().unwrap(),
        plan.upper.last().unwrap()
    );
    Ok(())
}

fn cmd_oc(cfg: &RunConfig, out: &Path, jobs: usize, methods: &[String]) -> Result<(), CliError> {
    let methods = parse_methods(methods)?;
    let started = Instant::now();
    let plan = plan_design(cfg, true).map_err(numeric)?;
    let plan_cox = if methods.contains(&AnalysisMethod::Cox) {
        Some(plan_design(cfg, false).map_err(numeric)?)
    } else {
        None
    };
    println!(
        "plan ready ({:.1}s); running {} replicates on {} thread(s)",
        started.elapsed().as_secs_f64(),
        cfg.replicates,
        jobs.max(1)
    );
    let report = operating_characteristics(cfg, &methods, &plan, plan_cox.as_ref(), jobs);
    ensure_out(out)?;
    let mut csv = artifact_header(cfg);
    csv.push_str(
        "method,scenario,replicates,evaluated,rejection_rate,rejection_se,failure_rate,expected_sample_size\n",
    );
    let scenario = format!(
        "gamma={};sigma_sq={};eta={};n={}",
        fmt_num(cfg.model.gamma),
        fmt_num(cfg.model.sigma_sq),
        fmt_num(cfg.model.eta),
        cfg.n_patients
    );
    for t in &report.methods {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            t.method.label(),
            scenario,
            report.replicates,
            t.evaluated,
            fmt_num(t.rejection_rate()),
            fmt_num(t.rejection_se()),
            fmt_num(t.failure_rate()),
            fmt_num(t.expected_sample_size()),
        );
        println!(
            "{}: reject {:.4} (se {:.4}), failures {:.2}%, E[n] {:.1}",
            t.method.label(),
            t.rejection_rate(),
            t.rejection_se(),
            100.0 * t.failure_rate(),
            t.expected_sample_size()
        );
    }
    std::fs::write(out.join("oc.csv"), csv).map_err(validation)?;
    println!("wrote {}", out.join("oc.csv").display());
    let mut doc = run_manifest(cfg, "oc");
    doc["report"] = serde_json::to_value(&report).expect("serializable");
    doc["planned_design"] = serde_json::to_value(&plan).expect("serializable");
    if let Some(pc) = &plan_cox {
        doc["planned_design_cox"] = serde_json::to_value(pc).expect("serializable");
    }
    write_json(&out.join("oc.json"), &doc)?;
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_samplesize(
    cfg: &RunConfig,
    out: &Path,
    jobs: usize,
    method: &str,
    target: Option<f64>,
    bracket: (usize, usize),
) -> Result<(), CliError> {
    let method = AnalysisMethod::parse(method)
        .ok_or_else(|| CliError::Validation(format!("unknown method {method:?}")))?;
    let target = target.unwrap_or(1.0 - cfg.design.beta);
    if !(0.0 < target && target < 1.0) {
        return Err(CliError::Validation("power target must lie in (0, 1)".into()));
    }
    if bracket.0 < 2 || bracket.0 >= bracket.1 {
        return Err(CliError::Validation("bracket must satisfy 2 <= lo < hi".into()));
    }
    let started = Instant::now();
    let plan = plan_design(cfg, true).map_err(numeric)?;
    let plan_cox = if method == AnalysisMethod::Cox {
        Some(plan_design(cfg, false).map_err(numeric)?)
    } else {
        None
    };
    println!(
        "searching n in [{}, {}] for {} power {:.3} with {} replicates per probe",
        bracket.0,
        bracket.1,
        method.label(),
        target,
        cfg.replicates
    );
    let result = sample_size_search(
        cfg,
        method,
        &plan,
        plan_cox.as_ref(),
        target,
        bracket,
        cfg.replicates,
        jobs,
    )
    .map_err(numeric)?;
    for (n, p) in &result.trace {
        println!("  n {n:>5} -> power {p:.4}");
    }
    println!(
        "n* = {} with power {:.4} (se {:.4}) in {:.1}s",
        result.n,
        result.achieved_power,
        result.power_se,
        started.elapsed().as_secs_f64()
    );
    ensure_out(out)?;
    let mut doc = run_manifest(cfg, "samplesize");
    doc["method"] = method.label().into();
    doc["target_power"] = target.into();
    doc["result"] = serde_json::to_value(&result).expect("serializable");
    write_json(&out.join("samplesize.json"), &doc)?;
    Ok(())
}

fn cmd_table(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let gammas = [0.0, 0.03, 0.06, 0.09];
    let sigmas = [0.0, 1.0, 10.0, 100.0];
    let started = Instant::now();
    let cells = curvature_table(cfg, &gammas, &sigmas).map_err(numeric)?;
    ensure_out(out)?;
    let mut csv = artifact_header(cfg);
    csv.push_str("gamma,sigma_sq,m11,m21,m12,m22,n_events,sigma_hat_sq\n");
    for c in &cells {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            fmt_num(c.gamma),
            fmt_num(c.sigma_sq),
            fmt_num(c.matrix[0][0]),
            fmt_num(c.matrix[1][0]),
            fmt_num(c.matrix[0][1]),
            fmt_num(c.matrix[1][1]),
            c.n_events,
            fmt_num(c.sigma_hat_sq),
        );
    }
    std::fs::write(out.join("table_curvature.csv"), csv).map_err(validation)?;
    println!("wrote {}", out.join("table_curvature.csv").display());
    let mut doc = run_manifest(cfg, "table");
    doc["cells"] = serde_json::to_value(&cells).expect("serializable");
    write_json(&out.join("table_curvature.json"), &doc)?;
    for c in &cells {
        println!(
            "gamma {:>5} sigma_sq {:>6}: leading entry {:.4} ({} events)",
            c.gamma, c.sigma_sq, c.matrix[0][0], c.n_events
        );
    }
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let started = Instant::now();
    let summary = verify::run_all(cfg.seed).map_err(numeric)?;
    println!(
        "two-analysis inequality: {} grid points, {} failures",
        summary.ordering_checked, summary.ordering_failures
    );
    for r in &summary.k3 {
        println!(
            "three-analysis sweep {}: max step excess {:+.2e}, g-diff {:.5} <= f-diff {:.5} -> {}",
            r.scenario,
            r.max_step_excess,
            r.g_difference,
            r.f_difference,
            if r.holds { "ok" } else { "FAIL" }
        );
        if r.clamped {
            println!("  warning: correlations clamped into [0, 1] after scaling");
        }
    }
    println!(
        "derivative check: max relative error {:.2e} over {} datasets",
        summary.jacobian_max_rel_err, summary.jacobian_datasets
    );
    println!(
        "curvature identity: max deviation {:.2e} over {} cells",
        summary.identity_max_dev, summary.identity_cells
    );
    ensure_out(out)?;
    let mut doc = run_manifest(cfg, "verify");
    doc["summary"] = serde_json::to_value(&summary).expect("serializable");
    write_json(&out.join("verify.json"), &doc)?;
    println!("done in {:.1}s", started.elapsed().as_secs_f64());
    if summary.passed {
        println!("verification passed");
        Ok(())
    } else {
        Err(CliError::Verification("verification battery failed".into()))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = load_config(&cli.common)?;
    let out = cli.common.out.clone();
    let jobs = cli.common.jobs;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &out),
        Command::Fit { trial, analysis } => cmd_fit(&cfg, &out, trial, *analysis),
        Command::Design => cmd_design(&cfg, &out),
        Command::Oc { methods } => cmd_oc(&cfg, &out, jobs, methods),
        Command::Samplesize { method, target, lo, hi } => {
            cmd_samplesize(&cfg, &out, jobs, method, *target, (*lo, *hi))
        }
        Command::Table => {
            // The curvature table is a large-sample diagnostic; without an
            // explicit configuration it runs at its standard size.
            let mut c = cfg.clone();
            if cli.common.config.is_none() {
                c.n_patients = 4800;
            }
            cmd_table(&c, &out)
        }
        Command::Verify => cmd_verify(&cfg, &out),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is an
            // input problem.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.message());
            std::process::exit(e.code());
        }
    }
}

//! Monte Carlo orchestration: operating characteristics, sample-size search,
//! relative efficiency, and the large-sample curvature table.
//!
//! Every replicate owns a pre-assigned RNG sub-stream derived from the master
//! seed, so results are independent of `--jobs` and of execution order, and
//! identical configurations reproduce identical outputs byte for byte.
//! Patients are drawn in index order within a replicate, which doubles as
//! common random numbers across sample-size probes: the first `n` patients of
//! a larger probe coincide with the smaller probe's trial.
//!
//! Per-replicate numerical failures (non-positive-definite estimated
//! correlation, singular recombination, non-converged fits, …) are tallied by
//! kind and excluded from rejection denominators — never repaired.

use crate::config::RunConfig;
use crate::coxph::{fit_cox, CoxError};
use crate::cscore::{assemble_event_terms, eta_covariance, eval, fit_analysis, CscoreError};
use crate::gst::{
    canonical_boundaries, imax_for_power, method2_boundaries, method3_run, run_trial, Decision,
    GstBoundaries, GstError, TrialOutcome,
};
use crate::linalg::Mat2;
use crate::sim::{draw_patient_core, draw_trial, snapshot, TrialData};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("power bracket invalid: {0:.3} at n={1} and {2:.3} at n={3} do not straddle the target")]
    PowerBracket(f64, usize, f64, usize),
    #[error(transparent)]
    Gst(#[from] GstError),
    #[error(transparent)]
    Cscore(#[from] CscoreError),
}

/// Stable sub-stream seeds: a splitmix finalizer over the master seed and a
/// stream index.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut x = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream indices reserved for non-replicate draws.
const PLAN_STREAM: u64 = u64::MAX - 1;
/// Salt mixed into the master seed for the per-replicate QMC streams of the
/// direct boundary construction.
const MVN_SALT: u64 = 0xA5A5_5A5A_0F0F_F0F0;

/// Run replicate bodies over contiguous chunks on `jobs` threads, preserving
/// replicate order in the output.
fn run_chunked<T: Send>(replicates: usize, jobs: usize, body: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.max(1).min(replicates.max(1));
    if jobs <= 1 {
        return (0..replicates).map(body).collect();
    }
    let chunk = replicates.div_ceil(jobs);
    let body = &body;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let lo = j * chunk;
                let hi = ((j + 1) * chunk).min(replicates);
                scope.spawn(move || (lo..hi).map(body).collect::<Vec<T>>())
            })
            .collect();
        let mut out = Vec::with_capacity(replicates);
        for h in handles {
            out.extend(h.join().expect("replicate worker panicked"));
        }
        out
    })
}

/// Expected share of the final analysis's statistical information available
/// at each earlier analysis, measured on a large noise-free planning
/// replicate by counting events (each event carries roughly constant
/// information).  `eligible_only` restricts to events whose subject has two
/// measurements before the event time — the entry rule of the joint
/// analysis; the plain survival comparator counts every event.
pub fn planned_fractions(cfg: &RunConfig, eligible_only: bool, n_plan: usize) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, PLAN_STREAM));
    let kk = cfg.design.k();
    let mut counts = vec![0usize; kk];
    for i in 0..n_plan {
        let core = draw_patient_core(&cfg.model, &cfg.design, (i % 2) as u8, &mut rng);
        for (k, &tau) in cfg.design.analysis_times.iter().enumerate() {
            if core.entry > tau {
                continue;
            }
            let t = core
                .event_time
                .min(core.dropout_time)
                .min(cfg.design.max_followup)
                .min(tau - core.entry);
            let is_event = core.event_time <= t;
            if !is_event {
                continue;
            }
            let eligible = !eligible_only
                || (core.visit_times.len() >= 2 && core.visit_times[1] < t);
            if eligible {
                counts[k] += 1;
            }
        }
    }
    let last = counts[kk - 1].max(1) as f64;
    counts.iter().map(|&c| (c as f64 / last).min(1.0)).collect()
}

/// A fully planned sequential design: information fractions, the maximum
/// information needed for the power target, and the planned boundaries.
#[derive(Debug, Clone, Serialize)]
pub struct PlannedDesign {
    pub fractions: Vec<f64>,
    pub i_max: f64,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub info: Vec<f64>,
    pub alpha_cum: Vec<f64>,
    pub beta_cum: Vec<f64>,
}

impl PlannedDesign {
    pub fn boundaries(&self) -> GstBoundaries {
        GstBoundaries {
            info: self.info.clone(),
            upper: self.upper.clone(),
            lower: self.lower.clone(),
            alpha_cum: self.alpha_cum.clone(),
            beta_cum: self.beta_cum.clone(),
        }
    }
}

/// Assemble the planned design for the configured model.  `eligible_only`
/// selects the event-counting rule for the planning fractions (joint
/// analysis: true; survival-only comparator: false).
pub fn plan_design(cfg: &RunConfig, eligible_only: bool) -> Result<PlannedDesign, GstError> {
    let fractions = planned_fractions(cfg, eligible_only, 40_000);
    let d = &cfg.design;
    let drift = -d.eta_alt;
    let i_max = imax_for_power(
        &fractions,
        d.alpha,
        d.beta,
        d.spending_exponent,
        drift,
        cfg.numerics.grid_points,
    )?;
    let b = canonical_boundaries(
        &fractions,
        i_max,
        d.alpha,
        d.beta,
        d.spending_exponent,
        drift,
        cfg.numerics.grid_points,
    )?;
    Ok(PlannedDesign {
        fractions,
        i_max,
        upper: b.upper,
        lower: b.lower,
        info: b.info,
        alpha_cum: b.alpha_cum,
        beta_cum: b.beta_cum,
    })
}

/// The analysis pipelines the harness can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalysisMethod {
    /// Joint fit, planned boundaries.
    CscoreM1,
    /// Joint fit, per-trial direct boundaries on the estimated covariance.
    CscoreM2,
    /// Joint fit, per-trial recombination boundaries.
    CscoreM3,
    /// Treatment-only survival fit, planned boundaries.
    Cox,
}

impl AnalysisMethod {
    pub fn label(self) -> &'static str {
        match self {
            AnalysisMethod::CscoreM1 => "cscore-m1",
            AnalysisMethod::CscoreM2 => "cscore-m2",
            AnalysisMethod::CscoreM3 => "cscore-m3",
            AnalysisMethod::Cox => "cox",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cscore-m1" => Some(AnalysisMethod::CscoreM1),
            "cscore-m2" => Some(AnalysisMethod::CscoreM2),
            "cscore-m3" => Some(AnalysisMethod::CscoreM3),
            "cox" => Some(AnalysisMethod::Cox),
            _ => None,
        }
    }
}

fn cscore_label(e: &CscoreError) -> &'static str {
    match e {
        CscoreError::NoEvents => "fit_no_events",
        CscoreError::SingularJacobian(_) => "fit_singular_jacobian",
        CscoreError::MaxIterations(_, _) => "fit_max_iterations",
        CscoreError::Sigma(_) => "fit_sigma",
        CscoreError::NegativeVariance => "fit_negative_variance",
        CscoreError::SingularCurvature => "fit_singular_curvature",
    }
}

fn gst_label(e: &GstError) -> &'static str {
    match e {
        GstError::BadFractions => "bad_fractions",
        GstError::BracketFailure(_, _) => "bracket_failure",
        GstError::InfeasibleSpending(_) => "infeasible_spending",
        GstError::NotPositiveDefinite => "not_positive_definite",
        GstError::NegativeVariance(_) => "negative_variance",
        GstError::SingularCovariance(_) => "singular_covariance",
        GstError::NonIncreasingInformation(_) => "nonincreasing_information",
        GstError::Mvn(_) => "mvn",
    }
}

fn cox_label(e: &CoxError) -> &'static str {
    match e {
        CoxError::NoEvents => "cox_no_events",
        CoxError::MonotoneLikelihood => "cox_monotone_likelihood",
        CoxError::MaxIterations(_, _) => "cox_max_iterations",
    }
}

/// Everything one replicate's joint analysis produces.
struct JointPipeline {
    z: Vec<f64>,
    etas: Vec<f64>,
    cov: Vec<Vec<f64>>,
    entered: Vec<usize>,
    final_fit: (f64, f64, f64),
}

fn joint_pipeline(cfg: &RunConfig, trial: &TrialData) -> Result<JointPipeline, &'static str> {
    let kk = cfg.design.k();
    let mut fits = Vec::with_capacity(kk);
    for k in 0..kk {
        let snap = snapshot(trial, &cfg.design, k);
        fits.push(fit_analysis(trial, &snap).map_err(|e| cscore_label(&e))?);
    }
    let cov = eta_covariance(&fits).map_err(|e| cscore_label(&e))?;
    let z: Vec<f64> = fits
        .iter()
        .enumerate()
        .map(|(k, f)| -f.eta / cov[k][k].sqrt())
        .collect();
    let etas = fits.iter().map(|f| f.eta).collect();
    let entered = fits.iter().map(|f| f.n_entered).collect();
    let last = &fits[kk - 1];
    Ok(JointPipeline {
        z,
        etas,
        cov,
        entered,
        final_fit: (last.gamma, last.eta, last.sigma_sq),
    })
}

fn cox_pipeline(cfg: &RunConfig, trial: &TrialData) -> Result<(Vec<f64>, Vec<usize>), &'static str> {
    let kk = cfg.design.k();
    let mut z = Vec::with_capacity(kk);
    let mut entered = Vec::with_capacity(kk);
    for k in 0..kk {
        let snap = snapshot(trial, &cfg.design, k);
        let subjects: Vec<(f64, bool, u8)> = snap
            .views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.entered)
            .map(|(i, v)| (v.time, v.event, trial.patients[i].z))
            .collect();
        entered.push(subjects.len());
        let fit = fit_cox(&subjects).map_err(|e| cox_label(&e))?;
        z.push(fit.z());
    }
    Ok((z, entered))
}

/// Per-method tally over replicates.
#[derive(Debug, Clone, Serialize)]
pub struct MethodTally {
    pub method: AnalysisMethod,
    pub evaluated: usize,
    pub rejected: usize,
    /// Stops (either decision) per analysis index.
    pub stops: Vec<usize>,
    /// Patient-count total at the stopping analyses, for expected sample size.
    sample_total: f64,
    pub failures: BTreeMap<String, usize>,
}

impl MethodTally {
    fn new(method: AnalysisMethod, kk: usize) -> Self {
        MethodTally {
            method,
            evaluated: 0,
            rejected: 0,
            stops: vec![0; kk],
            sample_total: 0.0,
            failures: BTreeMap::new(),
        }
    }

    fn record(&mut self, out: &Result<(TrialOutcome, usize), &'static str>) {
        match out {
            Ok((o, entered)) => {
                self.evaluated += 1;
                if o.decision == Decision::Reject {
                    self.rejected += 1;
                }
                self.stops[o.analysis] += 1;
                self.sample_total += *entered as f64;
            }
            Err(label) => {
                *self.failures.entry((*label).to_string()).or_insert(0) += 1;
            }
        }
    }

    pub fn failure_count(&self) -> usize {
        self.failures.values().sum()
    }

    pub fn rejection_rate(&self) -> f64 {
        if self.evaluated == 0 {
            return f64::NAN;
        }
        self.rejected as f64 / self.evaluated as f64
    }

    pub fn rejection_se(&self) -> f64 {
        if self.evaluated == 0 {
            return f64::NAN;
        }
        let p = self.rejection_rate();
        (p * (1.0 - p) / self.evaluated as f64).sqrt()
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.evaluated + self.failure_count();
        if total == 0 {
            return f64::NAN;
        }
        self.failure_count() as f64 / total as f64
    }

    pub fn expected_sample_size(&self) -> f64 {
        if self.evaluated == 0 {
            return f64::NAN;
        }
        self.sample_total / self.evaluated as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OcReport {
    pub replicates: usize,
    pub methods: Vec<MethodTally>,
    /// Mean final-analysis estimates over replicates whose joint fit
    /// succeeded (absent when no joint method was requested).
    pub mean_gamma: Option<f64>,
    pub mean_eta: Option<f64>,
    pub mean_sigma_sq: Option<f64>,
}

impl OcReport {
    pub fn tally(&self, method: AnalysisMethod) -> Option<&MethodTally> {
        self.methods.iter().find(|t| t.method == method)
    }
}

/// Simulate `cfg.replicates` trials and evaluate the requested analysis
/// pipelines on each.  `plan` carries the planned boundaries for the joint
/// methods; `plan_cox` those for the survival-only comparator (required only
/// when `Cox` is requested).
pub fn operating_characteristics(
    cfg: &RunConfig,
    methods: &[AnalysisMethod],
    plan: &PlannedDesign,
    plan_cox: Option<&PlannedDesign>,
    jobs: usize,
) -> OcReport {
    let kk = cfg.design.k();
    let wants_joint = methods.iter().any(|m| {
        matches!(
            m,
            AnalysisMethod::CscoreM1 | AnalysisMethod::CscoreM2 | AnalysisMethod::CscoreM3
        )
    });
    let wants_cox = methods.iter().any(|m| matches!(m, AnalysisMethod::Cox));
    if wants_cox {
        assert!(plan_cox.is_some(), "Cox evaluation needs its planned design");
    }
    let d = &cfg.design;
    let drift = -d.eta_alt;

    type RepMethodOutcome = Result<(TrialOutcome, usize), &'static str>;
    let body = |r: usize| -> (Vec<RepMethodOutcome>, Option<(f64, f64, f64)>) {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
        let trial = draw_trial(&cfg.model, &cfg.design, cfg.n_patients, &mut rng);
        let joint = if wants_joint { Some(joint_pipeline(cfg, &trial)) } else { None };
        let cox = if wants_cox { Some(cox_pipeline(cfg, &trial)) } else { None };
        let mut outs = Vec::with_capacity(methods.len());
        for m in methods {
            let out: RepMethodOutcome = match m {
                AnalysisMethod::CscoreM1 => match joint.as_ref().unwrap() {
                    Ok(p) => {
                        let o = run_trial(&p.z, &plan.upper, &plan.lower);
                        Ok((o, p.entered[o.analysis]))
                    }
                    Err(e) => Err(e),
                },
                AnalysisMethod::CscoreM2 => match joint.as_ref().unwrap() {
                    Ok(p) => match method2_boundaries(
                        &p.cov,
                        plan.i_max,
                        d.alpha,
                        d.beta,
                        d.spending_exponent,
                        drift,
                        cfg.numerics.mvn_accuracy,
                        derive_seed(cfg.seed ^ MVN_SALT, r as u64),
                    ) {
                        Ok(b) => {
                            let o = run_trial(&p.z, &b.upper, &b.lower);
                            Ok((o, p.entered[o.analysis]))
                        }
                        Err(e) => Err(gst_label(&e)),
                    },
                    Err(e) => Err(e),
                },
                AnalysisMethod::CscoreM3 => match joint.as_ref().unwrap() {
                    Ok(p) => match method3_run(
                        &p.cov,
                        &p.etas,
                        plan.i_max,
                        d.alpha,
                        d.beta,
                        d.spending_exponent,
                        drift,
                        cfg.numerics.grid_points,
                    ) {
                        Ok(run) => Ok((run.outcome, p.entered[run.outcome.analysis])),
                        Err(e) => Err(gst_label(&e)),
                    },
                    Err(e) => Err(e),
                },
                AnalysisMethod::Cox => match cox.as_ref().unwrap() {
                    Ok((z, entered)) => {
                        let pc = plan_cox.unwrap();
                        let o = run_trial(z, &pc.upper, &pc.lower);
                        Ok((o, entered[o.analysis]))
                    }
                    Err(e) => Err(e),
                },
            };
            outs.push(out);
        }
        let summary = match &joint {
            Some(Ok(p)) => Some(p.final_fit),
            _ => None,
        };
        (outs, summary)
    };

    let results = run_chunked(cfg.replicates, jobs, body);
    let mut tallies: Vec<MethodTally> =
        methods.iter().map(|&m| MethodTally::new(m, kk)).collect();
    let mut sums = (0.0f64, 0.0f64, 0.0f64);
    let mut n_sum = 0usize;
    for (outs, summary) in &results {
        for (t, o) in tallies.iter_mut().zip(outs) {
            t.record(o);
        }
        if let Some((g, e, s)) = summary {
            sums.0 += g;
            sums.1 += e;
            sums.2 += s;
            n_sum += 1;
        }
    }
    let mean = |x: f64| if n_sum > 0 { Some(x / n_sum as f64) } else { None };
    OcReport {
        replicates: cfg.replicates,
        methods: tallies,
        mean_gamma: mean(sums.0),
        mean_eta: mean(sums.1),
        mean_sigma_sq: mean(sums.2),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleSizeResult {
    pub n: usize,
    pub achieved_power: f64,
    pub power_se: f64,
    /// Every probe evaluated, in evaluation order.
    pub trace: Vec<(usize, f64)>,
}

/// Smallest sample size whose empirical rejection rate reaches
/// `target_power`, by integer bisection with common random numbers across
/// probes.  The model in `cfg` should already be set to the alternative of
/// interest; `replicates` overrides the config's count for each probe.
#[allow(clippy::too_many_arguments)]
pub fn sample_size_search(
    cfg: &RunConfig,
    method: AnalysisMethod,
    plan: &PlannedDesign,
    plan_cox: Option<&PlannedDesign>,
    target_power: f64,
    bracket: (usize, usize),
    replicates: usize,
    jobs: usize,
) -> Result<SampleSizeResult, HarnessError> {
    let mut trace = Vec::new();
    let probe = |n: usize, trace: &mut Vec<(usize, f64)>| -> (f64, f64) {
        let mut c = cfg.clone();
        c.n_patients = n;
        c.replicates = replicates;
        let report = operating_characteristics(&c, &[method], plan, plan_cox, jobs);
        let t = report.tally(method).unwrap();
        trace.push((n, t.rejection_rate()));
        (t.rejection_rate(), t.rejection_se())
    };
    let (mut lo, mut hi) = bracket;
    assert!(lo < hi, "bracket must be ordered");
    let (p_lo, _) = probe(lo, &mut trace);
    let (p_hi, _) = probe(hi, &mut trace);
    if !(p_lo < target_power && p_hi >= target_power) {
        return Err(HarnessError::PowerBracket(p_lo, lo, p_hi, hi));
    }
    let mut p_at_hi = p_hi;
    let mut se_at_hi = f64::NAN;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let (p, se) = probe(mid, &mut trace);
        if p >= target_power {
            hi = mid;
            p_at_hi = p;
            se_at_hi = se;
        } else {
            lo = mid;
        }
    }
    if se_at_hi.is_nan() {
        // The bracket's upper end was never re-probed; recompute its SE.
        se_at_hi = (p_at_hi * (1.0 - p_at_hi) / replicates as f64).sqrt();
    }
    Ok(SampleSizeResult { n: hi, achieved_power: p_at_hi, power_se: se_at_hi, trace })
}

/// Sample-size ratio of the survival-only comparator to the joint analysis.
pub fn relative_efficiency(n_cox: usize, n_joint: usize) -> f64 {
    assert!(n_cox > 0 && n_joint > 0);
    n_cox as f64 / n_joint as f64
}

/// One cell of the large-sample curvature table: the product of the inverse
/// curvature and spread matrices at the first analysis with the true
/// parameters plugged in.
#[derive(Debug, Clone, Serialize)]
pub struct CurvatureCell {
    pub gamma: f64,
    pub sigma_sq: f64,
    pub matrix: Mat2,
    pub n_events: usize,
    pub sigma_hat_sq: f64,
}

/// Curvature table over a `gamma x sigma_sq` grid under the treatment null.
/// Within a column (fixed `gamma`) every cell re-materializes the same
/// patient draws at a different noise scale, so cells vary smoothly in
/// `sigma_sq`.
pub fn curvature_table(
    cfg: &RunConfig,
    gammas: &[f64],
    sigma_sqs: &[f64],
) -> Result<Vec<CurvatureCell>, HarnessError> {
    use crate::linalg::{mat2_inv, mat2_mul};
    use crate::trajectory::{pooled_sigma_sq, LongitudinalTrack};
    let mut cells = Vec::with_capacity(gammas.len() * sigma_sqs.len());
    for (ci, &gamma) in gammas.iter().enumerate() {
        let mut model = cfg.model.clone();
        model.gamma = gamma;
        model.eta = 0.0;
        let mut rng =
            ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x7AB1_0000 + ci as u64));
        let cores: Vec<_> = (0..cfg.n_patients)
            .map(|i| draw_patient_core(&model, &cfg.design, (i % 2) as u8, &mut rng))
            .collect();
        for &sigma_sq in sigma_sqs {
            let patients: Vec<_> = cores.iter().map(|c| c.with_noise_scale(sigma_sq)).collect();
            let trial = TrialData::new(patients);
            let snap = snapshot(&trial, &cfg.design, 0);
            let sigma_hat = pooled_sigma_sq(
                snap.views
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.entered)
                    .map(|(i, v)| (&trial.tracks[i] as &LongitudinalTrack, v.m)),
            )
            .map_err(CscoreError::Sigma)?;
            let terms = assemble_event_terms(&trial, &snap);
            if terms.is_empty() {
                return Err(HarnessError::Cscore(CscoreError::NoEvents));
            }
            let parts = eval(&terms, gamma, 0.0, sigma_hat);
            let a_inv =
                mat2_inv(&parts.a_raw).ok_or(CscoreError::SingularCurvature)?;
            let matrix = mat2_mul(&a_inv, &parts.b_raw);
            cells.push(CurvatureCell {
                gamma,
                sigma_sq,
                matrix,
                n_events: terms.len(),
                sigma_hat_sq: sigma_hat,
            });
        }
    }
    Ok(cells)
}

/// Mean of the estimating function at the true parameters across replicates,
/// with its Monte Carlo standard errors — the unbiasedness diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct ScoreMeanReport {
    pub replicates: usize,
    pub mean: [f64; 2],
    pub se: [f64; 2],
}

pub fn score_mean_at_truth(cfg: &RunConfig, jobs: usize) -> ScoreMeanReport {
    let kk = cfg.design.k();
    let scores = run_chunked(cfg.replicates, jobs, |r| {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, r as u64));
        let trial = draw_trial(&cfg.model, &cfg.design, cfg.n_patients, &mut rng);
        let snap = snapshot(&trial, &cfg.design, kk - 1);
        let terms = assemble_event_terms(&trial, &snap);
        let parts = eval(&terms, cfg.model.gamma, cfg.model.eta, cfg.model.sigma_sq);
        parts.score
    });
    let n = scores.len() as f64;
    let mut mean = [0.0f64; 2];
    for s in &scores {
        mean[0] += s[0];
        mean[1] += s[1];
    }
    mean[0] /= n;
    mean[1] /= n;
    let mut var = [0.0f64; 2];
    for s in &scores {
        var[0] += (s[0] - mean[0]).powi(2);
        var[1] += (s[1] - mean[1]).powi(2);
    }
    let se = [
        (var[0] / (n - 1.0) / n).sqrt(),
        (var[1] / (n - 1.0) / n).sqrt(),
    ];
    ScoreMeanReport { replicates: scores.len(), mean, se }
}

/// Run provenance written alongside every artifact.  Deliberately free of
/// wall-clock fields so reruns of the same configuration are byte-identical.
pub fn run_manifest(cfg: &RunConfig, command: &str) -> serde_json::Value {
    serde_json::json!({
        "command": command,
        "config_sha256": cfg.content_hash(),
        "seed": cfg.seed,
        "package": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(7, 0);
        let b = derive_seed(7, 1);
        let c = derive_seed(8, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 0));
    }

    #[test]
    fn chunked_execution_preserves_order() {
        let one = run_chunked(17, 1, |r| r * r);
        let four = run_chunked(17, 4, |r| r * r);
        assert_eq!(one, four);
        assert_eq!(one[16], 256);
    }

    #[test]
    fn planning_fractions_are_monotone_and_close_at_one() {
        let cfg = RunConfig::reference();
        let f = planned_fractions(&cfg, true, 4000);
        assert_eq!(f.len(), cfg.design.k());
        for w in f.windows(2) {
            assert!(w[1] >= w[0], "{f:?}");
        }
        assert!((f[f.len() - 1] - 1.0).abs() < 1e-12);
        assert!(f[0] > 0.0 && f[0] < 1.0, "{f:?}");
        // The comparator counts at least as many events at every analysis.
        let fc = planned_fractions(&cfg, false, 4000);
        assert!(fc[0] >= f[0] * 0.5, "{fc:?} vs {f:?}");
    }

    #[test]
    fn accounting_always_balances() {
        let mut cfg = RunConfig::reference();
        cfg.n_patients = 120;
        cfg.replicates = 20;
        let plan = plan_design(&cfg, true).unwrap();
        let plan_cox = plan_design(&cfg, false).unwrap();
        let methods = [
            AnalysisMethod::CscoreM1,
            AnalysisMethod::CscoreM3,
            AnalysisMethod::Cox,
        ];
        let report = operating_characteristics(&cfg, &methods, &plan, Some(&plan_cox), 2);
        for t in &report.methods {
            assert_eq!(
                t.evaluated + t.failure_count(),
                report.replicates,
                "{:?}",
                t.method
            );
            assert_eq!(t.stops.iter().sum::<usize>(), t.evaluated);
            assert!(t.rejected <= t.evaluated);
        }
    }

    #[test]
    fn reports_are_deterministic_across_job_counts() {
        let mut cfg = RunConfig::reference();
        cfg.n_patients = 100;
        cfg.replicates = 10;
        let plan = plan_design(&cfg, true).unwrap();
        let a = operating_characteristics(&cfg, &[AnalysisMethod::CscoreM1], &plan, None, 1);
        let b = operating_characteristics(&cfg, &[AnalysisMethod::CscoreM1], &plan, None, 3);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn curvature_table_identity_columns() {
        let mut cfg = RunConfig::reference();
        cfg.n_patients = 700;
        let cells = curvature_table(&cfg, &[0.0, 0.03], &[0.0, 10.0]).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert!(c.matrix[0][1].abs() < 1e-10, "{:?}", c.matrix);
            assert!((c.matrix[1][1] - 1.0).abs() < 1e-10, "{:?}", c.matrix);
            assert!(c.n_events > 0);
        }
        // Noise-free columns are exactly the identity.
        for c in cells.iter().filter(|c| c.sigma_sq == 0.0) {
            assert!((c.matrix[0][0] - 1.0).abs() < 1e-8, "{:?}", c.matrix);
            assert!(c.matrix[1][0].abs() < 1e-8, "{:?}", c.matrix);
            // Noise-free residuals vanish up to accumulated rounding.
            assert!(c.sigma_hat_sq.abs() < 1e-9);
        }
        // Measurement error inflates the association diagonal.
        for pair in cells.chunks(2) {
            assert!(
                pair[1].matrix[0][0] > pair[0].matrix[0][0],
                "{} vs {}",
                pair[1].matrix[0][0],
                pair[0].matrix[0][0]
            );
        }
    }

    #[test]
    fn score_mean_is_small_at_truth() {
        let mut cfg = RunConfig::reference();
        cfg.n_patients = 150;
        cfg.replicates = 60;
        let report = score_mean_at_truth(&cfg, 2);
        assert_eq!(report.replicates, 60);
        for i in 0..2 {
            assert!(
                report.mean[i].abs() < 4.0 * report.se[i],
                "component {i}: mean {} se {}",
                report.mean[i],
                report.se[i]
            );
        }
    }
}

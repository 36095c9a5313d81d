//! Conditional-score estimation of the association and treatment effects.
//!
//! The longitudinal covariate is observed with error, so a naive partial
//! likelihood that plugs per-patient OLS predictions into the risk sets is
//! biased.  The conditional-score device replaces the failing subject's
//! prediction with the complete sufficient statistic
//! `S = xhat + gamma * sigma^2 * theta` and reweights every risk-set member
//! by `exp(gamma S - gamma^2 sigma^2 theta / 2 + eta z)`; the resulting
//! estimating equation is unbiased for `(gamma, eta)` at any measurement-error
//! variance.
//!
//! At an analysis the equation is a sum over observed failures.  A subject
//! joins a risk set only once two of its measurements are visible, and the
//! failing subject must itself satisfy that rule for its failure to
//! contribute a term.  Ties are handled in the usual full-risk-set fashion:
//! simultaneous failures yield one term each over the common risk set.
//!
//! Besides the point estimate, the module assembles the two curvature-style
//! matrices of the sandwich variance (`a_raw`, `b_raw`, kept as raw sums over
//! event terms — the sample-size normalization cancels in every quantity
//! derived from them) and the cross-analysis covariance of the treatment
//! effect, which downstream boundary construction consumes.

use crate::linalg::{mat2_inv, mat2_mul, mat2_solve, mat2_transpose, mat2_zero, Mat2, Vec2};
use crate::sim::{AnalysisSnapshot, TrialData};
use crate::trajectory::pooled_sigma_sq;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CscoreError {
    #[error("no eligible events at this analysis")]
    NoEvents,
    #[error("singular Jacobian in Newton step at iteration {0}")]
    SingularJacobian(usize),
    #[error("estimating equation did not converge in {0} iterations (score norm {1:.3e})")]
    MaxIterations(usize, f64),
    #[error("measurement-error variance unavailable: {0}")]
    Sigma(#[from] crate::trajectory::TrajectoryError),
    #[error("sandwich variance of the treatment effect is not positive")]
    NegativeVariance,
    #[error("singular curvature matrix in sandwich assembly")]
    SingularCurvature,
}

/// One subject in an event term's risk set.  `xhat` and `theta` come from the
/// subject's measurement prefix at the event time and do not depend on the
/// working parameters, so terms are assembled once per analysis and reused
/// across solver iterations.
#[derive(Debug, Clone, Copy)]
pub struct RiskMember {
    pub xhat: f64,
    pub theta: f64,
    pub z: f64,
}

/// One failure's contribution: the risk set at the failure time plus the
/// index of the failing subject within it.
#[derive(Debug, Clone)]
pub struct EventTerm {
    pub time: f64,
    pub fail: usize,
    pub members: Vec<RiskMember>,
}

/// Build the event terms for one analysis.  Failures sort by time with
/// patient order breaking ties; each failure contributes one term whose risk
/// set holds every subject still under observation at that time with at
/// least two visible measurements by then.
pub fn assemble_event_terms(trial: &TrialData, snap: &AnalysisSnapshot) -> Vec<EventTerm> {
    let mut failures: Vec<(f64, usize)> = snap
        .views
        .iter()
        .enumerate()
        .filter(|(_, v)| v.entered && v.event && v.m >= 2)
        .map(|(i, v)| (v.time, i))
        .collect();
    failures.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    failures
        .into_iter()
        .map(|(u, f)| {
            let mut members = Vec::new();
            let mut fail = usize::MAX;
            for (j, v) in snap.views.iter().enumerate() {
                if !v.entered || v.time < u {
                    continue;
                }
                if let Some(fit) = trial.tracks[j].fit_at(u, v.m) {
                    if j == f {
                        fail = members.len();
                    }
                    members.push(RiskMember {
                        xhat: fit.xhat,
                        theta: fit.theta,
                        z: f64::from(trial.patients[j].z),
                    });
                }
            }
            debug_assert!(fail != usize::MAX, "failing subject must be in its own risk set");
            EventTerm { time: u, fail, members }
        })
        .collect()
}

/// Everything `eval` produces at one parameter point.
#[derive(Debug, Clone, Copy)]
pub struct EvalParts {
    /// Estimating-equation value (raw sum over event terms).
    pub score: Vec2,
    /// Its derivative in `(gamma, eta)`.
    pub jacobian: Mat2,
    /// Curvature matrix of the sandwich (raw sum).
    pub a_raw: Mat2,
    /// Spread matrix of the sandwich (raw sum).
    pub b_raw: Mat2,
    /// Event terms whose weight exponent hit the overflow clamp.
    pub clamped: usize,
}

/// Evaluate the estimating equation, its Jacobian and the sandwich pieces at
/// `(gamma, eta)` for a fixed error variance.
pub fn eval(terms: &[EventTerm], gamma: f64, eta: f64, sigma_sq: f64) -> EvalParts {
    let mut score = [0.0f64; 2];
    let mut jac = mat2_zero();
    let mut a = mat2_zero();
    let mut b = mat2_zero();
    let mut clamped = 0usize;
    for term in terms {
        let mut s0 = 0.0f64;
        let mut s1 = [0.0f64; 2];
        // Symmetric second-moment sum: (0,0), (0,1), (1,1).
        let mut s2 = [0.0f64; 3];
        // Weight-gradient corrections beyond the explicit (S, z) part; only
        // the association component is nonzero.
        let mut c1 = 0.0f64;
        let mut c2 = [0.0f64; 2];
        let mut term_clamped = false;
        let mut sf = 0.0;
        let mut zf = 0.0;
        let mut wf = 0.0;
        let mut theta_f = 0.0;
        for (idx, m) in term.members.iter().enumerate() {
            let failing = idx == term.fail;
            let s = if failing { m.xhat + gamma * sigma_sq * m.theta } else { m.xhat };
            let expo = gamma * s - gamma * gamma * sigma_sq * m.theta / 2.0 + eta * m.z;
            let expo_clamped = expo.clamp(-700.0, 700.0);
            if expo_clamped != expo {
                term_clamped = true;
            }
            let w = expo_clamped.exp();
            let extra = if failing { 0.0 } else { -gamma * sigma_sq * m.theta };
            s0 += w;
            s1[0] += s * w;
            s1[1] += m.z * w;
            s2[0] += s * s * w;
            s2[1] += s * m.z * w;
            s2[2] += m.z * m.z * w;
            c1 += extra * w;
            c2[0] += s * extra * w;
            c2[1] += m.z * extra * w;
            if failing {
                sf = s;
                zf = m.z;
                wf = w;
                theta_f = m.theta;
            }
        }
        if term_clamped {
            clamped += 1;
        }
        let e1 = [s1[0] / s0, s1[1] / s0];
        score[0] += sf - e1[0];
        score[1] += zf - e1[1];
        // Conditional covariance of (S, z) under the term weights.
        let v1 = [
            [s2[0] / s0 - e1[0] * e1[0], s2[1] / s0 - e1[0] * e1[1]],
            [s2[1] / s0 - e1[1] * e1[0], s2[2] / s0 - e1[1] * e1[1]],
        ];
        // Association column of the weight-gradient correction; its other
        // column vanishes identically.
        let v2 = [c2[0] / s0 - e1[0] * c1 / s0, c2[1] / s0 - e1[1] * c1 / s0];
        let g = sigma_sq * theta_f;
        let v3 = g * wf / s0;
        jac[0][0] += g - v1[0][0] - v2[0] - v3;
        jac[0][1] += -v1[0][1];
        jac[1][0] += -v1[1][0] - v2[1];
        jac[1][1] += -v1[1][1];
        a[0][0] += v1[0][0] + v2[0] - g;
        a[0][1] += v1[0][1];
        a[1][0] += v1[1][0] + v2[1];
        a[1][1] += v1[1][1];
        b[0][0] += v1[0][0];
        b[0][1] += v1[0][1];
        b[1][0] += v1[1][0];
        b[1][1] += v1[1][1];
    }
    EvalParts { score, jacobian: jac, a_raw: a, b_raw: b, clamped }
}

/// Joint estimate at one analysis.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ConditionalScoreFit {
    pub gamma: f64,
    pub eta: f64,
    /// Pooled residual estimate of the measurement-error variance, held
    /// fixed while solving.
    pub sigma_sq: f64,
    /// Patients enrolled by the analysis.
    pub n_entered: usize,
    /// Event terms contributing to the equation.
    pub n_events: usize,
    pub a_raw: Mat2,
    pub b_raw: Mat2,
    pub score_norm: f64,
    pub iterations: usize,
    /// Event terms whose weight exponent hit the clamp at the solution.
    pub clamped_terms: usize,
    /// Set when clamping was active — estimates may sit on a flattened
    /// region of the equation and deserve scrutiny.
    pub suspect: bool,
}

fn norm2(v: &Vec2) -> f64 {
    v[0].hypot(v[1])
}

/// Solve the estimating equation by damped Newton iteration from the origin.
pub fn solve(
    terms: &[EventTerm],
    sigma_sq: f64,
    n_entered: usize,
) -> Result<ConditionalScoreFit, CscoreError> {
    if terms.is_empty() {
        return Err(CscoreError::NoEvents);
    }
    const MAX_ITER: usize = 50;
    let tol = 1e-8 * (1.0 + terms.len() as f64);
    let mut theta = [0.0f64, 0.0f64];
    let mut parts = eval(terms, theta[0], theta[1], sigma_sq);
    let mut iterations = 0usize;
    for it in 1..=MAX_ITER {
        let current = norm2(&parts.score);
        if current <= tol {
            break;
        }
        iterations = it;
        let rhs = [-parts.score[0], -parts.score[1]];
        let step = mat2_solve(&parts.jacobian, &rhs)
            .ok_or(CscoreError::SingularJacobian(it))?;
        let mut alpha = 1.0f64;
        loop {
            let cand = [theta[0] + alpha * step[0], theta[1] + alpha * step[1]];
            let cand_parts = eval(terms, cand[0], cand[1], sigma_sq);
            if norm2(&cand_parts.score) < current || alpha < 1e-9 {
                theta = cand;
                parts = cand_parts;
                break;
            }
            alpha *= 0.5;
        }
    }
    let score_norm = norm2(&parts.score);
    if score_norm > tol {
        return Err(CscoreError::MaxIterations(MAX_ITER, score_norm));
    }
    Ok(ConditionalScoreFit {
        gamma: theta[0],
        eta: theta[1],
        sigma_sq,
        n_entered,
        n_events: terms.len(),
        a_raw: parts.a_raw,
        b_raw: parts.b_raw,
        score_norm,
        iterations,
        clamped_terms: parts.clamped,
        suspect: parts.clamped > 0,
    })
}

/// Pool the error variance, assemble the event terms, and solve, all from one
/// frozen analysis.
pub fn fit_analysis(
    trial: &TrialData,
    snap: &AnalysisSnapshot,
) -> Result<ConditionalScoreFit, CscoreError> {
    let entered = snap.views.iter().filter(|v| v.entered).count();
    let sigma_sq = pooled_sigma_sq(
        snap.views
            .iter()
            .enumerate()
            .filter(|(_, v)| v.entered)
            .map(|(i, v)| (&trial.tracks[i], v.m)),
    )?;
    let terms = assemble_event_terms(trial, snap);
    solve(&terms, sigma_sq, entered)
}

/// Sandwich variance of the treatment effect at one analysis.
pub fn eta_variance(fit: &ConditionalScoreFit) -> Result<f64, CscoreError> {
    let a_inv = mat2_inv(&fit.a_raw).ok_or(CscoreError::SingularCurvature)?;
    let sandwich = mat2_mul(&mat2_mul(&a_inv, &fit.b_raw), &mat2_transpose(&a_inv));
    let var = sandwich[1][1];
    if !(var.is_finite() && var > 0.0) {
        return Err(CscoreError::NegativeVariance);
    }
    Ok(var)
}

/// Covariance matrix of the treatment-effect estimates across analyses.  The
/// entry for an ordered pair uses the spread matrix of the earlier analysis
/// between the two curvature inverses; the raw-sum normalization cancels.
pub fn eta_covariance(fits: &[ConditionalScoreFit]) -> Result<Vec<Vec<f64>>, CscoreError> {
    let k = fits.len();
    let inv: Vec<Mat2> = fits
        .iter()
        .map(|f| mat2_inv(&f.a_raw).ok_or(CscoreError::SingularCurvature))
        .collect::<Result<_, _>>()?;
    let mut cov = vec![vec![0.0f64; k]; k];
    for k1 in 0..k {
        for k2 in k1..k {
            let m = mat2_mul(&mat2_mul(&inv[k1], &fits[k1].b_raw), &mat2_transpose(&inv[k2]));
            cov[k1][k2] = m[1][1];
            cov[k2][k1] = m[1][1];
        }
    }
    for (i, row) in cov.iter().enumerate() {
        if !(row[i].is_finite() && row[i] > 0.0) {
            return Err(CscoreError::NegativeVariance);
        }
    }
    Ok(cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::sim::{draw_trial, snapshot};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn fixture(n: usize, seed: u64) -> (crate::sim::TrialData, crate::sim::AnalysisSnapshot) {
        let cfg = RunConfig::reference();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let trial = draw_trial(&cfg.model, &cfg.design, n, &mut rng);
        let snap = snapshot(&trial, &cfg.design, cfg.design.k() - 1);
        (trial, snap)
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (trial, snap) = fixture(80, 42);
        let terms = assemble_event_terms(&trial, &snap);
        assert!(terms.len() > 5);
        let sigma_sq = 9.0;
        let (g0, e0) = (0.05, -0.3);
        let parts = eval(&terms, g0, e0, sigma_sq);
        let h = 1e-6;
        let d_gamma = {
            let p = eval(&terms, g0 + h, e0, sigma_sq);
            let m = eval(&terms, g0 - h, e0, sigma_sq);
            [(p.score[0] - m.score[0]) / (2.0 * h), (p.score[1] - m.score[1]) / (2.0 * h)]
        };
        let d_eta = {
            let p = eval(&terms, g0, e0 + h, sigma_sq);
            let m = eval(&terms, g0, e0 - h, sigma_sq);
            [(p.score[0] - m.score[0]) / (2.0 * h), (p.score[1] - m.score[1]) / (2.0 * h)]
        };
        let scale = 1.0 + terms.len() as f64;
        assert_abs_diff_eq!(parts.jacobian[0][0], d_gamma[0], epsilon = 1e-3 * scale);
        assert_abs_diff_eq!(parts.jacobian[1][0], d_gamma[1], epsilon = 1e-3 * scale);
        assert_abs_diff_eq!(parts.jacobian[0][1], d_eta[0], epsilon = 1e-3 * scale);
        assert_abs_diff_eq!(parts.jacobian[1][1], d_eta[1], epsilon = 1e-3 * scale);
    }

    #[test]
    fn zero_association_reduces_to_shared_risk_set_score() {
        // At gamma = 0 the weights collapse to exp(eta z) and the treatment
        // component must match a plain log-rank-style score computed from the
        // snapshot with an independent risk-set loop.
        let (trial, snap) = fixture(120, 7);
        let terms = assemble_event_terms(&trial, &snap);
        let eta = -0.4;
        let parts = eval(&terms, 0.0, eta, 3.0);
        let mut expected = 0.0f64;
        for (f, vf) in snap.views.iter().enumerate() {
            if !(vf.entered && vf.event && vf.m >= 2) {
                continue;
            }
            let u = vf.time;
            let mut sum_w = 0.0;
            let mut sum_zw = 0.0;
            for (j, vj) in snap.views.iter().enumerate() {
                let eligible = vj.entered
                    && vj.time >= u
                    && vj.m >= 2
                    && trial.patients[j].visit_times[1] <= u;
                if eligible {
                    let w = (eta * f64::from(trial.patients[j].z)).exp();
                    sum_w += w;
                    sum_zw += f64::from(trial.patients[j].z) * w;
                }
            }
            expected += f64::from(trial.patients[f].z) - sum_zw / sum_w;
        }
        assert_abs_diff_eq!(parts.score[1], expected, epsilon = 1e-9);
    }

    #[test]
    fn curvature_and_spread_share_their_treatment_column() {
        let (trial, snap) = fixture(150, 3);
        let fit = fit_analysis(&trial, &snap).unwrap();
        // Exact algebraic identity, not an asymptotic statement.
        assert_abs_diff_eq!(fit.a_raw[0][1], fit.b_raw[0][1], epsilon = 1e-9 * fit.b_raw[0][1].abs().max(1.0));
        assert_abs_diff_eq!(fit.a_raw[1][1], fit.b_raw[1][1], epsilon = 1e-9 * fit.b_raw[1][1].abs().max(1.0));
        // Equivalent statement: the second column of inv(A) B is (0, 1).
        let a_inv = mat2_inv(&fit.a_raw).unwrap();
        let m = mat2_mul(&a_inv, &fit.b_raw);
        assert_abs_diff_eq!(m[0][1], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(m[1][1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn newton_recovers_parameters_loosely() {
        let cfg = RunConfig::reference();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let trial = draw_trial(&cfg.model, &cfg.design, 2000, &mut rng);
        let snap = snapshot(&trial, &cfg.design, cfg.design.k() - 1);
        let fit = fit_analysis(&trial, &snap).unwrap();
        assert!(!fit.suspect);
        assert!(fit.iterations <= 25, "took {} iterations", fit.iterations);
        assert!((fit.gamma - cfg.model.gamma).abs() < 0.06, "gamma {}", fit.gamma);
        assert!((fit.eta - cfg.model.eta).abs() < 0.45, "eta {}", fit.eta);
        assert!((fit.sigma_sq - cfg.model.sigma_sq).abs() < 1.5, "sigma_sq {}", fit.sigma_sq);
        let var = eta_variance(&fit).unwrap();
        assert!(var > 0.0 && var < 1.0, "variance {var}");
    }

    #[test]
    fn cross_analysis_covariance_is_coherent() {
        let cfg = RunConfig::reference();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let trial = draw_trial(&cfg.model, &cfg.design, 800, &mut rng);
        let fits: Vec<_> = (0..cfg.design.k())
            .map(|k| fit_analysis(&trial, &snapshot(&trial, &cfg.design, k)).unwrap())
            .collect();
        let cov = eta_covariance(&fits).unwrap();
        let k = fits.len();
        for k1 in 0..k {
            // Diagonal agrees with the single-analysis variance.
            assert_abs_diff_eq!(cov[k1][k1], eta_variance(&fits[k1]).unwrap(), epsilon = 1e-12);
            for k2 in 0..k {
                assert_abs_diff_eq!(cov[k1][k2], cov[k2][k1], epsilon = 1e-12);
            }
        }
        // Information grows as events accrue.
        for k1 in 1..k {
            assert!(
                cov[k1][k1] < cov[k1 - 1][k1 - 1],
                "variance must shrink: {} vs {}",
                cov[k1][k1],
                cov[k1 - 1][k1 - 1]
            );
        }
        // Correlations live in (0, 1).
        for k1 in 0..k {
            for k2 in k1 + 1..k {
                let r = cov[k1][k2] / (cov[k1][k1] * cov[k2][k2]).sqrt();
                assert!(r > 0.0 && r < 1.0, "correlation {r}");
            }
        }
    }

    #[test]
    fn tied_failures_contribute_separate_terms_over_one_risk_set() {
        use crate::sim::{Patient, TrialData};
        // Two patients failing at the same instant plus one survivor; each
        // failure is its own term and all three subjects sit in both risk
        // sets.
        let mk = |z: u8, event: f64| Patient {
            z,
            entry: 0.0,
            b0: 1.0,
            b1: 0.5,
            event_time: event,
            dropout_time: f64::INFINITY,
            visit_times: vec![0.0, 0.1, 0.2],
            visit_values: vec![1.0, 1.1, 0.9],
        };
        let trial = TrialData::new(vec![mk(0, 1.0), mk(1, 1.0), mk(0, f64::INFINITY)]);
        let mut design = RunConfig::reference().design;
        design.analysis_times = vec![5.0];
        design.max_followup = 2.0;
        let snap = snapshot(&trial, &design, 0);
        let terms = assemble_event_terms(&trial, &snap);
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].members.len(), 3);
        assert_eq!(terms[1].members.len(), 3);
        assert_ne!(terms[0].fail, terms[1].fail);
        assert_abs_diff_eq!(terms[0].time, terms[1].time, epsilon = 0.0);
    }
}

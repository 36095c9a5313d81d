//! Group-sequential boundary construction and the sequential trial walk.
//!
//! Boundaries come from an error-spending family: the cumulative type-I
//! error spent by an analysis is `alpha * fraction^exponent`, closed out to
//! exactly `alpha` at the final look, and likewise for the type-II side.
//! Efficacy bounds are solved under the null; futility bounds under the
//! design alternative, binding on themselves but ignored when solving the
//! efficacy side (the conservative convention).
//!
//! Three constructions are provided:
//!
//! 1. [`canonical_boundaries`] — the planned design.  Standardized test
//!    statistics are treated as a Gaussian sequence with independent
//!    increments at the planned information fractions, and crossing
//!    probabilities propagate through a sub-density recursion on a Simpson
//!    grid.
//! 2. [`method2_boundaries`] — per-trial direct construction.  The joint
//!    distribution of the statistics uses the estimated cross-analysis
//!    correlation as is (no independence structure assumed); each bound is a
//!    root-find on a rectangle probability evaluated by randomized
//!    quasi-Monte Carlo with common random numbers.  Requires the full
//!    estimated correlation matrix to be strictly positive definite.
//! 3. [`method3_run`] — per-trial recombination.  At each analysis the
//!    history of treatment-effect estimates is recombined by generalized
//!    least squares into a statistic whose information is `1' Sigma^-1 1`;
//!    the recombined sequence recovers the independent-increments structure,
//!    so the same recursion as the planned design applies at the estimated
//!    information levels.  Construction is interleaved with the walk, so a
//!    numerical failure can only occur at an analysis the trial actually
//!    reaches.
//!
//! All failure modes surface as [`GstError`] variants; callers tally them
//! rather than repairing them.

use crate::linalg::{cholesky, solve_spd};
use crate::mvn::{rect_prob_root, MovingBound};
use crate::stats::{norm_cdf, norm_pdf, norm_quantile, norm_sf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GstError {
    #[error("monitoring fractions must be positive, nondecreasing, and end at one")]
    BadFractions,
    #[error("information bracket does not contain the power target (power {0:.4}..{1:.4})")]
    BracketFailure(f64, f64),
    #[error("spending increment at analysis {0} exceeds the reachable probability mass")]
    InfeasibleSpending(usize),
    #[error("estimated correlation matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("estimated variance at analysis {0} is not positive")]
    NegativeVariance(usize),
    #[error("singular estimated covariance at analysis {0}")]
    SingularCovariance(usize),
    #[error("recombined information does not increase at analysis {0}")]
    NonIncreasingInformation(usize),
    #[error("rectangle probability failed: {0}")]
    Mvn(#[from] crate::mvn::MvnError),
}

/// Cumulative error spent by each analysis under the power family, forced
/// nondecreasing and closed to the full level at the final look.
pub fn spending_cumulative(level: f64, fractions: &[f64], exponent: f64) -> Vec<f64> {
    let last = fractions.len() - 1;
    let mut run = 0.0f64;
    fractions
        .iter()
        .enumerate()
        .map(|(k, &f)| {
            let c = if k == last { level } else { level * f.clamp(0.0, 1.0).powf(exponent) };
            run = run.max(c.min(level));
            run
        })
        .collect()
}

/// Half-width of the standardized grid kept around the drifted mean; mass
/// beyond it is below double-precision noise.
const TRUNC: f64 = 8.0;

/// Sub-density of the standardized statistic restricted to the event "no
/// boundary crossed yet", propagated analysis by analysis on a Simpson grid.
///
/// The statistic sequence is Gaussian with independent information
/// increments and mean `theta * sqrt(info)`; conditional on the previous
/// value `z'` at information `I'`, the next value at `I` is normal with mean
/// `(z' sqrt(I') + theta (I - I')) / sqrt(I)` and variance `(I - I') / I`.
pub struct DensityRecursion {
    theta: f64,
    grid_points: usize,
    started: bool,
    info_prev: f64,
    nodes: Vec<f64>,
    dens: Vec<f64>,
    weights: Vec<f64>,
}

fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    debug_assert!(n >= 3 && n % 2 == 1);
    (0..n)
        .map(|i| {
            let c = if i == 0 || i == n - 1 {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            c * h / 3.0
        })
        .collect()
}

impl DensityRecursion {
    pub fn new(theta: f64, grid_points: usize) -> Self {
        assert!(grid_points >= 3 && grid_points % 2 == 1, "grid must be odd and at least 3");
        DensityRecursion {
            theta,
            grid_points,
            started: false,
            info_prev: 0.0,
            nodes: Vec::new(),
            dens: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Probability of reaching the next analysis (at `info`) without prior
    /// stopping and landing at or above `b`.
    pub fn upper_prob(&self, info: f64, b: f64) -> f64 {
        if b == f64::INFINITY {
            return 0.0;
        }
        if !self.started {
            return norm_sf(b - self.theta * info.sqrt());
        }
        let delta = info - self.info_prev;
        let si = info.sqrt();
        let sp = self.info_prev.sqrt();
        let sd = (delta / info).sqrt();
        let mut p = 0.0;
        for i in 0..self.nodes.len() {
            let mean = (self.nodes[i] * sp + self.theta * delta) / si;
            p += self.weights[i] * self.dens[i] * norm_sf((b - mean) / sd);
        }
        p
    }

    /// Probability of reaching the next analysis and landing at or below `a`.
    pub fn lower_prob(&self, info: f64, a: f64) -> f64 {
        if a == f64::NEG_INFINITY {
            return 0.0;
        }
        if !self.started {
            return norm_cdf(a - self.theta * info.sqrt());
        }
        let delta = info - self.info_prev;
        let si = info.sqrt();
        let sp = self.info_prev.sqrt();
        let sd = (delta / info).sqrt();
        let mut p = 0.0;
        for i in 0..self.nodes.len() {
            let mean = (self.nodes[i] * sp + self.theta * delta) / si;
            p += self.weights[i] * self.dens[i] * norm_cdf((a - mean) / sd);
        }
        p
    }

    /// Total mass still in play (useful for diagnostics and tests).
    pub fn mass(&self) -> f64 {
        if !self.started {
            return 1.0;
        }
        self.nodes
            .iter()
            .zip(&self.dens)
            .zip(&self.weights)
            .map(|((_, d), w)| d * w)
            .sum()
    }

    /// Fold the continuation region `[a, b]` at `info` into the state.
    pub fn advance(&mut self, info: f64, a: f64, b: f64) {
        let center = self.theta * info.sqrt();
        let lo = a.max(center - TRUNC);
        let hi = b.min(center + TRUNC);
        // Negated form on purpose: also catches NaN bounds.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(hi > lo) {
            // Continuation region is empty (or entirely outside the numerical
            // support): everything has stopped.
            self.nodes = vec![center];
            self.dens = vec![0.0];
            self.weights = vec![0.0];
            self.started = true;
            self.info_prev = info;
            return;
        }
        let g = self.grid_points;
        let h = (hi - lo) / (g - 1) as f64;
        let new_nodes: Vec<f64> = (0..g).map(|i| lo + i as f64 * h).collect();
        let new_dens: Vec<f64> = if !self.started {
            new_nodes.iter().map(|&z| norm_pdf(z - center)).collect()
        } else {
            let delta = info - self.info_prev;
            let si = info.sqrt();
            let sp = self.info_prev.sqrt();
            let sd = (delta / info).sqrt();
            new_nodes
                .iter()
                .map(|&z| {
                    let mut d = 0.0;
                    for i in 0..self.nodes.len() {
                        let mean = (self.nodes[i] * sp + self.theta * delta) / si;
                        d += self.weights[i] * self.dens[i] * norm_pdf((z - mean) / sd) / sd;
                    }
                    d
                })
                .collect()
        };
        self.nodes = new_nodes;
        self.dens = new_dens;
        self.weights = simpson_weights(g, h);
        self.started = true;
        self.info_prev = info;
    }

    /// Solve the upper bound whose crossing mass at `info` equals `target`.
    pub fn solve_upper(&self, info: f64, target: f64, analysis: usize) -> Result<f64, GstError> {
        let center = self.theta * info.sqrt();
        let mut lo = center - 14.0;
        let mut hi = center + 9.0;
        if self.upper_prob(info, lo) < target - 1e-13 {
            return Err(GstError::InfeasibleSpending(analysis));
        }
        for _ in 0..80 {
            if hi - lo <= 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.upper_prob(info, mid) >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Solve the lower bound whose crossing mass equals `target`, capped at
    /// `cap` (a futility bound may never sit above the efficacy bound; when
    /// the requested mass is unreachable the bound saturates at the cap).
    pub fn solve_lower_capped(&self, info: f64, target: f64, cap: f64) -> f64 {
        let center = self.theta * info.sqrt();
        let mut lo = center - 14.0;
        let mut hi = cap.min(center + 9.0);
        if hi <= lo {
            return hi.min(lo);
        }
        if self.lower_prob(info, hi) <= target {
            return hi;
        }
        for _ in 0..80 {
            if hi - lo <= 1e-12 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.lower_prob(info, mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// A full set of stopping boundaries with the schedule they were built on.
#[derive(Debug, Clone)]
pub struct GstBoundaries {
    /// Information levels the bounds sit at.
    pub info: Vec<f64>,
    /// Efficacy bounds; `+inf` marks an analysis with no efficacy spend.
    pub upper: Vec<f64>,
    /// Futility bounds; `-inf` marks an analysis with no futility spend.
    pub lower: Vec<f64>,
    pub alpha_cum: Vec<f64>,
    pub beta_cum: Vec<f64>,
}

fn validate_fractions(fractions: &[f64]) -> Result<(), GstError> {
    if fractions.is_empty() {
        return Err(GstError::BadFractions);
    }
    let k = fractions.len();
    for (i, &f) in fractions.iter().enumerate() {
        if !(f.is_finite() && f > 0.0 && f <= 1.0 + 1e-9) {
            return Err(GstError::BadFractions);
        }
        if i > 0 && f < fractions[i - 1] {
            return Err(GstError::BadFractions);
        }
    }
    if (fractions[k - 1] - 1.0).abs() > 1e-9 {
        return Err(GstError::BadFractions);
    }
    Ok(())
}

const SPEND_FLOOR: f64 = 1e-12;

/// Boundaries of the planned design at the planned information fractions.
/// `drift` is the mean of the standardized statistic per unit square-root
/// information under the design alternative.
pub fn canonical_boundaries(
    fractions: &[f64],
    i_max: f64,
    alpha: f64,
    beta: f64,
    exponent: f64,
    drift: f64,
    grid_points: usize,
) -> Result<GstBoundaries, GstError> {
    validate_fractions(fractions)?;
    let kk = fractions.len();
    let info: Vec<f64> = fractions.iter().map(|f| f * i_max).collect();
    let alpha_cum = spending_cumulative(alpha, fractions, exponent);
    let beta_cum = spending_cumulative(beta, fractions, exponent);

    // Efficacy side under the null, futility ignored.
    let mut upper = Vec::with_capacity(kk);
    let mut rec = DensityRecursion::new(0.0, grid_points);
    let mut prev = 0.0;
    for k in 0..kk {
        let inc = alpha_cum[k] - prev;
        prev = alpha_cum[k];
        let b = if inc <= SPEND_FLOOR {
            f64::INFINITY
        } else {
            rec.solve_upper(info[k], inc, k)?
        };
        upper.push(b);
        if k + 1 < kk {
            rec.advance(info[k], f64::NEG_INFINITY, b);
        }
    }

    // Futility side under the alternative, both bounds binding.
    let mut lower = Vec::with_capacity(kk);
    let mut rec = DensityRecursion::new(drift, grid_points);
    let mut prev = 0.0;
    for k in 0..kk {
        let a = if k == kk - 1 {
            upper[k]
        } else {
            let inc = beta_cum[k] - prev;
            prev = beta_cum[k];
            if inc <= SPEND_FLOOR {
                f64::NEG_INFINITY
            } else {
                rec.solve_lower_capped(info[k], inc, upper[k])
            }
        };
        lower.push(a);
        if k + 1 < kk {
            rec.advance(info[k], a, upper[k]);
        }
    }
    Ok(GstBoundaries { info, upper, lower, alpha_cum, beta_cum })
}

/// Probability of ever crossing the efficacy bounds (futility ignored) when
/// the standardized statistic drifts at `drift` per unit square-root
/// information.
pub fn upper_crossing_power(
    info: &[f64],
    upper: &[f64],
    drift: f64,
    grid_points: usize,
) -> f64 {
    let mut rec = DensityRecursion::new(drift, grid_points);
    let mut p = 0.0;
    for (k, (&i, &b)) in info.iter().zip(upper).enumerate() {
        p += rec.upper_prob(i, b);
        if k + 1 < info.len() {
            rec.advance(i, f64::NEG_INFINITY, b);
        }
    }
    p
}

/// Smallest maximum information whose efficacy bounds reach power
/// `1 - beta` at the given drift.  Under the null the bound recursion
/// depends only on the fractions, so the bounds are solved once and the
/// power equation is a clean bisection in the information scale.
pub fn imax_for_power(
    fractions: &[f64],
    alpha: f64,
    beta: f64,
    exponent: f64,
    drift: f64,
    grid_points: usize,
) -> Result<f64, GstError> {
    validate_fractions(fractions)?;
    let kk = fractions.len();
    let alpha_cum = spending_cumulative(alpha, fractions, exponent);

    // Bounds under the null at unit maximum information; they do not move
    // with the information scale.
    let mut upper = Vec::with_capacity(kk);
    let mut rec = DensityRecursion::new(0.0, grid_points);
    let mut prev = 0.0;
    for k in 0..kk {
        let inc = alpha_cum[k] - prev;
        prev = alpha_cum[k];
        let b = if inc <= SPEND_FLOOR {
            f64::INFINITY
        } else {
            rec.solve_upper(fractions[k], inc, k)?
        };
        upper.push(b);
        if k + 1 < kk {
            rec.advance(fractions[k], f64::NEG_INFINITY, b);
        }
    }

    // Single-look requirement anchors the bracket.
    let fixed = {
        let za = norm_quantile(1.0 - alpha);
        let zb = norm_quantile(1.0 - beta);
        ((za + zb) / drift).powi(2)
    };
    let power_at = |i_max: f64| {
        let info: Vec<f64> = fractions.iter().map(|f| f * i_max).collect();
        upper_crossing_power(&info, &upper, drift, grid_points)
    };
    let target = 1.0 - beta;
    let mut lo = 0.25 * fixed;
    let mut hi = 4.0 * fixed;
    let p_lo = power_at(lo);
    let p_hi = power_at(hi);
    if !(p_lo < target && p_hi > target) {
        return Err(GstError::BracketFailure(p_lo, p_hi));
    }
    for _ in 0..70 {
        if hi - lo <= 1e-9 * fixed {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if power_at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Boundaries built directly on the estimated joint distribution of the
/// standardized statistics.  `cov` is the estimated covariance matrix of the
/// treatment-effect estimates across all planned analyses; spending runs on
/// the estimated information fractions.  Each rectangle probability uses the
/// same seed, so the root-finds see a smooth deterministic curve.
#[allow(clippy::too_many_arguments)]
pub fn method2_boundaries(
    cov: &[Vec<f64>],
    i_max: f64,
    alpha: f64,
    beta: f64,
    exponent: f64,
    drift: f64,
    accuracy: f64,
    seed: u64,
) -> Result<GstBoundaries, GstError> {
    let kk = cov.len();
    let mut info = Vec::with_capacity(kk);
    for k in 0..kk {
        let v = cov[k][k];
        if !(v.is_finite() && v > 0.0) {
            return Err(GstError::NegativeVariance(k));
        }
        info.push(1.0 / v);
    }
    // Correlation matrix, gated on strict positive definiteness up front.
    let mut corr = vec![0.0f64; kk * kk];
    for i in 0..kk {
        for j in 0..kk {
            corr[i * kk + j] = cov[i][j] / (cov[i][i] * cov[j][j]).sqrt();
        }
    }
    if cholesky(&corr, kk).is_none() {
        return Err(GstError::NotPositiveDefinite);
    }

    let mut fractions: Vec<f64> = info.iter().map(|&i| (i / i_max).min(1.0)).collect();
    fractions[kk - 1] = 1.0;
    let mut alpha_cum = Vec::with_capacity(kk);
    let mut beta_cum = Vec::with_capacity(kk);
    let mut ra = 0.0f64;
    let mut rb = 0.0f64;
    for (k, &f) in fractions.iter().enumerate() {
        let ca = if k == kk - 1 { alpha } else { alpha * f.powf(exponent) };
        let cb = if k == kk - 1 { beta } else { beta * f.powf(exponent) };
        ra = ra.max(ca.min(alpha));
        rb = rb.max(cb.min(beta));
        alpha_cum.push(ra);
        beta_cum.push(rb);
    }

    let sub = |n: usize| -> Vec<f64> {
        let mut m = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..n {
                m[i * n + j] = corr[i * kk + j];
            }
        }
        m
    };

    // Efficacy bounds under the null distribution of the estimated sequence.
    let mut upper: Vec<f64> = Vec::with_capacity(kk);
    let mut prev = 0.0f64;
    for k in 0..kk {
        let inc = alpha_cum[k] - prev;
        prev = alpha_cum[k];
        let b = if inc <= SPEND_FLOOR {
            f64::INFINITY
        } else if k == 0 {
            norm_quantile(1.0 - inc)
        } else {
            let m = sub(k + 1);
            let lo = vec![f64::NEG_INFINITY; k + 1];
            let mut hi = upper[..k].to_vec();
            hi.push(f64::INFINITY);
            let r = rect_prob_root(
                &lo,
                &hi,
                &m,
                MovingBound::Lower,
                (-2.0, 9.0),
                inc,
                accuracy,
                3e-4,
                seed,
            )?;
            if !r.bracketed && r.p_lo < inc {
                // Even a bound far below the continuation region cannot
                // spend this much: the increment is unreachable.
                return Err(GstError::InfeasibleSpending(k));
            }
            r.root
        };
        upper.push(b);
    }

    // Futility bounds under the shifted alternative.
    let shift: Vec<f64> = info.iter().map(|&i| drift * i.sqrt()).collect();
    let mut lower: Vec<f64> = Vec::with_capacity(kk);
    let mut prev = 0.0f64;
    for k in 0..kk {
        if k == kk - 1 {
            lower.push(upper[k]);
            break;
        }
        let inc = beta_cum[k] - prev;
        prev = beta_cum[k];
        let a = if inc <= SPEND_FLOOR {
            f64::NEG_INFINITY
        } else if k == 0 {
            (shift[0] + norm_quantile(inc)).min(upper[0])
        } else {
            let m = sub(k + 1);
            let mut lo: Vec<f64> = (0..k)
                .map(|j| {
                    if lower[j] == f64::NEG_INFINITY {
                        f64::NEG_INFINITY
                    } else {
                        lower[j] - shift[j]
                    }
                })
                .collect();
            let mut hi: Vec<f64> = (0..k)
                .map(|j| {
                    if upper[j] == f64::INFINITY {
                        f64::INFINITY
                    } else {
                        upper[j] - shift[j]
                    }
                })
                .collect();
            lo.push(f64::NEG_INFINITY);
            hi.push(f64::NAN); // moving bound, supplied by the solver
            let cap = upper[k].min(shift[k] + 9.0);
            let r = rect_prob_root(
                &lo,
                &hi,
                &m,
                MovingBound::Upper,
                (-14.0, cap - shift[k]),
                inc,
                accuracy,
                3e-4,
                seed,
            )?;
            if !r.bracketed && r.p_hi <= inc {
                // Full spending is unreachable below the cap; the futility
                // bound sits at the cap and underspends.
                cap
            } else {
                r.root + shift[k]
            }
        };
        lower.push(a);
    }
    Ok(GstBoundaries { info, upper, lower, alpha_cum, beta_cum })
}

/// How a sequential trial ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    /// Efficacy: the null was rejected.
    Reject,
    /// Futility or the end of the trial without crossing: the null stands.
    Accept,
}

#[derive(Debug, Clone, Copy)]
pub struct TrialOutcome {
    pub decision: Decision,
    /// Zero-based analysis at which the trial stopped.
    pub analysis: usize,
}

/// Walk standardized statistics through a set of boundaries.  Sentinel
/// bounds (`+inf` / `-inf`) can never be crossed.  Well-formed boundaries
/// have the two sides meet at the final look, so the walk always stops; a
/// statistic strictly inside an ill-formed final continuation region counts
/// as an acceptance.
pub fn run_trial(z: &[f64], upper: &[f64], lower: &[f64]) -> TrialOutcome {
    let kk = z.len();
    for k in 0..kk {
        if z[k] >= upper[k] {
            return TrialOutcome { decision: Decision::Reject, analysis: k };
        }
        if z[k] <= lower[k] {
            return TrialOutcome { decision: Decision::Accept, analysis: k };
        }
    }
    TrialOutcome { decision: Decision::Accept, analysis: kk - 1 }
}

/// Result of the recombination walk: the outcome plus the per-analysis
/// recombined information, bounds, and statistics up to the stopping point.
#[derive(Debug, Clone)]
pub struct Method3Run {
    pub outcome: TrialOutcome,
    pub info: Vec<f64>,
    pub upper: Vec<f64>,
    pub lower: Vec<f64>,
    pub z: Vec<f64>,
}

/// Sequential generalized-least-squares recombination.  `cov` and `etas`
/// cover all planned analyses of one trial; the walk consumes leading
/// blocks, stopping at the first boundary crossing.
#[allow(clippy::too_many_arguments)]
pub fn method3_run(
    cov: &[Vec<f64>],
    etas: &[f64],
    i_max: f64,
    alpha: f64,
    beta: f64,
    exponent: f64,
    drift: f64,
    grid_points: usize,
) -> Result<Method3Run, GstError> {
    let kk = cov.len();
    assert_eq!(etas.len(), kk);
    let mut alpha_rec = DensityRecursion::new(0.0, grid_points);
    let mut beta_rec = DensityRecursion::new(drift, grid_points);
    let mut info = Vec::new();
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    let mut zs = Vec::new();
    let mut prev_info = 0.0f64;
    let mut prev_ca = 0.0f64;
    let mut prev_cb = 0.0f64;
    for k in 0..kk {
        let m = k + 1;
        let mut flat = vec![0.0f64; m * m];
        for i in 0..m {
            for j in 0..m {
                flat[i * m + j] = cov[i][j];
            }
        }
        let ones = vec![1.0f64; m];
        let sol = solve_spd(&flat, m, &ones).ok_or(GstError::SingularCovariance(k))?;
        let it: f64 = sol.iter().sum();
        if !(it.is_finite() && it > 0.0) {
            return Err(GstError::NegativeVariance(k));
        }
        if it <= prev_info {
            return Err(GstError::NonIncreasingInformation(k));
        }
        let eta_comb: f64 = sol.iter().zip(etas).map(|(w, e)| w * e).sum::<f64>() / it;
        let z = -eta_comb * it.sqrt();

        let frac = if k == kk - 1 { 1.0 } else { (it / i_max).min(1.0) };
        let ca = if k == kk - 1 { alpha } else { (alpha * frac.powf(exponent)).min(alpha) }
            .max(prev_ca);
        let cb = if k == kk - 1 { beta } else { (beta * frac.powf(exponent)).min(beta) }
            .max(prev_cb);
        let inc_a = ca - prev_ca;
        let b = if inc_a <= SPEND_FLOOR {
            f64::INFINITY
        } else {
            alpha_rec.solve_upper(it, inc_a, k)?
        };
        let a = if k == kk - 1 {
            b
        } else {
            let inc_b = cb - prev_cb;
            if inc_b <= SPEND_FLOOR {
                f64::NEG_INFINITY
            } else {
                beta_rec.solve_lower_capped(it, inc_b, b)
            }
        };
        prev_ca = ca;
        prev_cb = cb;
        prev_info = it;
        info.push(it);
        upper.push(b);
        lower.push(a);
        zs.push(z);

        if z >= b {
            return Ok(Method3Run {
                outcome: TrialOutcome { decision: Decision::Reject, analysis: k },
                info,
                upper,
                lower,
                z: zs,
            });
        }
        if z <= a {
            return Ok(Method3Run {
                outcome: TrialOutcome { decision: Decision::Accept, analysis: k },
                info,
                upper,
                lower,
                z: zs,
            });
        }
        alpha_rec.advance(it, f64::NEG_INFINITY, b);
        beta_rec.advance(it, a, b);
    }
    let last = kk - 1;
    Ok(Method3Run {
        outcome: TrialOutcome { decision: Decision::Accept, analysis: last },
        info,
        upper,
        lower,
        z: zs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mvn::rect_prob;
    use crate::stats::upper_bvn;
    use approx::assert_abs_diff_eq;

    const GRID: usize = 401;

    fn reference_fractions() -> Vec<f64> {
        vec![0.285, 0.576, 0.815, 0.951, 1.0]
    }

    #[test]
    fn spending_closes_at_the_level() {
        let f = vec![0.25, 0.5, 0.75, 0.9];
        let c = spending_cumulative(0.025, &f, 2.0);
        assert_abs_diff_eq!(c[0], 0.025 * 0.0625, epsilon = 1e-15);
        assert_abs_diff_eq!(c[1], 0.025 * 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(c[3], 0.025, epsilon = 0.0);
        for w in c.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn single_look_reduces_to_the_fixed_test() {
        let b = canonical_boundaries(&[1.0], 42.0, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        assert_abs_diff_eq!(b.upper[0], 1.959963985, epsilon = 1e-7);
        assert_abs_diff_eq!(b.lower[0], b.upper[0], epsilon = 0.0);
    }

    #[test]
    fn two_look_recursion_matches_bivariate_quadrature() {
        let fractions = [0.5, 1.0];
        let i_max = 4.0;
        let b = canonical_boundaries(&fractions, i_max, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        // First bound is an exact normal quantile of the first increment.
        let inc1 = 0.025 * 0.25;
        assert_abs_diff_eq!(b.upper[0], crate::stats::norm_quantile(1.0 - inc1), epsilon = 1e-8);
        // Second increment checked against the closed-form bivariate tail:
        // P(Z1 < b1, Z2 >= b2) with correlation sqrt(1/2).
        let rho = (0.5f64).sqrt();
        let inc2 = 0.025 - inc1;
        let direct = crate::stats::norm_sf(b.upper[1]) - upper_bvn(b.upper[0], b.upper[1], rho);
        assert_abs_diff_eq!(direct, inc2, epsilon = 2e-7);
    }

    #[test]
    fn five_look_type_one_error_confirmed_by_qmc() {
        let fractions = reference_fractions();
        let kk = fractions.len();
        let b = canonical_boundaries(&fractions, 50.0, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        // No-crossing probability under the null via an independent engine.
        let mut corr = vec![0.0f64; kk * kk];
        for i in 0..kk {
            for j in 0..kk {
                let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
                corr[i * kk + j] = (fractions[lo] / fractions[hi]).sqrt();
            }
        }
        let lo = vec![f64::NEG_INFINITY; kk];
        let p = rect_prob(&lo, &b.upper, &corr, 5e-5, 77).unwrap();
        assert!(
            (1.0 - p.value - 0.025).abs() < 6e-4,
            "spent {} instead of 0.025",
            1.0 - p.value
        );
    }

    #[test]
    fn futility_bounds_sit_below_efficacy_and_meet_at_the_end() {
        let fractions = reference_fractions();
        let imax = imax_for_power(&fractions, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let b = canonical_boundaries(&fractions, imax, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let kk = fractions.len();
        for k in 0..kk - 1 {
            assert!(b.lower[k] < b.upper[k], "analysis {k}");
        }
        assert_abs_diff_eq!(b.lower[kk - 1], b.upper[kk - 1], epsilon = 0.0);
        // Futility tightens as information accrues.
        for k in 1..kk - 1 {
            assert!(b.lower[k] > b.lower[k - 1]);
        }
    }

    #[test]
    fn single_look_information_requirement_is_exact() {
        let imax = imax_for_power(&[1.0], 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let za = crate::stats::norm_quantile(0.975);
        let zb = crate::stats::norm_quantile(0.9);
        assert_abs_diff_eq!(imax, ((za + zb) / 0.5).powi(2), epsilon = 5e-3);
    }

    #[test]
    fn sequential_design_needs_more_information_than_fixed() {
        let fractions = reference_fractions();
        let imax = imax_for_power(&fractions, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let fixed = ((crate::stats::norm_quantile(0.975) + crate::stats::norm_quantile(0.9)) / 0.5)
            .powi(2);
        assert!(imax > fixed, "{imax} vs {fixed}");
        assert!(imax < 1.3 * fixed, "{imax} vs {fixed}");
        // Self-consistency: power at the solution is the target.
        let info: Vec<f64> = fractions.iter().map(|f| f * imax).collect();
        let b = canonical_boundaries(&fractions, imax, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let p = upper_crossing_power(&info, &b.upper, 0.5, GRID);
        assert_abs_diff_eq!(p, 0.9, epsilon = 1e-5);
    }

    /// Covariance with the exact sequential structure at the given
    /// information levels.
    fn canonical_cov(info: &[f64]) -> Vec<Vec<f64>> {
        let kk = info.len();
        (0..kk)
            .map(|i| (0..kk).map(|j| 1.0 / info[i.max(j)]).collect())
            .collect()
    }

    #[test]
    fn direct_construction_agrees_with_recursion_on_canonical_structure() {
        let fractions = reference_fractions();
        let imax = imax_for_power(&fractions, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let canon = canonical_boundaries(&fractions, imax, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let info: Vec<f64> = fractions.iter().map(|f| f * imax).collect();
        let cov = canonical_cov(&info);
        let direct = method2_boundaries(&cov, imax, 0.025, 0.1, 2.0, 0.5, 5e-5, 4242).unwrap();
        for k in 0..fractions.len() {
            assert!(
                (direct.upper[k] - canon.upper[k]).abs() < 0.05,
                "upper {k}: {} vs {}",
                direct.upper[k],
                canon.upper[k]
            );
            if canon.lower[k].is_finite() {
                assert!(
                    (direct.lower[k] - canon.lower[k]).abs() < 0.05,
                    "lower {k}: {} vs {}",
                    direct.lower[k],
                    canon.lower[k]
                );
            }
        }
    }

    #[test]
    fn direct_construction_rejects_indefinite_correlation() {
        // An impossible correlation pattern: 1-2 and 2-3 nearly perfect,
        // 1-3 strongly negative.
        let cov = vec![
            vec![1.0, 0.95, -0.5],
            vec![0.95, 1.0, 0.95],
            vec![-0.5, 0.95, 1.0],
        ];
        assert!(matches!(
            method2_boundaries(&cov, 3.0, 0.025, 0.1, 2.0, 0.5, 1e-3, 1),
            Err(GstError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn recombination_reduces_to_recursion_on_canonical_structure() {
        let fractions = reference_fractions();
        let imax = imax_for_power(&fractions, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let canon = canonical_boundaries(&fractions, imax, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        let info: Vec<f64> = fractions.iter().map(|f| f * imax).collect();
        let cov = canonical_cov(&info);
        // Estimates tuned to keep the statistic strictly between the
        // futility and efficacy bounds until the final look.
        let last = fractions.len() - 1;
        let etas: Vec<f64> = (0..fractions.len())
            .map(|k| {
                let b = canon.upper[k];
                let a = canon.lower[k];
                let z = if k == last || !a.is_finite() {
                    b - 0.3
                } else {
                    (b - 0.3).max(0.5 * (a + b) + 1e-6)
                };
                -z / info[k].sqrt()
            })
            .collect();
        let run = method3_run(&cov, &etas, imax, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        assert_eq!(run.info.len(), fractions.len());
        for k in 0..fractions.len() {
            assert_abs_diff_eq!(run.info[k], info[k], epsilon = 1e-6 * info[k]);
            assert!(
                (run.upper[k] - canon.upper[k]).abs() < 1e-6,
                "upper {k}: {} vs {}",
                run.upper[k],
                canon.upper[k]
            );
        }
        assert_eq!(run.outcome.decision, Decision::Accept);
        assert_eq!(run.outcome.analysis, fractions.len() - 1);
    }

    #[test]
    fn recombination_stops_early_on_a_strong_signal() {
        let info = vec![10.0, 20.0, 40.0];
        let cov = canonical_cov(&info);
        // Strongly negative estimates push the statistic over the bound.
        let etas = vec![-2.0, -2.0, -2.0];
        let run = method3_run(&cov, &etas, 40.0, 0.025, 0.1, 2.0, 0.5, GRID).unwrap();
        assert_eq!(run.outcome.decision, Decision::Reject);
        assert_eq!(run.outcome.analysis, 0);
        assert_eq!(run.z.len(), 1, "no statistics past the stopping analysis");
    }

    #[test]
    fn recombination_fails_on_singular_history() {
        let cov = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let etas = vec![0.0, 0.0];
        let out = method3_run(&cov, &etas, 10.0, 0.025, 0.1, 2.0, 0.5, GRID);
        assert!(matches!(out, Err(GstError::SingularCovariance(1))), "{out:?}");
    }

    #[test]
    fn walk_skips_sentinel_bounds() {
        let z = [5.0, 0.0];
        let upper = [f64::INFINITY, 2.0];
        let lower = [f64::NEG_INFINITY, 2.0];
        let out = run_trial(&z, &upper, &lower);
        assert_eq!(out.decision, Decision::Accept);
        assert_eq!(out.analysis, 1);
        let out = run_trial(&[5.0, 3.0], &upper, &lower);
        assert_eq!(out.decision, Decision::Reject);
        assert_eq!(out.analysis, 1);
    }

    #[test]
    fn recursion_mass_stays_normalized() {
        // With no stopping at all, the sub-density must integrate to one.
        let mut rec = DensityRecursion::new(0.3, GRID);
        rec.advance(5.0, f64::NEG_INFINITY, f64::INFINITY);
        assert_abs_diff_eq!(rec.mass(), 1.0, epsilon = 1e-9);
        rec.advance(9.0, f64::NEG_INFINITY, f64::INFINITY);
        assert_abs_diff_eq!(rec.mass(), 1.0, epsilon = 1e-9);
        // Splitting at a bound conserves mass: continue + cross = 1.
        let mut rec = DensityRecursion::new(0.0, GRID);
        let cross1 = rec.upper_prob(2.0, 1.5);
        rec.advance(2.0, f64::NEG_INFINITY, 1.5);
        assert_abs_diff_eq!(rec.mass() + cross1, 1.0, epsilon = 1e-9);
    }

    mod properties {
        use super::*;
        use crate::stats::norm_sf;
        use proptest::prelude::*;

        /// Strictly increasing fractions ending at one, with a floor on every
        /// increment so no spending increment can underflow the solver floor.
        fn fractions_strategy(k: usize) -> impl Strategy<Value = Vec<f64>> {
            proptest::collection::vec(0.08f64..1.0, k).prop_map(|incs| {
                let total: f64 = incs.iter().sum();
                let mut acc = 0.0;
                incs.iter()
                    .map(|i| {
                        acc += i / total;
                        acc.min(1.0)
                    })
                    .collect()
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            /// For two-look designs the recursion must agree with the closed
            /// bivariate normal: the statistics are jointly normal with
            /// correlation sqrt(f1/f2).
            #[test]
            fn two_look_efficacy_matches_bivariate_normal(
                fractions in fractions_strategy(2),
                alpha in 0.005f64..0.05,
                exponent in 0.5f64..3.0,
                i_max in 20.0f64..80.0,
            ) {
                let b = canonical_boundaries(&fractions, i_max, alpha, 0.1, exponent, 0.5, GRID)
                    .unwrap();
                let rho = (fractions[0] / fractions[1]).sqrt();
                let p1 = norm_sf(b.upper[0]);
                let p2 = norm_sf(b.upper[1]) - upper_bvn(b.upper[0], b.upper[1], rho);
                prop_assert!((p1 - b.alpha_cum[0]).abs() < 2e-6,
                    "first-look crossing {} vs target {}", p1, b.alpha_cum[0]);
                prop_assert!((p1 + p2 - alpha).abs() < 2e-6,
                    "total crossing {} vs level {}", p1 + p2, alpha);
            }

            /// Structural invariants for any admissible design.
            #[test]
            fn boundaries_are_well_formed(
                kk in 2usize..=4,
                raw in fractions_strategy(4),
                alpha in 0.005f64..0.05,
                beta in 0.05f64..0.2,
                exponent in 0.5f64..3.0,
                drift in 0.3f64..0.8,
                i_max in 20.0f64..80.0,
            ) {
                let mut fractions = raw[4 - kk..].to_vec();
                let last = *fractions.last().unwrap();
                for f in &mut fractions {
                    *f /= last;
                }
                let b = canonical_boundaries(
                    &fractions, i_max, alpha, beta, exponent, drift, 201,
                ).unwrap();
                for k in 0..kk {
                    prop_assert!(!b.upper[k].is_nan() && !b.lower[k].is_nan());
                    prop_assert!(b.lower[k] <= b.upper[k] + 1e-12,
                        "bounds crossed at look {}: {} > {}", k, b.lower[k], b.upper[k]);
                    if k > 0 {
                        prop_assert!(b.info[k] > b.info[k - 1]);
                        prop_assert!(b.alpha_cum[k] >= b.alpha_cum[k - 1] - 1e-15);
                        prop_assert!(b.beta_cum[k] >= b.beta_cum[k - 1] - 1e-15);
                    }
                }
                prop_assert_eq!(b.lower[kk - 1], b.upper[kk - 1]);
                prop_assert!((b.alpha_cum[kk - 1] - alpha).abs() < 1e-12);
                prop_assert!((b.beta_cum[kk - 1] - beta).abs() < 1e-12);
            }
        }
    }
}

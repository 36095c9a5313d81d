//! Numeric verification of the efficiency inequalities behind the planned
//! (canonical) boundary construction.
//!
//! The claim under test: when the monitoring statistics are replaced by their
//! efficient recombination, the probability of ever crossing the upper
//! boundary under the null does not decrease — so planned boundaries remain
//! conservative.  For two analyses this reduces to comparing one bivariate
//! upper-orthant probability at two correlations; for three analyses the
//! comparison telescopes through a component-by-component sweep in which the
//! sum of pairwise orthant probabilities (`f`) must grow at least as fast as
//! the trivariate orthant probability (`g`).

use crate::gst::{canonical_boundaries, imax_for_power, GstError};
use crate::stats::{upper_bvn, upper_tvn};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VerifyError {
    /// The inputs violate the standing conditions (ordered boundaries,
    /// ordered correlations); the check does not apply rather than fail.
    #[error("inputs violate the standing conditions: {0}")]
    ConditionViolated(&'static str),
    #[error("orthant quadrature failed: {0}")]
    Quadrature(&'static str),
    #[error(transparent)]
    Gst(#[from] GstError),
}

/// Result of the two-analysis inequality check: upper-orthant probabilities
/// for the recombined (`p_star`) and raw (`p`) correlation, and whether the
/// recombined probability is no larger.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct OrthantOrderingCheck {
    pub rho: f64,
    pub rho_star: f64,
    pub b1: f64,
    pub b2: f64,
    pub p_star: f64,
    pub p: f64,
    pub holds: bool,
}

/// Compare `P(Z1 > b1, Z2 > b2)` at the recombined correlation `rho_star`
/// against the raw correlation `rho`.  Preconditions: `0 <= rho_star <= rho
/// <= 1` and `b1 >= b2 >= 0`.
pub fn orthant_ordering_check(
    rho: f64,
    rho_star: f64,
    b1: f64,
    b2: f64,
    accuracy: f64,
) -> Result<OrthantOrderingCheck, VerifyError> {
    if !(0.0..=1.0).contains(&rho_star) || !(rho_star..=1.0).contains(&rho) {
        return Err(VerifyError::ConditionViolated(
            "correlations must satisfy 0 <= rho_star <= rho <= 1",
        ));
    }
    if !(b2 >= 0.0 && b1 >= b2) {
        return Err(VerifyError::ConditionViolated(
            "boundaries must satisfy b1 >= b2 >= 0",
        ));
    }
    let p_star = upper_bvn(b1, b2, rho_star);
    let p = upper_bvn(b1, b2, rho);
    Ok(OrthantOrderingCheck { rho, rho_star, b1, b2, p_star, p, holds: p_star <= p + accuracy })
}

/// Exhaustive grid for the two-analysis inequality: correlations on a 0.1
/// lattice with `rho_star <= rho`, integer boundaries `b1 in 0..=3`,
/// `0 <= b2 <= b1`.  Returns all checks; the caller asserts every flag.
pub fn orthant_ordering_grid(accuracy: f64) -> Result<Vec<OrthantOrderingCheck>, VerifyError> {
    let mut out = Vec::new();
    for i in 0..=10 {
        let rho_star = i as f64 / 10.0;
        for j in i..=10 {
            let rho = j as f64 / 10.0;
            for b1i in 0..=3 {
                let b1 = b1i as f64;
                for b2i in 0..=b1i {
                    let b2 = b2i as f64;
                    out.push(orthant_ordering_check(rho, rho_star, b1, b2, accuracy)?);
                }
            }
        }
    }
    Ok(out)
}

/// Information profiles for the three-analysis sweep: raw correlations come
/// from the canonical structure of each profile's information fractions, and
/// the recombined correlations divide them by the profile's factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum K3Scenario {
    /// Equally spaced information (1/3, 2/3, 1); divisor 1.2.
    EqualInfo,
    /// Interim analyses carry more information (0.5, 0.8, 1); divisor 1.1.
    FrontLoadedInfo,
    /// Interim analyses carry less information (0.2, 0.5, 1); divisor 1.3.
    BackLoadedInfo,
}

impl K3Scenario {
    pub fn fractions(self) -> [f64; 3] {
        match self {
            K3Scenario::EqualInfo => [1.0 / 3.0, 2.0 / 3.0, 1.0],
            K3Scenario::FrontLoadedInfo => [0.5, 0.8, 1.0],
            K3Scenario::BackLoadedInfo => [0.2, 0.5, 1.0],
        }
    }

    pub fn divisor(self) -> f64 {
        match self {
            K3Scenario::EqualInfo => 1.2,
            K3Scenario::FrontLoadedInfo => 1.1,
            K3Scenario::BackLoadedInfo => 1.3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            K3Scenario::EqualInfo => "equal-info",
            K3Scenario::FrontLoadedInfo => "front-loaded-info",
            K3Scenario::BackLoadedInfo => "back-loaded-info",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "equal-info" => Some(K3Scenario::EqualInfo),
            "front-loaded-info" => Some(K3Scenario::FrontLoadedInfo),
            "back-loaded-info" => Some(K3Scenario::BackLoadedInfo),
            _ => None,
        }
    }

    pub fn all() -> [K3Scenario; 3] {
        [K3Scenario::EqualInfo, K3Scenario::FrontLoadedInfo, K3Scenario::BackLoadedInfo]
    }
}

/// One grid point of a component sweep.
#[derive(Debug, Clone, Serialize)]
pub struct K3Row {
    /// Which correlation component is being swept: "rho12", "rho13", "rho23".
    pub component: &'static str,
    pub value: f64,
    /// The pairwise orthant probability that carries this component.
    pub f_component: f64,
    /// The trivariate orthant probability at this sweep point.
    pub g: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct K3Report {
    pub scenario: &'static str,
    pub fractions: [f64; 3],
    pub divisor: f64,
    /// Raw-statistic correlations (components 12, 13, 23).
    pub rho: [f64; 3],
    /// Recombined-statistic correlations.
    pub rho_star: [f64; 3],
    /// Upper boundaries on the Z scale for these fractions.
    pub bounds: [f64; 3],
    /// True when any correlation had to be clamped into [0, 1] after scaling.
    pub clamped: bool,
    pub rows: Vec<K3Row>,
    /// Largest `Δg − Δf` over consecutive sweep points; the inequality holds
    /// when this never exceeds the accuracy.
    pub max_step_excess: f64,
    /// `g(rho) − g(rho_star)` across the full move.
    pub g_difference: f64,
    /// `f(rho) − f(rho_star)` across the full move.
    pub f_difference: f64,
    pub holds: bool,
}

/// Sweep each correlation component in turn from its recombined value to its
/// raw value, checking at every step that the pairwise sum grows at least as
/// fast as the trivariate orthant probability.  The steps chain end to end,
/// so stepwise dominance implies the aggregate inequality.
pub fn k3_monotonicity(
    scenario: K3Scenario,
    sweep_points: usize,
    accuracy: f64,
) -> Result<K3Report, VerifyError> {
    k3_sweep(
        scenario.label(),
        scenario.fractions(),
        scenario.divisor(),
        sweep_points,
        accuracy,
    )
}

/// Lower-level driver for arbitrary fraction/divisor combinations.
pub fn k3_sweep(
    label: &'static str,
    fractions: [f64; 3],
    divisor: f64,
    sweep_points: usize,
    accuracy: f64,
) -> Result<K3Report, VerifyError> {
    assert!(sweep_points >= 2, "need at least the two endpoints");
    if !(fractions[0] > 0.0 && fractions[0] <= fractions[1] && fractions[1] <= fractions[2]) {
        return Err(VerifyError::ConditionViolated(
            "information fractions must be positive and nondecreasing",
        ));
    }
    if divisor <= 0.0 {
        return Err(VerifyError::ConditionViolated("divisor must be positive"));
    }
    // Canonical correlations of the raw statistics at these fractions.
    let raw = [
        (fractions[0] / fractions[1]).sqrt(),
        (fractions[0] / fractions[2]).sqrt(),
        (fractions[1] / fractions[2]).sqrt(),
    ];
    let mut clamped = false;
    let mut clamp = |x: f64| {
        if x > 1.0 {
            clamped = true;
            1.0
        } else {
            x
        }
    };
    let rho = [clamp(raw[0]), clamp(raw[1]), clamp(raw[2])];
    let rho_star = [clamp(raw[0] / divisor), clamp(raw[1] / divisor), clamp(raw[2] / divisor)];
    for i in 0..3 {
        if rho_star[i] > rho[i] {
            return Err(VerifyError::ConditionViolated(
                "scaled correlations exceed the raw correlations",
            ));
        }
    }

    // Boundaries for a one-sided 0.025-level design at these fractions.
    let frac_vec = fractions.to_vec();
    let i_max = imax_for_power(&frac_vec, 0.025, 0.1, 2.0, 0.5, 201)?;
    let gb = canonical_boundaries(&frac_vec, i_max, 0.025, 0.1, 2.0, 0.5, 201)?;
    let b = [gb.upper[0], gb.upper[1], gb.upper[2]];
    if !(b[0] >= b[1] && b[1] >= b[2] && b[2] >= 0.0) {
        return Err(VerifyError::ConditionViolated(
            "upper boundaries are not nonincreasing and nonnegative",
        ));
    }

    // The three sweep stages: component index, label, the pair of thresholds
    // whose orthant probability carries the component, and the fixed values
    // of the other two components while it moves.  Earlier components sit at
    // their recombined values, later ones at their raw values, so the stage
    // endpoints chain.
    let stages: [(usize, &'static str, (usize, usize)); 3] =
        [(0, "rho12", (0, 1)), (1, "rho13", (0, 2)), (2, "rho23", (1, 2))];
    let mut rows = Vec::with_capacity(3 * sweep_points);
    let mut max_step_excess = f64::NEG_INFINITY;
    let g_at = |r12: f64, r13: f64, r23: f64| -> Result<f64, VerifyError> {
        upper_tvn([b[0], b[1], b[2]], r12, r13, r23).map_err(VerifyError::Quadrature)
    };
    for (ci, name, (bi, bj)) in stages {
        let mut prev: Option<(f64, f64)> = None;
        for s in 0..sweep_points {
            let t = s as f64 / (sweep_points - 1) as f64;
            let x = rho_star[ci] + t * (rho[ci] - rho_star[ci]);
            let mut r = [0.0f64; 3];
            for j in 0..3 {
                r[j] = match j.cmp(&ci) {
                    std::cmp::Ordering::Less => rho_star[j],
                    std::cmp::Ordering::Equal => x,
                    std::cmp::Ordering::Greater => rho[j],
                };
            }
            let f_component = upper_bvn(b[bi], b[bj], x);
            let g = g_at(r[0], r[1], r[2])?;
            if let Some((pf, pg)) = prev {
                let excess = (g - pg) - (f_component - pf);
                if excess > max_step_excess {
                    max_step_excess = excess;
                }
            }
            prev = Some((f_component, g));
            rows.push(K3Row { component: name, value: x, f_component, g });
        }
    }

    let f_sum = |r: &[f64; 3]| {
        upper_bvn(b[0], b[1], r[0]) + upper_bvn(b[0], b[2], r[1]) + upper_bvn(b[1], b[2], r[2])
    };
    let g_difference = g_at(rho[0], rho[1], rho[2])? - g_at(rho_star[0], rho_star[1], rho_star[2])?;
    let f_difference = f_sum(&rho) - f_sum(&rho_star);
    let holds = max_step_excess <= accuracy && g_difference <= f_difference + accuracy;
    Ok(K3Report {
        scenario: label,
        fractions,
        divisor,
        rho,
        rho_star,
        bounds: b,
        clamped,
        rows,
        max_step_excess,
        g_difference,
        f_difference,
        holds,
    })
}

/// Outcome of the full verification battery: the inequality grids, the
/// estimating-equation derivative check, and the curvature-identity check.
#[derive(Debug, Clone, Serialize)]
pub struct VerifySummary {
    pub ordering_checked: usize,
    pub ordering_failures: usize,
    pub k3: Vec<K3Report>,
    pub jacobian_datasets: usize,
    pub jacobian_max_rel_err: f64,
    pub identity_cells: usize,
    pub identity_max_dev: f64,
    pub passed: bool,
}

/// Largest relative error between the analytic derivative matrix of the
/// estimating equation and a central finite difference, over randomized
/// small datasets.
pub fn jacobian_fd_max_err(datasets: usize, seed: u64) -> f64 {
    use crate::config::RunConfig;
    use crate::cscore::{assemble_event_terms, eval};
    use crate::harness::derive_seed;
    use crate::sim::{draw_trial, snapshot};
    use rand::Rng;
    use rand::SeedableRng;

    let mut worst = 0.0f64;
    for d in 0..datasets {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(derive_seed(seed, d as u64));
        let mut cfg = RunConfig::reference();
        cfg.model.sigma_sq = [0.5, 1.0, 10.0][d % 3];
        cfg.model.gamma = -0.05 + 0.1 * rng.random::<f64>();
        cfg.model.eta = -0.8 + 1.6 * rng.random::<f64>();
        cfg.n_patients = 80 + (d % 5) * 20;
        let trial = draw_trial(&cfg.model, &cfg.design, cfg.n_patients, &mut rng);
        let k = d % cfg.design.k();
        let snap = snapshot(&trial, &cfg.design, k);
        let terms = assemble_event_terms(&trial, &snap);
        if terms.is_empty() {
            continue;
        }
        let g = 0.04 * (rng.random::<f64>() - 0.5);
        let e = 0.6 * (rng.random::<f64>() - 0.5);
        let s2 = cfg.model.sigma_sq;
        let parts = eval(&terms, g, e, s2);
        let hg = 1e-6 * (1.0 + g.abs());
        let he = 1e-6 * (1.0 + e.abs());
        let fd = [
            [
                (eval(&terms, g + hg, e, s2).score[0] - eval(&terms, g - hg, e, s2).score[0])
                    / (2.0 * hg),
                (eval(&terms, g, e + he, s2).score[0] - eval(&terms, g, e - he, s2).score[0])
                    / (2.0 * he),
            ],
            [
                (eval(&terms, g + hg, e, s2).score[1] - eval(&terms, g - hg, e, s2).score[1])
                    / (2.0 * hg),
                (eval(&terms, g, e + he, s2).score[1] - eval(&terms, g, e - he, s2).score[1])
                    / (2.0 * he),
            ],
        ];
        let scale = parts
            .jacobian
            .iter()
            .flatten()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1.0);
        for r in 0..2 {
            for c in 0..2 {
                let rel = (parts.jacobian[r][c] - fd[r][c]).abs() / scale;
                if rel > worst {
                    worst = rel;
                }
            }
        }
    }
    worst
}

/// Run every verification suite at its shipped settings.
pub fn run_all(seed: u64) -> Result<VerifySummary, VerifyError> {
    use crate::config::RunConfig;
    use crate::harness::curvature_table;

    let checks = orthant_ordering_grid(1e-9)?;
    let ordering_failures = checks.iter().filter(|c| !c.holds).count();

    let mut k3 = Vec::new();
    for sc in K3Scenario::all() {
        k3.push(k3_monotonicity(sc, 11, 1e-6)?);
    }

    let jacobian_datasets = 50;
    let jacobian_max_rel_err = jacobian_fd_max_err(jacobian_datasets, seed);

    let mut cfg = RunConfig::reference();
    cfg.n_patients = 800;
    cfg.seed = seed;
    let cells = curvature_table(&cfg, &[0.0, 0.03, 0.06, 0.09], &[0.0, 1.0, 10.0, 100.0])
        .map_err(|_| VerifyError::Quadrature("curvature table failed"))?;
    let identity_max_dev = cells
        .iter()
        .map(|c| c.matrix[0][1].abs().max((c.matrix[1][1] - 1.0).abs()))
        .fold(0.0f64, f64::max);

    let passed = ordering_failures == 0
        && k3.iter().all(|r| r.holds)
        && jacobian_max_rel_err < 1e-4
        && identity_max_dev < 1e-10;
    Ok(VerifySummary {
        ordering_checked: checks.len(),
        ordering_failures,
        k3,
        jacobian_datasets,
        jacobian_max_rel_err,
        identity_cells: cells.len(),
        identity_max_dev,
        passed,
    })
}

//! Treatment-only proportional-hazards fit, the comparator analysis that
//! ignores the longitudinal covariate.
//!
//! With a single binary covariate the partial likelihood needs only the
//! at-risk head-count in each arm, so each event term costs O(1) after one
//! sort: `S0 = n0 + n1 e^eta` and the score and observed information follow
//! from it.  Tied event times share one full risk set, each tied failure
//! contributing its own term.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoxError {
    #[error("no events to fit")]
    NoEvents,
    #[error("partial likelihood is monotone (arms separate); no finite estimate")]
    MonotoneLikelihood,
    #[error("Newton failed to converge in {0} iterations (score {1:.3e})")]
    MaxIterations(usize, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct CoxFit {
    /// Log hazard ratio of arm 1 versus arm 0.
    pub eta: f64,
    /// Observed information at the estimate.
    pub info: f64,
    pub n_events: usize,
    pub iterations: usize,
}

impl CoxFit {
    /// Standardized test statistic oriented so benefit (negative `eta`) is
    /// positive.
    pub fn z(&self) -> f64 {
        -self.eta * self.info.sqrt()
    }
}

/// Per-event sufficient statistics: arm head-counts of the risk set and the
/// failing subject's arm.
struct EventSlice {
    n0: f64,
    n1: f64,
    z: f64,
}

fn event_slices(subjects: &[(f64, bool, u8)]) -> Vec<EventSlice> {
    let mut order: Vec<usize> = (0..subjects.len()).collect();
    order.sort_by(|&a, &b| subjects[a].0.total_cmp(&subjects[b].0));
    let mut slices = Vec::new();
    let mut n0 = 0.0f64;
    let mut n1 = 0.0f64;
    // Sweep from the latest time backwards; everyone sharing a time joins the
    // risk set before any of their events is processed.
    let mut i = order.len();
    while i > 0 {
        let hi = i;
        let t = subjects[order[hi - 1]].0;
        while i > 0 && subjects[order[i - 1]].0 == t {
            let (_, _, z) = subjects[order[i - 1]];
            if z == 1 {
                n1 += 1.0;
            } else {
                n0 += 1.0;
            }
            i -= 1;
        }
        for &idx in &order[i..hi] {
            let (_, event, z) = subjects[idx];
            if event {
                slices.push(EventSlice { n0, n1, z: f64::from(z) });
            }
        }
    }
    slices
}

/// Fit the one-parameter model to `(time, event, arm)` triples by Newton
/// iteration on the concave partial log-likelihood.
pub fn fit_cox(subjects: &[(f64, bool, u8)]) -> Result<CoxFit, CoxError> {
    let slices = event_slices(subjects);
    if slices.is_empty() {
        return Err(CoxError::NoEvents);
    }
    const MAX_ITER: usize = 50;
    let tol = 1e-10 * (1.0 + slices.len() as f64);
    let mut eta = 0.0f64;
    let mut iterations = 0usize;
    for it in 1..=MAX_ITER {
        let e = eta.exp();
        let mut score = 0.0f64;
        let mut info = 0.0f64;
        for s in &slices {
            let s0 = s.n0 + s.n1 * e;
            let p1 = s.n1 * e / s0;
            score += s.z - p1;
            info += p1 * (1.0 - p1);
        }
        if score.abs() <= tol {
            return Ok(CoxFit { eta, info, n_events: slices.len(), iterations: it - 1 });
        }
        iterations = it;
        if info <= 0.0 {
            return Err(CoxError::MonotoneLikelihood);
        }
        eta += score / info;
        // A log hazard ratio this large never arises from real risk sets;
        // the likelihood is increasing toward an infinite estimate.
        if eta.abs() > 15.0 {
            return Err(CoxError::MonotoneLikelihood);
        }
    }
    // Re-evaluate once more to report the final score.
    let e = eta.exp();
    let mut score = 0.0f64;
    let mut info = 0.0f64;
    for s in &slices {
        let s0 = s.n0 + s.n1 * e;
        let p1 = s.n1 * e / s0;
        score += s.z - p1;
        info += p1 * (1.0 - p1);
    }
    if score.abs() <= tol {
        Ok(CoxFit { eta, info, n_events: slices.len(), iterations })
    } else {
        Err(CoxError::MaxIterations(MAX_ITER, score.abs()))
    }
}

//! Multivariate normal rectangle probabilities.
//!
//! `rect_prob` computes `P(lower < X < upper)` for `X ~ N(0, cov)` by the
//! separation-of-variables transform: factor `cov = L L^T`, substitute
//! sequentially conditioned uniforms, and integrate the resulting product of
//! one-dimensional interval masses with a randomized rank-1 lattice rule
//! (Richtmyer generators, baker's transform, independent random shifts).  The
//! spread across shifts gives an honest standard-error estimate; the sample
//! size grows geometrically until the requested accuracy is met or the point
//! budget runs out, and the achieved error is always reported.
//!
//! Semidefinite but singular covariances are handled (degenerate columns
//! become deterministic); indefinite input is an error — deciding that is the
//! caller's job, e.g. the full-covariance boundary method treats it as its
//! documented failure mode.

use crate::linalg::cholesky_psd;
use crate::stats::{norm_cdf, norm_quantile};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MvnError {
    #[error("covariance matrix is not positive semidefinite")]
    NotPositiveSemiDefinite,
    #[error("bad rectangle bounds: lower[{0}] > upper[{0}]")]
    BadBounds(usize),
    #[error("dimension mismatch between bounds and covariance")]
    DimensionMismatch,
}

#[derive(Debug, Clone, Copy)]
pub struct RectProb {
    pub value: f64,
    /// Standard error estimated from the spread of the randomized batches;
    /// exactly zero for the one-dimensional closed form.
    pub std_error: f64,
    /// Total integration points spent.
    pub points: usize,
}

/// Number of independent lattice shifts; their spread yields the SE estimate.
const BATCHES: usize = 12;
/// Hard ceiling on total points before giving up on the requested accuracy.
const MAX_POINTS: usize = 1 << 22;

const PRIMES: [u64; 24] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
];

/// `P(lower < X < upper)` for `X ~ N(0, cov)`, `cov` flat row-major `k x k`.
/// Use `f64::NEG_INFINITY` / `f64::INFINITY` for half-open rectangles.
pub fn rect_prob(
    lower: &[f64],
    upper: &[f64],
    cov: &[f64],
    accuracy: f64,
    seed: u64,
) -> Result<RectProb, MvnError> {
    let k = lower.len();
    if upper.len() != k || cov.len() != k * k {
        return Err(MvnError::DimensionMismatch);
    }
    for i in 0..k {
        if lower[i] > upper[i] {
            return Err(MvnError::BadBounds(i));
        }
    }
    let l = cholesky_psd(cov, k).ok_or(MvnError::NotPositiveSemiDefinite)?;
    if k == 1 {
        let sd = l[0].max(f64::MIN_POSITIVE);
        let value = interval_mass(lower[0] / sd, upper[0] / sd);
        return Ok(RectProb { value, std_error: 0.0, points: 0 });
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gens: Vec<f64> = PRIMES[..k - 1].iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let mut n_per_batch = 512usize;
    let mut total_points = 0usize;
    loop {
        let mut batch_means = [0.0f64; BATCHES];
        for mean in batch_means.iter_mut() {
            let shifts: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            for i in 0..n_per_batch {
                let fi = (i + 1) as f64;
                acc += genz_point(lower, upper, &l, k, &gens, &shifts, fi);
            }
            *mean = acc / n_per_batch as f64;
        }
        total_points += BATCHES * n_per_batch;
        let value = batch_means.iter().sum::<f64>() / BATCHES as f64;
        let var = batch_means.iter().map(|m| (m - value).powi(2)).sum::<f64>()
            / (BATCHES as f64 * (BATCHES - 1) as f64);
        let std_error = var.sqrt();
        if std_error <= accuracy || total_points >= MAX_POINTS {
            return Ok(RectProb { value, std_error, points: total_points });
        }
        n_per_batch *= 2;
    }
}

/// Which bound of the LAST coordinate `rect_prob_root` solves for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MovingBound {
    /// Solve on the last coordinate's lower bound; the probability is
    /// decreasing in it.
    Lower,
    /// Solve on the last coordinate's upper bound; the probability is
    /// increasing in it.
    Upper,
}

#[derive(Debug, Clone, Copy)]
pub struct RootProb {
    /// The solved bound (midpoint of the final bisection bracket); one end of
    /// the input bracket when `bracketed` is false.
    pub root: f64,
    /// Rectangle probability at `root`.
    pub value: f64,
    pub std_error: f64,
    pub points: usize,
    /// Probabilities at the two bracket ends.
    pub p_lo: f64,
    pub p_hi: f64,
    /// False when the target lies outside `[min(p_lo, p_hi), max(p_lo, p_hi)]`;
    /// the caller decides what an unreachable target means.
    pub bracketed: bool,
}

/// Solve `P(rect) = target` over one bound of the LAST coordinate, holding
/// everything else fixed.  The coordinates before the last are sampled once
/// per accuracy round and reused for every candidate bound, so the bisection
/// costs one conditional cdf per stored point per probe instead of a full
/// integration — the frozen point set also makes the sampled curve exactly
/// monotone in the bound.  The entry of `lower` / `upper` on the moving side's
/// last position is ignored.  `width` is the bisection's terminal bracket
/// width on the bound scale.
#[allow(clippy::too_many_arguments)]
pub fn rect_prob_root(
    lower: &[f64],
    upper: &[f64],
    cov: &[f64],
    moving: MovingBound,
    bracket: (f64, f64),
    target: f64,
    accuracy: f64,
    width: f64,
    seed: u64,
) -> Result<RootProb, MvnError> {
    let k = lower.len();
    if upper.len() != k || cov.len() != k * k || k == 0 {
        return Err(MvnError::DimensionMismatch);
    }
    for i in 0..k.saturating_sub(1) {
        if lower[i] > upper[i] {
            return Err(MvnError::BadBounds(i));
        }
    }
    assert!(bracket.0 <= bracket.1, "root bracket must be ordered");
    let l = cholesky_psd(cov, k).ok_or(MvnError::NotPositiveSemiDefinite)?;

    if k == 1 {
        // Closed form: invert the one-dimensional interval mass directly.
        let sd = l[0].max(f64::MIN_POSITIVE);
        let solve = |b: f64| -> f64 {
            match moving {
                MovingBound::Lower => interval_mass(b / sd, upper[0] / sd),
                MovingBound::Upper => interval_mass(lower[0] / sd, b / sd),
            }
        };
        let p_lo = solve(bracket.0);
        let p_hi = solve(bracket.1);
        let (pmin, pmax) = (p_lo.min(p_hi), p_lo.max(p_hi));
        let bracketed = (pmin..=pmax).contains(&target);
        let root = if !bracketed {
            if (p_lo - target).abs() <= (p_hi - target).abs() { bracket.0 } else { bracket.1 }
        } else {
            match moving {
                MovingBound::Lower => {
                    let base = if upper[0] == f64::INFINITY { 1.0 } else { norm_cdf(upper[0] / sd) };
                    sd * norm_quantile((base - target).clamp(1e-300, 1.0))
                }
                MovingBound::Upper => {
                    let base = if lower[0] == f64::NEG_INFINITY { 0.0 } else { norm_cdf(lower[0] / sd) };
                    sd * norm_quantile((base + target).clamp(1e-300, 1.0))
                }
            }
            .clamp(bracket.0, bracket.1)
        };
        return Ok(RootProb {
            root,
            value: solve(root),
            std_error: 0.0,
            points: 0,
            p_lo,
            p_hi,
            bracketed,
        });
    }

    let last = k - 1;
    let diag = l[last * k + last];
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let gens: Vec<f64> = PRIMES[..k - 1].iter().map(|&p| (p as f64).sqrt().fract()).collect();
    let mut n_per_batch = 512usize;
    let mut total_points = 0usize;
    // Per-point partial weight through the first k-1 coordinates and the
    // conditioning shift of the last coordinate, stored per batch.
    let mut w = vec![0.0f64; BATCHES * n_per_batch];
    let mut s = vec![0.0f64; BATCHES * n_per_batch];
    loop {
        w.resize(BATCHES * n_per_batch, 0.0);
        s.resize(BATCHES * n_per_batch, 0.0);
        for batch in 0..BATCHES {
            let shifts: Vec<f64> = (0..k - 1).map(|_| rng.random::<f64>()).collect();
            for i in 0..n_per_batch {
                let fi = (i + 1) as f64;
                let (wi, si) = genz_partial(lower, upper, &l, k, &gens, &shifts, fi);
                w[batch * n_per_batch + i] = wi;
                s[batch * n_per_batch + i] = si;
            }
        }
        total_points += BATCHES * n_per_batch;

        let eval = |b: f64| -> (f64, f64) {
            let (lo_b, hi_b) = match moving {
                MovingBound::Lower => (b, upper[last]),
                MovingBound::Upper => (lower[last], b),
            };
            let mut means = [0.0f64; BATCHES];
            for (batch, mean) in means.iter_mut().enumerate() {
                let mut acc = 0.0;
                for i in 0..n_per_batch {
                    let wi = w[batch * n_per_batch + i];
                    if wi > 0.0 {
                        let (d, e) = edge_probs(lo_b, hi_b, s[batch * n_per_batch + i], diag);
                        acc += wi * (e - d).max(0.0);
                    }
                }
                *mean = acc / n_per_batch as f64;
            }
            let value = means.iter().sum::<f64>() / BATCHES as f64;
            let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>()
                / (BATCHES as f64 * (BATCHES - 1) as f64);
            (value, var.sqrt())
        };

        let (p_lo, _) = eval(bracket.0);
        let (p_hi, _) = eval(bracket.1);
        let (pmin, pmax) = (p_lo.min(p_hi), p_lo.max(p_hi));
        let bracketed = (pmin..=pmax).contains(&target);
        let root = if !bracketed {
            if (p_lo - target).abs() <= (p_hi - target).abs() { bracket.0 } else { bracket.1 }
        } else {
            let increasing = matches!(moving, MovingBound::Upper);
            let (mut lo, mut hi) = bracket;
            while hi - lo > width {
                let mid = 0.5 * (lo + hi);
                let v = eval(mid).0;
                let go_up = if increasing { v <= target } else { v >= target };
                if go_up {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let (value, std_error) = eval(root);
        if std_error <= accuracy || total_points >= MAX_POINTS {
            return Ok(RootProb { root, value, std_error, points: total_points, p_lo, p_hi, bracketed });
        }
        n_per_batch *= 2;
    }
}

/// One lattice point transformed through the first `k - 1` coordinates:
/// returns the accumulated interval-mass product and the conditioning shift
/// of the last coordinate.
fn genz_partial(
    lower: &[f64],
    upper: &[f64],
    l: &[f64],
    k: usize,
    gens: &[f64],
    shifts: &[f64],
    fi: f64,
) -> (f64, f64) {
    let mut y = [0.0f64; 32];
    debug_assert!((2..=32).contains(&k));
    let (mut d, mut e) = edge_probs(lower[0], upper[0], 0.0, l[0]);
    let mut f = e - d;
    for j in 1..k {
        if f <= 0.0 {
            return (0.0, 0.0);
        }
        let wc = (2.0 * (fi * gens[j - 1] + shifts[j - 1]).fract() - 1.0).abs();
        let p = (d + wc * (e - d)).clamp(1e-100, 1.0 - 1e-16);
        y[j - 1] = norm_quantile(p);
        let mut shift = 0.0;
        for (m, ym) in y.iter().enumerate().take(j) {
            shift += l[j * k + m] * ym;
        }
        if j == k - 1 {
            return (f, shift);
        }
        let (dj, ej) = edge_probs(lower[j], upper[j], shift, l[j * k + j]);
        d = dj;
        e = ej;
        f *= (e - d).max(0.0);
    }
    unreachable!("loop returns at j == k - 1");
}

/// One lattice point of the transformed integrand.
fn genz_point(
    lower: &[f64],
    upper: &[f64],
    l: &[f64],
    k: usize,
    gens: &[f64],
    shifts: &[f64],
    fi: f64,
) -> f64 {
    let mut y = [0.0f64; 32];
    debug_assert!(k <= 32);
    let (mut d, mut e) = edge_probs(lower[0], upper[0], 0.0, l[0]);
    let mut f = e - d;
    for j in 1..k {
        if f <= 0.0 {
            return 0.0;
        }
        // Baker's transform of the shifted lattice coordinate: keeps the rule
        // symmetric, which roughly squares the plain lattice convergence rate.
        let w = (2.0 * (fi * gens[j - 1] + shifts[j - 1]).fract() - 1.0).abs();
        let p = (d + w * (e - d)).clamp(1e-100, 1.0 - 1e-16);
        y[j - 1] = norm_quantile(p);
        let mut shift = 0.0;
        for (m, ym) in y.iter().enumerate().take(j) {
            shift += l[j * k + m] * ym;
        }
        let (dj, ej) = edge_probs(lower[j], upper[j], shift, l[j * k + j]);
        d = dj;
        e = ej;
        f *= (e - d).max(0.0);
    }
    f
}

/// Conditional interval masses for one coordinate given the accumulated shift.
/// A zero diagonal (degenerate direction) turns the coordinate into the
/// indicator of the shift lying inside the bounds.
fn edge_probs(a: f64, b: f64, shift: f64, diag: f64) -> (f64, f64) {
    if diag > 0.0 {
        let d = if a == f64::NEG_INFINITY { 0.0 } else { norm_cdf((a - shift) / diag) };
        let e = if b == f64::INFINITY { 1.0 } else { norm_cdf((b - shift) / diag) };
        (d, e)
    } else {
        let inside = a <= shift && shift <= b;
        (0.0, if inside { 1.0 } else { 0.0 })
    }
}

fn interval_mass(a: f64, b: f64) -> f64 {
    let lo = if a == f64::NEG_INFINITY { 0.0 } else { norm_cdf(a) };
    let hi = if b == f64::INFINITY { 1.0 } else { norm_cdf(b) };
    (hi - lo).max(0.0)
}

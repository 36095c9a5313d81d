//! Scalar normal-distribution helpers and small fixed quadratures.
//!
//! Everything downstream (boundary recursions, rectangle probabilities,
//! spending functions) is built on the standard normal CDF `Phi`, its upper
//! tail, its quantile, and Gauss–Legendre panels.  The CDF goes through
//! `erfc` so the far tails keep full relative precision; the quantile takes
//! the library estimate and polishes it with two Newton steps on the CDF,
//! which brings it to within a few ulps — boundary bisections and closed-form
//! checks rely on that.

use statrs::function::erf::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF, accurate in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal upper tail `P(Z > x)`; keeps relative precision for large `x`
/// where `1 - norm_cdf(x)` would cancel.
pub fn norm_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal quantile.  `p` outside (0, 1) returns ±infinity at the ends
/// and NaN outside [0, 1].
pub fn norm_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return if p == 0.0 { f64::NEG_INFINITY } else { f64::NAN };
    }
    if p >= 1.0 {
        return if p == 1.0 { f64::INFINITY } else { f64::NAN };
    }
    // Rational initial estimate (Acklam's minimax), then Newton polish on the
    // erfc-based CDF.  The polish is what the 1e-10 boundary tests use.
    let mut x = quantile_estimate(p);
    for _ in 0..2 {
        let d = norm_pdf(x);
        if d <= f64::MIN_POSITIVE {
            break;
        }
        let err = if x < 0.0 { norm_cdf(x) - p } else { p_residual_upper(x, p) };
        x -= err / d;
    }
    x
}

/// For x >= 0 compute Phi(x) - p as -(sf(x) - (1-p)) without forming 1-p when
/// p is close to 1 in a way that loses bits; (1-p) is exact in f64 for p >= 0.5.
fn p_residual_upper(x: f64, p: f64) -> f64 {
    (1.0 - p) - norm_sf(x)
}

fn quantile_estimate(p: f64) -> f64 {
    // Acklam's rational approximation, |relative error| < 1.15e-9.
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -quantile_estimate_low(1.0 - p)
    }
}

fn quantile_estimate_low(p: f64) -> f64 {
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    let q = (-2.0 * p.ln()).sqrt();
    (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
        / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
}

/// Gauss–Legendre nodes and weights on [-1, 1], cached per order.
pub fn gauss_legendre(n: usize) -> &'static (Vec<f64>, Vec<f64>) {
    static CACHE64: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    static CACHE32: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    match n {
        64 => CACHE64.get_or_init(|| compute_gauss_legendre(64)),
        32 => CACHE32.get_or_init(|| compute_gauss_legendre(32)),
        _ => panic!("gauss_legendre: only orders 32 and 64 are cached"),
    }
}

fn compute_gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi-style initial guess for the i-th root of P_n, then Newton.
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by the three-term recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Integrate `f` over [a, b] with a 64-point Gauss–Legendre panel.
pub fn integrate_panel(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (nodes, weights) = gauss_legendre(64);
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut acc = 0.0;
    for (&x, &w) in nodes.iter().zip(weights) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Upper bivariate normal orthant probability `P(Z1 > b1, Z2 > b2)` at
/// correlation `rho`, by quadrature of the conditional tail against the
/// marginal density.  Handles the degenerate `|rho| = 1` cases exactly.
pub fn upper_bvn(b1: f64, b2: f64, rho: f64) -> f64 {
    assert!((-1.0..=1.0).contains(&rho), "upper_bvn: correlation out of range");
    if rho >= 1.0 {
        return norm_sf(b1.max(b2));
    }
    if rho <= -1.0 {
        // Z2 = -Z1: the event is b1 < Z1 < -b2.
        return (norm_cdf(-b2) - norm_cdf(b1)).max(0.0);
    }
    if rho == 0.0 {
        return norm_sf(b1) * norm_sf(b2);
    }
    let s = (1.0 - rho * rho).sqrt();
    // Split the half-line at points where the integrand still carries mass;
    // beyond b1 + 12 the marginal density is below 1e-31.
    let cuts = [b1, b1 + 1.5, b1 + 4.0, b1 + 12.0];
    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += integrate_panel(w[0], w[1], |z| norm_pdf(z) * norm_sf((b2 - rho * z) / s));
    }
    total
}

/// Upper trivariate normal orthant probability
/// `P(Z1 > b1, Z2 > b2, Z3 > b3)` for a correlation matrix given by its three
/// off-diagonal entries.  Errors if the matrix is not positive definite.
pub fn upper_tvn(b: [f64; 3], r12: f64, r13: f64, r23: f64) -> Result<f64, &'static str> {
    let det2 = 1.0 - r12 * r12;
    if det2 <= 1e-12 {
        return Err("leading 2x2 block is singular");
    }
    // Z3 | (Z1, Z2) is normal with mean c1*z1 + c2*z2 and variance s3sq.
    let c1 = (r13 - r12 * r23) / det2;
    let c2 = (r23 - r12 * r13) / det2;
    let s3sq = 1.0 - c1 * r13 - c2 * r23;
    if s3sq <= 1e-12 {
        return Err("correlation matrix is not positive definite");
    }
    let s3 = s3sq.sqrt();
    let s2 = det2.sqrt();
    let norm2 = 1.0 / (2.0 * PI * s2);
    let (nodes, weights) = gauss_legendre(64);
    // Two panels per axis cover the mass to ~1e-14; the joint density decays
    // like exp(-q/2) with q the 2x2 quadratic form.
    let cuts1 = [b[0], b[0] + 3.0, b[0] + 10.0];
    let cuts2 = [b[1], b[1] + 3.0, b[1] + 10.0];
    let mut total = 0.0;
    for w1 in cuts1.windows(2) {
        let h1 = 0.5 * (w1[1] - w1[0]);
        let m1 = 0.5 * (w1[1] + w1[0]);
        for w2 in cuts2.windows(2) {
            let h2 = 0.5 * (w2[1] - w2[0]);
            let m2 = 0.5 * (w2[1] + w2[0]);
            let mut panel = 0.0;
            for (&x1, &wt1) in nodes.iter().zip(weights) {
                let z1 = m1 + h1 * x1;
                for (&x2, &wt2) in nodes.iter().zip(weights) {
                    let z2 = m2 + h2 * x2;
                    let q = (z1 * z1 - 2.0 * r12 * z1 * z2 + z2 * z2) / det2;
                    let dens = norm2 * (-0.5 * q).exp();
                    let tail = norm_sf((b[2] - c1 * z1 - c2 * z2) / s3);
                    panel += wt1 * wt2 * dens * tail;
                }
            }
            total += panel * h1 * h2;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cdf_matches_known_values() {
        assert_abs_diff_eq!(norm_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(norm_cdf(1.959963984540054), 0.975, epsilon = 1e-11);
        assert_abs_diff_eq!(norm_sf(1.959963984540054), 0.025, epsilon = 1e-11);
        // Tail value cross-checked against the asymptotic expansion.
        assert_abs_diff_eq!(norm_sf(8.0), 6.22096057427178e-16, epsilon = 1e-25);
    }

    #[test]
    fn quantile_round_trips() {
        for &p in &[1e-10, 1e-6, 0.025, 0.1, 0.5, 0.9, 0.975, 1.0 - 1e-6] {
            let x = norm_quantile(p);
            assert_abs_diff_eq!(norm_cdf(x), p, epsilon = 1e-14 * p.max(1e-3));
        }
        // The quantile inherits the cdf's own accuracy through refinement.
        assert_abs_diff_eq!(norm_quantile(0.975), 1.959963984540054, epsilon = 1e-10);
        assert_abs_diff_eq!(norm_quantile(0.9), 1.2815515655446004, epsilon = 1e-10);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (nodes, weights) = gauss_legendre(64);
        let sum: f64 = weights.iter().sum();
        assert_abs_diff_eq!(sum, 2.0, epsilon = 1e-13);
        let x2: f64 = nodes.iter().zip(weights).map(|(&x, &w)| w * x * x).sum();
        assert_abs_diff_eq!(x2, 2.0 / 3.0, epsilon = 1e-13);
        let ex = integrate_panel(-1.0, 1.0, f64::exp);
        assert_abs_diff_eq!(ex, 1f64.exp() - (-1f64).exp(), epsilon = 1e-13);
    }

    #[test]
    fn bvn_orthant_closed_forms() {
        // P(Z1>0, Z2>0) = 1/4 + asin(rho)/(2 pi); at rho=1/2 that is exactly 1/3.
        assert_abs_diff_eq!(upper_bvn(0.0, 0.0, 0.5), 1.0 / 3.0, epsilon = 1e-10);
        assert_abs_diff_eq!(upper_bvn(0.0, 0.0, -0.5), 1.0 / 6.0, epsilon = 1e-10);
        assert_abs_diff_eq!(upper_bvn(1.0, 0.5, 0.0), norm_sf(1.0) * norm_sf(0.5), epsilon = 1e-14);
        // Degenerate correlation collapses to a single tail.
        assert_abs_diff_eq!(upper_bvn(1.2, 0.7, 1.0), norm_sf(1.2), epsilon = 1e-15);
        // Symmetry in the arguments.
        assert_abs_diff_eq!(
            upper_bvn(0.8, 1.7, 0.35),
            upper_bvn(1.7, 0.8, 0.35),
            epsilon = 1e-10
        );
    }

    #[test]
    fn tvn_orthant_closed_form() {
        // Equicorrelated rho=1/2 upper orthant: 1/8 + 3*asin(1/2)/(4 pi) = 1/4.
        let p = upper_tvn([0.0, 0.0, 0.0], 0.5, 0.5, 0.5).unwrap();
        assert_abs_diff_eq!(p, 0.25, epsilon = 1e-10);
        // Independence factorizes.
        let q = upper_tvn([0.3, 0.6, 0.9], 0.0, 0.0, 0.0).unwrap();
        assert_abs_diff_eq!(q, norm_sf(0.3) * norm_sf(0.6) * norm_sf(0.9), epsilon = 1e-10);
        // A non-PD matrix is rejected.
        assert!(upper_tvn([0.0; 3], 0.9, 0.9, -0.5).is_err());
    }
}

//! Small dense linear algebra for the handful of matrix sizes this crate
//! touches: 2×2 blocks from the estimating equations and K×K covariance
//! matrices across analyses (K is the number of looks, in practice ≤ 10).
//! Matrices are flat row-major `Vec<f64>`; nothing here is tuned for size
//! beyond that.

/// Lower-triangular Cholesky factor of a symmetric matrix, strict variant:
/// returns `None` unless every pivot is strictly positive (relative to the
/// matrix scale).  This is the positive-definiteness gate used by the
/// full-covariance boundary method.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    cholesky_impl(a, n, false)
}

/// Cholesky factor tolerating semidefinite directions: pivots within rounding
/// of zero are set to zero (the corresponding column becomes deterministic),
/// while genuinely negative pivots still fail.
pub fn cholesky_psd(a: &[f64], n: usize) -> Option<Vec<f64>> {
    cholesky_impl(a, n, true)
}

fn cholesky_impl(a: &[f64], n: usize, allow_semidefinite: bool) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let scale = (0..n).map(|i| a[i * n + i].abs()).fold(0.0_f64, f64::max).max(1.0);
    let tol = 1e-12 * scale;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if d <= tol {
            if allow_semidefinite && d > -tol {
                // Semidefinite direction: freeze the column.
                l[j * n + j] = 0.0;
                for i in (j + 1)..n {
                    l[i * n + j] = 0.0;
                }
                continue;
            }
            return None;
        }
        let dj = d.sqrt();
        l[j * n + j] = dj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / dj;
        }
    }
    Some(l)
}

/// Solve `A x = b` for symmetric positive definite `A` via its Cholesky
/// factor.  Returns `None` when the factorization fails.
pub fn solve_spd(a: &[f64], n: usize, b: &[f64]) -> Option<Vec<f64>> {
    let l = cholesky(a, n)?;
    let mut x = b.to_vec();
    // Forward substitution L y = b.
    for i in 0..n {
        for k in 0..i {
            let t = l[i * n + k] * x[k];
            x[i] -= t;
        }
        x[i] /= l[i * n + i];
    }
    // Back substitution L^T x = y.
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[k * n + i] * x[k];
            x[i] -= t;
        }
        x[i] /= l[i * n + i];
    }
    Some(x)
}

/// 2×2 helpers used by the estimating-equation code.  Layout: `[[a,b],[c,d]]`
/// as `[[row0], [row1]]`.
pub type Mat2 = [[f64; 2]; 2];
pub type Vec2 = [f64; 2];

pub fn mat2_zero() -> Mat2 {
    [[0.0; 2]; 2]
}

pub fn mat2_det(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Inverse by Cramer's rule; `None` when the determinant is negligible
/// relative to the entries.
pub fn mat2_inv(m: &Mat2) -> Option<Mat2> {
    let det = mat2_det(m);
    let scale = m[0][0].abs().max(m[0][1].abs()).max(m[1][0].abs()).max(m[1][1].abs());
    if det.abs() <= 1e-14 * scale * scale || !det.is_finite() {
        return None;
    }
    Some([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

pub fn mat2_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

pub fn mat2_transpose(a: &Mat2) -> Mat2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Solve the 2×2 system `M x = b`.
pub fn mat2_solve(m: &Mat2, b: &Vec2) -> Option<Vec2> {
    let inv = mat2_inv(m)?;
    Some([
        inv[0][0] * b[0] + inv[0][1] * b[1],
        inv[1][0] * b[0] + inv[1][1] * b[1],
    ])
}

//! Small dense linear-algebra utilities (plain values, not tape ops):
//! Gaussian-elimination solves, least squares via normal equations, and a
//! power-iteration spectral condition-number estimate. Sizes here are tiny
//! (tens of rows at most), so simplicity wins over blocking.

use super::NumericsError;

/// Solves `A·X = B` for `X`, where `a` is `n×n` and `b` is `n×nrhs`, both
/// row-major. Gaussian elimination with partial pivoting; a vanishing pivot
/// reports the matrix as singular.
pub fn solve_multi(
    mut a: Vec<f64>,
    n: usize,
    mut b: Vec<f64>,
    nrhs: usize,
) -> Result<Vec<f64>, NumericsError> {
    assert_eq!(a.len(), n * n);
    assert_eq!(b.len(), n * nrhs);
    let scale: f64 = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        // Partial pivot.
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r * n + col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty pivot range");
        if pivot_val <= 1e-12 * scale {
            return Err(NumericsError::InvalidArgument(
                "singular matrix in solve".into(),
            ));
        }
        if pivot_row != col {
            for j in 0..n {
                a.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..nrhs {
                b.swap(col * nrhs + j, pivot_row * nrhs + j);
            }
        }
        let pivot = a[col * n + col];
        for r in (col + 1)..n {
            let factor = a[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..nrhs {
                b[r * nrhs + j] -= factor * b[col * nrhs + j];
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let pivot = a[col * n + col];
        for j in 0..nrhs {
            let mut acc = b[col * nrhs + j];
            for k in (col + 1)..n {
                acc -= a[col * n + k] * b[k * nrhs + j];
            }
            b[col * nrhs + j] = acc / pivot;
        }
    }
    Ok(b)
}

/// Solves `A·x = b` for a single right-hand side.
pub fn solve(a: Vec<f64>, n: usize, b: Vec<f64>) -> Result<Vec<f64>, NumericsError> {
    solve_multi(a, n, b, 1)
}

/// Least squares: finds `β` (`cols×ycols`) minimizing ‖X·β − Y‖² via the
/// normal equations. `x` is `rows×cols`, `y` is `rows×ycols`, row-major.
/// Rank-deficient `x` surfaces as a singular-matrix error.
pub fn lstsq(
    x: &[f64],
    rows: usize,
    cols: usize,
    y: &[f64],
    ycols: usize,
) -> Result<Vec<f64>, NumericsError> {
    assert_eq!(x.len(), rows * cols);
    assert_eq!(y.len(), rows * ycols);
    let mut g = vec![0.0; cols * cols];
    let mut h = vec![0.0; cols * ycols];
    super::gemm::matmul_at_b_accum(rows, cols, cols, x, x, &mut g);
    super::gemm::matmul_at_b_accum(rows, cols, ycols, x, y, &mut h);
    solve_multi(g, cols, h, ycols)
}

fn matvec(a: &[f64], n: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..n {
        out[i] = a[i * n..(i + 1) * n]
            .iter()
            .zip(v)
            .map(|(x, y)| x * y)
            .sum();
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Spectral (2-norm) condition-number estimate of square `a` via power
/// iteration on `AᵀA` (largest eigenvalue) and inverse iteration (smallest).
/// Returns `f64::INFINITY` when `AᵀA` is numerically singular.
pub fn cond_2(a: &[f64], n: usize) -> f64 {
    assert_eq!(a.len(), n * n);
    let mut ata = vec![0.0; n * n];
    super::gemm::matmul_at_b_accum(n, n, n, a, a, &mut ata);
    // Deterministic start with unequal components.
    let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();

    let mut v = start.clone();
    let mut buf = vec![0.0; n];
    let mut lam_max = 0.0;
    for _ in 0..200 {
        matvec(&ata, n, &v, &mut buf);
        let nn = norm(&buf);
        if nn == 0.0 {
            return f64::INFINITY;
        }
        lam_max = nn;
        for (vi, bi) in v.iter_mut().zip(&buf) {
            *vi = bi / nn;
        }
    }

    let mut w = start;
    let mut lam_inv = 0.0;
    for _ in 0..200 {
        let Ok(sol) = solve(ata.clone(), n, w.clone()) else {
            return f64::INFINITY;
        };
        let nn = norm(&sol);
        if nn == 0.0 || !nn.is_finite() {
            return f64::INFINITY;
        }
        lam_inv = nn;
        w = sol.iter().map(|x| x / nn).collect();
    }
    // λ_min(AᵀA) = 1 / λ_max((AᵀA)⁻¹); cond₂(A) = sqrt(λ_max/λ_min).
    (lam_max * lam_inv).sqrt()
}

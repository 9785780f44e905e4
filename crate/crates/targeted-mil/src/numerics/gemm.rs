//! Matrix-multiply kernels.
//!
//! `matrixmultiply::dgemm` carries the large shapes; genuinely skinny
//! products (matrix–vector and outer-product-like shapes) go through plain
//! loops, which beat the blocked kernel there on a single core.

/// `c = a[m×k] · b[k×n]`, row-major, overwriting `c`.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if n == 1 {
        // Matrix–vector: row dot products.
        for i in 0..m {
            let row = &a[i * k..(i + 1) * k];
            c[i] = row.iter().zip(b).map(|(x, y)| x * y).sum();
        }
        return;
    }
    if m == 1 {
        // Vector–matrix: accumulate scaled rows of b.
        c.fill(0.0);
        for (l, &al) in a.iter().enumerate() {
            if al == 0.0 {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cj, bj) in c.iter_mut().zip(brow) {
                *cj += al * bj;
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T[k×m]^T · b` i.e. `c[m×n] += a[k×m]ᵀ · b[k×n]` — used by backward
/// passes that accumulate into existing gradients.
pub fn matmul_at_b_accum(k: usize, m: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if k == 1 || m == 1 || n == 1 {
        // Skinny: explicit loops. aᵀ(i,l) = a[l*m + i].
        for l in 0..k {
            let arow = &a[l * m..(l + 1) * m];
            let brow = &b[l * n..(l + 1) * n];
            for (i, &ai) in arow.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let crow = &mut c[i * n..(i + 1) * n];
                for (cj, bj) in crow.iter_mut().zip(brow) {
                    *cj += ai * bj;
                }
            }
        }
        return;
    }
    unsafe {
        // Transposed A: element (i,l) of aᵀ lives at a[l*m + i], so the
        // row stride of aᵀ is 1 and the column stride is m.
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ` — the other backward-pass product.
pub fn matmul_a_bt_accum(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    if k == 1 || m == 1 || n == 1 {
        for i in 0..m {
            let arow = &a[i * n..(i + 1) * n];
            let crow = &mut c[i * k..(i + 1) * k];
            for (l, cl) in crow.iter_mut().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                *cl += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
            }
        }
        return;
    }
    unsafe {
        // Transposed B: element (j,l) of bᵀ lives at b[l*n + j].
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            a.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            c.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn fill(n: usize, seed: u64) -> Vec<f64> {
        // Small deterministic LCG; values in [-1, 1).
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matmul_matches_naive_over_shape_grid() {
        for &(m, k, n) in &[
            (1, 1, 1),
            (1, 5, 1),
            (1, 7, 9),
            (6, 1, 4),
            (3, 4, 1),
            (2, 3, 4),
            (5, 8, 7),
            (17, 13, 11),
        ] {
            let a = fill(m * k, (m * 100 + k) as u64);
            let b = fill(k * n, (k * 100 + n) as u64);
            let mut c = vec![f64::NAN; m * n];
            matmul(m, k, n, &a, &b, &mut c);
            let want = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn transposed_accumulators_match_naive() {
        for &(m, k, n) in &[(1, 3, 2), (4, 1, 5), (3, 6, 1), (5, 4, 3), (9, 11, 8)] {
            // c1 += aᵀ·b with a[k×m].
            let a = fill(k * m, 7);
            let b = fill(k * n, 8);
            let mut at = vec![0.0; m * k];
            for l in 0..k {
                for i in 0..m {
                    at[i * k + l] = a[l * m + i];
                }
            }
            let mut c1 = fill(m * n, 9);
            let want1: Vec<f64> = naive(m, k, n, &at, &b)
                .iter()
                .zip(&c1)
                .map(|(x, y)| x + y)
                .collect();
            matmul_at_b_accum(k, m, n, &a, &b, &mut c1);
            for (x, y) in c1.iter().zip(&want1) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }

            // c2 += a·bᵀ with b[k×n].
            let a2 = fill(m * n, 10);
            let b2 = fill(k * n, 11);
            let mut bt = vec![0.0; n * k];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b2[l * n + j];
                }
            }
            let mut c2 = fill(m * k, 12);
            let want2: Vec<f64> = naive(m, n, k, &a2, &bt)
                .iter()
                .zip(&c2)
                .map(|(x, y)| x + y)
                .collect();
            matmul_a_bt_accum(m, n, k, &a2, &b2, &mut c2);
            for (x, y) in c2.iter().zip(&want2) {
                assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }
    }
}

//! Dense loops behind the graph operations.
//!
//! Every reduction runs in a fixed order that depends only on the reduced
//! length, never on how many rows are processed together, so a row computed
//! alone is bitwise identical to the same row computed inside a batch.

use crate::real::Real;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

const MR: usize = 8;
const NR: usize = 8;

/// `c[i][j] += sum_p A(i, p) * b[p][j]` with `A(i, p) = a[i * a_rs + p * a_cs]`.
///
/// Each output is summed over `p` in ascending order into a zero-initialized
/// register tile and then added to `c`, whatever the tile's row count.
fn gemm_acc<T: Real>(a: &[T], a_rs: usize, a_cs: usize, b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let mut i = 0;
    while i < m {
        let mr = (m - i).min(MR);
        let mut j = 0;
        while j < n {
            let nr = (n - j).min(NR);
            let mut acc = [[T::zero(); NR]; MR];
            if mr == MR && nr == NR {
                for p in 0..k {
                    let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * a_rs + p * a_cs];
                        for jj in 0..NR {
                            accr[jj] += av * brow[jj];
                        }
                    }
                }
            } else {
                for p in 0..k {
                    let brow = &b[p * n + j..p * n + j + nr];
                    for (r, accr) in acc.iter_mut().enumerate().take(mr) {
                        let av = a[(i + r) * a_rs + p * a_cs];
                        for jj in 0..nr {
                            accr[jj] += av * brow[jj];
                        }
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate().take(mr) {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + nr];
                for (cv, &av) in crow.iter_mut().zip(accr) {
                    *cv += av;
                }
            }
            j += NR;
        }
        i += MR;
    }
}

/// `c = a[m x k] . b[k x n]`
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = T::zero());
    gemm_acc(a, k, 1, b, c, m, k, n);
}

/// `c += a[m x k] . b[k x n]`
pub(crate) fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(a, k, 1, b, c, m, k, n);
}

/// `c (+)= a[m x k] . b[n x k]^T`
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let mut bt = alloc::vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    if !accumulate {
        c.iter_mut().for_each(|x| *x = T::zero());
    }
    gemm_acc(a, k, 1, &bt, c, m, k, n);
}

/// `c += a[m x k]^T . g[m x n]`, giving `c[k x n]`.
pub(crate) fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_acc(a, 1, k, g, c, k, m, n);
}

/// Softmax of `row` over the allowed runs, written into `out` (zeros elsewhere).
pub(crate) fn masked_softmax_row<T: Real>(row: &[T], runs: &[(usize, usize)], out: &mut [T]) {
    out.iter_mut().for_each(|x| *x = T::zero());
    let mut max = T::neg_infinity();
    for &(s, e) in runs {
        for &x in &row[s..e] {
            if x > max {
                max = x;
            }
        }
    }
    let mut sum = T::zero();
    for &(s, e) in runs {
        for j in s..e {
            let v = (row[j] - max).exp();
            out[j] = v;
            sum += v;
        }
    }
    let inv = T::one() / sum;
    for &(s, e) in runs {
        for x in &mut out[s..e] {
            *x *= inv;
        }
    }
}

/// Log-sum-exp and softmax of a dense row.
pub(crate) fn softmax_row<T: Real>(row: &[T], out: &mut [T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        let v = (x - max).exp();
        *o = v;
        sum += v;
    }
    let inv = T::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn dot_matches_naive_for_odd_lengths() {
        for n in [1usize, 7, 8, 9, 23] {
            let a: alloc::vec::Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 1.0).collect();
            let b: alloc::vec::Vec<f64> = (0..n).map(|i| 2.0 - i as f64 * 0.25).collect();
            let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            assert!((dot(&a, &b) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);
        // b^T stored as 2x3
        let bt = [1.0f64, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = vec![0.0; 4];
        matmul_nt(&a, &bt, &mut c2, 2, 3, 2, false);
        assert_eq!(c, c2);
    }
}

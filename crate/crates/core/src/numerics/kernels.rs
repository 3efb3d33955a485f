// SPDX-License-Identifier: MIT OR Apache-2.0

//! Slice-level kernels shared by the autodiff graph and the instrumented
//! model. Every reduction runs in a fixed order, so results depend only on
//! the operands and never on batch size or call site.

/// Dot product with four interleaved accumulators, combined as
/// `(a0 + a1) + (a2 + a3)` followed by the tail.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `C[m,n] = A[m,k] · B[k,n]`. Every entry sums its products in `k` order
/// starting from zero, so results do not depend on `m`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_blocked(&mut c, m, k, n, |i, p| a[i * k + p], b);
    c
}

/// `C[m,n] = A[k,m]ᵀ · B[k,n]`, summed in `k` order like [`matmul`].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_blocked(&mut c, m, k, n, |i, p| a[p * m + i], b);
    c
}

const MR: usize = 4;
const NR: usize = 8;

#[inline(always)]
fn gemm_blocked(c: &mut [f64], m: usize, k: usize, n: usize, a_at: impl Fn(usize, usize) -> f64, b: &[f64]) {
    let full_cols = n - n % NR;
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < full_cols {
            if mr == MR {
                let mut acc = [[0.0f64; NR]; MR];
                for p in 0..k {
                    let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().expect("block width");
                    for (r, row) in acc.iter_mut().enumerate() {
                        let av = a_at(i0 + r, p);
                        for (x, bv) in row.iter_mut().zip(brow) {
                            *x += av * bv;
                        }
                    }
                }
                for (r, row) in acc.iter().enumerate() {
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(row);
                }
            } else {
                for r in 0..mr {
                    let mut acc = [0.0f64; NR];
                    for p in 0..k {
                        let av = a_at(i0 + r, p);
                        for (x, bv) in acc.iter_mut().zip(&b[p * n + j0..p * n + j0 + NR]) {
                            *x += av * bv;
                        }
                    }
                    c[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(&acc);
                }
            }
            j0 += NR;
        }
        for r in 0..mr {
            for j in full_cols..n {
                let mut x = 0.0;
                for p in 0..k {
                    x += a_at(i0 + r, p) * b[p * n + j];
                }
                c[(i0 + r) * n + j] = x;
            }
        }
        i0 += MR;
    }
}

/// `C[m,n] = A[m,k] · B[n,k]ᵀ`, summed in `k` order like [`matmul`].
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul(a, &bt, m, k, n)
}

/// Numerically stable softmax over one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the first `valid` entries of a row; the rest are set to 0.
/// Used for causal attention.
pub fn masked_softmax_in_place(row: &mut [f64], valid: usize) {
    softmax_in_place(&mut row[..valid]);
    for v in row[valid..].iter_mut() {
        *v = 0.0;
    }
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}

/// `out = gain ⊙ x / sqrt(mean(x²) + eps)`; returns the inverse RMS.
pub fn rms_norm_row(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = g * (xi * inv);
    }
    inv
}

/// `out = gain ⊙ (x − μ)/σ + bias`; returns the inverse standard deviation.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (((o, xi), g), b) in out.iter_mut().zip(x).zip(gain).zip(bias) {
        *o = g * ((xi - mean) * inv) + b;
    }
    inv
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
        // bᵀ stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        assert_eq!(matmul_nt(&a, &bt, 2, 3, 2), c);
        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        assert_eq!(matmul_tn(&at, &b, 2, 3, 2), c);
    }

    #[test]
    fn blocked_kernels_match_naive_sums_on_ragged_shapes() {
        for &(m, k, n) in &[(1, 1, 1), (5, 7, 9), (9, 13, 17), (4, 8, 8), (3, 2, 11)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 53 % 13) as f64 - 6.0) * 0.7).collect();
            let mut naive = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        naive[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            assert_eq!(matmul(&a, &b, m, k, n), naive);
            let at: Vec<f64> = (0..k * m).map(|x| a[(x % m) * k + x / m]).collect();
            assert_eq!(matmul_tn(&at, &b, m, k, n), naive);
            let bt: Vec<f64> = (0..n * k).map(|x| b[(x % k) * n + x / k]).collect();
            let nt = matmul_nt(&a, &bt, m, k, n);
            assert_eq!(nt, naive);
            // Rows computed alone agree bitwise with rows computed in a batch.
            for i in 0..m {
                assert_eq!(matmul(&a[i * k..(i + 1) * k], &b, 1, k, n), naive[i * n..(i + 1) * n]);
                assert_eq!(matmul_nt(&a[i * k..(i + 1) * k], &bt, 1, k, n), nt[i * n..(i + 1) * n]);
            }
        }
    }

    #[test]
    fn identity_matmul_is_noop() {
        assert_eq!(matmul(&[1.0], &[-3.25], 1, 1, 1), vec![-3.25]);
    }

    #[test]
    fn softmax_uniform() {
        assert_eq!(softmax(&[2.0; 4]), vec![0.25; 4]);
    }

    #[test]
    fn masked_softmax_zeroes_future() {
        let mut row = [1.0, 1.0, 5.0, 5.0];
        masked_softmax_in_place(&mut row, 2);
        assert_eq!(row, [0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn gelu_and_silu_grads_match_central_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}

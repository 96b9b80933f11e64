//! Dense kernels shared by the forward and backward passes.

/// Strided view of a matrix operand: `(data, row_stride, col_stride)`.
pub(crate) type MatRef<'a> = (&'a [f64], usize, usize);

// Below this many multiply-adds the packing overhead of the blocked GEMM
// dominates, so a plain loop is faster.
const SMALL_GEMM: usize = 4096;

/// `c[m×n] = beta·c + a[m×k]·b[k×n]`, with `c` row-major and contiguous.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs out of bounds");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs out of bounds");
    }
    if m * k * n <= SMALL_GEMM {
        let c = &mut c[..m * n];
        if beta == 0.0 {
            c.fill(0.0);
        } else if beta != 1.0 {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        for i in 0..m {
            let row = &mut c[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * rsa + p * csa];
                if csb == 1 {
                    let brow = &b[p * rsb..p * rsb + n];
                    for (cv, bv) in row.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                } else {
                    for (j, cv) in row.iter_mut().enumerate() {
                        *cv += aip * b[p * rsb + j * csb];
                    }
                }
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every strided access made by the
    // kernel stays inside the three slices, and `c` does not alias `a`/`b`
    // because it is borrowed mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(x: &[f64], width: usize, out: &mut [f64]) {
    for (row, dst) in x.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        let inv = 1.0 / total;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn small_and_blocked_paths_agree_with_naive() {
        for &(m, k, n) in &[(2, 3, 4), (20, 30, 40), (64, 17, 33)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64) - 5.0).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64) * 0.5).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, (&a, k, 1), (&b, n, 1), &mut c, 0.0);
            let expected = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn transposed_strides() {
        // a is stored transposed ([k, m]) and read through strides.
        let (m, k, n) = (3, 2, 2);
        let a_t = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // [[1,2,3],[4,5,6]]
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, (&a_t, 1, m), (&b, n, 1), &mut c, 0.0);
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

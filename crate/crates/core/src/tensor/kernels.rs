//! Matrix-product kernels on row-major slices. All accumulate into `out`.

#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize, sa: (isize, isize), sb: (isize, isize)) {
    assert!(a.len() >= n * k && b.len() >= k * m && out.len() >= n * m);
    if n == 0 || m == 0 || k == 0 {
        return;
    }
    // SAFETY: bounds checked above; the strides address exactly the n×k,
    // k×m and n×m row-major (or transposed) blocks.
    unsafe {
        matrixmultiply::dgemm(
            n, k, m, 1.0, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, 1.0, out.as_mut_ptr(), m as isize, 1,
        );
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(a, b, out, n, k, m, (k as isize, 1), (m as isize, 1));
}

/// `out[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(a, b, out, n, k, m, (k as isize, 1), (1, k as isize));
}

/// `out[n×m] += a[k×n]ᵀ · b[k×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    gemm(a, b, out, n, k, m, (1, n as isize), (m as isize, 1));
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four independent accumulators let the loop vectorise
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for (n, k, m) in [(3, 5, 4), (1, 1, 1), (17, 9, 33), (100, 64, 16)] {
            check(n, k, m);
        }
    }

    fn check(n: usize, k: usize, m: usize) {
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, n, k, m);

        let mut out = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut out, n, k, m);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut out = vec![0.0; n * m];
        gemm_nt(&a, &transpose(&b, k, m), &mut out, n, k, m);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let mut out = vec![0.0; n * m];
        gemm_tn(&transpose(&a, n, k), &b, &mut out, n, k, m);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

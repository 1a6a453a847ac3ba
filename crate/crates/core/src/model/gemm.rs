//! Small dense kernels. Every routine accumulates in a fixed order, so
//! results are reproducible on a given machine. CPUs with AVX2 and FMA run a
//! fused multiply-add build of the same code, whose rounding differs in the
//! last bits from the portable build.

use super::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;
const LANES: usize = 8;
const NT_ROWS: usize = 4;
const NT_COLS: usize = 2;

#[cfg(target_arch = "x86_64")]
fn has_avx2_fma() -> bool {
    std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
}

/// Defines `pub fn $name` that runs `$imp` through an AVX2/FMA copy when the
/// CPU supports it and through the portable copy otherwise.
macro_rules! dispatch {
    ($(#[$doc:meta])* $name:ident, $fast:ident, $imp:ident, ($($arg:ident: $ty:ty),*) $(-> $ret:ty)?) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2,fma")]
        unsafe fn $fast<T: Scalar>($($arg: $ty),*) $(-> $ret)? {
            $imp::<T, true>($($arg),*)
        }

        $(#[$doc])*
        #[allow(clippy::too_many_arguments)]
        pub fn $name<T: Scalar>($($arg: $ty),*) $(-> $ret)? {
            #[cfg(target_arch = "x86_64")]
            if has_avx2_fma() {
                // SAFETY: the CPU reports AVX2 and FMA support.
                return unsafe { $fast($($arg),*) };
            }
            $imp::<T, false>($($arg),*)
        }
    };
}

#[inline(always)]
fn madd<T: Scalar, const FMA: bool>(a: T, b: T, c: T) -> T {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn dot_imp<T: Scalar, const FMA: bool>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] = madd::<T, FMA>(x[l], y[l], acc[l]);
        }
    }
    let mut s = T::ZERO;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        s = madd::<T, FMA>(*x, *y, s);
    }
    for v in acc {
        s += v;
    }
    s
}

#[inline(always)]
fn axpy_imp<T: Scalar, const FMA: bool>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = madd::<T, FMA>(alpha, *xi, *yi);
    }
}

/// Lane-parallel sum.
#[inline(always)]
fn sum_imp<T: Scalar, const FMA: bool>(a: &[T]) -> T {
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    for x in &mut ca {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    let mut s = T::ZERO;
    for x in ca.remainder() {
        s += *x;
    }
    for v in acc {
        s += v;
    }
    s
}

/// Lane-parallel sum of squared deviations from `mu`.
#[inline(always)]
fn sq_dev_imp<T: Scalar, const FMA: bool>(a: &[T], mu: T) -> T {
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    for x in &mut ca {
        for l in 0..LANES {
            let d = x[l] - mu;
            acc[l] = madd::<T, FMA>(d, d, acc[l]);
        }
    }
    let mut s = T::ZERO;
    for x in ca.remainder() {
        let d = *x - mu;
        s = madd::<T, FMA>(d, d, s);
    }
    for v in acc {
        s += v;
    }
    s
}

/// `R` rows of `C += A B`. `panel` holds the rows of `A` column by column.
/// Every row goes through the same operations whatever `R` is, so a row's
/// result does not depend on its position in the batch.
#[inline(always)]
fn gemm_rows<T: Scalar, const FMA: bool, const R: usize>(n: usize, panel: &[T], b: &[T], c: &mut [T]) {
    let n_main = n - n % NR;
    for j in (0..n_main).step_by(NR) {
        let mut acc = [[T::ZERO; NR]; R];
        for (ap, brow) in panel.chunks_exact(R).zip(b.chunks_exact(n)) {
            let bt: &[T; NR] = brow[j..j + NR].try_into().expect("tile");
            for (row, &av) in acc.iter_mut().zip(ap) {
                for q in 0..NR {
                    row[q] = madd::<T, FMA>(av, bt[q], row[q]);
                }
            }
        }
        for (crow, row) in c.chunks_exact_mut(n).zip(&acc) {
            for (cv, v) in crow[j..j + NR].iter_mut().zip(row) {
                *cv += *v;
            }
        }
    }
    if n_main < n {
        for (r, crow) in c.chunks_exact_mut(n).enumerate() {
            for (ap, brow) in panel.chunks_exact(R).zip(b.chunks_exact(n)) {
                axpy_imp::<T, FMA>(&mut crow[n_main..], ap[r], &brow[n_main..]);
            }
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_imp<T: Scalar, const FMA: bool>(m: usize, n: usize, k: usize, a: &[T], a_rs: usize, a_cs: usize, b: &[T], c: &mut [T]) {
    assert!(b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let b = &b[..k * n];
    let mut panel = vec![T::ZERO; k * MR];
    let mut i = 0;
    while i + MR <= m {
        for (p, col) in panel.chunks_exact_mut(MR).enumerate() {
            for (r, v) in col.iter_mut().enumerate() {
                *v = a[(i + r) * a_rs + p * a_cs];
            }
        }
        gemm_rows::<T, FMA, MR>(n, &panel, b, &mut c[i * n..(i + MR) * n]);
        i += MR;
    }
    for ii in i..m {
        for (p, v) in panel[..k].iter_mut().enumerate() {
            *v = a[ii * a_rs + p * a_cs];
        }
        gemm_rows::<T, FMA, 1>(n, &panel[..k], b, &mut c[ii * n..(ii + 1) * n]);
    }
}

#[inline(always)]
fn gemm_nt_imp<T: Scalar, const FMA: bool>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    let k_main = k - k % LANES;
    let m_main = m - m % NT_ROWS;
    let n_main = n - n % NT_COLS;
    for i in (0..m_main).step_by(NT_ROWS) {
        let arows: [&[T]; NT_ROWS] = std::array::from_fn(|r| &a[(i + r) * k..(i + r) * k + k_main]);
        for j in (0..n_main).step_by(NT_COLS) {
            let brows: [&[T]; NT_COLS] = std::array::from_fn(|q| &b[(j + q) * k..(j + q) * k + k_main]);
            let mut acc = [[[T::ZERO; LANES]; NT_COLS]; NT_ROWS];
            for p in (0..k_main).step_by(LANES) {
                let bv: [&[T; LANES]; NT_COLS] = std::array::from_fn(|q| brows[q][p..p + LANES].try_into().expect("lanes"));
                for (accr, arow) in acc.iter_mut().zip(&arows) {
                    let av: &[T; LANES] = arow[p..p + LANES].try_into().expect("lanes");
                    for (accq, bq) in accr.iter_mut().zip(&bv) {
                        for l in 0..LANES {
                            accq[l] = madd::<T, FMA>(av[l], bq[l], accq[l]);
                        }
                    }
                }
            }
            for r in 0..NT_ROWS {
                for q in 0..NT_COLS {
                    let mut s = T::ZERO;
                    for p in k_main..k {
                        s = madd::<T, FMA>(a[(i + r) * k + p], b[(j + q) * k + p], s);
                    }
                    for v in acc[r][q] {
                        s += v;
                    }
                    c[(i + r) * n + j + q] += s;
                }
            }
        }
    }
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let cols = if i < m_main { n_main..n } else { 0..n };
        for j in cols {
            c[i * n + j] += dot_imp::<T, FMA>(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

dispatch!(
    /// Dot product with eight interleaved accumulators.
    dot, dot_fast, dot_imp, (a: &[T], b: &[T]) -> T
);
dispatch!(
    /// `y += alpha * x`.
    axpy, axpy_fast, axpy_imp, (y: &mut [T], alpha: T, x: &[T])
);
dispatch!(sum, sum_fast, sum_imp, (a: &[T]) -> T);
dispatch!(sq_dev, sq_dev_fast, sq_dev_imp, (a: &[T], mu: T) -> T);
dispatch!(
    /// `c[m x n] += A * B` where `A(i, p) = a[i * a_rs + p * a_cs]` and `B`
    /// is a row-major `k x n` matrix.
    gemm, gemm_fast, gemm_imp,
    (m: usize, n: usize, k: usize, a: &[T], a_rs: usize, a_cs: usize, b: &[T], c: &mut [T])
);
dispatch!(
    /// `c[m x n] += a[m x k] * b[n x k]^T`.
    gemm_nt, gemm_nt_fast, gemm_nt_imp,
    (m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T])
);

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, n: usize, k: usize, a: impl Fn(usize, usize) -> f64, b: impl Fn(usize, usize) -> f64) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a(i, p) * b(p, j)).sum();
            }
        }
        c
    }

    fn data(len: usize, seed: usize) -> Vec<f64> {
        (0..len).map(|i| (((i * 7919 + seed * 104729) % 1000) as f64 - 500.0) / 250.0).collect()
    }

    #[test]
    fn kernels_match_naive_products() {
        for &(m, n, k) in &[(1, 1, 1), (4, 16, 3), (5, 37, 9), (16, 640, 72), (10, 256, 128), (9, 20, 1), (7, 6, 21)] {
            let a = data(m * k, 1);
            let b = data(k * n, 2);
            let expect = naive(m, n, k, |i, p| a[i * k + p], |p, j| b[p * n + j]);
            let mut c = vec![0.0; m * n];
            gemm(m, n, k, &a, k, 1, &b, &mut c);
            for (x, y) in c.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }
            let at: Vec<f64> = (0..k * m).map(|q| a[(q % m) * k + q / m]).collect();
            let mut c2 = vec![0.0; m * n];
            gemm(m, n, k, &at, 1, m, &b, &mut c2);
            assert_eq!(c, c2);
            let bt: Vec<f64> = (0..n * k).map(|q| b[(q % k) * n + q / k]).collect();
            let mut c3 = vec![0.0; m * n];
            gemm_nt(m, n, k, &a, &bt, &mut c3);
            for (x, y) in c3.iter().zip(&expect) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn dispatched_and_portable_paths_agree() {
        let (m, n, k) = (9, 37, 29);
        let a: Vec<f32> = data(m * k, 3).iter().map(|&v| v as f32 * 0.37).collect();
        let b: Vec<f32> = data(k * n, 4).iter().map(|&v| v as f32 * 1.13).collect();
        let mut c1 = vec![0.0f32; m * n];
        let mut c2 = vec![0.0f32; m * n];
        gemm(m, n, k, &a, k, 1, &b, &mut c1);
        gemm_imp::<f32, false>(m, n, k, &a, k, 1, &b, &mut c2);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
        assert_eq!(sum(&a).to_bits(), sum_imp::<f32, false>(&a).to_bits());
    }

    #[test]
    fn row_results_do_not_depend_on_row_position() {
        let (n, k) = (37, 29);
        let a: Vec<f32> = data(7 * k, 5).iter().map(|&v| v as f32 * 0.31).collect();
        let b: Vec<f32> = data(k * n, 6).iter().map(|&v| v as f32 * 0.77).collect();
        let mut all = vec![0.0f32; 7 * n];
        gemm(7, n, k, &a, k, 1, &b, &mut all);
        for r in 0..7 {
            let mut one = vec![0.0f32; n];
            gemm(1, n, k, &a[r * k..(r + 1) * k], k, 1, &b, &mut one);
            assert_eq!(one, all[r * n..(r + 1) * n]);
        }
    }
}

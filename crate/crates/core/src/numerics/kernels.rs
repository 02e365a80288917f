//! Raw compute kernels shared by the autodiff graph, the no-grad forward
//! pass, and the incremental sampler.
//!
//! Sharing one kernel per primitive keeps every code path bit-identical:
//! a policy and a reference model with equal weights produce exactly equal
//! log-probs no matter which path computed them. All accumulations run in
//! a fixed ascending order, so results are reproducible bit-for-bit.

use super::Real;

/// c += a @ b, with a: [m×k], b: [k×n], c: [m×n], all row-major.
pub fn gemm_nn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c += a @ b^T, with a: [m×k], b: [n×k], c: [m×n].
///
/// Columns are processed four at a time for instruction-level parallelism,
/// but each output element is still one plain ascending-k chain, so the
/// value of c[i][j] is independent of n. The incremental decoder relies on
/// this: scores over a growing key cache match the batch path bit-for-bit.
pub fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let n4 = n / 4 * 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut j = 0;
        while j < n4 {
            let b0 = &b[j * k..(j + 1) * k];
            let b1 = &b[(j + 1) * k..(j + 2) * k];
            let b2 = &b[(j + 2) * k..(j + 3) * k];
            let b3 = &b[(j + 3) * k..(j + 4) * k];
            let mut s0 = F::zero();
            let mut s1 = F::zero();
            let mut s2 = F::zero();
            let mut s3 = F::zero();
            for (kk, &av) in arow.iter().enumerate() {
                s0 = s0 + av * b0[kk];
                s1 = s1 + av * b1[kk];
                s2 = s2 + av * b2[kk];
                s3 = s3 + av * b3[kk];
            }
            crow[j] = crow[j] + s0;
            crow[j + 1] = crow[j + 1] + s1;
            crow[j + 2] = crow[j + 2] + s2;
            crow[j + 3] = crow[j + 3] + s3;
            j += 4;
        }
        while j < n {
            let brow = &b[j * k..(j + 1) * k];
            crow[j] = crow[j] + dot(arow, brow);
            j += 1;
        }
    }
}

/// c += a^T @ b, with a: [k×m], b: [k×n], c: [m×n].
pub fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let arow = &a[kk * m..(kk + 1) * m];
        let brow = &b[kk * n..(kk + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Plain ascending-order dot product. Every dot-like reduction in the
/// crate accumulates in this order so different code paths agree exactly.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta over one row.
pub fn layer_norm_row<F: Real>(x: &[F], gamma: &[F], beta: &[F], eps: F, out: &mut [F]) {
    let n = super::rf::<F>(x.len() as f64);
    let mut mean = F::zero();
    for &v in x {
        mean = mean + v;
    }
    mean = mean / n;
    let mut var = F::zero();
    for &v in x {
        let d = v - mean;
        var = var + d * d;
    }
    var = var / n;
    let inv = (var + eps).sqrt().recip();
    for i in 0..x.len() {
        out[i] = gamma[i] * ((x[i] - mean) * inv) + beta[i];
    }
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = super::rf::<F>(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = super::rf::<F>(0.044_715);
    let half = super::rf::<F>(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::one() + inner.tanh())
}

/// Derivative of the tanh-approximated GELU.
#[inline]
pub fn gelu_deriv<F: Real>(x: F) -> F {
    let c = super::rf::<F>(0.797_884_560_802_865_4);
    let k = super::rf::<F>(0.044_715);
    let half = super::rf::<F>(0.5);
    let three = super::rf::<F>(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    let du = c * (F::one() + three * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

/// Numerically stabilized softmax of one row into `out`.
pub fn softmax_row<F: Real>(row: &[F], out: &mut [F]) {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum = sum + e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

/// log(sum(exp(row))) with max subtraction.
pub fn logsumexp_row<F: Real>(row: &[F]) -> F {
    let mut mx = row[0];
    for &v in &row[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for &v in row {
        sum = sum + (v - mx).exp();
    }
    mx + sum.ln()
}

/// log softmax(row)[target]; the one log-prob kernel used everywhere so
/// sampler, teacher-forcing, and graph losses agree bit-for-bit.
#[inline]
pub fn log_softmax_gather<F: Real>(row: &[F], target: usize) -> F {
    row[target] - logsumexp_row(row)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_matches_hand_product() {
        // [[1,2]] x [[3],[4]] = [[11]]
        let a = [1.0_f64, 2.0];
        let b = [3.0, 4.0];
        let mut c = [0.0];
        gemm_nn(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0_f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c_nn = [0.0; 4];
        gemm_nn(&a, &b, &mut c_nn, 2, 3, 2);
        // b^T laid out as [2x3]
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c_nt = [0.0; 4];
        gemm_nt(&a, &bt, &mut c_nt, 2, 3, 2);
        assert_eq!(c_nn, c_nt);
        // a^T laid out as [3x2] fed to gemm_tn reproduces the same product
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = [0.0; 4];
        gemm_tn(&at, &b, &mut c_tn, 2, 3, 2);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn softmax_row_sums_to_one() {
        let row = [0.0_f64, (3.0_f64).ln()];
        let mut out = [0.0; 2];
        softmax_row(&row, &mut out);
        assert!((out[0] - 0.25).abs() < 1e-12);
        assert!((out[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gelu_deriv_matches_finite_difference() {
        for &x in &[-2.0_f64, -0.5, 0.0, 0.3, 1.7] {
            let eps = 1e-6;
            let fd = (gelu(x + eps) - gelu(x - eps)) / (2.0 * eps);
            assert!((fd - gelu_deriv(x)).abs() < 1e-8, "x={x}");
        }
    }
}

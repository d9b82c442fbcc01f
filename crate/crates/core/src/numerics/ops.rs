//! Tape-free kernels shared by the forward and backward passes.

use super::Tensor;

/// GELU flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GeluKind {
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
    #[default]
    Tanh,
    /// `0.5 x (1 + erf(x / sqrt 2))`
    Erf,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

pub fn gelu_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()),
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

pub(crate) fn gelu_grad(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        softmax_in_place(&mut out[r * cols..(r + 1) * cols]);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise log-softmax via log-sum-exp.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (rows, cols) = x.rows_cols();
    let mut out = x.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row normalisation without the affine part: returns `(xhat, inv_std)`.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (rows, cols) = x.rows_cols();
    let mut out = x.data().to_vec();
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * s;
        }
        inv.push(s);
    }
    (Tensor::new(x.shape().to_vec(), out), inv)
}

/// `C (m x n) += A (m x k) * B (k x n)` on strided row-major buffers.
/// `a_t` / `b_t` read the operand as transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths cover m*k, k*n and m*n elements with the
    // strides above; asserted here.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetric() {
        let s = softmax_rows(&Tensor::new([1, 2], vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_extreme_logits() {
        let s = softmax_rows(&Tensor::new([1, 3], vec![1000.0, 0.0, -1000.0]));
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_constant_row() {
        let (xhat, _) = layer_norm_rows(&Tensor::new([1, 4], vec![3.0; 4]), 1e-12);
        assert_eq!(xhat.data(), &[0.0; 4]);
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0, GeluKind::Tanh), 0.0);
        // 0.5 * (1 + erf(1/sqrt 2)) = 0.841344746...
        assert!((gelu_scalar(1.0, GeluKind::Erf) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(1.0, GeluKind::Tanh) - 0.841_191_990_607_477).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
                let h = 1e-6;
                let num = (gelu_scalar(x + h, kind) - gelu_scalar(x - h, kind)) / (2.0 * h);
                assert!((num - gelu_grad(x, kind)).abs() < 1e-8, "{kind:?} at {x}");
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_acc(2, 2, 2, &a, false, &b, false, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        let mut c = [0.0; 4];
        gemm_acc(2, 2, 2, &a, true, &b, false, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        let mut c = [0.0; 4];
        gemm_acc(2, 2, 2, &a, false, &b, true, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}

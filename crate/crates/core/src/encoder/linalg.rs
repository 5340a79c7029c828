//! Flat row-major matrix helpers for the encoder.
//!
//! All hot loops are written so the innermost dimension walks a contiguous
//! slice with independent lanes (`y[j] += a * x[j]`); the compiler can
//! vectorize those without reassociating float sums, which keeps results
//! bit-deterministic across optimization levels and thread counts.

use crate::real::Real;

/// `y[m×n] += x[m×k] · w[k×n]` (row-major, accumulating).
pub fn matmul_acc<T: Real>(x: &[T], w: &[T], y: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(w.len(), k * n);
    debug_assert_eq!(y.len(), m * n);
    for i in 0..m {
        let yr = &mut y[i * n..(i + 1) * n];
        let xr = &x[i * k..(i + 1) * k];
        for (p, &xv) in xr.iter().enumerate() {
            let wr = &w[p * n..(p + 1) * n];
            for j in 0..n {
                yr[j] += xv * wr[j];
            }
        }
    }
}

/// `y[m×n] = x[m×k] · w[k×n]`.
pub fn matmul<T: Real>(x: &[T], w: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m * n];
    matmul_acc(x, w, &mut y, m, k, n);
    y
}

/// Row-major transpose: `out[n×m]` of `x[m×n]`.
pub fn transpose<T: Real>(x: &[T], m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(x.len(), m * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x[i * n + j];
        }
    }
    out
}

/// `dw[k×n] += x[m×k]ᵀ · dy[m×n]` — the weight-gradient contraction.
pub fn grad_weights_acc<T: Real>(x: &[T], dy: &[T], dw: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(x.len(), m * k);
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(dw.len(), k * n);
    for i in 0..m {
        let dyr = &dy[i * n..(i + 1) * n];
        let xr = &x[i * k..(i + 1) * k];
        for (p, &xv) in xr.iter().enumerate() {
            let dwr = &mut dw[p * n..(p + 1) * n];
            for j in 0..n {
                dwr[j] += xv * dyr[j];
            }
        }
    }
}

/// `y[j] += a · x[j]`.
#[inline]
pub fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Sequential dot product (fixed order: used outside the O(L²) paths).
#[inline]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        acc += a * b;
    }
    acc
}

#[inline]
pub fn norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_case() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let w = [5.0f64, 6.0, 7.0, 8.0];
        let y = matmul(&x, &w, 2, 2, 2);
        assert_eq!(y, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrips() {
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let t = transpose(&x, 3, 4);
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 4.0);
        let back = transpose(&t, 4, 3);
        assert_eq!(back, x);
    }

    #[test]
    fn grad_weights_is_xt_dy() {
        let x = [1.0f64, 2.0, 3.0, 4.0]; // 2x2
        let dy = [0.5f64, -1.0, 2.0, 0.0]; // 2x2
        let mut dw = vec![0.0f64; 4];
        grad_weights_acc(&x, &dy, &mut dw, 2, 2, 2);
        // xᵀ·dy = [1 3; 2 4] · [0.5 -1; 2 0] = [6.5 -1; 9 -2]
        assert_eq!(dw, vec![6.5, -1.0, 9.0, -2.0]);
    }

    #[test]
    fn dot_and_axpy() {
        let x = [1.0f64, 2.0, 3.0];
        let mut y = [10.0f64, 20.0, 30.0];
        assert_eq!(dot(&x, &y), 140.0);
        axpy(2.0, &x, &mut y);
        assert_eq!(y, [12.0, 24.0, 36.0]);
    }
}

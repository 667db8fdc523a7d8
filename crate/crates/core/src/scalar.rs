//! Floating-point scalar abstraction.
//!
//! All math in the crate is written against [`Scalar`], implemented for `f32`
//! and `f64`. The training pipeline runs in `f64`; `f32` is available for
//! inference experiments.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal, rounding if the target is narrower.
    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a · b + beta · c` for row/column-strided operands.
    ///
    /// `a` is `m × k`, `b` is `k × n`, `c` is `m × n` and contiguous row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        (rsa, csa): (isize, isize),
        b: &[f64],
        (rsb, csb): (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass slices covering every strided index of the
        // m×k, k×n and m×n operands.
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
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        (rsa, csa): (isize, isize),
        b: &[f32],
        (rsb, csb): (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        debug_assert!(c.len() >= m * n);
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: see the f64 implementation.
        unsafe {
            matrixmultiply::sgemm(
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
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
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
    fn gemm_matches_naive_including_transposed_operand() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &b, (4, 1), 0.0, &mut c);
        let want = naive(2, 3, 4, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-14);
        }
        // b stored as 4×3, read transposed
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect();
        let mut c2 = vec![0.0; 8];
        f64::gemm(2, 3, 4, &a, (3, 1), &bt, (1, 3), 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn f32_round_trip_literal() {
        assert_eq!(f32::of(0.25), 0.25f32);
        assert_eq!(0.25f32.as_f64(), 0.25);
    }
}

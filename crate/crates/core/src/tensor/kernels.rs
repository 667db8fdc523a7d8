//! Raw numeric kernels on flat buffers. No tape involvement.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// sqrt(2/pi), the GELU tanh-approximation constant.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

pub fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::dim(
            "transpose",
            format!("permutation {:?} for shape {:?}", perm, shape),
        ));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::dim(
                "transpose",
                format!("invalid permutation {:?} for shape {:?}", perm, shape),
            ));
        }
        seen[p] = true;
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Output axis `i` is input axis `perm[i]`.
pub fn transpose<S: Copy>(shape: &[usize], data: &[S], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    // Odometer over the output index; innermost axis copied in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut s = base;
        for _ in 0..inner {
            out.push(data[s]);
            s += inner_stride;
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `0.5·x·(1 + tanh(u))` evaluated as `x·σ(2u)`, the same function with
/// one `exp` instead of `tanh`; `u = √(2/π)(x + 0.044715x³)`.
#[inline]
pub fn gelu<S: Scalar>(x: S) -> S {
    x * gate(x)
}

#[inline]
fn inner<S: Scalar>(x: S) -> S {
    S::of(GELU_SQRT_2_OVER_PI) * (x + S::of(GELU_CUBIC) * x * x * x)
}

/// `σ(2u)`, saturating cleanly for large `|x|`.
#[inline]
fn gate<S: Scalar>(x: S) -> S {
    let two_u = inner(x) + inner(x);
    S::one() / (S::one() + (-two_u).exp())
}

#[inline]
pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let s = gate(x);
    let du = S::of(GELU_SQRT_2_OVER_PI) * (S::one() + S::of(3.0 * GELU_CUBIC) * x * x);
    // d/dx x·σ(2u) = σ + x·2σ(1-σ)·u'
    s + x * (s + s) * (S::one() - s) * du
}

/// In-place softmax over consecutive rows of length `n`.
pub fn softmax_rows<S: Scalar>(data: &mut [S], n: usize) {
    for row in data.chunks_exact_mut(n) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = S::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Returns (output, normalized input, reciprocal std per row).
pub fn layernorm_rows<S: Scalar>(
    x: &[S],
    gamma: &[S],
    beta: &[S],
    eps: S,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let d = gamma.len();
    let rows = x.len() / d;
    let dn = S::from_usize(d).unwrap();
    let mut out = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(rows);
    for row in x.chunks_exact(d) {
        let mean = row.iter().copied().sum::<S>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
        let r = S::one() / (var + eps).sqrt();
        rstd.push(r);
        for (j, &v) in row.iter().enumerate() {
            let h = (v - mean) * r;
            xhat.push(h);
            out.push(h * gamma[j] + beta[j]);
        }
    }
    (out, xhat, rstd)
}

/// Batched matmul. `b_shared` means `b` is a single `k × n` matrix used for
/// every batch slice of `a`.
pub fn matmul<S: Scalar>(
    a: &[S],
    b: &[S],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<S> {
    let mut c = vec![S::zero(); batch * m * n];
    if b_shared {
        S::gemm(batch * m, k, n, a, (k as isize, 1), b, (n as isize, 1), S::zero(), &mut c);
    } else {
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &b[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                S::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
            );
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transpose_2d() {
        let (s, d) = transpose(&[2, 3], &[1, 2, 3, 4, 5, 6], &[1, 0]);
        assert_eq!(s, vec![3, 2]);
        assert_eq!(d, vec![1, 4, 2, 5, 3, 6]);
    }

    #[test]
    fn transpose_identity_perm_copies() {
        let data: Vec<i32> = (0..24).collect();
        let (_, d) = transpose(&[2, 3, 4], &data, &[0, 1, 2]);
        assert_eq!(d, data);
    }

    #[test]
    fn gelu_known_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        // 0.5·1·(1 + tanh(c·1.044715))
        let want = 0.5 * (1.0 + (GELU_SQRT_2_OVER_PI * 1.044715f64).tanh());
        assert!((gelu(1.0f64) - want).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn perm_validation() {
        assert!(check_perm(&[2, 3], &[0, 0]).is_err());
        assert!(check_perm(&[2, 3], &[0]).is_err());
        assert!(check_perm(&[2, 3], &[1, 0]).is_ok());
    }
}

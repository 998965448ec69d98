//! Dense inner loops shared by the graph primitives.
//!
//! All kernels accumulate into `out`, which the caller zero-fills when a fresh
//! product is wanted. Loop orders keep the innermost loop over contiguous
//! memory so the compiler can vectorise it.

use crate::scalar::Scalar;

#[inline]
fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    // Eight independent partial sums break the serial dependency chain.
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + pa[l] * pb[l];
        }
    }
    let mut s = S::zero();
    for v in acc {
        s = s + v;
    }
    for i in chunks * 8..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

/// out[m,n] += a[m,k] · b[k,n]
pub fn matmul_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != S::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// out[m,n] += a[m,k] · b[n,k]ᵀ
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != S::zero() {
                axpy(aip, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Permutes axes: output axis `i` is input axis `perm[i]`.
pub fn permute<S: Scalar>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    // Iterate output indices in order; innermost axis handled as a strided run.
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank.saturating_sub(1)];
    loop {
        let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        for j in 0..inner {
            out.push(data[base + j * inner_stride]);
        }
        // advance outer multi-index
        let mut ax = rank as isize - 2;
        loop {
            if ax < 0 {
                return (out_shape, out);
            }
            let a = ax as usize;
            idx[a] += 1;
            if idx[a] < out_shape[a] {
                break;
            }
            idx[a] = 0;
            ax -= 1;
        }
    }
}

/// For each element of a tensor of `out_shape`, the flat index into a tensor of
/// `small` shape broadcast against it (right-aligned, size-1 axes repeat).
pub fn broadcast_map(out_shape: &[usize], small: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - small.len();
    let small_strides = strides(small);
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        let mut f = 0;
        for (ax, &dim) in small.iter().enumerate() {
            if dim != 1 {
                f += idx[ax + offset] * small_strides[ax];
            }
        }
        map.push(f);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

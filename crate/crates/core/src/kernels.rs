//! Row-parallel dense kernels.
//!
//! Every kernel writes disjoint output rows and accumulates each row in a
//! fixed order, so results are bit-identical with and without the `parallel`
//! feature. The [`seq`] module always exposes the single-threaded variants.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum number of output rows before work is split across threads.
const PAR_MIN_ROWS: usize = 8;

/// Applies `f(row_index, row)` to every `width`-wide row of `out`.
pub fn for_each_row<F>(out: &mut [f64], width: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if out.len() / width >= PAR_MIN_ROWS {
            out.par_chunks_mut(width)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    out.chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

/// Maps `0..n` through `f` and returns the results in index order.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| nn_row(&a[i * k..(i + 1) * k], b, n, row));
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| nt_row(&a[i * k..(i + 1) * k], b, k, row));
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, |i, row| tn_row(a, b, i, m, n, row));
}

#[inline]
fn nn_row(a_row: &[f64], b: &[f64], n: usize, row: &mut [f64]) {
    row.fill(0.0);
    for (p, &ap) in a_row.iter().enumerate() {
        if ap != 0.0 {
            axpy(ap, &b[p * n..(p + 1) * n], row);
        }
    }
}

#[inline]
fn nt_row(a_row: &[f64], b: &[f64], k: usize, row: &mut [f64]) {
    for (j, o) in row.iter_mut().enumerate() {
        *o = dot(a_row, &b[j * k..(j + 1) * k]);
    }
}

#[inline]
fn tn_row(a: &[f64], b: &[f64], i: usize, m: usize, n: usize, row: &mut [f64]) {
    row.fill(0.0);
    let k = a.len() / m;
    for p in 0..k {
        let ap = a[p * m + i];
        if ap != 0.0 {
            axpy(ap, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// Single-threaded variants of the kernels, available regardless of features.
pub mod seq {
    use super::{nn_row, nt_row, tn_row};

    pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), m * n);
        for (i, row) in out.chunks_mut(n).enumerate() {
            nn_row(&a[i * k..(i + 1) * k], b, n, row);
        }
    }

    pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), m * n);
        for (i, row) in out.chunks_mut(n).enumerate() {
            nt_row(&a[i * k..(i + 1) * k], b, k, row);
        }
    }

    pub fn gemm_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize, out: &mut [f64]) {
        debug_assert_eq!(a.len(), k * m);
        debug_assert_eq!(out.len(), m * n);
        for (i, row) in out.chunks_mut(n).enumerate() {
            tn_row(a, b, i, m, n, row);
        }
    }
}

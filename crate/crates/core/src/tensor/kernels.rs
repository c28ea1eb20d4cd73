//! Slice-level numeric kernels shared by the forward and backward passes.

use super::Float;
use crate::par;

/// Below this many multiply-accumulates a product is not worth splitting.
const PAR_MIN_MACS: usize = 1 << 15;

fn gemm_rows<T: Float>(a: &[T], b: &[T], k: usize, n: usize, row0: usize, out: &mut [T]) {
    for (r, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn gemm_impl<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize, parallel: bool) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let parallel = parallel && par::enabled() && m > 1 && m * k * n >= PAR_MIN_MACS;
    if parallel {
        // Row blocks of roughly PAR_MIN_MACS work each; rows are independent so
        // the split does not change any summation order.
        let rows_per_chunk = (PAR_MIN_MACS / (k * n).max(1)).clamp(1, m);
        par::for_each_chunk_mut(&mut out, rows_per_chunk * n, true, |ci, chunk| {
            gemm_rows(a, b, k, n, ci * rows_per_chunk, chunk)
        });
    } else {
        gemm_rows(a, b, k, n, 0, &mut out);
    }
    out
}

/// Row-major `[m,k] x [k,n]` product, split across threads when worthwhile.
pub fn gemm<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_impl(a, b, m, k, n, true)
}

/// Same product as [`gemm`], always on the calling thread.
pub fn gemm_sequential<T: Float>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    gemm_impl(a, b, m, k, n, false)
}

pub(crate) fn transpose<T: Float>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes so that output axis `i` is input axis `perm[i]`.
pub fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 || data.is_empty() {
        return (data.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| data[base + j * inner_stride]));
        }
        // advance the odometer over all but the innermost axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out, out_shape);
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

/// Cyclic shift: element at index `i` along an axis moves to `(i + shift) mod len`.
pub fn roll_data<T: Copy>(data: &[T], shape: &[usize], shifts: &[isize]) -> Vec<T> {
    let mut cur = data.to_vec();
    for (axis, &shift) in shifts.iter().enumerate() {
        let len = shape[axis];
        let s = shift.rem_euclid(len as isize) as usize;
        if s == 0 {
            continue;
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut next = cur.clone();
        for o in 0..outer {
            for i in 0..len {
                let dst = (o * len + (i + s) % len) * inner;
                let src = (o * len + i) * inner;
                next[dst..dst + inner].copy_from_slice(&cur[src..src + inner]);
            }
        }
        cur = next;
    }
    cur
}

//! Raw numeric kernels over flat slices.

use rayon::prelude::*;

use super::Real;
use crate::error::{dim_err, Result};

/// Work size (multiply-adds) above which row-parallel GEMM kicks in.
const PAR_THRESHOLD: usize = 1 << 17;

/// `out = a · b` with `a: [m, k]`, `b: [k, n]`, all row-major.
///
/// Each output row is computed independently in a fixed order, so results do
/// not depend on the thread count or on the row's position in `a`.
pub(crate) fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row_kernel = |(i, out_row): (usize, &mut [T])| {
        out_row.fill(T::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row_kernel);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_kernel);
    }
}

/// Transposes a row-major `[rows, cols]` block.
pub(crate) fn transpose2<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Splits a matmul operand shape into (batch dims, rows, cols).
fn split_matrix_shape(shape: &[usize]) -> Option<(&[usize], usize, usize)> {
    let nd = shape.len();
    if nd < 2 {
        return None;
    }
    Some((&shape[..nd - 2], shape[nd - 2], shape[nd - 1]))
}

/// Broadcast rule shared by all binary ops: the shorter shape must be a
/// suffix of the longer one (broadcasting over leading dims only).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if long[long.len() - short.len()..] == *short {
        Some(long.to_vec())
    } else {
        None
    }
}

/// Batched matrix product `[.., M, K] x [.., K, N]`.
pub(crate) fn batched_matmul<T: Real>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
) -> Result<(Vec<usize>, Vec<T>)> {
    let mismatch = || dim_err!("matmul shapes {:?} and {:?} are incompatible", a_shape, b_shape);
    let (a_batch, m, k) = split_matrix_shape(a_shape).ok_or_else(mismatch)?;
    let (b_batch, k2, n) = split_matrix_shape(b_shape).ok_or_else(mismatch)?;
    if k != k2 {
        return Err(mismatch());
    }
    let batch_shape = broadcast_shape(a_batch, b_batch).ok_or_else(mismatch)?;
    let batch: usize = batch_shape.iter().product();
    let a_count: usize = a_batch.iter().product();
    let b_count: usize = b_batch.iter().product();
    let mut out_shape = batch_shape;
    out_shape.extend([m, n]);
    let mut out = vec![T::zero(); batch * m * n];
    if b_count == 1 && a_count == batch {
        // shared right operand: one tall GEMM
        gemm(batch * m, k, n, a, b, &mut out);
    } else {
        for (o, chunk) in out.chunks_mut(m * n).enumerate() {
            let ai = o % a_count;
            let bi = o % b_count;
            gemm(
                m,
                k,
                n,
                &a[ai * m * k..(ai + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                chunk,
            );
        }
    }
    Ok((out_shape, out))
}

/// Gradients of `C = A · B` given `dC`, honouring leading-dim broadcasting.
pub(crate) fn matmul_backward<T: Real>(
    a_shape: &[usize],
    a: &[T],
    b_shape: &[usize],
    b: &[T],
    grad: &[T],
) -> (Vec<T>, Vec<T>) {
    let nd_a = a_shape.len();
    let nd_b = b_shape.len();
    let (m, k) = (a_shape[nd_a - 2], a_shape[nd_a - 1]);
    let n = b_shape[nd_b - 1];
    let a_count: usize = a_shape[..nd_a - 2].iter().product();
    let b_count: usize = b_shape[..nd_b - 2].iter().product();
    let batch = grad.len() / (m * n);
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];

    if b_count == 1 && a_count == batch {
        let rows = batch * m;
        let bt = transpose2(k, n, b);
        gemm(rows, n, k, grad, &bt, &mut ga);
        let at = transpose2(rows, k, a);
        gemm(k, rows, n, &at, grad, &mut gb);
        return (ga, gb);
    }

    let mut tmp_a = vec![T::zero(); m * k];
    let mut tmp_b = vec![T::zero(); k * n];
    for o in 0..batch {
        let ai = o % a_count;
        let bi = o % b_count;
        let g = &grad[o * m * n..(o + 1) * m * n];
        let a_blk = &a[ai * m * k..(ai + 1) * m * k];
        let b_blk = &b[bi * k * n..(bi + 1) * k * n];
        let bt = transpose2(k, n, b_blk);
        gemm(m, n, k, g, &bt, &mut tmp_a);
        for (d, s) in ga[ai * m * k..(ai + 1) * m * k].iter_mut().zip(&tmp_a) {
            *d += *s;
        }
        let at = transpose2(m, k, a_blk);
        gemm(k, m, n, &at, g, &mut tmp_b);
        for (d, s) in gb[bi * k * n..(bi + 1) * k * n].iter_mut().zip(&tmp_b) {
            *d += *s;
        }
    }
    (ga, gb)
}

/// Sums a broadcast gradient back down to an operand of `len` elements
/// (the operand's shape is a suffix of the gradient's shape).
pub(crate) fn reduce_to<T: Real>(grad: &[T], len: usize) -> Vec<T> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![T::zero(); len];
    for chunk in grad.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += *g;
        }
    }
    out
}

/// Decomposes `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stabilised softmax along an axis.
pub(crate) fn softmax<T: Real>(shape: &[usize], x: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..len {
                out[idx(j)] /= total;
            }
        }
    }
    out
}

/// Log-softmax along an axis, via the log-sum-exp identity.
pub(crate) fn log_softmax<T: Real>(shape: &[usize], x: &[T], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..len).map(|j| (x[idx(j)] - max).exp()).sum();
            let lse = max + total.ln();
            for j in 0..len {
                out[idx(j)] = x[idx(j)] - lse;
            }
        }
    }
    out
}

/// Sum of values in a canonical (sorted) order, so the result is invariant
/// under any permutation of the inputs.
pub(crate) fn canonical_sum<T: Real>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_is_suffix_only() {
        assert_eq!(broadcast_shape(&[4, 3, 2], &[2]), Some(vec![4, 3, 2]));
        assert_eq!(broadcast_shape(&[2], &[4, 3, 2]), Some(vec![4, 3, 2]));
        assert_eq!(broadcast_shape(&[4, 3, 2], &[3, 1]), None);
        assert_eq!(broadcast_shape(&[4, 1, 2], &[3, 2]), None);
    }

    #[test]
    fn batched_matmul_broadcasts_leading_dims() {
        // [2, 1, 2] x [2, 1] -> [2, 1, 1]
        let (shape, out) =
            batched_matmul::<f64>(&[2, 1, 2], &[1., 2., 3., 4.], &[2, 1], &[1., 1.]).unwrap();
        assert_eq!(shape, vec![2, 1, 1]);
        assert_eq!(out, vec![3., 7.]);
        // [2, 2] x [3, 2, 1]: left operand broadcast over 3 batches
        let b: Vec<f64> = (0..6).map(f64::from).collect();
        let (shape, out) = batched_matmul::<f64>(&[2, 2], &[1., 0., 0., 1.], &[3, 2, 1], &b).unwrap();
        assert_eq!(shape, vec![3, 2, 1]);
        assert_eq!(out, b);
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let mut a = vec![1e8f32, 1.0, -1e8, 3.5, 0.25];
        let mut b = vec![3.5f32, -1e8, 0.25, 1.0, 1e8];
        assert_eq!(canonical_sum(&mut a).to_bits(), canonical_sum(&mut b).to_bits());
    }
}

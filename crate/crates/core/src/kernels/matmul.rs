use rayon::prelude::*;

use crate::tensor::Scalar;

/// Rows handled together so each loaded row of `b` feeds several accumulators.
const ROW_BLOCK: usize = 4;
/// Below this many multiply-accumulates the kernel stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Columns of a row block kept in registers across the whole `k` loop.
const COL_BLOCK: usize = 8;
/// Floats of `a` and `b` rows per `k` tile in [`gemm_tn_acc`], sized for L1.
const TILE_FLOATS: usize = 4096;

fn gemm_rows<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let rows = c.len() / n;
    if rows == ROW_BLOCK {
        let mut j = 0;
        while j + COL_BLOCK <= n {
            gemm_block(a, b, c, k, n, j);
            j += COL_BLOCK;
        }
        for r in 0..ROW_BLOCK {
            let arow = &a[r * k..(r + 1) * k];
            for jj in j..n {
                let mut acc = c[r * n + jj];
                for (p, &s) in arow.iter().enumerate() {
                    acc += s * b[p * n + jj];
                }
                c[r * n + jj] = acc;
            }
        }
    } else {
        for (r, crow) in c.chunks_mut(n).enumerate() {
            let arow = &a[r * k..(r + 1) * k];
            for (p, &s) in arow.iter().enumerate() {
                axpy(crow, s, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

#[inline(always)]
fn gemm_block<T: Scalar>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, j: usize) {
    let mut acc = [[T::zero(); COL_BLOCK]; ROW_BLOCK];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[r * n + j..][..COL_BLOCK]);
    }
    let (a0, a1, a2, a3) = (&a[..k], &a[k..2 * k], &a[2 * k..3 * k], &a[3 * k..4 * k]);
    for p in 0..k {
        let bp: &[T; COL_BLOCK] = b[p * n + j..][..COL_BLOCK].try_into().unwrap();
        let s = [a0[p], a1[p], a2[p], a3[p]];
        for r in 0..ROW_BLOCK {
            for q in 0..COL_BLOCK {
                acc[r][q] += s[r] * bp[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n + j..][..COL_BLOCK].copy_from_slice(row);
    }
}

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
///
/// Every output element is reduced over `p` in ascending order on a single
/// thread, so the result does not depend on the thread count.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let chunk = ROW_BLOCK * n;
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(chunk).enumerate().for_each(|(blk, cb)| {
            let r0 = blk * ROW_BLOCK;
            let rows = cb.len() / n;
            gemm_rows(&a[r0 * k..(r0 + rows) * k], b, cb, k, n);
        });
    } else {
        for (blk, cb) in c.chunks_mut(chunk).enumerate() {
            let r0 = blk * ROW_BLOCK;
            let rows = cb.len() / n;
            gemm_rows(&a[r0 * k..(r0 + rows) * k], b, cb, k, n);
        }
    }
}

/// `c += aᵀ · b` for row-major `a: k×m`, `b: k×n`, `c: m×n`, without
/// materialising the transpose. Same reduction order as [`gemm_acc`]: the
/// `k` axis is walked in tiles that stay in cache, and each tile continues
/// the running sums stored in `c`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let tile = (TILE_FLOATS / (m + n)).max(1);
    for p0 in (0..k).step_by(tile) {
        let kt = tile.min(k - p0);
        let (at, bt) = (&a[p0 * m..(p0 + kt) * m], &b[p0 * n..(p0 + kt) * n]);
        let rows = |(blk, cb): (usize, &mut [T])| {
            let r0 = blk * ROW_BLOCK;
            let rows = cb.len() / n;
            let mut j = 0;
            if rows == ROW_BLOCK {
                while j + COL_BLOCK <= n {
                    gemm_tn_block(at, bt, cb, m, n, r0, j);
                    j += COL_BLOCK;
                }
            }
            for r in 0..rows {
                for jj in j..n {
                    let mut acc = cb[r * n + jj];
                    for p in 0..kt {
                        acc += at[p * m + r0 + r] * bt[p * n + jj];
                    }
                    cb[r * n + jj] = acc;
                }
            }
        };
        if m * kt * n >= PAR_THRESHOLD {
            c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(rows);
        } else {
            c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(rows);
        }
    }
}

#[inline(always)]
fn gemm_tn_block<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, r0: usize, j: usize) {
    let mut acc = [[T::zero(); COL_BLOCK]; ROW_BLOCK];
    for (r, row) in acc.iter_mut().enumerate() {
        row.copy_from_slice(&c[r * n + j..][..COL_BLOCK]);
    }
    for (ap, bp) in a.chunks_exact(m).zip(b.chunks_exact(n)) {
        let s: &[T; ROW_BLOCK] = ap[r0..r0 + ROW_BLOCK].try_into().unwrap();
        let bp: &[T; COL_BLOCK] = bp[j..j + COL_BLOCK].try_into().unwrap();
        for r in 0..ROW_BLOCK {
            for q in 0..COL_BLOCK {
                acc[r][q] += s[r] * bp[q];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        c[r * n + j..][..COL_BLOCK].copy_from_slice(row);
    }
}

pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(a, b, &mut c, m, k, n);
    c
}

/// Transposes a row-major `rows×cols` matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

//! Channels-last 3D convolution.
//!
//! Layouts: input `[H, W, D, Ci]`, weight `[KH, KW, KD, Ci, Co]`,
//! output `[Ho, Wo, Do, Co]`. [`conv3d_reference`] is the seven-deep loop
//! kept as the correctness oracle; [`conv3d_forward`] reorders the loops so
//! the innermost one runs over contiguous output channels. Both reduce each
//! output over (kh, kw, kd, ci) in the same order and therefore agree bit for
//! bit.

use rayon::prelude::*;

use crate::kernels::matmul;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    /// Output spatial extent, or `None` when the kernel does not fit.
    pub fn output(&self) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = self.input[a] + 2 * self.padding[a];
            if self.kernel[a] == 0 || self.stride[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Input coordinate along `axis` hit by output `o` at kernel tap `k`.
    #[inline]
    fn source(&self, axis: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[axis] + k) as isize - self.padding[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Output coordinate along `axis` that reads input `i` through tap `k`.
    #[inline]
    fn target(&self, axis: usize, out_len: usize, i: usize, k: usize) -> Option<usize> {
        let num = (i + self.padding[axis]) as isize - k as isize;
        if num < 0 || num as usize % self.stride[axis] != 0 {
            return None;
        }
        let o = num as usize / self.stride[axis];
        (o < out_len).then_some(o)
    }
}

pub fn conv3d_reference<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
) -> Vec<T> {
    let out = g.output().expect("kernel larger than padded input");
    let (ci_n, co_n) = (g.in_channels, g.out_channels);
    let [ih_n, iw_n, id_n] = g.input;
    let [kh_n, kw_n, kd_n] = g.kernel;
    let mut y = vec![T::zero(); out[0] * out[1] * out[2] * co_n];
    for oh in 0..out[0] {
        for ow in 0..out[1] {
            for od in 0..out[2] {
                for co in 0..co_n {
                    let mut acc = bias.map_or(T::zero(), |b| b[co]);
                    for kh in 0..kh_n {
                        for kw in 0..kw_n {
                            for kd in 0..kd_n {
                                for ci in 0..ci_n {
                                    let (Some(ih), Some(iw), Some(id)) = (
                                        g.source(0, oh, kh),
                                        g.source(1, ow, kw),
                                        g.source(2, od, kd),
                                    ) else {
                                        continue;
                                    };
                                    debug_assert!(ih < ih_n && iw < iw_n && id < id_n);
                                    let xi = ((ih * iw_n + iw) * id_n + id) * ci_n + ci;
                                    let wi = (((kh * kw_n + kw) * kd_n + kd) * ci_n + ci) * co_n + co;
                                    acc += x[xi] * w[wi];
                                }
                            }
                        }
                    }
                    y[((oh * out[1] + ow) * out[2] + od) * co_n + co] = acc;
                }
            }
        }
    }
    y
}

/// `row[j] += Σ src[s + i] · w[o + i·n + j]` over `i < k` for each `(s, o)` in
/// `pairs`, taken in order. Output columns are held in registers in blocks.
fn accumulate_row<T: Scalar>(row: &mut [T], src: &[T], w: &[T], pairs: &[(usize, usize)], k: usize) {
    let n = row.len();
    let mut j = 0;
    while j + 16 <= n {
        accumulate_block::<T, 16>(row, src, w, pairs, k, j);
        j += 16;
    }
    while j + 4 <= n {
        accumulate_block::<T, 4>(row, src, w, pairs, k, j);
        j += 4;
    }
    while j < n {
        accumulate_block::<T, 1>(row, src, w, pairs, k, j);
        j += 1;
    }
}

#[inline(always)]
fn accumulate_block<T: Scalar, const W: usize>(
    row: &mut [T],
    src: &[T],
    w: &[T],
    pairs: &[(usize, usize)],
    k: usize,
    j: usize,
) {
    let n = row.len();
    let mut acc: [T; W] = row[j..j + W].try_into().unwrap();
    for &(s, o) in pairs {
        for (&xv, wrow) in src[s..s + k].iter().zip(w[o..o + k * n].chunks_exact(n)) {
            let wr: &[T; W] = wrow[j..j + W].try_into().unwrap();
            for q in 0..W {
                acc[q] += xv * wr[q];
            }
        }
    }
    row[j..j + W].copy_from_slice(&acc);
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeometry) -> Vec<T> {
    let out = g.output().expect("kernel larger than padded input");
    let (ci_n, co_n) = (g.in_channels, g.out_channels);
    let [_, iw_n, id_n] = g.input;
    let [kh_n, kw_n, kd_n] = g.kernel;
    let plane = out[1] * out[2] * co_n;
    let mut y = vec![T::zero(); out[0] * plane];
    y.par_chunks_mut(plane).enumerate().for_each(|(oh, yplane)| {
        let mut pairs = Vec::with_capacity(g.kernel_volume());
        for ow in 0..out[1] {
            for od in 0..out[2] {
                let yrow = &mut yplane[(ow * out[2] + od) * co_n..][..co_n];
                match bias {
                    Some(b) => yrow.copy_from_slice(b),
                    None => yrow.fill(T::zero()),
                }
                pairs.clear();
                for kh in 0..kh_n {
                    let Some(ih) = g.source(0, oh, kh) else { continue };
                    for kw in 0..kw_n {
                        let Some(iw) = g.source(1, ow, kw) else { continue };
                        for kd in 0..kd_n {
                            let Some(id) = g.source(2, od, kd) else { continue };
                            pairs.push((
                                ((ih * iw_n + iw) * id_n + id) * ci_n,
                                ((kh * kw_n + kw) * kd_n + kd) * ci_n * co_n,
                            ));
                        }
                    }
                }
                accumulate_row(yrow, x, w, &pairs, ci_n);
            }
        }
    });
    y
}

/// Gradient with respect to the input, gathered per input voxel.
pub fn conv3d_backward_input<T: Scalar>(dy: &[T], w: &[T], g: &ConvGeometry) -> Vec<T> {
    let out = g.output().expect("kernel larger than padded input");
    let (ci_n, co_n) = (g.in_channels, g.out_channels);
    let [ih_n, iw_n, id_n] = g.input;
    let [kh_n, kw_n, kd_n] = g.kernel;
    let taps = g.kernel_volume();
    // [tap, co, ci] so the inner loop runs over contiguous input channels.
    let mut wt = vec![T::zero(); w.len()];
    for t in 0..taps {
        for ci in 0..ci_n {
            for co in 0..co_n {
                wt[(t * co_n + co) * ci_n + ci] = w[(t * ci_n + ci) * co_n + co];
            }
        }
    }
    let plane = iw_n * id_n * ci_n;
    let mut dx = vec![T::zero(); ih_n * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(ih, dplane)| {
        let mut pairs = Vec::with_capacity(taps);
        for iw in 0..iw_n {
            for id in 0..id_n {
                let drow = &mut dplane[(iw * id_n + id) * ci_n..][..ci_n];
                pairs.clear();
                for kh in 0..kh_n {
                    let Some(oh) = g.target(0, out[0], ih, kh) else { continue };
                    for kw in 0..kw_n {
                        let Some(ow) = g.target(1, out[1], iw, kw) else { continue };
                        for kd in 0..kd_n {
                            let Some(od) = g.target(2, out[2], id, kd) else { continue };
                            let t = (kh * kw_n + kw) * kd_n + kd;
                            pairs.push((((oh * out[1] + ow) * out[2] + od) * co_n, t * co_n * ci_n));
                        }
                    }
                }
                accumulate_row(drow, dy, &wt, &pairs, co_n);
            }
        }
    });
    dx
}

/// Gradient with respect to the weight. For each kernel tap the input rows
/// and output-gradient rows it connects are gathered in output order, and
/// the tap's `[Ci, Co]` block is their product `Xᵀ·dY`.
pub fn conv3d_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeometry) -> Vec<T> {
    let out = g.output().expect("kernel larger than padded input");
    let (ci_n, co_n) = (g.in_channels, g.out_channels);
    let [_, iw_n, id_n] = g.input;
    let [_, kw_n, kd_n] = g.kernel;
    let mut dw = vec![T::zero(); g.kernel_volume() * ci_n * co_n];
    let (mut xs, mut gs) = (Vec::new(), Vec::new());
    for (t, dblk) in dw.chunks_exact_mut(ci_n * co_n).enumerate() {
        let kd = t % kd_n;
        let kw = (t / kd_n) % kw_n;
        let kh = t / (kd_n * kw_n);
        xs.clear();
        gs.clear();
        for oh in 0..out[0] {
            let Some(ih) = g.source(0, oh, kh) else { continue };
            for ow in 0..out[1] {
                let Some(iw) = g.source(1, ow, kw) else { continue };
                for od in 0..out[2] {
                    let Some(id) = g.source(2, od, kd) else { continue };
                    xs.extend_from_slice(&x[((ih * iw_n + iw) * id_n + id) * ci_n..][..ci_n]);
                    gs.extend_from_slice(&dy[((oh * out[1] + ow) * out[2] + od) * co_n..][..co_n]);
                }
            }
        }
        matmul::gemm_tn_acc(&xs, &gs, dblk, ci_n, gs.len() / co_n, co_n);
    }
    dw
}

pub fn conv3d_backward_bias<T: Scalar>(dy: &[T], out_channels: usize) -> Vec<T> {
    let mut db = vec![T::zero(); out_channels];
    for row in dy.chunks_exact(out_channels) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    db
}

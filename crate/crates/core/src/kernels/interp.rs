//! Separable linear interpolation with half-pixel centres (the
//! `align_corners = false` convention). Trilinear resampling is the
//! composition of one pass per spatial axis.

use crate::tensor::{split_at_axis, Scalar};

/// Source taps for each output position along one axis: `(i0, i1, frac)`.
pub fn taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Resamples axis `axis` of `x` (shape `shape`) to length `out_len`.
pub fn resample_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize, out_len: usize) -> Vec<T> {
    let (outer, in_len, inner) = split_at_axis(shape, axis);
    let taps = taps(in_len, out_len);
    let mut y = vec![T::zero(); outer * out_len * inner];
    for a in 0..outer {
        let src = &x[a * in_len * inner..][..in_len * inner];
        let dst = &mut y[a * out_len * inner..][..out_len * inner];
        for (o, &(i0, i1, f)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - f), T::of(f));
            let r0 = &src[i0 * inner..][..inner];
            let r1 = &src[i1 * inner..][..inner];
            for ((d, &v0), &v1) in dst[o * inner..][..inner].iter_mut().zip(r0).zip(r1) {
                *d = w0 * v0 + w1 * v1;
            }
        }
    }
    y
}

/// Adjoint of [`resample_axis`]: scatters `dy` back onto the input grid.
pub fn resample_axis_adjoint<T: Scalar>(
    dy: &[T],
    in_shape: &[usize],
    axis: usize,
    out_len: usize,
) -> Vec<T> {
    let (outer, in_len, inner) = split_at_axis(in_shape, axis);
    let taps = taps(in_len, out_len);
    let mut dx = vec![T::zero(); outer * in_len * inner];
    for a in 0..outer {
        let g = &dy[a * out_len * inner..][..out_len * inner];
        let d = &mut dx[a * in_len * inner..][..in_len * inner];
        for (o, &(i0, i1, f)) in taps.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - f), T::of(f));
            let grow = &g[o * inner..][..inner];
            for (k, &gv) in grow.iter().enumerate() {
                d[i0 * inner + k] += w0 * gv;
                d[i1 * inner + k] += w1 * gv;
            }
        }
    }
    dx
}

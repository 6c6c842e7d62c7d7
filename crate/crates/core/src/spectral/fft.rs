//! Multidimensional real transforms built from 1D complex FFTs.
//!
//! Buffers are row-major with a leading "lane count" axis (batch × channels)
//! followed by the spatial axes. The last spatial axis carries the one-sided
//! spectrum. Forward transforms divide by the number of spatial points.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Splits `dims` around `axis` into `(outer, len, inner)`.
fn around(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

/// Unnormalized complex FFT along `axis` in place.
pub(crate) fn fft_axis(buf: &mut [Complex64], dims: &[usize], axis: usize, inverse: bool) {
    let (outer, n, inner) = around(dims, axis);
    if n == 1 || buf.is_empty() {
        return;
    }
    let fft = plan(n, inverse);
    if inner == 1 {
        fft.process(buf);
        return;
    }
    let mut lane = vec![Complex64::default(); n];
    let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            for (k, l) in lane.iter_mut().enumerate() {
                *l = buf[base + k * inner + i];
            }
            fft.process_with_scratch(&mut lane, &mut scratch);
            for (k, l) in lane.iter().enumerate() {
                buf[base + k * inner + i] = *l;
            }
        }
    }
}

/// Rebuilds `axis` with length `new_len`; output row `k` copies input row
/// `src(k)` or is zero when `src(k)` is `None`.
pub(crate) fn remap_axis(
    buf: &[Complex64],
    dims: &[usize],
    axis: usize,
    new_len: usize,
    src: impl Fn(usize) -> Option<usize>,
) -> Vec<Complex64> {
    let (outer, n, inner) = around(dims, axis);
    let mut out = vec![Complex64::default(); outer * new_len * inner];
    for o in 0..outer {
        for k in 0..new_len {
            if let Some(j) = src(k) {
                let from = (o * n + j) * inner;
                let to = (o * new_len + k) * inner;
                out[to..to + inner].copy_from_slice(&buf[from..from + inner]);
            }
        }
    }
    out
}

/// Keeps the `m` lowest non-negative and `m` highest (negative) frequencies.
pub(crate) fn truncate_axis(buf: &[Complex64], dims: &[usize], axis: usize, m: usize) -> Vec<Complex64> {
    let n = dims[axis];
    remap_axis(buf, dims, axis, 2 * m, |k| Some(if k < m { k } else { n - 2 * m + k }))
}

/// Adjoint of `truncate_axis`: places `2m` rows back into a length-`n` axis.
pub(crate) fn embed_axis(buf: &[Complex64], dims: &[usize], axis: usize, n: usize) -> Vec<Complex64> {
    let m = dims[axis] / 2;
    remap_axis(buf, dims, axis, n, |k| {
        if k < m {
            Some(k)
        } else if k >= n - m {
            Some(k + 2 * m - n)
        } else {
            None
        }
    })
}

/// Resizes the last axis to `new_len`, keeping or zero-padding the prefix.
pub(crate) fn prefix_last(buf: &[Complex64], dims: &[usize], new_len: usize) -> Vec<Complex64> {
    let axis = dims.len() - 1;
    let old = dims[axis];
    remap_axis(buf, dims, axis, new_len, |k| (k < old).then_some(k))
}

/// Weight of a one-sided coefficient when folding the two-sided spectrum.
pub(crate) fn fold_weight(j: usize, n: usize) -> f64 {
    if j == 0 || 2 * j == n {
        1.0
    } else {
        2.0
    }
}

/// Real lanes of length `n` to their first `keep` DFT coefficients
/// (unnormalized). With `folded`, coefficients are scaled by `fold_weight`.
pub(crate) fn r2c_lanes(real: &[f64], n: usize, keep: usize, folded: bool) -> Vec<Complex64> {
    let lanes = real.len() / n;
    let mut buf: Vec<Complex64> = real.iter().map(|&r| Complex64::new(r, 0.0)).collect();
    if !buf.is_empty() {
        plan(n, false).process(&mut buf);
    }
    let mut out = Vec::with_capacity(lanes * keep);
    for l in 0..lanes {
        let lane = &buf[l * n..l * n + keep];
        if folded {
            out.extend(lane.iter().enumerate().map(|(j, c)| c * fold_weight(j, n)));
        } else {
            out.extend_from_slice(lane);
        }
    }
    out
}

/// One-sided lanes of `keep` coefficients to real lanes of length `n`
/// (unnormalized inverse). With `hermitian`, the missing half is filled by
/// conjugate symmetry; otherwise it is zero and the real part is taken.
pub(crate) fn c2r_lanes(spec: &[Complex64], keep: usize, n: usize, hermitian: bool) -> Vec<f64> {
    debug_assert!(keep <= n / 2 + 1);
    let lanes = spec.len() / keep;
    let mut buf = vec![Complex64::default(); lanes * n];
    for l in 0..lanes {
        let src = &spec[l * keep..(l + 1) * keep];
        let dst = &mut buf[l * n..(l + 1) * n];
        dst[..keep].copy_from_slice(src);
        if hermitian {
            for j in 1..keep {
                if 2 * j != n {
                    dst[n - j] = src[j].conj();
                }
            }
        }
    }
    if !buf.is_empty() {
        plan(n, true).process(&mut buf);
    }
    buf.into_iter().map(|c| c.re).collect()
}

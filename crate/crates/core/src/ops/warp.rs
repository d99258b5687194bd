//! Disparity-conditioned horizontal back-warping.
//!
//! Samples `features` at x - disparity(x) along the same row (rectified
//! geometry: rows never mix). Sample coordinates clamp to [0, W-1]; the
//! disparity gradient is zero wherever the clamp is active.

use super::for_each_row;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// (low index, high index, high-side weight, clamped?)
#[inline]
fn sample_at<S: Scalar>(x: usize, disp: S, w: usize) -> (usize, usize, S, bool) {
    let xs = S::of_usize(x) - disp;
    let max = S::of_usize(w - 1);
    let clamped = xs < S::zero() || xs > max;
    let xc = xs.max(S::zero()).min(max);
    let lo = xc.floor();
    let a = xc - lo;
    let lo = (lo.as_f64() as usize).min(w - 1);
    let hi = (lo + 1).min(w - 1);
    (lo, hi, a, clamped)
}

pub fn warp1d_fwd<S: Scalar>(features: &Tensor<S>, disparity: &Tensor<S>) -> Vec<S> {
    let [n, c, h, w] = features.shape();
    let fv = features.data();
    let dv = disparity.data();
    let mut out = vec![S::zero(); n * c * h * w];
    for_each_row(&mut out, w, |row_id, row| {
        let y = row_id % h;
        let ch = (row_id / h) % c;
        let bn = row_id / (h * c);
        let frow = &fv[((bn * c + ch) * h + y) * w..][..w];
        let drow = &dv[(bn * h + y) * w..][..w];
        for (x, out_px) in row.iter_mut().enumerate() {
            let (lo, hi, a, _) = sample_at(x, drow[x], w);
            *out_px = frow[lo] * (S::one() - a) + frow[hi] * a;
        }
    });
    out
}

/// Gradients w.r.t. features (row-local scatter) and disparity (gather).
pub fn warp1d_bwd<S: Scalar>(
    gout: &[S],
    features: &Tensor<S>,
    disparity: &Tensor<S>,
) -> (Vec<S>, Vec<S>) {
    let [n, c, h, w] = features.shape();
    let fv = features.data();
    let dv = disparity.data();

    let mut gfeat = vec![S::zero(); n * c * h * w];
    let scatter_row = |row_id: usize, row: &mut [S]| {
        let y = row_id % h;
        let ch = (row_id / h) % c;
        let bn = row_id / (h * c);
        let grow = &gout[((bn * c + ch) * h + y) * w..][..w];
        let drow = &dv[(bn * h + y) * w..][..w];
        for (x, &g) in grow.iter().enumerate() {
            let (lo, hi, a, _) = sample_at(x, drow[x], w);
            row[lo] += g * (S::one() - a);
            row[hi] += g * a;
        }
    };
    if gfeat.len() >= 1 << 13 {
        gfeat
            .par_chunks_mut(w)
            .enumerate()
            .for_each(|(i, row)| scatter_row(i, row));
    } else {
        for (i, row) in gfeat.chunks_mut(w).enumerate() {
            scatter_row(i, row);
        }
    }

    let mut gdisp = vec![S::zero(); n * h * w];
    for_each_row(&mut gdisp, w, |row_id, row| {
        let y = row_id % h;
        let bn = row_id / h;
        let drow = &dv[(bn * h + y) * w..][..w];
        for (x, acc) in row.iter_mut().enumerate() {
            let (lo, hi, _, clamped) = sample_at(x, drow[x], w);
            if clamped {
                continue;
            }
            let mut sum = S::zero();
            for ch in 0..c {
                let base = ((bn * c + ch) * h + y) * w;
                // d(out)/d(disp) = -(f[hi] - f[lo])
                sum = sum + gout[base + x] * (fv[base + hi] - fv[base + lo]);
            }
            *acc = -sum;
        }
    });
    (gfeat, gdisp)
}

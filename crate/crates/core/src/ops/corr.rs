//! Horizontal correlation between two feature maps.
//!
//! Output channel j holds displacement d = j - max_disp, so the volume has
//! 2*max_disp + 1 channels. Scores are channel-mean dot products; samples
//! falling outside the right image contribute zero.

use super::for_each_row;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn corr1d_fwd<S: Scalar>(left: &Tensor<S>, right: &Tensor<S>, max_disp: usize) -> Vec<S> {
    let [n, c, h, w] = left.shape();
    let channels = 2 * max_disp + 1;
    let lv = left.data();
    let rv = right.data();
    let inv_c = S::one() / S::of_usize(c);
    let mut out = vec![S::zero(); n * channels * h * w];
    for_each_row(&mut out, w, |row_id, row| {
        let y = row_id % h;
        let j = (row_id / h) % channels;
        let bn = row_id / (h * channels);
        let d = j as isize - max_disp as isize;
        for (x, out_px) in row.iter_mut().enumerate() {
            let xr = x as isize - d;
            if xr < 0 || xr >= w as isize {
                *out_px = S::zero();
                continue;
            }
            let mut sum = S::zero();
            for ch in 0..c {
                let base = ((bn * c + ch) * h + y) * w;
                sum = sum + lv[base + x] * rv[base + xr as usize];
            }
            *out_px = sum * inv_c;
        }
    });
    out
}

/// Gradients w.r.t. both inputs; each is a pure gather over the volume grad.
pub fn corr1d_bwd<S: Scalar>(
    gout: &[S],
    left: &Tensor<S>,
    right: &Tensor<S>,
    max_disp: usize,
) -> (Vec<S>, Vec<S>) {
    let [n, c, h, w] = left.shape();
    let channels = 2 * max_disp + 1;
    let lv = left.data();
    let rv = right.data();
    let inv_c = S::one() / S::of_usize(c);
    let mut gl = vec![S::zero(); n * c * h * w];
    for_each_row(&mut gl, w, |row_id, row| {
        let y = row_id % h;
        let ch = (row_id / h) % c;
        let bn = row_id / (h * c);
        for (x, acc) in row.iter_mut().enumerate() {
            let mut sum = S::zero();
            for j in 0..channels {
                let d = j as isize - max_disp as isize;
                let xr = x as isize - d;
                if xr < 0 || xr >= w as isize {
                    continue;
                }
                let g = gout[((bn * channels + j) * h + y) * w + x];
                sum = sum + g * rv[((bn * c + ch) * h + y) * w + xr as usize];
            }
            *acc = sum * inv_c;
        }
    });
    let mut gr = vec![S::zero(); n * c * h * w];
    for_each_row(&mut gr, w, |row_id, row| {
        let y = row_id % h;
        let ch = (row_id / h) % c;
        let bn = row_id / (h * c);
        for (xr, acc) in row.iter_mut().enumerate() {
            let mut sum = S::zero();
            for j in 0..channels {
                let d = j as isize - max_disp as isize;
                let x = xr as isize + d;
                if x < 0 || x >= w as isize {
                    continue;
                }
                let g = gout[((bn * channels + j) * h + y) * w + x as usize];
                sum = sum + g * lv[((bn * c + ch) * h + y) * w + x as usize];
            }
            *acc = sum * inv_c;
        }
    });
    (gl, gr)
}

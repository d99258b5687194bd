//! Align-corners bilinear resampling.

use super::for_each_row;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

#[inline]
fn axis_scale<S: Scalar>(src: usize, dst: usize) -> S {
    if dst > 1 {
        S::of_usize(src - 1) / S::of_usize(dst - 1)
    } else {
        S::zero()
    }
}

/// Source coordinate split into (low index, high index, high-side weight).
#[inline]
fn sample<S: Scalar>(i: usize, scale: S, src: usize) -> (usize, usize, S) {
    let pos = S::of_usize(i) * scale;
    let lo = pos.floor();
    let a = pos - lo;
    let lo = (lo.as_f64() as usize).min(src - 1);
    let hi = (lo + 1).min(src - 1);
    (lo, hi, a)
}

pub fn resize_fwd<S: Scalar>(x: &Tensor<S>, oh: usize, ow: usize) -> Vec<S> {
    let [n, c, h, w] = x.shape();
    let xv = x.data();
    let sy = axis_scale::<S>(h, oh);
    let sx = axis_scale::<S>(w, ow);
    let mut out = vec![S::zero(); n * c * oh * ow];
    for_each_row(&mut out, ow, |row_id, row| {
        let oy = row_id % oh;
        let plane = row_id / oh; // n*c plane index
        let (y0, y1, ay) = sample(oy, sy, h);
        let row0 = &xv[(plane * h + y0) * w..][..w];
        let row1 = &xv[(plane * h + y1) * w..][..w];
        for (ox, out_px) in row.iter_mut().enumerate() {
            let (x0, x1, ax) = sample(ox, sx, w);
            let top = row0[x0] * (S::one() - ax) + row0[x1] * ax;
            let bot = row1[x0] * (S::one() - ax) + row1[x1] * ax;
            *out_px = top * (S::one() - ay) + bot * ay;
        }
    });
    out
}

pub fn resize_bwd<S: Scalar>(
    gout: &[S],
    x_shape: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, c, h, w] = x_shape;
    let sy = axis_scale::<S>(h, oh);
    let sx = axis_scale::<S>(w, ow);
    let mut gin = vec![S::zero(); n * c * h * w];
    // Scatter stays within one (n,c) plane, so planes parallelize cleanly.
    let write_plane = |plane: usize, gplane: &mut [S]| {
        for oy in 0..oh {
            let (y0, y1, ay) = sample(oy, sy, h);
            let grow = &gout[(plane * oh + oy) * ow..][..ow];
            for (ox, &g) in grow.iter().enumerate() {
                let (x0, x1, ax) = sample(ox, sx, w);
                gplane[y0 * w + x0] += g * (S::one() - ay) * (S::one() - ax);
                gplane[y0 * w + x1] += g * (S::one() - ay) * ax;
                gplane[y1 * w + x0] += g * ay * (S::one() - ax);
                gplane[y1 * w + x1] += g * ay * ax;
            }
        }
    };
    if gin.len() >= 1 << 13 && n * c > 1 {
        gin.par_chunks_mut(h * w)
            .enumerate()
            .for_each(|(plane, gplane)| write_plane(plane, gplane));
    } else {
        for (plane, gplane) in gin.chunks_mut(h * w).enumerate() {
            write_plane(plane, gplane);
        }
    }
    gin
}

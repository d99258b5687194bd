//! Convolution and transposed convolution, forward and backward.
//!
//! Conv weights are (out, in, k, k); deconv weights are (in, out, k, k).
//! With that layout a transposed convolution run with a convolution's weight
//! tensor is exactly the adjoint of that convolution, which the tests rely on.
//! Biases are (1, out, 1, 1).

use super::{for_each_row, ConvSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn conv2d_fwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, h, wd] = x.shape();
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut out = vec![S::zero(); n * co * oh * ow];
    for_each_row(&mut out, ow, |row_id, row| {
        let oy = row_id % oh;
        let oc = (row_id / oh) % co;
        let bn = row_id / (oh * co);
        row.fill(bv[oc]);
        for ic in 0..ci {
            for ky in 0..k {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let xrow = &xv[((bn * ci + ic) * h + iy as usize) * wd..][..wd];
                let wrow = &wv[((oc * ci + ic) * k + ky) * k..][..k];
                for (ox, acc) in row.iter_mut().enumerate() {
                    let x0 = (ox * s) as isize - p as isize;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = k.min((wd as isize - x0).max(0) as usize);
                    let mut sum = S::zero();
                    for kx in kx_lo..kx_hi {
                        sum = sum + wrow[kx] * xrow[(x0 + kx as isize) as usize];
                    }
                    *acc += sum;
                }
            }
        }
    });
    out
}

pub fn conv2d_bwd_input<S: Scalar>(
    gout: &[S],
    w: &Tensor<S>,
    spec: &ConvSpec,
    x_shape: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, h, wd] = x_shape;
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let wv = w.data();
    let mut gin = vec![S::zero(); n * ci * h * wd];
    for_each_row(&mut gin, wd, |row_id, row| {
        let y = row_id % h;
        let ic = (row_id / h) % ci;
        let bn = row_id / (h * ci);
        for oc in 0..co {
            for ky in 0..k {
                let t = y + p;
                if t < ky || (t - ky) % s != 0 {
                    continue;
                }
                let oy = (t - ky) / s;
                if oy >= oh {
                    continue;
                }
                let grow = &gout[((bn * co + oc) * oh + oy) * ow..][..ow];
                let wrow = &wv[((oc * ci + ic) * k + ky) * k..][..k];
                for (x, acc) in row.iter_mut().enumerate() {
                    let tx = x + p;
                    let mut sum = S::zero();
                    for (kx, &wk) in wrow.iter().enumerate() {
                        if tx < kx || (tx - kx) % s != 0 {
                            continue;
                        }
                        let ox = (tx - kx) / s;
                        if ox < ow {
                            sum = sum + wk * grow[ox];
                        }
                    }
                    *acc += sum;
                }
            }
        }
    });
    gin
}

pub fn conv2d_bwd_weight<S: Scalar>(
    gout: &[S],
    x: &Tensor<S>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, h, wd] = x.shape();
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let xv = x.data();
    let mut gw = vec![S::zero(); co * ci * k * k];
    for_each_row(&mut gw, k, |row_id, row| {
        let ky = row_id % k;
        let ic = (row_id / k) % ci;
        let oc = row_id / (k * ci);
        for bn in 0..n {
            for oy in 0..oh {
                let iy = (oy * s + ky) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let grow = &gout[((bn * co + oc) * oh + oy) * ow..][..ow];
                let xrow = &xv[((bn * ci + ic) * h + iy as usize) * wd..][..wd];
                for (kx, acc) in row.iter_mut().enumerate() {
                    let mut sum = S::zero();
                    for (ox, &g) in grow.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < wd as isize {
                            sum = sum + g * xrow[ix as usize];
                        }
                    }
                    *acc += sum;
                }
            }
        }
    });
    gw
}

/// Gradient of a bias broadcast over (N, :, OH, OW): per-channel sum.
pub fn bwd_bias<S: Scalar>(gout: &[S], n: usize, co: usize, oh: usize, ow: usize) -> Vec<S> {
    let mut gb = vec![S::zero(); co];
    for_each_row(&mut gb, 1, |oc, acc| {
        let mut sum = S::zero();
        for bn in 0..n {
            let plane = &gout[((bn * co + oc) * oh) * ow..][..oh * ow];
            for &g in plane {
                sum = sum + g;
            }
        }
        acc[0] = sum;
    });
    gb
}

pub fn deconv2d_fwd<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, ih, iw] = x.shape();
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let xv = x.data();
    let wv = w.data();
    let bv = b.data();
    let mut out = vec![S::zero(); n * co * oh * ow];
    for_each_row(&mut out, ow, |row_id, row| {
        let y = row_id % oh;
        let oc = (row_id / oh) % co;
        let bn = row_id / (oh * co);
        row.fill(bv[oc]);
        for ic in 0..ci {
            for ky in 0..k {
                let t = y + p;
                if t < ky || (t - ky) % s != 0 {
                    continue;
                }
                let iy = (t - ky) / s;
                if iy >= ih {
                    continue;
                }
                let xrow = &xv[((bn * ci + ic) * ih + iy) * iw..][..iw];
                let wrow = &wv[((ic * co + oc) * k + ky) * k..][..k];
                for (x_out, acc) in row.iter_mut().enumerate() {
                    let tx = x_out + p;
                    let mut sum = S::zero();
                    for (kx, &wk) in wrow.iter().enumerate() {
                        if tx < kx || (tx - kx) % s != 0 {
                            continue;
                        }
                        let ix = (tx - kx) / s;
                        if ix < iw {
                            sum = sum + wk * xrow[ix];
                        }
                    }
                    *acc += sum;
                }
            }
        }
    });
    out
}

pub fn deconv2d_bwd_input<S: Scalar>(
    gout: &[S],
    w: &Tensor<S>,
    spec: &ConvSpec,
    x_shape: [usize; 4],
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, ih, iw] = x_shape;
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let wv = w.data();
    let mut gin = vec![S::zero(); n * ci * ih * iw];
    for_each_row(&mut gin, iw, |row_id, row| {
        let iy = row_id % ih;
        let ic = (row_id / ih) % ci;
        let bn = row_id / (ih * ci);
        for oc in 0..co {
            for ky in 0..k {
                let y = (iy * s + ky) as isize - p as isize;
                if y < 0 || y >= oh as isize {
                    continue;
                }
                let grow = &gout[((bn * co + oc) * oh + y as usize) * ow..][..ow];
                let wrow = &wv[((ic * co + oc) * k + ky) * k..][..k];
                for (ix, acc) in row.iter_mut().enumerate() {
                    let x0 = (ix * s) as isize - p as isize;
                    let kx_lo = (-x0).max(0) as usize;
                    let kx_hi = k.min((ow as isize - x0).max(0) as usize);
                    let mut sum = S::zero();
                    for kx in kx_lo..kx_hi {
                        sum = sum + wrow[kx] * grow[(x0 + kx as isize) as usize];
                    }
                    *acc += sum;
                }
            }
        }
    });
    gin
}

pub fn deconv2d_bwd_weight<S: Scalar>(
    gout: &[S],
    x: &Tensor<S>,
    spec: &ConvSpec,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let [n, ci, ih, iw] = x.shape();
    let (k, s, p, co) = (spec.kernel, spec.stride, spec.padding, spec.out_channels);
    let xv = x.data();
    let mut gw = vec![S::zero(); ci * co * k * k];
    for_each_row(&mut gw, k, |row_id, row| {
        let ky = row_id % k;
        let oc = (row_id / k) % co;
        let ic = row_id / (k * co);
        for bn in 0..n {
            for iy in 0..ih {
                let y = (iy * s + ky) as isize - p as isize;
                if y < 0 || y >= oh as isize {
                    continue;
                }
                let xrow = &xv[((bn * ci + ic) * ih + iy) * iw..][..iw];
                let grow = &gout[((bn * co + oc) * oh + y as usize) * ow..][..ow];
                for (kx, acc) in row.iter_mut().enumerate() {
                    let mut sum = S::zero();
                    for (ix, &xval) in xrow.iter().enumerate() {
                        let x_out = (ix * s + kx) as isize - p as isize;
                        if x_out >= 0 && x_out < ow as isize {
                            sum = sum + xval * grow[x_out as usize];
                        }
                    }
                    *acc += sum;
                }
            }
        }
    });
    gw
}

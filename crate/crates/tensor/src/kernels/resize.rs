//! Bilinear resampling, pixel shuffle and average pooling.

use crate::parallel::for_each_chunk_mut;
use crate::{Scalar, Tensor};

/// Per-output sample position along one axis: `(i0, i1, frac)`.
///
/// Half-pixel centres (`align_corners = false`), clamped at the borders.
fn axis_taps<T: Scalar>(in_len: usize, out_len: usize) -> Vec<(usize, usize, T)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == in_len - 1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, T::cast_f64(frac))
        })
        .collect()
}

pub fn resize_bilinear_forward<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    for_each_chunk_mut(&mut out, oh * ow, |plane_idx, dst| {
        let src = &xd[plane_idx * h * w..(plane_idx + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let gx = T::one() - fx;
                dst[oy * ow + ox] = gy * (gx * r0[x0] + fx * r0[x1]) + fy * (gx * r1[x0] + fx * r1[x1]);
            }
        }
    });
    Tensor::from_vec(&[n, c, oh, ow], out).expect("resize shape")
}

pub fn resize_bilinear_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (n, c, oh, ow) = dy.dims4();
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ty = axis_taps::<T>(h, oh);
    let tx = axis_taps::<T>(w, ow);
    let mut dx = vec![T::zero(); n * c * h * w];
    let dyd = dy.data();
    for_each_chunk_mut(&mut dx, h * w, |plane_idx, dst| {
        let src = &dyd[plane_idx * oh * ow..(plane_idx + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let gy = T::one() - fy;
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let g = src[oy * ow + ox];
                let gx = T::one() - fx;
                dst[y0 * w + x0] += gy * gx * g;
                dst[y0 * w + x1] += gy * fx * g;
                dst[y1 * w + x0] += fy * gx * g;
                dst[y1 * w + x1] += fy * fx * g;
            }
        }
    });
    Tensor::from_vec(&[n, c, h, w], dx).expect("resize grad shape")
}

/// `[N, C*r*r, H, W] -> [N, C, H*r, W*r]`.
pub fn pixel_shuffle_forward<T: Scalar>(x: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, cr, h, w) = x.dims4();
    assert_eq!(cr % (r * r), 0, "pixel shuffle needs channels divisible by r^2");
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    let (xd, od) = (x.data(), out.data_mut());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let src_c = ch * r * r + i * r + j;
                    let src = &xd[((b * cr + src_c) * h) * w..((b * cr + src_c) * h + h) * w];
                    for y in 0..h {
                        let orow = (b * c + ch) * h * r + y * r + i;
                        for xx in 0..w {
                            od[orow * w * r + xx * r + j] = src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn pixel_shuffle_backward<T: Scalar>(dy: &Tensor<T>, r: usize) -> Tensor<T> {
    let (n, c, hr, wr) = dy.dims4();
    let (h, w) = (hr / r, wr / r);
    let cr = c * r * r;
    let mut dx = Tensor::zeros(&[n, cr, h, w]);
    let (dyd, dxd) = (dy.data(), dx.data_mut());
    for b in 0..n {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let dst_c = ch * r * r + i * r + j;
                    for y in 0..h {
                        let orow = (b * c + ch) * hr + y * r + i;
                        for xx in 0..w {
                            dxd[((b * cr + dst_c) * h + y) * w + xx] = dyd[orow * wr + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Square average pooling with zero padding counted in the divisor
/// (`count_include_pad = true`).
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let oh = (h + 2 * padding - kernel) / stride + 1;
    let ow = (w + 2 * padding - kernel) / stride + 1;
    let div = T::cast_f64((kernel * kernel) as f64);
    let mut out = vec![T::zero(); n * c * oh * ow];
    let xd = x.data();
    // Column sums via a running window per row band; kernel sizes here are
    // large (31), so use an integral image per plane.
    for_each_chunk_mut(&mut out, oh * ow, |pi, dst| {
        let src = &xd[pi * h * w..(pi + 1) * h * w];
        let mut integral = vec![T::zero(); (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = T::zero();
            for xx in 0..w {
                row += src[y * w + xx];
                integral[(y + 1) * (w + 1) + xx + 1] = integral[y * (w + 1) + xx + 1] + row;
            }
        }
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(padding).min(h);
            let y1 = (oy * stride + kernel).saturating_sub(padding).min(h);
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(padding).min(w);
                let x1 = (ox * stride + kernel).saturating_sub(padding).min(w);
                let s = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] - integral[y1 * (w + 1) + x0]
                    + integral[y0 * (w + 1) + x0];
                dst[oy * ow + ox] = s / div;
            }
        }
    });
    Tensor::from_vec(&[n, c, oh, ow], out).expect("pool shape")
}

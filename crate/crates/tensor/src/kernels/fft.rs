//! 2-D discrete Fourier transform over the two axes preceding the trailing
//! `[re, im]` axis of an interleaved complex tensor.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::parallel::for_each_chunk_mut;
use crate::{Scalar, Tensor};

/// Forward (`inverse = false`, kernel `e^{-2πi kn/N}`) or inverse transform,
/// both unnormalized, multiplied by `scale` afterwards.
pub fn fft2<T: Scalar>(z: &Tensor<T>, inverse: bool, scale: T) -> Tensor<T> {
    let shape = z.shape();
    let nd = shape.len();
    assert!(nd >= 3 && shape[nd - 1] == 2, "fft2 expects [..., H, W, 2], got {shape:?}");
    let (h, w) = (shape[nd - 3], shape[nd - 2]);
    let plane = h * w * 2;
    let mut planner = FftPlanner::<T>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    let mut out = z.data().to_vec();
    for_each_chunk_mut(&mut out, plane, |_, buf| {
        let mut cplx: Vec<Complex<T>> = buf.chunks_exact(2).map(|p| Complex::new(p[0], p[1])).collect();
        for row in cplx.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); h];
        for x in 0..w {
            for y in 0..h {
                col[y] = cplx[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                cplx[y * w + x] = col[y];
            }
        }
        for (dst, c) in buf.chunks_exact_mut(2).zip(cplx) {
            dst[0] = c.re * scale;
            dst[1] = c.im * scale;
        }
    });
    Tensor::from_vec(shape, out).expect("fft shape")
}

//! 2-D convolution kernels (im2col + GEMM, with a direct depthwise path).

use crate::parallel::{for_each_chunk_mut, map_range, ordered_sum};
use crate::scalar::{gemm, Layout};
use crate::{Scalar, Tensor};

/// Stride, zero padding, dilation and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Self { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl Conv2dOpts {
    pub fn padded(padding: usize) -> Self {
        Self { padding, ..Self::default() }
    }

    /// Output spatial length for an input length and kernel length.
    pub fn out_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        assert!(
            input + 2 * self.padding >= span,
            "conv kernel span {span} exceeds padded input {}",
            input + 2 * self.padding
        );
        (input + 2 * self.padding - span) / self.stride + 1
    }
}

struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    cig: usize,
    cog: usize,
    opts: Conv2dOpts,
}

impl Geometry {
    fn new(x_shape: &[usize], w_shape: &[usize], opts: Conv2dOpts) -> Self {
        assert_eq!(x_shape.len(), 4, "conv input must be NCHW");
        assert_eq!(w_shape.len(), 4, "conv weight must be OIHW");
        let (n, cin, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (cout, cig, kh, kw) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
        assert!(opts.groups >= 1 && opts.stride >= 1 && opts.dilation >= 1);
        assert_eq!(cin % opts.groups, 0, "input channels not divisible by groups");
        assert_eq!(cout % opts.groups, 0, "output channels not divisible by groups");
        assert_eq!(
            cig,
            cin / opts.groups,
            "weight expects {} input channels per group, input has {}",
            cig,
            cin / opts.groups
        );
        let ho = opts.out_len(h, kh);
        let wo = opts.out_len(w, kw);
        Self { n, cin, h, w, cout, kh, kw, ho, wo, cig, cog: cout / opts.groups, opts }
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    fn depthwise(&self) -> bool {
        self.cig == 1 && self.cog == 1 && self.opts.groups > 1
    }

    fn k(&self) -> usize {
        self.cig * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output range along one axis for a kernel tap at `offset`.
    fn valid(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
        // input index = o * stride + offset, must lie in [0, in_len)
        let lo = if offset >= 0 { 0 } else { ((-offset) as usize).div_ceil(stride) };
        let hi_excl = if (in_len as isize) - offset <= 0 {
            0
        } else {
            ((in_len as isize - offset - 1) as usize / stride + 1).min(out_len)
        };
        (lo.min(hi_excl), hi_excl)
    }

    fn tap_offset(&self, k: usize) -> isize {
        (k * self.opts.dilation) as isize - self.opts.padding as isize
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let p = g.p();
    let s = g.opts.stride;
    for ci in 0..g.cig {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let oy_off = g.tap_offset(ki);
            let (ylo, yhi) = Geometry::valid(g.ho, g.h, s, oy_off);
            for kj in 0..g.kw {
                let ox_off = g.tap_offset(kj);
                let (xlo, xhi) = Geometry::valid(g.wo, g.w, s, ox_off);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = (oy * s) as isize + oy_off;
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if xlo == xhi {
                        continue;
                    }
                    if s == 1 {
                        let ix0 = (xlo as isize + ox_off) as usize;
                        drow[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src_row[((ox * s) as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let p = g.p();
    let s = g.opts.stride;
    for ci in 0..g.cig {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let oy_off = g.tap_offset(ki);
            let (ylo, yhi) = Geometry::valid(g.ho, g.h, s, oy_off);
            for kj in 0..g.kw {
                let ox_off = g.tap_offset(kj);
                let (xlo, xhi) = Geometry::valid(g.wo, g.w, s, ox_off);
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[((ox * s) as isize + ox_off) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

/// Output shape of a convolution.
pub fn conv2d_out_shape(x_shape: &[usize], w_shape: &[usize], opts: Conv2dOpts) -> [usize; 4] {
    let g = Geometry::new(x_shape, w_shape, opts);
    [g.n, g.cout, g.ho, g.wo]
}

/// Multiply-accumulate count of a convolution (bias excluded).
pub fn conv2d_macs(x_shape: &[usize], w_shape: &[usize], opts: Conv2dOpts) -> u64 {
    let g = Geometry::new(x_shape, w_shape, opts);
    (g.n * g.cout * g.p() * g.k()) as u64
}

pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, opts: Conv2dOpts) -> Tensor<T> {
    let g = Geometry::new(x.shape(), w.shape(), opts);
    let (p, k) = (g.p(), g.k());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_item];
    let xd = x.data();
    let wd = w.data();
    for_each_chunk_mut(&mut out, out_item, |n, out_n| {
        let x_n = &xd[n * in_item..(n + 1) * in_item];
        if g.depthwise() {
            depthwise_forward(&g, x_n, wd, out_n);
        } else {
            let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
            for grp in 0..g.opts.groups {
                let x_g = &x_n[grp * g.cig * g.h * g.w..(grp + 1) * g.cig * g.h * g.w];
                let w_g = &wd[grp * g.cog * k..(grp + 1) * g.cog * k];
                let y_g = &mut out_n[grp * g.cog * p..(grp + 1) * g.cog * p];
                let rhs = if g.pointwise() {
                    x_g
                } else {
                    im2col(&g, x_g, &mut col);
                    &col[..]
                };
                gemm(g.cog, k, p, w_g, Layout::Normal, rhs, Layout::Normal, T::zero(), y_g);
            }
        }
        if let Some(b) = b {
            for (co, plane) in out_n.chunks_mut(p).enumerate() {
                let bv = b.data()[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out).expect("conv output shape")
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor<T>,
    x_shape: &[usize],
    w: &Tensor<T>,
    opts: Conv2dOpts,
) -> Tensor<T> {
    let g = Geometry::new(x_shape, w.shape(), opts);
    let (p, k) = (g.p(), g.k());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let mut dx = vec![T::zero(); g.n * in_item];
    let dyd = dy.data();
    let wd = w.data();
    for_each_chunk_mut(&mut dx, in_item, |n, dx_n| {
        let dy_n = &dyd[n * out_item..(n + 1) * out_item];
        if g.depthwise() {
            depthwise_backward_input(&g, dy_n, wd, dx_n);
            return;
        }
        let mut dcol = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for grp in 0..g.opts.groups {
            let w_g = &wd[grp * g.cog * k..(grp + 1) * g.cog * k];
            let dy_g = &dy_n[grp * g.cog * p..(grp + 1) * g.cog * p];
            let dx_g = &mut dx_n[grp * g.cig * g.h * g.w..(grp + 1) * g.cig * g.h * g.w];
            if g.pointwise() {
                gemm(k, g.cog, p, w_g, Layout::Transposed, dy_g, Layout::Normal, T::zero(), dx_g);
            } else {
                gemm(k, g.cog, p, w_g, Layout::Transposed, dy_g, Layout::Normal, T::zero(), &mut dcol);
                col2im(&g, &dcol, dx_g);
            }
        }
    });
    Tensor::from_vec(x_shape, dx).expect("conv dx shape")
}

/// Gradients with respect to weight and bias.
pub fn conv2d_backward_weight<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    w_shape: &[usize],
    opts: Conv2dOpts,
) -> (Tensor<T>, Tensor<T>) {
    let g = Geometry::new(x.shape(), w_shape, opts);
    let (p, k) = (g.p(), g.k());
    let in_item = g.cin * g.h * g.w;
    let out_item = g.cout * p;
    let wlen = g.cout * k;
    let xd = x.data();
    let dyd = dy.data();
    let parts = map_range(g.n, |n| {
        let x_n = &xd[n * in_item..(n + 1) * in_item];
        let dy_n = &dyd[n * out_item..(n + 1) * out_item];
        let mut dw = vec![T::zero(); wlen];
        if g.depthwise() {
            depthwise_backward_weight(&g, dy_n, x_n, &mut dw);
            return dw;
        }
        let mut col = if g.pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
        for grp in 0..g.opts.groups {
            let x_g = &x_n[grp * g.cig * g.h * g.w..(grp + 1) * g.cig * g.h * g.w];
            let dy_g = &dy_n[grp * g.cog * p..(grp + 1) * g.cog * p];
            let rhs = if g.pointwise() {
                x_g
            } else {
                im2col(&g, x_g, &mut col);
                &col[..]
            };
            let dw_g = &mut dw[grp * g.cog * k..(grp + 1) * g.cog * k];
            gemm(g.cog, p, k, dy_g, Layout::Normal, rhs, Layout::Transposed, T::zero(), dw_g);
        }
        dw
    });
    let dw = ordered_sum(parts);
    let mut db = vec![T::zero(); g.cout];
    for n in 0..g.n {
        for (co, acc) in db.iter_mut().enumerate() {
            let base = n * out_item + co * p;
            *acc += dyd[base..base + p].iter().copied().sum::<T>();
        }
    }
    (Tensor::from_vec(w_shape, dw).expect("conv dw shape"), Tensor::from_vec(&[g.cout], db).expect("conv db shape"))
}

fn depthwise_forward<T: Scalar>(g: &Geometry, x_n: &[T], w: &[T], out_n: &mut [T]) {
    let s = g.opts.stride;
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &x_n[c * hw..(c + 1) * hw];
        let out = &mut out_n[c * p..(c + 1) * p];
        for ki in 0..g.kh {
            let oy_off = g.tap_offset(ki);
            let (ylo, yhi) = Geometry::valid(g.ho, g.h, s, oy_off);
            for kj in 0..g.kw {
                let wv = w[c * kk + ki * g.kw + kj];
                let ox_off = g.tap_offset(kj);
                let (xlo, xhi) = Geometry::valid(g.wo, g.w, s, ox_off);
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox] += wv * src[((ox * s) as isize + ox_off) as usize];
                    }
                }
            }
        }
    }
}

fn depthwise_backward_input<T: Scalar>(g: &Geometry, dy_n: &[T], w: &[T], dx_n: &mut [T]) {
    let s = g.opts.stride;
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &mut dx_n[c * hw..(c + 1) * hw];
        let dy = &dy_n[c * p..(c + 1) * p];
        for ki in 0..g.kh {
            let oy_off = g.tap_offset(ki);
            let (ylo, yhi) = Geometry::valid(g.ho, g.h, s, oy_off);
            for kj in 0..g.kw {
                let wv = w[c * kk + ki * g.kw + kj];
                let ox_off = g.tap_offset(kj);
                let (xlo, xhi) = Geometry::valid(g.wo, g.w, s, ox_off);
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &dy[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        drow[((ox * s) as isize + ox_off) as usize] += wv * srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_backward_weight<T: Scalar>(g: &Geometry, dy_n: &[T], x_n: &[T], dw: &mut [T]) {
    let s = g.opts.stride;
    let (hw, p, kk) = (g.h * g.w, g.p(), g.kh * g.kw);
    for c in 0..g.cin {
        let plane = &x_n[c * hw..(c + 1) * hw];
        let dy = &dy_n[c * p..(c + 1) * p];
        for ki in 0..g.kh {
            let oy_off = g.tap_offset(ki);
            let (ylo, yhi) = Geometry::valid(g.ho, g.h, s, oy_off);
            for kj in 0..g.kw {
                let ox_off = g.tap_offset(kj);
                let (xlo, xhi) = Geometry::valid(g.wo, g.w, s, ox_off);
                let mut acc = T::zero();
                for oy in ylo..yhi {
                    let iy = ((oy * s) as isize + oy_off) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &dy[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        acc += drow[ox] * src[((ox * s) as isize + ox_off) as usize];
                    }
                }
                dw[c * kk + ki * g.kw + kj] += acc;
            }
        }
    }
}

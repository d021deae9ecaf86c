//! Differentiable operations on [`Var`].

use crate::autograd::Var;
use crate::counter::add_macs;
use crate::kernels::broadcast::{broadcast_binary, reduce_to_shape};
use crate::kernels::conv::{self, Conv2dOpts};
use crate::kernels::{fft, resize};
use crate::scalar::{gemm, Layout};
use crate::tensor::strides_of;
use crate::{Scalar, Tensor};

fn expand_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    broadcast_binary(&Tensor::zeros(shape), g, |_, b| b)
}

/// Copies `src` into a tensor of `out_shape`, reading element `idx` at
/// `sum(idx[i] * src_strides[i])`.
fn gather_strided<T: Scalar>(src: &[T], out_shape: &[usize], src_strides: &[usize]) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let nd = out_shape.len();
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(src[off]);
        for axis in (0..nd).rev() {
            idx[axis] += 1;
            off += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            off -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
    out
}

fn split_at_axis(shape: &[usize], dim: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..dim].iter().product();
    let inner: usize = shape[dim + 1..].iter().product();
    (outer, shape[dim], inner)
}

impl<T: Scalar> Var<T> {
    // ----- element-wise binary (broadcasting) -----

    pub fn add(&self, o: &Var<T>) -> Var<T> {
        let v = broadcast_binary(self.value(), o.value(), |a, b| a + b);
        Var::from_op(
            v,
            &[self, o],
            Box::new(|g, p, _| vec![Some(reduce_to_shape(g, p[0].shape())), Some(reduce_to_shape(g, p[1].shape()))]),
        )
    }

    pub fn sub(&self, o: &Var<T>) -> Var<T> {
        let v = broadcast_binary(self.value(), o.value(), |a, b| a - b);
        Var::from_op(
            v,
            &[self, o],
            Box::new(|g, p, _| {
                vec![Some(reduce_to_shape(g, p[0].shape())), Some(reduce_to_shape(&g.map(|x| -x), p[1].shape()))]
            }),
        )
    }

    pub fn mul(&self, o: &Var<T>) -> Var<T> {
        let v = broadcast_binary(self.value(), o.value(), |a, b| a * b);
        Var::from_op(
            v,
            &[self, o],
            Box::new(|g, p, _| {
                let ga = broadcast_binary(g, p[1], |g, b| g * b);
                let gb = broadcast_binary(g, p[0], |g, a| g * a);
                vec![Some(reduce_to_shape(&ga, p[0].shape())), Some(reduce_to_shape(&gb, p[1].shape()))]
            }),
        )
    }

    pub fn div(&self, o: &Var<T>) -> Var<T> {
        let v = broadcast_binary(self.value(), o.value(), |a, b| a / b);
        Var::from_op(
            v,
            &[self, o],
            Box::new(|g, p, y| {
                let ga = broadcast_binary(g, p[1], |g, b| g / b);
                // d(a/b)/db = -y / b
                let yb = broadcast_binary(y, p[1], |y, b| -y / b);
                let gb = yb.zip_map(g, |a, b| a * b);
                vec![Some(reduce_to_shape(&ga, p[0].shape())), Some(reduce_to_shape(&gb, p[1].shape()))]
            }),
        )
    }

    // ----- scalar / unary -----

    pub fn add_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x + c), &[self], Box::new(|g, _, _| vec![Some(g.clone())]))
    }

    pub fn mul_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| x * c), &[self], Box::new(move |g, _, _| vec![Some(g.map(|x| x * c))]))
    }

    /// `c - x`.
    pub fn rsub_scalar(&self, c: T) -> Var<T> {
        Var::from_op(self.value().map(|x| c - x), &[self], Box::new(|g, _, _| vec![Some(g.map(|x| -x))]))
    }

    pub fn neg(&self) -> Var<T> {
        self.mul_scalar(-T::one())
    }

    pub fn sigmoid(&self) -> Var<T> {
        Var::from_op(
            self.value().map(sigmoid),
            &[self],
            Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y * (T::one() - y)))]),
        )
    }

    pub fn relu(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x.max(T::zero())),
            &[self],
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| if x > T::zero() { g } else { T::zero() }))]),
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let half = T::cast_f64(0.5);
        let inv_sqrt2 = T::FRAC_1_SQRT_2();
        Var::from_op(
            self.value().map(|x| half * x * (T::one() + (x * inv_sqrt2).erf())),
            &[self],
            Box::new(move |g, p, _| {
                let inv_sqrt_2pi = T::cast_f64(0.398_942_280_401_432_7);
                vec![Some(g.zip_map(p[0], |g, x| {
                    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    g * (cdf + x * pdf)
                }))]
            }),
        )
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&self) -> Var<T> {
        Var::from_op(
            self.value().map(softplus),
            &[self],
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| g * sigmoid(x)))]),
        )
    }

    pub fn exp(&self) -> Var<T> {
        Var::from_op(self.value().map(|x| x.exp()), &[self], Box::new(|g, _, y| vec![Some(g.zip_map(y, |g, y| g * y))]))
    }

    pub fn ln(&self) -> Var<T> {
        Var::from_op(
            self.value().map(|x| x.ln()),
            &[self],
            Box::new(|g, p, _| vec![Some(g.zip_map(p[0], |g, x| g / x))]),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&self) -> Var<T> {
        Var::from_op(
            Tensor::scalar(self.value().sum()),
            &[self],
            Box::new(|g, p, _| vec![Some(Tensor::full(p[0].shape(), g.data()[0]))]),
        )
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = T::cast_f64(self.value().numel() as f64);
        self.sum_all().mul_scalar(T::one() / n)
    }

    /// Sums over `dims`, keeping them as size-1 axes.
    pub fn sum_dims(&self, dims: &[usize]) -> Var<T> {
        let mut shape = self.shape().to_vec();
        for &d in dims {
            shape[d] = 1;
        }
        let v = reduce_to_shape(self.value(), &shape);
        Var::from_op(v, &[self], Box::new(|g, p, _| vec![Some(expand_to(g, p[0].shape()))]))
    }

    pub fn mean_dims(&self, dims: &[usize]) -> Var<T> {
        let count: usize = dims.iter().map(|&d| self.shape()[d]).product();
        self.sum_dims(dims).mul_scalar(T::one() / T::cast_f64(count as f64))
    }

    /// Mean over the spatial axes of an NCHW tensor -> `[N, C, 1, 1]`.
    pub fn global_avg_pool(&self) -> Var<T> {
        self.mean_dims(&[2, 3])
    }

    // ----- shape -----

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.value().clone().reshape(shape);
        Var::from_op(v, &[self], Box::new(|g, p, _| vec![Some(g.clone().reshape(p[0].shape()))]))
    }

    pub fn permute(&self, perm: &[usize]) -> Var<T> {
        let shape = self.shape();
        assert_eq!(perm.len(), shape.len(), "permute rank");
        let src_strides = strides_of(shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let v = Tensor::from_vec(&out_shape, gather_strided(self.value().data(), &out_shape, &strides))
            .expect("permute shape");
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Var::from_op(
            v,
            &[self],
            Box::new(move |g, _, _| {
                let gs = g.shape();
                let gstr = strides_of(gs);
                let out_shape: Vec<usize> = inv.iter().map(|&p| gs[p]).collect();
                let strides: Vec<usize> = inv.iter().map(|&p| gstr[p]).collect();
                vec![Some(
                    Tensor::from_vec(&out_shape, gather_strided(g.data(), &out_shape, &strides)).expect("permute grad"),
                )]
            }),
        )
    }

    /// Slice `[start, start + len)` along `dim`.
    pub fn narrow(&self, dim: usize, start: usize, len: usize) -> Var<T> {
        let shape = self.shape().to_vec();
        assert!(start + len <= shape[dim], "narrow out of range");
        let (outer, d, inner) = split_at_axis(&shape, dim);
        let src = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[dim] = len;
        let v = Tensor::from_vec(&out_shape, out).expect("narrow shape");
        Var::from_op(
            v,
            &[self],
            Box::new(move |g, p, _| {
                let mut full = vec![T::zero(); p[0].numel()];
                let gd = g.data();
                for o in 0..outer {
                    let base = (o * d + start) * inner;
                    full[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_vec(p[0].shape(), full).expect("narrow grad"))]
            }),
        )
    }

    /// Concatenation along `dim`.
    pub fn cat(parts: &[&Var<T>], dim: usize) -> Var<T> {
        assert!(!parts.is_empty(), "cat of nothing");
        let first = parts[0].shape().to_vec();
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "cat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == dim || a == b, "cat shape mismatch {:?} vs {:?} on dim {dim}", s, first);
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[dim]).collect();
        let total: usize = sizes.iter().sum();
        let outer: usize = first[..dim].iter().product();
        let inner: usize = first[dim + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &sz) in parts.iter().zip(&sizes) {
                let d = p.value().data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut out_shape = first.clone();
        out_shape[dim] = total;
        let v = Tensor::from_vec(&out_shape, out).expect("cat shape");
        Var::from_op(
            v,
            parts,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut grads: Vec<Vec<T>> = sizes.iter().map(|&sz| Vec::with_capacity(outer * sz * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (buf, &sz) in grads.iter_mut().zip(&sizes) {
                        buf.extend_from_slice(&gd[off..off + sz * inner]);
                        off += sz * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(p)
                    .map(|(buf, pv)| Some(Tensor::from_vec(pv.shape(), buf).expect("cat grad")))
                    .collect()
            }),
        )
    }

    /// Splits along `dim` into `n` equal chunks.
    pub fn chunk(&self, n: usize, dim: usize) -> Vec<Var<T>> {
        let size = self.shape()[dim];
        assert_eq!(size % n, 0, "chunk: {size} not divisible by {n}");
        let step = size / n;
        (0..n).map(|i| self.narrow(dim, i * step, step)).collect()
    }

    // ----- spatial -----

    pub fn conv2d(&self, w: &Var<T>, b: Option<&Var<T>>, opts: Conv2dOpts) -> Var<T> {
        add_macs(conv::conv2d_macs(self.shape(), w.shape(), opts));
        let v = conv::conv2d_forward(self.value(), w.value(), b.map(|b| b.value()), opts);
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Var::from_op(
            v,
            &parents,
            Box::new(move |g, p, _| {
                let dx = conv::conv2d_backward_input(g, p[0].shape(), p[1], opts);
                let (dw, db) = conv::conv2d_backward_weight(g, p[0], p[1].shape(), opts);
                let mut out = vec![Some(dx), Some(dw)];
                if has_bias {
                    out.push(Some(db));
                }
                out
            }),
        )
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Var<T> {
        let (_, _, h, w) = self.dims4();
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let v = resize::resize_bilinear_forward(self.value(), oh, ow);
        Var::from_op(v, &[self], Box::new(move |g, _, _| vec![Some(resize::resize_bilinear_backward(g, h, w))]))
    }

    pub fn upsample2x(&self) -> Var<T> {
        let (_, _, h, w) = self.dims4();
        self.resize_bilinear(2 * h, 2 * w)
    }

    pub fn pixel_shuffle(&self, r: usize) -> Var<T> {
        let v = resize::pixel_shuffle_forward(self.value(), r);
        Var::from_op(v, &[self], Box::new(move |g, _, _| vec![Some(resize::pixel_shuffle_backward(g, r))]))
    }

    // ----- dense algebra -----

    /// Batched product over the two trailing axes; leading axes must match.
    pub fn matmul(&self, o: &Var<T>) -> Var<T> {
        let (a, b) = (self.shape(), o.shape());
        let nd = a.len();
        assert!(nd >= 2 && b.len() == nd, "matmul rank");
        assert_eq!(a[..nd - 2], b[..nd - 2], "matmul batch dims");
        let (m, k, n) = (a[nd - 2], a[nd - 1], b[nd - 1]);
        assert_eq!(b[nd - 2], k, "matmul inner dim");
        let batch: usize = a[..nd - 2].iter().product();
        add_macs((batch * m * k * n) as u64);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value().data(), o.value().data());
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..(i + 1) * m * k],
                Layout::Normal,
                &bd[i * k * n..(i + 1) * k * n],
                Layout::Normal,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut shape = a.to_vec();
        shape[nd - 1] = n;
        let v = Tensor::from_vec(&shape, out).expect("matmul shape");
        Var::from_op(
            v,
            &[self, o],
            Box::new(move |g, p, _| {
                let (ad, bd, gd) = (p[0].data(), p[1].data(), g.data());
                let mut da = vec![T::zero(); batch * m * k];
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    gemm(
                        m,
                        n,
                        k,
                        gi,
                        Layout::Normal,
                        &bd[i * k * n..(i + 1) * k * n],
                        Layout::Transposed,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    gemm(
                        k,
                        m,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        Layout::Transposed,
                        gi,
                        Layout::Normal,
                        T::zero(),
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), da).expect("matmul da")),
                    Some(Tensor::from_vec(p[1].shape(), db).expect("matmul db")),
                ]
            }),
        )
    }

    /// `x @ w^T + b` over the trailing axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Var<T>, b: Option<&Var<T>>) -> Var<T> {
        let shape = self.shape().to_vec();
        let fin = *shape.last().expect("linear on scalar");
        let (fout, wi) = (w.shape()[0], w.shape()[1]);
        assert_eq!(fin, wi, "linear input width");
        let rows = self.value().numel() / fin;
        add_macs((rows * fin * fout) as u64);
        let mut out = vec![T::zero(); rows * fout];
        gemm(
            rows,
            fin,
            fout,
            self.value().data(),
            Layout::Normal,
            w.value().data(),
            Layout::Transposed,
            T::zero(),
            &mut out,
        );
        if let Some(b) = b {
            let bd = b.value().data();
            for row in out.chunks_mut(fout) {
                for (o, &bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = fout;
        let v = Tensor::from_vec(&out_shape, out).expect("linear shape");
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_bias = b.is_some();
        Var::from_op(
            v,
            &parents,
            Box::new(move |g, p, _| {
                let gd = g.data();
                let mut dx = vec![T::zero(); rows * fin];
                gemm(rows, fout, fin, gd, Layout::Normal, p[1].data(), Layout::Normal, T::zero(), &mut dx);
                let mut dw = vec![T::zero(); fout * fin];
                gemm(fout, rows, fin, gd, Layout::Transposed, p[0].data(), Layout::Normal, T::zero(), &mut dw);
                let mut out = vec![
                    Some(Tensor::from_vec(p[0].shape(), dx).expect("linear dx")),
                    Some(Tensor::from_vec(p[1].shape(), dw).expect("linear dw")),
                ];
                if has_bias {
                    let mut db = vec![T::zero(); fout];
                    for row in gd.chunks(fout) {
                        for (d, &x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    out.push(Some(Tensor::from_vec(&[fout], db).expect("linear db")));
                }
                out
            }),
        )
    }

    // ----- normalization -----

    pub fn softmax(&self, dim: usize) -> Var<T> {
        let (outer, d, inner) = split_at_axis(self.shape(), dim);
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * d + j) * inner + i;
                let mut m = T::neg_infinity();
                for j in 0..d {
                    m = m.max(x[at(j)]);
                }
                let mut s = T::zero();
                for j in 0..d {
                    let e = (x[at(j)] - m).exp();
                    y[at(j)] = e;
                    s += e;
                }
                for j in 0..d {
                    y[at(j)] /= s;
                }
            }
        }
        let v = Tensor::from_vec(self.shape(), y).expect("softmax shape");
        Var::from_op(
            v,
            &[self],
            Box::new(move |g, _, y| {
                let (gd, yd) = (g.data(), y.data());
                let mut dx = vec![T::zero(); gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * d + j) * inner + i;
                        let dot: T = (0..d).map(|j| gd[at(j)] * yd[at(j)]).sum();
                        for j in 0..d {
                            dx[at(j)] = yd[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_vec(y.shape(), dx).expect("softmax grad"))]
            }),
        )
    }

    /// Layer normalization over the trailing axis with affine `w`, `b` of
    /// that width.
    pub fn layer_norm(&self, w: &Var<T>, b: &Var<T>, eps: T) -> Var<T> {
        let c = *self.shape().last().expect("layer_norm on scalar");
        let x = self.value().data();
        let (wd, bd) = (w.value().data(), b.value().data());
        let mut y = vec![T::zero(); x.len()];
        for (row, out) in x.chunks(c).zip(y.chunks_mut(c)) {
            let (mean, inv) = row_stats(row, eps);
            for j in 0..c {
                out[j] = (row[j] - mean) * inv * wd[j] + bd[j];
            }
        }
        let v = Tensor::from_vec(self.shape(), y).expect("layer_norm shape");
        Var::from_op(
            v,
            &[self, w, b],
            Box::new(move |g, p, _| {
                let (x, wd, gd) = (p[0].data(), p[1].data(), g.data());
                let ct = T::cast_f64(c as f64);
                let mut dx = vec![T::zero(); x.len()];
                let mut dw = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for ((row, grow), drow) in x.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                    let (mean, inv) = row_stats(row, eps);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let dxh = grow[j] * wd[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                        dw[j] += grow[j] * xh;
                        db[j] += grow[j];
                    }
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv;
                        let dxh = grow[j] * wd[j];
                        drow[j] = inv * (dxh - s1 / ct - xh * s2 / ct);
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), dx).expect("ln dx")),
                    Some(Tensor::from_vec(&[c], dw).expect("ln dw")),
                    Some(Tensor::from_vec(&[c], db).expect("ln db")),
                ]
            }),
        )
    }

    /// Batch normalization with batch statistics over N, H, W.
    ///
    /// Returns the output together with the per-channel batch mean and
    /// biased variance.
    pub fn batch_norm_train(&self, gamma: &Var<T>, beta: &Var<T>, eps: T) -> (Var<T>, Vec<T>, Vec<T>) {
        let (n, c, h, w) = self.dims4();
        let (mean, var) = channel_stats(self.value());
        let x = self.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let hw = h * w;
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let inv = T::one() / (var[ch] + eps).sqrt();
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    y[i] = (x[i] - mean[ch]) * inv * gd[ch] + bd[ch];
                }
            }
        }
        let v = Tensor::from_vec(self.shape(), y).expect("bn shape");
        let out = Var::from_op(
            v,
            &[self, gamma, beta],
            Box::new(move |g, p, _| {
                let (n, c, h, w) = p[0].dims4();
                let hw = h * w;
                let cnt = T::cast_f64((n * hw) as f64);
                let (mean, var) = channel_stats(p[0]);
                let (x, gam, gd) = (p[0].data(), p[1].data(), g.data());
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    let inv = T::one() / (var[ch] + eps).sqrt();
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let xh = (x[i] - mean[ch]) * inv;
                            sg += gd[i];
                            sgx += gd[i] * xh;
                        }
                    }
                    dgamma[ch] = sgx;
                    dbeta[ch] = sg;
                    let k = gam[ch] * inv;
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            let xh = (x[i] - mean[ch]) * inv;
                            dx[i] = k * (gd[i] - sg / cnt - xh * sgx / cnt);
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), dx).expect("bn dx")),
                    Some(Tensor::from_vec(&[c], dgamma).expect("bn dgamma")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("bn dbeta")),
                ]
            }),
        );
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics.
    pub fn batch_norm_eval(&self, gamma: &Var<T>, beta: &Var<T>, mean: &[T], var: &[T], eps: T) -> Var<T> {
        let (n, c, h, w) = self.dims4();
        let hw = h * w;
        let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let x = self.value().data();
        let (gd, bd) = (gamma.value().data(), beta.value().data());
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    y[i] = (x[i] - mean[ch]) * inv[ch] * gd[ch] + bd[ch];
                }
            }
        }
        let v = Tensor::from_vec(self.shape(), y).expect("bn eval shape");
        Var::from_op(
            v,
            &[self, gamma, beta],
            Box::new(move |g, p, _| {
                let (x, gam, gd) = (p[0].data(), p[1].data(), g.data());
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            dx[i] = gd[i] * gam[ch] * inv[ch];
                            dgamma[ch] += gd[i] * (x[i] - mean[ch]) * inv[ch];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                vec![
                    Some(Tensor::from_vec(p[0].shape(), dx).expect("bn dx")),
                    Some(Tensor::from_vec(&[c], dgamma).expect("bn dgamma")),
                    Some(Tensor::from_vec(&[c], dbeta).expect("bn dbeta")),
                ]
            }),
        )
    }

    // ----- complex / spectral -----
    //
    // Complex tensors carry a trailing axis of length 2 holding (re, im).

    /// Real tensor -> complex tensor with zero imaginary part.
    pub fn to_complex(&self) -> Var<T> {
        let mut shape = self.shape().to_vec();
        shape.push(2);
        let data: Vec<T> = self.value().data().iter().flat_map(|&x| [x, T::zero()]).collect();
        let v = Tensor::from_vec(&shape, data).expect("to_complex shape");
        Var::from_op(
            v,
            &[self],
            Box::new(|g, p, _| {
                let d: Vec<T> = g.data().chunks_exact(2).map(|c| c[0]).collect();
                vec![Some(Tensor::from_vec(p[0].shape(), d).expect("to_complex grad"))]
            }),
        )
    }

    pub fn real_part(&self) -> Var<T> {
        self.complex_component(0)
    }

    pub fn imag_part(&self) -> Var<T> {
        self.complex_component(1)
    }

    fn complex_component(&self, which: usize) -> Var<T> {
        let shape = self.shape();
        assert_eq!(*shape.last().unwrap(), 2, "expected complex tensor");
        let out_shape = &shape[..shape.len() - 1];
        let d: Vec<T> = self.value().data().chunks_exact(2).map(|c| c[which]).collect();
        let v = Tensor::from_vec(out_shape, d).expect("component shape");
        Var::from_op(
            v,
            &[self],
            Box::new(move |g, p, _| {
                let mut full = vec![T::zero(); p[0].numel()];
                for (i, &x) in g.data().iter().enumerate() {
                    full[2 * i + which] = x;
                }
                vec![Some(Tensor::from_vec(p[0].shape(), full).expect("component grad"))]
            }),
        )
    }

    /// Element-wise modulus `|z|`; the gradient at `z = 0` is taken as 0.
    pub fn complex_abs(&self) -> Var<T> {
        let shape = self.shape();
        assert_eq!(*shape.last().unwrap(), 2, "expected complex tensor");
        let out_shape = &shape[..shape.len() - 1];
        let d: Vec<T> = self.value().data().chunks_exact(2).map(|c| c[0].hypot(c[1])).collect();
        let v = Tensor::from_vec(out_shape, d).expect("abs shape");
        Var::from_op(
            v,
            &[self],
            Box::new(|g, p, y| {
                let mut full = vec![T::zero(); p[0].numel()];
                let z = p[0].data();
                for (i, (&gi, &r)) in g.data().iter().zip(y.data()).enumerate() {
                    if r > T::zero() {
                        full[2 * i] = gi * z[2 * i] / r;
                        full[2 * i + 1] = gi * z[2 * i + 1] / r;
                    }
                }
                vec![Some(Tensor::from_vec(p[0].shape(), full).expect("abs grad"))]
            }),
        )
    }

    /// Unnormalized forward 2-D DFT over the two axes before the complex axis.
    pub fn fft2(&self) -> Var<T> {
        self.dft2(false, T::one())
    }

    /// Inverse 2-D DFT normalized by `1 / (H W)`.
    pub fn ifft2(&self) -> Var<T> {
        let s = self.shape();
        let nd = s.len();
        let scale = T::one() / T::cast_f64((s[nd - 3] * s[nd - 2]) as f64);
        self.dft2(true, scale)
    }

    fn dft2(&self, inverse: bool, scale: T) -> Var<T> {
        let v = fft::fft2(self.value(), inverse, scale);
        // adjoint of (scale * F) is scale * F^H, and F^H is the opposite-sign
        // unnormalized transform
        Var::from_op(v, &[self], Box::new(move |g, _, _| vec![Some(fft::fft2(g, !inverse, scale))]))
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn row_stats<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let c = T::cast_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / c;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / c;
    (mean, T::one() / (var + eps).sqrt())
}

/// Per-channel mean and biased variance of an NCHW tensor.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let cnt = T::cast_f64((n * hw) as f64);
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            s += d[base..base + hw].iter().copied().sum::<T>();
        }
        let m = s / cnt;
        let mut v = T::zero();
        for b in 0..n {
            let base = (b * c + ch) * hw;
            v += d[base..base + hw].iter().map(|&x| (x - m) * (x - m)).sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / cnt;
    }
    (mean, var)
}

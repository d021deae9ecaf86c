//! Numpy-style broadcasting for element-wise binary ops.

use crate::tensor::strides_of;
use crate::{Scalar, Tensor};

/// Broadcast result shape, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (0 along broadcast axes).
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let own = strides_of(shape);
    (0..nd)
        .map(|i| {
            if i + shape.len() < nd {
                0
            } else {
                let j = i + shape.len() - nd;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Visits every index of `out` in row-major order, passing the flat offsets
/// into each of the viewed operands.
fn walk<const K: usize>(out: &[usize], strides: [&[usize]; K], mut f: impl FnMut(usize, [usize; K])) {
    let nd = out.len();
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    if nd == 0 {
        f(0, [0; K]);
        return;
    }
    let inner = out[nd - 1];
    let inner_strides: [usize; K] = std::array::from_fn(|k| strides[k][nd - 1]);
    let mut idx = vec![0usize; nd];
    let mut base = [0usize; K];
    let mut flat = 0;
    loop {
        for i in 0..inner {
            let offs: [usize; K] = std::array::from_fn(|k| base[k] + i * inner_strides[k]);
            f(flat + i, offs);
        }
        flat += inner;
        // advance outer index
        let mut axis = nd - 1;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for k in 0..K {
                base[k] += strides[k][axis];
            }
            if idx[axis] < out[axis] {
                break;
            }
            for k in 0..K {
                base[k] -= strides[k][axis] * out[axis];
            }
            idx[axis] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| panic!("cannot broadcast {:?} with {:?}", a.shape(), b.shape()));
    let (ad, bd) = (a.data(), b.data());
    if b.numel() == 1 && out_shape == a.shape() {
        let s = bd[0];
        return a.map(|x| f(x, s));
    }
    let sa = view_strides(a.shape(), &out_shape);
    let sb = view_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    walk(&out_shape, [&sa, &sb], |o, [ia, ib]| out[o] = f(ad[ia], bd[ib]));
    Tensor::from_vec(&out_shape, out).expect("broadcast shape")
}

/// Sums `g` over broadcast axes so that it takes `shape`.
pub fn reduce_to_shape<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let out_shape = g.shape().to_vec();
    let st = view_strides(shape, &out_shape);
    let ident = strides_of(&out_shape);
    let mut acc = vec![T::zero(); shape.iter().product()];
    let gd = g.data();
    walk(&out_shape, [&st, &ident], |_, [it, ig]| acc[it] += gd[ig]);
    Tensor::from_vec(shape, acc).expect("reduce shape")
}

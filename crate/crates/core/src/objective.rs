//! Deep-supervision loss: boundary-weighted BCE plus weighted IoU on every
//! prediction level.

use drrnet_tensor::{Scalar, Tensor, Var};

use crate::decoder::PredictionSet;
use crate::error::{DrrnetError, Result};

pub const BOUNDARY_KERNEL: usize = 31;
pub const BOUNDARY_SCALE: f64 = 5.0;

/// Mean over the `k x k` window centred on each pixel, clipped to the image
/// so that border windows average only the pixels they cover.
fn box_mean<T: Scalar>(x: &Tensor<T>, k: usize) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let r = k / 2;
    let mut out = Tensor::zeros(x.shape());
    let mut sat = vec![0.0f64; (h + 1) * (w + 1)];
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let mut row = 0.0;
            for xx in 0..w {
                row += src[y * w + xx].as_f64();
                sat[(y + 1) * (w + 1) + xx + 1] = sat[y * (w + 1) + xx + 1] + row;
            }
        }
        let dst = &mut out.data_mut()[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
                let sum =
                    sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0] + sat[y0 * (w + 1) + x0];
                dst[y * w + xx] = T::cast_f64(sum / ((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

/// `w = 5 |mean_k(G) - G|` over a `k x k` window clipped at the borders.
pub fn boundary_weight_with<T: Scalar>(gt: &Tensor<T>, kernel: usize) -> Tensor<T> {
    let pooled = box_mean(gt, kernel);
    let s = T::cast_f64(BOUNDARY_SCALE);
    pooled.zip_map(gt, |p, g| s * (p - g).abs())
}

pub fn boundary_weight<T: Scalar>(gt: &Tensor<T>) -> Tensor<T> {
    boundary_weight_with(gt, BOUNDARY_KERNEL)
}

fn check<T: Scalar>(logits: &Var<T>, gt: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    if logits.shape() != gt.shape() || gt.shape() != w.shape() || gt.ndim() != 4 {
        return Err(DrrnetError::ShapeMismatch(format!(
            "logits {:?}, mask {:?}, weights {:?}",
            logits.shape(),
            gt.shape(),
            w.shape()
        )));
    }
    if !logits.value().all_finite() {
        return Err(DrrnetError::NanInput("logits"));
    }
    if !gt.all_finite() || !w.all_finite() {
        return Err(DrrnetError::NanInput("mask"));
    }
    Ok(())
}

/// Per image `sum((1+w) bce) / sum(1+w)`, averaged over the batch. BCE is
/// taken from logits as `softplus(x) - x g`.
pub fn weighted_bce<T: Scalar>(logits: &Var<T>, gt: &Tensor<T>, w: &Tensor<T>) -> Result<Var<T>> {
    check(logits, gt, w)?;
    let g = Var::constant(gt.clone());
    let weight = Var::constant(w.map(|v| v + T::one()));
    let bce = logits.softplus().sub(&logits.mul(&g));
    let num = bce.mul(&weight).sum_dims(&[1, 2, 3]);
    let den = weight.sum_dims(&[1, 2, 3]);
    Ok(num.div(&den).mean_all())
}

/// Per image `1 - sum((1+w) g p) / sum((1+w)(g + p - g p))` with
/// `p = sigmoid(logits)`, averaged over the batch. An image whose
/// denominator is zero contributes 0.
pub fn weighted_iou<T: Scalar>(logits: &Var<T>, gt: &Tensor<T>, w: &Tensor<T>) -> Result<Var<T>> {
    check(logits, gt, w)?;
    let g = Var::constant(gt.clone());
    let weight = Var::constant(w.map(|v| v + T::one()));
    let p = logits.sigmoid();
    let inter = g.mul(&p);
    let union = g.add(&p).sub(&inter);
    let num = inter.mul(&weight).sum_dims(&[1, 2, 3]);
    let den = union.mul(&weight).sum_dims(&[1, 2, 3]);
    // zero denominators: replace by 1 and force the term to 0
    let empty = den.value().map(|d| if d == T::zero() { T::one() } else { T::zero() });
    let live = empty.map(|e| T::one() - e);
    let ratio = num.div(&den.add(&Var::constant(empty))).rsub_scalar(T::one());
    Ok(ratio.mul(&Var::constant(live)).mean_all())
}

/// Sum over the five levels of weighted BCE and weighted IoU, each level
/// bilinearly resized to the mask resolution.
pub fn total_loss<T: Scalar>(predictions: &PredictionSet<T>, gt: &Tensor<T>) -> Result<Var<T>> {
    let (_, _, h, w) = gt.dims4();
    let weights = boundary_weight(gt);
    let mut total: Option<Var<T>> = None;
    for o in &predictions.logits {
        let (_, _, oh, ow) = o.dims4();
        let up = if (oh, ow) == (h, w) { o.clone() } else { o.resize_bilinear(h, w) };
        let term = weighted_bce(&up, gt, &weights)?.add(&weighted_iou(&up, gt, &weights)?);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term),
        });
    }
    total.ok_or_else(|| DrrnetError::ShapeMismatch("empty prediction set".into()))
}

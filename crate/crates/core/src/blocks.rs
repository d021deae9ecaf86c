//! Small pieces shared by several modules.

use drrnet_tensor::nn::{Conv2d, ConvSpec, ParamBuilder};
use drrnet_tensor::{Scalar, Var};

use crate::error::{DrrnetError, Result};
use crate::model::Merge;

/// Doubles the resolution of a C-channel map. Pixel shuffle followed by a
/// 1x1 conv back to C channels when C is divisible by 4, otherwise bilinear
/// upsampling followed by a 1x1 conv.
#[derive(Clone, Debug)]
pub struct Upsampler<T> {
    pub shuffle: bool,
    pub proj: Conv2d<T>,
}

impl<T: Scalar> Upsampler<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        let shuffle = c.is_multiple_of(4);
        let cin = if shuffle { c / 4 } else { c };
        Self { shuffle, proj: Conv2d::new(&mut b.pp("proj"), ConvSpec::same(cin, c, 1)) }
    }

    pub fn forward(&self, x: &Var<T>) -> Var<T> {
        let up = if self.shuffle { x.pixel_shuffle(2) } else { x.upsample2x() };
        self.proj.forward(&up)
    }

    /// MACs for an input of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.proj.complexity(2 * h, 2 * w).2
    }
}

/// Spatial size of a 4-d var.
pub fn hw<T: Scalar>(x: &Var<T>) -> (usize, usize) {
    let (_, _, h, w) = x.dims4();
    (h, w)
}

/// Builds the input of a top-down level block from `x_i` and the deeper
/// output of the same block.
///
/// `Cat` concatenates `x_i` with the upsampled deeper output; `Add` projects
/// `x_i` to `C` channels and adds. The deepest level takes `x_4` as is.
#[derive(Clone, Debug)]
pub struct LevelInput<T> {
    pub merge: Merge,
    pub up: Option<Upsampler<T>>,
    pub adjust: Option<Conv2d<T>>,
    /// Channels of the merged tensor.
    pub channels: usize,
}

impl<T: Scalar> LevelInput<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, merge: Merge, deepest: bool, c_in: usize, width: usize) -> Self {
        if deepest {
            return Self { merge, up: None, adjust: None, channels: c_in };
        }
        let up = Some(Upsampler::new(&mut b.pp("up"), width));
        match merge {
            Merge::Cat => Self { merge, up, adjust: None, channels: c_in + width },
            Merge::Add => Self {
                merge,
                up,
                adjust: Some(Conv2d::new(&mut b.pp("adjust"), ConvSpec::same(c_in, width, 1))),
                channels: width,
            },
        }
    }

    pub fn forward(&self, x: &Var<T>, above: Option<&Var<T>>) -> Result<Var<T>> {
        let (h, w) = hw(x);
        match (&self.up, above) {
            (None, None) => Ok(x.clone()),
            (Some(up), Some(a)) => {
                let (ah, aw) = hw(a);
                if 2 * ah != h || 2 * aw != w || x.shape()[0] != a.shape()[0] {
                    return Err(DrrnetError::ResolutionMismatch(format!(
                        "deeper feature {ah}x{aw} is not half of {h}x{w}"
                    )));
                }
                let a = up.forward(a);
                Ok(match &self.adjust {
                    None => Var::cat(&[x, &a], 1),
                    Some(adj) => adj.forward(x).add(&a),
                })
            }
            (None, Some(_)) => Err(DrrnetError::ResolutionMismatch("deepest level takes no deeper feature".into())),
            (Some(_), None) => Err(DrrnetError::ResolutionMismatch("missing deeper feature".into())),
        }
    }

    /// MACs for an `x_i` of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let up = self.up.as_ref().map_or(0, |u| u.macs(h / 2, w / 2));
        let adj = self.adjust.as_ref().map_or(0, |a| a.complexity(h, w).2);
        up + adj
    }
}

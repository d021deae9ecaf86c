//! Local detail branch: dilated pyramid and depthwise-separable paths fused
//! through channel attention, plus a residual conv branch.

use drrnet_tensor::nn::{Cbr, Conv2d, ConvSpec, Ctx, DwSeparable, ParamBuilder, SqueezeExcite};
use drrnet_tensor::{Scalar, Var};

use crate::blocks::LevelInput;
use crate::error::Result;
use crate::model::Merge;

pub const DILATIONS: [usize; 4] = [1, 3, 5, 7];
pub const DW_KERNELS: [usize; 3] = [3, 5, 7];

#[derive(Clone, Debug)]
pub struct MdmBlock<T> {
    pub input: LevelInput<T>,
    pub adjust1: Conv2d<T>,
    pub adjust3: Conv2d<T>,
    pub aspp: [Conv2d<T>; 4],
    pub aspp_reduce: Conv2d<T>,
    pub dw: [DwSeparable<T>; 3],
    pub dw_reduce: Conv2d<T>,
    pub se: SqueezeExcite<T>,
    pub res: Conv2d<T>,
    pub fuse: Cbr<T>,
}

impl<T: Scalar> MdmBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, merge: Merge, deepest: bool, c_in: usize, width: usize) -> Self {
        let input = LevelInput::new(&mut b.pp("input"), merge, deepest, c_in, width);
        let c = width;
        Self {
            adjust1: Conv2d::new(&mut b.pp("adjust1"), ConvSpec::same(input.channels, c, 1)),
            adjust3: Conv2d::new(&mut b.pp("adjust3"), ConvSpec::same(c, c, 3)),
            aspp: std::array::from_fn(|k| {
                Conv2d::new(&mut b.pp("aspp").pp(k), ConvSpec::same(c, c, 3).dilation(DILATIONS[k]))
            }),
            aspp_reduce: Conv2d::new(&mut b.pp("aspp_reduce"), ConvSpec::same(4 * c, c, 1)),
            dw: std::array::from_fn(|k| DwSeparable::new(&mut b.pp("dw").pp(k), c, c, DW_KERNELS[k])),
            dw_reduce: Conv2d::new(&mut b.pp("dw_reduce"), ConvSpec::same(3 * c, c, 1)),
            se: SqueezeExcite::new(&mut b.pp("se"), 2 * c),
            res: Conv2d::new(&mut b.pp("res"), ConvSpec::same(c, c, 3)),
            fuse: Cbr::new(&mut b.pp("fuse"), ConvSpec::same(3 * c, c, 3)),
            input,
        }
    }

    pub fn aspp_branch(&self, x1: &Var<T>) -> Var<T> {
        let outs: Vec<Var<T>> = self.aspp.iter().map(|c| c.forward(x1)).collect();
        let refs: Vec<&Var<T>> = outs.iter().collect();
        self.aspp_reduce.forward(&Var::cat(&refs, 1))
    }

    pub fn dw_branch(&self, x1: &Var<T>) -> Var<T> {
        let outs: Vec<Var<T>> = self.dw.iter().map(|c| c.forward(x1)).collect();
        let refs: Vec<&Var<T>> = outs.iter().collect();
        self.dw_reduce.forward(&Var::cat(&refs, 1))
    }

    pub fn forward(&self, x: &Var<T>, above: Option<&Var<T>>, ctx: Ctx) -> Result<Var<T>> {
        let input = self.input.forward(x, above)?;
        let x0 = self.adjust1.forward(&input);
        let x1 = self.adjust3.forward(&x0);
        let local = self.se.forward(&Var::cat(&[&self.aspp_branch(&x1), &self.dw_branch(&x1)], 1));
        let res = self.res.forward(&x0);
        Ok(self.fuse.forward(&Var::cat(&[&local, &res], 1), ctx).add(&x0))
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let conv = |c: &Conv2d<T>| c.complexity(h, w).2;
        let mut m = self.input.macs(h, w) + conv(&self.adjust1) + conv(&self.adjust3);
        m += self.aspp.iter().map(conv).sum::<u64>() + conv(&self.aspp_reduce);
        m += self.dw.iter().map(|d| d.complexity(h, w).2).sum::<u64>() + conv(&self.dw_reduce);
        m + self.se.complexity() + conv(&self.res) + self.fuse.complexity(h, w).2
    }
}

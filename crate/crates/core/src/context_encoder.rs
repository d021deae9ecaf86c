//! Global context branch: three resolution sub-branches fused by per-pixel
//! scale attention, channel attention and a residual projection.

use drrnet_tensor::nn::{Cbr, Conv2d, ConvSpec, Ctx, ParamBuilder, SqueezeExcite};
use drrnet_tensor::{Scalar, Var};

use crate::blocks::{hw, LevelInput};
use crate::error::Result;
use crate::model::Merge;

#[derive(Clone, Debug)]
pub struct OcmBlock<T> {
    pub input: LevelInput<T>,
    /// 3x3 stride-2 conv, coarse scale.
    pub large: Conv2d<T>,
    /// 1x1 conv at native resolution.
    pub medium: Conv2d<T>,
    /// 3x3 conv on the 2x upsampled input.
    pub small: Conv2d<T>,
    pub enhance: [Cbr<T>; 3],
    pub attn_hidden: Cbr<T>,
    pub attn_logits: Conv2d<T>,
    pub se: SqueezeExcite<T>,
    pub residual: Conv2d<T>,
}

/// Intermediates of one block evaluation.
#[derive(Clone, Debug)]
pub struct OcmTrace<T: Scalar> {
    /// Merged block input.
    pub input: Var<T>,
    /// Enhanced branch features (large, medium, small) at `x_i` resolution.
    pub branches: [Var<T>; 3],
    /// `B x 3 x h x w`, softmax over the scale axis.
    pub weights: Var<T>,
    /// Attention-weighted sum before channel attention.
    pub fused: Var<T>,
    pub residual: Var<T>,
    pub output: Var<T>,
}

impl<T: Scalar> OcmBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, merge: Merge, deepest: bool, c_in: usize, width: usize) -> Self {
        let input = LevelInput::new(&mut b.pp("input"), merge, deepest, c_in, width);
        let cin = input.channels;
        let c = width;
        Self {
            large: Conv2d::new(&mut b.pp("large"), ConvSpec::same(cin, c, 3).stride(2)),
            medium: Conv2d::new(&mut b.pp("medium"), ConvSpec::same(cin, c, 1)),
            small: Conv2d::new(&mut b.pp("small"), ConvSpec::same(cin, c, 3)),
            enhance: std::array::from_fn(|k| Cbr::new(&mut b.pp("enhance").pp(k), ConvSpec::same(c, c, 3))),
            attn_hidden: Cbr::new(&mut b.pp("attn_hidden"), ConvSpec::same(3 * c, c, 3)),
            attn_logits: Conv2d::new(&mut b.pp("attn_logits"), ConvSpec::same(c, 3, 1)),
            se: SqueezeExcite::new(&mut b.pp("se"), c),
            residual: Conv2d::new(&mut b.pp("residual"), ConvSpec::same(cin, c, 1)),
            input,
        }
    }

    pub fn forward(&self, x: &Var<T>, above: Option<&Var<T>>, ctx: Ctx) -> Result<Var<T>> {
        Ok(self.trace(x, above, ctx)?.output)
    }

    pub fn trace(&self, x: &Var<T>, above: Option<&Var<T>>, ctx: Ctx) -> Result<OcmTrace<T>> {
        let input = self.input.forward(x, above)?;
        let (h, w) = hw(&input);
        let large = self.large.forward(&input).resize_bilinear(h, w);
        let medium = self.medium.forward(&input);
        let small = self.small.forward(&input.upsample2x()).resize_bilinear(h, w);
        let branches =
            [large, medium, small].iter().zip(&self.enhance).map(|(f, e)| e.forward(f, ctx)).collect::<Vec<_>>();
        let branches: [Var<T>; 3] = branches.try_into().expect("three branches");
        let weights = self.attention_weights(&branches, ctx);
        let mut fused = branches[0].mul(&weights.narrow(1, 0, 1));
        for k in 1..3 {
            fused = fused.add(&branches[k].mul(&weights.narrow(1, k, 1)));
        }
        let residual = self.residual.forward(&input);
        let output = self.se.forward(&fused).add(&residual);
        Ok(OcmTrace { input, branches, weights, fused, residual, output })
    }

    /// Per-pixel convex weights over the three scales.
    pub fn attention_weights(&self, branches: &[Var<T>; 3], ctx: Ctx) -> Var<T> {
        let cat = Var::cat(&[&branches[0], &branches[1], &branches[2]], 1);
        self.attn_logits.forward(&self.attn_hidden.forward(&cat, ctx)).softmax(1)
    }

    /// MACs for an `x_i` of `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut m = self.input.macs(h, w);
        m += self.large.complexity(h, w).2;
        m += self.medium.complexity(h, w).2;
        m += self.small.complexity(2 * h, 2 * w).2;
        m += 3 * self.enhance[0].complexity(h, w).2;
        m += self.attn_hidden.complexity(h, w).2 + self.attn_logits.complexity(h, w).2;
        m += self.se.complexity() + self.residual.complexity(h, w).2;
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drrnet_tensor::nn::ParamStore;
    use drrnet_tensor::{count_macs, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block<T: Scalar>(deepest: bool, c_in: usize, c: usize) -> (OcmBlock<T>, ParamStore<T>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blk = OcmBlock::new(&mut ParamBuilder::new(&mut store, &mut rng).pp("ocm"), Merge::Cat, deepest, c_in, c);
        (blk, store)
    }

    fn rand<T: Scalar>(shape: &[usize], seed: u64) -> Var<T> {
        Var::constant(Tensor::rand_uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[test]
    fn deepest_level_shape() {
        let (blk, _) = block::<f32>(true, 128, 32);
        let g = blk.forward(&rand(&[2, 128, 12, 12], 1), None, Ctx::eval()).unwrap();
        assert_eq!(g.shape(), &[2, 32, 12, 12]);
    }

    #[test]
    fn upper_level_takes_deeper_output() {
        let (blk, _) = block::<f32>(false, 64, 32);
        let g = blk.forward(&rand(&[1, 64, 24, 24], 1), Some(&rand(&[1, 32, 12, 12], 2)), Ctx::eval()).unwrap();
        assert_eq!(g.shape(), &[1, 32, 24, 24]);
        let err = blk.forward(&rand(&[1, 64, 24, 24], 1), Some(&rand(&[1, 32, 6, 6], 2)), Ctx::eval());
        assert!(matches!(err, Err(crate::DrrnetError::ResolutionMismatch(_))));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let (blk, _) = block::<f64>(true, 16, 8);
        let t = blk.trace(&rand(&[2, 16, 6, 6], 4), None, Ctx::eval()).unwrap();
        let w = t.weights.value();
        let (n, k, h, wd) = w.dims4();
        assert_eq!(k, 3);
        for b in 0..n {
            for y in 0..h {
                for x in 0..wd {
                    let s: f64 = (0..3).map(|c| w.at(&[b, c, y, x])).sum();
                    assert!((s - 1.0).abs() < 1e-10);
                    assert!((0..3).all(|c| w.at(&[b, c, y, x]) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn one_hot_attention_selects_large_branch() {
        let (blk, _) = block::<f64>(true, 16, 8);
        blk.attn_logits.weight.set(Tensor::zeros(&[3, 8, 1, 1]));
        blk.attn_logits.bias.as_ref().unwrap().set(Tensor::from_vec(&[3], vec![1000.0, 0.0, 0.0]).unwrap());
        // saturate the channel gate to exactly 1
        blk.se.fc2.weight.update(|w| w.data_mut().fill(0.0));
        blk.se.fc2.bias.as_ref().unwrap().update(|b| b.data_mut().fill(40.0));
        let t = blk.trace(&rand(&[1, 16, 6, 6], 5), None, Ctx::eval()).unwrap();
        let expect = t.branches[0].add(&t.residual);
        assert_eq!(t.output.value(), expect.value());
    }

    #[test]
    fn equal_branches_scale_by_weight_sum() {
        let (blk, _) = block::<f64>(true, 8, 8);
        let t = blk.trace(&rand(&[1, 8, 4, 4], 6), None, Ctx::eval()).unwrap();
        let same = [t.branches[1].clone(), t.branches[1].clone(), t.branches[1].clone()];
        let w = blk.attention_weights(&same, Ctx::eval());
        let mut fused = same[0].mul(&w.narrow(1, 0, 1));
        for k in 1..3 {
            fused = fused.add(&same[k].mul(&w.narrow(1, k, 1)));
        }
        assert!(fused.value().max_abs_diff(same[0].value()) < 1e-12);
    }

    #[test]
    fn closed_form_macs() {
        let (blk, _) = block::<f32>(false, 16, 8);
        let (_, counted) =
            count_macs(|| blk.forward(&rand(&[1, 16, 8, 8], 1), Some(&rand(&[1, 8, 4, 4], 2)), Ctx::eval()).unwrap());
        assert_eq!(blk.macs(8, 8), counted);
    }
}

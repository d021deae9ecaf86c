//! Coarse prediction from the deepest level and the reverse-refinement
//! cascade producing O4 .. O0.

use drrnet_tensor::nn::{BatchNorm2d, Conv2d, ConvSpec, Ctx, DwSeparable, ParamBuilder, SqueezeExcite};
use drrnet_tensor::{Scalar, Var};

use crate::blocks::{hw, Upsampler};
use crate::error::{DrrnetError, Result};

pub const MSA_KERNELS: [usize; 3] = [3, 5, 7];

/// Multi-scale attention head producing the coarse logits O4.
#[derive(Clone, Debug)]
pub struct GrdBlock<T> {
    pub p0: Conv2d<T>,
    pub p1: Conv2d<T>,
    pub dw2: [DwSeparable<T>; 3],
    pub se2: [SqueezeExcite<T>; 3],
    pub proj2: Conv2d<T>,
    pub dw3: [DwSeparable<T>; 3],
    pub proj3: Conv2d<T>,
    pub merge: Conv2d<T>,
    pub head: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct GrdTrace<T: Scalar> {
    pub p: [Var<T>; 4],
    pub output: Var<T>,
}

impl<T: Scalar> GrdBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c4: usize, c: usize) -> Self {
        Self {
            p0: Conv2d::new(&mut b.pp("p0"), ConvSpec::same(c4 + c, c, 1)),
            p1: Conv2d::new(&mut b.pp("p1"), ConvSpec::same(c, c, 3)),
            dw2: std::array::from_fn(|k| DwSeparable::new(&mut b.pp("dw2").pp(k), c, c, MSA_KERNELS[k])),
            se2: std::array::from_fn(|k| SqueezeExcite::new(&mut b.pp("se2").pp(k), c)),
            proj2: Conv2d::new(&mut b.pp("proj2"), ConvSpec::same(3 * c, c, 1)),
            dw3: std::array::from_fn(|k| DwSeparable::new(&mut b.pp("dw3").pp(k), c, c, MSA_KERNELS[k])),
            proj3: Conv2d::new(&mut b.pp("proj3"), ConvSpec::same(3 * c, c, 1)),
            merge: Conv2d::new(&mut b.pp("merge"), ConvSpec::same(2 * c, c, 1)),
            head: Conv2d::new(&mut b.pp("head"), ConvSpec::same(c, 1, 3)),
        }
    }

    pub fn trace(&self, x4: &Var<T>, f4: &Var<T>) -> Result<GrdTrace<T>> {
        if hw(x4) != hw(f4) {
            return Err(DrrnetError::ResolutionMismatch(format!("x4 is {:?} but f4 is {:?}", hw(x4), hw(f4))));
        }
        let p0 = self.p0.forward(&Var::cat(&[x4, f4], 1));
        let p1 = self.p1.forward(&p0);
        let s2: Vec<Var<T>> = self.dw2.iter().zip(&self.se2).map(|(d, s)| s.forward(&d.forward(&p1))).collect();
        let p2 = self.proj2.forward(&Var::cat(&[&s2[0], &s2[1], &s2[2]], 1));
        let s3: Vec<Var<T>> = self
            .dw3
            .iter()
            .map(|d| {
                let y = d.forward(&p2);
                y.gelu().mul(&y)
            })
            .collect();
        let p3 = self.proj3.forward(&Var::cat(&[&s3[0], &s3[1], &s3[2]], 1));
        let output = self.head.forward(&self.merge.forward(&Var::cat(&[&p0, &p3], 1)).add(&p1));
        Ok(GrdTrace { p: [p0, p1, p2, p3], output })
    }

    pub fn forward(&self, x4: &Var<T>, f4: &Var<T>) -> Result<Var<T>> {
        Ok(self.trace(x4, f4)?.output)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let conv = |c: &Conv2d<T>| c.complexity(h, w).2;
        let dw = |d: &[DwSeparable<T>; 3]| d.iter().map(|d| d.complexity(h, w).2).sum::<u64>();
        let se: u64 = self.se2.iter().map(|s| s.complexity()).sum();
        conv(&self.p0)
            + conv(&self.p1)
            + dw(&self.dw2)
            + se
            + conv(&self.proj2)
            + dw(&self.dw3)
            + conv(&self.proj3)
            + conv(&self.merge)
            + conv(&self.head)
    }
}

/// One refinement stage, steered by the inverted sigmoid of two coarser
/// predictions.
#[derive(Clone, Debug)]
pub struct DrrmBlock<T> {
    pub fuse: Conv2d<T>,
    pub spatial: DwSeparable<T>,
    pub spatial_bn: BatchNorm2d<T>,
    /// Per-bin modulation from the real part of the spectrum.
    pub freq: Conv2d<T>,
    pub attn: Conv2d<T>,
    pub se: SqueezeExcite<T>,
    pub out: Conv2d<T>,
}

#[derive(Clone, Debug)]
pub struct DrrmTrace<T: Scalar> {
    pub prior_a: Var<T>,
    pub prior_b: Var<T>,
    pub f_c: Var<T>,
    pub f_s: Var<T>,
    pub f_f: Var<T>,
    pub f_attn: Var<T>,
    /// `(1 - sigmoid(a)) + (1 - sigmoid(b))`.
    pub reverse: Var<T>,
    pub f_w: Var<T>,
    pub output: Var<T>,
}

impl<T: Scalar> DrrmBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            fuse: Conv2d::new(&mut b.pp("fuse"), ConvSpec::same(c + 2, c, 3)),
            spatial: DwSeparable::new(&mut b.pp("spatial"), c, c, 3),
            spatial_bn: BatchNorm2d::new(&mut b.pp("spatial_bn"), c),
            freq: Conv2d::new(&mut b.pp("freq"), ConvSpec::same(c, c, 3)),
            attn: Conv2d::new(&mut b.pp("attn"), ConvSpec::same(3 * c, c, 3)),
            se: SqueezeExcite::new(&mut b.pp("se"), c),
            out: Conv2d::new(&mut b.pp("out"), ConvSpec::same(2 * c, 1, 3)),
        }
    }

    /// `F_f = Re(ifft2(Z * M))` with `Z = fft2(F_c)` and `M` a conv of the
    /// real spectrum scaled by `1/sqrt(hw)`.
    pub fn frequency(&self, f_c: &Var<T>) -> Var<T> {
        let (n, c, h, w) = f_c.dims4();
        let z = f_c.to_complex().fft2();
        let scale = T::cast_f64(1.0 / ((h * w) as f64).sqrt());
        let m = self.freq.forward(&z.real_part().mul_scalar(scale));
        z.mul(&m.reshape(&[n, c, h, w, 1])).ifft2().real_part()
    }

    pub fn trace(&self, f: &Var<T>, a: &Var<T>, b: &Var<T>, ctx: Ctx) -> DrrmTrace<T> {
        let (h, w) = hw(f);
        let fit = |p: &Var<T>| if hw(p) == (h, w) { p.clone() } else { p.resize_bilinear(h, w) };
        let (prior_a, prior_b) = (fit(a), fit(b));
        let f_c = self.fuse.forward(&Var::cat(&[f, &prior_a, &prior_b], 1));
        let f_s = self.spatial_bn.forward(&self.spatial.forward(&f_c), ctx).relu();
        let f_f = self.frequency(&f_c);
        let f_attn = self.se.forward(&self.attn.forward(&Var::cat(&[&f_c, &f_s, &f_f], 1)));
        let reverse = prior_a.sigmoid().rsub_scalar(T::one()).add(&prior_b.sigmoid().rsub_scalar(T::one()));
        let f_w = reverse.mul(&f_c);
        let output = self.out.forward(&Var::cat(&[&f_attn, &f_w], 1)).add(&prior_a).add(&prior_b);
        DrrmTrace { prior_a, prior_b, f_c, f_s, f_f, f_attn, reverse, f_w, output }
    }

    pub fn forward(&self, f: &Var<T>, a: &Var<T>, b: &Var<T>, ctx: Ctx) -> Var<T> {
        self.trace(f, a, b, ctx).output
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let conv = |c: &Conv2d<T>| c.complexity(h, w).2;
        conv(&self.fuse)
            + self.spatial.complexity(h, w).2
            + conv(&self.freq)
            + conv(&self.attn)
            + self.se.complexity()
            + conv(&self.out)
    }
}

/// Logits `[O4, O3, O2, O1, O0]`, coarsest first. O0 is the final output.
#[derive(Clone, Debug)]
pub struct PredictionSet<T: Scalar> {
    pub logits: Vec<Var<T>>,
}

impl<T: Scalar> PredictionSet<T> {
    /// Logits of `O_level`, `level` in 0..=4.
    pub fn level(&self, level: usize) -> &Var<T> {
        &self.logits[4 - level]
    }

    pub fn final_logits(&self) -> &Var<T> {
        self.level(0)
    }

    pub fn resolutions(&self) -> Vec<(usize, usize)> {
        self.logits.iter().map(hw).collect()
    }
}

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub grd: GrdBlock<T>,
    /// Stages producing O3, O2, O1, O0.
    pub drrm: [DrrmBlock<T>; 4],
    /// Doubles f1 for the O0 stage.
    pub up0: Upsampler<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, c4: usize, c: usize) -> Self {
        Self {
            grd: GrdBlock::new(&mut b.pp("grd"), c4, c),
            drrm: std::array::from_fn(|k| DrrmBlock::new(&mut b.pp("drrm").pp(k), c)),
            up0: Upsampler::new(&mut b.pp("up0"), c),
        }
    }

    /// `fused` holds f1..f4.
    pub fn decode_all(&self, x4: &Var<T>, fused: &[Var<T>], ctx: Ctx) -> Result<PredictionSet<T>> {
        if fused.len() != 4 {
            return Err(DrrnetError::IncompletePyramid(fused.len()));
        }
        let o4 = self.grd.forward(x4, &fused[3])?;
        let o3 = self.drrm[0].forward(&fused[2], &o4, &o4, ctx);
        let o2 = self.drrm[1].forward(&fused[1], &o3, &o4, ctx);
        let o1 = self.drrm[2].forward(&fused[0], &o2, &o3, ctx);
        let o0 = self.drrm[3].forward(&self.up0.forward(&fused[0]), &o1, &o2, ctx);
        Ok(PredictionSet { logits: vec![o4, o3, o2, o1, o0] })
    }

    /// MACs given the f4 resolution.
    pub fn macs(&self, h4: usize, w4: usize) -> u64 {
        let mut m = self.grd.macs(h4, w4);
        for (k, d) in self.drrm.iter().enumerate() {
            m += d.macs(h4 << (k + 1), w4 << (k + 1));
        }
        m + self.up0.macs(h4 << 3, w4 << 3)
    }
}

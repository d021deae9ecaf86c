//! Joint spatial and spectral fusion of the global and local features.

use drrnet_tensor::nn::{se_hidden, Cbr, Conv2d, ConvSpec, Ctx, Init, Linear, Param, ParamBuilder};
use drrnet_tensor::{Scalar, Var};

use crate::error::{DrrnetError, Result};
use crate::model::Merge;

pub const GROUPS: usize = 4;

/// Spatial CBR plus an amplitude-modulated Fourier path on one channel group.
#[derive(Clone, Debug)]
pub struct GroupFusionBlock<T> {
    pub spatial: Cbr<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub gamma: Param<T>,
}

#[derive(Clone, Debug)]
pub struct GroupTrace<T: Scalar> {
    pub spatial: Var<T>,
    /// Per-channel modulation `B x Cg`, in `(0, 1)`.
    pub psi: Var<T>,
    pub freq: Var<T>,
    pub output: Var<T>,
}

impl<T: Scalar> GroupFusionBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, cg: usize) -> Self {
        let hidden = se_hidden(cg);
        Self {
            spatial: Cbr::new(&mut b.pp("spatial"), ConvSpec::same(cg, cg, 3)),
            fc1: Linear::new(&mut b.pp("fc1"), cg, hidden, true),
            fc2: Linear::new(&mut b.pp("fc2"), hidden, cg, true),
            gamma: b.param("gamma", &[1], Init::Const(1.0)),
        }
    }

    /// Channel weights from the bin-averaged spectrum amplitude. The mean is
    /// scaled by `1/sqrt(hw)` so its size does not grow with resolution.
    pub fn modulation(&self, spectrum: &Var<T>) -> Var<T> {
        let s = spectrum.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let amp = spectrum
            .complex_abs()
            .mean_dims(&[2, 3])
            .reshape(&[b, c])
            .mul_scalar(T::cast_f64(1.0 / ((h * w) as f64).sqrt()));
        self.fc2.forward(&self.fc1.forward(&amp).relu()).sigmoid()
    }

    pub fn trace(&self, x: &Var<T>, ctx: Ctx) -> GroupTrace<T> {
        let (b, c, _, _) = x.dims4();
        let spatial = self.spatial.forward(x, ctx);
        let z = x.to_complex().fft2();
        let psi = self.modulation(&z);
        let freq = z.mul(&psi.reshape(&[b, c, 1, 1, 1])).ifft2().real_part();
        let output = spatial.add(&freq.mul(&self.gamma.var()));
        GroupTrace { spatial, psi, freq, output }
    }

    pub fn forward(&self, x: &Var<T>, ctx: Ctx) -> Var<T> {
        self.trace(x, ctx).output
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.spatial.complexity(h, w).2 + self.fc1.macs(1) + self.fc2.macs(1)
    }
}

#[derive(Clone, Debug)]
pub struct MmfBlock<T> {
    pub merge: Merge,
    pub groups: Vec<GroupFusionBlock<T>>,
    /// 1x1 reduction of the regrouped features to `C`.
    pub reduce: Conv2d<T>,
    /// Conv of the sigmoid gate.
    pub gate: Conv2d<T>,
    pub gamma: Param<T>,
}

#[derive(Clone, Debug)]
pub struct MmfTrace<T: Scalar> {
    pub fused: Var<T>,
    pub reduced: Var<T>,
    pub output: Var<T>,
}

impl<T: Scalar> MmfBlock<T> {
    pub fn new(b: &mut ParamBuilder<'_, T>, merge: Merge, width: usize) -> Result<Self> {
        let ch = match merge {
            Merge::Cat => 2 * width,
            Merge::Add => width,
        };
        if ch % GROUPS != 0 || ch == 0 {
            return Err(DrrnetError::ChannelIndivisible(ch));
        }
        Ok(Self {
            merge,
            groups: (0..GROUPS).map(|k| GroupFusionBlock::new(&mut b.pp("groups").pp(k), ch / GROUPS)).collect(),
            reduce: Conv2d::new(&mut b.pp("reduce"), ConvSpec::same(ch, width, 1)),
            gate: Conv2d::new(&mut b.pp("gate"), ConvSpec::same(width, width, 3)),
            gamma: b.param("gamma", &[1], Init::Const(1.0)),
        })
    }

    pub fn trace(&self, g: &Var<T>, l: &Var<T>, ctx: Ctx) -> Result<MmfTrace<T>> {
        if g.shape() != l.shape() {
            return Err(DrrnetError::ResolutionMismatch(format!(
                "global {:?} and local {:?} features differ",
                g.shape(),
                l.shape()
            )));
        }
        let x = match self.merge {
            Merge::Cat => Var::cat(&[g, l], 1),
            Merge::Add => g.add(l),
        };
        let outs: Vec<Var<T>> =
            x.chunk(GROUPS, 1).iter().zip(&self.groups).map(|(part, blk)| blk.forward(part, ctx)).collect();
        let refs: Vec<&Var<T>> = outs.iter().collect();
        let fused = Var::cat(&refs, 1);
        let reduced = self.reduce.forward(&fused);
        let gated = self.gate.forward(&reduced).sigmoid().mul(&reduced).mul(&self.gamma.var());
        let output = gated.add(&reduced);
        Ok(MmfTrace { fused, reduced, output })
    }

    pub fn forward(&self, g: &Var<T>, l: &Var<T>, ctx: Ctx) -> Result<Var<T>> {
        Ok(self.trace(g, l, ctx)?.output)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let groups: u64 = self.groups.iter().map(|g| g.macs(h, w)).sum();
        groups + self.reduce.complexity(h, w).2 + self.gate.complexity(h, w).2
    }
}

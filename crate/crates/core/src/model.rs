//! The full network: backbone, per-level global and local encoders, fusion,
//! and the refinement decoder.

use drrnet_tensor::nn::{Ctx, ParamBuilder, ParamStore};
use drrnet_tensor::{Scalar, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_backbone, Backbone, BackboneConfig, FeaturePyramid};
use crate::context_encoder::OcmBlock;
use crate::decoder::{Decoder, PredictionSet};
use crate::detail_encoder::MdmBlock;
use crate::error::{DrrnetError, Result};
use crate::fusion::MmfBlock;

/// How a level block combines its two inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Merge {
    Cat,
    Add,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Working channel width C of every head.
    pub width: usize,
    pub ocm_merge: Merge,
    pub mdm_merge: Merge,
    pub mmf_merge: Merge,
}

/// Width used with the paper backbone.
pub const PAPER_WIDTH: usize = 128;

impl Default for ModelConfig {
    fn default() -> Self {
        Self { width: PAPER_WIDTH, ocm_merge: Merge::Cat, mdm_merge: Merge::Cat, mmf_merge: Merge::Cat }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(2) {
            return Err(DrrnetError::InvalidConfig(format!(
                "model.width must be positive and even, got {}",
                self.width
            )));
        }
        if self.mmf_merge == Merge::Add && !self.width.is_multiple_of(4) {
            return Err(DrrnetError::InvalidConfig(format!(
                "model.mmf_merge = add needs model.width divisible by 4, got {}",
                self.width
            )));
        }
        Ok(())
    }
}

/// Global, local and fused features of one forward pass, finest first.
#[derive(Clone, Debug)]
pub struct FusedPyramid<T: Scalar> {
    pub global: Vec<Var<T>>,
    pub local: Vec<Var<T>>,
    pub fused: Vec<Var<T>>,
}

#[derive(Clone, Debug)]
pub struct Forward<T: Scalar> {
    pub pyramid: FeaturePyramid<T>,
    pub features: FusedPyramid<T>,
    pub predictions: PredictionSet<T>,
}

#[derive(Clone, Debug)]
pub struct DrrNet<T> {
    pub backbone: Backbone<T>,
    /// Indexed by level - 1.
    pub ocm: Vec<OcmBlock<T>>,
    pub mdm: Vec<MdmBlock<T>>,
    pub mmf: Vec<MmfBlock<T>>,
    pub decoder: Decoder<T>,
    pub width: usize,
}

impl<T: Scalar> DrrNet<T> {
    /// Builds the network and its parameter store; every random draw comes
    /// from `seed`.
    pub fn build(backbone: &BackboneConfig, model: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (bb, mut store) = build_backbone::<T>(backbone, &mut rng)?;
        let mut heads = ParamStore::new();
        let c = model.width;
        let ch = bb.channels;
        let (ocm, mdm, mmf, decoder) = {
            let mut b = ParamBuilder::new(&mut heads, &mut rng);
            let ocm =
                (0..4).map(|i| OcmBlock::new(&mut b.pp("ocm").pp(i + 1), model.ocm_merge, i == 3, ch[i], c)).collect();
            let mdm =
                (0..4).map(|i| MdmBlock::new(&mut b.pp("mdm").pp(i + 1), model.mdm_merge, i == 3, ch[i], c)).collect();
            let mmf =
                (0..4).map(|i| MmfBlock::new(&mut b.pp("mmf").pp(i + 1), model.mmf_merge, c)).collect::<Result<_>>()?;
            let decoder = Decoder::new(&mut b.pp("decoder"), ch[3], c);
            (ocm, mdm, mmf, decoder)
        };
        store.absorb(heads);
        Ok((Self { backbone: bb, ocm, mdm, mmf, decoder, width: c }, store))
    }

    pub fn forward_full(&self, images: &Var<T>, ctx: Ctx) -> Result<Forward<T>> {
        let pyramid = self.backbone.extract_features(images, ctx)?;
        let x = &pyramid.levels;
        let mut global: Vec<Option<Var<T>>> = vec![None; 4];
        let mut local: Vec<Option<Var<T>>> = vec![None; 4];
        for i in (0..4).rev() {
            let (ga, la) = if i == 3 { (None, None) } else { (global[i + 1].clone(), local[i + 1].clone()) };
            global[i] = Some(self.ocm[i].forward(&x[i], ga.as_ref(), ctx)?);
            local[i] = Some(self.mdm[i].forward(&x[i], la.as_ref(), ctx)?);
        }
        let global: Vec<Var<T>> = global.into_iter().map(|g| g.expect("level built")).collect();
        let local: Vec<Var<T>> = local.into_iter().map(|l| l.expect("level built")).collect();
        let fused = (0..4).map(|i| self.mmf[i].forward(&global[i], &local[i], ctx)).collect::<Result<Vec<_>>>()?;
        let predictions = self.decoder.decode_all(&x[3], &fused, ctx)?;
        Ok(Forward { pyramid, features: FusedPyramid { global, local, fused }, predictions })
    }

    pub fn forward(&self, images: &Var<T>, ctx: Ctx) -> Result<PredictionSet<T>> {
        Ok(self.forward_full(images, ctx)?.predictions)
    }

    /// Closed-form multiply-accumulate count for one `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut m = self.backbone.macs(h, w);
        for i in 0..4 {
            let (lh, lw) = (h >> (i + 2), w >> (i + 2));
            m += self.ocm[i].macs(lh, lw) + self.mdm[i].macs(lh, lw) + self.mmf[i].macs(lh, lw);
        }
        m + self.decoder.macs(h >> 5, w >> 5)
    }
}

/// Spatial sizes of every prediction for an `h x w` input.
pub fn prediction_resolutions(h: usize, w: usize) -> Vec<(usize, usize)> {
    (0..5).map(|k| (h >> (5 - k), w >> (5 - k))).collect()
}

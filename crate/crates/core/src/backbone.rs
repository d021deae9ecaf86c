//! Multi-scale feature extractors producing x1..x4 at strides 4, 8, 16, 32.

use std::path::PathBuf;

use drrnet_tensor::nn::{Cbr, Conv2d, ConvSpec, Ctx, LayerNorm, Linear, ParamBuilder, ParamStore};
use drrnet_tensor::{Scalar, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{DrrnetError, Result};

pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// Pyramid vision transformer (v2) backbone.
    Paper,
    /// Four strided CBR stages, for CPU-scale runs.
    Tiny,
}

/// Capacity variants of the pyramid vision transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PvtVariant {
    B0,
    B1,
    B2,
    B3,
    B4,
    B5,
}

impl PvtVariant {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "b0" => Self::B0,
            "b1" => Self::B1,
            "b2" => Self::B2,
            "b3" => Self::B3,
            "b4" => Self::B4,
            "b5" => Self::B5,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::B0 => "b0",
            Self::B1 => "b1",
            Self::B2 => "b2",
            Self::B3 => "b3",
            Self::B4 => "b4",
            Self::B5 => "b5",
        }
    }

    pub fn dims(self) -> [usize; 4] {
        match self {
            Self::B0 => [32, 64, 160, 256],
            _ => [64, 128, 320, 512],
        }
    }

    pub fn depths(self) -> [usize; 4] {
        match self {
            Self::B0 | Self::B1 => [2, 2, 2, 2],
            Self::B2 => [3, 4, 6, 3],
            Self::B3 => [3, 4, 18, 3],
            Self::B4 => [3, 8, 27, 3],
            Self::B5 => [3, 6, 40, 3],
        }
    }

    pub fn mlp_ratios(self) -> [usize; 4] {
        match self {
            Self::B5 => [4, 4, 4, 4],
            _ => [8, 8, 4, 4],
        }
    }

    pub const HEADS: [usize; 4] = [1, 2, 5, 8];
    pub const SR_RATIOS: [usize; 4] = [8, 4, 2, 1];
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub profile: Profile,
    pub variant: PvtVariant,
    /// Channels of x1..x4.
    pub stage_channels: [usize; 4],
    pub weights: Option<PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::paper(PvtVariant::B4)
    }
}

impl BackboneConfig {
    pub fn paper(variant: PvtVariant) -> Self {
        Self { profile: Profile::Paper, variant, stage_channels: variant.dims(), weights: None }
    }

    pub fn tiny() -> Self {
        Self { profile: Profile::Tiny, variant: PvtVariant::B4, stage_channels: [16, 32, 64, 128], weights: None }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.stage_channels;
        if c[0] == 0 || c.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DrrnetError::InvalidConfig(format!(
                "backbone.stage_channels must be positive and strictly increasing, got {c:?}"
            )));
        }
        if self.profile == Profile::Paper && c != self.variant.dims() {
            return Err(DrrnetError::InvalidConfig(format!(
                "paper backbone {} has stage channels {:?}, got {c:?}",
                self.variant.name(),
                self.variant.dims()
            )));
        }
        Ok(())
    }
}

/// x1..x4, finest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: Vec<Var<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    /// Level `i` in 1..=4.
    pub fn level(&self, i: usize) -> &Var<T> {
        &self.levels[i - 1]
    }
}

#[derive(Clone, Debug)]
pub struct TinyBackbone<T> {
    pub stages: Vec<Vec<Cbr<T>>>,
}

impl<T: Scalar> TinyBackbone<T> {
    fn new(b: &mut ParamBuilder<'_, T>, c: [usize; 4]) -> Self {
        let s2 = |cin, cout| ConvSpec::same(cin, cout, 3).stride(2);
        let mut stages = Vec::new();
        let mut cin = 3;
        for (i, &cout) in c.iter().enumerate() {
            let mut sb = b.pp(format!("stages.{i}"));
            let mut layers = vec![Cbr::new(&mut sb.pp(0), s2(cin, cout))];
            if i == 0 {
                layers.push(Cbr::new(&mut sb.pp(1), s2(cout, cout)));
            }
            stages.push(layers);
            cin = cout;
        }
        Self { stages }
    }

    fn forward(&self, x: &Var<T>, ctx: Ctx) -> Vec<Var<T>> {
        let mut out = Vec::with_capacity(4);
        let mut h = x.clone();
        for stage in &self.stages {
            for layer in stage {
                h = layer.forward(&h, ctx);
            }
            out.push(h.clone());
        }
        out
    }

    fn macs(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for layer in self.stages.iter().flatten() {
            let (oh, ow, m) = layer.complexity(h, w);
            total += m;
            (h, w) = (oh, ow);
        }
        total
    }
}

fn to_tokens<T: Scalar>(x: &Var<T>) -> Var<T> {
    let (n, c, h, w) = x.dims4();
    x.reshape(&[n, c, h * w]).permute(&[0, 2, 1])
}

fn from_tokens<T: Scalar>(t: &Var<T>, h: usize, w: usize) -> Var<T> {
    let s = t.shape();
    let (n, c) = (s[0], s[2]);
    t.permute(&[0, 2, 1]).reshape(&[n, c, h, w])
}

#[derive(Clone, Debug)]
struct PatchEmbed<T> {
    proj: Conv2d<T>,
    norm: LayerNorm<T>,
}

impl<T: Scalar> PatchEmbed<T> {
    fn new(b: &mut ParamBuilder<'_, T>, cin: usize, cout: usize, first: bool) -> Self {
        let spec = if first { ConvSpec::same(cin, cout, 7).stride(4) } else { ConvSpec::same(cin, cout, 3).stride(2) };
        Self { proj: Conv2d::new(&mut b.pp("proj"), spec), norm: LayerNorm::new(&mut b.pp("norm"), cout, 1e-5) }
    }

    fn forward(&self, x: &Var<T>) -> (Var<T>, usize, usize) {
        let y = self.proj.forward(x);
        let (_, _, h, w) = y.dims4();
        (self.norm.forward(&to_tokens(&y)), h, w)
    }
}

#[derive(Clone, Debug)]
struct Attention<T> {
    heads: usize,
    q: Linear<T>,
    kv: Linear<T>,
    proj: Linear<T>,
    sr: Option<(Conv2d<T>, LayerNorm<T>)>,
}

impl<T: Scalar> Attention<T> {
    fn new(b: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, sr: usize) -> Self {
        let sr = (sr > 1).then(|| {
            (
                Conv2d::new(&mut b.pp("sr"), ConvSpec::same(dim, dim, sr).stride(sr).padding(0)),
                LayerNorm::new(&mut b.pp("norm"), dim, 1e-5),
            )
        });
        Self {
            heads,
            q: Linear::new(&mut b.pp("q"), dim, dim, true),
            kv: Linear::new(&mut b.pp("kv"), dim, 2 * dim, true),
            proj: Linear::new(&mut b.pp("proj"), dim, dim, true),
            sr,
        }
    }

    fn forward(&self, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        let s = x.shape().to_vec();
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let d = c / self.heads;
        let q = self.q.forward(x).reshape(&[bsz, n, self.heads, d]).permute(&[0, 2, 1, 3]);
        let src = match &self.sr {
            Some((conv, norm)) => norm.forward(&to_tokens(&conv.forward(&from_tokens(x, h, w)))),
            None => x.clone(),
        };
        let m = src.shape()[1];
        let kv = self.kv.forward(&src).reshape(&[bsz, m, 2, self.heads, d]).permute(&[2, 0, 3, 1, 4]);
        let k = kv.narrow(0, 0, 1).reshape(&[bsz, self.heads, m, d]);
        let v = kv.narrow(0, 1, 1).reshape(&[bsz, self.heads, m, d]);
        let scale = T::cast_f64(1.0 / (d as f64).sqrt());
        let attn = q.matmul(&k.permute(&[0, 1, 3, 2])).mul_scalar(scale).softmax(3);
        let out = attn.matmul(&v).permute(&[0, 2, 1, 3]).reshape(&[bsz, n, c]);
        self.proj.forward(&out)
    }

    fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        let c = self.q.weight.shape()[0];
        let m = match &self.sr {
            Some((conv, _)) => {
                let (oh, ow, _) = conv.complexity(h, w);
                oh * ow
            }
            None => n,
        };
        let sr = self.sr.as_ref().map_or(0, |(conv, _)| conv.complexity(h, w).2);
        self.q.macs(n) + sr + self.kv.macs(m) + 2 * (n * m * c) as u64 + self.proj.macs(n)
    }
}

#[derive(Clone, Debug)]
struct Mlp<T> {
    fc1: Linear<T>,
    dw: Conv2d<T>,
    fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    fn new(b: &mut ParamBuilder<'_, T>, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut b.pp("fc1"), dim, hidden, true),
            dw: Conv2d::new(&mut b.pp("dwconv"), ConvSpec::same(hidden, hidden, 3).groups(hidden)),
            fc2: Linear::new(&mut b.pp("fc2"), hidden, dim, true),
        }
    }

    fn forward(&self, x: &Var<T>, h: usize, w: usize) -> Var<T> {
        let y = self.fc1.forward(x);
        let y = to_tokens(&self.dw.forward(&from_tokens(&y, h, w)));
        self.fc2.forward(&y.gelu())
    }

    fn macs(&self, n: usize, h: usize, w: usize) -> u64 {
        self.fc1.macs(n) + self.dw.complexity(h, w).2 + self.fc2.macs(n)
    }
}

#[derive(Clone, Debug)]
struct Block<T> {
    norm1: LayerNorm<T>,
    attn: Attention<T>,
    norm2: LayerNorm<T>,
    mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
struct PvtStage<T> {
    embed: PatchEmbed<T>,
    blocks: Vec<Block<T>>,
    norm: LayerNorm<T>,
}

/// Pyramid vision transformer v2 with overlapping patch embeddings,
/// spatial-reduction attention and depthwise-conv feed-forward layers.
#[derive(Clone, Debug)]
pub struct PvtV2<T> {
    stages: Vec<PvtStage<T>>,
}

impl<T: Scalar> PvtV2<T> {
    fn new(b: &mut ParamBuilder<'_, T>, variant: PvtVariant) -> Self {
        let dims = variant.dims();
        let depths = variant.depths();
        let ratios = variant.mlp_ratios();
        let mut stages = Vec::new();
        let mut cin = 3;
        for i in 0..4 {
            let dim = dims[i];
            let embed = PatchEmbed::new(&mut b.pp(format!("patch_embed{}", i + 1)), cin, dim, i == 0);
            let blocks = (0..depths[i])
                .map(|j| {
                    let mut bb = b.pp(format!("block{}.{j}", i + 1));
                    Block {
                        norm1: LayerNorm::new(&mut bb.pp("norm1"), dim, 1e-6),
                        attn: Attention::new(&mut bb.pp("attn"), dim, PvtVariant::HEADS[i], PvtVariant::SR_RATIOS[i]),
                        norm2: LayerNorm::new(&mut bb.pp("norm2"), dim, 1e-6),
                        mlp: Mlp::new(&mut bb.pp("mlp"), dim, dim * ratios[i]),
                    }
                })
                .collect();
            let norm = LayerNorm::new(&mut b.pp(format!("norm{}", i + 1)), dim, 1e-6);
            stages.push(PvtStage { embed, blocks, norm });
            cin = dim;
        }
        Self { stages }
    }

    fn forward(&self, x: &Var<T>) -> Vec<Var<T>> {
        let mut out = Vec::with_capacity(4);
        let mut feat = x.clone();
        for stage in &self.stages {
            let (mut t, h, w) = stage.embed.forward(&feat);
            for blk in &stage.blocks {
                t = t.add(&blk.attn.forward(&blk.norm1.forward(&t), h, w));
                t = t.add(&blk.mlp.forward(&blk.norm2.forward(&t), h, w));
            }
            feat = from_tokens(&stage.norm.forward(&t), h, w);
            out.push(feat.clone());
        }
        out
    }

    fn macs(&self, mut h: usize, mut w: usize) -> u64 {
        let mut total = 0;
        for stage in &self.stages {
            let (oh, ow, m) = stage.embed.proj.complexity(h, w);
            total += m;
            (h, w) = (oh, ow);
            let n = h * w;
            for blk in &stage.blocks {
                total += blk.attn.macs(n, h, w) + blk.mlp.macs(n, h, w);
            }
        }
        total
    }
}

#[derive(Clone, Debug)]
pub enum BackboneKind<T> {
    Tiny(TinyBackbone<T>),
    Pvt(PvtV2<T>),
}

#[derive(Clone, Debug)]
pub struct Backbone<T> {
    pub kind: BackboneKind<T>,
    pub channels: [usize; 4],
}

/// Builds the backbone with parameters named `backbone.*` in a store of its
/// own, loading `config.weights` when set.
pub fn build_backbone<T: Scalar>(
    config: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Backbone<T>, ParamStore<T>)> {
    config.validate()?;
    let mut store = ParamStore::new();
    let kind = {
        let mut root = ParamBuilder::new(&mut store, rng);
        let mut b = root.pp("backbone");
        match config.profile {
            Profile::Tiny => BackboneKind::Tiny(TinyBackbone::new(&mut b, config.stage_channels)),
            Profile::Paper => BackboneKind::Pvt(PvtV2::new(&mut b, config.variant)),
        }
    };
    match &config.weights {
        Some(path) => crate::checkpoint::load_weights_into(&store, path)?,
        None if config.profile == Profile::Paper => {
            log::warn!("paper backbone has no weights file; using random initialization");
        }
        None => {}
    }
    Ok((Backbone { kind, channels: config.stage_channels }, store))
}

impl<T: Scalar> Backbone<T> {
    /// Runs the extractor on a `B x 3 x H x W` batch.
    pub fn extract_features(&self, images: &Var<T>, ctx: Ctx) -> Result<FeaturePyramid<T>> {
        let (_, c, h, w) = images.dims4();
        if c != 3 {
            return Err(DrrnetError::ShapeMismatch(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(DrrnetError::InvalidResolution { h, w });
        }
        if !images.value().all_finite() {
            return Err(DrrnetError::NanInput("images"));
        }
        let levels = match &self.kind {
            BackboneKind::Tiny(t) => t.forward(images, ctx),
            BackboneKind::Pvt(p) => p.forward(images),
        };
        Ok(FeaturePyramid { levels })
    }

    /// Closed-form multiply-accumulate count for one `h x w` image.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        match &self.kind {
            BackboneKind::Tiny(t) => t.macs(h, w),
            BackboneKind::Pvt(p) => p.macs(h, w),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use drrnet_tensor::{count_macs, Tensor};
    use rand::SeedableRng;

    fn images(b: usize, h: usize, w: usize) -> Var<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Var::constant(Tensor::rand_uniform(&[b, 3, h, w], -1.0, 1.0, &mut rng))
    }

    #[test]
    fn tiny_pyramid_shapes_at_384() {
        let (bb, _) = build_backbone::<f32>(&BackboneConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = bb.extract_features(&images(2, 384, 384), Ctx::eval()).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 16, 96, 96], vec![2, 32, 48, 48], vec![2, 64, 24, 24], vec![2, 128, 12, 12]]);
    }

    #[test]
    fn tiny_pyramid_at_32() {
        let (bb, _) = build_backbone::<f32>(&BackboneConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let p = bb.extract_features(&images(1, 32, 32), Ctx::eval()).unwrap();
        let spatial: Vec<_> = p.levels.iter().map(|l| (l.shape()[2], l.shape()[3])).collect();
        assert_eq!(spatial, vec![(8, 8), (4, 4), (2, 2), (1, 1)]);
    }

    #[test]
    fn rejects_bad_resolution() {
        let (bb, _) = build_backbone::<f32>(&BackboneConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            bb.extract_features(&images(1, 48, 64), Ctx::eval()),
            Err(DrrnetError::InvalidResolution { h: 48, w: 64 })
        ));
    }

    #[test]
    fn same_seed_same_features() {
        let run = || {
            let (bb, _) = build_backbone::<f32>(&BackboneConfig::tiny(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            bb.extract_features(&images(1, 64, 64), Ctx::eval()).unwrap().levels[3].value().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_weights_file_is_reported() {
        let mut cfg = BackboneConfig::tiny();
        cfg.weights = Some(PathBuf::from("/nonexistent/weights.safetensors"));
        assert!(matches!(
            build_backbone::<f32>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(DrrnetError::MissingWeights { .. })
        ));
    }

    #[test]
    fn pvt_forward_shapes_and_mac_closed_form() {
        let (bb, _) =
            build_backbone::<f32>(&BackboneConfig::paper(PvtVariant::B0), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (p, counted) = count_macs(|| bb.extract_features(&images(1, 64, 64), Ctx::eval()).unwrap());
        let shapes: Vec<_> = p.levels.iter().map(|l| l.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![1, 32, 16, 16], vec![1, 64, 8, 8], vec![1, 160, 4, 4], vec![1, 256, 2, 2]]);
        assert_eq!(bb.macs(64, 64), counted);
        assert!(p.levels.iter().all(|l| l.value().all_finite()));
    }

    #[test]
    fn pvt_b4_parameter_count() {
        // published size of the b4 encoder without its classification head
        let (_, store) =
            build_backbone::<f32>(&BackboneConfig::paper(PvtVariant::B4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = store.num_trainable() as f64 / 1e6;
        assert!((n - 62.04).abs() < 0.3, "{n} M");
    }

    #[test]
    fn strictly_increasing_channels_enforced() {
        let mut cfg = BackboneConfig::tiny();
        cfg.stage_channels = [16, 32, 32, 64];
        assert!(cfg.validate().is_err());
        assert_eq!(STAGE_STRIDES, [4, 8, 16, 32]);
    }
}

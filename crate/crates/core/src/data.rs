//! Paired image and mask loading, augmentation, batching, and a synthetic
//! blob dataset for desk-scale runs.

use std::path::{Path, PathBuf};

use drrnet_tensor::kernels::resize::resize_bilinear_forward;
use drrnet_tensor::{Scalar, Tensor};
use image::{GrayImage, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DrrnetError, Result};
use crate::metrics::{list_images, pair_stems};

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub hflip_prob: f64,
    /// Side fraction range of the random crop.
    pub crop_scale: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self { hflip_prob: 0.5, crop_scale: (0.75, 1.0), brightness: 0.2, contrast: 0.2, saturation: 0.2 }
    }
}

impl AugmentSpec {
    /// No flips, full crops, no color change.
    pub fn identity() -> Self {
        Self { hflip_prob: 0.0, crop_scale: (1.0, 1.0), brightness: 0.0, contrast: 0.0, saturation: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DrrnetError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad("data.hflip_prob must lie in [0, 1]");
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad("data.crop_scale_min/max must satisfy 0 < min <= max <= 1");
        }
        if [self.brightness, self.contrast, self.saturation].iter().any(|&v| !(0.0..1.0).contains(&v)) {
            return bad("color jitter magnitudes must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub images_subdir: String,
    pub gt_subdir: String,
    pub augment: AugmentSpec,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Channel statistics of the large natural-image corpus backbones are
/// usually pretrained on.
pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            images_subdir: "Imgs".into(),
            gt_subdir: "GT".into(),
            augment: AugmentSpec::default(),
            mean: RGB_MEAN,
            std: RGB_STD,
        }
    }
}

/// An RGB image in `[0, 1]` (`3 x H x W`) and its binary mask (`1 x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub name: String,
    /// `(H, W)` as loaded from disk.
    pub original_size: (usize, usize),
}

impl SamplePair {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let bytes = std::fs::read(path)
        .map_err(|e| DrrnetError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?;
    image::load_from_memory(&bytes)
        .map_err(|e| DrrnetError::CorruptImage { path: path.to_path_buf(), reason: e.to_string() })
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Reads an RGB image scaled to `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&decode(path)?.to_rgb8()))
}

/// Reads a mask and binarizes it at 128.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let g = decode(path)?.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let data = g.as_raw().iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(&[1, h, w], data).expect("mask shape"))
}

/// Loads `<root>/<images_subdir>/*` paired by stem with `<root>/<gt_subdir>/*`,
/// sorted by stem.
pub fn load_pairs(root: &Path, images_subdir: &str, gt_subdir: &str) -> Result<Vec<SamplePair>> {
    let images = list_images(&root.join(images_subdir))?;
    let masks = list_images(&root.join(gt_subdir))?;
    let pairs = pair_stems(&images, &masks, images_subdir, gt_subdir)?;
    pairs
        .into_iter()
        .map(|(name, ip, mp)| {
            let image = load_image(&ip)?;
            let mask = load_mask(&mp)?;
            if image.shape()[1..] != mask.shape()[1..] {
                return Err(DrrnetError::DatasetError(format!(
                    "{name}: image {:?} and mask {:?} differ in size",
                    &image.shape()[1..],
                    &mask.shape()[1..]
                )));
            }
            let original_size = (image.shape()[1], image.shape()[2]);
            Ok(SamplePair { image, mask, name, original_size })
        })
        .collect()
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        t.data()[i - x + (w - 1 - x)]
    })
}

pub fn crop(t: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(&[s[0], ch, cw], |i| {
        let (c, r) = (i / (ch * cw), i % (ch * cw));
        let (y, x) = (r / cw, r % cw);
        t.data()[c * h * w + (y0 + y) * w + x0 + x]
    })
}

pub fn resize_bilinear_chw(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = t.shape();
    if (s[1], s[2]) == (oh, ow) {
        return t.clone();
    }
    let x = t.clone().reshape(&[1, s[0], s[1], s[2]]);
    resize_bilinear_forward(&x, oh, ow).reshape(&[s[0], oh, ow])
}

/// Nearest-neighbour resize sampling pixel centres, so binary masks stay
/// binary.
pub fn resize_nearest_chw(t: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (oh, ow) {
        return t.clone();
    }
    let src = |o: usize, n: usize, on: usize| (((o as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let (ch, r) = (i / (oh * ow), i % (oh * ow));
        let (y, x) = (r / ow, r % ow);
        t.data()[ch * h * w + src(y, h, oh) * w + src(x, w, ow)]
    })
}

fn clamp01(t: &mut Tensor<f32>) {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn luma(t: &Tensor<f32>) -> Vec<f32> {
    let n = t.shape()[1] * t.shape()[2];
    let d = t.data();
    (0..n).map(|p| 0.299 * d[p] + 0.587 * d[n + p] + 0.114 * d[2 * n + p]).collect()
}

/// Brightness, contrast, then saturation, each clamped to `[0, 1]`.
pub fn color_jitter(img: &Tensor<f32>, brightness: f32, contrast: f32, saturation: f32) -> Tensor<f32> {
    let mut t = img.map(|v| v * brightness);
    clamp01(&mut t);
    let m = luma(&t).iter().sum::<f32>() / (t.numel() / 3) as f32;
    t = t.map(|v| (v - m) * contrast + m);
    clamp01(&mut t);
    let g = luma(&t);
    let n = g.len();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        let gp = g[i % n];
        *v = (*v - gp) * saturation + gp;
    }
    clamp01(&mut t);
    t
}

/// Random stream for sample `index` in `epoch`, independent of worker
/// count and visiting order.
pub fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Flip, scale crop, resize to `size x size`, color jitter. The draws are
/// always taken in the same order so the stream layout does not depend on
/// the spec.
pub fn augment(pair: &SamplePair, spec: &AugmentSpec, size: usize, rng: &mut ChaCha8Rng) -> SamplePair {
    let flip = rng.gen::<f64>() < spec.hflip_prob;
    let (lo, hi) = spec.crop_scale;
    let scale = lo + (hi - lo) * rng.gen::<f64>();
    let (h, w) = pair.size();
    let ch = ((scale * h as f64).round() as usize).clamp(1, h);
    let cw = ((scale * w as f64).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let mut jitter = |m: f64| (1.0 + m * (2.0 * rng.gen::<f64>() - 1.0)) as f32;
    let (b, c, s) = (jitter(spec.brightness), jitter(spec.contrast), jitter(spec.saturation));

    let (mut image, mut mask) = (pair.image.clone(), pair.mask.clone());
    if flip {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if (ch, cw) != (h, w) {
        image = crop(&image, y0, x0, ch, cw);
        mask = crop(&mask, y0, x0, ch, cw);
    }
    image = resize_bilinear_chw(&image, size, size);
    mask = resize_nearest_chw(&mask, size, size);
    if (b, c, s) != (1.0, 1.0, 1.0) {
        image = color_jitter(&image, b, c, s);
    }
    SamplePair { image, mask, name: pair.name.clone(), original_size: pair.original_size }
}

/// Resize without augmentation.
pub fn resize_pair(pair: &SamplePair, size: usize) -> SamplePair {
    SamplePair {
        image: resize_bilinear_chw(&pair.image, size, size),
        mask: resize_nearest_chw(&pair.mask, size, size),
        name: pair.name.clone(),
        original_size: pair.original_size,
    }
}

/// Visiting order of epoch `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Normalized images, `B x 3 x H x W`.
    pub images: Tensor<T>,
    /// `B x 1 x H x W` in {0, 1}.
    pub masks: Tensor<T>,
    pub names: Vec<String>,
    pub original_sizes: Vec<(usize, usize)>,
}

pub fn normalize<T: Scalar>(img: &Tensor<f32>, mean: &[f64; 3], std: &[f64; 3]) -> Vec<T> {
    let n = img.shape()[1] * img.shape()[2];
    img.data().iter().enumerate().map(|(i, &v)| T::cast_f64((v as f64 - mean[i / n]) / std[i / n])).collect()
}

/// Stacks equally sized pairs in the given order.
pub fn collate<T: Scalar>(pairs: &[SamplePair], mean: &[f64; 3], std: &[f64; 3]) -> Result<Batch<T>> {
    let first = pairs.first().ok_or_else(|| DrrnetError::DatasetError("empty batch".into()))?;
    let (h, w) = first.size();
    let mut images = Vec::with_capacity(pairs.len() * 3 * h * w);
    let mut masks = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.size() != (h, w) {
            return Err(DrrnetError::DatasetError(format!("{} is {:?}, batch is {:?}", p.name, p.size(), (h, w))));
        }
        images.extend(normalize::<T>(&p.image, mean, std));
        masks.extend(p.mask.data().iter().map(|&v| T::cast_f64(v as f64)));
    }
    let b = pairs.len();
    Ok(Batch {
        images: Tensor::from_vec(&[b, 3, h, w], images).expect("batch shape"),
        masks: Tensor::from_vec(&[b, 1, h, w], masks).expect("mask shape"),
        names: pairs.iter().map(|p| p.name.clone()).collect(),
        original_sizes: pairs.iter().map(|p| p.original_size).collect(),
    })
}

/// Textured scenes each holding one ellipse whose colour is close to the
/// background's.
pub fn synthetic_blobs(n: usize, size: usize, seed: u64) -> Vec<SamplePair> {
    (0..n)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let s = size as f64;
            let (cy, cx) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
            let (ry, rx) = (rng.gen_range(0.12..0.28) * s, rng.gen_range(0.12..0.28) * s);
            let bg: [f32; 3] = std::array::from_fn(|_| rng.gen_range(0.2..0.8));
            let fg: [f32; 3] = std::array::from_fn(|c| {
                (bg[c] + rng.gen_range(0.15..0.3) * if c % 2 == 0 { 1.0 } else { -1.0 }).clamp(0.0, 1.0)
            });
            let noise: Vec<f32> = (0..size * size).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let inside = |y: usize, x: usize| {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                dy * dy + dx * dx <= 1.0
            };
            let image = Tensor::from_fn(&[3, size, size], |i| {
                let (c, p) = (i / (size * size), i % (size * size));
                let base = if inside(p / size, p % size) { fg[c] } else { bg[c] };
                (base + noise[p]).clamp(0.0, 1.0)
            });
            let mask = Tensor::from_fn(&[1, size, size], |p| if inside(p / size, p % size) { 1.0 } else { 0.0 });
            SamplePair { image, mask, name: format!("blob_{k:03}"), original_size: (size, size) }
        })
        .collect()
}

fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes pairs as `<root>/<images_subdir>/<name>.png` and
/// `<root>/<gt_subdir>/<name>.png`.
pub fn write_pairs(root: &Path, images_subdir: &str, gt_subdir: &str, pairs: &[SamplePair]) -> Result<()> {
    let (idir, gdir) = (root.join(images_subdir), root.join(gt_subdir));
    for d in [&idir, &gdir] {
        std::fs::create_dir_all(d).map_err(|e| DrrnetError::io(d, e))?;
    }
    for p in pairs {
        let (h, w) = p.size();
        let n = h * w;
        let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_u8(p.image.data()[i]), to_u8(p.image.data()[n + i]), to_u8(p.image.data()[2 * n + i])])
        });
        let gray = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([to_u8(p.mask.data()[y as usize * w + x as usize])])
        });
        let ip = idir.join(format!("{}.png", p.name));
        rgb.save(&ip).map_err(|e| DrrnetError::io(&ip, std::io::Error::other(e)))?;
        let gp = gdir.join(format!("{}.png", p.name));
        gray.save(&gp).map_err(|e| DrrnetError::io(&gp, std::io::Error::other(e)))?;
    }
    Ok(())
}

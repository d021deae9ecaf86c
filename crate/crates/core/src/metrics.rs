//! Evaluation metrics for binary segmentation maps: MAE, S-measure,
//! E-measure (mean form) and weighted F-measure, plus directory evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use drrnet_tensor::parallel::map_range;

use crate::error::{DrrnetError, Result};

/// Row-major single-channel map.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl GrayMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(DrrnetError::ShapeMismatch(format!("{} values for a {h}x{w} map", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Self {
        Self { h, w, data: (0..h * w).map(f).collect() }
    }

    fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Rescales to `[0, 1]` by min and max when values leave that range.
    pub fn normalized(mut self) -> Self {
        let (lo, hi) = self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        if lo < 0.0 || hi > 1.0 {
            let span = hi - lo;
            for v in &mut self.data {
                *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
            }
        }
        self
    }

    /// `v >= 0.5`, the 8-bit `>= 128` rule on values scaled by 1/255.
    pub fn binarized(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| if v >= 128.0 / 255.0 { 1.0 } else { 0.0 }).collect(),
        }
    }
}

fn same_shape(p: &GrayMap, g: &GrayMap) -> Result<()> {
    if (p.h, p.w) != (g.h, g.w) {
        return Err(DrrnetError::ShapeMismatch(format!("prediction {}x{} vs ground truth {}x{}", p.h, p.w, g.h, g.w)));
    }
    if p.data.is_empty() {
        return Err(DrrnetError::ShapeMismatch("empty map".into()));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mae(p: &GrayMap, g: &GrayMap) -> Result<f64> {
    same_shape(p, g)?;
    Ok(mean(&p.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()))
}

const EPS: f64 = f64::EPSILON;

/// Structure measure with `alpha` weighting object-aware against
/// region-aware similarity.
pub fn s_measure(p: &GrayMap, g: &GrayMap, alpha: f64) -> Result<f64> {
    same_shape(p, g)?;
    let y = mean(&g.data);
    let score = if y == 0.0 {
        1.0 - mean(&p.data)
    } else if y == 1.0 {
        mean(&p.data)
    } else {
        (alpha * s_object(p, g) + (1.0 - alpha) * s_region(p, g)).max(0.0)
    };
    Ok(score.clamp(0.0, 1.0))
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let x = mean(values);
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - x).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + sigma + EPS)
}

fn s_object(p: &GrayMap, g: &GrayMap) -> f64 {
    let fg: Vec<f64> = p.data.iter().zip(&g.data).filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv).collect();
    let bg: Vec<f64> = p.data.iter().zip(&g.data).filter(|(_, &gv)| gv != 1.0).map(|(&pv, _)| 1.0 - pv).collect();
    let u = mean(&g.data);
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Centroid of the foreground as 1-based split coordinates `(x, y)`, with
/// half-to-even rounding.
fn centroid(g: &GrayMap) -> (usize, usize) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for y in 0..g.h {
        for x in 0..g.w {
            if g.at(y, x) != 0.0 {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return ((g.w as f64 / 2.0).round_ties_even() as usize, (g.h as f64 / 2.0).round_ties_even() as usize);
    }
    let cx = (sx / n as f64).round_ties_even() as usize;
    let cy = (sy / n as f64).round_ties_even() as usize;
    (cx + 1, cy + 1)
}

fn region_values(m: &GrayMap, y0: usize, y1: usize, x0: usize, x1: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity((y1 - y0) * (x1 - x0));
    for y in y0..y1 {
        for x in x0..x1 {
            v.push(m.at(y, x));
        }
    }
    v
}

fn ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 0.0;
    }
    let x = mean(p);
    let y = mean(g);
    let (sx, sy, sxy) = if n > 1 {
        let d = (n - 1) as f64;
        (
            p.iter().map(|v| (v - x).powi(2)).sum::<f64>() / d,
            g.iter().map(|v| (v - y).powi(2)).sum::<f64>() / d,
            p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / d,
        )
    } else {
        (0.0, 0.0, 0.0)
    };
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx + sy);
    if alpha != 0.0 {
        alpha / beta
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn s_region(p: &GrayMap, g: &GrayMap) -> f64 {
    let (x, y) = centroid(g);
    let (h, w) = (g.h, g.w);
    let x = x.min(w);
    let y = y.min(h);
    let quads = [(0, y, 0, x), (0, y, x, w), (y, h, 0, x), (y, h, x, w)];
    // area-weighted sum, divided once so a perfect match is exactly 1
    let total: f64 = quads
        .iter()
        .map(|&(y0, y1, x0, x1)| {
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            n * ssim(&region_values(p, y0, y1, x0, x1), &region_values(g, y0, y1, x0, x1))
        })
        .sum();
    total / (h * w) as f64
}

/// Mean enhanced-alignment measure on the non-binarized prediction.
pub fn e_measure(p: &GrayMap, g: &GrayMap) -> Result<f64> {
    same_shape(p, g)?;
    let n = p.data.len() as f64;
    let gm = mean(&g.data);
    if gm == 0.0 {
        return Ok(mean(&p.data.iter().map(|v| 1.0 - v).collect::<Vec<_>>()));
    }
    if gm == 1.0 {
        return Ok(mean(&p.data));
    }
    let pm = mean(&p.data);
    let mut total = 0.0;
    for (&pv, &gv) in p.data.iter().zip(&g.data) {
        let a = pv - pm;
        let b = gv - gm;
        // b is never 0 on a non-constant mask
        let align = 2.0 * a * b / (a * a + b * b);
        total += (align + 1.0).powi(2) / 4.0;
    }
    Ok(total / n)
}

/// 7x7 Gaussian with sigma 5, tiny entries zeroed, normalized to sum 1.
pub fn gaussian_kernel() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut max: f64 = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (y, x) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(x * x + y * y) / (2.0 * 25.0)).exp();
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for v in k.iter_mut().flatten() {
        if *v < EPS * max {
            *v = 0.0;
        }
        sum += *v;
    }
    for v in k.iter_mut().flatten() {
        *v /= sum;
    }
    k
}

/// Exact Euclidean distance from every pixel to the nearest foreground
/// pixel, with that pixel's index. Ties go to the smallest row-major index.
/// Foreground pixels map to themselves at distance 0.
pub fn nearest_foreground(fg: &[bool], h: usize, w: usize) -> Vec<(f64, usize)> {
    const INF: i64 = i64::MAX / 4;
    // column pass: squared vertical distance to nearest fg in the column
    let mut col = vec![INF; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if fg[y * w + x] {
                last = Some(y);
            }
            if let Some(l) = last {
                col[y * w + x] = ((y - l) as i64).pow(2);
            }
        }
        let mut next: Option<usize> = None;
        for y in (0..h).rev() {
            if fg[y * w + x] {
                next = Some(y);
            }
            if let Some(nx) = next {
                col[y * w + x] = col[y * w + x].min(((nx - y) as i64).pow(2));
            }
        }
    }
    // row pass: lower envelope of parabolas
    let mut d2 = vec![INF; h * w];
    let mut v = vec![0usize; w];
    let mut z = vec![0f64; w + 1];
    for y in 0..h {
        let f = |q: usize| col[y * w + q];
        let Some(first) = (0..w).find(|&q| f(q) < INF) else {
            continue;
        };
        let meet =
            |p: usize, q: usize| ((f(q) + (q * q) as i64) - (f(p) + (p * p) as i64)) as f64 / (2.0 * (q - p) as f64);
        let mut k = 0usize;
        v[0] = first;
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for q in first + 1..w {
            if f(q) >= INF {
                continue;
            }
            let mut s = meet(v[k], q);
            // z[0] is -inf, so this stops at k = 0
            while s <= z[k] {
                k -= 1;
                s = meet(v[k], q);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0usize;
        for q in 0..w {
            while z[k + 1] < q as f64 {
                k += 1;
            }
            let p = v[k];
            d2[y * w + q] = ((q as i64 - p as i64).pow(2)) + f(p);
        }
    }
    // resolve the index: first fg in row-major order at the exact distance
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let d = d2[y * w + x];
            if d >= INF {
                out.push((f64::INFINITY, usize::MAX));
                continue;
            }
            let r = (d as f64).sqrt().floor() as i64 + 1;
            let mut found = usize::MAX;
            'search: for dy in -r..=r {
                let yy = y as i64 + dy;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                let rem = d - dy * dy;
                if rem < 0 {
                    continue;
                }
                let dx = (rem as f64).sqrt().round() as i64;
                if dx * dx != rem {
                    continue;
                }
                for xx in [x as i64 - dx, x as i64 + dx] {
                    if xx >= 0 && xx < w as i64 && fg[yy as usize * w + xx as usize] {
                        found = yy as usize * w + xx as usize;
                        break 'search;
                    }
                }
            }
            debug_assert_ne!(found, usize::MAX);
            out.push(((d as f64).sqrt(), found));
        }
    }
    out
}

/// Weighted F-measure with `beta2` the squared precision weight.
pub fn weighted_fmeasure(p: &GrayMap, g: &GrayMap, beta2: f64) -> Result<f64> {
    same_shape(p, g)?;
    let (h, w) = (g.h, g.w);
    let fg: Vec<bool> = g.data.iter().map(|&v| v == 1.0).collect();
    if !fg.iter().any(|&f| f) {
        return Ok(0.0);
    }
    let e: Vec<f64> = p.data.iter().zip(&g.data).map(|(a, b)| (a - b).abs()).collect();
    let near = nearest_foreground(&fg, h, w);
    let et: Vec<f64> = (0..h * w).map(|i| if fg[i] { e[i] } else { e[near[i].1] }).collect();
    let k = gaussian_kernel();
    let mut ew = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut ea = 0.0;
            for (ky, row) in k.iter().enumerate() {
                let yy = y as i64 + ky as i64 - 3;
                if yy < 0 || yy >= h as i64 {
                    continue;
                }
                for (kx, &kv) in row.iter().enumerate() {
                    let xx = x as i64 + kx as i64 - 3;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    ea += kv * et[yy as usize * w + xx as usize];
                }
            }
            let min_e = if fg[i] && ea < e[i] { ea } else { e[i] };
            let b = if fg[i] { 1.0 } else { 2.0 - ((0.5f64).ln() / 5.0 * near[i].0).exp() };
            ew[i] = min_e * b;
        }
    }
    let n_fg = fg.iter().filter(|&&f| f).count() as f64;
    let ew_fg: f64 = (0..h * w).filter(|&i| fg[i]).map(|i| ew[i]).sum();
    let fp: f64 = (0..h * w).filter(|&i| !fg[i]).map(|i| ew[i]).sum();
    let tp = n_fg - ew_fg;
    let r = 1.0 - ew_fg / n_fg;
    let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let den = r + beta2 * prec;
    Ok(if den > 0.0 { (1.0 + beta2) * r * prec / den } else { 0.0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub mae: f64,
    pub s_alpha: f64,
    pub e_phi: f64,
    pub f_beta_w: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub name: String,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub per_image: Vec<ImageRecord>,
    pub aggregate: Scores,
}

pub fn score_pair(p: &GrayMap, g: &GrayMap) -> Result<Scores> {
    Ok(Scores {
        mae: mae(p, g)?,
        s_alpha: s_measure(p, g, 0.5)?,
        e_phi: e_measure(p, g)?,
        f_beta_w: weighted_fmeasure(p, g, 1.0)?,
    })
}

pub fn aggregate(records: &[ImageRecord]) -> Scores {
    let n = records.len() as f64;
    let sum = |f: fn(&Scores) -> f64| records.iter().map(|r| f(&r.scores)).sum::<f64>() / n;
    Scores { mae: sum(|s| s.mae), s_alpha: sum(|s| s.s_alpha), e_phi: sum(|s| s.e_phi), f_beta_w: sum(|s| s.f_beta_w) }
}

pub(crate) const IMAGE_EXTS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

/// Image files of `dir` keyed by stem.
pub(crate) fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| DrrnetError::io(dir, e))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry.map_err(|e| DrrnetError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase());
        if !ext.is_some_and(|e| IMAGE_EXTS.contains(&e.as_str())) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Stems present in both maps, in sorted order; any stem present in only one
/// is an error.
pub(crate) fn pair_stems(
    a: &BTreeMap<String, PathBuf>,
    b: &BTreeMap<String, PathBuf>,
    a_label: &str,
    b_label: &str,
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if let Some(s) = a.keys().find(|k| !b.contains_key(*k)) {
        return Err(DrrnetError::UnpairedFile(format!("{s} has no match in {b_label}")));
    }
    if let Some(s) = b.keys().find(|k| !a.contains_key(*k)) {
        return Err(DrrnetError::UnpairedFile(format!("{s} has no match in {a_label}")));
    }
    if a.is_empty() {
        return Err(DrrnetError::UnpairedFile(format!("no images in {a_label} or {b_label}")));
    }
    Ok(a.iter().map(|(k, pa)| (k.clone(), pa.clone(), b[k].clone())).collect())
}

/// Reads an 8-bit grayscale image scaled to `[0, 1]`.
pub fn read_gray(path: &Path) -> Result<GrayMap> {
    let img = image::open(path)
        .map_err(|e| DrrnetError::UnreadableImage { path: path.to_path_buf(), reason: e.to_string() })?;
    let l = img.to_luma8();
    let (w, h) = l.dimensions();
    Ok(GrayMap { h: h as usize, w: w as usize, data: l.as_raw().iter().map(|&v| v as f64 / 255.0).collect() })
}

/// Scores every prediction in `pred_dir` against the same-stem mask in
/// `gt_dir`, in sorted stem order.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<EvalRecord> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let pairs = pair_stems(&preds, &gts, "predictions", "ground truth")?;
    let scored = map_range(pairs.len(), |i| -> Result<ImageRecord> {
        let (name, pp, gp) = &pairs[i];
        let p = read_gray(pp)?;
        let g = read_gray(gp)?.binarized();
        Ok(ImageRecord { name: name.clone(), scores: score_pair(&p, &g)? })
    });
    let per_image = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&per_image);
    Ok(EvalRecord { per_image, aggregate })
}

pub const CSV_HEADER: [&str; 5] = ["name", "mae", "s_alpha", "e_phi", "f_beta_w"];

impl EvalRecord {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        wr.write_record(CSV_HEADER).map_err(|e| csv_err(path, e))?;
        let row = |name: &str, s: &Scores| {
            vec![
                name.to_string(),
                format!("{:.6}", s.mae),
                format!("{:.6}", s.s_alpha),
                format!("{:.6}", s.e_phi),
                format!("{:.6}", s.f_beta_w),
            ]
        };
        for r in &self.per_image {
            wr.write_record(row(&r.name, &r.scores)).map_err(|e| csv_err(path, e))?;
        }
        wr.write_record(row("AGGREGATE", &self.aggregate)).map_err(|e| csv_err(path, e))?;
        wr.flush().map_err(|e| DrrnetError::io(path, e))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> DrrnetError {
    DrrnetError::io(path, std::io::Error::other(e))
}

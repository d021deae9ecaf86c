//! Independent scalar-loop oracles shared by the integration tests. Nothing
//! here calls into the library's metric or loss code.

#![allow(dead_code)]

use rand::Rng;

pub const EPS: f64 = f64::EPSILON;

/// Row-major `h x w` map.
#[derive(Clone, Debug)]
pub struct Map {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }
}

/// Random binary mask made by thresholding box-blurred noise, guaranteed
/// to contain both classes.
pub fn random_mask<R: Rng>(rng: &mut R, h: usize, w: usize) -> Map {
    loop {
        let noise: Vec<f64> = (0..h * w).map(|_| rng.gen::<f64>()).collect();
        let mut v = vec![0.0; h * w];
        let t = rng.gen_range(0.4..0.6);
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                let mut n = 0.0;
                for yy in y.saturating_sub(2)..(y + 3).min(h) {
                    for xx in x.saturating_sub(2)..(x + 3).min(w) {
                        s += noise[yy * w + xx];
                        n += 1.0;
                    }
                }
                v[y * w + x] = if s / n > t { 1.0 } else { 0.0 };
            }
        }
        let fg = v.iter().filter(|&&b| b == 1.0).count();
        if fg > 1 && fg < h * w - 1 {
            return Map { h, w, v };
        }
    }
}

pub fn random_pred<R: Rng>(rng: &mut R, g: &Map) -> Map {
    let v = g.v.iter().map(|&b| (0.6 * b + 0.4 * rng.gen::<f64>()).clamp(0.0, 1.0)).collect();
    Map { h: g.h, w: g.w, v }
}

// ---------------------------------------------------------------- S-measure

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn obj(vals: &[f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    let m = mean(vals);
    let sd = if vals.len() > 1 {
        (vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    2.0 * m / (m * m + 1.0 + sd + EPS)
}

fn ssim_ref(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    if p.is_empty() {
        return 0.0;
    }
    let (x, y) = (mean(p), mean(g));
    let d = (n - 1.0).max(1.0);
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sxy = 0.0;
    for i in 0..p.len() {
        sx += (p[i] - x) * (p[i] - x);
        sy += (g[i] - y) * (g[i] - y);
        sxy += (p[i] - x) * (g[i] - y);
    }
    let (sx, sy, sxy) = (sx / d, sy / d, sxy / d);
    let a = 4.0 * x * y * sxy;
    let b = (x * x + y * y) * (sx + sy);
    if a != 0.0 {
        a / (b + EPS)
    } else if b == 0.0 {
        1.0
    } else {
        0.0
    }
}

pub fn s_measure(p: &Map, g: &Map) -> f64 {
    let gm = mean(&g.v);
    if gm == 0.0 {
        return 1.0 - mean(&p.v);
    }
    if gm == 1.0 {
        return mean(&p.v);
    }
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    let (mut sy, mut sx) = (0.0, 0.0);
    for y in 0..g.h {
        for x in 0..g.w {
            if g.at(y, x) == 1.0 {
                fg.push(p.at(y, x));
                sy += y as f64;
                sx += x as f64;
            } else {
                bg.push(1.0 - p.at(y, x));
            }
        }
    }
    let object = gm * obj(&fg) + (1.0 - gm) * obj(&bg);
    let n = fg.len() as f64;
    let cy = ((sy / n).round_ties_even() as usize + 1).min(g.h);
    let cx = ((sx / n).round_ties_even() as usize + 1).min(g.w);
    let area = (g.h * g.w) as f64;
    let quads = [(0, cy, 0, cx), (0, cy, cx, g.w), (cy, g.h, 0, cx), (cy, g.h, cx, g.w)];
    let mut region = 0.0;
    for (y0, y1, x0, x1) in quads {
        let mut pp = Vec::new();
        let mut gg = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                pp.push(p.at(y, x));
                gg.push(g.at(y, x));
            }
        }
        let wgt = ((y1 - y0) * (x1 - x0)) as f64 / area;
        region += wgt * ssim_ref(&pp, &gg);
    }
    (0.5 * object + 0.5 * region).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------- E-measure

pub fn e_measure(p: &Map, g: &Map) -> f64 {
    let gm = mean(&g.v);
    if gm == 0.0 {
        return p.v.iter().map(|v| 1.0 - v).sum::<f64>() / p.v.len() as f64;
    }
    if gm == 1.0 {
        return mean(&p.v);
    }
    let pm = mean(&p.v);
    let mut s = 0.0;
    for i in 0..p.v.len() {
        let a = p.v[i] - pm;
        let b = g.v[i] - gm;
        let al = 2.0 * a * b / (a * a + b * b + EPS);
        s += (al + 1.0) * (al + 1.0) / 4.0;
    }
    s / p.v.len() as f64
}

// ----------------------------------------------------- weighted F-measure

pub fn gaussian7() -> [[f64; 7]; 7] {
    let mut k = [[0.0; 7]; 7];
    let mut sum = 0.0;
    for (i, row) in k.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 3.0, j as f64 - 3.0);
            *v = (-(dy * dy + dx * dx) / 50.0).exp();
            sum += *v;
        }
    }
    for row in k.iter_mut() {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    k
}

/// Brute force: every pixel scans every foreground pixel; ties go to the
/// first in row-major order.
pub fn weighted_f(p: &Map, g: &Map) -> f64 {
    let (h, w) = (g.h, g.w);
    let fg: Vec<usize> = (0..h * w).filter(|&i| g.v[i] == 1.0).collect();
    if fg.is_empty() {
        return 0.0;
    }
    let e: Vec<f64> = (0..h * w).map(|i| (p.v[i] - g.v[i]).abs()).collect();
    let mut dist = vec![0.0; h * w];
    let mut et = e.clone();
    for i in 0..h * w {
        if g.v[i] == 1.0 {
            continue;
        }
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        let mut best = (f64::INFINITY, 0);
        for &j in &fg {
            let (fy, fx) = ((j / w) as f64, (j % w) as f64);
            let d = (fy - y) * (fy - y) + (fx - x) * (fx - x);
            if d < best.0 {
                best = (d, j);
            }
        }
        dist[i] = best.0.sqrt();
        et[i] = e[best.1];
    }
    let k = gaussian7();
    let mut ew = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut ea = 0.0;
            for ky in 0..7 {
                for kx in 0..7 {
                    let (yy, xx) = (y as i64 + ky as i64 - 3, x as i64 + kx as i64 - 3);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        ea += k[ky][kx] * et[yy as usize * w + xx as usize];
                    }
                }
            }
            let i = y * w + x;
            let is_fg = g.v[i] == 1.0;
            let m = if is_fg && ea < e[i] { ea } else { e[i] };
            let b = if is_fg { 1.0 } else { 2.0 - (0.5f64.ln() / 5.0 * dist[i]).exp() };
            ew[i] = m * b;
        }
    }
    let nfg = fg.len() as f64;
    let ew_fg: f64 = fg.iter().map(|&i| ew[i]).sum();
    let fp: f64 = (0..h * w).filter(|&i| g.v[i] != 1.0).map(|i| ew[i]).sum();
    let tp = nfg - ew_fg;
    let r = 1.0 - ew_fg / nfg;
    let prec = tp / (tp + fp + EPS);
    2.0 * r * prec / (r + prec + EPS)
}

// ---------------------------------------------------------------- losses

/// Half-pixel bilinear resize of one plane, clamped at the borders.
pub fn bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let tap = |o: usize, n: usize, on: usize| {
        let s = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let f = if i0 == n - 1 { 0.0 } else { s - i0 as f64 };
        (i0, i1, f)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = tap(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = tap(ox, w, ow);
            let top = (1.0 - fx) * src[y0 * w + x0] + fx * src[y0 * w + x1];
            let bot = (1.0 - fx) * src[y1 * w + x0] + fx * src[y1 * w + x1];
            out[oy * ow + ox] = (1.0 - fy) * top + fy * bot;
        }
    }
    out
}

/// `5 |mean(G over the clipped 31x31 window) - G|`.
pub fn boundary_weight(g: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            let mut n = 0.0;
            for yy in y.saturating_sub(15)..(y + 16).min(h) {
                for xx in x.saturating_sub(15)..(x + 16).min(w) {
                    s += g[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = 5.0 * (s / n - g[y * w + x]).abs();
        }
    }
    out
}

/// Weighted BCE plus weighted IoU of one image.
pub fn image_loss(logits: &[f64], g: &[f64], wt: &[f64]) -> f64 {
    let (mut bn, mut bd, mut inter, mut union) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..g.len() {
        let x = logits[i];
        let p = 1.0 / (1.0 + (-x).exp());
        let bce = -(g[i] * p.ln() + (1.0 - g[i]) * (1.0 - p).ln());
        let a = 1.0 + wt[i];
        bn += a * bce;
        bd += a;
        inter += a * g[i] * p;
        union += a * (g[i] + p - g[i] * p);
    }
    let iou = if union == 0.0 { 0.0 } else { 1.0 - inter / union };
    bn / bd + iou
}

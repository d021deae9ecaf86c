"""Regenerates the golden evaluation fixture.

Writes pred/*.png, gt/*.png and expected.csv. The scores come from a
straightforward NumPy implementation of the four metrics, written
independently of the Rust code, with brute-force nearest-foreground search
(ties go to the smallest row-major index).
"""
import csv
from pathlib import Path

import numpy as np
from PIL import Image

HERE = Path(__file__).parent


def s_object(x, mask):
    v = x[mask]
    mu = v.mean()
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    return 2 * mu / (mu * mu + 1 + sd + np.finfo(float).eps)


def ssim(p, g):
    n = p.size
    if n == 0:
        return 0.0
    if n == 1:
        return 1.0
    x, y = p.mean(), g.mean()
    sx = ((p - x) ** 2).sum() / (n - 1)
    sy = ((g - y) ** 2).sum() / (n - 1)
    sxy = ((p - x) * (g - y)).sum() / (n - 1)
    a = 4 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return a / b
    return 1.0 if b == 0 else 0.0


def s_measure(p, g, alpha=0.5):
    gm = g.mean()
    if gm == 0:
        return 1 - p.mean()
    if gm == 1:
        return p.mean()
    fg = g == 1
    obj = gm * s_object(p, fg) + (1 - gm) * s_object(1 - p, ~fg)
    h, w = g.shape
    ys, xs = np.nonzero(fg)
    cy = int(np.round(ys.mean())) + 1
    cx = int(np.round(xs.mean())) + 1
    cy, cx = min(cy, h), min(cx, w)
    reg = 0.0
    for y0, y1, x0, x1 in [(0, cy, 0, cx), (0, cy, cx, w), (cy, h, 0, cx), (cy, h, cx, w)]:
        pp, gg = p[y0:y1, x0:x1], g[y0:y1, x0:x1]
        if pp.size:
            reg += pp.size * ssim(pp.ravel(), gg.ravel())
    reg /= h * w
    return min(max(alpha * obj + (1 - alpha) * reg, 0.0), 1.0)


def e_measure(p, g):
    gm = g.mean()
    if gm == 0:
        return (1 - p).mean()
    if gm == 1:
        return p.mean()
    a = p - p.mean()
    b = g - gm
    align = 2 * a * b / (a * a + b * b)
    return (((align + 1) ** 2) / 4).sum() / p.size


def gauss7():
    r = np.arange(-3, 4)
    k = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 25.0))
    k[k < np.finfo(float).eps * k.max()] = 0
    return k / k.sum()


def wfm(p, g, beta2=1.0):
    fg = g == 1
    if not fg.any():
        return 0.0
    h, w = g.shape
    e = np.abs(p - g)
    fy, fx = np.nonzero(fg)
    dist = np.zeros((h, w))
    et = e.copy()
    for y in range(h):
        for x in range(w):
            if fg[y, x]:
                continue
            d2 = (fy - y) ** 2 + (fx - x) ** 2
            j = int(np.argmin(d2))  # first minimum = smallest row-major index
            dist[y, x] = np.sqrt(d2[j])
            et[y, x] = e[fy[j], fx[j]]
    k = gauss7()
    pad = np.pad(et, 3)
    ea = np.zeros_like(et)
    for y in range(h):
        for x in range(w):
            ea[y, x] = (pad[y:y + 7, x:x + 7] * k).sum()
    min_e = np.where(fg & (ea < e), ea, e)
    b = np.where(fg, 1.0, 2 - np.exp(np.log(0.5) / 5 * dist))
    ew = min_e * b
    tp = fg.sum() - ew[fg].sum()
    fp = ew[~fg].sum()
    r = 1 - ew[fg].mean()
    prec = tp / (tp + fp) if tp + fp > 0 else 0.0
    den = r + beta2 * prec
    return (1 + beta2) * r * prec / den if den > 0 else 0.0


def main():
    rng = np.random.default_rng(2024)
    shapes = [(40, 52), (33, 47), (64, 64), (24, 30), (28, 20)]
    (HERE / "pred").mkdir(exist_ok=True)
    (HERE / "gt").mkdir(exist_ok=True)
    rows = []
    for i, (h, w) in enumerate(shapes):
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        ry, rx = rng.uniform(0.15, 0.3) * h, rng.uniform(0.15, 0.3) * w
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        gt8 = np.where(inside, 255, 0).astype(np.uint8)
        if i == 3:
            gt8[:] = 0
        if i == 4:
            gt8[:] = 255
        soft = 1 / (1 + np.exp(-(1 - ((yy - cy - 2) / ry) ** 2 - ((xx - cx + 1) / rx) ** 2) * 4))
        noisy = np.clip(soft + rng.normal(0, 0.08, (h, w)), 0, 1)
        pred8 = np.round(noisy * 255).astype(np.uint8)
        name = f"img_{i}"
        Image.fromarray(pred8).save(HERE / "pred" / f"{name}.png")
        Image.fromarray(gt8).save(HERE / "gt" / f"{name}.png")
        p = pred8.astype(float) / 255
        g = (gt8 >= 128).astype(float)
        rows.append([name, np.abs(p - g).mean(), s_measure(p, g), e_measure(p, g), wfm(p, g)])
    agg = ["AGGREGATE"] + [float(np.mean([r[k] for r in rows])) for k in range(1, 5)]
    with open(HERE / "expected.csv", "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["name", "mae", "s_alpha", "e_phi", "f_beta_w"])
        for r in rows + [agg]:
            wr.writerow([r[0]] + [f"{v:.12f}" for v in r[1:]])


if __name__ == "__main__":
    main()

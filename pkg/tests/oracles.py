"""Straight-loop reference implementations of the no-reference metrics and
the CLAHE tile mapping.

Written independently of dgnet.metrics (plain Python loops, scipy for Sobel,
per-pixel Lab with the same pinned constants) so the two can be compared
value for value.
"""
import math

import numpy as np
from scipy import ndimage


def uicm_ref(rgb255):
    r, g, b = rgb255
    rg = sorted((r - g).ravel().tolist())
    yb = sorted(((r + g) / 2 - b).ravel().tolist())
    k = len(rg)
    lo, hi = math.ceil(0.1 * k), math.floor(0.1 * k)

    def tmean(v):
        kept = v[lo:k - hi]
        return sum(kept) / len(kept)

    mrg, myb = tmean(rg), tmean(yb)
    vrg = sum((v - mrg) ** 2 for v in rg) / k
    vyb = sum((v - myb) ** 2 for v in yb) / k
    return -0.0268 * math.sqrt(mrg ** 2 + myb ** 2) + 0.1586 * math.sqrt(vrg + vyb)


def eme_ref(x, block=8):
    h, w = x.shape
    k1, k2 = h // block, w // block
    acc = 0.0
    for i in range(k1):
        for j in range(k2):
            blk = x[i * block:(i + 1) * block, j * block:(j + 1) * block]
            mx, mn = blk.max(), blk.min()
            if mn > 0:
                acc += math.log(mx / mn)
    return 2.0 / (k1 * k2) * acc


def uism_ref(rgb255):
    total = 0.0
    for lam, ch in zip((0.299, 0.587, 0.114), rgb255):
        gx = ndimage.sobel(ch, axis=1, mode="reflect")
        gy = ndimage.sobel(ch, axis=0, mode="reflect")
        mag = np.sqrt(gx ** 2 + gy ** 2)
        if mag.max() > 0:
            mag = mag / mag.max() * 255.0
        total += lam * eme_ref(mag * ch)
    return total


def uiconm_ref(rgb255, block=8):
    _, h, w = rgb255.shape
    k1, k2 = h // block, w // block
    acc = 0.0
    for i in range(k1):
        for j in range(k2):
            blk = rgb255[:, i * block:(i + 1) * block, j * block:(j + 1) * block]
            mx, mn = blk.max(), blk.min()
            top, bot = mx - mn, mx + mn
            if top > 0 and bot > 0:
                r = top / bot
                acc += r * math.log(r)
    return -acc / (k1 * k2)


def uiqm_ref(chw):
    rgb255 = chw * 255.0
    return 0.0282 * uicm_ref(rgb255) + 0.2953 * uism_ref(rgb255) + 3.5753 * uiconm_ref(rgb255)


M = [[0.412453, 0.357580, 0.180423],
     [0.212671, 0.715160, 0.072169],
     [0.019334, 0.119193, 0.950227]]


def lab_ref(r, g, b):
    """One sRGB pixel -> (L, a, b), white = matrix row sums."""
    def lin(c):
        return ((c + 0.055) / 1.055) ** 2.4 if c > 0.04045 else c / 12.92

    rgb = [lin(r), lin(g), lin(b)]
    f = []
    for row in M:
        t = sum(m * c for m, c in zip(row, rgb)) / sum(row)
        f.append(t ** (1 / 3) if t > (6 / 29) ** 3 else t / (3 * (6 / 29) ** 2) + 4 / 29)
    return 116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])


def uciqe_ref(chw):
    _, h, w = chw.shape
    lab = np.array([[lab_ref(*chw[:, i, j]) for j in range(w)] for i in range(h)])
    lum = lab[..., 0] / 100.0
    chroma = np.sqrt(lab[..., 1] ** 2 + lab[..., 2] ** 2) / 255.0
    sigma_c = float(np.sqrt(np.mean((chroma - chroma.mean()) ** 2)))
    flat = sorted(lum.ravel().tolist())
    n = len(flat)
    con_l = flat[int(0.99 * n)] - flat[int(0.01 * n)]
    sats = [c / l if l > 0 else 0.0 for c, l in zip(chroma.ravel(), lum.ravel())]
    return 0.4680 * sigma_c + 0.2745 * con_l + 0.2576 * (sum(sats) / n)


def synthetic_images():
    """Fixed images for the metric oracle comparison."""
    rng = np.random.default_rng(2024)
    yy, xx = np.mgrid[0:40, 0:48] / 48.0
    gradient = np.stack([xx, yy, 0.5 * (xx + yy)])
    noise = rng.random((3, 32, 32))
    tinted = np.clip(np.stack([0.3 * noise[0], 0.8 * noise[1], noise[2]]), 0, 1)
    checker = ((np.indices((24, 40)).sum(axis=0) // 4) % 2).astype(float)
    checker = np.stack([0.2 + 0.6 * checker, 0.5 * np.ones_like(checker), 0.8 - 0.5 * checker])
    return {"gradient": gradient, "noise": noise, "tinted": tinted, "checker": checker}


def brute_force_mapping(values, bins, clip_limit):
    """Loop oracle of clip + uniform redistribution + mid-point CDF for one tile."""
    n = values.size
    hist = [0.0] * bins
    for v in values.ravel():
        hist[min(int(v * bins), bins - 1)] += 1
    limit = clip_limit * n / bins
    excess = 0.0
    for k in range(bins):
        if hist[k] > limit:
            excess += hist[k] - limit
            hist[k] = limit
    hist = [h + excess / bins for h in hist]
    occupied = sum(1 for v in set(min(int(v * bins), bins - 1) for v in values.ravel()))
    lut, run = [], 0.0
    for k in range(bins):
        prev = run
        run += hist[k]
        lut.append((prev + run) / (2 * n))
    return lut, occupied == 1

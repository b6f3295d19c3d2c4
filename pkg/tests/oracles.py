"""Independent reference implementations used to check the library.

Everything here is written with plain loops or closed forms and shares no
code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv_loops(x, k, stride=1, padding=0):
    """Direct cross-correlation of C×H×W ``x`` with Co×Ci×kh×kw ``k``."""
    c, h, w = x.shape
    co, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding))
    xp[:, padding : padding + h, padding : padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((co, ho, wo))
    for o in range(co):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ci in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += xp[ci, i * stride + di, j * stride + dj] * k[o, ci, di, dj]
                out[o, i, j] = acc
    return out


def bilinear_gather(frame, flow):
    """Per-pixel bilinear sampling at (y + dy, x + dx) with edge clamping."""
    c, h, w = frame.shape
    out = np.zeros_like(frame)
    for y in range(h):
        for x in range(w):
            sy = min(max(y + flow[0, y, x], 0.0), h - 1.0)
            sx = min(max(x + flow[1, y, x], 0.0), w - 1.0)
            y0, x0 = int(math.floor(sy)), int(math.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for ch in range(c):
                top = (1 - fx) * frame[ch, y0, x0] + fx * frame[ch, y0, x1]
                bot = (1 - fx) * frame[ch, y1, x0] + fx * frame[ch, y1, x1]
                out[ch, y, x] = (1 - fy) * top + fy * bot
    return out


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def binary_entropy(p):
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


# ---------------------------------------------------------------------------
# MS-SSIM, scalar formulation
# ---------------------------------------------------------------------------

_EXPONENTS = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333]


def _window(size=11, sigma=1.5):
    half = size // 2
    g = [math.exp(-((i - half) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    return [[g[i] * g[j] for j in range(size)] for i in range(size)]


def _pool(img):
    h, w = len(img) // 2, len(img[0]) // 2
    return [[(img[2 * i][2 * j] + img[2 * i][2 * j + 1] + img[2 * i + 1][2 * j] + img[2 * i + 1][2 * j + 1]) / 4
             for j in range(w)] for i in range(h)]


def _ssim_terms(a, b, win):
    c1, c2 = 0.01**2, 0.03**2
    n = len(win)
    h, w = len(a), len(a[0])
    cs_sum = l_cs_sum = 0.0
    count = 0
    for y in range(h - n + 1):
        for x in range(w - n + 1):
            ma = mb = saa = sbb = sab = 0.0
            for i in range(n):
                ra, rb, rw = a[y + i], b[y + i], win[i]
                for j in range(n):
                    wt = rw[j]
                    va, vb = ra[x + j], rb[x + j]
                    ma += wt * va
                    mb += wt * vb
                    saa += wt * va * va
                    sbb += wt * vb * vb
                    sab += wt * va * vb
            va_, vb_, cov = saa - ma * ma, sbb - mb * mb, sab - ma * mb
            cs = (2 * cov + c2) / (va_ + vb_ + c2)
            lum = (2 * ma * mb + c1) / (ma * ma + mb * mb + c1)
            cs_sum += cs
            l_cs_sum += lum * cs
            count += 1
    return cs_sum / count, l_cs_sum / count


def ms_ssim_direct(a, b, floor=1e-6):
    """MS-SSIM of two 2-D images with scale count reduced to fit the window."""
    a = [list(map(float, row)) for row in np.asarray(a)]
    b = [list(map(float, row)) for row in np.asarray(b)]
    size = min(len(a), len(a[0]))
    scales = 0
    while scales < 5 and size >= 11:
        scales += 1
        size //= 2
    e = _EXPONENTS[:scales]
    tot = sum(e)
    e = [v / tot for v in e]
    win = _window()
    value = 1.0
    for s in range(scales):
        cs, lcs = _ssim_terms(a, b, win)
        term = lcs if s == scales - 1 else cs
        value *= max(term, floor) ** e[s]
        if s < scales - 1:
            a, b = _pool(a), _pool(b)
    return value

"""Procedural video clips for tests and toy-scale training.

All generators return T×3×H×W YCbCr arrays (Y in [0, 1], chroma in
[-0.5, 0.5]) and are deterministic given the generator.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter, shift as nd_shift

from .metrics import rgb_to_ycbcr


def smooth_texture(rng: np.random.Generator, h: int, w: int, sigma: float = 3.0) -> np.ndarray:
    """3×H×W RGB texture in [0, 1] made of blurred periodic noise."""
    noise = rng.random((3, h, w))
    tex = np.stack([gaussian_filter(c, sigma, mode="wrap") for c in noise])
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-9)


def translating_clip(rng: np.random.Generator, frames: int, h: int, w: int, velocity=None,
                     noise: float = 0.0, sigma: float = 3.0) -> np.ndarray:
    """A periodic texture sliding with constant (possibly sub-pixel) velocity."""
    if velocity is None:
        velocity = rng.uniform(-1.5, 1.5, size=2)
    vy, vx = velocity
    pad = 2
    tex = smooth_texture(rng, pad * h, pad * w, sigma)
    out = np.empty((frames, 3, h, w))
    for t in range(frames):
        moved = np.stack([nd_shift(c, (t * vy, t * vx), order=1, mode="grid-wrap") for c in tex])
        rgb = moved[:, :h, :w]
        if noise:
            rgb = np.clip(rgb + rng.normal(0.0, noise, rgb.shape), 0.0, 1.0)
        out[t] = rgb_to_ycbcr(rgb)
    return out


def integer_shift_pair(rng: np.random.Generator, h: int, w: int, shift=(0, 2), sigma: float = 2.0):
    """(prev, target) with target(y, x) = prev(y + dy, x + dx), periodic texture."""
    dy, dx = shift
    tex = rgb_to_ycbcr(smooth_texture(rng, h, w, sigma))
    target = np.roll(tex, (-dy, -dx), axis=(1, 2))
    return tex, target


def static_clip(rng: np.random.Generator, frames: int, h: int, w: int, sigma: float = 3.0) -> np.ndarray:
    frame = rgb_to_ycbcr(smooth_texture(rng, h, w, sigma))
    return np.repeat(frame[None], frames, axis=0)


def hard_cut_clip(rng: np.random.Generator, frames: int, h: int, w: int, cut: int) -> np.ndarray:
    """Noise frames switching at index ``cut`` from a dark to a bright
    palette, so the luma jump (about 0.5) is far above any cut threshold."""
    a = rgb_to_ycbcr(0.4 * rng.random((3, h, w)))
    b = rgb_to_ycbcr(0.6 + 0.4 * rng.random((3, h, w)))
    return np.stack([a if t < cut else b for t in range(frames)])

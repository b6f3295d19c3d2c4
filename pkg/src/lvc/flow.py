"""Inverse optical flow warping and the learnable flow estimator."""

from __future__ import annotations

import colorsys
import re

import numpy as np

from . import tensor as T
from .nn import Conv, Module
from .tensor import DimensionError, Tensor


def _bilinear_setup(flow: np.ndarray, h: int, w: int):
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sy_raw = gy + flow[..., 0, :, :]
    sx_raw = gx + flow[..., 1, :, :]
    sy = np.clip(sy_raw, 0.0, h - 1)
    sx = np.clip(sx_raw, 0.0, w - 1)
    y0 = np.minimum(np.floor(sy), max(h - 2, 0)).astype(np.intp)
    x0 = np.minimum(np.floor(sx), max(w - 2, 0)).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = sy - y0 if h > 1 else np.zeros_like(sy)
    wx = sx - x0 if w > 1 else np.zeros_like(sx)
    iny = (sy_raw > 0) & (sy_raw < h - 1)
    inx = (sx_raw > 0) & (sx_raw < w - 1)
    return y0, y1, x0, x1, wy, wx, iny, inx


def warp(frame, flow) -> Tensor:
    """Sample ``frame`` at (h + flow[0], w + flow[1]) with bilinear
    interpolation and clamp-to-edge borders.

    ``frame`` is C×H×W (or N×C×H×W) and ``flow`` is 2×H×W (or N×2×H×W);
    flow channel 0 is the vertical displacement in pixels, channel 1 the
    horizontal one.
    """
    frame, flow = T.as_tensor(frame), T.as_tensor(flow)
    batched = frame.ndim == 4
    if frame.ndim not in (3, 4) or flow.ndim != frame.ndim:
        raise DimensionError(f"warp: frame {frame.shape} and flow {flow.shape} ranks differ")
    if flow.shape[-3] != 2 or flow.shape[-2:] != frame.shape[-2:] or (batched and flow.shape[0] != frame.shape[0]):
        raise DimensionError(f"warp: flow {flow.shape} does not match frame {frame.shape}")
    x = frame.data if batched else frame.data[None]
    f = flow.data if batched else flow.data[None]
    n, c, h, w = x.shape
    y0, y1, x0, x1, wy, wx, iny, inx = _bilinear_setup(f, h, w)
    bidx = np.arange(n)[:, None, None, None]
    cidx = np.arange(c)[None, :, None, None]

    def gather(yy, xx):
        return x[bidx, cidx, yy[:, None], xx[:, None]]

    a, b = gather(y0, x0), gather(y0, x1)
    cc, d = gather(y1, x0), gather(y1, x1)
    wy4, wx4 = wy[:, None], wx[:, None]
    top = (1.0 - wx4) * a + wx4 * b
    bot = (1.0 - wx4) * cc + wx4 * d
    out = (1.0 - wy4) * top + wy4 * bot

    def bw(g):
        g4 = g if batched else g[None]
        gframe = gflow = None
        if frame.requires_grad:
            size = n * c * h * w
            base = (np.arange(n)[:, None, None, None] * c + np.arange(c)[None, :, None, None]) * (h * w)
            acc = np.zeros(size)
            for yy, xx, wgt in (
                (y0, x0, (1.0 - wy) * (1.0 - wx)),
                (y0, x1, (1.0 - wy) * wx),
                (y1, x0, wy * (1.0 - wx)),
                (y1, x1, wy * wx),
            ):
                idx = base + (yy * w + xx)[:, None]
                acc += np.bincount(idx.ravel(), weights=(g4 * wgt[:, None]).ravel(), minlength=size)
            gframe = acc.reshape(n, c, h, w)
            if not batched:
                gframe = gframe[0]
        if flow.requires_grad:
            dy = ((bot - top) * g4).sum(axis=1) * iny
            dx = (((1.0 - wy4) * (b - a) + wy4 * (d - cc)) * g4).sum(axis=1) * inx
            gflow = np.stack([dy, dx], axis=1)
            if not batched:
                gflow = gflow[0]
        return gframe, gflow

    return T.make(out if batched else out[0], (frame, flow), bw, "warp")


class FlowEstimator(Module):
    """Coarse-to-fine flow network over a 3-level average-pool pyramid.

    Each level sees (prev warped by the upsampled coarser flow, target,
    that flow) and predicts a residual flow with two convolutions.
    """

    levels = 3

    def __init__(self, rng: np.random.Generator, width: int = 16, in_channels: int = 3):
        self.convs = []
        for level in range(self.levels):
            cin = 2 * in_channels + (0 if level == 0 else 2)
            self.convs.append(Conv(cin, width, rng))
            self.convs.append(Conv(width, 2, rng))

    @property
    def factor(self) -> int:
        return 2 ** (self.levels - 1)

    def __call__(self, prev: Tensor, target: Tensor) -> Tensor:
        prev, target = T.as_tensor(prev), T.as_tensor(target)
        if prev.shape != target.shape:
            raise DimensionError(f"estimate_flow: {prev.shape} vs {target.shape}")
        h, w = prev.shape[-2:]
        if h % self.factor or w % self.factor:
            raise DimensionError(f"frame size {h}x{w} not divisible by {self.factor}")
        pyramid = [(prev, target)]
        for _ in range(self.levels - 1):
            p, t = pyramid[-1]
            pyramid.append((T.downsample2(p), T.downsample2(t)))
        flow = None
        for level, (p, t) in enumerate(reversed(pyramid)):
            if flow is None:
                feats = T.concat([p, t], axis=-3)
            else:
                flow = T.upsample2(flow) * 2.0
                feats = T.concat([warp(p, flow), t, flow], axis=-3)
            hidden = T.leaky_relu(self.convs[2 * level](feats))
            delta = self.convs[2 * level + 1](hidden)
            flow = delta if flow is None else flow + delta
        return flow


def estimate_flow(estimator: FlowEstimator, prev, target) -> Tensor:
    return estimator(prev, target)


# ---------------------------------------------------------------------------
# debug dumps
# ---------------------------------------------------------------------------


def flow_to_csv(flow: np.ndarray, path) -> None:
    """One row per pixel: y, x, dy, dx."""
    flow = np.asarray(flow)
    h, w = flow.shape[-2:]
    with open(path, "w") as fh:
        fh.write("y,x,dy,dx\n")
        for y in range(h):
            for x in range(w):
                fh.write(f"{y},{x},{flow[0, y, x]:.6g},{flow[1, y, x]:.6g}\n")


def flow_to_rgb(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Colour-wheel rendering: hue = direction, saturation = magnitude."""
    flow = np.asarray(flow)
    dy, dx = flow[0], flow[1]
    mag = np.hypot(dy, dx)
    if max_mag is None:
        max_mag = max(float(mag.max()), 1e-9)
    ang = (np.arctan2(-dy, -dx) / np.pi + 1.0) / 2.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    rgb = np.empty(flow.shape[1:] + (3,))
    for idx in np.ndindex(*flow.shape[1:]):
        rgb[idx] = colorsys.hsv_to_rgb(ang[idx], sat[idx], 1.0)
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an H×W×3 float image in [0, 1] as binary PPM (P6)."""
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    match = _PPM_HEADER.match(data)
    if match is None:
        raise ValueError("not a P6 PPM")
    w, h = int(match.group(1)), int(match.group(2))
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=match.end())
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0

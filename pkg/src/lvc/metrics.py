"""Colour conversion, MS-SSIM, Charbonnier loss and bit accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

# BT.601 full range
RGB_TO_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.299 / 1.772, -0.587 / 1.772, 0.5],
    [0.5, -0.587 / 1.402, -0.114 / 1.402],
])
YCBCR_TO_RGB = np.linalg.inv(RGB_TO_YCBCR)

CHANNEL_WEIGHTS = np.array([6.0, 1.0, 1.0]) / 8.0
MS_SSIM_EXPONENTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
# mean contrast-structure terms below this are clamped before the power
TERM_FLOOR = 1e-6


def rgb_to_ycbcr(rgb: np.ndarray) -> np.ndarray:
    """3×H×W RGB in [0,1] -> Y in [0,1], Cb/Cr in [-0.5, 0.5]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    out = np.tensordot(RGB_TO_YCBCR, rgb, axes=([1], [-3]))
    out = np.moveaxis(out, 0, -3)
    out[..., 0, :, :] = np.clip(out[..., 0, :, :], 0.0, 1.0)
    out[..., 1:, :, :] = np.clip(out[..., 1:, :, :], -0.5, 0.5)
    return out


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    ycc = np.asarray(ycc, dtype=np.float64)
    out = np.moveaxis(np.tensordot(YCBCR_TO_RGB, ycc, axes=([1], [-3])), 0, -3)
    return np.clip(out, 0.0, 1.0)


def gaussian_taps(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


_ROW = gaussian_taps()[None, None, None, :]
_COL = gaussian_taps()[None, None, :, None]


def num_scales(h: int, w: int) -> int:
    """Scales whose (floor-halved) size still fits the 11×11 window, max 5."""
    size = min(h, w)
    if size < WINDOW_SIZE:
        raise DimensionError(f"MS-SSIM needs frames of at least {WINDOW_SIZE}px, got {h}x{w}")
    m = 0
    while m < len(MS_SSIM_EXPONENTS) and size >= WINDOW_SIZE:
        m += 1
        size //= 2
    return m


def scale_exponents(h: int, w: int) -> np.ndarray:
    m = num_scales(h, w)
    e = MS_SSIM_EXPONENTS[:m]
    return e / e.sum()


def ms_ssim_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Differentiable MS-SSIM of single-channel images.

    ``a`` and ``b`` are N×1×H×W; returns a length-N tensor.
    """
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"MS-SSIM shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 4 or a.shape[1] != 1:
        raise DimensionError(f"ms_ssim_tensor expects N×1×H×W, got {a.shape}")
    exps = scale_exponents(*a.shape[-2:])
    row, col = Tensor(_ROW), Tensor(_COL)
    n = a.shape[0]

    value = None
    for s, e in enumerate(exps):
        stats = T.concat([a, b, a * a, b * b, a * b], axis=0)
        blurred = T.conv2d(T.conv2d(stats, row), col)
        mu_a, mu_b = blurred[0:n], blurred[n : 2 * n]
        var_a = blurred[2 * n : 3 * n] - mu_a * mu_a
        var_b = blurred[3 * n : 4 * n] - mu_b * mu_b
        cov = blurred[4 * n :] - mu_a * mu_b
        cs = (2.0 * cov + C2) / (var_a + var_b + C2)
        if s == len(exps) - 1:
            lum = (2.0 * mu_a * mu_b + C1) / (mu_a * mu_a + mu_b * mu_b + C1)
            term = T.mean(lum * cs, axis=(1, 2, 3))
        else:
            term = T.mean(cs, axis=(1, 2, 3))
            a, b = T.downsample2(a), T.downsample2(b)
        factor = T.power(T.clamp_min(term, TERM_FLOOR), float(e))
        value = factor if value is None else value * factor
    return value


def ms_ssim(a, b) -> float:
    """MS-SSIM of two single-channel images (H×W or 1×H×W), unit range."""
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"MS-SSIM shape mismatch {a.shape} vs {b.shape}")
    h, w = a.shape[-2:]
    val = ms_ssim_tensor(Tensor(a.reshape(1, 1, h, w)), Tensor(b.reshape(1, 1, h, w)))
    return float(val.data[0])


def _chroma_offset(n_channels: int) -> np.ndarray:
    # Cb/Cr are shifted into [0, 1] so all channels share the unit dynamic range
    off = np.zeros((n_channels, 1, 1))
    off[1:] = 0.5
    return off


def ycbcr_ms_ssim(a: Tensor, b: Tensor) -> Tensor:
    """Per-channel MS-SSIM of N×3×H×W YCbCr frames -> N×3 tensor."""
    a, b = T.as_tensor(a), T.as_tensor(b)
    if a.ndim == 3:
        a, b = T.reshape(a, (1,) + a.shape), T.reshape(b, (1,) + b.shape)
    n, c, h, w = a.shape
    off = _chroma_offset(c)
    fa = T.reshape(a + off, (n * c, 1, h, w))
    fb = T.reshape(b + off, (n * c, 1, h, w))
    return T.reshape(ms_ssim_tensor(fa, fb), (n, c))


def weighted_ms_ssim(a: Tensor, b: Tensor) -> Tensor:
    """6/8·Y + 1/8·Cb + 1/8·Cr MS-SSIM per frame (length-N tensor)."""
    per_channel = ycbcr_ms_ssim(a, b)
    return T.sum_(per_channel * CHANNEL_WEIGHTS, axis=1)


def weighted_aggregate(y: float, cb: float, cr: float) -> float:
    return float(CHANNEL_WEIGHTS[0] * y + CHANNEL_WEIGHTS[1] * cb + CHANNEL_WEIGHTS[2] * cr)


def charbonnier(a, b, eps: float = 1e-3) -> Tensor:
    """mean(sqrt((a-b)^2 + eps^2)) - eps."""
    d = T.as_tensor(a) - T.as_tensor(b)
    return T.mean(T.sqrt(d * d + eps * eps)) - eps


def bpp(bitstream_bytes: int, h: int, w: int, t: int = 1) -> float:
    if h <= 0 or w <= 0 or t <= 0:
        raise ValueError("bpp needs positive dimensions")
    return 8.0 * bitstream_bytes / (h * w * t)


@dataclass
class QualityReport:
    video_id: str
    frame: int
    bpp: float
    msssim_y: float
    msssim_cb: float
    msssim_cr: float

    @property
    def ms_ssim(self) -> float:
        return self.msssim_weighted

    @property
    def msssim_weighted(self) -> float:
        return weighted_aggregate(self.msssim_y, self.msssim_cb, self.msssim_cr)

    CSV_HEADER = ("video_id", "frame", "bpp", "msssim_y", "msssim_cb", "msssim_cr", "msssim_weighted")

    def csv_row(self) -> list:
        return [self.video_id, self.frame, f"{self.bpp:.8g}", f"{self.msssim_y:.10f}",
                f"{self.msssim_cb:.10f}", f"{self.msssim_cr:.10f}", f"{self.msssim_weighted:.10f}"]


def frame_quality(video_id: str, frame: int, target: np.ndarray, recon: np.ndarray,
                  frame_bpp: float) -> QualityReport:
    vals = ycbcr_ms_ssim(Tensor(target), Tensor(recon)).data[0]
    return QualityReport(video_id, frame, frame_bpp, float(vals[0]), float(vals[1]), float(vals[2]))

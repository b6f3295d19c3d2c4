"""Spatial rate multiplexing: rate maps, masks, per-frame bitstreams and the
slope-threshold rate controller."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .coding import (
    ContextModel,
    DecodeError,
    RangeDecoder,
    RangeEncoder,
    RangeError,
    RegularizerState,
    TERMINATOR,
    aec_decode,
    aec_encode,
    bit_codelengths,
    bitplane_compose,
    bitplane_decompose,
    frame_payload,
    read_payload,
)
from .metrics import weighted_ms_ssim
from .tensor import Tensor

# slope used when a higher rate costs no extra bits
FREE_SLOPE = 1e12


def target_schedule(R: int, base: float = 0.01, ratio: float = 1.5) -> list[float]:
    """Per-rate target BPPs base * ratio**r for r = 1..R."""
    return [base * ratio**r for r in range(1, R + 1)]


@dataclass
class RatePlan:
    code_channels: tuple[int, ...]
    targets: list[float] = field(default_factory=list)
    regularizers: list[RegularizerState] = field(default_factory=list)

    def __post_init__(self):
        self.code_channels = tuple(self.code_channels)
        if not self.targets:
            self.targets = target_schedule(self.R)
        if len(self.targets) != self.R:
            raise ValueError("one target per rate")
        if any(b <= a for a, b in zip(self.targets, self.targets[1:])):
            raise ValueError("targets must be strictly increasing")

    @property
    def R(self) -> int:
        return len(self.code_channels)

    def init_regularizers(self, alpha: float = 0.01, eta: float = 0.05) -> None:
        self.regularizers = [RegularizerState(alpha, t, eta) for t in self.targets]


def check_rate_map(p: np.ndarray, R: int) -> np.ndarray:
    p = np.asarray(p)
    if p.ndim != 2:
        raise RangeError(f"rate map must be Y×X, got shape {p.shape}")
    if p.size and (p.min() < 1 or p.max() > R or not np.all(p == np.round(p))):
        raise RangeError(f"rate map entries must be integers in [1, {R}]")
    return p.astype(np.int64)


def rate_masks(p: np.ndarray, R: int) -> np.ndarray:
    """R×Y×X indicator stack: mask[r-1, y, x] = (p[y, x] == r)."""
    p = check_rate_map(p, R)
    return (p[None] == np.arange(1, R + 1)[:, None, None]).astype(np.float64)


def build_masks(p: np.ndarray, plan: RatePlan) -> list[np.ndarray]:
    """Per-rate masks broadcast over that rate's code channels (C_r×Y×X)."""
    m = rate_masks(p, plan.R)
    return [np.broadcast_to(m[r], (c,) + m.shape[1:]).copy() for r, c in enumerate(plan.code_channels)]


# ---------------------------------------------------------------------------
# rate map coding
# ---------------------------------------------------------------------------


def _rate_context(p: np.ndarray, y: int, x: int, R: int) -> int:
    left = int(p[y, x - 1]) if x > 0 else 0
    up = int(p[y - 1, x]) if y > 0 else 0
    return left * (R + 1) + up


def encode_rate_map(p: np.ndarray, R: int) -> bytes:
    """Adaptive multi-symbol coding conditioned on the (left, up) rates.

    With R == 1 the map carries no information and codes to zero bytes.
    """
    p = check_rate_map(p, R)
    if R == 1:
        return b""
    counts = np.ones(((R + 1) ** 2, R), dtype=np.int64)
    enc = RangeEncoder()
    Y, X = p.shape
    for y in range(Y):
        for x in range(X):
            ctx = _rate_context(p, y, x, R)
            s = int(p[y, x]) - 1
            row = counts[ctx]
            enc.encode(int(row[:s].sum()), int(row[s]), int(row.sum()))
            row[s] += 1
    return enc.finish() + TERMINATOR


def decode_rate_map(stream: bytes, shape: tuple[int, int], R: int) -> np.ndarray:
    Y, X = shape
    if R == 1:
        if stream:
            raise DecodeError("unexpected rate map bytes for a single-rate stream")
        return np.ones(shape, dtype=np.int64)
    if stream[-len(TERMINATOR):] != TERMINATOR:
        raise DecodeError("rate map truncated: missing terminator")
    dec = RangeDecoder(stream[: -len(TERMINATOR)])
    counts = np.ones(((R + 1) ** 2, R), dtype=np.int64)
    p = np.zeros(shape, dtype=np.int64)
    for y in range(Y):
        for x in range(X):
            row = counts[_rate_context(p, y, x, R)]
            cum = [0] + np.cumsum(row).tolist()
            s = dec.decode(cum, cum[-1])
            row[s] += 1
            p[y, x] = s + 1
    return p


# ---------------------------------------------------------------------------
# per-frame bitstream
# ---------------------------------------------------------------------------


@dataclass
class FrameResult:
    payload: bytes
    recon: np.ndarray
    state: object
    rate_map: np.ndarray
    diagnostics: dict


def _active_bits(code: np.ndarray, active: np.ndarray, B: int):
    bits, _ = bitplane_decompose(np.clip(code, -1.0, 1.0), B)
    bits = bits * active[None, None].astype(np.uint8)
    return bits, bitplane_compose(bits)


def mux_encode(coder, target: np.ndarray, state, p: np.ndarray) -> FrameResult:
    """Code one frame under rate map ``p``.

    Layout: [rate map payload][codelayer 1 payload]...[codelayer R payload],
    each prefixed by its u32 length.  Fully masked codelayers are empty.
    """
    cfg = coder.cfg
    masks = rate_masks(p, cfg.R)
    codes = coder.encode_frame(Tensor(target), state, masks)
    out = bytearray(frame_payload(encode_rate_map(p, cfg.R)))
    codes_hat = []
    for r, code in enumerate(codes):
        active = masks[r].astype(bool)
        bits, c_hat = _active_bits(code.data, active, cfg.B)
        codes_hat.append(c_hat)
        if active.any():
            out += frame_payload(aec_encode(bits, ContextModel(cfg.B, cfg.context), active))
        else:
            out += frame_payload(b"")
    recon, new_state, diag = coder.decode_frame([Tensor(c) for c in codes_hat], state, masks)
    return FrameResult(bytes(out), recon.data, new_state, check_rate_map(p, cfg.R), diag)


def mux_decode(coder, payload: bytes, state, pos: int = 0,
               frame_shape: tuple[int, int] | None = None) -> tuple[FrameResult, int]:
    """Inverse of :func:`mux_encode`; reads one frame starting at ``pos``."""
    cfg = coder.cfg
    if frame_shape is None:
        ref = state.tensors[-1] if state.tensors else None
        if ref is None:
            raise ValueError("frame_shape is required for stateless coders")
        frame_shape = ref.shape[-2:]
    h, w = frame_shape
    grid = (h // cfg.downsample, w // cfg.downsample)
    stream, pos = read_payload(payload, pos)
    p = decode_rate_map(stream, grid, cfg.R)
    masks = rate_masks(p, cfg.R)
    codes_hat = []
    for r, channels in enumerate(cfg.code_channels):
        stream, pos = read_payload(payload, pos)
        active = masks[r].astype(bool)
        shape = (cfg.B, channels) + grid
        if active.any():
            bits = aec_decode(stream, shape, ContextModel(cfg.B, cfg.context), active)
        else:
            if stream:
                raise DecodeError(f"codelayer {r + 1} is fully masked but has payload")
            bits = np.zeros(shape, dtype=np.uint8)
        codes_hat.append(bitplane_compose(bits))
    recon, new_state, diag = coder.decode_frame([Tensor(c) for c in codes_hat], state, masks)
    return FrameResult(payload, recon.data, new_state, p, diag), pos


# ---------------------------------------------------------------------------
# rate controller
# ---------------------------------------------------------------------------


def choose_rate(bpp: np.ndarray, quality: np.ndarray, lam: float) -> int:
    """Largest rate whose incoming R-D slope is at least ``lam`` (rate 1 always
    admissible).  ``bpp`` and ``quality`` are per-rate values of one block;
    quality is made nondecreasing by isotonic regression first."""
    bpp = np.asarray(bpp, dtype=np.float64)
    q = isotonic_regression(np.asarray(quality, dtype=np.float64), increasing=True).x
    best = 1
    for r in range(1, len(bpp)):
        d_bits = bpp[r] - bpp[r - 1]
        slope = (q[r] - q[r - 1]) / d_bits if d_bits > 0 else FREE_SLOPE
        if slope >= lam:
            best = r + 1
    return best


def block_estimates(coder, target: np.ndarray, state, block: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Per-rate, per-block (BPP, weighted MS-SSIM) under uniform rate maps.

    Returns two arrays of shape R×(Y/block)×(X/block).  Bits come from the
    adaptive per-bit code lengths, quality from the block's pixel window.
    """
    cfg = coder.cfg
    h, w = target.shape[-2:]
    Y, X = h // cfg.downsample, w // cfg.downsample
    if Y % block or X % block:
        raise ValueError(f"block {block} does not divide the {Y}x{X} code grid")
    by, bx = Y // block, X // block
    px = block * cfg.downsample
    bpp = np.zeros((cfg.R, by, bx))
    quality = np.zeros((cfg.R, by, bx))
    x_t = Tensor(target)
    for r in range(cfg.R):
        p = np.full((Y, X), r + 1)
        masks = rate_masks(p, cfg.R)
        codes = coder.encode_frame(x_t, state, masks)
        codes_hat = []
        for k, code in enumerate(codes):
            bits, c_hat = _active_bits(code.data, masks[k].astype(bool), cfg.B)
            codes_hat.append(c_hat)
            if k == r:
                cell_bits = bit_codelengths(bits, cfg.context).sum(axis=(0, 1))
        recon, _, _ = coder.decode_frame([Tensor(c) for c in codes_hat], state, masks)
        bpp[r] = cell_bits.reshape(by, block, bx, block).sum(axis=(1, 3)) / (px * px)
        crops_a = target.reshape(3, by, px, bx, px).transpose(1, 3, 0, 2, 4).reshape(-1, 3, px, px)
        crops_b = recon.data.reshape(3, by, px, bx, px).transpose(1, 3, 0, 2, 4).reshape(-1, 3, px, px)
        quality[r] = weighted_ms_ssim(Tensor(crops_a), Tensor(crops_b)).data.reshape(by, bx)
    return bpp, quality


def rates_from_estimates(bpp: np.ndarray, quality: np.ndarray, lam: float, block: int = 4) -> np.ndarray:
    """Per-block rate choice broadcast to the full code grid."""
    R, by, bx = bpp.shape
    choice = np.ones((by, bx), dtype=np.int64)
    if math.isinf(lam) and lam > 0:
        return np.ones((by * block, bx * block), dtype=np.int64)
    for i in range(by):
        for j in range(bx):
            choice[i, j] = choose_rate(bpp[:, i, j], quality[:, i, j], lam)
    return np.kron(choice, np.ones((block, block), dtype=np.int64))


def assign_rates(coder, target: np.ndarray, state, lam: float, block: int = 4) -> np.ndarray:
    """Rate map maximizing quality gained per bit spent, per block."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    bpp, quality = block_estimates(coder, target, state, block)
    return rates_from_estimates(bpp, quality, lam, block)


def fit_block(grid: tuple[int, int], block: int) -> int:
    """Largest block size <= ``block`` dividing both grid dimensions."""
    b = min(block, *grid)
    while grid[0] % b or grid[1] % b:
        b -= 1
    return max(b, 1)

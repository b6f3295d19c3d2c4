"""Bitplane quantization, context-adaptive binary range coding, and the
adaptive codelength regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from . import tensor as T
from .tensor import Tensor

TERMINATOR = b"\xa5\x5a"
TOP = 1 << 24
MASK32 = (1 << 32) - 1
MAX_TOTAL = 1 << 16


class RangeError(ValueError):
    """Value outside the domain of an operation."""


class DecodeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# bitplanes
# ---------------------------------------------------------------------------


def quantize_levels(c: np.ndarray, B: int) -> np.ndarray:
    levels = (1 << B) - 1
    q = np.floor((c + 1.0) * 0.5 * levels + 0.5)
    return np.clip(q, 0, levels).astype(np.int64)


def dequantize_levels(q: np.ndarray, B: int) -> np.ndarray:
    return 2.0 * q / ((1 << B) - 1) - 1.0


def bitplane_decompose(c, B: int = 6) -> tuple[np.ndarray, np.ndarray]:
    """Split values in [-1, 1] into B bitplanes (plane 0 = MSB).

    Returns ``(bits, c_hat)`` where ``bits`` has shape (B,) + c.shape and
    ``c_hat`` is the dequantized value of the retained B-bit level.
    """
    c = np.asarray(c, dtype=np.float64)
    if not 1 <= B <= 16:
        raise RangeError(f"bitplane count must be in [1, 16], got {B}")
    if c.size and (not np.isfinite(c).all() or c.min() < -1.0 or c.max() > 1.0):
        raise RangeError("codelayer values must lie in [-1, 1]")
    q = quantize_levels(c, B)
    shifts = np.arange(B - 1, -1, -1).reshape((B,) + (1,) * c.ndim)
    bits = ((q[None] >> shifts) & 1).astype(np.uint8)
    return bits, dequantize_levels(q, B)


def bitplane_compose(bits: np.ndarray) -> np.ndarray:
    """Inverse of the bit split: dequantized values from B bitplanes."""
    B = bits.shape[0]
    weights = (1 << np.arange(B - 1, -1, -1)).reshape((B,) + (1,) * (bits.ndim - 1))
    q = (bits.astype(np.int64) * weights).sum(axis=0)
    return dequantize_levels(q, B)


def quantize_ste(c: Tensor, B: int = 6) -> Tensor:
    """Forward: bitplane dequantized value.  Backward: identity."""
    _, c_hat = bitplane_decompose(c.data, B)
    return T.make(c_hat, (c,), lambda g: (g,), "quantize_ste")


# ---------------------------------------------------------------------------
# contexts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ContextConfig:
    """Which previously transmitted bits form the coding context.

    ``neighbors`` takes the first 0-3 of (up, left, up-left) in the same
    plane and channel; ``planes`` the co-located bits from up to 3
    more-significant planes.
    """

    neighbors: int = 3
    planes: int = 3
    per_plane: bool = True

    def __post_init__(self):
        if not (0 <= self.neighbors <= 3 and 0 <= self.planes <= 3):
            raise ValueError("neighbors and planes must be in [0, 3]")

    @property
    def context_bits(self) -> int:
        return self.neighbors + self.planes

    def num_contexts(self, B: int) -> int:
        return (B if self.per_plane else 1) << self.context_bits


class ContextModel:
    """Adaptive (zeros, ones) counts per context, Laplace prior (1, 1)."""

    def __init__(self, B: int, config: ContextConfig = ContextConfig()):
        self.B = B
        self.config = config
        n = config.num_contexts(B)
        self.zeros = [1] * n
        self.ones = [1] * n

    def update(self, ctx: int, bit: int) -> None:
        if bit:
            self.ones[ctx] += 1
        else:
            self.zeros[ctx] += 1
        if self.zeros[ctx] + self.ones[ctx] >= MAX_TOTAL:
            self.zeros[ctx] = (self.zeros[ctx] + 1) >> 1
            self.ones[ctx] = (self.ones[ctx] + 1) >> 1


def compute_contexts(bits: np.ndarray, config: ContextConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """Context id of every bit of a B×C×Y×X tensor, from causal bits only.

    Positions outside the frame or outside ``mask`` read as 0.
    """
    b = bits.astype(np.int64)
    if mask is not None:
        b = b * mask[None, None].astype(np.int64)
    ctx = np.zeros_like(b)
    k = 0
    shifts = [(1, 0), (0, 1), (1, 1)][: config.neighbors]
    for dy, dx in shifts:
        nb = np.zeros_like(b)
        nb[..., dy:, dx:] = b[..., : b.shape[-2] - dy, : b.shape[-1] - dx]
        ctx |= nb << k
        k += 1
    for j in range(1, config.planes + 1):
        up = np.zeros_like(b)
        if j < b.shape[0]:
            up[j:] = b[:-j]
        ctx |= up << k
        k += 1
    if config.per_plane:
        plane = np.arange(b.shape[0]).reshape((-1,) + (1,) * (b.ndim - 1))
        ctx = ctx + (plane << k)
    return ctx


def _scan_positions(shape, mask):
    """Flat indices of coded positions in scan order (plane, channel, row, col)."""
    B, C, Y, X = shape
    if mask is None:
        return np.arange(B * C * Y * X)
    active = np.broadcast_to(mask.astype(bool)[None, None], shape)
    return np.flatnonzero(active)


# ---------------------------------------------------------------------------
# range coder
# ---------------------------------------------------------------------------


class RangeEncoder:
    """32-bit range coder; carries propagate into already emitted bytes."""

    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.out = bytearray()

    def _carry(self):
        i = len(self.out) - 1
        while self.out[i] == 0xFF:
            self.out[i] = 0
            i -= 1
        self.out[i] += 1

    def encode(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low += r * cum
        if cum + freq < total:
            self.range = r * freq
        else:
            self.range -= r * cum
        if self.low > MASK32:
            self.low &= MASK32
            self._carry()
        while self.range < TOP:
            self.out.append(self.low >> 24)
            self.low = (self.low << 8) & MASK32
            self.range <<= 8

    def encode_bit(self, bit: int, n0: int, n1: int) -> None:
        if bit:
            self.encode(n0, n1, n0 + n1)
        else:
            self.encode(0, n0, n0 + n1)

    def finish(self) -> bytes:
        """Emit the shortest tail that pins the final interval, assuming the
        decoder reads zeros past the end; trailing zero bytes are dropped."""
        if self.low:
            v = (self.low + TOP - 1) & ~(TOP - 1)
            if v > MASK32:
                self._carry()
            else:
                self.out.append(v >> 24)
        out = bytes(self.out).rstrip(b"\x00")
        return out


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        p = self.pos
        self.pos += 1
        return self.data[p] if p < len(self.data) else 0

    def decode(self, cum_freqs: list[int], total: int) -> int:
        """Decode one symbol given cumulative frequencies [0, f0, f0+f1, ..., total]."""
        r = self.range // total
        v = min(self.code // r, total - 1)
        s = 0
        while cum_freqs[s + 1] <= v:
            s += 1
        lo, hi = cum_freqs[s], cum_freqs[s + 1]
        self.code -= r * lo
        self.range = r * (hi - lo) if hi < total else self.range - r * lo
        self._normalize()
        return s

    def decode_bit(self, n0: int, n1: int) -> int:
        r = self.range // (n0 + n1)
        bound = r * n0
        if self.code < bound:
            self.range = bound
            bit = 0
        else:
            self.code -= bound
            self.range -= bound
            bit = 1
        self._normalize()
        return bit

    def _normalize(self):
        while self.range < TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8


def _split_terminator(stream: bytes) -> bytes:
    if len(stream) < len(TERMINATOR) or stream[-len(TERMINATOR):] != TERMINATOR:
        raise DecodeError("stream truncated: missing terminator")
    return stream[: -len(TERMINATOR)]


# ---------------------------------------------------------------------------
# adaptive entropy coding of bit tensors
# ---------------------------------------------------------------------------


def aec_encode(bits: np.ndarray, model: ContextModel, mask: np.ndarray | None = None) -> bytes:
    """Code a B×C×Y×X binary tensor; returns range-coder bytes + terminator.

    Only positions where ``mask`` (Y×X) is set are coded.
    """
    bits = np.asarray(bits)
    if bits.ndim != 4:
        raise ValueError(f"expected a B×C×Y×X bit tensor, got shape {bits.shape}")
    if bits.size and (bits.max() > 1 or bits.min() < 0):
        raise ValueError("bit tensor must be binary")
    ctx = compute_contexts(bits, model.config, mask).ravel()
    flat = bits.ravel()
    enc = RangeEncoder()
    zeros, ones = model.zeros, model.ones
    for i in _scan_positions(bits.shape, mask).tolist():
        c = int(ctx[i])
        bit = int(flat[i])
        enc.encode_bit(bit, zeros[c], ones[c])
        model.update(c, bit)
    return enc.finish() + TERMINATOR


def aec_decode(stream: bytes, shape: tuple[int, int, int, int], model: ContextModel,
               mask: np.ndarray | None = None) -> np.ndarray:
    """Exact inverse of :func:`aec_encode` given the same shape, mask and a
    freshly initialized context model."""
    payload = _split_terminator(stream)
    B, C, Y, X = shape
    cfg = model.config
    dec = RangeDecoder(payload)
    n = B * C * Y * X
    out = [0] * n
    plane_size = C * Y * X
    nbits = cfg.context_bits
    zeros, ones = model.zeros, model.ones
    for i in _scan_positions(shape, mask).tolist():
        x = i % X
        y = (i // X) % Y
        b = i // plane_size
        ctx = 0
        k = 0
        if cfg.neighbors >= 1:
            ctx |= (out[i - X] if y > 0 else 0) << k
            k += 1
        if cfg.neighbors >= 2:
            ctx |= (out[i - 1] if x > 0 else 0) << k
            k += 1
        if cfg.neighbors >= 3:
            ctx |= (out[i - X - 1] if (x > 0 and y > 0) else 0) << k
            k += 1
        for j in range(1, cfg.planes + 1):
            ctx |= (out[i - j * plane_size] if b >= j else 0) << k
            k += 1
        if cfg.per_plane:
            ctx += b << nbits
        bit = dec.decode_bit(zeros[ctx], ones[ctx])
        model.update(ctx, bit)
        out[i] = bit
    return np.array(out, dtype=np.uint8).reshape(shape)


def bit_codelengths(bits: np.ndarray, config: ContextConfig = ContextConfig(),
                    mask: np.ndarray | None = None) -> np.ndarray:
    """Ideal adaptive code length (bits) of every bit, B×C×Y×X.

    Uses the same Laplace-count estimator as the coder (without count
    halving); entries outside ``mask`` are 0.
    """
    bits = np.asarray(bits)
    ctx = compute_contexts(bits, config, mask).ravel()
    flat = bits.ravel().astype(np.int64)
    pos = _scan_positions(bits.shape, mask)
    out = np.zeros(bits.size)
    if pos.size == 0:
        return out.reshape(bits.shape)
    c = ctx[pos]
    v = flat[pos]
    order = np.argsort(c, kind="stable")
    cs, vs = c[order], v[order]
    starts = np.r_[0, np.flatnonzero(np.diff(cs)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, cs.size]))
    ones_before = np.cumsum(vs) - vs
    ones_before = ones_before - ones_before[group_start]
    seen = np.arange(cs.size) - group_start
    zeros_before = seen - ones_before
    p = np.where(vs == 1, ones_before + 1, zeros_before + 1) / (seen + 2.0)
    lengths = np.empty(cs.size)
    lengths[order] = -np.log2(p)
    out[pos] = lengths
    return out.reshape(bits.shape)


def ideal_codelength(bits: np.ndarray, config: ContextConfig = ContextConfig(),
                     mask: np.ndarray | None = None) -> float:
    """Total adaptive code length in bits; order-independent per context."""
    bits = np.asarray(bits)
    ctx = compute_contexts(bits, config, mask).ravel()
    pos = _scan_positions(bits.shape, mask)
    if pos.size == 0:
        return 0.0
    c = ctx[pos]
    v = bits.ravel()[pos].astype(np.int64)
    n = config.num_contexts(bits.shape[0])
    ones = np.bincount(c, weights=v, minlength=n)
    total = np.bincount(c, minlength=n)
    zeros = total - ones
    nats = gammaln(total + 2) - gammaln(zeros + 1) - gammaln(ones + 1)
    return float(nats.sum() / math.log(2))


# ---------------------------------------------------------------------------
# codelength regularization
# ---------------------------------------------------------------------------


ALPHA_MIN, ALPHA_MAX = 1e-6, 1e3


@dataclass(frozen=True)
class RegularizerState:
    alpha: float
    target_bpp: float
    eta: float = 0.05
    observed_bpp: float | None = None
    smoothing: float = 0.95


def codelength_regularizer(c_hat: Tensor, state: RegularizerState, B: int = 6,
                           mask: np.ndarray | None = None) -> Tensor:
    """alpha / n * sum(log(|c_hat| + one quantization step)).

    ``mask`` (broadcastable to c_hat) restricts the average to coded entries.
    """
    eps = 1.0 / ((1 << B) - 1)
    logs = T.log(T.abs_(c_hat) + eps)
    if mask is None:
        return T.mean(logs) * state.alpha
    m = np.broadcast_to(mask, c_hat.shape).astype(np.float64)
    count = m.sum()
    if count == 0:
        return Tensor(0.0)
    return T.sum_(logs * m) * (state.alpha / count)


def update_alpha(state: RegularizerState, observed_bpp: float) -> RegularizerState:
    """Multiplicative feedback on the relative bitrate discrepancy."""
    if observed_bpp < 0:
        raise ValueError("observed bpp must be non-negative")
    err = (observed_bpp - state.target_bpp) / state.target_bpp
    alpha = min(max(state.alpha * math.exp(state.eta * err), ALPHA_MIN), ALPHA_MAX)
    avg = observed_bpp if state.observed_bpp is None else (
        state.smoothing * state.observed_bpp + (1.0 - state.smoothing) * observed_bpp)
    return replace(state, alpha=alpha, observed_bpp=avg)


# ---------------------------------------------------------------------------
# payload framing
# ---------------------------------------------------------------------------


def frame_payload(stream: bytes) -> bytes:
    return len(stream).to_bytes(4, "little") + stream


def read_payload(buf: bytes, pos: int) -> tuple[bytes, int]:
    if pos + 4 > len(buf):
        raise DecodeError("truncated payload length")
    n = int.from_bytes(buf[pos : pos + 4], "little")
    end = pos + 4 + n
    if end > len(buf):
        raise DecodeError("truncated payload")
    return bytes(buf[pos + 4 : end]), end

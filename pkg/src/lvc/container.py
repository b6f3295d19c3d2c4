"""The .lvc file: fixed header followed by per-frame multiplexed payloads."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .model import Variant
from .ratecontrol import assign_rates, fit_block, mux_decode, mux_encode

MAGIC = b"LVC1"
VERSION = 1
_HEADER = struct.Struct("<4sHHHIBBB32s")


class HeaderError(ValueError):
    pass


def model_hash(model_bytes: bytes) -> bytes:
    return hashlib.sha256(model_bytes).digest()


@dataclass(frozen=True)
class Header:
    width: int
    height: int
    frames: int
    B: int
    R: int
    variant: Variant
    model_hash: bytes
    version: int = VERSION

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, self.version, self.width, self.height, self.frames,
                            self.B, self.R, self.variant.code, self.model_hash)

    @classmethod
    def unpack(cls, data: bytes) -> "Header":
        if len(data) < _HEADER.size:
            raise HeaderError("file shorter than the container header")
        magic, version, w, h, n, B, R, variant, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise HeaderError("bad magic")
        if version != VERSION:
            raise HeaderError(f"unsupported container version {version}")
        try:
            v = Variant.from_code(variant)
        except IndexError:
            raise HeaderError(f"unknown variant code {variant}") from None
        return cls(w, h, n, B, R, v, digest, version)

    def check_model(self, coder, digest: bytes) -> None:
        cfg = coder.cfg
        if digest != self.model_hash:
            raise HeaderError("model file does not match the one used to encode")
        if (cfg.B, cfg.R, cfg.variant) != (self.B, self.R, self.variant):
            raise HeaderError("model configuration does not match the stream header")


HEADER_SIZE = _HEADER.size


@dataclass
class EncodedVideo:
    data: bytes
    recons: np.ndarray
    rate_maps: list[np.ndarray]
    frame_bytes: list[int]


def encode_video(coder, frames: np.ndarray, digest: bytes, lam: float | None = None,
                 rate_maps=None, block: int = 4) -> EncodedVideo:
    """Code T×3×H×W frames.  Rates come from ``rate_maps`` if given,
    otherwise from the controller at threshold ``lam``."""
    cfg = coder.cfg
    t_count, _, h, w = frames.shape
    cfg.check_frame(h, w)
    grid = (h // cfg.downsample, w // cfg.downsample)
    blk = fit_block(grid, block)
    header = Header(w, h, t_count, cfg.B, cfg.R, cfg.variant, digest)
    out = bytearray(header.pack())
    state = coder.initial_state(h, w)
    recons, maps, sizes = [], [], []
    for t in range(t_count):
        if rate_maps is not None:
            p = np.asarray(rate_maps[t])
        elif cfg.R == 1:
            p = np.ones(grid, dtype=np.int64)
        else:
            p = assign_rates(coder, frames[t], state, np.inf if lam is None else lam, blk)
        res = mux_encode(coder, frames[t], state, p)
        out += res.payload
        sizes.append(len(res.payload))
        recons.append(res.recon)
        maps.append(res.rate_map)
        state = res.state
    return EncodedVideo(bytes(out), np.stack(recons) if recons else np.zeros((0, 3, h, w)), maps, sizes)


def decode_video(coder, data: bytes, digest: bytes) -> tuple[np.ndarray, list[np.ndarray]]:
    header = Header.unpack(data)
    header.check_model(coder, digest)
    h, w = header.height, header.width
    state = coder.initial_state(h, w)
    pos = HEADER_SIZE
    recons, maps = [], []
    for _ in range(header.frames):
        res, pos = mux_decode(coder, data, state, pos, (h, w))
        recons.append(res.recon)
        maps.append(res.rate_map)
        state = res.state
    if pos != len(data):
        raise HeaderError(f"{len(data) - pos} trailing bytes after the last frame")
    return (np.stack(recons) if recons else np.zeros((0, 3, h, w))), maps

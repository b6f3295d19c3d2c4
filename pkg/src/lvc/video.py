"""YUV4MPEG2 (8-bit C420/C444) and raw planar float64 video I/O.

Frames are returned as T×3×H×W YCbCr arrays with Y in [0, 1] and chroma
in [-0.5, 0.5]; 8-bit samples are treated as full range.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class VideoFormatError(ValueError):
    pass


_SUPPORTED = ("420jpeg", "420", "420paldv", "420mpeg2", "444")


def _parse_header(line: bytes) -> dict:
    tokens = line.decode("ascii").split()
    if not tokens or tokens[0] != "YUV4MPEG2":
        raise VideoFormatError("missing YUV4MPEG2 signature")
    params = {"C": "420jpeg"}
    for tok in tokens[1:]:
        params[tok[0]] = tok[1:]
    if "W" not in params or "H" not in params:
        raise VideoFormatError("y4m header lacks W/H")
    if params["C"] not in _SUPPORTED:
        raise VideoFormatError(f"unsupported chroma layout C{params['C']}")
    return params


def read_y4m(path) -> np.ndarray:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise VideoFormatError("truncated y4m header")
    params = _parse_header(data[:nl])
    w, h = int(params["W"]), int(params["H"])
    sub = params["C"] != "444"
    cw, ch = ((w + 1) // 2, (h + 1) // 2) if sub else (w, h)
    frame_bytes = w * h + 2 * cw * ch
    frames = []
    pos = nl + 1
    while pos < len(data):
        if not data.startswith(b"FRAME", pos):
            raise VideoFormatError(f"expected FRAME marker at byte {pos}")
        pos = data.index(b"\n", pos) + 1
        if pos + frame_bytes > len(data):
            raise VideoFormatError("truncated frame")
        buf = np.frombuffer(data, dtype=np.uint8, count=frame_bytes, offset=pos).astype(np.float64) / 255.0
        pos += frame_bytes
        y = buf[: w * h].reshape(h, w)
        u = buf[w * h : w * h + cw * ch].reshape(ch, cw)
        v = buf[w * h + cw * ch :].reshape(ch, cw)
        if sub:
            # nearest-neighbour upsampling to 4:4:4
            u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)[:h, :w]
            v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)[:h, :w]
        frames.append(np.stack([y, u - 0.5, v - 0.5]))
    if not frames:
        return np.zeros((0, 3, h, w))
    return np.stack(frames)


def write_y4m(path, frames: np.ndarray, fps: str = "30:1", chroma: str = "444") -> None:
    """Write T×3×H×W YCbCr frames as 8-bit y4m (C444 or C420)."""
    frames = np.asarray(frames, dtype=np.float64)
    _, _, h, w = frames.shape
    if chroma not in ("444", "420jpeg"):
        raise VideoFormatError(f"cannot write chroma layout {chroma}")
    with open(path, "wb") as fh:
        fh.write(f"YUV4MPEG2 W{w} H{h} F{fps} Ip A1:1 C{chroma}\n".encode("ascii"))
        for f in frames:
            planes = [f[0], f[1] + 0.5, f[2] + 0.5]
            if chroma != "444":
                planes[1:] = [_box_down(p) for p in planes[1:]]
            fh.write(b"FRAME\n")
            for p in planes:
                fh.write(np.clip(np.round(p * 255.0), 0, 255).astype(np.uint8).tobytes())


def _box_down(p: np.ndarray) -> np.ndarray:
    h, w = p.shape
    padded = np.pad(p, ((0, h % 2), (0, w % 2)), mode="edge")
    return padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2).mean(axis=(1, 3))


_RAW_NAME = re.compile(r"_(\d+)x(\d+)")


def read_raw(path, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Raw planar little-endian float64 YCbCr frames.

    Dimensions default to a ``_WxH`` token in the file name.
    """
    path = Path(path)
    if width is None or height is None:
        m = _RAW_NAME.search(path.stem)
        if m is None:
            raise VideoFormatError("raw video needs explicit dimensions or a _WxH file name")
        width, height = int(m.group(1)), int(m.group(2))
    data = np.fromfile(path, dtype="<f8")
    per_frame = 3 * width * height
    if data.size % per_frame:
        raise VideoFormatError("raw file size is not a whole number of frames")
    return data.reshape(-1, 3, height, width).astype(np.float64)


def write_raw(path, frames: np.ndarray) -> None:
    np.asarray(frames, dtype="<f8").tofile(path)


def read_video(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".y4m":
        return read_y4m(path)
    if path.suffix in (".raw", ".f64", ".yuv"):
        return read_raw(path)
    raise VideoFormatError(f"unknown video extension {path.suffix}")


def center_crop(frames: np.ndarray, multiple: int) -> np.ndarray:
    """Crop H and W down to the nearest multiple, keeping the centre."""
    h, w = frames.shape[-2:]
    nh, nw = h - h % multiple, w - w % multiple
    if nh == 0 or nw == 0:
        raise VideoFormatError(f"video {h}x{w} is smaller than {multiple}px")
    y0, x0 = (h - nh) // 2, (w - nw) // 2
    return frames[..., y0 : y0 + nh, x0 : x0 + nw]

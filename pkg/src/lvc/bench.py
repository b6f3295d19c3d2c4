"""Rate-distortion curves: interpolation, dataset averaging, relative-size
tables and ingestion of external codec results."""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import isotonic_regression


class RangeError(ValueError):
    pass


class ParseError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class RDPoint:
    video_id: str
    bpp: float
    quality: float

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValidationError(f"bpp must be positive, got {self.bpp}")
        if not 0 < self.quality <= 1:
            raise ValidationError(f"quality must be in (0, 1], got {self.quality}")


class RDCurve:
    """Points of one (codec, video): bpp strictly increasing, quality
    nondecreasing (isotonic regression applied on construction)."""

    def __init__(self, points, video_id: str | None = None, codec: str = ""):
        points = list(points)
        if video_id is None:
            video_id = points[0].video_id if points else ""
        self.video_id = video_id
        self.codec = codec
        best: dict[float, float] = {}
        for p in points:
            if p.bpp in best:
                warnings.warn(f"{codec}/{video_id}: duplicate bpp {p.bpp}, keeping max quality")
                best[p.bpp] = max(best[p.bpp], p.quality)
            else:
                best[p.bpp] = p.quality
        self.bpp = np.array(sorted(best))
        raw = np.array([best[b] for b in self.bpp])
        self.quality = isotonic_regression(raw, increasing=True).x if raw.size else raw

    def __len__(self) -> int:
        return int(self.bpp.size)

    @property
    def log_bpp(self) -> np.ndarray:
        return np.log(self.bpp)

    def bpp_range(self) -> tuple[float, float]:
        return float(self.bpp[0]), float(self.bpp[-1])

    def quality_range(self) -> tuple[float, float]:
        return float(self.quality[0]), float(self.quality[-1])


def interpolate(curve: RDCurve, at: float, axis: str = "bpp") -> float:
    """Piecewise-linear in (log bpp, quality).

    ``axis='bpp'`` returns quality at bitrate ``at``; ``axis='quality'``
    returns the bitrate achieving quality ``at``.
    """
    if len(curve) == 0:
        raise RangeError("empty curve")
    if axis == "bpp":
        lo, hi = curve.bpp_range()
        if not lo <= at <= hi:
            raise RangeError(f"bpp {at} outside [{lo}, {hi}]")
        knot = np.flatnonzero(curve.bpp == at)
        if knot.size:
            return float(curve.quality[knot[0]])
        return float(np.interp(math.log(at), curve.log_bpp, curve.quality))
    if axis == "quality":
        lo, hi = curve.quality_range()
        if not lo <= at <= hi:
            raise RangeError(f"quality {at} outside [{lo}, {hi}]")
        q, lb = curve.quality, curve.log_bpp
        # flat stretches map to their cheapest bitrate
        i = int(np.searchsorted(q, at, side="left"))
        if q[i] == at:
            return float(curve.bpp[i])
        frac = (at - q[i - 1]) / (q[i] - q[i - 1])
        return float(math.exp(lb[i - 1] + frac * (lb[i] - lb[i - 1])))
    raise ValueError(f"unknown axis {axis!r}")


def common_range(curves, axis: str = "bpp") -> tuple[float, float] | None:
    """Intersection of the curves' ranges on ``axis`` (None if empty)."""
    ranges = [c.bpp_range() if axis == "bpp" else c.quality_range() for c in curves]
    if not ranges:
        return None
    lo = max(r[0] for r in ranges)
    hi = min(r[1] for r in ranges)
    return (lo, hi) if lo <= hi else None


def default_grid(curves, axis: str = "bpp", points: int = 20) -> np.ndarray:
    """Evenly spaced values over the range valid for every curve."""
    rng = common_range(curves, axis)
    if rng is None:
        return np.array([])
    return np.linspace(rng[0], rng[1], points)


def average_curves(curves, grid, axis: str = "bpp") -> tuple[np.ndarray, np.ndarray]:
    """Unweighted mean over videos of the interpolated dependent value.

    Grid points not covered by every video are dropped with a warning.
    Returns (kept grid values, means).
    """
    curves = list(curves)
    kept, means = [], []
    for g in np.asarray(grid, dtype=np.float64):
        try:
            vals = [interpolate(c, float(g), axis) for c in curves]
        except RangeError:
            warnings.warn(f"grid value {g} not covered by every video; dropped")
            continue
        kept.append(g)
        means.append(math.fsum(vals) / len(vals))
    return np.array(kept), np.array(means)


def relative_sizes(ours, baseline, quality_levels) -> dict[float, float]:
    """Per quality level: 100 * mean baseline bpp / mean our bpp.

    BPP is averaged over videos per codec first, then the ratio is taken.
    """
    ours, baseline = list(ours), list(baseline)
    table = {}
    for q in quality_levels:
        try:
            ob = [interpolate(c, float(q), "quality") for c in ours]
            bb = [interpolate(c, float(q), "quality") for c in baseline]
        except RangeError:
            warnings.warn(f"quality level {q} not valid for every video; omitted")
            continue
        table[float(q)] = 100.0 * (math.fsum(bb) / len(bb)) / (math.fsum(ob) / len(ob))
    return table


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

REQUIRED_COLUMNS = ("codec", "video_id", "bpp", "msssim_weighted")


def import_external(paths) -> dict[str, list[RDCurve]]:
    """Read R-D points from CSV files into curves keyed by codec."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    grouped: dict[str, dict[str, list[RDPoint]]] = defaultdict(lambda: defaultdict(list))
    for path in paths:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                continue
            header = [h.strip() for h in header]
            missing = [c for c in REQUIRED_COLUMNS if c not in header]
            if missing:
                raise ParseError(f"{path}:1: missing columns {missing}")
            col = {c: header.index(c) for c in REQUIRED_COLUMNS}
            for line_no, row in enumerate(reader, start=2):
                if not row or all(not cell.strip() for cell in row):
                    continue
                if len(row) < len(header):
                    raise ParseError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
                try:
                    bpp = float(row[col["bpp"]])
                    quality = float(row[col["msssim_weighted"]])
                except ValueError as exc:
                    raise ParseError(f"{path}:{line_no}: {exc}") from None
                if not bpp > 0:
                    raise ValidationError(f"{path}:{line_no}: bpp must be positive")
                codec, vid = row[col["codec"]].strip(), row[col["video_id"]].strip()
                grouped[codec][vid].append(RDPoint(vid, bpp, quality))
    return {codec: [RDCurve(pts, vid, codec) for vid, pts in sorted(videos.items())]
            for codec, videos in sorted(grouped.items())}

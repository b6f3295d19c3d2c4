"""Clip indexing, unrolled multi-frame training and R-D evaluation."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .coding import RegularizerState, bitplane_decompose, codelength_regularizer, ideal_codelength, update_alpha
from .container import decode_video, encode_video
from .metrics import bpp as bits_per_pixel
from .metrics import charbonnier, frame_quality, weighted_ms_ssim
from .model import VideoCoder
from .nn import save_weights
from .ratecontrol import target_schedule
from .tensor import AdamState, NonFiniteError, Tensor, adam_step
from .video import VideoFormatError, center_crop, read_video

log = logging.getLogger(__name__)

SCENE_CUT_THRESHOLD = 0.25


class TrainingError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def scene_cuts(frames: np.ndarray, threshold: float = SCENE_CUT_THRESHOLD) -> np.ndarray:
    """Boolean per transition t -> t+1: mean |ΔY| above ``threshold``."""
    y = frames[:, 0]
    return np.abs(np.diff(y, axis=0)).mean(axis=(1, 2)) > threshold


@dataclass
class ClipIndex:
    """Candidate crops (video, t0, y0, x0) of T frames without scene cuts.

    Crop positions are kept implicitly: every (y0, x0) in range is a
    candidate for each accepted start frame.
    """

    videos: list[np.ndarray]
    names: list[str]
    starts: list[np.ndarray]
    frames: int
    crop: int

    def counts(self) -> np.ndarray:
        out = []
        for v, s in zip(self.videos, self.starts):
            h, w = v.shape[-2:]
            out.append(len(s) * (h - self.crop + 1) * (w - self.crop + 1))
        return np.array(out, dtype=np.int64)

    def __len__(self) -> int:
        return int(self.counts().sum())

    def sample(self, rng: np.random.Generator, n: int):
        """Draw ``n`` crops uniformly over all candidates.

        Returns (N×T×3×crop×crop array, list of (video, t0, y0, x0)).
        """
        counts = self.counts()
        flat = rng.integers(0, counts.sum(), size=n)
        bounds = np.cumsum(counts)
        clips, where = [], []
        for k in flat:
            v = int(np.searchsorted(bounds, k, side="right"))
            k = int(k - (bounds[v - 1] if v else 0))
            h, w = self.videos[v].shape[-2:]
            ny, nx = h - self.crop + 1, w - self.crop + 1
            t0 = int(self.starts[v][k // (ny * nx)])
            y0, x0 = divmod(k % (ny * nx), nx)
            clips.append(self.videos[v][t0 : t0 + self.frames, :, y0 : y0 + self.crop, x0 : x0 + self.crop])
            where.append((self.names[v], t0, y0, x0))
        return np.stack(clips), where


def ingest(sources, frames: int = 5, crop: int = 32, threshold: float = SCENE_CUT_THRESHOLD) -> ClipIndex:
    """Build a clip index from video paths or in-memory T×3×H×W arrays.

    Undecodable files are skipped with a warning; clips containing a scene
    cut are rejected.
    """
    videos, names, starts = [], [], []
    for i, src in enumerate(sources):
        if isinstance(src, (str, Path)):
            try:
                v = read_video(src)
            except (OSError, VideoFormatError, ValueError) as exc:
                warnings.warn(f"skipping {src}: {exc}")
                continue
            name = Path(src).stem
        else:
            v, name = np.asarray(src, dtype=np.float64), f"clip{i}"
        if v.shape[0] < frames or min(v.shape[-2:]) < crop:
            continue
        cut = scene_cuts(v, threshold)
        ok = [t0 for t0 in range(v.shape[0] - frames + 1) if not cut[t0 : t0 + frames - 1].any()]
        if ok:
            videos.append(v)
            names.append(name)
            starts.append(np.array(ok))
    index = ClipIndex(videos, names, starts, frames, crop)
    if not videos:
        raise ConfigurationError("no usable clips in the training data")
    return index


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 20000  # the full-scale schedule runs 400k iterations
    batch: int = 8
    crop: int = 32  # full scale: 128
    unroll: int = 5
    lr: float = 2e-4
    # lr is divided by 5 at each milestone (fractions of the run)
    milestones: tuple[float, float] = (0.5, 0.8)
    charbonnier_weight: float = 0.3
    alpha_init: float = 0.01
    eta: float = 0.05
    targets: tuple[float, ...] | None = None
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    log_path: str | None = None
    dump_dir: str = "."

    def __post_init__(self):
        self.milestones = tuple(self.milestones)
        if any(not 0 < m < 1 for m in self.milestones) or list(self.milestones) != sorted(self.milestones):
            raise ConfigurationError("milestones must be increasing fractions of the run")
        if self.unroll < 1 or self.batch < 1 or self.iterations < 1:
            raise ConfigurationError("unroll, batch and iterations must be positive")

    def milestone_iters(self) -> list[int]:
        return [int(m * self.iterations) for m in self.milestones]

    def lr_at(self, it: int) -> float:
        drops = sum(it >= m for m in self.milestone_iters())
        return self.lr / 5.0**drops


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    regularizers: list[RegularizerState] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row["total_loss"] for row in self.log])


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass
class StepOutput:
    loss: Tensor
    msssim_term: float
    charbonnier_term: float
    reg_term: float
    bits: np.ndarray  # per-rate coded bits over the batch
    pixels: np.ndarray  # per-rate pixels the bits cover
    recons: list[np.ndarray]


def sample_rate_masks(rng: np.random.Generator, n: int, frames: int, R: int, grid) -> tuple[np.ndarray, np.ndarray]:
    """One uniformly drawn rate per (clip, frame); returns (rates N×T, masks N×T×R×Y×X)."""
    rates = rng.integers(1, R + 1, size=(n, frames))
    masks = (rates[..., None, None, None] == np.arange(1, R + 1)[:, None, None]).astype(np.float64)
    masks = np.broadcast_to(masks, (n, frames, R) + tuple(grid)).copy()
    return rates, masks


def unrolled_loss(coder: VideoCoder, clips: np.ndarray, masks: np.ndarray, regs: list[RegularizerState],
                  charbonnier_weight: float = 0.3) -> StepOutput:
    """Composite loss over an I-frame followed by T-1 P-frames.

    Per frame: (1 - weighted MS-SSIM) on the reconstruction, Charbonnier on
    the motion-compensated intermediate (P-frames of compensated variants)
    and the codelength regularizer of each rate over its active entries.
    Terms are averaged over frames.
    """
    cfg = coder.cfg
    n, t_count, _, h, w = clips.shape
    state = coder.initial_state(h, w, n)
    total = None
    ms_sum = ch_sum = reg_sum = 0.0
    bits = np.zeros(cfg.R)
    pixels = np.zeros(cfg.R)
    recons = []
    for t in range(t_count):
        x = Tensor(clips[:, t])
        recon, state, diag, codes_hat = coder.step(x, state, masks[:, t])
        ms = T.mean(1.0 - weighted_ms_ssim(x, recon))
        frame_loss = ms
        ms_sum += ms.item()
        if t > 0 and "compensated" in diag:
            ch = charbonnier(diag["compensated"], x) * charbonnier_weight
            frame_loss = frame_loss + ch
            ch_sum += ch.item()
        for r, c_hat in enumerate(codes_hat):
            m = masks[:, t, r : r + 1]
            if m.any():
                reg = codelength_regularizer(c_hat, regs[r], cfg.B, m)
                frame_loss = frame_loss + reg
                reg_sum += reg.item()
                for i in range(n):
                    active = m[i, 0]
                    if active.any():
                        b, _ = bitplane_decompose(c_hat.data[i], cfg.B)
                        bits[r] += ideal_codelength(b, cfg.context, active)
                        pixels[r] += active.sum() * cfg.downsample**2
        total = frame_loss if total is None else total + frame_loss
        recons.append(recon.data)
    scale = 1.0 / t_count
    return StepOutput(total * scale, ms_sum * scale, ch_sum * scale, reg_sum * scale, bits, pixels, recons)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


LOG_FIELDS = ["iter", "total_loss", "msssim_term", "charbonnier_term", "reg_term", "bpp_observed"]


def _dump_batch(cfg: TrainConfig, it: int, clips: np.ndarray, masks: np.ndarray) -> Path:
    path = Path(cfg.dump_dir) / f"nan_batch_iter{it}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, clips=clips, masks=masks, iteration=it)
    return path


class Trainer:
    """Adam over the unrolled loss, with per-rate alpha feedback."""

    def __init__(self, coder: VideoCoder, data, cfg: TrainConfig, clip_sampler=None):
        self.coder = coder
        self.cfg = cfg
        self.data = data
        self.sampler = clip_sampler
        self.rng = np.random.default_rng(cfg.seed)
        self.adam = AdamState()
        targets = list(cfg.targets) if cfg.targets is not None else target_schedule(coder.cfg.R)
        if len(targets) != coder.cfg.R:
            raise ConfigurationError(f"{len(targets)} targets for {coder.cfg.R} rates")
        self.regs = [RegularizerState(cfg.alpha_init, t, cfg.eta) for t in targets]
        self.result = TrainResult()
        self.iteration = 0
        self._log_fh = None
        self._log_writer = None

    def _batch(self) -> np.ndarray:
        if self.sampler is not None:
            return self.sampler(self.rng, self.cfg.batch)
        clips, _ = self.data.sample(self.rng, self.cfg.batch)
        return clips

    def _open_log(self):
        if self.cfg.log_path and self._log_writer is None:
            Path(self.cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
            self._log_fh = open(self.cfg.log_path, "w", newline="")
            self._log_writer = csv.writer(self._log_fh)
            self._log_writer.writerow(LOG_FIELDS + [f"alpha_r{r + 1}" for r in range(self.coder.cfg.R)] + ["lr"])

    def step(self) -> dict:
        cfg, arch = self.cfg, self.coder.cfg
        it = self.iteration
        clips = self._batch()
        n, t_count, _, h, w = clips.shape
        grid = (h // arch.downsample, w // arch.downsample)
        _, masks = sample_rate_masks(self.rng, n, t_count, arch.R, grid)
        try:
            out = unrolled_loss(self.coder, clips, masks, self.regs, cfg.charbonnier_weight)
            if not math.isfinite(out.loss.item()):
                raise NonFiniteError("non-finite loss")
            self.coder.zero_grad()
            T.backward(out.loss)
            params = self.coder.parameters()
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
            lr = cfg.lr_at(it)
            adam_step(params, grads, self.adam, lr=lr)
        except (NonFiniteError, FloatingPointError) as exc:
            path = _dump_batch(cfg, it, clips, masks)
            raise TrainingError(f"non-finite value at iteration {it}; batch saved to {path}") from exc
        observed = []
        for r in range(arch.R):
            if out.pixels[r] > 0:
                obs = out.bits[r] / out.pixels[r]
                self.regs[r] = update_alpha(self.regs[r], obs)
                observed.append(obs)
        total_bits, total_pixels = out.bits.sum(), out.pixels.sum()
        row = {
            "iter": it,
            "total_loss": out.loss.item(),
            "msssim_term": out.msssim_term,
            "charbonnier_term": out.charbonnier_term,
            "reg_term": out.reg_term,
            "bpp_observed": total_bits / total_pixels if total_pixels else 0.0,
            "alphas": [s.alpha for s in self.regs],
            "lr": lr,
        }
        self.result.log.append(row)
        self._write_row(row)
        self.iteration += 1
        if cfg.checkpoint_every and cfg.checkpoint_dir and self.iteration % cfg.checkpoint_every == 0:
            self.save(Path(cfg.checkpoint_dir) / f"checkpoint_{self.iteration:07d}.lvcm")
        return row

    def _write_row(self, row: dict) -> None:
        self._open_log()
        if self._log_writer is None or row["iter"] % self.cfg.log_every:
            return
        vals = [row[k] for k in LOG_FIELDS] + row["alphas"] + [row["lr"]]
        self._log_writer.writerow([f"{v:.10g}" if isinstance(v, float) else v for v in vals])
        self._log_fh.flush()

    def run(self, iterations: int | None = None) -> TrainResult:
        todo = self.cfg.iterations - self.iteration if iterations is None else iterations
        for _ in range(todo):
            row = self.step()
            if row["iter"] % 100 == 0:
                log.info("iter %d loss %.5f bpp %.5f", row["iter"], row["total_loss"], row["bpp_observed"])
        self.result.regularizers = list(self.regs)
        if self._log_fh is not None:
            self._log_fh.close()
            self._log_fh = self._log_writer = None
        return self.result

    def save(self, path) -> bytes:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        return save_weights(path, self.coder.cfg.to_json(), self.coder.state_dict())


def train(cfg: TrainConfig, coder: VideoCoder, data, clip_sampler=None) -> TrainResult:
    return Trainer(coder, data, cfg, clip_sampler).run()


def pretrain_flow(coder: VideoCoder, pairs_sampler, iterations: int, lr: float = 1e-3, seed: int = 0) -> list[float]:
    """Supervised warm-up of the flow estimator on pairs with known flow.

    ``pairs_sampler(rng)`` returns (prev N×3×H×W, target, true_flow N×2×H×W).
    Returns the per-iteration mean absolute flow error.
    """
    rng = np.random.default_rng(seed)
    net = coder.flow_net
    adam = AdamState()
    errors = []
    for _ in range(iterations):
        prev, target, true_flow = pairs_sampler(rng)
        flow = net(Tensor(prev), Tensor(target))
        diff = flow - Tensor(true_flow)
        loss = T.mean(T.sqrt(diff * diff + 1e-6))
        net.zero_grad()
        T.backward(loss)
        params = net.parameters()
        adam_step(params, {k: p.grad for k, p in params.items()}, adam, lr=lr)
        errors.append(float(np.abs(flow.data - true_flow).mean()))
    return errors


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalPoint:
    video_id: str
    lam: float
    bpp: float
    msssim_weighted: float
    frame_reports: list


def evaluate(coder: VideoCoder, videos: dict[str, np.ndarray], lambdas, digest: bytes,
             block: int = 4, check_decode: bool = True) -> list[EvalPoint]:
    """Full encode/decode per video and threshold; BPP counts the whole file."""
    points = []
    for vid, frames in videos.items():
        frames = center_crop(np.asarray(frames, dtype=np.float64), coder.cfg.downsample)
        t_count, _, h, w = frames.shape
        for lam in lambdas:
            enc = encode_video(coder, frames, digest, lam=lam, block=block)
            recons = enc.recons
            if check_decode:
                decoded, _ = decode_video(coder, enc.data, digest)
                if not np.array_equal(decoded, enc.recons):
                    raise TrainingError(f"decoder mismatch on {vid}")
                recons = decoded
            rate = bits_per_pixel(len(enc.data), h, w, t_count)
            reports = [frame_quality(vid, t, frames[t], recons[t], 8.0 * enc.frame_bytes[t] / (h * w))
                       for t in range(t_count)]
            quality = float(np.mean([r.msssim_weighted for r in reports]))
            points.append(EvalPoint(vid, float(lam), rate, quality, reports))
    return points


def write_eval_csv(points: list[EvalPoint], path, codec: str = "lvc") -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["codec", "video_id", "lambda", "bpp", "msssim_weighted"])
        for p in points:
            wr.writerow([codec, p.video_id, f"{p.lam:g}", f"{p.bpp:.10g}", f"{p.msssim_weighted:.10f}"])

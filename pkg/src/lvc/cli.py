"""Command line entry point: ``lvc encode|decode|train|eval|curves``."""

from __future__ import annotations

import argparse
import csv
import glob
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .bench import RDCurve, RDPoint, import_external
from .container import decode_video, encode_video, model_hash
from .model import ArchConfig, VideoCoder
from .nn import load_weights
from .report import write_report
from .synthetic import translating_clip
from .training import TrainConfig, Trainer, evaluate, ingest, write_eval_csv
from .video import center_crop, read_video, write_y4m

log = logging.getLogger("lvc")


def load_model(path) -> tuple[VideoCoder, bytes]:
    arch, weights, raw = load_weights(path)
    coder = VideoCoder(ArchConfig.from_json(arch))
    coder.load_state_dict(weights)
    return coder, model_hash(raw)


def cmd_encode(args) -> int:
    coder, digest = load_model(args.model)
    frames = center_crop(read_video(args.input), coder.cfg.downsample)
    enc = encode_video(coder, frames, digest, lam=args.lam, block=args.block)
    Path(args.out).write_bytes(enc.data)
    t, _, h, w = frames.shape
    print(f"{args.out}: {len(enc.data)} bytes, {8 * len(enc.data) / (h * w * t):.5f} bpp")
    return 0


def cmd_decode(args) -> int:
    coder, digest = load_model(args.model)
    frames, _ = decode_video(coder, Path(args.input).read_bytes(), digest)
    write_y4m(args.out, np.clip(frames, [[[0.0]], [[-0.5]], [[-0.5]]], [[[1.0]], [[0.5]], [[0.5]]]))
    print(f"{args.out}: {frames.shape[0]} frames")
    return 0


def _train_sources(data: dict, seed: int):
    if "videos" in data:
        paths = []
        for pattern in data["videos"]:
            paths.extend(sorted(glob.glob(pattern)))
        return paths
    syn = data.get("synthetic", {})
    rng = np.random.default_rng(seed)
    count, frames, size = syn.get("clips", 16), syn.get("frames", 8), syn.get("size", 64)
    return [translating_clip(rng, frames, size, size, noise=syn.get("noise", 0.0)) for _ in range(count)]


def cmd_train(args) -> int:
    with open(args.config, "rb") as fh:
        conf = tomllib.load(fh)
    arch = ArchConfig(**conf.get("model", {}))
    tconf = conf.get("train", {})
    out = Path(tconf.pop("output", "model.lvcm"))
    cfg = TrainConfig(**tconf)
    index = ingest(_train_sources(conf.get("data", {}), cfg.seed), cfg.unroll, cfg.crop)
    trainer = Trainer(VideoCoder(arch), index, cfg)
    result = trainer.run()
    trainer.save(out)
    last = result.log[-1]
    print(f"{out}: {len(result.log)} iterations, final loss {last['total_loss']:.5f}, bpp {last['bpp_observed']:.5f}")
    return 0


def cmd_eval(args) -> int:
    coder, digest = load_model(args.model)
    paths = sorted(p for p in Path(args.videos).iterdir() if p.suffix in (".y4m", ".raw", ".f64"))
    videos = {p.stem: read_video(p) for p in paths}
    lambdas = [float(v) for v in args.lambdas.split(",")]
    points = evaluate(coder, videos, lambdas, digest, block=args.block)
    write_eval_csv(points, args.out, codec=args.codec)
    print(f"{args.out}: {len(points)} R-D points")
    return 0


def _read_ours(path, name: str) -> list[RDCurve]:
    groups: dict[str, list[RDPoint]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row["video_id"], []).append(
                RDPoint(row["video_id"], float(row["bpp"]), float(row["msssim_weighted"])))
    return [RDCurve(pts, vid, name) for vid, pts in sorted(groups.items())]


def cmd_curves(args) -> int:
    codecs = {args.name: _read_ours(args.ours, args.name)}
    baseline_paths = []
    for pattern in args.baselines:
        baseline_paths.extend(sorted(glob.glob(pattern)) or [pattern])
    codecs.update(import_external(baseline_paths))
    for p in write_report(args.out, codecs, args.name, args.points):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lvc", description="Learned low-latency video codec")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="compress a video")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="R-D slope threshold")
    p.add_argument("--block", type=int, default=4, help="rate-control block size in code cells")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress to y4m")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("train", help="train from a TOML config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="R-D points for a directory of videos")
    p.add_argument("--model", required=True)
    p.add_argument("--videos", required=True)
    p.add_argument("--lambdas", default="0.5,1,2,5,10")
    p.add_argument("--out", required=True)
    p.add_argument("--block", type=int, default=4)
    p.add_argument("--codec", default="lvc")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("curves", help="mean curves, relative sizes and plots")
    p.add_argument("--ours", required=True)
    p.add_argument("--baselines", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="lvc")
    p.add_argument("--points", type=int, default=20)
    p.set_defaults(func=cmd_curves)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""The video coder network for each architecture variant.

Variants, from simplest to most general:

NAIVE
    Frames are auto-encoded independently; no state, no compensation.
FLOW_RESIDUAL
    Flow and residual are estimated and compressed by two separate
    auto-encoders (separate codelayer channel groups).  The flow code
    carries the difference to the previously decoded flow.
JOINT
    One encoder/decoder pair compresses flow and residual together.  The
    state is exactly the previous reconstruction and flow.
LEARNED_STATE
    A latent state tensor is updated from the decoded code by a gated
    recurrent unit; a state-to-frame module renders the frame with
    single-flow compensation.
MULTI_FLOW
    As LEARNED_STATE, but the state-to-frame module emits K flows, K
    reference frames and a softmax mixture map.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .coding import ContextConfig, quantize_ste
from .flow import FlowEstimator, warp
from .nn import Conv, Module
from .tensor import DimensionError, Tensor


class ConfigError(ValueError):
    pass


class Variant(str, enum.Enum):
    NAIVE = "NAIVE"
    FLOW_RESIDUAL = "FLOW_RESIDUAL"
    JOINT = "JOINT"
    LEARNED_STATE = "LEARNED_STATE"
    MULTI_FLOW = "MULTI_FLOW"

    @property
    def code(self) -> int:
        return list(Variant).index(self)

    @classmethod
    def from_code(cls, code: int) -> "Variant":
        return list(Variant)[code]


@dataclass(frozen=True)
class ArchConfig:
    variant: Variant = Variant.MULTI_FLOW
    num_flows: int = 2
    width: int = 16
    flow_width: int = 16
    state_channels: int = 16
    code_channels: tuple[int, ...] = (8,)
    B: int = 6
    seed: int = 0
    # stride-2 stages between frame and codelayer grid
    stages: int = 3
    # entropy-coder context: causal in-plane neighbours and upper planes
    context_neighbors: int = 3
    context_planes: int = 3

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if isinstance(self.code_channels, int):
            object.__setattr__(self, "code_channels", (self.code_channels,))
        object.__setattr__(self, "code_channels", tuple(int(c) for c in self.code_channels))
        if self.variant is Variant.MULTI_FLOW:
            if self.num_flows < 2:
                raise ConfigError("MULTI_FLOW needs num_flows >= 2")
        else:
            object.__setattr__(self, "num_flows", 0 if self.variant is Variant.NAIVE else 1)
        if self.variant is Variant.FLOW_RESIDUAL and min(self.code_channels) < 2:
            raise ConfigError("FLOW_RESIDUAL splits each codelayer into flow and residual halves")
        if not 1 <= self.B <= 16:
            raise ConfigError("B must be in [1, 16]")
        if not self.code_channels or min(self.code_channels) < 1:
            raise ConfigError("every rate needs at least one code channel")
        if self.stages < 1:
            raise ConfigError("at least one downsampling stage is required")

    @property
    def downsample(self) -> int:
        return 2**self.stages

    @property
    def context(self) -> ContextConfig:
        return ContextConfig(self.context_neighbors, self.context_planes)

    @property
    def R(self) -> int:
        return len(self.code_channels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["code_channels"] = list(self.code_channels)
        d["K"] = self.num_flows
        d["C"] = list(self.code_channels)
        d["Y_divisor"] = self.downsample
        d["R"] = self.R
        d["widths"] = {"trunk": self.width, "flow": self.flow_width, "state": self.state_channels}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ArchConfig":
        if isinstance(d, str):
            d = json.loads(d)
        return cls(variant=d["variant"], num_flows=d.get("num_flows", d.get("K", 2)),
                   width=d["width"], flow_width=d["flow_width"], state_channels=d["state_channels"],
                   code_channels=tuple(d["code_channels"]), B=d["B"], seed=d.get("seed", 0),
                   stages=d.get("stages", 3), context_neighbors=d.get("context_neighbors", 3),
                   context_planes=d.get("context_planes", 3))

    def code_shape(self, h: int, w: int, rate: int = 1) -> tuple[int, int, int]:
        self.check_frame(h, w)
        return (self.code_channels[rate - 1], h // self.downsample, w // self.downsample)

    def check_frame(self, h: int, w: int) -> None:
        if h % self.downsample or w % self.downsample:
            raise DimensionError(f"frame {h}x{w} not divisible by {self.downsample}")


@dataclass
class CoderState:
    """Tensors carried from frame to frame (all zero before the first frame)."""

    tensors: list[Tensor]
    downsample: int = 8

    def detach(self) -> "CoderState":
        return CoderState([t.detach() for t in self.tensors], self.downsample)

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), False
    return x, True


def _unbatch(x: Tensor, batched: bool) -> Tensor:
    return x if batched else T.reshape(x, x.shape[1:])


class Trunk(Module):
    """Stride-2 stages from full resolution to the codelayer grid."""

    def __init__(self, cin: int, width: int, rng, extra_bottom: int = 0, stages: int = 3):
        self.down = [Conv(cin if i == 0 else width, width, rng, stride=2) for i in range(stages)]
        self.bottom = Conv(width + extra_bottom, width, rng)

    def __call__(self, x: Tensor, extra: Tensor | None = None) -> Tensor:
        for conv in self.down:
            x = T.leaky_relu(conv(x))
        if extra is not None:
            x = T.concat([x, extra], axis=1)
        return T.leaky_relu(self.bottom(x))


class Upsampler(Module):
    """Codelayer grid back to full resolution."""

    def __init__(self, cin: int, width: int, cout: int, rng, stages: int = 3):
        self.entry = Conv(cin, width, rng)
        self.up = [Conv(width, width, rng) for _ in range(stages)]
        self.head = Conv(width, cout, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.leaky_relu(self.entry(x))
        for conv in self.up:
            x = T.leaky_relu(conv(T.upsample2(x)))
        return self.head(x)


class Bottleneck(Module):
    """Rate-multiplexed codelayers: one single-conv encoder/decoder branch
    per rate (and per channel group)."""

    def __init__(self, width: int, code_channels: tuple[int, ...], groups: tuple[float, ...], rng):
        self.splits = [self._split(c, groups) for c in code_channels]
        self.enc = [[Conv(width, cg, rng) for cg in split] for split in self.splits]
        self.dec = [[Conv(cg, width, rng) for cg in split] for split in self.splits]
        self.ngroups = len(groups)

    @staticmethod
    def _split(c: int, groups) -> list[int]:
        if len(groups) == 1:
            return [c]
        first = c // 2
        return [first, c - first]

    def encode(self, features: list[Tensor], group: int | None = None) -> list[list[Tensor]]:
        """Per rate, per group codelayers in (-1, 1)."""
        out = []
        for branch in self.enc:
            out.append([T.tanh(conv(features[g])) if (group is None or g == group) else None
                        for g, conv in enumerate(branch)])
        return out

    def decode(self, codes: list[list[Tensor]], masks: np.ndarray, group: int) -> Tensor:
        """Sum of decoder-branch outputs of the masked codelayers for one group."""
        total = None
        for r, branch in enumerate(self.dec):
            u = masks[:, r : r + 1]
            y = branch[group](codes[r][group] * u)
            total = y if total is None else total + y
        return total


def compensate(refs: list[Tensor], flows: list[Tensor], weights: Tensor | None) -> Tensor:
    """Mixture of warped references; ``weights`` is N×K×H×W (None for K=1)."""
    warped = [warp(r, f) for r, f in zip(refs, flows)]
    if weights is None:
        return warped[0]
    out = None
    for k, wk in enumerate(warped):
        term = wk * weights[:, k : k + 1]
        out = term if out is None else out + term
    return out


class StateUpdate(Module):
    """s' = g*s + (1-g)*h with g = sigmoid(conv), h = tanh(conv)."""

    def __init__(self, state_channels: int, width: int, rng):
        self.conv = Conv(state_channels + width, 2 * state_channels, rng)
        self.cs = state_channels

    def __call__(self, state: Tensor, feats: Tensor) -> Tensor:
        z = self.conv(T.concat([state, feats], axis=1))
        gate = T.sigmoid(z[:, : self.cs])
        cand = T.tanh(z[:, self.cs :])
        return gate * state + (1.0 - gate) * cand


class StateToFrame(Module):
    """Renders a frame from the latent state and the pixel-space memory.

    Emits K flow updates (added to the previous flows), K reference
    corrections (added to the previous reconstruction), K mixture logits
    and a residual.
    """

    def __init__(self, state_channels: int, width: int, num_flows: int, rng, stages: int = 3):
        self.k = num_flows
        self.net = Upsampler(state_channels + width, width, 6 * num_flows + 3, rng, stages)

    def __call__(self, latent: Tensor, feats: Tensor, prev: Tensor, prev_flows: Tensor):
        out = self.net(T.concat([latent, feats], axis=1))
        k = self.k
        flows = [prev_flows[:, 2 * i : 2 * i + 2] + out[:, 2 * i : 2 * i + 2] for i in range(k)]
        refs = [prev + out[:, 2 * k + 3 * i : 2 * k + 3 * i + 3] for i in range(k)]
        logits = out[:, 5 * k : 6 * k]
        residual = out[:, 6 * k : 6 * k + 3]
        weights = T.softmax(logits, axis=1) if k > 1 else None
        return flows, refs, weights, residual


class VideoCoder(Module):
    """Encoder, decoder and state machinery for one architecture variant."""

    def __init__(self, cfg: ArchConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        v = cfg.variant
        w = cfg.width
        st = cfg.stages
        if v is not Variant.NAIVE:
            self.flow_net = FlowEstimator(rng, cfg.flow_width)
        if v is Variant.NAIVE:
            self.encoder = Trunk(3, w, rng, stages=st)
            self.bottleneck = Bottleneck(w, cfg.code_channels, (1.0,), rng)
            self.decoder = Upsampler(w, w, 3, rng, st)
        elif v is Variant.FLOW_RESIDUAL:
            self.flow_encoder = Trunk(2 + 3, w, rng, stages=st)
            self.residual_encoder = Trunk(3, w, rng, stages=st)
            self.bottleneck = Bottleneck(w, cfg.code_channels, (0.5, 0.5), rng)
            self.flow_decoder = Upsampler(w, w, 2, rng, st)
            self.residual_decoder = Upsampler(w, w, 3, rng, st)
        elif v is Variant.JOINT:
            self.encoder = Trunk(11, w, rng, stages=st)
            self.bottleneck = Bottleneck(w, cfg.code_channels, (1.0,), rng)
            self.decoder = Upsampler(w, w, 5, rng, st)
        else:
            cs = cfg.state_channels
            self.encoder = Trunk(11, w, rng, extra_bottom=cs, stages=st)
            self.bottleneck = Bottleneck(w, cfg.code_channels, (1.0,), rng)
            self.decoder_entry = Conv(w, w, rng)
            self.update = StateUpdate(cs, w, rng)
            self.state_to_frame = StateToFrame(cs, w, cfg.num_flows, rng, st)

    # -- state -------------------------------------------------------------

    def initial_state(self, h: int, w: int, batch: int | None = None) -> CoderState:
        self.cfg.check_frame(h, w)
        n = 1 if batch is None else batch
        d = self.cfg.downsample
        v = self.cfg.variant
        if v is Variant.NAIVE:
            shapes = []
        elif v in (Variant.FLOW_RESIDUAL, Variant.JOINT):
            shapes = [(n, 3, h, w), (n, 2, h, w)]
        else:
            k = self.state_to_frame.k
            shapes = [(n, self.cfg.state_channels, h // d, w // d), (n, 3, h, w), (n, 2 * k, h, w)]
        tensors = [Tensor(np.zeros(s if batch is not None else s[1:])) for s in shapes]
        return CoderState(tensors, d)

    def _check_state(self, state: CoderState, batched: bool) -> list[Tensor]:
        expected = {Variant.NAIVE: 0, Variant.FLOW_RESIDUAL: 2, Variant.JOINT: 2}.get(self.cfg.variant, 3)
        if len(state.tensors) != expected:
            raise ConfigError(f"{self.cfg.variant.value} expects {expected} state tensors, got {len(state.tensors)}")
        return [t if batched else T.reshape(t, (1,) + t.shape) for t in state.tensors]

    # -- masks -------------------------------------------------------------

    def _masks(self, masks, n: int, y: int, x: int) -> np.ndarray:
        """Normalize to an N×R×Y×X float array."""
        r = self.cfg.R
        if masks is None:
            if r != 1:
                raise ConfigError("masks are required when the model has several rates")
            return np.ones((n, 1, y, x))
        m = np.asarray(masks, dtype=np.float64)
        if m.ndim == 3:
            m = m[None]
        if m.shape[1:] != (r, y, x):
            raise DimensionError(f"masks shape {m.shape} does not match R={r}, grid {y}x{x}")
        return np.broadcast_to(m, (n, r, y, x))

    # -- encoder -----------------------------------------------------------

    def encode_frame(self, target, state: CoderState, masks=None) -> list[Tensor]:
        """Codelayers (one per rate) for ``target`` given the previous state.

        Values are in (-1, 1) and not yet quantized.
        """
        x, batched = _batched(target)
        n, _, h, w = x.shape
        self.cfg.check_frame(h, w)
        st = self._check_state(state, batched)
        d = self.cfg.downsample
        m = self._masks(masks, n, h // d, w // d)
        v = self.cfg.variant
        if v is Variant.NAIVE:
            codes = self.bottleneck.encode([self.encoder(x)])
        elif v is Variant.FLOW_RESIDUAL:
            prev, prev_flow = st
            flow = self.flow_net(prev, x)
            codes = self.bottleneck.encode([self.flow_encoder(T.concat([flow - prev_flow, prev], axis=1)), None], 0)
            q = [[quantize_ste(c[0], self.cfg.B), None] for c in codes]
            flow_hat = prev_flow + self.flow_decoder(self.bottleneck.decode(q, m, 0))
            residual = x - warp(prev, flow_hat)
            rcodes = self.bottleneck.encode([None, self.residual_encoder(residual)], 1)
            codes = [[c[0], rc[1]] for c, rc in zip(codes, rcodes)]
        elif v is Variant.JOINT:
            prev, prev_flow = st
            flow = self.flow_net(prev, x)
            feats = T.concat([x, prev, flow - prev_flow, x - warp(prev, flow)], axis=1)
            codes = self.bottleneck.encode([self.encoder(feats)])
        else:
            latent, prev, prev_flows = st
            flow = self.flow_net(prev, x)
            feats = T.concat([x, prev, x - prev, flow - prev_flows[:, :2]], axis=1)
            codes = self.bottleneck.encode([self.encoder(feats, latent)])
        out = [c[0] if len(c) == 1 else T.concat(c, axis=1) for c in codes]
        return [_unbatch(c, batched) for c in out]

    # -- decoder -----------------------------------------------------------

    def decode_frame(self, codes_hat: list, state: CoderState, masks=None):
        """Reconstruct a frame from dequantized codelayers and the state.

        Returns ``(reconstruction, new_state, diagnostics)``.  Only the
        masked codelayer values influence the output.
        """
        if len(codes_hat) != self.cfg.R:
            raise ConfigError(f"expected {self.cfg.R} codelayers, got {len(codes_hat)}")
        batched = T.as_tensor(codes_hat[0]).ndim == 4
        codes = [T.as_tensor(c) if batched else T.reshape(T.as_tensor(c), (1,) + c.shape) for c in codes_hat]
        n, _, y, x = codes[0].shape
        for r, c in enumerate(codes):
            if c.shape[1:] != (self.cfg.code_channels[r], y, x):
                raise DimensionError(f"codelayer {r + 1} shape {c.shape} does not match config")
        st = self._check_state(state, batched)
        m = self._masks(masks, n, y, x)
        v = self.cfg.variant
        diag: dict[str, Tensor] = {}
        if v is Variant.NAIVE:
            recon = self.decoder(self.bottleneck.decode([[c] for c in codes], m, 0))
            new = []
        elif v is Variant.FLOW_RESIDUAL:
            prev, prev_flow = st
            split = [[c[:, : s[0]], c[:, s[0] :]] for c, s in zip(codes, self.bottleneck.splits)]
            flow_hat = prev_flow + self.flow_decoder(self.bottleneck.decode(split, m, 0))
            mc = warp(prev, flow_hat)
            residual = self.residual_decoder(self.bottleneck.decode(split, m, 1))
            recon = mc + residual
            new = [recon, flow_hat]
            diag.update(flow=flow_hat, compensated=mc, residual=residual)
        elif v is Variant.JOINT:
            prev, prev_flow = st
            out = self.decoder(self.bottleneck.decode([[c] for c in codes], m, 0))
            flow_hat = prev_flow + out[:, :2]
            mc = warp(prev, flow_hat)
            residual = out[:, 2:]
            recon = mc + residual
            new = [recon, flow_hat]
            diag.update(flow=flow_hat, compensated=mc, residual=residual)
        else:
            latent, prev, prev_flows = st
            feats = T.leaky_relu(self.decoder_entry(self.bottleneck.decode([[c] for c in codes], m, 0)))
            latent = self.update(latent, feats)
            # the fresh decoder features bypass the gate
            flows, refs, weights, residual = self.state_to_frame(latent, feats, prev, prev_flows)
            mc = compensate(refs, flows, weights)
            recon = mc + residual
            new = [latent, recon, T.concat(flows, axis=1)]
            diag.update(flow=flows[0], flows=flows, references=refs, compensated=mc, residual=residual)
            if weights is not None:
                diag["weights"] = weights
        new_state = CoderState([_unbatch(t, batched) for t in new], self.cfg.downsample)
        diag = {k: ([_unbatch(t, batched) for t in val] if isinstance(val, list) else _unbatch(val, batched))
                for k, val in diag.items()}
        return _unbatch(recon, batched), new_state, diag

    # -- training step -----------------------------------------------------

    def step(self, target, state: CoderState, masks=None):
        """Encode, quantize (straight-through) and decode one frame.

        Returns ``(reconstruction, new_state, diagnostics, codes_hat)``.
        """
        codes = self.encode_frame(target, state, masks)
        codes_hat = [quantize_ste(c, self.cfg.B) for c in codes]
        recon, new_state, diag = self.decode_frame(codes_hat, state, masks)
        return recon, new_state, diag, codes_hat

    def code_iframe(self, target, masks=None):
        """First frame of a stream: the same model with an all-zero state."""
        x = T.as_tensor(target)
        h, w = x.shape[-2:]
        state = self.initial_state(h, w, x.shape[0] if x.ndim == 4 else None)
        recon, new_state, diag, codes_hat = self.step(x, state, masks)
        return codes_hat, recon, new_state


def build_coder(cfg: ArchConfig, weights: dict | None = None) -> VideoCoder:
    coder = VideoCoder(cfg)
    if weights is not None:
        coder.load_state_dict(weights)
    return coder

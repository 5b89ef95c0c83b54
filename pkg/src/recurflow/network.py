"""Siamese pyramid encoder, the recurrent estimation cell, and its unrolling
over scales (coarse to fine) and time (consecutive frame pairs).
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .flow_ops import correlation, warp
from .tensor import (
    Parameter,
    Tensor,
    add,
    avg_pool2x,
    concat,
    conv2d,
    is_grad_enabled,
    leaky_relu,
    no_grad,
    sigmoid,
    upsample2x,
)

TEMPORAL_MODES = ("none", "TRFlow", "TRFeat")


@dataclass
class ModelConfig:
    levels: int = 4
    # one entry per pyramid level, finest first
    encoder_widths: tuple[int, ...] = (16, 32, 32, 32)
    adapter_width: int = 32
    estimator_widths: tuple[int, ...] = (32, 32, 16)
    context_widths: tuple[int, ...] = (32, 32, 32)
    context_dilations: tuple[int, ...] = (1, 2, 4, 1)
    kernel_size: int = 3
    max_disp: int = 2
    temporal_channels: int = 16
    in_channels: int = 3
    use_occlusion: bool = True
    temporal_mode: str = "TRFeat"
    share_decoder_across_scales: bool = True
    seq_len: int = 4
    backward_flow_grad: bool = False
    temporal_init: str = "zero"
    flow_head_scale: float = 0.1
    slope: float = 0.1

    def __post_init__(self):
        self.encoder_widths = tuple(int(c) for c in self.encoder_widths)
        self.estimator_widths = tuple(int(c) for c in self.estimator_widths)
        self.context_widths = tuple(int(c) for c in self.context_widths)
        self.context_dilations = tuple(int(d) for d in self.context_dilations)
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if len(self.encoder_widths) != self.levels:
            raise ConfigError(
                f"encoder_widths has {len(self.encoder_widths)} entries for {self.levels} levels"
            )
        if len(self.estimator_widths) < 1:
            raise ConfigError("estimator_widths must not be empty")
        if len(self.context_widths) != len(self.context_dilations) - 1:
            raise ConfigError("context_widths needs exactly one entry fewer than context_dilations")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel_size must be odd")
        if self.max_disp < 1:
            raise ConfigError("max_disp must be >= 1")
        if self.temporal_mode not in TEMPORAL_MODES:
            raise ConfigError(f"temporal_mode must be one of {TEMPORAL_MODES}, got {self.temporal_mode!r}")
        if self.temporal_init not in ("zero", "kaiming"):
            raise ConfigError("temporal_init must be 'zero' or 'kaiming'")
        if self.seq_len < 2:
            raise ConfigError("seq_len must be >= 2")

    @property
    def corr_channels(self) -> int:
        return (2 * self.max_disp + 1) ** 2

    @property
    def head_channels(self) -> int:
        return 3 if self.use_occlusion else 2

    @property
    def temporal_in_channels(self) -> int:
        if self.temporal_mode == "TRFeat":
            return self.temporal_channels
        if self.temporal_mode == "TRFlow":
            return 2
        return 0

    @property
    def decoder_in_channels(self) -> int:
        # cost volume | adapted reference features | upsampled flow | upsampled occlusion
        return self.corr_channels + self.adapter_width + 2 + 1

    @property
    def downsample(self) -> int:
        return 2**self.levels

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class StarCellState:
    """Temporal features carried from one frame pair to the next, per level (coarse first)."""

    features: list[Tensor | None] = field(default_factory=list)
    valid: bool = False

    @classmethod
    def invalid(cls, levels: int) -> "StarCellState":
        return cls([None] * levels, False)


@dataclass
class PairOutput:
    """Per-level predictions for one frame pair, coarse to fine."""

    flows: list[Tensor]
    occlusions: list[Tensor | None]
    state: StarCellState

    @property
    def flow(self) -> Tensor:
        return self.flows[-1]

    @property
    def occlusion(self) -> Tensor | None:
        return self.occlusions[-1]


@dataclass
class SequenceOutput:
    pairs: list[PairOutput]
    backward_flows: list[list[Tensor]]


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Conv:
    """A single conv layer owning its weight and (optional) bias Parameters."""

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        k: int,
        seed: int,
        stride: int = 1,
        dilation: int = 1,
        bias: bool = True,
        init_scale: float = 1.0,
    ):
        self.name = name
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k // 2)
        std = np.sqrt(2.0 / (cin * k * k)) * init_scale
        w = _param_rng(seed, name + ".weight").standard_normal((cout, cin, k, k)) * std
        self.weight = Parameter(w, name + ".weight")
        self.bias = Parameter(np.zeros(cout), name + ".bias") if bias else None

    def parameters(self) -> list[Parameter]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding, dilation=self.dilation)


class Encoder:
    """Two convs per level (stride 2 then stride 1); the same weights for every frame."""

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.layers: list[tuple[Conv, Conv]] = []
        cin = cfg.in_channels
        for i, cout in enumerate(cfg.encoder_widths):
            a = Conv(f"encoder.level{i + 1}.conv1", cin, cout, cfg.kernel_size, seed, stride=2)
            b = Conv(f"encoder.level{i + 1}.conv2", cout, cout, cfg.kernel_size, seed)
            self.layers.append((a, b))
            cin = cout

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for conv in pair for p in conv.parameters()]

    def __call__(self, image: Tensor) -> list[Tensor]:
        # centred input; each level emits its pre-activation features, which
        # are roughly zero-mean and give a far sharper cost volume at init
        feats = []
        x = (image - 0.5) * 2.0
        s = self.cfg.slope
        for a, b in self.layers:
            y = b(leaky_relu(a(x), s))
            feats.append(y)
            x = leaky_relu(y, s)
        return feats[::-1]


class Decoder:
    """Flow(+occlusion) estimator, context network and temporal in/out convs.

    With scale sharing a single instance serves every level.
    """

    def __init__(self, cfg: ModelConfig, prefix: str, seed: int):
        self.cfg = cfg
        k = cfg.kernel_size
        widths = cfg.estimator_widths
        self.estimator: list[Conv] = []
        cin = cfg.decoder_in_channels
        for i, cout in enumerate(widths):
            self.estimator.append(Conv(f"{prefix}.estimator.conv{i + 1}", cin, cout, k, seed))
            cin = cout
        self.head = Conv(f"{prefix}.estimator.head", cin, cfg.head_channels, k, seed, init_scale=cfg.flow_head_scale)

        self.context: list[Conv] = []
        cin = widths[-1] + 3
        outs = list(cfg.context_widths) + [2]
        for i, (cout, dil) in enumerate(zip(outs, cfg.context_dilations)):
            last = i == len(outs) - 1
            self.context.append(
                Conv(
                    f"{prefix}.context.conv{i + 1}",
                    cin,
                    cout,
                    k,
                    seed,
                    dilation=dil,
                    init_scale=cfg.flow_head_scale if last else 1.0,
                )
            )
            cin = cout

        self.temporal_input: Conv | None = None
        self.compress: Conv | None = None
        if cfg.temporal_in_channels:
            self.temporal_input = Conv(
                f"{prefix}.temporal.input",
                cfg.temporal_in_channels,
                widths[0],
                k,
                seed,
                bias=False,
                init_scale=0.0 if cfg.temporal_init == "zero" else 1.0,
            )
        if cfg.temporal_mode == "TRFeat":
            self.compress = Conv(f"{prefix}.temporal.compress", widths[-1], cfg.temporal_channels, 1, seed)

    def submodules(self) -> dict[str, list[Parameter]]:
        groups = {
            "estimator": [p for c in self.estimator for p in c.parameters()] + [self.head.weight, self.head.bias],
            "context": [p for c in self.context for p in c.parameters()],
            "temporal": [],
        }
        if self.temporal_input is not None:
            groups["temporal"] += self.temporal_input.parameters()
        if self.compress is not None:
            groups["temporal"] += self.compress.parameters()
        return groups

    def parameters(self) -> list[Parameter]:
        return [p for ps in self.submodules().values() for p in ps]


# --------------------------------------------------------------------------
# the network
# --------------------------------------------------------------------------


def _zeros(b: int, c: int, h: int, w: int) -> Tensor:
    return Tensor(np.zeros((b, c, h, w)))


class RecurrentFlowNet:
    """Multi-frame flow and occlusion estimator recurrent over scale and time."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.seed = seed
        cfg = self.config
        self.encoder = Encoder(cfg, seed)
        # 1x1 projection of each level's reference features to a common width,
        # so one decoder can read every level
        self.adapters = [
            Conv(f"adapter.level{i + 1}", c, cfg.adapter_width, 1, seed) for i, c in enumerate(cfg.encoder_widths)
        ][::-1]
        if cfg.share_decoder_across_scales:
            shared = Decoder(cfg, "decoder", seed)
            self.decoders = [shared] * cfg.levels
        else:
            # level index counts from the finest (1) like the encoder
            self.decoders = [Decoder(cfg, f"decoder.level{cfg.levels - i}", seed) for i in range(cfg.levels)]

    # -- parameters -----------------------------------------------------------
    def parameters(self) -> list[Parameter]:
        out: list[Parameter] = []
        seen: set[int] = set()
        groups = [self.encoder.parameters()]
        groups += [a.parameters() for a in self.adapters]
        groups += [d.parameters() for d in self.decoders]
        for ps in groups:
            for p in ps:
                if id(p) not in seen:
                    seen.add(id(p))
                    out.append(p)
        return out

    def named_parameters(self) -> dict[str, Parameter]:
        params = self.parameters()
        named = {p.name: p for p in params}
        if len(named) != len(params):
            raise ContractError("duplicate parameter names")
        return named

    def parameter_breakdown(self) -> dict[str, int]:
        """Scalar counts per submodule, each distinct Parameter counted once."""
        seen: set[int] = set()
        counts = {"encoder": 0, "adapter": 0, "estimator": 0, "occlusion_head": 0, "context": 0, "temporal": 0}

        def add_params(key, ps):
            for p in ps:
                if id(p) not in seen:
                    seen.add(id(p))
                    counts[key] += p.size

        add_params("encoder", self.encoder.parameters())
        for a in self.adapters:
            add_params("adapter", a.parameters())
        for d in self.decoders:
            for key, ps in d.submodules().items():
                add_params(key, ps)
        # report the occlusion channel of the head separately
        if self.config.use_occlusion:
            heads = {id(d.head.weight): d.head for d in self.decoders}
            k = self.config.kernel_size
            per_head = k * k * self.config.estimator_widths[-1] + 1
            counts["estimator"] -= per_head * len(heads)
            counts["occlusion_head"] += per_head * len(heads)
        counts["decoder"] = counts["estimator"] + counts["occlusion_head"] + counts["context"] + counts["temporal"]
        counts["total"] = counts["encoder"] + counts["adapter"] + counts["decoder"]
        return counts

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    # -- building blocks --------------------------------------------------------
    def encode(self, image: Tensor) -> list[Tensor]:
        """Feature pyramid of one image, coarsest level first."""
        if image.ndim != 4:
            raise DimensionError(f"encode: image must be 4-D (B,C,H,W), got rank {image.ndim}")
        if image.shape[1] != self.config.in_channels:
            raise DimensionError(
                f"encode: channel axis 1 has {image.shape[1]}, expected {self.config.in_channels}"
            )
        h, w = image.shape[2:]
        d = self.config.downsample
        if h % d or w % d:
            raise ConfigError(f"image size {h}x{w} is not divisible by 2^levels = {d}")
        return self.encoder(image)

    def star_cell(
        self,
        level: int,
        feat1: Tensor,
        feat2: Tensor,
        up_flow: Tensor | None,
        up_occ: Tensor | None,
        temporal_in: Tensor | None,
    ) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """One application of the cell at pyramid ``level`` (0 = coarsest).

        Returns the refined flow, the occlusion probability map (None when the
        occlusion channel is disabled) and the compressed features handed to
        the next time step (None unless temporal_mode is TRFeat).
        """
        cfg = self.config
        s = cfg.slope
        b, _, h, w = feat1.shape
        if up_flow is None:
            up_flow = _zeros(b, 2, h, w)
            f2w = feat2
        else:
            if up_flow.shape != (b, 2, h, w):
                raise DimensionError(f"star_cell: up_flow shape {up_flow.shape} does not match level {(b, 2, h, w)}")
            f2w = warp(feat2, up_flow)
        if up_occ is None:
            up_occ = _zeros(b, 1, h, w)

        dec = self.decoders[level]
        cv = leaky_relu(correlation(feat1, f2w, cfg.max_disp), s)
        ref = leaky_relu(self.adapters[level](feat1), s)
        x = concat([cv, ref, up_flow, up_occ], axis=1)

        y = dec.estimator[0](x)
        if dec.temporal_input is not None:
            if temporal_in is None:
                temporal_in = _zeros(b, cfg.temporal_in_channels, h, w)
            elif temporal_in.shape != (b, cfg.temporal_in_channels, h, w):
                raise ContractError(
                    f"star_cell: temporal state shape {temporal_in.shape} != {(b, cfg.temporal_in_channels, h, w)}"
                )
            y = add(y, dec.temporal_input(temporal_in))
        y = leaky_relu(y, s)
        for conv in dec.estimator[1:]:
            y = leaky_relu(conv(y), s)
        penultimate = y

        head = dec.head(penultimate)
        flow = up_flow + head[:, 0:2]
        occ = sigmoid(head[:, 2:3]) if cfg.use_occlusion else None

        c = concat([penultimate, flow, occ if occ is not None else _zeros(b, 1, h, w)], axis=1)
        for conv in dec.context[:-1]:
            c = leaky_relu(conv(c), s)
        flow = flow + dec.context[-1](c)

        state = dec.compress(penultimate) if dec.compress is not None else None
        return flow, occ, state

    def _pair(self, pyr1: Sequence[Tensor], pyr2: Sequence[Tensor], state: StarCellState | None) -> PairOutput:
        cfg = self.config
        use_state = state is not None and state.valid and cfg.temporal_mode != "none"
        flows: list[Tensor] = []
        occs: list[Tensor | None] = []
        feats: list[Tensor | None] = []
        up_flow = up_occ = None
        for level in range(cfg.levels):
            t_in = state.features[level] if use_state else None
            flow, occ, f = self.star_cell(level, pyr1[level], pyr2[level], up_flow, up_occ, t_in)
            flows.append(flow)
            occs.append(occ)
            feats.append(f)
            if level + 1 < cfg.levels:
                up_flow = upsample2x(flow) * 2.0
                up_occ = upsample2x(occ) if occ is not None else None
        return PairOutput(flows, occs, StarCellState(feats, cfg.temporal_mode == "TRFeat"))

    def forward_pair(self, image1: Tensor, image2: Tensor, state_in: StarCellState | None = None) -> PairOutput:
        if image1.shape != image2.shape:
            raise DimensionError(f"forward_pair: image shapes differ ({image1.shape} vs {image2.shape})")
        return self._pair(self.encode(image1), self.encode(image2), state_in)

    def _backward_levels(self, pyr_t: Sequence[Tensor], pyr_prev: Sequence[Tensor]) -> list[Tensor]:
        if self.config.backward_flow_grad and is_grad_enabled():
            return self._pair(pyr_t, pyr_prev, None).flows
        with no_grad():
            flows = self._pair(pyr_t, pyr_prev, None).flows
        return [Tensor(f.values) for f in flows]

    def estimate_backward_flow(self, image_t: Tensor, image_prev: Tensor) -> Tensor:
        """Flow from ``image_t`` to ``image_prev`` at the finest level, temporal input zeroed."""
        if image_t.shape != image_prev.shape:
            raise DimensionError("estimate_backward_flow: image shapes differ")
        return self._backward_levels(self.encode(image_t), self.encode(image_prev))[-1]

    def temporal_connect_trflow(self, prev_flow: Tensor, backward_flow: Tensor) -> StarCellState:
        """Previous finest-level flow, aligned to the current frame and pooled to every level."""
        if self.config.temporal_mode != "TRFlow":
            raise ContractError(f"temporal_connect_trflow needs temporal_mode TRFlow, got {self.config.temporal_mode}")
        aligned = warp(prev_flow, backward_flow)
        feats: list[Tensor] = [aligned]
        x = aligned
        for _ in range(self.config.levels - 1):
            x = avg_pool2x(x) * 0.5
            feats.append(x)
        return StarCellState(feats[::-1], True)

    def _warp_state(self, state: StarCellState, back_levels: Sequence[Tensor]) -> StarCellState:
        return StarCellState([warp(f, u) for f, u in zip(state.features, back_levels)], True)

    def forward_sequence(self, frames: Sequence[Tensor], temporal: bool = True) -> SequenceOutput:
        """Estimate flow for each consecutive pair, threading the temporal state.

        ``temporal=False`` runs every pair independently (two-frame behaviour).
        """
        if len(frames) < 2:
            raise ContractError(f"forward_sequence needs at least 2 frames, got {len(frames)}")
        shape = frames[0].shape
        for f in frames[1:]:
            if f.shape != shape:
                raise DimensionError("forward_sequence: frames differ in shape")
        cfg = self.config
        pyramids = [self.encode(f) for f in frames]
        mode = cfg.temporal_mode if temporal else "none"
        state: StarCellState | None = None
        pairs: list[PairOutput] = []
        backs: list[list[Tensor]] = []
        for t in range(len(frames) - 1):
            if t > 0 and mode != "none":
                back = self._backward_levels(pyramids[t], pyramids[t - 1])
                backs.append(back)
                if mode == "TRFeat":
                    state = self._warp_state(pairs[-1].state, back)
                else:
                    state = self.temporal_connect_trflow(pairs[-1].flow, back[-1])
            out = self._pair(pyramids[t], pyramids[t + 1], state)
            pairs.append(out)
        return SequenceOutput(pairs, backs)


def full_resolution(flow: Tensor) -> Tensor:
    """Finest-level flow (half input resolution) brought to the input grid."""
    return upsample2x(flow) * 2.0


# --------------------------------------------------------------------------
# closed-form parameter counts
# --------------------------------------------------------------------------


def count_parameters(cfg: ModelConfig) -> dict[str, int]:
    """Number of distinct trainable scalars per submodule, from the config alone."""
    k2 = cfg.kernel_size**2

    def conv(cin, cout, k2=k2, bias=True):
        return k2 * cin * cout + (cout if bias else 0)

    encoder = 0
    cin = cfg.in_channels
    for c in cfg.encoder_widths:
        encoder += conv(cin, c) + conv(c, c)
        cin = c
    adapter = sum(conv(c, cfg.adapter_width, k2=1) for c in cfg.encoder_widths)

    est = 0
    cin = cfg.decoder_in_channels
    for c in cfg.estimator_widths:
        est += conv(cin, c)
        cin = c
    c_last = cfg.estimator_widths[-1]
    est += conv(c_last, 2)
    occ = k2 * c_last + 1 if cfg.use_occlusion else 0

    ctx = 0
    cin = c_last + 3
    for c in list(cfg.context_widths) + [2]:
        ctx += conv(cin, c)
        cin = c

    temporal = 0
    if cfg.temporal_in_channels:
        temporal += conv(cfg.temporal_in_channels, cfg.estimator_widths[0], bias=False)
    if cfg.temporal_mode == "TRFeat":
        temporal += conv(c_last, cfg.temporal_channels, k2=1)

    n_dec = 1 if cfg.share_decoder_across_scales else cfg.levels
    counts = {
        "encoder": encoder,
        "adapter": adapter,
        "estimator": est * n_dec,
        "occlusion_head": occ * n_dec,
        "context": ctx * n_dec,
        "temporal": temporal * n_dec,
    }
    counts["decoder"] = counts["estimator"] + counts["occlusion_head"] + counts["context"] + counts["temporal"]
    counts["total"] = encoder + adapter + counts["decoder"]
    return counts

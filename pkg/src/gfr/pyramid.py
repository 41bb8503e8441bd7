"""Multi-scale feature pyramid built by slice-wise feature reuse.

Every scale's block holds three equal channel slices: features pooled
down from the next-finer backbone tap, features freshly learned from
this scale's own tap, and features upsampled from the next-coarser tap.
Only the middle third is newly learned at full cost, which is where the
parameter savings over a learn-everything head come from.

All slices read raw backbone taps, never previously assembled blocks,
so the pyramid is a single sweep and block construction order cannot
change the result.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gate import GateOutput, GateParams, apply_gate
from .tensor import (
    Parameter,
    Tensor,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    crop_spatial,
    maxpool2d,
    relu,
    xavier_init,
    zeros_param,
)


@dataclass
class PyramidConfig:
    """Geometry of the pyramid: scale ladder and channel budget."""

    input_size: int = 320
    scale_sizes: tuple[int, ...] = (40, 20, 10, 5, 3, 2)
    channels_per_scale: int = 48
    bottleneck_mid: int = 16

    def __post_init__(self):
        self.scale_sizes = tuple(int(s) for s in self.scale_sizes)
        if len(self.scale_sizes) < 2:
            raise ValueError("need at least two scales")
        for a, b in zip(self.scale_sizes, self.scale_sizes[1:]):
            if b >= a:
                raise ValueError(f"scale sizes must strictly decrease, got {self.scale_sizes}")
            if b != -(-a // 2):
                raise ValueError(f"each scale must be ceil(previous/2): {a} -> {b}")
        if self.channels_per_scale % 3 != 0:
            raise ValueError("channels_per_scale must be divisible by 3")
        if self.input_size != self.scale_sizes[0] * 8:
            raise ValueError("input_size must be 8x the finest scale (backbone stride layout)")

    @property
    def num_scales(self) -> int:
        return len(self.scale_sizes)

    @property
    def slice_channels(self) -> int:
        return self.channels_per_scale // 3


@dataclass
class ConvPair:
    """One conv layer's weight and bias."""

    weight: Parameter
    bias: Parameter

    @classmethod
    def create(cls, c_in: int, c_out: int, k: int, rng: np.random.Generator, name: str) -> "ConvPair":
        w = xavier_init((c_out, c_in, k, k), c_in * k * k, c_out * k * k, rng, f"{name}.w")
        return cls(weight=w, bias=zeros_param((c_out,), f"{name}.b"))

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]


@dataclass
class BottleneckParams:
    """1x1 channel-reduce conv then 3x3 pad-1 conv, rectified after each."""

    reduce: ConvPair
    expand: ConvPair

    @classmethod
    def create(cls, c_in: int, mid: int, c_out: int, rng: np.random.Generator, name: str) -> "BottleneckParams":
        return cls(
            reduce=ConvPair.create(c_in, mid, 1, rng, f"{name}.reduce"),
            expand=ConvPair.create(mid, c_out, 3, rng, f"{name}.expand"),
        )

    def parameters(self) -> list[Parameter]:
        return self.reduce.parameters() + self.expand.parameters()


@dataclass
class ScaleParams:
    """Per-scale slice weights; the coarsest scale swaps `up` for `new2`."""

    down: ConvPair
    new: BottleneckParams
    up: ConvPair | None
    new2: BottleneckParams | None

    def parameters(self) -> list[Parameter]:
        out = self.down.parameters() + self.new.parameters()
        if self.up is not None:
            out += self.up.parameters()
        if self.new2 is not None:
            out += self.new2.parameters()
        return out


def downsample_path(lower: Tensor, params: ConvPair, steps: int = 1) -> Tensor:
    """Halve spatially `steps` times via 2x2/s2 ceil-mode pooling, then 1x1 conv."""
    x = lower
    for _ in range(steps):
        if min(x.shape[2], x.shape[3]) < 2:
            raise ValueError("cannot pool a spatial dimension of size 1")
        x = maxpool2d(x, 2, 2)
    return conv2d(x, params.weight, params.bias, stride=1, pad=0)


def upsample_path(higher: Tensor, params: ConvPair, out_size: int) -> Tensor:
    """2x bilinear upsample, crop top-left on odd-target overshoot, then 1x1 conv."""
    x = bilinear_upsample2x(higher)
    if x.shape[2] != out_size or x.shape[3] != out_size:
        if x.shape[2] < out_size or x.shape[3] < out_size:
            raise ValueError(f"upsampled size {x.shape[2:]} smaller than target {out_size}")
        x = crop_spatial(x, out_size, out_size)
    return conv2d(x, params.weight, params.bias, stride=1, pad=0)


def new_features(current: Tensor, params: BottleneckParams) -> Tensor:
    """Learn fresh features for one scale: 1x1 reduce, 3x3 expand, rectified."""
    x = relu(conv2d(current, params.reduce.weight, params.reduce.bias, stride=1, pad=0))
    return relu(conv2d(x, params.expand.weight, params.expand.bias, stride=1, pad=1))


# ---------------------------------------------------------------------------
# backbone

# The tap list handed to build_pyramid has num_scales + 1 entries: taps[0]
# sits at 4x the finest scale (input_size / 2) and feeds only the finest
# block's down path, which therefore pools twice; taps[k + 1] sits at
# scale_sizes[k].  The backbone adds one untapped intermediate stage at
# 2x the finest scale, so it runs num_scales + 2 stride-2 convs in total.


@dataclass
class BackboneParams:
    convs: list[ConvPair]

    @classmethod
    def create(cls, in_channels: int, channels: Sequence[int], rng: np.random.Generator) -> "BackboneParams":
        convs = []
        prev = in_channels
        for i, c in enumerate(channels):
            convs.append(ConvPair.create(prev, c, 3, rng, f"backbone.{i}"))
            prev = c
        return cls(convs=convs)

    def parameters(self) -> list[Parameter]:
        return [p for c in self.convs for p in c.parameters()]


def backbone_channels_for(config: PyramidConfig, channels: Sequence[int]) -> list[int]:
    expect = config.num_scales + 2
    if len(channels) != expect:
        raise ValueError(f"backbone needs {expect} conv widths for {config.num_scales} scales, got {len(channels)}")
    return list(channels)


def tap_channels_for(config: PyramidConfig, backbone_channels: Sequence[int]) -> list[int]:
    """Channel counts of the taps build_pyramid will see, in tap order."""
    chans = backbone_channels_for(config, backbone_channels)
    return [chans[0]] + chans[2:]


def run_backbone(image: Tensor, params: BackboneParams, config: PyramidConfig) -> list[Tensor]:
    """Stride-2 conv chain; returns taps [extra-at-4x-finest, one per scale]."""
    if image.shape[2] != config.input_size or image.shape[3] != config.input_size:
        raise ValueError(f"expected {config.input_size}x{config.input_size} input, got {image.shape[2:]}")
    taps = []
    x = image
    for i, conv in enumerate(params.convs):
        x = relu(conv2d(x, conv.weight, conv.bias, stride=2, pad=1))
        if i != 1:  # stage 1 (2x finest) is internal only
            taps.append(x)
    sizes = [t.shape[2] for t in taps]
    want = [config.scale_sizes[0] * 4] + list(config.scale_sizes)
    if sizes != want:
        raise ValueError(f"backbone produced tap sizes {sizes}, wanted {want}")
    return taps


# ---------------------------------------------------------------------------
# pyramid assembly


@dataclass
class PyramidParams:
    scales: list[ScaleParams]

    @classmethod
    def create(cls, config: PyramidConfig, tap_channels: Sequence[int], rng: np.random.Generator) -> "PyramidParams":
        n = config.num_scales
        if len(tap_channels) != n + 1:
            raise ValueError(f"need {n + 1} taps, got {len(tap_channels)}")
        third = config.slice_channels
        mid = config.bottleneck_mid
        scales = []
        for k in range(n):
            name = f"pyramid.{k}"
            down = ConvPair.create(tap_channels[k], third, 1, rng, f"{name}.down")
            new = BottleneckParams.create(tap_channels[k + 1], mid, third, rng, f"{name}.new")
            if k + 1 < n:
                up = ConvPair.create(tap_channels[k + 2], third, 1, rng, f"{name}.up")
                new2 = None
            else:
                up = None
                new2 = BottleneckParams.create(tap_channels[k + 1], mid, third, rng, f"{name}.new2")
            scales.append(ScaleParams(down=down, new=new, up=up, new2=new2))
        return cls(scales=scales)

    def parameters(self) -> list[Parameter]:
        return [p for s in self.scales for p in s.parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


@dataclass
class PyramidState:
    """Per-scale prediction blocks, plus gate records when gates ran.

    When gates are active, `blocks` holds the gated maps the predictors
    consume and `raw_blocks` the pre-gate maps (for diagnostics).
    """

    blocks: list[Tensor]
    gates: list[GateOutput] | None
    raw_blocks: list[Tensor] | None = None

    def __post_init__(self):
        third = {b.shape[1] for b in self.blocks}
        if len(third) != 1:
            raise ValueError(f"blocks disagree on channel count: {sorted(third)}")


def build_block(taps: Sequence[Tensor], k: int, params: ScaleParams, config: PyramidConfig) -> Tensor:
    """Assemble scale k's block: [down-slice | new-slice | up-or-new2-slice]."""
    size = config.scale_sizes[k]
    steps = 2 if k == 0 else 1  # taps[0] sits at 4x the finest scale
    down = downsample_path(taps[k], params.down, steps=steps)
    new = new_features(taps[k + 1], params.new)
    if params.up is not None:
        last = upsample_path(taps[k + 2], params.up, size)
    else:
        last = new_features(taps[k + 1], params.new2)
    for slice_ in (down, new, last):
        if slice_.shape[2] != size or slice_.shape[3] != size:
            raise ValueError(f"scale {k} slice has size {slice_.shape[2:]}, wanted {size}")
    return concat_channels([down, new, last])


def build_pyramid(
    taps: Sequence[Tensor],
    config: PyramidConfig,
    params: PyramidParams,
    gates: Sequence[GateParams] | None = None,
    build_order: Sequence[int] | None = None,
) -> PyramidState:
    """One sweep over the taps; optionally gate each block before exposure.

    `build_order` only permutes construction sequence (results are merged
    back by scale index); it exists so order-independence is testable.
    """
    n = config.num_scales
    if len(taps) != n + 1:
        raise ValueError(f"need {n + 1} taps (extra + one per scale), got {len(taps)}")
    if gates is not None and len(gates) != n:
        raise ValueError(f"need one gate per scale, got {len(gates)}")
    order = list(range(n)) if build_order is None else list(build_order)
    if sorted(order) != list(range(n)):
        raise ValueError(f"build_order must permute 0..{n - 1}")
    blocks: list[Tensor | None] = [None] * n
    for k in order:
        blocks[k] = build_block(taps, k, params.scales[k], config)
    if gates is None:
        return PyramidState(blocks=list(blocks), gates=None)
    outs = [apply_gate(blocks[k], gates[k]) for k in range(n)]
    return PyramidState(blocks=[o.output for o in outs], gates=outs, raw_blocks=list(blocks))


# ---------------------------------------------------------------------------
# learn-everything baseline (no slice reuse), used for ablation and
# parameter comparisons


@dataclass
class PlainParams:
    """Per-scale bottlenecks that learn all C channels from the local tap."""

    scales: list[BottleneckParams]

    @classmethod
    def create(cls, config: PyramidConfig, tap_channels: Sequence[int], rng: np.random.Generator) -> "PlainParams":
        n = config.num_scales
        if len(tap_channels) != n + 1:
            raise ValueError(f"need {n + 1} taps, got {len(tap_channels)}")
        mid = config.bottleneck_mid
        c = config.channels_per_scale
        scales = [
            BottleneckParams.create(tap_channels[k + 1], mid, c, rng, f"plain.{k}") for k in range(n)
        ]
        return cls(scales=scales)

    def parameters(self) -> list[Parameter]:
        return [p for s in self.scales for p in s.parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def build_plain_blocks(
    taps: Sequence[Tensor],
    config: PyramidConfig,
    params: PlainParams,
    gates: Sequence[GateParams] | None = None,
) -> PyramidState:
    """Blocks that learn every channel locally; same shapes as build_pyramid."""
    n = config.num_scales
    blocks = [new_features(taps[k + 1], params.scales[k]) for k in range(n)]
    if gates is None:
        return PyramidState(blocks=blocks, gates=None)
    outs = [apply_gate(blocks[k], gates[k]) for k in range(n)]
    return PyramidState(blocks=[o.output for o in outs], gates=outs, raw_blocks=blocks)

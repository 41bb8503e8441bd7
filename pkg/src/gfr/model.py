"""The assembled detector: backbone taps, pyramid (or plain) blocks,
optional gates, and multibox predictors.

Ablation toggles pick the block source: feature reuse on means the
three-slice pyramid, off means learn-everything bottleneck blocks of
the same channel count; gates on wraps every block in the two-level
attention gate before prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .gate import GateParams
from .heads import HeadParams, PriorGrid, cell_aspect_slots, generate_priors, predict_heads
from .pyramid import (
    BackboneParams,
    PlainParams,
    PyramidConfig,
    PyramidParams,
    PyramidState,
    build_plain_blocks,
    build_pyramid,
    run_backbone,
    tap_channels_for,
)
from .tensor import Parameter, Tensor


@dataclass
class Detector:
    config: RunConfig
    pyramid_config: PyramidConfig
    backbone: BackboneParams
    pyramid: PyramidParams | None
    plain: PlainParams | None
    gates: list[GateParams] | None
    heads: HeadParams
    priors: PriorGrid

    @classmethod
    def create(cls, config: RunConfig, rng: np.random.Generator) -> "Detector":
        pc = PyramidConfig(
            input_size=config.input_size,
            scale_sizes=config.scale_sizes,
            channels_per_scale=config.channels_per_scale,
            bottleneck_mid=config.bottleneck_mid,
        )
        taps = tap_channels_for(pc, config.backbone_channels)
        backbone = BackboneParams.create(3, config.backbone_channels, rng)
        pyramid = PyramidParams.create(pc, taps, rng) if config.use_feature_reuse else None
        plain = PlainParams.create(pc, taps, rng) if not config.use_feature_reuse else None
        gates = None
        if config.use_gates:
            gates = [GateParams.create(pc.channels_per_scale, rng, f"gate.{k}") for k in range(pc.num_scales)]
        per_cell = len(cell_aspect_slots(pc.num_scales, 0, config.extra_aspect_1_6))
        heads = HeadParams.create(pc, config.num_classes, per_cell, rng)
        priors = generate_priors(pc, config.extra_aspect_1_6)
        return cls(
            config=config,
            pyramid_config=pc,
            backbone=backbone,
            pyramid=pyramid,
            plain=plain,
            gates=gates,
            heads=heads,
            priors=priors,
        )

    def parameters(self) -> list[Parameter]:
        out = self.backbone.parameters()
        if self.pyramid is not None:
            out += self.pyramid.parameters()
        if self.plain is not None:
            out += self.plain.parameters()
        if self.gates is not None:
            for g in self.gates:
                out += g.parameters()
        out += self.heads.parameters()
        names = [p.name for p in out]
        if len(set(names)) != len(names):
            raise RuntimeError("duplicate parameter names")
        return out

    def build_blocks(self, images: Tensor) -> PyramidState:
        taps = run_backbone(images, self.backbone, self.pyramid_config)
        if self.pyramid is not None:
            return build_pyramid(taps, self.pyramid_config, self.pyramid, gates=self.gates)
        return build_plain_blocks(taps, self.pyramid_config, self.plain, gates=self.gates)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor, PyramidState]:
        """Images (b, 3, s, s) -> (class logits, box deltas, block state)."""
        state = self.build_blocks(images)
        logits, deltas = predict_heads(state, self.heads)
        if logits.shape[1] != len(self.priors):
            raise RuntimeError(f"{logits.shape[1]} prediction rows vs {len(self.priors)} priors")
        return logits, deltas, state


def count_params(model: Detector) -> list[tuple[str, str, int]]:
    """Per-tensor counts as (module, tensor_name, count) rows.

    The module is the first dotted component of the tensor name, so
    rows group by backbone / pyramid / plain / gate / head.
    """
    return [(p.name.split(".")[0], p.name, p.size) for p in model.parameters()]


def param_totals(rows: list[tuple[str, str, int]]) -> dict[str, int]:
    """Per-module totals plus the grand total under key 'total'."""
    totals: dict[str, int] = {}
    for module, _, count in rows:
        totals[module] = totals.get(module, 0) + count
    totals["total"] = sum(count for _, _, count in rows)
    return totals


def params_csv(rows: list[tuple[str, str, int]]) -> str:
    lines = ["module,tensor,count"]
    lines += [f"{m},{n},{c}" for m, n, c in rows]
    for module, total in sorted(param_totals(rows).items()):
        lines.append(f"{module},_total,{total}")
    return "\n".join(lines) + "\n"

"""Flat key=value run configuration.

One option namespace covers model geometry, ablation toggles, and
training hyperparameters.  Files are plain text, one `key = value` per
line, `#` comments allowed; unknown keys are rejected so typos fail
loudly.  `serialize_config` followed by `parse_config` is the identity,
which is what lets every output directory carry an exact re-run recipe.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


@dataclass
class RunConfig:
    seed: int = 0
    input_size: int = 320
    num_classes: int = 3
    scale_sizes: tuple[int, ...] = (40, 20, 10, 5, 3, 2)
    channels_per_scale: int = 48
    bottleneck_mid: int = 16
    backbone_channels: tuple[int, ...] = (12, 16, 24, 32, 40, 48, 48, 48)
    use_gates: bool = True
    use_feature_reuse: bool = True
    extra_aspect_1_6: bool = True
    lr: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0005
    iterations: int = 2000
    batch_size: int = 4
    lr_drop_frac: float = 0.8
    lr_drop_factor: float = 0.1
    neg_pos_ratio: int = 3
    match_iou: float = 0.5
    nms_iou: float = 0.45
    score_thresh: float = 0.01
    top_k: int = 200

    def validate(self) -> "RunConfig":
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.batch_size < 1 or self.iterations < 0:
            raise ValueError("batch_size >= 1 and iterations >= 0 required")
        if not (0.0 < self.lr_drop_frac <= 1.0):
            raise ValueError("lr_drop_frac must be in (0, 1]")
        if self.neg_pos_ratio < 0:
            raise ValueError("neg_pos_ratio must be >= 0")
        if not (0.0 <= self.match_iou <= 1.0 and 0.0 <= self.nms_iou <= 1.0):
            raise ValueError("IoU thresholds must be in [0, 1]")
        return self

    @property
    def variant(self) -> str:
        if self.use_feature_reuse and self.use_gates:
            return "full"
        if self.use_feature_reuse:
            return "reuse_only"
        if self.use_gates:
            return "gates_only"
        return "plain"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str):
    f = _FIELDS[key]
    raw = raw.strip()
    if f.type in ("int", int):
        return int(raw)
    if f.type in ("float", float):
        return float(raw)
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("true", "1"):
            return True
        if low in ("false", "0"):
            return False
        raise ValueError(f"{key}: expected true/false, got {raw!r}")
    # remaining fields are integer tuples, written comma-separated
    parts = [p for p in raw.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    """Parse key=value text; unknown keys and malformed lines are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)
    return RunConfig(**values).validate()


def serialize_config(config: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(config, f.name))}" for f in dataclasses.fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(config))


def apply_overrides(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply CLI `key=value` overrides on top of a parsed config."""
    updates = {}
    for key, raw in overrides.items():
        if key not in _FIELDS:
            raise ValueError(f"unknown config key {key!r}")
        updates[key] = _parse_value(key, raw)
    return dataclasses.replace(config, **updates).validate()

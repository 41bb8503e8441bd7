"""Training loop, learning-rate schedule, and checkpoint serialization.

A checkpoint is a single binary file: magic, format version, the full
effective config as embedded text, then named float64 little-endian
tensor blobs.  Loading rebuilds the model from the embedded config and
overwrites every parameter, so a round trip reproduces forward outputs
bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .heads import MatchResult, match_priors, multibox_loss
from .model import Detector
from .synth import SceneAnnotation
from .tensor import SGD, Tensor

CHECKPOINT_MAGIC = b"GFRC"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, model: Detector) -> None:
    params = model.parameters()
    config_bytes = serialize_config(model.config).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(config_bytes)))
        f.write(config_bytes)
        f.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(name)))
            f.write(name)
            f.write(struct.pack("<I", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> Detector:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (clen,) = struct.unpack_from("<I", raw, off)
    off += 4
    config = parse_config(raw[off : off + clen].decode("utf-8"))
    off += clen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        blobs[name] = data

    model = Detector.create(config, np.random.default_rng(config.seed))
    missing = []
    for p in model.parameters():
        blob = blobs.pop(p.name, None)
        if blob is None:
            missing.append(p.name)
            continue
        if blob.shape != p.data.shape:
            raise ValueError(f"{path}: tensor {p.name} has shape {blob.shape}, model expects {p.data.shape}")
        p.data = blob.astype(np.float64).copy()
    if missing or blobs:
        raise ValueError(f"{path}: checkpoint/model tensor mismatch (missing {missing}, extra {sorted(blobs)})")
    return model


# ---------------------------------------------------------------------------
# schedule and loop


def lr_at(iteration: int, config: RunConfig) -> float:
    """Constant rate with one multiplicative drop at lr_drop_frac of the run."""
    drop_at = int(config.lr_drop_frac * config.iterations)
    if config.iterations > 0 and iteration >= drop_at:
        return config.lr * config.lr_drop_factor
    return config.lr


class NanLossError(RuntimeError):
    """Loss became non-finite; carries the diagnostic dump text."""

    def __init__(self, iteration: int, dump: str):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.dump = dump


def _nan_dump(model: Detector, iteration: int, loss_value: float) -> str:
    lines = [f"non-finite loss {loss_value!r} at iteration {iteration}", "name,shape,min,max,grad_absmax"]
    for p in model.parameters():
        gmax = float(np.abs(p.grad).max()) if p.grad is not None else 0.0
        lines.append(
            f"{p.name},{'x'.join(map(str, p.data.shape))},{p.data.min():.6g},{p.data.max():.6g},{gmax:.6g}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    model: Detector
    curve: list[tuple[int, float, float]]  # (iteration, loss, lr)

    def final_loss(self) -> float:
        return self.curve[-1][1] if self.curve else float("nan")


def loss_curve_csv(curve: Sequence[tuple[int, float, float]]) -> str:
    lines = ["iteration,loss,lr"]
    lines += [f"{i},{loss!r},{lr!r}" for i, loss, lr in curve]
    return "\n".join(lines) + "\n"


def train(
    config: RunConfig,
    scenes: Sequence[SceneAnnotation],
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Run the full training loop on an in-memory dataset.

    All randomness (init and batch sampling) flows from one generator
    seeded with config.seed, so a fixed seed fixes the loss curve
    exactly.  Ground-truth matching is precomputed per scene since
    priors never move.
    """
    if not scenes:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    model = Detector.create(config, rng)
    params = model.parameters()
    opt = SGD(params, lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)

    matches: list[MatchResult] = [
        match_priors(model.priors, s.boxes, s.labels, threshold=config.match_iou) for s in scenes
    ]
    images = np.stack([s.image for s in scenes])

    n = len(scenes)
    curve: list[tuple[int, float, float]] = []
    for it in range(config.iterations):
        if n >= config.batch_size:
            idx = rng.choice(n, size=config.batch_size, replace=False)
        else:
            idx = rng.integers(0, n, size=config.batch_size)
        batch = Tensor(images[idx])
        logits, deltas, _ = model.forward(batch)
        loss = multibox_loss(logits, deltas, [matches[i] for i in idx], neg_pos_ratio=config.neg_pos_ratio)
        value = float(loss.data)
        lr = lr_at(it, config)
        curve.append((it, value, lr))
        if not np.isfinite(value):
            raise NanLossError(it, _nan_dump(model, it, value))
        loss.backward()
        opt.lr = lr
        opt.step()
        if progress is not None:
            progress(it, value, lr)
    return TrainResult(model=model, curve=curve)

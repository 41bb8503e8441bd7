"""Gate-behavior reports: attention dumps, histograms, before/after maps.

Produces three things from a trained model and a dataset: a CSV of raw
attention values (one row per gate output per image, channel_id -1 for
the global scalar), a JSON report with mean global attention per scale
per dominant-size bucket plus channel-attention histograms and the
small-vs-large contrast per scale, and grayscale before/after feature
map grids as PNG files.  The contrast is reported for inspection, not
thresholded.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .evaluation import dominant_bucket
from .model import Detector
from .synth import BUCKETS, SceneAnnotation
from .tensor import Tensor

HIST_BINS = 10


def collect_attention(model: Detector, scenes: Sequence[SceneAnnotation]):
    """Run the model over scenes; returns (rows, gate_by_bucket, channel_values).

    rows: (image_id, scale_id, channel_id, value) with channel_id -1 for
    the global attention.  gate_by_bucket: scale -> bucket -> list of
    global values.  channel_values: scale -> flat list of channel values.
    """
    if model.gates is None:
        raise ValueError("model has no gates to diagnose")
    rows: list[tuple[int, int, int, float]] = []
    by_bucket: dict[int, dict[str, list[float]]] = {}
    channel_values: dict[int, list[float]] = {}
    for img_id, scene in enumerate(scenes):
        state = model.build_blocks(Tensor(scene.image[None, ...]))
        bucket = dominant_bucket(scene)
        for k, gate_out in enumerate(state.gates):
            e = gate_out.channel_attention.data[0]
            e_bar = float(gate_out.global_attention.data[0, 0])
            for c, v in enumerate(e):
                rows.append((img_id, k, c, float(v)))
            rows.append((img_id, k, -1, e_bar))
            channel_values.setdefault(k, []).extend(float(v) for v in e)
            if bucket is not None:
                by_bucket.setdefault(k, {b: [] for b in BUCKETS})[bucket].append(e_bar)
    return rows, by_bucket, channel_values


def attention_csv(rows: Sequence[tuple[int, int, int, float]]) -> str:
    lines = ["image_id,scale_id,channel_id,value"]
    lines += [f"{img},{k},{c},{v!r}" for img, k, c, v in rows]
    return "\n".join(lines) + "\n"


def _histogram(values: Sequence[float]) -> list[int]:
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64), bins=HIST_BINS, range=(0.0, 1.0))
    return [int(c) for c in counts]


def gate_report(model: Detector, scenes: Sequence[SceneAnnotation]) -> dict:
    """Well-formed diagnostic summary; all attention values lie in (0,1)."""
    rows, by_bucket, channel_values = collect_attention(model, scenes)
    scales = sorted(channel_values)
    mean_gate: dict[str, dict[str, float | None]] = {}
    contrast: dict[str, float | None] = {}
    for k in scales:
        per_bucket = by_bucket.get(k, {b: [] for b in BUCKETS})
        mean_gate[str(k)] = {
            b: (float(np.mean(v)) if v else None) for b, v in per_bucket.items()
        }
        small, large = mean_gate[str(k)]["small"], mean_gate[str(k)]["large"]
        contrast[str(k)] = (small - large) if (small is not None and large is not None) else None
    return {
        "num_images": len(scenes),
        "mean_global_attention": mean_gate,
        "small_minus_large_contrast": contrast,
        "channel_attention_histograms": {str(k): _histogram(channel_values[k]) for k in scales},
        "histogram_bins": HIST_BINS,
    }


def _to_grayscale(map2d: np.ndarray, upscale: int) -> np.ndarray:
    lo, hi = float(map2d.min()), float(map2d.max())
    norm = (map2d - lo) / (hi - lo) if hi > lo else np.zeros_like(map2d)
    img = (norm * 255.0).astype(np.uint8)
    return np.kron(img, np.ones((upscale, upscale), dtype=np.uint8))


def before_after_grids(model: Detector, scene: SceneAnnotation, out_dir: Path) -> list[Path]:
    """Per scale, write [channel-mean before | divider | after] as a PNG."""
    state = model.build_blocks(Tensor(scene.image[None, ...]))
    if state.raw_blocks is None:
        raise ValueError("model has no gates, nothing to compare")
    paths = []
    for k, (before, after) in enumerate(zip(state.raw_blocks, state.blocks)):
        b = before.data[0].mean(axis=0)
        a = after.data[0].mean(axis=0)
        upscale = max(1, 80 // b.shape[0])
        left = _to_grayscale(b, upscale)
        right = _to_grayscale(a, upscale)
        divider = np.full((left.shape[0], 2), 255, dtype=np.uint8)
        panel = np.concatenate([left, divider, right], axis=1)
        path = out_dir / f"gate_scale{k}_before_after.png"
        Image.fromarray(panel, mode="L").save(path)
        paths.append(path)
    return paths


def write_diagnostics(model: Detector, scenes: Sequence[SceneAnnotation], out_dir: str | Path) -> dict:
    """Write attention.csv, report.json, and per-scale PNG grids."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, _, _ = collect_attention(model, scenes)
    (out / "attention.csv").write_text(attention_csv(rows))
    report = gate_report(model, scenes)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if scenes:
        before_after_grids(model, scenes[0], out)
    return report

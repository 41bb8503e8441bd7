"""Synthetic detection scenes: colored shapes on a noisy background.

Three shape classes (rectangle, disk, triangle), each with a fixed
distinctive color, placed with limited mutual overlap.  Box sizes are
drawn inside per-bucket area ranges that keep a safety margin from the
bucket thresholds, so pixel effects can never flip a box's bucket.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Array

CLASS_NAMES = ("rectangle", "disk", "triangle")
CLASS_COLORS = (
    (0.85, 0.15, 0.15),
    (0.15, 0.80, 0.20),
    (0.15, 0.30, 0.90),
)

# normalized-area thresholds: < SMALL_MAX is small, > LARGE_MIN is large
SMALL_MAX_AREA = 0.02
LARGE_MIN_AREA = 0.15

BUCKETS = ("small", "medium", "large")
SIZE_RANGES = {
    "small": (0.007, 0.017),
    "medium": (0.03, 0.12),
    "large": (0.16, 0.32),
}

IMAGE_MAGIC = b"GFRI"


def bucket_of(box: Sequence[float]) -> str:
    area = max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])
    if area < SMALL_MAX_AREA:
        return "small"
    if area > LARGE_MIN_AREA:
        return "large"
    return "medium"


@dataclass
class SceneAnnotation:
    image: Array  # (3, s, s) float64 in [0, 1]
    boxes: Array  # (n, 4) corner form, normalized
    labels: Array  # (n,) int class ids

    @property
    def buckets(self) -> list[str]:
        return [bucket_of(b) for b in self.boxes]


def normalize_size_mix(mix: dict[str, float] | None) -> dict[str, float]:
    """Fill missing buckets with 0 and normalize to sum 1; empty means uniform."""
    if not mix:
        mix = {b: 1.0 for b in BUCKETS}
    bad = set(mix) - set(BUCKETS)
    if bad:
        raise ValueError(f"unknown size buckets: {sorted(bad)}")
    if any(v < 0 for v in mix.values()):
        raise ValueError("size mix weights must be >= 0")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("size mix weights sum to zero")
    return {b: mix.get(b, 0.0) / total for b in BUCKETS}


def _box_iou(a: Array, b: Array) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def _draw_shape(image: Array, class_id: int, box: Array, color: Array, size: int) -> None:
    xs = (np.arange(size) + 0.5) / size
    ys = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(xs, ys)  # (h, w), px varies along columns
    x1, y1, x2, y2 = box
    if class_id == 0:
        mask = (px >= x1) & (px < x2) & (py >= y1) & (py < y2)
    elif class_id == 1:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
        mask = ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    else:
        ax, ay = (x1 + x2) / 2, y1
        bx, by = x1, y2
        cx, cy = x2, y2
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        l1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / den
        l2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / den
        mask = (l1 >= 0) & (l2 >= 0) & (1.0 - l1 - l2 >= 0)
    image[:, mask] = color[:, None]


def generate_scene(
    seed,
    num_objects: int,
    size_mix: dict[str, float] | None = None,
    input_size: int = 320,
    num_classes: int = 3,
    class_sequence: Sequence[int] | None = None,
) -> SceneAnnotation:
    """Render one scene; identical output for identical arguments.

    `class_sequence`, when given, pins each object's class (dataset
    generation uses it to balance classes); otherwise classes are drawn
    uniformly.  Objects that cannot be placed with small overlap after
    a bounded number of tries are dropped.
    """
    if num_objects < 0:
        raise ValueError("num_objects must be >= 0")
    if not (1 <= num_classes <= len(CLASS_NAMES)):
        raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mix = normalize_size_mix(size_mix)
    probs = [mix[b] for b in BUCKETS]

    image = np.clip(0.5 + rng.normal(0.0, 0.08, size=(3, input_size, input_size)), 0.0, 1.0)
    boxes: list[Array] = []
    labels: list[int] = []
    for obj in range(num_objects):
        if class_sequence is not None:
            class_id = int(class_sequence[obj]) % num_classes
        else:
            class_id = int(rng.integers(0, num_classes))
        bucket = BUCKETS[int(rng.choice(len(BUCKETS), p=probs))]
        lo, hi = SIZE_RANGES[bucket]
        area = float(rng.uniform(lo, hi))
        aspect = float(rng.uniform(0.6, 1.6)) if class_id == 0 else 1.0
        w = min(np.sqrt(area * aspect), 0.92)
        h = min(area / w, 0.92)
        placed = None
        for _ in range(40):
            cx = float(rng.uniform(w / 2 + 0.02, 1.0 - w / 2 - 0.02))
            cy = float(rng.uniform(h / 2 + 0.02, 1.0 - h / 2 - 0.02))
            cand = np.array([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            if all(_box_iou(cand, b) <= 0.15 for b in boxes):
                placed = cand
                break
        if placed is not None:
            boxes.append(placed)
            labels.append(class_id)

    # draw big shapes first so smaller ones stay fully visible
    order = np.argsort([-(b[2] - b[0]) * (b[3] - b[1]) for b in boxes], kind="stable")
    for i in order:
        jitter = float(rng.uniform(-0.04, 0.04))
        color = np.clip(np.asarray(CLASS_COLORS[labels[i]], dtype=np.float64) + jitter, 0.0, 1.0)
        _draw_shape(image, labels[i], boxes[i], color, input_size)

    return SceneAnnotation(
        image=image,
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        labels=np.asarray(labels, dtype=np.int64),
    )


def generate_dataset(
    seed: int,
    count: int,
    size_mix: dict[str, float] | None = None,
    input_size: int = 320,
    num_classes: int = 3,
    min_objects: int = 1,
    max_objects: int = 3,
) -> list[SceneAnnotation]:
    """Deterministic list of scenes; classes cycle for balanced coverage."""
    if not (0 <= min_objects <= max_objects):
        raise ValueError("need 0 <= min_objects <= max_objects")
    scenes = []
    next_class = 0
    for i in range(count):
        rng = np.random.default_rng((seed, i))
        n = int(rng.integers(min_objects, max_objects + 1))
        cycle = [(next_class + j) % num_classes for j in range(n)]
        next_class = (next_class + n) % max(1, num_classes)
        scenes.append(
            generate_scene(rng, n, size_mix, input_size=input_size, num_classes=num_classes, class_sequence=cycle)
        )
    return scenes


# ---------------------------------------------------------------------------
# on-disk format: per-image binary blob + one annotations.jsonl


def save_image_blob(path: Path, arr: Array) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    with open(path, "wb") as f:
        f.write(IMAGE_MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def load_image_blob(path: Path) -> Array:
    raw = Path(path).read_bytes()
    if raw[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not an image blob (bad magic)")
    (ndim,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{ndim}I", raw, 8)
    data = np.frombuffer(raw, dtype="<f8", offset=8 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: payload size does not match header {dims}")
    return data.reshape(dims).astype(np.float64)


def save_dataset(out_dir: str | Path, scenes: Sequence[SceneAnnotation]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, scene in enumerate(scenes):
        fname = f"image_{i:05d}.bin"
        save_image_blob(out / fname, scene.image)
        lines.append(
            json.dumps(
                {
                    "image_id": i,
                    "file": fname,
                    "boxes": [[round(float(v), 6) for v in b] for b in scene.boxes],
                    "labels": [int(v) for v in scene.labels],
                    "buckets": scene.buckets,
                },
                sort_keys=True,
            )
        )
    (out / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(data_dir: str | Path) -> list[SceneAnnotation]:
    root = Path(data_dir)
    ann = root / "annotations.jsonl"
    if not ann.is_file():
        raise FileNotFoundError(f"no annotations.jsonl under {root}")
    scenes = []
    for line in ann.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        scenes.append(
            SceneAnnotation(
                image=load_image_blob(root / rec["file"]),
                boxes=np.asarray(rec["boxes"], dtype=np.float64).reshape(-1, 4),
                labels=np.asarray(rec["labels"], dtype=np.int64),
            )
        )
    return scenes

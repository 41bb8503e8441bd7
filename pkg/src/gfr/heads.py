"""Multibox prediction over the pyramid: priors, matching, loss, NMS.

Boxes live in two layouts: corner form (x1, y1, x2, y2) for IoU, NMS,
and annotations; center form (cx, cy, w, h) for priors and offset
encoding.  All coordinates are normalized to [0, 1] of the image side.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .pyramid import ConvPair, PyramidConfig, PyramidState
from .tensor import Array, Tensor, _accum, _op, concat, conv2d, reshape, transpose

VARIANCES = (0.1, 0.1, 0.2, 0.2)
BASE_ASPECTS = (2.0, 1.6)  # each contributes the pair {a, 1/a}
SCALE_MIN = 0.1
SCALE_MAX = 0.9


# ---------------------------------------------------------------------------
# priors


@dataclass
class PriorBox:
    cx: float
    cy: float
    w: float
    h: float
    scale_index: int
    aspect: float


@dataclass
class PriorGrid:
    """All priors as arrays, ordered (scale, row, col, aspect-slot)."""

    centers: Array  # (N, 4) center form
    scale_index: Array  # (N,) int
    aspect: Array  # (N,) float
    feature_sizes: tuple[int, ...]
    num_per_cell: int

    def __len__(self) -> int:
        return self.centers.shape[0]

    def corners(self) -> Array:
        return center_to_corner(self.centers)

    def boxes(self) -> list[PriorBox]:
        return [
            PriorBox(float(c[0]), float(c[1]), float(c[2]), float(c[3]), int(s), float(a))
            for c, s, a in zip(self.centers, self.scale_index, self.aspect)
        ]


def center_to_corner(boxes: Array) -> Array:
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def corner_to_center(boxes: Array) -> Array:
    out = np.empty_like(boxes)
    out[..., 0] = (boxes[..., 0] + boxes[..., 2]) / 2
    out[..., 1] = (boxes[..., 1] + boxes[..., 3]) / 2
    out[..., 2] = boxes[..., 2] - boxes[..., 0]
    out[..., 3] = boxes[..., 3] - boxes[..., 1]
    return out


def prior_scales(num_scales: int) -> list[float]:
    """Linearly spaced box scales, finest to coarsest."""
    if num_scales == 1:
        return [SCALE_MIN]
    step = (SCALE_MAX - SCALE_MIN) / (num_scales - 1)
    return [SCALE_MIN + step * k for k in range(num_scales)]


def cell_aspect_slots(num_scales: int, scale_k: int, extra_aspect_1_6: bool) -> list[tuple[float, float]]:
    """Per-cell (box_scale, aspect) slots at scale k, in emission order.

    Slot 0 is the square at this scale's size, slot 1 the square at the
    geometric mean of this and the next size (the ladder is extended one
    linear step past the coarsest scale for that), then aspect pairs.
    """
    scales = prior_scales(num_scales)
    step = (SCALE_MAX - SCALE_MIN) / max(1, num_scales - 1)
    s = scales[scale_k]
    s_next = scales[scale_k + 1] if scale_k + 1 < num_scales else SCALE_MAX + step
    slots = [(s, 1.0), (math.sqrt(s * s_next), 1.0)]
    aspects = BASE_ASPECTS if extra_aspect_1_6 else BASE_ASPECTS[:1]
    for a in aspects:
        slots.append((s, a))
        slots.append((s, 1.0 / a))
    return slots


def generate_priors(config: PyramidConfig, extra_aspect_1_6: bool = True) -> PriorGrid:
    """Tile priors over every scale's grid; clipped to the unit square."""
    n = config.num_scales
    centers, scale_idx, aspect = [], [], []
    per_cell = len(cell_aspect_slots(n, 0, extra_aspect_1_6))
    for k, f in enumerate(config.scale_sizes):
        slots = cell_aspect_slots(n, k, extra_aspect_1_6)
        for i in range(f):
            cy = (i + 0.5) / f
            for j in range(f):
                cx = (j + 0.5) / f
                for s, a in slots:
                    centers.append((cx, cy, s * math.sqrt(a), s / math.sqrt(a)))
                    scale_idx.append(k)
                    aspect.append(a)
    arr = np.asarray(centers, dtype=np.float64)
    corners = np.clip(center_to_corner(arr), 0.0, 1.0)
    return PriorGrid(
        centers=corner_to_center(corners),
        scale_index=np.asarray(scale_idx, dtype=np.int64),
        aspect=np.asarray(aspect, dtype=np.float64),
        feature_sizes=tuple(config.scale_sizes),
        num_per_cell=per_cell,
    )


# ---------------------------------------------------------------------------
# IoU and offset coding


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two corner-form boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_matrix(a: Array, b: Array) -> Array:
    """Pairwise IoU between (N, 4) and (M, 4) corner-form boxes."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def encode_boxes(gt_corner: Array, prior_centers: Array) -> Array:
    """Corner-form boxes -> variance-scaled offsets against priors."""
    g = corner_to_center(np.asarray(gt_corner, dtype=np.float64))
    p = prior_centers
    out = np.empty_like(g)
    out[..., 0] = (g[..., 0] - p[..., 0]) / (p[..., 2] * VARIANCES[0])
    out[..., 1] = (g[..., 1] - p[..., 1]) / (p[..., 3] * VARIANCES[1])
    out[..., 2] = np.log(g[..., 2] / p[..., 2]) / VARIANCES[2]
    out[..., 3] = np.log(g[..., 3] / p[..., 3]) / VARIANCES[3]
    return out


def decode_boxes(deltas: Array, prior_centers: Array) -> Array:
    """Variance-scaled offsets -> corner-form boxes."""
    d = np.asarray(deltas, dtype=np.float64)
    p = prior_centers
    cx = p[..., 0] + d[..., 0] * VARIANCES[0] * p[..., 2]
    cy = p[..., 1] + d[..., 1] * VARIANCES[1] * p[..., 3]
    w = p[..., 2] * np.exp(d[..., 2] * VARIANCES[2])
    h = p[..., 3] * np.exp(d[..., 3] * VARIANCES[3])
    return center_to_corner(np.stack([cx, cy, w, h], axis=-1))


# ---------------------------------------------------------------------------
# matching


@dataclass
class MatchResult:
    """Per-prior assignment for one image.

    labels: 0 for background, class_id + 1 for a matched prior.
    gt_index: index of the matched ground truth, -1 for background.
    targets: encoded offsets, zero rows for background priors.
    """

    labels: Array
    gt_index: Array
    iou: Array
    targets: Array

    @property
    def num_positives(self) -> int:
        return int((self.labels > 0).sum())


def match_priors(
    priors: PriorGrid,
    gt_boxes: Array,
    gt_labels: Array,
    threshold: float = 0.5,
) -> MatchResult:
    """Assign priors to ground truths: bipartite step, then threshold step.

    Threshold step: each prior takes its best-IoU ground truth (lowest
    index on ties) when that IoU >= threshold.  Bipartite step, applied
    on top: each ground truth, in index order, unconditionally claims its
    best-IoU prior, later ground truths overwriting earlier ones on the
    (degenerate) shared-argmax case.
    """
    n = len(priors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    g = gt_boxes.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    gt_index = np.full(n, -1, dtype=np.int64)
    best_iou = np.zeros(n, dtype=np.float64)
    targets = np.zeros((n, 4), dtype=np.float64)
    if g == 0:
        return MatchResult(labels=labels, gt_index=gt_index, iou=best_iou, targets=targets)

    overlaps = iou_matrix(priors.corners(), gt_boxes)  # (n, g)
    best_gt = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(n), best_gt]
    assigned = best_iou >= threshold
    gt_index[assigned] = best_gt[assigned]

    for gi in range(g):
        pi = int(overlaps[:, gi].argmax())
        gt_index[pi] = gi
        best_iou[pi] = overlaps[pi, gi]

    pos = gt_index >= 0
    labels[pos] = gt_labels[gt_index[pos]] + 1
    targets[pos] = encode_boxes(gt_boxes[gt_index[pos]], priors.centers[pos])
    return MatchResult(labels=labels, gt_index=gt_index, iou=best_iou, targets=targets)


# ---------------------------------------------------------------------------
# multibox loss (fused tape op with analytic backward)


def _log_softmax(z: Array) -> Array:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def multibox_loss(
    class_logits: Tensor,
    box_deltas: Tensor,
    matches: Sequence[MatchResult],
    neg_pos_ratio: int = 3,
) -> Tensor:
    """Classification + localization loss, averaged over the batch.

    Per image: softmax cross-entropy over positive priors plus the
    neg_pos_ratio * max(1, positives) highest-loss background priors
    (so zero-object images still mine a floor of neg_pos_ratio
    negatives), plus smooth-L1 over positive offsets, all divided by
    max(1, positives).  Batch loss is the mean of image losses.
    """
    b, n, k1 = class_logits.shape
    if box_deltas.shape != (b, n, 4):
        raise ValueError(f"deltas shape {box_deltas.shape} != ({b}, {n}, 4)")
    if len(matches) != b:
        raise ValueError(f"{len(matches)} match results for batch {b}")

    logp = _log_softmax(class_logits.data)  # (b, n, k1)
    dlogits = np.zeros_like(class_logits.data)
    ddeltas = np.zeros_like(box_deltas.data)
    total = 0.0
    for i, m in enumerate(matches):
        pos = m.labels > 0
        n_pos = int(pos.sum())
        norm = float(max(1, n_pos))

        ce = -logp[i, np.arange(n), np.clip(m.labels, 0, k1 - 1)]
        neg_ce = np.where(pos, -np.inf, -logp[i, :, 0])
        n_neg = min(int(neg_pos_ratio * max(1, n_pos)), int((~pos).sum()))
        if n_neg > 0:
            neg_idx = np.argpartition(neg_ce, n - n_neg)[n - n_neg :]
        else:
            neg_idx = np.empty(0, dtype=np.int64)

        counted = np.zeros(n, dtype=bool)
        counted[pos] = True
        counted[neg_idx] = True
        cls_loss = float(ce[counted].sum())

        probs = np.exp(logp[i])
        grad_rows = probs[counted].copy()
        tgt = m.labels[counted]
        grad_rows[np.arange(len(tgt)), tgt] -= 1.0
        dlogits[i, counted] = grad_rows / (norm * b)

        loc_loss = 0.0
        if n_pos:
            diff = box_deltas.data[i, pos] - m.targets[pos]
            absd = np.abs(diff)
            quad = absd < 1.0
            loc_loss = float(np.where(quad, 0.5 * diff * diff, absd - 0.5).sum())
            ddeltas[i, pos] = np.where(quad, diff, np.sign(diff)) / (norm * b)

        total += (cls_loss + loc_loss) / norm
    total /= b

    def backward(g: Array) -> None:
        scale = float(g)
        if class_logits.requires_grad:
            _accum(class_logits, dlogits * scale)
        if box_deltas.requires_grad:
            _accum(box_deltas, ddeltas * scale)

    return _op(np.asarray(total), (class_logits, box_deltas), backward)


# ---------------------------------------------------------------------------
# predictor convs


@dataclass
class HeadParams:
    """Per-scale 3x3 predictor conv pairs (classification, localization)."""

    cls_convs: list[ConvPair]
    loc_convs: list[ConvPair]
    num_classes: int
    num_per_cell: int

    @classmethod
    def create(
        cls,
        config: PyramidConfig,
        num_classes: int,
        num_per_cell: int,
        rng: np.random.Generator,
    ) -> "HeadParams":
        c = config.channels_per_scale
        cls_convs, loc_convs = [], []
        for k in range(config.num_scales):
            cls_convs.append(ConvPair.create(c, num_per_cell * (num_classes + 1), 3, rng, f"head.{k}.cls"))
            loc_convs.append(ConvPair.create(c, num_per_cell * 4, 3, rng, f"head.{k}.loc"))
        return cls(cls_convs=cls_convs, loc_convs=loc_convs, num_classes=num_classes, num_per_cell=num_per_cell)

    def parameters(self):
        out = []
        for pair in self.cls_convs + self.loc_convs:
            out += pair.parameters()
        return out


def _flatten_predictions(x: Tensor, fields: int, per_cell: int) -> Tensor:
    """(b, per_cell*fields, h, w) -> (b, h*w*per_cell, fields), prior order."""
    b, ch, h, w = x.shape
    if ch != per_cell * fields:
        raise ValueError(f"predictor emitted {ch} channels, expected {per_cell * fields}")
    x = reshape(x, (b, per_cell, fields, h, w))
    x = transpose(x, (0, 3, 4, 1, 2))  # (b, h, w, per_cell, fields)
    return reshape(x, (b, h * w * per_cell, fields))


def predict_heads(pyramid: PyramidState, params: HeadParams) -> tuple[Tensor, Tensor]:
    """Run predictors on every block; rows align with generate_priors order."""
    k1 = params.num_classes + 1
    cls_parts, loc_parts = [], []
    for block, cls_conv, loc_conv in zip(pyramid.blocks, params.cls_convs, params.loc_convs):
        cls_map = conv2d(block, cls_conv.weight, cls_conv.bias, stride=1, pad=1)
        loc_map = conv2d(block, loc_conv.weight, loc_conv.bias, stride=1, pad=1)
        cls_parts.append(_flatten_predictions(cls_map, k1, params.num_per_cell))
        loc_parts.append(_flatten_predictions(loc_map, 4, params.num_per_cell))
    return concat(cls_parts, axis=1), concat(loc_parts, axis=1)


def softmax(z: Array) -> Array:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# decoding and NMS


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple[float, float, float, float]  # corner form, clipped to [0,1]


def nms(boxes: Array, scores: Array, iou_thresh: float) -> list[int]:
    """Greedy descending-score suppression; returns kept indices.

    Candidates are suppressed at IoU >= iou_thresh with a kept box.
    Score ties break toward the lower index.
    """
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    alive = np.ones(len(scores), dtype=bool)
    for idx in order:
        if not alive[idx]:
            continue
        keep.append(int(idx))
        ious = iou_matrix(boxes[idx : idx + 1], boxes[alive])[0]
        suppress = np.where(alive)[0][ious >= iou_thresh]
        alive[suppress] = False
        alive[idx] = False
    return keep


def decode_and_nms(
    class_probs: Array,
    box_deltas: Array,
    priors: PriorGrid,
    score_thresh: float = 0.01,
    nms_iou: float = 0.45,
    top_k: int = 200,
) -> list[Detection]:
    """Per-class decode + greedy NMS, then a global top_k cut.

    Output is ordered by descending score (ties: class then prior
    index), deterministic for fixed inputs.
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    box_deltas = np.asarray(box_deltas, dtype=np.float64)
    n, k1 = class_probs.shape
    ranked: list[tuple[float, int, int, tuple[float, float, float, float]]] = []
    for c in range(k1 - 1):
        scores = class_probs[:, c + 1]
        mask = scores > score_thresh
        if not mask.any():
            continue
        idx = np.where(mask)[0]
        boxes = np.clip(decode_boxes(box_deltas[idx], priors.centers[idx]), 0.0, 1.0)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        idx, boxes = idx[valid], boxes[valid]
        if len(idx) == 0:
            continue
        for ki in nms(boxes, scores[idx], nms_iou):
            b = boxes[ki]
            ranked.append((float(scores[idx[ki]]), c, int(idx[ki]), (b[0], b[1], b[2], b[3])))
    ranked.sort(key=lambda r: (-r[0], r[1], r[2]))
    return [Detection(class_id=c, score=s, box=box) for s, c, _, box in ranked[:top_k]]


def detections_to_jsonl(image_id: int, detections: Sequence[Detection]) -> str:
    lines = [
        json.dumps(
            {
                "image_id": int(image_id),
                "class_id": int(d.class_id),
                "score": round(float(d.score), 6),
                "box": [round(float(v), 6) for v in d.box],
            }
        )
        for d in detections
    ]
    return "\n".join(lines)

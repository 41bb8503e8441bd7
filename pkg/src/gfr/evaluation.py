"""Detection quality metrics: per-class AP, mAP, bucket recall, gate stats.

AP uses the all-point interpolated protocol: sort detections by score,
assign each greedily to the best still-unmatched ground truth of its
image at IoU >= threshold, build the precision/recall curve, take the
area under its monotone envelope.  Classes with no ground truth have
undefined AP, reported as None and excluded from the mAP mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .heads import Detection, decode_and_nms, iou, softmax
from .model import Detector
from .synth import BUCKETS, SceneAnnotation, bucket_of
from .tensor import Array, Tensor


@dataclass
class ClassDetection:
    """One detection of a single class, tied to an image."""

    image_id: int
    score: float
    box: tuple[float, float, float, float]


def _assign_detections(
    detections: Sequence[ClassDetection],
    gt_boxes: dict[int, Array],
    iou_thresh: float,
) -> tuple[list[bool], dict[int, np.ndarray]]:
    """Greedy score-descending assignment; each GT is claimable once.

    Returns per-detection TP flags (detection order preserved) and
    per-image matched-GT masks.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].image_id, i))
    matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_boxes.items()}
    tp = [False] * len(detections)
    for i in order:
        det = detections[i]
        boxes = gt_boxes.get(det.image_id)
        if boxes is None or len(boxes) == 0:
            continue
        ious = [iou(det.box, b) for b in boxes]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh and not matched[det.image_id][best]:
            matched[det.image_id][best] = True
            tp[i] = True
    return tp, matched


def average_precision(
    detections: Sequence[ClassDetection],
    gt_boxes: dict[int, Array],
    iou_thresh: float = 0.5,
) -> float | None:
    """All-point interpolated AP for one class; None when no GT exists."""
    n_gt = sum(len(b) for b in gt_boxes.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0
    tp, _ = _assign_detections(detections, gt_boxes, iou_thresh)
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, detections[i].image_id, i))
    tp_sorted = np.array([tp[i] for i in order], dtype=np.float64)
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(1.0 - tp_sorted)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1e-12)

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    per_class_ap: dict[int, float | None]
    map: float | None
    bucket_recall: dict[str, float | None]
    gate_means: dict[int, dict[str, float | None]] = field(default_factory=dict)
    num_images: int = 0
    num_boxes: int = 0

    def to_json_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_boxes": self.num_boxes,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "map": self.map,
            "bucket_recall": self.bucket_recall,
            "gate_means": {str(k): v for k, v in self.gate_means.items()},
        }


def dominant_bucket(scene: SceneAnnotation) -> str | None:
    """Majority size bucket of a scene's boxes; ties go to the larger bucket."""
    if len(scene.boxes) == 0:
        return None
    counts = {b: 0 for b in BUCKETS}
    for b in scene.buckets:
        counts[b] += 1
    return max(BUCKETS, key=lambda b: (counts[b], BUCKETS.index(b)))


def run_detector(model: Detector, scene: SceneAnnotation) -> tuple[list[Detection], list[float] | None]:
    """Detections for one scene plus per-scale global-attention values."""
    cfg = model.config
    images = Tensor(scene.image[None, ...])
    logits, deltas, state = model.forward(images)
    probs = softmax(logits.data[0])
    dets = decode_and_nms(
        probs,
        deltas.data[0],
        model.priors,
        score_thresh=cfg.score_thresh,
        nms_iou=cfg.nms_iou,
        top_k=cfg.top_k,
    )
    gate_vals = None
    if state.gates is not None:
        gate_vals = [float(g.global_attention.data[0, 0]) for g in state.gates]
    return dets, gate_vals


def evaluate(model: Detector, scenes: Sequence[SceneAnnotation], iou_thresh: float = 0.5) -> EvalReport:
    """Run the detector over a dataset and aggregate every report metric."""
    num_classes = model.config.num_classes
    per_class: dict[int, list[ClassDetection]] = {c: [] for c in range(num_classes)}
    gt_per_class: dict[int, dict[int, Array]] = {c: {} for c in range(num_classes)}
    bucket_total = {b: 0 for b in BUCKETS}
    bucket_hit = {b: 0 for b in BUCKETS}
    gate_sums: dict[int, dict[str, list[float]]] = {}

    for img_id, scene in enumerate(scenes):
        dets, gate_vals = run_detector(model, scene)
        for c in range(num_classes):
            gt_per_class[c][img_id] = scene.boxes[scene.labels == c]
        for d in dets:
            per_class[d.class_id].append(ClassDetection(image_id=img_id, score=d.score, box=d.box))
        if gate_vals is not None:
            db = dominant_bucket(scene)
            if db is not None:
                for k, v in enumerate(gate_vals):
                    gate_sums.setdefault(k, {b: [] for b in BUCKETS})[db].append(v)

    per_class_ap: dict[int, float | None] = {}
    for c in range(num_classes):
        per_class_ap[c] = average_precision(per_class[c], gt_per_class[c], iou_thresh)
        _, matched = _assign_detections(per_class[c], gt_per_class[c], iou_thresh)
        for img_id, scene in enumerate(scenes):
            mask = scene.labels == c
            for box, hit in zip(scene.boxes[mask], matched[img_id]):
                b = bucket_of(box)
                bucket_total[b] += 1
                bucket_hit[b] += int(hit)

    defined = [v for v in per_class_ap.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else None
    bucket_recall = {
        b: (bucket_hit[b] / bucket_total[b] if bucket_total[b] else None) for b in BUCKETS
    }
    gate_means = {
        k: {b: (float(np.mean(vals)) if vals else None) for b, vals in per_bucket.items()}
        for k, per_bucket in gate_sums.items()
    }
    return EvalReport(
        per_class_ap=per_class_ap,
        map=mean_ap,
        bucket_recall=bucket_recall,
        gate_means=gate_means,
        num_images=len(scenes),
        num_boxes=int(sum(len(s.boxes) for s in scenes)),
    )

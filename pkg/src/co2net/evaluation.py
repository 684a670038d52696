"""Temporal IoU, interpolated average precision and mAP reports."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError

IOU_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))
AVG_RANGES = {"0.1:0.5": IOU_THRESHOLDS[:5], "0.1:0.7": IOU_THRESHOLDS[:7], "0.1:0.9": IOU_THRESHOLDS}


class ReportError(ValueError):
    pass


def tiou(a, b) -> float:
    """Intersection over union of two half-open intervals."""
    (s1, e1), (s2, e2) = a[:2], b[:2]
    if not (s1 < e1 and s2 < e2):
        raise ContractError(f"degenerate segment in tiou({a}, {b})")
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0:
        return 0.0
    return inter / (max(e1, e2) - min(s1, s2))


@dataclass
class Detection:
    video_id: str
    t_start: float
    t_end: float
    confidence: float


def _rank(dets):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].t_start, i))
    return [dets[i] for i in order]


def average_precision(detections, ground_truth, iou_thr: float) -> float | None:
    """AP for one class.

    ``detections`` are :class:`Detection` (or ``(video_id, start, end, conf)``
    tuples); ``ground_truth`` is a list of ``(video_id, start, end)``. Each
    detection, in score order, claims the best-overlapping unmatched gt of its
    video if that overlap reaches ``iou_thr``. Precision is made monotone
    (all-points interpolation) before integrating over recall. Returns
    ``None`` when there is neither gt nor a detection.
    """
    dets = [d if isinstance(d, Detection) else Detection(*d) for d in detections]
    if not ground_truth:
        return None if not dets else 0.0
    if not dets:
        return 0.0
    gt_by_video: dict[str, list[tuple[int, float, float]]] = {}
    for n, (vid, s, e) in enumerate(ground_truth):
        gt_by_video.setdefault(vid, []).append((n, s, e))
    matched = np.zeros(len(ground_truth), dtype=bool)
    tp = np.zeros(len(dets))
    for k, d in enumerate(_rank(dets)):
        best, best_iou = -1, -1.0
        for n, s, e in gt_by_video.get(d.video_id, ()):
            if matched[n]:
                continue
            ov = tiou((d.t_start, d.t_end), (s, e))
            if ov >= iou_thr and ov > best_iou:
                best, best_iou = n, ov
        if best >= 0:
            matched[best] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(dets) + 1)
    recall = ctp / len(ground_truth)
    # monotone envelope, then area under the recall steps
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


@dataclass
class EvalReport:
    per_class_ap: dict[str, dict[str, float]]
    map_at: dict[str, float]
    avg_map: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"per_class_ap": self.per_class_ap, "map_at": self.map_at,
                "avg_map": self.avg_map, "metadata": self.metadata}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        thrs = list(self.map_at)
        w.writerow(["class"] + [f"mAP@{t}" for t in thrs])
        for cls, row in self.per_class_ap.items():
            w.writerow([cls] + [f"{row[t]:.6f}" for t in thrs])
        w.writerow(["mean"] + [f"{self.map_at[t]:.6f}" for t in thrs])
        for name, v in self.avg_map.items():
            w.writerow([f"AVG {name}", f"{v:.6f}"])
        return buf.getvalue()


def map_report(proposals, ground_truth, class_names, thresholds=IOU_THRESHOLDS) -> EvalReport:
    """Per-class AP, mAP per threshold and AVG over the standard ranges.

    ``proposals``: iterable of ``(video_id, t_start, t_end, class, confidence)``.
    ``ground_truth``: iterable of ``(video_id, start, end, class)``.
    Classes without gt are left out of the means.
    """
    gt_by_class: dict[int, list] = {}
    for vid, s, e, c in ground_truth:
        gt_by_class.setdefault(int(c), []).append((vid, s, e))
    if not gt_by_class:
        raise ReportError("no ground-truth segments in any class")
    det_by_class: dict[int, list] = {}
    for vid, s, e, c, conf in proposals:
        det_by_class.setdefault(int(c), []).append(Detection(vid, s, e, conf))
    keys = [f"{t:.1f}" for t in thresholds]
    per_class: dict[str, dict[str, float]] = {}
    for c in sorted(gt_by_class):
        per_class[class_names[c]] = {
            k: average_precision(det_by_class.get(c, []), gt_by_class[c], t)
            for k, t in zip(keys, thresholds)}
    map_at = {k: float(np.mean([row[k] for row in per_class.values()])) for k in keys}
    avg_map = {}
    for name, members in AVG_RANGES.items():
        mk = [f"{t:.1f}" for t in members]
        if all(k in map_at for k in mk):
            avg_map[name] = float(np.mean([map_at[k] for k in mk]))
    return EvalReport(per_class, map_at, avg_map)

"""COCO-style detection metrics.

Protocol notes (declared here because "standard" hides many choices):
  * thresholds .50:.05:.95; AP is the mean over thresholds and classes of
    per-class 101-point interpolated AP;
  * per class, detections pool across images sorted by descending score,
    ties broken by image id then per-image insertion order, so reports are
    invariant to image enumeration order;
  * greedy matching per image: each detection takes the unmatched same-class
    ground truth with the highest IoU >= threshold (boundary counts as a
    match);
  * at most 100 detections per image (by score);
  * size buckets use COCO's 32^2/96^2 pixel cutoffs rescaled to fractions
    of a 640x640 frame, applied to normalized box areas: ground truth
    outside the bucket is ignored, detections matched to ignored truth are
    dropped from the ranking, and a (class, threshold) cell with no
    eligible truth is excluded from averaging (None if a whole metric has
    no truth anywhere).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2).tolist())
SMALL_FRAC = (32.0 / 640.0) ** 2
MEDIUM_FRAC = (96.0 / 640.0) ** 2
MAX_DETS_PER_IMAGE = 100


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    box: tuple  # (cx, cy, w, h) normalized
    score: float

    def validate(self) -> "Detection":
        if not np.isfinite(self.score):
            raise ValidationError("detection score must be finite")
        cx, cy, w, h = self.box
        if w <= 0 or h <= 0:
            raise ValidationError(f"degenerate detection box {self.box}")
        return self


def iou(box_a, box_b) -> float:
    """Intersection over union of two xyxy boxes."""
    ax1, ay1, ax2, ay2 = map(float, box_a)
    bx1, by1, bx2, by2 = map(float, box_b)
    if ax2 <= ax1 or ay2 <= ay1 or bx2 <= bx1 or by2 <= by1:
        raise ValidationError("degenerate box in iou")
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _to_xyxy(box) -> tuple:
    cx, cy, w, h = box
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def match_and_score(detections, gt_boxes, iou_threshold: float,
                    gt_ignore=None):
    """Greedy TP/FP flags for one image and one class.

    ``detections`` are (box, score) sorted by descending score upstream.
    Returns per-detection flags: 1 TP, 0 FP, -1 ignored (matched to ignored
    truth). Non-ignored truth is preferred at every step.
    """
    n_gt = len(gt_boxes)
    gt_ignore = [False] * n_gt if gt_ignore is None else list(gt_ignore)
    taken = [False] * n_gt
    gt_xyxy = [_to_xyxy(b) for b in gt_boxes]
    flags = []
    for box, _score in detections:
        d_xyxy = _to_xyxy(box)
        best_j, best_iou = -1, 0.0
        best_ign_j, best_ign_iou = -1, 0.0
        for j in range(n_gt):
            if taken[j]:
                continue
            v = iou(d_xyxy, gt_xyxy[j])
            if v < iou_threshold:
                continue
            if gt_ignore[j]:
                if v > best_ign_iou:
                    best_ign_j, best_ign_iou = j, v
            elif v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0:
            taken[best_j] = True
            flags.append(1)
        elif best_ign_j >= 0:
            taken[best_ign_j] = True
            flags.append(-1)
        else:
            flags.append(0)
    return flags


def average_precision(tp_flags, n_gt: int):
    """101-point interpolated AP from score-ranked TP/FP flags.

    Returns None when there is no eligible ground truth (excluded from
    averages); ignored flags (-1) must be filtered out by the caller.
    """
    if n_gt == 0:
        return None
    flags = np.asarray(tp_flags, dtype=np.float64)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope (monotone non-increasing from the right)
    for i in range(precision.size - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    out = 0.0
    idx = 0
    for r in np.linspace(0.0, 1.0, 101):
        while idx < recall.size and recall[idx] < r - 1e-12:
            idx += 1
        out += precision[idx] if idx < recall.size else 0.0
    return out / 101.0


@dataclass
class APReport:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    per_class: dict = field(default_factory=dict)      # class id -> {"ap", "ap50"}
    per_modality: dict = field(default_factory=dict)   # name -> {"ap", "ap50"}

    def to_json(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "ap_small": self.ap_small, "ap_medium": self.ap_medium,
            "ap_large": self.ap_large,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "per_modality": self.per_modality,
        }


def _area_bucket(box) -> str:
    a = box[2] * box[3]
    if a < SMALL_FRAC:
        return "small"
    if a < MEDIUM_FRAC:
        return "medium"
    return "large"


class _EvalIndex:
    """Detections capped per image and grouped per class; GT grouped too."""

    def __init__(self, detections, samples):
        self.image_ids = [s.sample_id for s in samples]
        id_set = set(self.image_ids)
        if len(id_set) != len(self.image_ids):
            raise ValidationError("duplicate sample ids in evaluation set")
        per_image = {}
        for i, d in enumerate(detections):
            d.validate()
            if d.image_id not in id_set:
                raise ValidationError(f"detection references unknown image {d.image_id!r}")
            per_image.setdefault(d.image_id, []).append((i, d))
        self.dets_by_class = {}
        for img in sorted(per_image):
            rows = per_image[img]
            rows.sort(key=lambda r: (-r[1].score, r[0]))
            for rank, (i, d) in enumerate(rows[:MAX_DETS_PER_IMAGE]):
                self.dets_by_class.setdefault(d.class_id, []).append(
                    (-d.score, str(img), rank, d))
        for rows in self.dets_by_class.values():
            rows.sort(key=lambda r: r[:3])
        self.gts = {}
        for s in samples:
            for a in s.annotations:
                self.gts.setdefault((s.sample_id, a.class_id), []).append(a.box)


def _class_ap(index: _EvalIndex, class_id: int, threshold: float,
              image_filter=None, bucket=None):
    gt_count = 0
    ignore_map = {}
    for (img, cid), boxes in index.gts.items():
        if cid != class_id or (image_filter is not None and img not in image_filter):
            continue
        ign = [bucket is not None and _area_bucket(b) != bucket for b in boxes]
        ignore_map[img] = (boxes, ign)
        gt_count += sum(1 for x in ign if not x)
    flags = []
    per_image_state = {}
    for _negscore, img, _rank, det in index.dets_by_class.get(class_id, []):
        if image_filter is not None and img not in image_filter:
            continue
        if img not in per_image_state:
            boxes, ign = ignore_map.get(img, ([], []))
            per_image_state[img] = {"boxes": boxes, "ign": ign, "taken": [False] * len(boxes)}
        st = per_image_state[img]
        f = _match_one(det, st, threshold)
        if f >= 0:
            flags.append(f)
    return average_precision(flags, gt_count)


def _match_one(det: Detection, st: dict, threshold: float) -> int:
    d_xyxy = _to_xyxy(det.box)
    best_j, best_iou = -1, 0.0
    best_ign_j, best_ign_iou = -1, 0.0
    for j, b in enumerate(st["boxes"]):
        if st["taken"][j]:
            continue
        v = iou(d_xyxy, _to_xyxy(b))
        if v < threshold:
            continue
        if st["ign"][j]:
            if v > best_ign_iou:
                best_ign_j, best_ign_iou = j, v
        elif v > best_iou:
            best_j, best_iou = j, v
    if best_j >= 0:
        st["taken"][best_j] = True
        return 1
    if best_ign_j >= 0:
        st["taken"][best_ign_j] = True
        return -1
    return 0


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def ap_report(detections, samples, n_classes: int, modality_names=None,
              class_modality=None, thresholds=COCO_THRESHOLDS) -> APReport:
    """Full metric report over an evaluation set.

    ``class_modality`` maps class id -> modality id for the per-modality
    breakdown (per-modality evaluation restricts to that modality's images
    and classes, mirroring per-sub-dataset reporting).
    """
    index = _EvalIndex(detections, samples)
    classes = list(range(n_classes))

    cell = {}
    for c in classes:
        for t in thresholds:
            cell[(c, t)] = _class_ap(index, c, t)
    ap = _mean([cell[(c, t)] for c in classes for t in thresholds])
    ap50 = _mean([cell[(c, 0.5)] for c in classes])
    ap75 = _mean([cell[(c, 0.75)] for c in classes])

    buckets = {}
    for name in ("small", "medium", "large"):
        vals = [_class_ap(index, c, t, bucket=name)
                for c in classes for t in thresholds]
        buckets[name] = _mean(vals)

    per_class = {c: {"ap": _mean([cell[(c, t)] for t in thresholds]),
                     "ap50": cell[(c, 0.5)]} for c in classes}

    per_modality = {}
    if modality_names is not None and class_modality is not None:
        mod_of_image = {s.sample_id: s.modality_id for s in samples}
        for mi, mname in enumerate(modality_names):
            image_filter = {img for img, m in mod_of_image.items() if m == mi}
            mclasses = [c for c in classes if class_modality[c] == mi]
            vals = {t: [_class_ap(index, c, t, image_filter=image_filter)
                        for c in mclasses] for t in thresholds}
            per_modality[mname] = {
                "ap": _mean([v for t in thresholds for v in vals[t]]),
                "ap50": _mean(vals[0.5]),
            }

    return APReport(ap=ap, ap50=ap50, ap75=ap75,
                    ap_small=buckets["small"], ap_medium=buckets["medium"],
                    ap_large=buckets["large"], per_class=per_class,
                    per_modality=per_modality)


def detections_from_output(output, image_id: str, max_per_image: int = MAX_DETS_PER_IMAGE):
    """Turn the last decoder layer's predictions into scored detections."""
    logits, boxes = output.layers[-1]
    probs = 1.0 / (1.0 + np.exp(-logits.data))
    n, c = probs.shape
    flat = [(float(probs[q, k]), int(k), q) for q in range(n) for k in range(c)]
    flat.sort(key=lambda r: (-r[0], r[1], r[2]))
    out = []
    for score, k, q in flat[:max_per_image]:
        out.append(Detection(image_id=image_id, class_id=k,
                             box=tuple(float(x) for x in boxes.data[q]),
                             score=score))
    return out


def report_csv(report: APReport, modality_names) -> str:
    """One-row CSV mirroring a per-modality AP / AP50 table layout."""
    cols = ["total_ap", "total_ap50"]
    vals = [report.ap, report.ap50]
    for m in modality_names:
        cols += [f"{m}_ap", f"{m}_ap50"]
        entry = report.per_modality.get(m, {})
        vals += [entry.get("ap"), entry.get("ap50")]
    fmt = ",".join("" if v is None else f"{100 * v:.2f}" for v in vals)
    return ",".join(cols) + "\n" + fmt + "\n"


def save_report(report: APReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, sort_keys=True, indent=1)

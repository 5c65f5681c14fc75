"""VOC-style mAP at a fixed IoU threshold plus COCO-style AP by object area.

A detection is a true positive when it claims a previously unmatched
ground truth with IoU strictly above the threshold, greedily in descending
score order. For area-banded AP, ground truths outside the band are
ignored: detections matching them are dropped rather than counted as
false positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import iou
from .tensor_core import ShapeError

DEFAULT_AREA_RANGES = (("S", 0.0, 32.0 ** 2), ("M", 32.0 ** 2, 96.0 ** 2),
                       ("L", 96.0 ** 2, float("inf")))


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    interpolation: str = "eleven_point"
    area_ranges: tuple = DEFAULT_AREA_RANGES

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ShapeError("iou threshold must lie in (0, 1)")
        if self.interpolation not in ("eleven_point", "all_point"):
            raise ShapeError(f"unknown interpolation {self.interpolation!r}")
        prev = None
        for _, lo, hi in self.area_ranges:
            if hi <= lo or (prev is not None and lo < prev):
                raise ShapeError("area bands must be disjoint and ordered")
            prev = hi


@dataclass
class EvalReport:
    per_class_ap: dict
    map: float
    per_area_ap: dict
    tp: int
    fp: int
    missed: int

    def format_table(self) -> str:
        lines = ["class  AP"]
        for cls in sorted(self.per_class_ap):
            ap = self.per_class_ap[cls]
            lines.append(f"{cls:>5}  {'excluded' if ap is None else f'{ap:.4f}'}")
        lines.append(f"mAP    {self.map:.4f}")
        area = "  ".join(f"AP_{n}={'n/a' if v is None else f'{v:.4f}'}"
                         for n, v in self.per_area_ap.items())
        if area:
            lines.append(area)
        lines.append(f"TP={self.tp} FP={self.fp} missed={self.missed}")
        return "\n".join(lines)


def greedy_match(detections, gts, iou_threshold, ignore_gts=()):
    """Match score-sorted detections to ground truths of one class/image.

    Returns (flags, matched) where flags[i] is True/False/None for
    TP/FP/ignored (matched an ignore-band gt) per detection in descending
    score order, and matched[j] marks claimed gts. Ties between equal-IoU
    gts go to the lowest gt index; equal scores keep insertion order.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-(detections[i].score or 0.0), i))
    matched = [False] * len(gts)
    flags = [False] * len(detections)
    for i in order:
        det = detections[i]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if matched[j]:
                continue
            v = iou(det, gt)
            if v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            matched[best] = True
            flags[i] = True
        elif any(iou(det, g) > iou_threshold for g in ignore_gts):
            flags[i] = None
        else:
            flags[i] = False
    return [flags[i] for i in order], matched


def average_precision(tp_fp_sequence, n_gt, interpolation="eleven_point"):
    """AP of a score-ordered TP/FP sequence against n_gt ground truths.

    Returns None (class excluded from the mean) when there are no ground
    truths and no detections.
    """
    seq = [bool(v) for v in tp_fp_sequence]
    if n_gt == 0:
        return None if not seq else 0.0
    if not seq:
        return 0.0
    tp = np.cumsum(seq)
    fp = np.cumsum([not v for v in seq])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if interpolation == "eleven_point":
        pts = []
        for r in np.linspace(0, 1, 11):
            above = precision[recall >= r - 1e-12]
            pts.append(above.max() if above.size else 0.0)
        return float(np.mean(pts))
    # all_point: integrate the running-max precision envelope over recall.
    r = np.concatenate([[0.0], recall, [recall[-1]]])
    p = np.concatenate([[0.0], precision, [0.0]])
    for i in range(p.size - 2, -1, -1):
        p[i] = max(p[i], p[i + 1])
    idx = np.flatnonzero(r[1:] != r[:-1]) + 1
    return float(np.sum((r[idx] - r[idx - 1]) * p[idx]))


def _collect(dets_by_image, gts_by_image, cls, iou_threshold, band=None):
    """Global score-ordered TP/FP sequence and gt count for one class."""
    scored = []
    n_gt, matched_total = 0, 0
    images = sorted(set(dets_by_image) | set(gts_by_image))
    for img in images:
        dets = [d for d in dets_by_image.get(img, []) if d.class_id == cls]
        gts_all = [g for g in gts_by_image.get(img, []) if g.class_id == cls]
        if band is None:
            gts, ignore = gts_all, []
        else:
            lo, hi = band
            gts = [g for g in gts_all if lo < g.area <= hi]
            ignore = [g for g in gts_all if not lo < g.area <= hi]
        n_gt += len(gts)
        order = sorted(range(len(dets)), key=lambda i: (-(dets[i].score or 0.0), i))
        flags, matched = greedy_match(dets, gts, iou_threshold, ignore)
        matched_total += sum(matched)
        for rank, i in enumerate(order):
            if flags[rank] is not None:
                scored.append((-dets[i].score, img, i, flags[rank]))
    scored.sort()
    return [f for *_, f in scored], n_gt, matched_total


def evaluate_detections(dets_by_image, gts_by_image, config: EvalConfig) -> EvalReport:
    """Per-class AP, mAP and per-area-band AP over a whole dataset.

    dets_by_image and gts_by_image map an image key to lists of Box; class
    ids are taken from the boxes (background id 0 never appears here).
    """
    classes = sorted({g.class_id for gts in gts_by_image.values() for g in gts} |
                     {d.class_id for ds in dets_by_image.values() for d in ds})
    per_class, tp = {}, 0
    fp = 0
    missed = 0
    for cls in classes:
        seq, n_gt, matched = _collect(dets_by_image, gts_by_image, cls,
                                      config.iou_threshold)
        per_class[cls] = average_precision(seq, n_gt, config.interpolation)
        tp += sum(seq)
        fp += len(seq) - sum(seq)
        missed += n_gt - matched
    valid = [ap for ap in per_class.values() if ap is not None]
    per_area = {}
    for name, lo, hi in config.area_ranges:
        aps = []
        for cls in classes:
            seq, n_gt, _ = _collect(dets_by_image, gts_by_image, cls,
                                    config.iou_threshold, band=(lo, hi))
            ap = average_precision(seq, n_gt, config.interpolation)
            if ap is not None:
                aps.append(ap)
        per_area[name] = float(np.mean(aps)) if aps else None
    return EvalReport(per_class_ap=per_class,
                      map=float(np.mean(valid)) if valid else 0.0,
                      per_area_ap=per_area, tp=int(tp), fp=int(fp), missed=int(missed))


def ap_by_area(dets_by_image, gts_by_image, config: EvalConfig) -> dict:
    """Per-band AP only (the area columns of the report)."""
    return evaluate_detections(dets_by_image, gts_by_image, config).per_area_ap


def coco_style_summary(dets_by_image, gts_by_image,
                       area_ranges=DEFAULT_AREA_RANGES) -> str:
    """AP@0.5, AP@0.75, AP@[0.5:0.95] and AP by area with all-point AP."""
    def map_at(thr):
        cfg = EvalConfig(iou_threshold=thr, interpolation="all_point",
                         area_ranges=area_ranges)
        return evaluate_detections(dets_by_image, gts_by_image, cfg)

    r50, r75 = map_at(0.5), map_at(0.75)
    sweep = [map_at(t).map for t in np.arange(0.5, 0.955, 0.05)]
    lines = [f"AP@0.5        {r50.map:.4f}",
             f"AP@0.75       {r75.map:.4f}",
             f"AP@[0.5:0.95] {float(np.mean(sweep)):.4f}"]
    for name, v in r50.per_area_ap.items():
        lines.append(f"AP_{name} @0.5     " + ("n/a" if v is None else f"{v:.4f}"))
    return "\n".join(lines)

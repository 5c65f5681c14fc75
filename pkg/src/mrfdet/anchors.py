"""Default-box generation, IoU, box encoding/decoding, anchor matching, NMS.

Boxes live in input-image pixel units. Corner form is (xmin, ymin, xmax,
ymax); center form is (cx, cy, w, h); the two conversions are exact
inverses. All tie-breaking is by lowest index so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError


@dataclass
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float
    class_id: int = 0
    score: float = None

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise ShapeError(f"degenerate box {(self.xmin, self.ymin, self.xmax, self.ymax)}")

    @classmethod
    def from_center(cls, cx, cy, w, h, class_id=0, score=None):
        if w <= 0 or h <= 0:
            raise ShapeError(f"non-positive box extent ({w}, {h})")
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, class_id, score)

    @property
    def center(self):
        return ((self.xmin + self.xmax) / 2, (self.ymin + self.ymax) / 2,
                self.xmax - self.xmin, self.ymax - self.ymin)

    @property
    def area(self):
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)


@dataclass(frozen=True)
class BoxOffsets:
    t_cx: float
    t_cy: float
    t_w: float
    t_h: float


@dataclass
class MatchAssignment:
    """Per-anchor assignment: gt index for positives, -1 for negatives."""

    anchor_gt: np.ndarray  # int array, len == num anchors

    @property
    def positive_indices(self):
        return np.flatnonzero(self.anchor_gt >= 0)

    @property
    def negative_indices(self):
        return np.flatnonzero(self.anchor_gt < 0)

    @property
    def n_pos(self):
        return int((self.anchor_gt >= 0).sum())


def boxes_to_corner_array(boxes) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4))
    return np.array([[b.xmin, b.ymin, b.xmax, b.ymax] for b in boxes], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form (N, 4) vs (M, 4) arrays."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_box(g: Box, d: Box) -> BoxOffsets:
    """Offsets of ground truth g relative to default box d.

    t_cx = (g_cx - d_cx) / d_w, t_cy = (g_cy - d_cy) / d_h,
    t_w = log(g_w / d_w), t_h = log(g_h / d_h).
    """
    gcx, gcy, gw, gh = g.center
    dcx, dcy, dw, dh = d.center
    if gw <= 0 or gh <= 0 or dw <= 0 or dh <= 0:
        raise ShapeError("encode_box requires positive extents")
    return BoxOffsets((gcx - dcx) / dw, (gcy - dcy) / dh,
                      float(np.log(gw / dw)), float(np.log(gh / dh)))


def decode_box(t: BoxOffsets, d: Box, class_id=0, score=None) -> Box:
    """Exact inverse of encode_box."""
    dcx, dcy, dw, dh = d.center
    return Box.from_center(t.t_cx * dw + dcx, t.t_cy * dh + dcy,
                           dw * float(np.exp(t.t_w)), dh * float(np.exp(t.t_h)),
                           class_id, score)


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized encode over matched corner-form (N, 4) pairs."""
    gc = corner_to_center(gt)
    dc = corner_to_center(anchors)
    if np.any(gc[:, 2:] <= 0) or np.any(dc[:, 2:] <= 0):
        raise ShapeError("encode requires positive extents")
    out = np.empty_like(gc)
    out[:, 0] = (gc[:, 0] - dc[:, 0]) / dc[:, 2]
    out[:, 1] = (gc[:, 1] - dc[:, 1]) / dc[:, 3]
    out[:, 2:] = np.log(gc[:, 2:] / dc[:, 2:])
    return out


def decode_array(t: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    dc = corner_to_center(anchors)
    cen = np.empty_like(t)
    cen[:, 0] = t[:, 0] * dc[:, 2] + dc[:, 0]
    cen[:, 1] = t[:, 1] * dc[:, 3] + dc[:, 1]
    cen[:, 2:] = dc[:, 2:] * np.exp(t[:, 2:])
    return center_to_corner(cen)


def corner_to_center(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[:, 0] = (a[:, 0] + a[:, 2]) / 2
    out[:, 1] = (a[:, 1] + a[:, 3]) / 2
    out[:, 2] = a[:, 2] - a[:, 0]
    out[:, 3] = a[:, 3] - a[:, 1]
    return out


def center_to_corner(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[:, 0] = a[:, 0] - a[:, 2] / 2
    out[:, 1] = a[:, 1] - a[:, 3] / 2
    out[:, 2] = a[:, 0] + a[:, 2] / 2
    out[:, 3] = a[:, 1] + a[:, 3] / 2
    return out


def generate_anchors(pyramid_shapes, scales, aspect_ratios, image_size) -> np.ndarray:
    """SSD-style default boxes, corner form (N, 4), clipped to the image.

    pyramid_shapes: per level, spatial extent S (cells are S x S).
    scales: per level, box scale in pixels; the last entry is the "next"
    scale used for the final level's geometric-mean box, so
    len(scales) == len(pyramid_shapes) + 1.
    aspect_ratios: per level, list of ratios r giving w = s*sqrt(r),
    h = s/sqrt(r); a ratio-1 box at scale sqrt(s_k * s_{k+1}) is added.
    """
    if len(scales) != len(pyramid_shapes) + 1:
        raise ShapeError("need one scale per level plus a final bound")
    out = []
    for level, (extent, ratios) in enumerate(zip(pyramid_shapes, aspect_ratios)):
        s = scales[level]
        cell = image_size / extent
        sizes = [(s * np.sqrt(r), s / np.sqrt(r)) for r in ratios]
        extra = np.sqrt(s * scales[level + 1])
        sizes.append((extra, extra))
        for y in range(extent):
            cy = (y + 0.5) * cell
            for x in range(extent):
                cx = (x + 0.5) * cell
                for w, h in sizes:
                    out.append((cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2))
    arr = np.array(out, dtype=np.float64)
    return np.clip(arr, 0, image_size)


def match_anchors(anchors: np.ndarray, gts, pos_threshold=0.5) -> MatchAssignment:
    """SSD matching: bipartite best-anchor-per-gt, then IoU thresholding.

    Every ground truth claims its highest-IoU anchor (ties to the lowest
    anchor index); any other anchor with IoU >= pos_threshold to some gt
    becomes positive for its best gt. Remaining anchors are negative.
    """
    if len(anchors) == 0:
        raise ShapeError("match_anchors needs at least one anchor")
    if not 0 < pos_threshold < 1:
        raise ShapeError("pos_threshold must lie in (0, 1)")
    gt_arr = gts if isinstance(gts, np.ndarray) else boxes_to_corner_array(gts)
    assign = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_arr) == 0:
        return MatchAssignment(assign)
    ious = iou_matrix(np.asarray(anchors, dtype=np.float64), gt_arr)
    # Threshold step first; the bipartite step below overrides it.
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(anchors)), best_gt]
    assign[best_iou >= pos_threshold] = best_gt[best_iou >= pos_threshold]
    # Bipartite step: each gt in index order claims its best still-unclaimed
    # anchor unconditionally, so every gt ends with at least one positive.
    claimed = np.zeros(len(anchors), dtype=bool)
    for j in range(gt_arr.shape[0]):
        col = ious[:, j].copy()
        col[claimed] = -1.0
        best = int(col.argmax())
        assign[best] = j
        claimed[best] = True
    return MatchAssignment(assign)


def nms_array(boxes: np.ndarray, scores: np.ndarray, iou_threshold=0.45,
              max_keep=200) -> np.ndarray:
    """Vectorized single-class greedy NMS; returns kept indices in score order.

    Matches nms() exactly: descending score, ties by index, suppress
    IoU >= threshold.
    """
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    keep = []
    while order.size and len(keep) < max_keep:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ious = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[ious < iou_threshold]
    return np.array(keep, dtype=np.int64)


def nms(detections, iou_threshold=0.45, max_keep=200):
    """Greedy per-class NMS by descending score; ties by insertion order."""
    kept = []
    by_class = {}
    for idx, det in enumerate(detections):
        if det.score is None:
            raise ShapeError("nms requires scored detections")
        by_class.setdefault(det.class_id, []).append((idx, det))
    for cls in sorted(by_class):
        group = sorted(by_class[cls], key=lambda p: (-p[1].score, p[0]))
        chosen = []
        for idx, det in group:
            if all(iou(det, other) < iou_threshold for _, other in chosen):
                chosen.append((idx, det))
        kept.extend(chosen)
    kept.sort(key=lambda p: (-p[1].score, p[0]))
    return [det for _, det in kept[:max_keep]]

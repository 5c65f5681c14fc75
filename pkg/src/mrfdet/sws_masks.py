"""Box-level weakly-supervised segmentation ground truth and loss.

Objects are painted into a ternary per-pixel mask by box area: boxes with
area inside [t1, t2] paint foreground, boxes below t1 paint ignore pixels
(too little signal to train on), boxes above t2 paint background. Overlaps
resolve as Foreground > Ignore > Background. The loss is a binary softmax
cross-entropy over non-ignored pixels, normalized by their count.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .tensor_core import ShapeError, Tensor, _node, _wants_grad, as_tensor


class SegLabel(IntEnum):
    BACKGROUND = 0
    FOREGROUND = 1
    IGNORE = 2


@dataclass(frozen=True)
class AreaThresholds:
    t1: float
    t2: float

    def __post_init__(self):
        if not 0 < self.t1 < self.t2:
            raise ShapeError(f"need 0 < t1 < t2, got ({self.t1}, {self.t2})")


# All-object-focusing variant: every box paints foreground.
AWS_THRESHOLDS = AreaThresholds(np.finfo(np.float64).tiny, np.inf)


def classify_box(area: float, thresholds: AreaThresholds) -> SegLabel:
    """Label painted by a box interior, by its area (closed [t1, t2])."""
    if area <= 0:
        raise ShapeError("box area must be positive")
    if area < thresholds.t1:
        return SegLabel.IGNORE
    if area > thresholds.t2:
        return SegLabel.BACKGROUND
    return SegLabel.FOREGROUND


def rasterize_sws_mask(gt_boxes, image_size: int, thresholds: AreaThresholds) -> np.ndarray:
    """Paint boxes into an (image_size, image_size) grid of SegLabel values.

    Pixel (px, py) is inside a box iff xmin <= px < xmax and
    ymin <= py < ymax (half-open, integer pixel centers). Priority on
    overlap: Foreground > Ignore > Background.
    """
    mask = np.full((image_size, image_size), int(SegLabel.BACKGROUND), dtype=np.uint8)
    # Paint in increasing priority so later paints win exactly when allowed.
    priority = {SegLabel.BACKGROUND: 0, SegLabel.IGNORE: 1, SegLabel.FOREGROUND: 2}
    painted = np.zeros_like(mask)  # current priority per pixel
    order = sorted(gt_boxes, key=lambda b: priority[classify_box(b.area, thresholds)])
    for box in order:
        label = classify_box(box.area, thresholds)
        x0 = max(int(np.ceil(box.xmin)), 0)
        y0 = max(int(np.ceil(box.ymin)), 0)
        x1 = min(int(np.ceil(box.xmax)), image_size)
        y1 = min(int(np.ceil(box.ymax)), image_size)
        if x1 <= x0 or y1 <= y0:
            continue
        region = painted[y0:y1, x0:x1]
        win = priority[label] >= region
        mask[y0:y1, x0:x1][win] = int(label)
        region[win] = priority[label]
    return mask


def seg_loss(seg_logits, mask: np.ndarray):
    """Per-pixel binary softmax cross-entropy over valid (non-Ignore) pixels.

    Returns (loss Tensor scalar, valid pixel count); loss is 0 with zero
    gradient when no valid pixels exist. Gradient is defined w.r.t. the
    logits.
    """
    logits = as_tensor(seg_logits)
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ShapeError(f"seg logits must be (2, H, W), got {logits.shape}")
    if logits.shape[1:] != mask.shape:
        raise ShapeError(f"logits extent {logits.shape[1:]} != mask extent {mask.shape}")
    valid = mask != int(SegLabel.IGNORE)
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    if count == 0:
        out = _node(np.array(0.0), (logits,))
        out._backward = lambda g: None
        return out, 0
    truth = (mask == int(SegLabel.FOREGROUND)).astype(np.int64)
    picked = np.where(truth == 1, logp[1], logp[0])
    loss = -float(picked[valid].sum()) / count
    out = _node(np.array(loss), (logits,))

    def bwd(g):
        if _wants_grad(logits):
            p = np.exp(logp)
            onehot = np.stack([1.0 - truth, truth.astype(np.float64)])
            grad = (p - onehot) * (valid / count)
            logits._accumulate(g * grad)
    out._backward = bwd
    return out, count


def mask_to_pgm_bytes(mask: np.ndarray) -> bytes:
    """Binary PGM (P5) encoding: 0=Background, 128=Ignore, 255=Foreground."""
    values = np.zeros_like(mask, dtype=np.uint8)
    values[mask == int(SegLabel.FOREGROUND)] = 255
    values[mask == int(SegLabel.IGNORE)] = 128
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n255\n".encode("ascii")
    return header + values.tobytes()

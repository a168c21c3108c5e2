"""Geometric primitives for anchor-based detection.

Axis-aligned boxes use continuous pixel coordinates (x_min, y_min, x_max,
y_max) with area = (x_max - x_min) * (y_max - y_min). All functions here are
pure and operate on immutable inputs; arrays are float64 internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

CLASS_NAMES = ("hard_negative", "mitotic_figure")
HARD_NEGATIVE = 0
MITOTIC_FIGURE = 1

# Decoded box extents are clamped so an untrained regression head cannot
# produce overflowing exp() values.
LOG_EXTENT_CLAMP = math.log(1000.0 / 16.0)

# AnchorAssignment labels for anchors not matched to a ground truth.
NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box; extent must be strictly positive and finite."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box coordinates must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box extent: {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "BBox":
        x0, y0, x1, y1 = (float(v) for v in arr)
        return BBox(x0, y0, x1, y1)


@dataclass(frozen=True)
class Detection:
    """A scored, classified box; the unit of detector output and evaluation."""

    box: BBox
    class_id: int
    score: float

    def __post_init__(self):
        if self.class_id not in (HARD_NEGATIVE, MITOTIC_FIGURE):
            raise ValueError(f"class_id must be 0 or 1, got {self.class_id}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid: one anchor per (cell x scale x ratio) per stride.

    At stride s the anchor area for scale=1, ratio=1 is s*s; aspect_ratios
    are height/width.
    """

    strides: tuple[int, ...] = (8, 16)
    scales: tuple[float, ...] = (1.0, 1.5, 2.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if not self.strides or not self.scales or not self.aspect_ratios:
            raise ConfigError("anchor config needs at least one stride, scale and ratio")
        if any(s <= 0 for s in self.strides) or any(s <= 0 for s in self.scales) \
                or any(r <= 0 for r in self.aspect_ratios):
            raise ConfigError("anchor strides, scales and ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def num_anchors(self, image_height: int, image_width: int) -> int:
        total = 0
        for s in self.strides:
            total += (image_height // s) * (image_width // s) * self.anchors_per_cell
        return total


@dataclass(frozen=True)
class AnchorAssignment:
    """Per-anchor label: index >= 0 is the matched ground truth, NEGATIVE (-1)
    is background and IGNORE (-2) is excluded from the classification loss."""

    gt_index: np.ndarray  # (A,) int64

    @property
    def positive_mask(self) -> np.ndarray:
        return self.gt_index >= 0

    @property
    def negative_mask(self) -> np.ndarray:
        return self.gt_index == NEGATIVE

    @property
    def ignore_mask(self) -> np.ndarray:
        return self.gt_index == IGNORE

    @property
    def num_positives(self) -> int:
        return int(self.positive_mask.sum())


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) arrays of xyxy boxes."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0.0)
    return out


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Survivors are returned sorted by descending score (ties keep input
    order); no two survivors of the same class overlap above the threshold.
    """
    if not (0.0 <= iou_threshold <= 1.0):
        raise ValueError(f"iou_threshold must lie in [0, 1], got {iou_threshold}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    keep: list[Detection] = []
    suppressed = [False] * len(dets)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(dets[i])
        for j in order[pos + 1:]:
            if suppressed[j] or dets[j].class_id != dets[i].class_id:
                continue
            if iou(dets[i].box, dets[j].box) > iou_threshold:
                suppressed[j] = True
    return keep


def generate_anchors(cfg: AnchorConfig, image_height: int, image_width: int) -> np.ndarray:
    """Anchor boxes for an image, as an (A, 4) float64 array.

    Anchors are laid out stride by stride in row-major cell order with the
    (scale, ratio) pairs innermost; detector heads must flatten their
    per-cell outputs in the same order.
    """
    for s in cfg.strides:
        if image_height % s or image_width % s:
            raise ConfigError(
                f"image size {image_height}x{image_width} not divisible by stride {s}")
    per_level = []
    for s in cfg.strides:
        gh, gw = image_height // s, image_width // s
        cx = (np.arange(gw, dtype=np.float64) + 0.5) * s
        cy = (np.arange(gh, dtype=np.float64) + 0.5) * s
        # (scale, ratio) -> width/height; ratio is height/width
        wh = np.array(
            [(s * sc / math.sqrt(r), s * sc * math.sqrt(r))
             for sc in cfg.scales for r in cfg.aspect_ratios],
            dtype=np.float64,
        )
        centers = np.stack(
            np.broadcast_arrays(cy[:, None], cx[None, :]), axis=-1
        ).reshape(-1, 2)  # (gh*gw, 2) as (cy, cx)
        k = wh.shape[0]
        boxes = np.empty((centers.shape[0], k, 4), dtype=np.float64)
        boxes[:, :, 0] = centers[:, None, 1] - 0.5 * wh[None, :, 0]
        boxes[:, :, 1] = centers[:, None, 0] - 0.5 * wh[None, :, 1]
        boxes[:, :, 2] = centers[:, None, 1] + 0.5 * wh[None, :, 0]
        boxes[:, :, 3] = centers[:, None, 0] + 0.5 * wh[None, :, 1]
        per_level.append(boxes.reshape(-1, 4))
    return np.concatenate(per_level, axis=0)


def _to_cxcywh(boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + 0.5 * w
    cy = boxes[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_boxes(anchors, gts) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) of ground truths against anchors.

    tx = (cx_gt - cx_a) / w_a, tw = ln(w_gt / w_a), and likewise for y/h.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _to_cxcywh(a)
    gcx, gcy, gw, gh = _to_cxcywh(g)
    out = np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)
    return out


def decode_boxes(anchors, offsets, clamp: float = LOG_EXTENT_CLAMP) -> np.ndarray:
    """Inverse of encode_boxes; tw/th are clamped to +-clamp before exp."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    t = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    acx, acy, aw, ah = _to_cxcywh(a)
    cx = acx + t[:, 0] * aw
    cy = acy + t[:, 1] * ah
    w = aw * np.exp(np.clip(t[:, 2], -clamp, clamp))
    h = ah * np.exp(np.clip(t[:, 3], -clamp, clamp))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_box(anchor: BBox, gt: BBox) -> np.ndarray:
    return encode_boxes(anchor.as_array()[None], gt.as_array()[None])[0]


def decode_box(anchor: BBox, offsets, clamp: float = LOG_EXTENT_CLAMP) -> BBox:
    return BBox.from_array(decode_boxes(anchor.as_array()[None],
                                        np.asarray(offsets, dtype=np.float64)[None],
                                        clamp=clamp)[0])


def match_anchors(anchors, gt_boxes, pos_threshold: float = 0.5,
                  neg_threshold: float = 0.4) -> AnchorAssignment:
    """Assign anchors to ground truths by IoU.

    An anchor is positive (assigned to its argmax gt) when its best IoU is
    >= pos_threshold, negative below neg_threshold, ignored in between. The
    best anchor for each gt is additionally forced positive, so every gt
    owns at least one anchor.
    """
    if pos_threshold < neg_threshold:
        raise ValueError("pos_threshold must be >= neg_threshold")
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    num_a = a.shape[0]
    if g.shape[0] == 0:
        return AnchorAssignment(np.full(num_a, NEGATIVE, dtype=np.int64))
    ious = iou_matrix(a, g)
    best_iou = ious.max(axis=1)
    best_gt = ious.argmax(axis=1)
    labels = np.full(num_a, IGNORE, dtype=np.int64)
    labels[best_iou < neg_threshold] = NEGATIVE
    pos = best_iou >= pos_threshold
    labels[pos] = best_gt[pos]
    # Force the best anchor per gt; on conflicts the gt with higher IoU wins.
    forced_iou = np.full(num_a, -1.0)
    for gi in range(g.shape[0]):
        ai = int(ious[:, gi].argmax())
        if ious[ai, gi] > forced_iou[ai]:
            labels[ai] = gi
            forced_iou[ai] = ious[ai, gi]
    return AnchorAssignment(labels)


def greedy_match_detections(dets: Sequence[Detection], gt_boxes, gt_classes,
                            iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy TP/FP flags for detections against same-class ground truths.

    Detections are processed in descending score order (ties keep input
    order); each matches at most one still-unmatched gt of its class, taking
    the highest-IoU one when that IoU is >= iou_threshold. Returned flags
    align with the *input* order of `dets`.
    """
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gc = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if g.shape[0] != gc.shape[0]:
        raise ValueError("gt_boxes and gt_classes must have equal length")
    tp = np.zeros(len(dets), dtype=bool)
    if not dets:
        return tp
    matched = np.zeros(g.shape[0], dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for i in order:
        det = dets[i]
        cand = np.flatnonzero((gc == det.class_id) & ~matched)
        if cand.size == 0:
            continue
        ious = iou_matrix(det.box.as_array()[None], g[cand])[0]
        j = int(ious.argmax())
        if ious[j] >= iou_threshold:
            matched[cand[j]] = True
            tp[i] = True
    return tp

"""Axis-aligned box primitives: IoU, NMS, delta encoding/decoding, clipping.

Boxes are (x_min, y_min, x_max, y_max) in continuous image coordinates where
pixel (row r, col c) occupies [c, c+1] x [r, r+1]. Batched operations take
float64 arrays of shape (N, 4); the `Box` dataclass is the scalar currency
used in annotations, detections and pseudo labels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# exp() guard for decoded box sizes, ln(1000/16) as in the canonical detector
MAX_DELTA_EXP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """One axis-aligned box. Requires x_max > x_min, y_max > y_min, finite."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates: {vals}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate box: {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    @staticmethod
    def from_array(arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return Box(x1, y1, x2, y2)


def boxes_to_array(boxes) -> np.ndarray:
    """List of Box (or (N,4) array-like) -> (N, 4) float64 array."""
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if isinstance(boxes[0], Box):
        return np.stack([b.as_array() for b in boxes])
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)


def _as_xyxy(b) -> np.ndarray:
    if isinstance(b, Box):
        return b.as_array()
    return np.asarray(b, dtype=np.float64).reshape(4)


def iou(a, b) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    a = _as_xyxy(a)
    b = _as_xyxy(b)
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N,4) and (M,4) box arrays -> (N, M)."""
    a = boxes_to_array(a)
    b = boxes_to_array(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix = np.maximum(
        0.0,
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
    )
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.where(inter > 0.0, inter / np.maximum(union, 1e-12), 0.0)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, score-descending.

    Ties in score are broken by lower index so the result is deterministic.
    A surviving pair never has IoU >= iou_thresh.
    """
    boxes = boxes_to_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        ix = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        iy = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = ix * iy
        ovr = inter / np.maximum(areas[i] + areas[rest] - inter, 1e-12)
        order = rest[ovr < iou_thresh]
    return np.asarray(keep, dtype=np.int64)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Box regression targets (tx, ty, tw, th) taking anchors onto targets."""
    anchors = boxes_to_array(anchors)
    targets = boxes_to_array(targets)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = targets[:, 0] + 0.5 * tw
    ty = targets[:, 1] + 0.5 * th
    return np.stack(
        [(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Apply (tx, ty, tw, th) offsets to anchors -> (N, 4) boxes."""
    anchors = boxes_to_array(anchors)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = deltas[:, 0] * aw + ax
    cy = deltas[:, 1] * ah + ay
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_DELTA_EXP))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_DELTA_EXP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, image_size: int) -> np.ndarray:
    return np.clip(boxes_to_array(boxes), 0.0, float(image_size))

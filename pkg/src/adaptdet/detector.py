"""Compact two-stage detector: backbone, RPN, ROI head, and box machinery.

The network is deliberately small (total stride 8, ~60k backbone parameters)
so that full adaptation experiments run in minutes on a CPU, while keeping
the real two-stage structure: per-anchor objectness + deltas from the RPN,
ROI-aligned features classified by a separate region head, and the standard
supervised losses (softmax cross-entropy + smooth-L1) on both stages.

All modules default to float64 so analytic finite-difference checks hold at
tight tolerances.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import Box, boxes_to_array, clip_boxes, decode_deltas, encode_deltas, iou_matrix, nms

ANCHORS_PER_CELL = 9


class SizeMismatchError(ValueError):
    """Image size incompatible with the backbone stride."""


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 128
    num_fg_classes: int = 3
    stride: int = 8
    feat_channels: int = 64
    anchor_scales: tuple[float, float, float] = (12.0, 20.0, 32.0)
    anchor_ratios: tuple[float, float, float] = (0.5, 1.0, 2.0)
    roi_size: int = 4
    head_hidden: int = 128
    k_pre: int = 600
    k_post_train: int = 128
    k_post_test: int = 64
    rpn_nms_iou: float = 0.7
    detect_nms_iou: float = 0.3
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_fg_iou: float = 0.5
    rpn_batch: int = 64
    rpn_pos_fraction: float = 0.5
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    score_thresh: float = 0.05
    max_detections: int = 50
    # second-stage regression targets are scaled by these stds (the canonical
    # detector's BBOX_NORMALIZE values); without them the refinement gradient
    # is too weak to localize tightly
    roi_delta_stds: tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)
    dtype: str = "float64"

    @property
    def grid_size(self) -> int:
        return self.image_size // self.stride

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float64": torch.float64, "float32": torch.float32}[self.dtype]

    def fingerprint_payload(self) -> dict:
        return dataclasses.asdict(self)


def config_fingerprint(*payloads: dict) -> str:
    blob = json.dumps(list(payloads), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# containers


@dataclass
class FeatureMap:
    values: torch.Tensor  # (C, H', W')
    stride: int


@dataclass
class RpnOutput:
    """Per-anchor two-way softmax objectness and box deltas.

    `objectness` is the foreground probability (background = 1 - foreground by
    the softmax); it doubles as the foreground map that weights the local
    domain discriminator.
    """

    logits: torch.Tensor  # (H', W', 9, 2), [background, foreground]
    objectness: torch.Tensor  # (H', W', 9) in [0, 1]
    deltas: torch.Tensor  # (H', W', 9, 4)


@dataclass
class Proposals:
    boxes: np.ndarray  # (M, 4)
    scores: np.ndarray  # (M,) objectness of the source anchor after decode
    anchor_indices: np.ndarray  # (M,) flat index of the anchor each box decoded from

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class RoiPrediction:
    roi: Box
    class_probs: np.ndarray  # (num_fg_classes + 1,), index 0 = background
    refined_deltas: np.ndarray  # (4,), class-agnostic


class RoiPredictions:
    """Batch of second-stage predictions for a list of ROIs."""

    def __init__(self, rois: np.ndarray, logits: torch.Tensor, deltas: torch.Tensor):
        self.rois = boxes_to_array(rois)
        self.logits = logits
        self.class_probs = F.softmax(logits, dim=-1) if logits.numel() else logits
        self.deltas = deltas

    def __len__(self) -> int:
        return len(self.rois)

    def __getitem__(self, i: int) -> RoiPrediction:
        return RoiPrediction(
            roi=Box.from_array(self.rois[i]),
            class_probs=self.class_probs[i].detach().numpy(),
            refined_deltas=self.deltas[i].detach().numpy(),
        )


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int  # >= 1; 0 is background and never emitted
    score: float


# ---------------------------------------------------------------------------
# anchors


def anchor_grid(cfg: ModelConfig) -> np.ndarray:
    """All anchors for the configured image, flat (H'*W'*9, 4), cell-major.

    Per cell: 3 scales x 3 ratios, centered on the feature cell. For scale s
    and ratio r (height/width), w = s / sqrt(r) and h = s * sqrt(r), so the
    anchor keeps area s^2.
    """
    g = cfg.grid_size
    shapes = []
    for s in cfg.anchor_scales:
        for r in cfg.anchor_ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            shapes.append((w, h))
    shapes = np.asarray(shapes, dtype=np.float64)  # (9, 2)
    centers = (np.arange(g, dtype=np.float64) + 0.5) * cfg.stride
    cy, cx = np.meshgrid(centers, centers, indexing="ij")
    cx = cx[..., None]
    cy = cy[..., None]
    w = shapes[None, None, :, 0]
    h = shapes[None, None, :, 1]
    grid = np.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1
    )  # (H', W', 9, 4)
    return grid.reshape(-1, 4)


# ---------------------------------------------------------------------------
# network modules


def _init_params(module: nn.Module, gen: torch.Generator, final_std: float | None = None):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            if final_std is not None:
                std = final_std
            else:
                fan_in = m.weight.shape[1] * (
                    m.weight.shape[2] * m.weight.shape[3] if m.weight.dim() == 4 else 1
                )
                std = float(np.sqrt(2.0 / fan_in))
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


class Backbone(nn.Module):
    """Four conv blocks with group norm, total stride 8 (~61k parameters).

    Group norm (not batch norm) keeps every forward deterministic and
    batch-size independent, which single-image training needs.
    """

    def __init__(self, out_channels: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(64, out_channels, 3, stride=1, padding=1)
        self.norm1 = nn.GroupNorm(8, 16)
        self.norm2 = nn.GroupNorm(8, 32)
        self.norm3 = nn.GroupNorm(8, 64)
        self.norm4 = nn.GroupNorm(8, out_channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.norm1(self.conv1(x)))
        x = F.relu(self.norm2(self.conv2(x)))
        x = F.relu(self.norm3(self.conv3(x)))
        return F.relu(self.norm4(self.conv4(x)))


class RpnHead(nn.Module):
    def __init__(self, in_channels: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, in_channels, 3, padding=1)
        self.cls = nn.Conv2d(in_channels, ANCHORS_PER_CELL * 2, 1)
        self.reg = nn.Conv2d(in_channels, ANCHORS_PER_CELL * 4, 1)

    def forward(self, feat: torch.Tensor) -> RpnOutput:
        x = F.relu(self.conv(feat.unsqueeze(0)))
        logits = self.cls(x)[0]  # (18, H', W')
        deltas = self.reg(x)[0]  # (36, H', W')
        h, w = logits.shape[-2:]
        logits = logits.permute(1, 2, 0).reshape(h, w, ANCHORS_PER_CELL, 2)
        deltas = deltas.permute(1, 2, 0).reshape(h, w, ANCHORS_PER_CELL, 4)
        objectness = F.softmax(logits, dim=-1)[..., 1]
        return RpnOutput(logits=logits, objectness=objectness, deltas=deltas)


class RoiHead(nn.Module):
    """Classifies pooled ROI features; class-agnostic box refinement."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        in_feats = cfg.feat_channels * cfg.roi_size * cfg.roi_size
        self.fc = nn.Linear(in_feats, cfg.head_hidden)
        self.cls = nn.Linear(cfg.head_hidden, cfg.num_fg_classes + 1)
        self.reg = nn.Linear(cfg.head_hidden, 4)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = F.relu(self.fc(pooled.flatten(1)))
        return self.cls(x), self.reg(x)


class DomainDiscriminator(nn.Module):
    """Local domain classifier: feature map -> per-position probability map.

    Trained with the least-squares objective, its output converges toward 0
    on source features and 1 on target features.
    """

    def __init__(self, in_channels: int = 64, hidden: int = 64):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, 1, 1)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.conv1(feat.unsqueeze(0)))
        return torch.sigmoid(self.conv2(x))[0, 0]  # (H', W')


class TwoStageDetector(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.feat_channels)
        self.rpn = RpnHead(cfg.feat_channels)
        self.roi_head = RoiHead(cfg)
        gen = torch.Generator().manual_seed(int(seed))
        _init_params(self.backbone, gen)
        _init_params(self.rpn.conv, gen)
        _init_params(self.rpn.cls, gen, final_std=0.01)
        _init_params(self.rpn.reg, gen, final_std=0.01)
        _init_params(self.roi_head.fc, gen)
        _init_params(self.roi_head.cls, gen, final_std=0.01)
        _init_params(self.roi_head.reg, gen, final_std=0.01)
        self.to(cfg.torch_dtype)
        self._anchors = anchor_grid(cfg)

    @property
    def anchors(self) -> np.ndarray:
        return self._anchors

    def image_to_tensor(self, image: np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(np.ascontiguousarray(image), dtype=self.cfg.torch_dtype)
        return t.permute(2, 0, 1)

    def backbone_forward(self, image) -> FeatureMap:
        if isinstance(image, np.ndarray):
            image = self.image_to_tensor(image)
        h, w = image.shape[-2:]
        if h % self.cfg.stride or w % self.cfg.stride:
            raise SizeMismatchError(f"image {h}x{w} not divisible by stride {self.cfg.stride}")
        feat = self.backbone(image.unsqueeze(0))[0]
        return FeatureMap(values=feat, stride=self.cfg.stride)

    def rpn_forward(self, feat: FeatureMap) -> RpnOutput:
        return self.rpn(feat.values)

    def rpc_forward(self, feat: FeatureMap, rois) -> RoiPredictions:
        rois = boxes_to_array(rois)
        dt = feat.values.dtype
        if len(rois) == 0:
            return RoiPredictions(
                rois,
                torch.zeros(0, self.cfg.num_fg_classes + 1, dtype=dt),
                torch.zeros(0, 4, dtype=dt),
            )
        pooled = roi_align(feat, rois, self.cfg.roi_size)
        logits, deltas = self.roi_head(pooled)
        return RoiPredictions(rois, logits, deltas)

    def detect(self, image, score_thresh: float | None = None, k_post: int | None = None):
        """Full test-time pipeline -> list of Detection, score-descending."""
        with torch.no_grad():
            feat = self.backbone_forward(image)
            rpn_out = self.rpn_forward(feat)
            props = select_proposals(
                rpn_out,
                self._anchors,
                self.cfg.k_pre,
                k_post if k_post is not None else self.cfg.k_post_test,
                self.cfg.rpn_nms_iou,
                self.cfg.image_size,
            )
            preds = self.rpc_forward(feat, props.boxes)
        return detections_from_predictions(
            preds,
            self.cfg,
            score_thresh=self.cfg.score_thresh if score_thresh is None else score_thresh,
        )

    def head_parameters(self):
        return list(self.rpn.parameters()) + list(self.roi_head.parameters())


def detections_from_predictions(
    preds: RoiPredictions, cfg: ModelConfig, score_thresh: float
) -> list[Detection]:
    """Refine ROIs, assign each its best foreground class, per-class NMS."""
    if len(preds) == 0:
        return []
    probs = preds.class_probs.detach().numpy()
    refined = clip_boxes(decode_deltas(preds.rois, preds.deltas.detach().numpy()), cfg.image_size)
    fg = probs[:, 1:]
    best_cls = fg.argmax(axis=1) + 1
    best_score = fg.max(axis=1)
    out: list[Detection] = []
    for c in range(1, cfg.num_fg_classes + 1):
        sel = np.nonzero((best_cls == c) & (best_score >= score_thresh))[0]
        if sel.size == 0:
            continue
        # drop boxes that collapsed to zero size after clipping
        wh_ok = (refined[sel, 2] - refined[sel, 0] > 1e-3) & (
            refined[sel, 3] - refined[sel, 1] > 1e-3
        )
        sel = sel[wh_ok]
        if sel.size == 0:
            continue
        keep = nms(refined[sel], best_score[sel], cfg.detect_nms_iou)
        for i in sel[keep]:
            out.append(
                Detection(
                    box=Box.from_array(refined[i]), class_id=int(c), score=float(best_score[i])
                )
            )
    out.sort(key=lambda d: -d.score)
    return out[: cfg.max_detections]


# ---------------------------------------------------------------------------
# matching and sampling


def match_anchors(
    anchors: np.ndarray,
    gt_boxes,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Label every anchor positive (1) / negative (0) / ignore (-1).

    Positive when IoU with some GT >= pos_iou, or when the anchor is the
    argmax match for a GT (ties -> lowest anchor index). Negative when the
    max IoU < neg_iou. Returns (labels, matched_gt_index); matched index is
    the anchor's own best GT, -1 where unmatched.
    """
    anchors = boxes_to_array(anchors)
    gt = boxes_to_array(gt_boxes)
    a = len(anchors)
    if len(gt) == 0:
        return np.zeros(a, dtype=np.int8), np.full(a, -1, dtype=np.int64)
    ious = iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(a), best_gt]
    labels = np.full(a, -1, dtype=np.int8)
    labels[best_iou < neg_iou] = 0
    labels[best_iou >= pos_iou] = 1
    for g in range(len(gt)):
        a_star = int(ious[:, g].argmax())
        if ious[a_star, g] > 0.0:
            labels[a_star] = 1
    matched = np.where(labels == 1, best_gt, -1)
    return labels, matched


def subsample_labels(
    labels: np.ndarray,
    rng: np.random.Generator,
    batch: int = 64,
    pos_fraction: float = 0.5,
) -> np.ndarray:
    """Cap positives+negatives at `batch` (<= pos_fraction positive); extras -> ignore."""
    labels = labels.copy()
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    n_pos = min(len(pos), int(batch * pos_fraction))
    if len(pos) > n_pos:
        drop = rng.permutation(pos)[n_pos:]
        labels[drop] = -1
    n_neg = min(len(neg), batch - n_pos)
    if len(neg) > n_neg:
        drop = rng.permutation(neg)[n_neg:]
        labels[drop] = -1
    return labels


def match_rois(
    rois: np.ndarray, gt_boxes, gt_classes, fg_iou: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Second-stage targets: ROI -> (class label, encoded deltas).

    IoU >= fg_iou (boundary inclusive) assigns the GT's class (1-based);
    otherwise background (0) with zero delta targets.
    """
    rois = boxes_to_array(rois)
    gt = boxes_to_array(gt_boxes)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    labels = np.zeros(len(rois), dtype=np.int64)
    targets = np.zeros((len(rois), 4), dtype=np.float64)
    if len(gt) == 0 or len(rois) == 0:
        return labels, targets
    ious = iou_matrix(rois, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(len(rois)), best]
    fg = best_iou >= fg_iou
    labels[fg] = gt_classes[best[fg]] + 1
    if fg.any():
        targets[fg] = encode_deltas(rois[fg], gt[best[fg]])
    return labels, targets


def sample_rois(
    labels: np.ndarray, rng: np.random.Generator, batch: int = 64, fg_fraction: float = 0.25
) -> np.ndarray:
    """Indices of a class-balanced ROI minibatch (foreground-capped)."""
    fg = np.nonzero(labels > 0)[0]
    bg = np.nonzero(labels == 0)[0]
    n_fg = min(len(fg), int(batch * fg_fraction))
    fg_keep = rng.permutation(fg)[:n_fg] if len(fg) > n_fg else fg
    n_bg = min(len(bg), batch - len(fg_keep))
    bg_keep = rng.permutation(bg)[:n_bg] if len(bg) > n_bg else bg
    return np.sort(np.concatenate([fg_keep, bg_keep]).astype(np.int64))


# ---------------------------------------------------------------------------
# losses (supervised, first and second stage)


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    absx = x.abs()
    return torch.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)


def rpn_loss(
    rpn_out: RpnOutput, labels: np.ndarray, target_deltas: np.ndarray | None
) -> torch.Tensor:
    """Two-way cross-entropy over labeled anchors + smooth-L1 on positives.

    Cross-entropy is the mean over labeled (non-ignore) anchors; the box term
    sums over the 4 offsets and averages over positive anchors. All-ignore
    labelings contribute exactly 0.
    """
    logits = rpn_out.logits.reshape(-1, 2)
    deltas = rpn_out.deltas.reshape(-1, 4)
    labels = np.asarray(labels)
    labeled = np.nonzero(labels >= 0)[0]
    if labeled.size == 0:
        return torch.zeros((), dtype=logits.dtype)
    idx = torch.as_tensor(labeled, dtype=torch.long)
    tgt = torch.as_tensor(labels[labeled].astype(np.int64))
    loss = F.cross_entropy(logits[idx], tgt)
    pos = np.nonzero(labels == 1)[0]
    if pos.size > 0 and target_deltas is not None:
        pidx = torch.as_tensor(pos, dtype=torch.long)
        t = torch.as_tensor(target_deltas[pos], dtype=deltas.dtype)
        loss = loss + smooth_l1(deltas[pidx] - t).sum(dim=1).mean()
    return loss


def rpc_loss(
    logits: torch.Tensor,
    pred_deltas: torch.Tensor,
    roi_labels: np.ndarray,
    target_deltas: np.ndarray,
) -> torch.Tensor:
    """Cross-entropy over ROI classes + smooth-L1 on foreground ROI deltas."""
    if logits.shape[0] == 0:
        return torch.zeros((), dtype=logits.dtype)
    labels_t = torch.as_tensor(np.asarray(roi_labels, dtype=np.int64))
    loss = F.cross_entropy(logits, labels_t)
    fg = np.nonzero(np.asarray(roi_labels) > 0)[0]
    if fg.size > 0:
        fidx = torch.as_tensor(fg, dtype=torch.long)
        t = torch.as_tensor(np.asarray(target_deltas)[fg], dtype=pred_deltas.dtype)
        loss = loss + smooth_l1(pred_deltas[fidx] - t).sum(dim=1).mean()
    return loss


# ---------------------------------------------------------------------------
# proposals and ROI align


def select_proposals(
    rpn_out: RpnOutput,
    anchors: np.ndarray,
    k_pre: int,
    k_post: int,
    nms_iou: float,
    image_size: int,
) -> Proposals:
    """Decode deltas onto anchors, clip, top-k by objectness, NMS, top-k again.

    Each surviving proposal remembers the flat index of the anchor it decoded
    from, which later supplies its RPN foreground score.
    """
    if k_pre < k_post or k_post < 1:
        raise ValueError("need k_pre >= k_post >= 1")
    scores = rpn_out.objectness.detach().numpy().reshape(-1)
    deltas = rpn_out.deltas.detach().numpy().reshape(-1, 4)
    boxes = clip_boxes(decode_deltas(anchors, deltas), image_size)
    ok = np.nonzero((boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3))[0]
    order = ok[np.argsort(-scores[ok], kind="stable")][:k_pre]
    keep = nms(boxes[order], scores[order], nms_iou)[:k_post]
    sel = order[keep]
    return Proposals(boxes=boxes[sel], scores=scores[sel], anchor_indices=sel.astype(np.int64))


def bilinear_sample(values: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) at continuous points; cell (r, c) sits at (c+.5, r+.5).

    Border handling is clamp-to-edge. Fully differentiable w.r.t. `values`.
    """
    c, h, w = values.shape
    u = xs - 0.5
    v = ys - 0.5
    x0 = torch.floor(u)
    y0 = torch.floor(v)
    fx = (u - x0).to(values.dtype)
    fy = (v - y0).to(values.dtype)
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)
    flat = values.reshape(c, h * w)

    def gather(yy, xx):
        idx = (yy * w + xx).reshape(-1)
        return flat[:, idx].reshape((c,) + xs.shape)

    v00 = gather(y0l, x0l)
    v01 = gather(y0l, x1l)
    v10 = gather(y1l, x0l)
    v11 = gather(y1l, x1l)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def roi_align(feat: FeatureMap, rois, out_size: int) -> torch.Tensor:
    """Pool each ROI to (out_size, out_size) by bilinear sampling bin centers.

    ROIs are in image coordinates and divided by the feature stride; one
    sample per bin, taken at the bin center, keeps the operator linear in the
    features and makes a full-map ROI with out_size == H' an exact identity.
    Degenerate ROIs (area < 1 px^2) are skipped with a warning and pooled as
    zeros to keep output shapes aligned with the input list.
    """
    rois = boxes_to_array(rois)
    values = feat.values
    n = len(rois)
    c = values.shape[0]
    if n == 0:
        return torch.zeros(0, c, out_size, out_size, dtype=values.dtype)
    areas = (rois[:, 2] - rois[:, 0]) * (rois[:, 3] - rois[:, 1])
    bad = areas < 1.0
    if bad.any():
        import warnings

        warnings.warn(f"roi_align: skipping {int(bad.sum())} degenerate ROI(s)")
    f = rois / float(feat.stride)
    steps = (np.arange(out_size, dtype=np.float64) + 0.5) / out_size
    xs = f[:, 0:1] + steps[None, :] * (f[:, 2:3] - f[:, 0:1])  # (N, S)
    ys = f[:, 1:2] + steps[None, :] * (f[:, 3:4] - f[:, 1:2])
    xs_t = torch.as_tensor(np.repeat(xs[:, None, :], out_size, axis=1))  # (N, S, S)
    ys_t = torch.as_tensor(np.repeat(ys[:, :, None], out_size, axis=2))
    sampled = bilinear_sample(values, xs_t, ys_t)  # (C, N, S, S)
    out = sampled.permute(1, 0, 2, 3).contiguous()
    if bad.any():
        mask = torch.as_tensor(~bad, dtype=values.dtype).reshape(-1, 1, 1, 1)
        out = out * mask
    return out


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    model: TwoStageDetector,
    discriminator: DomainDiscriminator | None,
    fingerprint: str,
    data_fingerprint: str,
    iteration: int,
    stage: str,
    optim_state: dict | None = None,
):
    payload = {
        "version": CHECKPOINT_VERSION,
        "fingerprint": fingerprint,
        "data_fingerprint": data_fingerprint,
        "iteration": int(iteration),
        "stage": stage,
        "model_config": dataclasses.asdict(model.cfg),
        "model": model.state_dict(),
        "discriminator": discriminator.state_dict() if discriminator is not None else None,
        "optim": optim_state,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


class FingerprintMismatch(RuntimeError):
    pass


def load_checkpoint(path, expected_fingerprint: str | None = None) -> dict:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise RuntimeError(f"unsupported checkpoint version in {path}")
    if expected_fingerprint is not None and payload["fingerprint"] != expected_fingerprint:
        raise FingerprintMismatch(
            f"checkpoint {path} fingerprint {payload['fingerprint'][:12]} != "
            f"expected {expected_fingerprint[:12]}"
        )
    return payload


def model_from_checkpoint(payload: dict) -> tuple[TwoStageDetector, DomainDiscriminator | None]:
    cfg = ModelConfig(**payload["model_config"])
    model = TwoStageDetector(cfg, seed=0)
    model.load_state_dict(payload["model"])
    disc = None
    if payload["discriminator"] is not None:
        disc = DomainDiscriminator(cfg.feat_channels).to(cfg.torch_dtype)
        disc.load_state_dict(payload["discriminator"])
    return model, disc

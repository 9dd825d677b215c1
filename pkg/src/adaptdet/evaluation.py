"""Measurement machinery: proposal coverage, recall, AP, and ablations.

Proposal coverage of a ground-truth box is the largest IoU any proposal
achieves against it; its distribution (10 uniform bins plus the exact-zero
fraction) diagnoses how well the proposal stage transfers across domains.
Average precision is PASCAL-style with continuous interpolation. All
evaluation is deterministic given a checkpoint and a split.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .boxes import boxes_to_array, iou_matrix
from .detector import TwoStageDetector, select_proposals
from .scenes import DetectionDataset


def proposal_coverage(gt_boxes, proposals) -> np.ndarray:
    """Per ground-truth box, the max IoU over all proposals (0 when none)."""
    gt = boxes_to_array(gt_boxes)
    props = boxes_to_array(proposals)
    if len(gt) == 0:
        return np.zeros(0, dtype=np.float64)
    if len(props) == 0:
        return np.zeros(len(gt), dtype=np.float64)
    return iou_matrix(gt, props).max(axis=1)


def rpn_recall(gt_boxes, proposals, iou_thresh: float = 0.5) -> float:
    """Fraction of ground truth covered at IoU >= iou_thresh; 1.0 when no GT."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    gt = boxes_to_array(gt_boxes)
    if len(gt) == 0:
        warnings.warn("rpn_recall over empty ground truth is vacuous (1.0)")
        return 1.0
    cov = proposal_coverage(gt, proposals)
    return float((cov >= iou_thresh).mean())


def rpc_recall(pred_classes, matched_classes) -> float:
    """Fraction of ROIs whose predicted class equals their matched label.

    ROIs are matched to ground truth beforehand (IoU >= 0.5 takes the GT's
    class, otherwise background = 0). Vacuously 1.0 on an empty ROI set.
    """
    pred = np.asarray(pred_classes, dtype=np.int64).reshape(-1)
    true = np.asarray(matched_classes, dtype=np.int64).reshape(-1)
    if len(pred) != len(true):
        raise ValueError("prediction/label length mismatch")
    if len(pred) == 0:
        warnings.warn("rpc_recall over empty ROI set is vacuous (1.0)")
        return 1.0
    return float((pred == true).mean())


def average_precision(detections, gt_by_image: dict, iou_thresh: float = 0.5) -> float | None:
    """PASCAL-style AP with continuous interpolation, one class at a time.

    `detections` is a list of (image_id, box, score); `gt_by_image` maps
    image id -> (G, 4) boxes of the class being scored. Detections are
    processed score-descending (ties by insertion order); each matches the
    highest-IoU still-unmatched GT of its image at IoU >= iou_thresh, else
    counts as a false positive. Returns None when the split has no GT of
    this class (undefined).
    """
    n_gt = sum(len(boxes_to_array(g)) for g in gt_by_image.values())
    if n_gt == 0:
        return None
    if len(detections) == 0:
        return 0.0
    order = np.argsort([-d[2] for d in detections], kind="stable")
    taken = {img: np.zeros(len(boxes_to_array(g)), dtype=bool) for img, g in gt_by_image.items()}
    tp = np.zeros(len(order))
    for rank, di in enumerate(order):
        img, box, _score = detections[di]
        gt = boxes_to_array(gt_by_image.get(img, np.zeros((0, 4))))
        if len(gt) == 0:
            continue
        ious = iou_matrix(np.asarray(box).reshape(1, 4), gt)[0]
        best = int(ious.argmax())
        if ious[best] >= iou_thresh and not taken[img][best]:
            taken[img][best] = True
            tp[rank] = 1.0
    tps = np.cumsum(tp)
    recall = tps / n_gt
    precision = tps / np.arange(1, len(tp) + 1)
    # monotone (non-increasing) interpolated precision, then exact area
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mpre[idx]))


@dataclass
class CoverageHistogram:
    """Counts of GT proposal coverage in 10 uniform bins over [0, 1]."""

    bin_edges: list[float]
    counts: list[int]
    zero_fraction: float

    @staticmethod
    def from_values(coverage: np.ndarray) -> "CoverageHistogram":
        edges = np.linspace(0.0, 1.0, 11)
        counts, _ = np.histogram(coverage, bins=edges)
        zero = float((coverage == 0.0).mean()) if len(coverage) else 0.0
        return CoverageHistogram(
            bin_edges=[float(e) for e in edges],
            counts=[int(c) for c in counts],
            zero_fraction=zero,
        )

    def mass_at_or_above(self, threshold: float) -> float:
        total = sum(self.counts)
        if total == 0:
            return 0.0
        lo = int(round(threshold * 10))
        return sum(self.counts[lo:]) / total


@dataclass
class MetricsReport:
    ap_per_class: dict[str, float | None]
    map: float
    rpn_recall_at_05: float
    rpc_recall: float
    avg_iou: float
    mean_score: float
    coverage: CoverageHistogram
    config_fingerprint: str = ""
    seed: int = 0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @staticmethod
    def from_dict(d: dict) -> "MetricsReport":
        cov = CoverageHistogram(**d["coverage"])
        kw = {k: v for k, v in d.items() if k != "coverage"}
        return MetricsReport(coverage=cov, **kw)


def evaluate_model(model: TwoStageDetector, split: DetectionDataset,
                   iou_thresh: float = 0.5, config_fingerprint: str = "",
                   seed: int = 0) -> MetricsReport:
    """Detect on every image of a labeled split and fill every metric field.

    mean_score / avg_iou are over matched true-positive detections (class
    correct and IoU >= 0.5, greedily matched score-descending, at most one
    detection per GT). Proposal metrics use the test-time proposal budget.
    """
    mc = model.cfg
    per_class_dets: dict[int, list] = {c: [] for c in range(1, mc.num_fg_classes + 1)}
    per_class_gt: dict[int, dict] = {c: {} for c in range(1, mc.num_fg_classes + 1)}
    coverage_all: list[np.ndarray] = []
    rpc_pred: list[int] = []
    rpc_true: list[int] = []
    tp_scores: list[float] = []
    tp_ious: list[float] = []

    for i in range(len(split)):
        img = split.image(i)
        gt_boxes, gt_cls = split.annotation(i)
        with torch.no_grad():
            feat = model.backbone_forward(img)
            rpn_out = model.rpn_forward(feat)
            props = select_proposals(rpn_out, model.anchors, mc.k_pre, mc.k_post_test,
                                     mc.rpn_nms_iou, mc.image_size)
            preds = model.rpc_forward(feat, props.boxes)
        coverage_all.append(proposal_coverage(gt_boxes, props.boxes))

        # proposal-classification recall: proposals matched to GT class or bg
        if len(props):
            ious = iou_matrix(props.boxes, gt_boxes)
            if ious.shape[1]:
                best = ious.argmax(axis=1)
                matched = np.where(ious[np.arange(len(props)), best] >= iou_thresh,
                                   np.asarray(gt_cls)[best] + 1, 0)
            else:
                matched = np.zeros(len(props), dtype=np.int64)
            pred_cls = preds.class_probs.argmax(dim=1).numpy()
            rpc_pred.extend(int(p) for p in pred_cls)
            rpc_true.extend(int(t) for t in matched)

        dets = model.detect(img)
        for c in range(1, mc.num_fg_classes + 1):
            per_class_gt[c][i] = boxes_to_array(gt_boxes)[np.asarray(gt_cls) == c - 1]
        for det in dets:
            per_class_dets[det.class_id].append((i, det.box.as_array(), det.score))

        # greedy class-aware TP matching for mean_score / avg_iou
        for c in range(1, mc.num_fg_classes + 1):
            gt_c = boxes_to_array(gt_boxes)[np.asarray(gt_cls) == c - 1]
            taken = np.zeros(len(gt_c), dtype=bool)
            for det in dets:
                if det.class_id != c or len(gt_c) == 0:
                    continue
                ious = iou_matrix(det.box.as_array().reshape(1, 4), gt_c)[0]
                best = int(ious.argmax())
                if ious[best] >= iou_thresh and not taken[best]:
                    taken[best] = True
                    tp_scores.append(det.score)
                    tp_ious.append(float(ious[best]))

    ap_per_class: dict[str, float | None] = {}
    defined = []
    for c in range(1, mc.num_fg_classes + 1):
        ap = average_precision(per_class_dets[c], per_class_gt[c], iou_thresh)
        ap_per_class[f"class_{c}"] = ap
        if ap is not None:
            defined.append(ap)
    coverage = np.concatenate(coverage_all) if coverage_all else np.zeros(0)

    return MetricsReport(
        ap_per_class=ap_per_class,
        map=float(np.mean(defined)) if defined else 0.0,
        rpn_recall_at_05=float((coverage >= iou_thresh).mean()) if len(coverage) else 1.0,
        rpc_recall=rpc_recall(rpc_pred, rpc_true) if rpc_pred else 1.0,
        avg_iou=float(np.mean(tp_ious)) if tp_ious else 0.0,
        mean_score=float(np.mean(tp_scores)) if tp_scores else 0.0,
        coverage=CoverageHistogram.from_values(coverage),
        config_fingerprint=config_fingerprint,
        seed=seed,
        notes={
            "ap_interpolation": "continuous",
            "mean_score_population": "matched true positives",
            "avg_iou_population": "matched true positives",
        },
    )


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class VariantResult:
    variant: str
    seeds: list[int]
    maps: list[float]
    mean_map: float
    std_map: float
    reports: list[MetricsReport]
    error: str | None = None


@dataclass
class AblationResult:
    rows: list[VariantResult]

    def table(self) -> str:
        lines = [f"{'variant':<24} {'mAP mean':>9} {'mAP std':>8}  per-seed"]
        for r in self.rows:
            if r.error:
                lines.append(f"{r.variant:<24} {'FAILED':>9} {'':>8}  {r.error}")
            else:
                per_seed = " ".join(f"{m:.3f}" for m in r.maps)
                lines.append(f"{r.variant:<24} {r.mean_map:>9.3f} {r.std_map:>8.3f}  {per_seed}")
        return "\n".join(lines)

    def failed(self) -> bool:
        return any(r.error for r in self.rows)

    def row(self, variant: str) -> VariantResult:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)


def run_ablation(train_variant_fn, variants: list[str], seeds: list[int]) -> AblationResult:
    """Train and evaluate each variant over shared seeds.

    `train_variant_fn(variant, seed) -> MetricsReport` supplies the actual
    training; per-variant failures are recorded and the table is still
    emitted with the surviving rows.
    """
    rows = []
    for variant in variants:
        maps, reports, err = [], [], None
        for seed in seeds:
            try:
                report = train_variant_fn(variant, seed)
                reports.append(report)
                maps.append(report.map)
            except Exception as e:  # noqa: BLE001 - harness must keep going
                err = f"{type(e).__name__}: {e}"
                break
        rows.append(
            VariantResult(
                variant=variant,
                seeds=list(seeds[: len(maps)]),
                maps=maps,
                mean_map=float(np.mean(maps)) if maps else float("nan"),
                std_map=float(np.std(maps)) if maps else float("nan"),
                reports=reports,
                error=err,
            )
        )
    return AblationResult(rows=rows)

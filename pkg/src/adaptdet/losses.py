"""Domain-adaptation losses for the two detector heads.

Three families, all pure and individually finite-difference checkable:

* collaborative self-training: confident second-stage detections supervise
  the RPN on target images (pseudo-label loss), and confident RPN scores
  weight an entropy-minimization term on the region classifier;
* foreground/background discrepancy between the two heads, weighted toward
  ambiguous ROIs, used in an alternating minimax (heads maximize, backbone
  minimizes);
* least-squares local domain-discriminator losses, weighted per position by
  the summed RPN foreground map, plus the gradient-reversal transform that
  turns them into an alignment signal for the backbone.

Score-weight functions use |1 - 2s|^lam which is 0 at s = 0.5 and 1 at the
extremes; the ambiguity weight (2 min(s, 1-s, t, 1-t))^lam is its opposite,
peaking where both heads are uncertain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .boxes import boxes_to_array, encode_deltas, iou_matrix
from .detector import Detection, RpnOutput, bilinear_sample, match_anchors, rpn_loss, subsample_labels

PROB_EPS = 1e-7


def _checked(x, name: str, lo: float = 0.0, hi: float = 1.0):
    t = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    vals = t.detach()
    if vals.numel() and (float(vals.min()) < lo - 1e-12 or float(vals.max()) > hi + 1e-12):
        raise ValueError(f"{name} must lie in [{lo}, {hi}], got range "
                         f"[{float(vals.min())}, {float(vals.max())}]")
    return t


def _maybe_item(out: torch.Tensor, *inputs):
    """Tensor in -> tensor out; plain scalars -> float; arrays -> ndarray."""
    if any(torch.is_tensor(i) for i in inputs):
        return out
    if out.numel() == 1 and out.dim() == 0:
        return float(out)
    return out.numpy()


def weight_from_rpc_confidence(s_cls_bg, lam: float):
    """|1 - 2*s_bg|^lam: self-training weight from the classifier's bg score."""
    s = _checked(s_cls_bg, "s_cls_bg")
    return _maybe_item(torch.abs(1.0 - 2.0 * s) ** lam, s_cls_bg)


def weight_from_rpn_confidence(s_rpn_fg, lam: float):
    """|1 - 2*s_fg|^lam: entropy-term weight from the RPN foreground score."""
    s = _checked(s_rpn_fg, "s_rpn_fg")
    return _maybe_item(torch.abs(1.0 - 2.0 * s) ** lam, s_rpn_fg)


def entropy(class_probs):
    """Shannon entropy -sum p log p over the full class distribution.

    The distribution includes the background entry. p log p is 0 at p = 0;
    the log argument is clamped at 1e-7 for numerical safety, which leaves
    exact values at one-hot and uniform inputs untouched.
    """
    p = torch.as_tensor(class_probs) if not torch.is_tensor(class_probs) else class_probs
    vals = p.detach()
    if float(vals.min()) < -1e-12:
        raise ValueError("entropy: probabilities must be >= 0")
    # tolerance admits finite-difference probes of individual entries
    if abs(float(vals.sum()) - 1.0) > 1e-3:
        raise ValueError(f"entropy: probabilities must sum to 1, got {float(vals.sum())}")
    h = -(p * torch.log(p.clamp(min=PROB_EPS))).sum()
    return _maybe_item(h, class_probs)


def foreground_prob(class_probs):
    """Total foreground mass of a classifier distribution: 1 - p(background).

    Index 0 is the background entry; works on (K+1,) vectors or (N, K+1)
    batches, returning per-row scalars for the latter.
    """
    p = torch.as_tensor(class_probs) if not torch.is_tensor(class_probs) else class_probs
    fg = (1.0 - p[..., 0]).clamp(0.0, 1.0)
    return _maybe_item(fg, class_probs)


def discrepancy(s_cls_fg, s_rpn_fg):
    """|s_cls_fg - s_rpn_fg|: the heads' foreground/background disagreement."""
    a = _checked(s_cls_fg, "s_cls_fg")
    b = _checked(s_rpn_fg, "s_rpn_fg")
    return _maybe_item(torch.abs(a - b), s_cls_fg, s_rpn_fg)


def ambiguity_weight(s_cls_fg, s_rpn_fg, lam: float):
    """(2 min(a, 1-a, b, 1-b))^lam: large only when both heads are near 0.5."""
    a = _checked(s_cls_fg, "s_cls_fg")
    b = _checked(s_rpn_fg, "s_rpn_fg")
    m = torch.minimum(torch.minimum(a, 1.0 - a), torch.minimum(b, 1.0 - b))
    return _maybe_item((2.0 * m) ** lam, s_cls_fg, s_rpn_fg)


def discrepancy_loss(s_cls_fg: torch.Tensor, s_rpn_fg: torch.Tensor, lam: float) -> torch.Tensor:
    """Ambiguity-weighted mean discrepancy over ROIs; 0 for an empty list.

    Differentiable with respect to both heads' foreground scores (the weight
    included), so the same scalar serves the maximize and minimize sides of
    the minimax.
    """
    a = torch.as_tensor(s_cls_fg, dtype=torch.float64) if not torch.is_tensor(s_cls_fg) else s_cls_fg
    b = torch.as_tensor(s_rpn_fg, dtype=torch.float64) if not torch.is_tensor(s_rpn_fg) else s_rpn_fg
    if a.numel() != b.numel():
        raise ValueError(f"length mismatch: {a.numel()} classifier vs {b.numel()} rpn scores")
    if a.numel() == 0:
        return torch.zeros((), dtype=a.dtype if a.is_floating_point() else torch.float64)
    w = ambiguity_weight(a, b, lam)
    return (w * torch.abs(a - b)).mean()


def selftrain_entropy_loss(class_probs: torch.Tensor, rpn_fg_scores, lam: float) -> torch.Tensor:
    """Mean over ROIs of weight(s_rpn) * entropy(s_cls).

    The weights are treated as constants: `rpn_fg_scores` enters as plain
    numbers and no gradient flows into the RPN through this term.
    """
    scores = np.asarray(
        rpn_fg_scores.detach().numpy() if torch.is_tensor(rpn_fg_scores) else rpn_fg_scores,
        dtype=np.float64,
    ).reshape(-1)
    if class_probs.shape[0] != len(scores):
        raise ValueError(
            f"length mismatch: {class_probs.shape[0]} predictions vs {len(scores)} rpn scores"
        )
    if len(scores) == 0:
        return torch.zeros((), dtype=class_probs.dtype if torch.is_tensor(class_probs) else torch.float64)
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("rpn_fg_scores must lie in [0, 1]")
    p = class_probs
    w = torch.as_tensor(np.abs(1.0 - 2.0 * scores) ** lam, dtype=p.dtype)
    h = -(p * torch.log(p.clamp(min=PROB_EPS))).sum(dim=-1)
    return (w * h).mean()


# ---------------------------------------------------------------------------
# pseudo labels and RPN self-training


@dataclass
class PseudoLabel:
    """High-confidence target ROIs used as surrogate RPN supervision."""

    rois: np.ndarray  # (N, 4)
    is_foreground: np.ndarray  # (N,) bool
    source_confidence: np.ndarray  # (N,) confidence that admitted each entry

    def __post_init__(self):
        self.rois = boxes_to_array(self.rois)
        self.is_foreground = np.asarray(self.is_foreground, dtype=bool).reshape(-1)
        self.source_confidence = np.asarray(self.source_confidence, dtype=np.float64).reshape(-1)
        if not (len(self.rois) == len(self.is_foreground) == len(self.source_confidence)):
            raise ValueError("pseudo-label fields must have equal length")

    def __len__(self) -> int:
        return len(self.rois)


def build_pseudo_label(
    detections: list[Detection],
    bg_rois,
    bg_probs,
    threshold: float = 0.9,
) -> PseudoLabel:
    """Keep detections with score >= threshold as foreground entries and ROIs
    with background probability >= threshold as background entries; everything
    else is omitted (the RPN tolerates missing labels).
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    rois, fg, conf = [], [], []
    for det in detections:
        if det.score >= threshold:
            rois.append(det.box.as_array())
            fg.append(True)
            conf.append(det.score)
    bg_rois = boxes_to_array(bg_rois)
    bg_probs = np.asarray(bg_probs, dtype=np.float64).reshape(-1)
    for i in range(len(bg_rois)):
        if bg_probs[i] >= threshold:
            rois.append(bg_rois[i])
            fg.append(False)
            conf.append(float(bg_probs[i]))
    return PseudoLabel(
        rois=np.asarray(rois, dtype=np.float64).reshape(-1, 4),
        is_foreground=np.asarray(fg, dtype=bool),
        source_confidence=np.asarray(conf, dtype=np.float64),
    )


def selftrain_rpn_loss(
    rpn_out: RpnOutput,
    anchors: np.ndarray,
    pseudo: PseudoLabel,
    conf_weight: float = 1.0,
    rng: np.random.Generator | None = None,
    batch: int | None = 64,
    bg_assoc_iou: float = 0.7,
    neg_per_pos: int = 3,
    neg_floor: int = 8,
) -> torch.Tensor:
    """Partial-label RPN loss from a pseudo label, scaled by conf_weight.

    Foreground entries induce positive anchors through the standard
    0.7/argmax matching (with regression targets toward the pseudo box);
    background entries mark anchors overlapping them at IoU >= bg_assoc_iou
    as negatives. Every other anchor is ignored, so sparse pseudo labels
    never penalize unlabeled regions.

    Pseudo negatives vastly outnumber pseudo positives (a confident
    background call is far easier than a confident detection under domain
    shift), so when a sampler is supplied the negatives kept per step are
    capped at neg_per_pos per positive (at least neg_floor); otherwise
    self-training drifts into suppressing everything on the target domain.
    """
    dtype = rpn_out.logits.dtype
    if len(pseudo) == 0 or conf_weight == 0.0:
        return torch.zeros((), dtype=dtype)
    anchors = boxes_to_array(anchors)
    labels = np.full(len(anchors), -1, dtype=np.int8)
    targets = np.zeros((len(anchors), 4), dtype=np.float64)

    fg_boxes = pseudo.rois[pseudo.is_foreground]
    bg_boxes = pseudo.rois[~pseudo.is_foreground]
    if len(fg_boxes):
        fg_labels, matched = match_anchors(anchors, fg_boxes)
        pos = fg_labels == 1
        labels[pos] = 1
        targets[pos] = encode_deltas(anchors[pos], fg_boxes[matched[pos]])
    if len(bg_boxes):
        overlap = iou_matrix(anchors, bg_boxes).max(axis=1)
        labels[(overlap >= bg_assoc_iou) & (labels != 1)] = 0

    if batch is not None and rng is not None:
        n_pos = int((labels == 1).sum())
        neg_cap = max(neg_per_pos * n_pos, neg_floor)
        neg = np.nonzero(labels == 0)[0]
        if len(neg) > neg_cap:
            labels[rng.permutation(neg)[neg_cap:]] = -1
        labels = subsample_labels(labels, rng, batch=batch)
    return conf_weight * rpn_loss(rpn_out, labels, targets)


# ---------------------------------------------------------------------------
# adversarial alignment


def _check_adv_shapes(domain_map: torch.Tensor, fg_map: torch.Tensor):
    if domain_map.shape != fg_map.shape[:2]:
        raise ValueError(
            f"domain map {tuple(domain_map.shape)} does not match foreground map "
            f"{tuple(fg_map.shape)}"
        )


def adversarial_source_loss(domain_map: torch.Tensor, fg_map: torch.Tensor) -> torch.Tensor:
    """(1/HW) sum_wh D_wh^2 * sum_i (f_i)_wh over a source-image feature map."""
    _check_adv_shapes(domain_map, fg_map)
    return (domain_map**2 * fg_map.sum(dim=-1)).mean()


def adversarial_target_loss(domain_map: torch.Tensor, fg_map: torch.Tensor) -> torch.Tensor:
    """(1/HW) sum_wh (1 - D_wh)^2 * sum_i (f_i)_wh over a target-image map."""
    _check_adv_shapes(domain_map, fg_map)
    return ((1.0 - domain_map) ** 2 * fg_map.sum(dim=-1)).mean()


def adversarial_source_loss_unweighted(domain_map: torch.Tensor) -> torch.Tensor:
    """Naive local alignment: the source loss with the foreground weight removed."""
    return (domain_map**2).mean()


def adversarial_target_loss_unweighted(domain_map: torch.Tensor) -> torch.Tensor:
    return ((1.0 - domain_map) ** 2).mean()


def resize_foreground_map(fg_map: torch.Tensor, out_hw: tuple[int, int]) -> torch.Tensor:
    """Per-channel bilinear resize of an (H, W, 9) map; same-size is identity."""
    h, w, _ = fg_map.shape
    oh, ow = out_hw
    vals = fg_map.permute(2, 0, 1)  # (9, H, W)
    xs = (np.arange(ow, dtype=np.float64) + 0.5) * (w / ow)
    ys = (np.arange(oh, dtype=np.float64) + 0.5) * (h / oh)
    gx = torch.as_tensor(np.broadcast_to(xs[None, :], (oh, ow)).copy())
    gy = torch.as_tensor(np.broadcast_to(ys[:, None], (oh, ow)).copy())
    out = bilinear_sample(vals, gx, gy)  # (9, oh, ow)
    return out.permute(1, 2, 0)


# ---------------------------------------------------------------------------
# gradient reversal


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, mu):
        ctx.mu = mu
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.mu * grad_output, None


def grad_reverse(x: torch.Tensor, mu: float = 1.0) -> torch.Tensor:
    """Identity in the forward pass; backward multiplies the gradient by -mu."""
    return _GradReverse.apply(x, mu)


class GradientReversal(torch.nn.Module):
    def __init__(self, mu: float = 1.0):
        super().__init__()
        self.mu = mu

    def forward(self, x):
        return grad_reverse(x, self.mu)

"""Three-stage adaptation schedule and per-iteration optimization.

Stage 1 pre-trains the detector on labeled source images. Stage 2 adds
least-squares feature alignment: the discriminator separates domains while
the backbone, fed sign-flipped gradients through the reversal layer, mixes
them. Stage 3 runs the full game per iteration:

  (a) source step       backbone+heads minimize L_det + L_adv_src
  (b) target forward    proposals and pseudo labels from the current model
  (c) head step         heads minimize a*L_rpn_t + b*L_ent_t - g*L_disc
                        (maximizing the head discrepancy)
  (d) backbone step     backbone minimizes L_adv_tgt + a*L_rpn_t + b*L_ent_t
                        + g*L_disc on a fresh forward
  (e) discriminator     minimizes L_adv_src + L_adv_tgt on detached features

Stage 2 is exactly this iteration with the self-training and discrepancy
terms disabled, so a stage-3 run with alpha = beta = gamma = 0 continues a
stage-2 trajectory bitwise.

Target data enters only through an images-only loader; passing anything with
an annotation accessor raises. SGD with momentum, constant learning rate,
one image per domain per iteration. All randomness comes from per-stage
numpy generators seeded by (config seed, stage index), so a run resumed from
a stage checkpoint reproduces the uninterrupted run.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .boxes import iou_matrix
from .detector import (
    DomainDiscriminator,
    FeatureMap,
    ModelConfig,
    TwoStageDetector,
    _init_params,
    detections_from_predictions,
    encode_deltas,
    match_anchors,
    load_checkpoint,
    match_rois,
    rpc_loss,
    rpn_loss,
    sample_rois,
    save_checkpoint,
    select_proposals,
    subsample_labels,
)

ALIGN_MODES = ("none", "naive", "weighted")
STAGE_PRETRAIN, STAGE_ALIGN, STAGE_FULL = "pretrain", "align", "full"


class ProtocolError(RuntimeError):
    """A training code path tried to touch target annotations."""


class TrainingDiverged(RuntimeError):
    def __init__(self, record: "IterationRecord"):
        super().__init__(f"non-finite loss at iteration {record.iteration} ({record.stage}): "
                         f"{record.losses}")
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    # reference setting is beta=0.05, which assumes a well-calibrated
    # pretrained classifier; on this from-scratch desk model the
    # rpn-weighted entropy term collapses the classifier to background
    # before self-training can recalibrate it (see README), so it defaults
    # off and stays available through this knob
    beta: float = 0.0
    gamma: float = 0.1
    lambda_mcd: float = 2.0
    lambda_self: float = 5.0
    pseudo_threshold: float = 0.9
    # the reference schedule uses lr 1e-3 from an ImageNet-pretrained start;
    # training this model from scratch needs 2e-3 to converge in the same
    # iteration budget
    lr: float = 0.002
    momentum: float = 0.9
    iters_pretrain: int = 500
    iters_align: int = 1000
    iters_full: int = 600
    seed: int = 0
    grl_mu: float = 1.0
    align: str = "weighted"  # none | naive | weighted
    self_training: bool = True
    discrepancy: bool = True
    use_rpc_weight_in_selftrain: bool = False  # Eq-style weight instead of constant 1
    append_gt_rois: bool = True
    grad_clip: float = 10.0  # 0 disables clipping
    log_every: int = 50

    def validate(self):
        for name in ("alpha", "beta", "gamma", "lambda_mcd", "lambda_self", "lr", "grl_mu"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("iters_pretrain", "iters_align", "iters_full"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.align not in ALIGN_MODES:
            raise ValueError(f"align must be one of {ALIGN_MODES}")
        if not 0.0 < self.pseudo_threshold <= 1.0:
            raise ValueError("pseudo_threshold must be in (0, 1]")

    @property
    def needs_discriminator(self) -> bool:
        return self.align != "none"


@dataclass
class IterationRecord:
    iteration: int
    stage: str
    losses: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"iteration": self.iteration, "stage": self.stage, "losses": self.losses},
            sort_keys=True,
        )


def _require_images_only(target_data):
    if hasattr(target_data, "annotation") or hasattr(target_data, "example"):
        raise ProtocolError(
            "target data must be an images-only loader; got an object exposing annotations"
        )


def _zero_grads(*modules):
    for m in modules:
        if m is not None:
            for p in m.parameters():
                p.grad = None


def _clip_and_step(opt: torch.optim.Optimizer, params, clip: float):
    if clip > 0:
        torch.nn.utils.clip_grad_norm_(params, clip)
    opt.step()


def _finite(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


class Trainer:
    """Owns the model, discriminator, optimizers and the loss log."""

    def __init__(self, model: TwoStageDetector, cfg: TrainConfig,
                 discriminator: DomainDiscriminator | None = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.disc = discriminator
        if cfg.needs_discriminator and self.disc is None:
            self.disc = build_discriminator(model.cfg, seed=cfg.seed + 1)
        lr, mom = cfg.lr, cfg.momentum
        self.opt_backbone = torch.optim.SGD(model.backbone.parameters(), lr=lr, momentum=mom)
        self.opt_heads = torch.optim.SGD(model.head_parameters(), lr=lr, momentum=mom)
        self.opt_disc = (
            torch.optim.SGD(self.disc.parameters(), lr=lr, momentum=mom) if self.disc else None
        )
        self.records: list[IterationRecord] = []
        self.iteration = 0

    # -- shared pieces ----------------------------------------------------

    def detection_losses(self, image: np.ndarray, gt_boxes, gt_classes,
                         rng: np.random.Generator):
        """Supervised losses of both stages plus the forward artifacts."""
        m, mc = self.model, self.model.cfg
        feat = m.backbone_forward(image)
        rpn_out = m.rpn_forward(feat)
        labels, matched = match_anchors(m.anchors, gt_boxes, mc.rpn_pos_iou, mc.rpn_neg_iou)
        labels = subsample_labels(labels, rng, mc.rpn_batch, mc.rpn_pos_fraction)
        targets = np.zeros((len(m.anchors), 4))
        pos = labels == 1
        if pos.any():
            gt_arr = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
            targets[pos] = encode_deltas(m.anchors[pos], gt_arr[matched[pos]])
        loss_rpn = rpn_loss(rpn_out, labels, targets)

        props = select_proposals(rpn_out, m.anchors, mc.k_pre, mc.k_post_train,
                                 mc.rpn_nms_iou, mc.image_size)
        rois = props.boxes
        if self.cfg.append_gt_rois and len(gt_boxes):
            rois = np.concatenate([rois, np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)])
        roi_labels, roi_targets = match_rois(rois, gt_boxes, gt_classes, mc.roi_fg_iou)
        keep = sample_rois(roi_labels, rng, mc.roi_batch, mc.roi_fg_fraction)
        preds = m.rpc_forward(feat, rois[keep])
        loss_cls = rpc_loss(preds.logits, preds.deltas, roi_labels[keep], roi_targets[keep])
        return loss_rpn, loss_cls, feat, rpn_out

    def _pseudo_label(self, feat: FeatureMap, props) -> L.PseudoLabel:
        """Confident detections become foreground entries; proposals that are
        confidently background AND clear of even moderately-confident
        detections become background entries (ambiguous regions are left
        unlabeled — missing labels cost the RPN nothing)."""
        mc = self.model.cfg
        with torch.no_grad():
            preds = self.model.rpc_forward(feat, props.boxes)
            dets = detections_from_predictions(preds, mc, score_thresh=self.cfg.pseudo_threshold)
            bg_probs = preds.class_probs[:, 0].numpy() if len(preds) else np.zeros(0)
            mid_dets = detections_from_predictions(preds, mc, score_thresh=0.5)
        bg_boxes, bg_p = props.boxes, bg_probs
        if mid_dets and len(bg_boxes):
            det_arr = np.stack([d.box.as_array() for d in mid_dets])
            clear = iou_matrix(bg_boxes, det_arr).max(axis=1) < 0.3
            bg_boxes, bg_p = bg_boxes[clear], bg_p[clear]
        return L.build_pseudo_label(dets, bg_boxes, bg_p, self.cfg.pseudo_threshold)

    def _selftrain_conf_weight(self, pseudo: L.PseudoLabel) -> float:
        if not self.cfg.use_rpc_weight_in_selftrain or len(pseudo) == 0:
            return 1.0
        # per-entry bg score: 1 - confidence for foreground, confidence for background
        s_bg = np.where(pseudo.is_foreground, 1.0 - pseudo.source_confidence,
                        pseudo.source_confidence)
        return float(np.mean(np.abs(1.0 - 2.0 * s_bg) ** self.cfg.lambda_self))

    def _target_head_terms(self, feat_vals: torch.Tensor, props, pseudo, rng,
                           cst: bool, mcd: bool):
        """alpha/beta/gamma loss terms recomputed from given feature values."""
        cfg, m, mc = self.cfg, self.model, self.model.cfg
        feat = FeatureMap(values=feat_vals, stride=mc.stride)
        rpn_out = m.rpn_forward(feat)
        terms: dict[str, torch.Tensor] = {}
        if not (cst or mcd):
            return terms, rpn_out
        preds = m.rpc_forward(feat, props.boxes)
        s_rpn = rpn_out.objectness.reshape(-1)[torch.as_tensor(props.anchor_indices)]
        if cst:
            terms["loss_rpn_tgt"] = L.selftrain_rpn_loss(
                rpn_out, m.anchors, pseudo, self._selftrain_conf_weight(pseudo),
                rng=rng, batch=mc.rpn_batch,
            )
            terms["loss_ent_tgt"] = L.selftrain_entropy_loss(
                preds.class_probs, s_rpn.detach().numpy(), cfg.lambda_self
            )
        if mcd:
            s_cls_fg = L.foreground_prob(preds.class_probs)
            terms["loss_discrepancy"] = L.discrepancy_loss(s_cls_fg, s_rpn, cfg.lambda_mcd)
        return terms, rpn_out

    def _adv_loss(self, domain_map: torch.Tensor, fg_map: torch.Tensor, source: bool):
        if self.cfg.align == "weighted":
            fn = L.adversarial_source_loss if source else L.adversarial_target_loss
            return fn(domain_map, fg_map.detach())
        fn = (L.adversarial_source_loss_unweighted if source
              else L.adversarial_target_loss_unweighted)
        return fn(domain_map)

    # -- iterations --------------------------------------------------------

    def pretrain_iteration(self, source_ds, rng) -> IterationRecord:
        idx = int(rng.integers(len(source_ds)))
        boxes, cls = source_ds.annotation(idx)
        loss_rpn, loss_cls, _, _ = self.detection_losses(source_ds.image(idx), boxes, cls, rng)
        total = loss_rpn + loss_cls
        _zero_grads(self.model, self.disc)
        total.backward()
        _clip_and_step(self.opt_backbone, list(self.model.backbone.parameters()), self.cfg.grad_clip)
        _clip_and_step(self.opt_heads, self.model.head_parameters(), self.cfg.grad_clip)
        return self._record(STAGE_PRETRAIN, {
            "loss_rpn_src": _finite(loss_rpn), "loss_cls_src": _finite(loss_cls),
        })

    def adapt_iteration(self, source_ds, target_images, rng, *,
                        alpha: float, beta: float, gamma: float,
                        stage: str) -> IterationRecord:
        """One iteration of the (a)-(e) game described in the module docstring."""
        cfg, m, mc = self.cfg, self.model, self.model.cfg
        cst = cfg.self_training and (alpha > 0 or beta > 0)
        mcd = cfg.discrepancy and gamma > 0
        adv = cfg.needs_discriminator
        log: dict[str, float] = {}

        # (a) source step
        s_idx = int(rng.integers(len(source_ds)))
        boxes, cls = source_ds.annotation(s_idx)
        loss_rpn_s, loss_cls_s, feat_s, rpn_s = self.detection_losses(
            source_ds.image(s_idx), boxes, cls, rng)
        loss_a = loss_rpn_s + loss_cls_s
        if adv:
            d_s = self.disc(L.grad_reverse(feat_s.values, cfg.grl_mu))
            loss_adv_s = self._adv_loss(d_s, rpn_s.objectness, source=True)
            loss_a = loss_a + loss_adv_s
            log["loss_adv_src"] = _finite(loss_adv_s)
        _zero_grads(m, self.disc)
        loss_a.backward()
        _clip_and_step(self.opt_backbone, list(m.backbone.parameters()), cfg.grad_clip)
        _clip_and_step(self.opt_heads, m.head_parameters(), cfg.grad_clip)
        log["loss_rpn_src"] = _finite(loss_rpn_s)
        log["loss_cls_src"] = _finite(loss_cls_s)

        feat_t_vals = None
        if adv or cst or mcd:
            # (b) target forward: proposals and pseudo labels from current model
            t_idx = int(rng.integers(len(target_images)))
            image_t = m.image_to_tensor(target_images.image(t_idx))
            with torch.no_grad():
                feat_b = m.backbone_forward(image_t)
                rpn_b = m.rpn_forward(feat_b)
            props = select_proposals(rpn_b, m.anchors, mc.k_pre, mc.k_post_train,
                                     mc.rpn_nms_iou, mc.image_size)
            pseudo = self._pseudo_label(feat_b, props) if cst else L.build_pseudo_label(
                [], np.zeros((0, 4)), np.zeros(0), cfg.pseudo_threshold)
            if cst:
                log["pseudo_fg"] = float(pseudo.is_foreground.sum())
                log["pseudo_bg"] = float((~pseudo.is_foreground).sum())

            # (c) head step: maximize discrepancy, minimize self-training terms
            if cst or mcd:
                terms_c, _ = self._target_head_terms(feat_b.values, props, pseudo, rng,
                                                     cst=cst, mcd=mcd)
                loss_c = torch.zeros((), dtype=feat_b.values.dtype)
                if cst:
                    loss_c = loss_c + alpha * terms_c["loss_rpn_tgt"] \
                                    + beta * terms_c["loss_ent_tgt"]
                if mcd:
                    loss_c = loss_c - gamma * terms_c["loss_discrepancy"]
                if loss_c.requires_grad:
                    _zero_grads(m, self.disc)
                    loss_c.backward()
                    _clip_and_step(self.opt_heads, m.head_parameters(), cfg.grad_clip)

            # (d) backbone step: fresh forward, heads frozen
            feat_d = m.backbone_forward(image_t)
            feat_t_vals = feat_d.values
            terms_d, rpn_d = self._target_head_terms(feat_d.values, props, pseudo, rng,
                                                     cst=cst, mcd=mcd)
            loss_d = torch.zeros((), dtype=feat_d.values.dtype)
            if adv:
                d_t = self.disc(L.grad_reverse(feat_d.values, cfg.grl_mu))
                loss_adv_t = self._adv_loss(d_t, rpn_d.objectness, source=False)
                loss_d = loss_d + loss_adv_t
                log["loss_adv_tgt"] = _finite(loss_adv_t)
            if cst:
                loss_d = loss_d + alpha * terms_d["loss_rpn_tgt"] \
                                + beta * terms_d["loss_ent_tgt"]
                log["loss_rpn_tgt"] = _finite(terms_d["loss_rpn_tgt"])
                log["loss_ent_tgt"] = _finite(terms_d["loss_ent_tgt"])
            if mcd:
                loss_d = loss_d + gamma * terms_d["loss_discrepancy"]
                log["loss_discrepancy"] = _finite(terms_d["loss_discrepancy"])
            if loss_d.requires_grad:
                _zero_grads(m, self.disc)
                loss_d.backward()
                _clip_and_step(self.opt_backbone, list(m.backbone.parameters()), cfg.grad_clip)

            # (e) discriminator step on detached features of both domains
            if adv:
                d_s2 = self.disc(feat_s.values.detach())
                d_t2 = self.disc(feat_t_vals.detach())
                if cfg.align == "weighted":
                    loss_e = L.adversarial_source_loss(d_s2, rpn_s.objectness.detach()) + \
                             L.adversarial_target_loss(d_t2, rpn_d.objectness.detach())
                else:
                    loss_e = L.adversarial_source_loss_unweighted(d_s2) + \
                             L.adversarial_target_loss_unweighted(d_t2)
                _zero_grads(m, self.disc)
                loss_e.backward()
                _clip_and_step(self.opt_disc, list(self.disc.parameters()), cfg.grad_clip)
                log["loss_disc"] = _finite(loss_e)

        return self._record(stage, log)

    def _record(self, stage: str, log: dict[str, float]) -> IterationRecord:
        rec = IterationRecord(iteration=self.iteration, stage=stage, losses=log)
        self.iteration += 1
        self.records.append(rec)
        if any(not math.isfinite(v) for v in log.values()):
            raise TrainingDiverged(rec)
        return rec

    def optim_state(self) -> dict:
        return {
            "backbone": self.opt_backbone.state_dict(),
            "heads": self.opt_heads.state_dict(),
            "disc": self.opt_disc.state_dict() if self.opt_disc else None,
        }

    def restore(self, payload: dict):
        """Resume from a stage-boundary checkpoint (model, disc, optimizers)."""
        self.model.load_state_dict(payload["model"])
        if payload["discriminator"] is not None and self.disc is not None:
            self.disc.load_state_dict(payload["discriminator"])
        opt = payload.get("optim")
        if opt:
            self.opt_backbone.load_state_dict(opt["backbone"])
            self.opt_heads.load_state_dict(opt["heads"])
            if opt["disc"] is not None and self.opt_disc is not None:
                self.opt_disc.load_state_dict(opt["disc"])
        self.iteration = int(payload["iteration"])


def build_discriminator(model_cfg: ModelConfig, seed: int) -> DomainDiscriminator:
    disc = DomainDiscriminator(model_cfg.feat_channels)
    gen = torch.Generator().manual_seed(int(seed))
    _init_params(disc.conv1, gen)
    _init_params(disc.conv2, gen, final_std=0.01)
    return disc.to(model_cfg.torch_dtype)


def _stage_rng(seed: int, stage_index: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), int(stage_index), 0x7EA1))


def stage_pretrain(trainer: Trainer, source_ds, iters: int | None = None,
                   progress=None) -> list[IterationRecord]:
    """Supervised source-only warm start (loss of Eq-style L_rpn + L_cls)."""
    cfg = trainer.cfg
    rng = _stage_rng(cfg.seed, 0)
    out = []
    for _ in range(cfg.iters_pretrain if iters is None else iters):
        rec = trainer.pretrain_iteration(source_ds, rng)
        out.append(rec)
        if progress:
            progress(rec)
    return out


def stage_align(trainer: Trainer, source_ds, target_images,
                iters: int | None = None, progress=None) -> list[IterationRecord]:
    """Detection on source plus adversarial alignment on both domains."""
    _require_images_only(target_images)
    cfg = trainer.cfg
    rng = _stage_rng(cfg.seed, 1)
    out = []
    for _ in range(cfg.iters_align if iters is None else iters):
        rec = trainer.adapt_iteration(source_ds, target_images, rng,
                                      alpha=0.0, beta=0.0, gamma=0.0, stage=STAGE_ALIGN)
        out.append(rec)
        if progress:
            progress(rec)
    return out


def stage_full(trainer: Trainer, source_ds, target_images,
               iters: int | None = None, progress=None) -> list[IterationRecord]:
    """All loss terms: self-training, discrepancy minimax, and alignment."""
    _require_images_only(target_images)
    cfg = trainer.cfg
    rng = _stage_rng(cfg.seed, 2)
    out = []
    for _ in range(cfg.iters_full if iters is None else iters):
        rec = trainer.adapt_iteration(source_ds, target_images, rng,
                                      alpha=cfg.alpha, beta=cfg.beta, gamma=cfg.gamma,
                                      stage=STAGE_FULL)
        out.append(rec)
        if progress:
            progress(rec)
    return out


STAGE_CHECKPOINTS = ((STAGE_PRETRAIN, "pretrain.pt"), (STAGE_ALIGN, "align.pt"),
                     (STAGE_FULL, "final.pt"))


def run_pipeline(
    source_ds,
    target_images,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir=None,
    fingerprint: str = "",
    data_fingerprint: str = "",
    progress=None,
    resume: bool = False,
) -> tuple[TwoStageDetector, DomainDiscriminator | None, list[IterationRecord]]:
    """Run the three stages in order, checkpointing at each boundary.

    Writes pretrain.pt / align.pt / final.pt and loss_log.jsonl under out_dir
    when given; fully deterministic in the configs. With resume=True, an
    interrupted run restarts after the last stage whose checkpoint exists
    (with matching fingerprint) and — because each stage draws from its own
    (seed, stage) random stream and optimizer state is checkpointed —
    reproduces the uninterrupted trajectory exactly.
    """
    cfg.validate()
    model = TwoStageDetector(model_cfg, seed=cfg.seed)
    trainer = Trainer(model, cfg)
    out_path = Path(out_dir) if out_dir is not None else None

    start = 0
    if resume and out_path is not None:
        for k in range(len(STAGE_CHECKPOINTS) - 1, -1, -1):
            p = out_path / STAGE_CHECKPOINTS[k][1]
            if p.exists():
                payload = load_checkpoint(p, expected_fingerprint=fingerprint or None)
                trainer.restore(payload)
                start = k + 1
                break

    stage_fns = (
        lambda: stage_pretrain(trainer, source_ds, progress=progress),
        lambda: stage_align(trainer, source_ds, target_images, progress=progress),
        lambda: stage_full(trainer, source_ds, target_images, progress=progress),
    )
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "loss_log.jsonl", "a" if start else "w")
    try:
        for k in range(start, len(STAGE_CHECKPOINTS)):
            records = stage_fns[k]()
            if log_fh is not None:
                for rec in records:
                    log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
            if out_path is not None:
                save_checkpoint(out_path / STAGE_CHECKPOINTS[k][1], model, trainer.disc,
                                fingerprint, data_fingerprint, trainer.iteration,
                                STAGE_CHECKPOINTS[k][0], optim_state=trainer.optim_state())
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, trainer.disc, trainer.records


def discriminator_accuracy(model: TwoStageDetector, disc: DomainDiscriminator,
                           source_ds, target_images, n: int = 16) -> float:
    """Image-level domain accuracy of the discriminator on held-out images.

    A source image counts as correct when its mean map is < 0.5, a target
    image when it is > 0.5 (the least-squares objective drives source toward
    0 and target toward 1).
    """
    correct = total = 0
    with torch.no_grad():
        for i in range(min(n, len(source_ds))):
            d = disc(model.backbone_forward(source_ds.image(i)).values)
            correct += int(float(d.mean()) < 0.5)
            total += 1
        for i in range(min(n, len(target_images))):
            d = disc(model.backbone_forward(target_images.image(i)).values)
            correct += int(float(d.mean()) > 0.5)
            total += 1
    return correct / max(total, 1)

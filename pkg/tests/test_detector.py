import math

import numpy as np
import pytest
import torch

from adaptdet.boxes import Box, iou
from adaptdet.detector import (
    ANCHORS_PER_CELL,
    FeatureMap,
    FingerprintMismatch,
    ModelConfig,
    RpnOutput,
    TwoStageDetector,
    anchor_grid,
    config_fingerprint,
    load_checkpoint,
    match_anchors,
    match_rois,
    model_from_checkpoint,
    roi_align,
    rpc_loss,
    rpn_loss,
    save_checkpoint,
    select_proposals,
    subsample_labels,
)
from adaptdet.scenes import generate_scene

from .test_boxes import brute_force_nms, random_boxes


def make_rpn_output(objectness, deltas=None):
    """RpnOutput with exactly the given foreground probabilities."""
    obj = torch.as_tensor(np.asarray(objectness, dtype=np.float64))
    logits = torch.stack([torch.zeros_like(obj), torch.log(obj / (1 - obj))], dim=-1)
    if deltas is None:
        deltas = torch.zeros(obj.shape + (4,), dtype=torch.float64)
    else:
        deltas = torch.as_tensor(np.asarray(deltas, dtype=np.float64))
    return RpnOutput(logits=logits, objectness=obj, deltas=deltas)


class TestShapesAndDeterminism:
    def test_feature_map_shape(self, small_model):
        img = np.zeros((64, 64, 3))
        feat = small_model.backbone_forward(img)
        assert tuple(feat.values.shape) == (64, 8, 8)
        assert feat.stride == 8

    def test_backbone_shape_128(self):
        model = TwoStageDetector(ModelConfig(image_size=128), seed=0)
        feat = model.backbone_forward(np.zeros((128, 128, 3)))
        assert tuple(feat.values.shape) == (64, 16, 16)

    def test_size_mismatch_rejected(self, small_model):
        with pytest.raises(Exception):
            small_model.backbone_forward(np.zeros((65, 65, 3)))

    def test_identical_inputs_identical_features(self, small_model, small_scene_cfg):
        img = generate_scene(0, small_scene_cfg).pixels
        f1 = small_model.backbone_forward(img).values
        f2 = small_model.backbone_forward(img).values
        assert torch.equal(f1, f2)

    def test_zeroed_final_layer_gives_zero_features(self, small_model_cfg):
        model = TwoStageDetector(small_model_cfg, seed=1)
        with torch.no_grad():
            model.backbone.conv4.weight.zero_()
            model.backbone.conv4.bias.zero_()
        feat = model.backbone_forward(np.zeros((64, 64, 3)))
        assert float(feat.values.abs().max()) == 0.0

    def test_backbone_parameter_budget(self, small_model):
        assert sum(p.numel() for p in small_model.backbone.parameters()) <= 200_000

    def test_gradient_reaches_all_backbone_parameters(self, small_model, small_scene_cfg):
        img = generate_scene(1, small_scene_cfg).pixels
        feat = small_model.backbone_forward(img)
        feat.values.sum().backward()
        for name, p in small_model.backbone.named_parameters():
            assert p.grad is not None and float(p.grad.abs().sum()) > 0, name


class TestAnchorsAndRpn:
    def test_anchor_count(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        g = small_model_cfg.grid_size
        assert anchors.shape == (g * g * ANCHORS_PER_CELL, 4)

    def test_anchors_centered_on_cells(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg).reshape(8, 8, 9, 4)
        centers_x = (anchors[..., 0] + anchors[..., 2]) / 2
        expected = (np.arange(8) + 0.5) * small_model_cfg.stride
        np.testing.assert_allclose(centers_x[0, :, 0], expected)

    def test_rpn_output_shape_and_range(self, small_model):
        feat = small_model.backbone_forward(np.random.default_rng(0).uniform(size=(64, 64, 3)))
        out = small_model.rpn_forward(feat)
        assert tuple(out.objectness.shape) == (8, 8, 9)
        assert float(out.objectness.min()) >= 0.0 and float(out.objectness.max()) <= 1.0

    def test_uniform_logits_give_half(self, small_model):
        feat = small_model.backbone_forward(np.zeros((64, 64, 3)))
        with torch.no_grad():
            small_model.rpn.cls.weight.zero_()
            small_model.rpn.cls.bias.zero_()
        out = small_model.rpn_forward(feat)
        np.testing.assert_allclose(out.objectness.detach().numpy(), 0.5, atol=1e-12)

    def test_objectness_locality(self, small_model, small_scene_cfg):
        # the RPN head is a 3x3 conv stack: poking one feature cell may only
        # move objectness within a 1-cell neighborhood
        img = generate_scene(2, small_scene_cfg).pixels
        feat = small_model.backbone_forward(img)
        base = small_model.rpn_forward(feat).objectness.detach().numpy()
        poked = feat.values.detach().clone()
        poked[:, 4, 4] += 1.0
        out = small_model.rpn_forward(FeatureMap(values=poked, stride=8)).objectness
        diff = np.abs(out.detach().numpy() - base).max(axis=-1)
        changed = np.argwhere(diff > 1e-12)
        assert len(changed) > 0
        assert (np.abs(changed - 4) <= 1).all()


class TestMatchAnchors:
    @staticmethod
    def oracle(anchors, gt, pos_iou=0.7, neg_iou=0.3):
        a = len(anchors)
        labels = np.full(a, -1, dtype=np.int8)
        matched = np.full(a, -1, dtype=np.int64)
        if len(gt) == 0:
            return np.zeros(a, dtype=np.int8), matched
        ious = np.array([[iou(x, g) for g in gt] for x in anchors])
        for i in range(a):
            best = int(np.argmax(ious[i]))
            if ious[i, best] < neg_iou:
                labels[i] = 0
            if ious[i, best] >= pos_iou:
                labels[i] = 1
            matched[i] = best
        for g in range(len(gt)):
            i_star = int(np.argmax(ious[:, g]))
            if ious[i_star, g] > 0:
                labels[i_star] = 1
        matched[labels != 1] = -1
        return labels, matched

    def test_empty_gt_all_negative(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        labels, matched = match_anchors(anchors, [])
        assert (labels == 0).all()
        assert (matched == -1).all()

    def test_exact_anchor_is_positive(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        labels, matched = match_anchors(anchors, anchors[100:101])
        assert labels[100] == 1 and matched[100] == 0

    def test_four_anchor_toy_matches_oracle(self):
        anchors = np.array(
            [[0, 0, 10, 10], [10, 0, 20, 10], [0, 10, 10, 20], [10, 10, 20, 20]], dtype=float
        )
        gt = np.array([[2, 2, 12, 12]], dtype=float)
        labels, matched = match_anchors(anchors, gt)
        exp_labels, exp_matched = self.oracle(anchors, gt)
        np.testing.assert_array_equal(labels, exp_labels)
        np.testing.assert_array_equal(matched, exp_matched)
        # the argmax anchor is forced positive even below the 0.7 threshold
        assert labels[0] == 1 and (labels[1:] == 0).all()

    @pytest.mark.parametrize("seed", range(4))
    def test_random_matches_oracle(self, seed):
        rng = np.random.default_rng(seed)
        anchors = random_boxes(rng, 60, size=80.0)
        gt = random_boxes(rng, 4, size=80.0)
        labels, matched = match_anchors(anchors, gt)
        exp_labels, exp_matched = self.oracle(anchors, gt)
        np.testing.assert_array_equal(labels, exp_labels)
        np.testing.assert_array_equal(matched, exp_matched)

    def test_subsample_caps(self):
        rng = np.random.default_rng(0)
        labels = np.concatenate([np.ones(50, dtype=np.int8), np.zeros(500, dtype=np.int8)])
        sampled = subsample_labels(labels, rng, batch=64, pos_fraction=0.5)
        assert (sampled == 1).sum() == 32
        assert (sampled == 0).sum() == 32
        # subsampling only moves labels to ignore, never flips them
        assert ((sampled == -1) | (sampled == labels)).all()


class TestRpnLoss:
    def test_two_anchor_hand_value(self):
        out = make_rpn_output([0.9, 0.1])
        labels = np.array([1, 0], dtype=np.int8)
        loss = rpn_loss(out, labels, np.zeros((2, 4)))
        assert float(loss) == pytest.approx(-(math.log(0.9) + math.log(0.9)) / 2, abs=1e-9)

    def test_all_ignore_zero(self):
        out = make_rpn_output([0.7, 0.2])
        loss = rpn_loss(out, np.array([-1, -1], dtype=np.int8), None)
        assert float(loss) == 0.0

    def test_saturated_predictions_vanish(self):
        out = make_rpn_output([1 - 1e-12, 1e-12])
        loss = rpn_loss(out, np.array([1, 0], dtype=np.int8), np.zeros((2, 4)))
        assert float(loss) < 1e-9

    def test_regression_term_added_for_positives(self):
        out = make_rpn_output([0.5, 0.5], deltas=[[1.0, 0, 0, 0], [1.0, 0, 0, 0]])
        base = rpn_loss(out, np.array([1, -1], dtype=np.int8), np.zeros((2, 4)))
        # smooth-L1 of 1.0 is 0.5 added on top of the CE term
        ce_only = rpn_loss(make_rpn_output([0.5, 0.5]), np.array([1, -1], dtype=np.int8),
                           np.zeros((2, 4)))
        assert float(base) == pytest.approx(float(ce_only) + 0.5, abs=1e-9)


class TestSelectProposals:
    def test_single_dominant_anchor_first(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        scores = np.full(len(anchors), 0.1)
        scores[42] = 0.95
        out = make_rpn_output(scores.reshape(8, 8, 9))
        props = select_proposals(out, anchors, k_pre=100, k_post=10, nms_iou=0.7, image_size=64)
        assert props.anchor_indices[0] == 42
        np.testing.assert_allclose(props.boxes[0], np.clip(anchors[42], 0, 64), atol=1e-9)

    def test_duplicate_box_suppressed(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        scores = np.full(len(anchors), 1e-4)
        scores[100] = 0.9
        scores[101] = 0.8
        deltas = np.zeros((len(anchors), 4))
        # make anchor 101 decode exactly onto anchor 100's box
        from adaptdet.boxes import encode_deltas

        deltas[101] = encode_deltas(anchors[101:102], anchors[100:101])[0]
        out = make_rpn_output(scores.reshape(8, 8, 9), deltas.reshape(8, 8, 9, 4))
        props = select_proposals(out, anchors, 50, 50, nms_iou=0.5, image_size=64)
        assert 100 in props.anchor_indices and 101 not in props.anchor_indices

    def test_five_box_case_matches_nms_oracle(self, small_model_cfg):
        rng = np.random.default_rng(1)
        anchors = anchor_grid(small_model_cfg)
        scores = rng.uniform(0.01, 0.99, len(anchors))
        out = make_rpn_output(scores.reshape(8, 8, 9))
        props = select_proposals(out, anchors, k_pre=5, k_post=5, nms_iou=0.5, image_size=64)
        top5 = np.argsort(-scores, kind="stable")[:5]
        boxes = np.clip(anchors[top5], 0, 64)
        keep = brute_force_nms(boxes, scores[top5], 0.5)
        np.testing.assert_array_equal(props.anchor_indices, top5[keep])

    def test_k_validation(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        out = make_rpn_output(np.full((8, 8, 9), 0.5))
        with pytest.raises(ValueError):
            select_proposals(out, anchors, k_pre=5, k_post=10, nms_iou=0.5, image_size=64)

    def test_scores_are_source_anchor_objectness(self, small_model_cfg):
        anchors = anchor_grid(small_model_cfg)
        rng = np.random.default_rng(2)
        scores = rng.uniform(0.01, 0.99, len(anchors))
        out = make_rpn_output(scores.reshape(8, 8, 9))
        props = select_proposals(out, anchors, 20, 10, 0.7, 64)
        np.testing.assert_allclose(props.scores, scores[props.anchor_indices], atol=1e-12)


class TestRoiAlign:
    def test_constant_map_constant_output(self):
        feat = FeatureMap(values=torch.full((3, 8, 8), 2.5, dtype=torch.float64), stride=8)
        out = roi_align(feat, np.array([[5.0, 5.0, 40.0, 50.0]]), out_size=4)
        np.testing.assert_allclose(out.detach().numpy(), 2.5, atol=1e-12)

    def test_whole_map_identity(self):
        rng = np.random.default_rng(0)
        vals = torch.as_tensor(rng.uniform(size=(2, 8, 8)))
        feat = FeatureMap(values=vals, stride=8)
        out = roi_align(feat, np.array([[0.0, 0.0, 64.0, 64.0]]), out_size=8)
        np.testing.assert_allclose(out[0].detach().numpy(), vals.numpy(), atol=1e-12)

    def test_hand_bilinear_2x2(self):
        # cell (r, c) sits at (c+.5, r+.5); one sample per bin at bin center
        vals = torch.as_tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        feat = FeatureMap(values=vals, stride=1)
        out = roi_align(feat, np.array([[0.5, 0.5, 1.5, 1.5]]), out_size=1)
        assert float(out[0, 0, 0, 0]) == pytest.approx(2.5, abs=1e-12)
        out2 = roi_align(feat, np.array([[0.5, 0.5, 1.5, 1.5]]), out_size=2)
        expected = np.array([[1.75, 2.25], [2.75, 3.25]])
        np.testing.assert_allclose(out2[0, 0].detach().numpy(), expected, atol=1e-12)

    def test_linear_in_features(self):
        rng = np.random.default_rng(3)
        vals = torch.as_tensor(rng.uniform(size=(4, 8, 8)))
        feat_a = FeatureMap(values=vals, stride=8)
        feat_b = FeatureMap(values=3.0 * vals, stride=8)
        rois = random_boxes(rng, 5, size=60.0)
        out_a = roi_align(feat_a, rois, 4)
        out_b = roi_align(feat_b, rois, 4)
        np.testing.assert_allclose(out_b.detach().numpy(), 3.0 * out_a.detach().numpy(),
                                   atol=1e-12)

    def test_differentiable_wrt_features(self):
        vals = torch.as_tensor(np.random.default_rng(4).uniform(size=(2, 8, 8)),
                               dtype=torch.float64).requires_grad_(True)
        feat = FeatureMap(values=vals, stride=8)
        out = roi_align(feat, np.array([[8.0, 8.0, 40.0, 40.0]]), 4)
        out.sum().backward()
        assert vals.grad is not None and float(vals.grad.abs().sum()) > 0

    def test_degenerate_roi_warns_and_zeroes(self):
        feat = FeatureMap(values=torch.ones(1, 8, 8, dtype=torch.float64), stride=8)
        with pytest.warns(UserWarning):
            out = roi_align(feat, np.array([[1.0, 1.0, 1.5, 1.5], [0.0, 0.0, 32.0, 32.0]]), 2)
        assert float(out[0].abs().max()) == 0.0
        assert float(out[1].abs().max()) > 0.0


class TestRpcHeadAndLoss:
    def test_probs_sum_to_one(self, small_model, small_scene_cfg):
        img = generate_scene(3, small_scene_cfg).pixels
        feat = small_model.backbone_forward(img)
        preds = small_model.rpc_forward(feat, np.array([[4.0, 4.0, 30.0, 30.0]]))
        s = float(preds.class_probs.sum())
        assert s == pytest.approx(1.0, abs=1e-6)

    def test_uniform_logits_uniform_probs(self, small_model):
        feat = small_model.backbone_forward(np.zeros((64, 64, 3)))
        with torch.no_grad():
            small_model.roi_head.cls.weight.zero_()
            small_model.roi_head.cls.bias.zero_()
        preds = small_model.rpc_forward(feat, np.array([[0.0, 0.0, 30.0, 30.0]]))
        k = small_model.cfg.num_fg_classes + 1
        np.testing.assert_allclose(preds.class_probs.detach().numpy(), 1.0 / k, atol=1e-12)

    def test_identical_rois_identical_predictions(self, small_model, small_scene_cfg):
        img = generate_scene(4, small_scene_cfg).pixels
        feat = small_model.backbone_forward(img)
        rois = np.array([[2.0, 2.0, 40.0, 40.0], [2.0, 2.0, 40.0, 40.0]])
        preds = small_model.rpc_forward(feat, rois)
        assert torch.equal(preds.class_probs[0], preds.class_probs[1])

    def test_empty_rois_empty_predictions(self, small_model):
        feat = small_model.backbone_forward(np.zeros((64, 64, 3)))
        preds = small_model.rpc_forward(feat, np.zeros((0, 4)))
        assert len(preds) == 0

    def test_background_hand_value(self):
        # single bg ROI predicted background with p=0.8 -> -ln 0.8, no reg term
        p = np.array([0.8, 0.1, 0.1])
        logits = torch.log(torch.as_tensor(p, dtype=torch.float64)).unsqueeze(0)
        loss = rpc_loss(logits, torch.zeros(1, 4, dtype=torch.float64),
                        np.array([0]), np.zeros((1, 4)))
        assert float(loss) == pytest.approx(-math.log(0.8), abs=1e-9)

    def test_correct_confident_rois_vanish(self):
        logits = torch.full((3, 4), -40.0, dtype=torch.float64)
        labels = np.array([1, 2, 0])
        for i, c in enumerate(labels):
            logits[i, c] = 40.0
        loss = rpc_loss(logits, torch.zeros(3, 4, dtype=torch.float64), labels, np.zeros((3, 4)))
        assert float(loss) < 1e-9

    def test_iou_exactly_half_is_foreground(self):
        rois = np.array([[0.0, 0.0, 10.0, 5.0]])  # IoU with gt is exactly 0.5
        gt = np.array([[0.0, 0.0, 10.0, 10.0]])
        labels, targets = match_rois(rois, gt, np.array([2]), fg_iou=0.5)
        assert labels[0] == 3  # class 2 -> rpc label 3


class TestDetect:
    def test_untrained_uniform_has_no_confident_detections(self, small_model, small_scene_cfg):
        img = generate_scene(5, small_scene_cfg).pixels
        dets = small_model.detect(img, score_thresh=0.5)
        assert len(dets) <= 1

    def test_empty_proposals_empty_detections(self, small_model):
        from adaptdet.detector import RoiPredictions, detections_from_predictions

        preds = RoiPredictions(np.zeros((0, 4)),
                               torch.zeros(0, 4, dtype=torch.float64),
                               torch.zeros(0, 4, dtype=torch.float64))
        assert detections_from_predictions(preds, small_model.cfg, 0.5) == []

    def test_detections_sorted_and_valid(self, small_model, small_scene_cfg):
        img = generate_scene(6, small_scene_cfg).pixels
        dets = small_model.detect(img, score_thresh=0.0)
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert d.class_id >= 1
            assert 0.0 <= d.score <= 1.0


class TestCheckpoints:
    def test_roundtrip(self, tmp_path, small_model):
        fp = config_fingerprint({"a": 1})
        save_checkpoint(tmp_path / "m.pt", small_model, None, fp, "datafp", 42, "pretrain")
        payload = load_checkpoint(tmp_path / "m.pt", expected_fingerprint=fp)
        model, disc = model_from_checkpoint(payload)
        assert payload["iteration"] == 42
        assert disc is None
        for (k1, v1), (k2, v2) in zip(model.state_dict().items(),
                                      small_model.state_dict().items()):
            assert k1 == k2 and torch.equal(v1, v2)

    def test_fingerprint_mismatch_rejected(self, tmp_path, small_model):
        save_checkpoint(tmp_path / "m.pt", small_model, None, "fp-a", "d", 0, "pretrain")
        with pytest.raises(FingerprintMismatch):
            load_checkpoint(tmp_path / "m.pt", expected_fingerprint="fp-b")

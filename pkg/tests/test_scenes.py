import json

import numpy as np
import pytest

from adaptdet.scenes import (
    ConfigurationError,
    DetectionDataset,
    ImageOnlyDataset,
    LabeledImage,
    SceneConfig,
    ShiftParams,
    apply_shift,
    emit_dataset,
    generate_scene,
    read_manifest,
)


class TestGenerateScene:
    def test_deterministic(self, scene_cfg):
        a = generate_scene(7, scene_cfg)
        b = generate_scene(7, scene_cfg)
        assert np.array_equal(a.pixels, b.pixels)
        assert np.array_equal(a.boxes, b.boxes)
        assert np.array_equal(a.class_ids, b.class_ids)

    def test_seed_sensitivity(self, scene_cfg):
        a = generate_scene(7, scene_cfg)
        b = generate_scene(8, scene_cfg)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_exact_object_count(self):
        cfg = SceneConfig(objects_per_image=(3, 3))
        img = generate_scene(11, cfg)
        assert img.boxes.shape == (3, 4)
        assert len(img.class_ids) == 3

    def test_boxes_valid_and_nondegenerate(self, scene_cfg):
        for seed in range(20):
            img = generate_scene(seed, scene_cfg)
            w = img.boxes[:, 2] - img.boxes[:, 0]
            h = img.boxes[:, 3] - img.boxes[:, 1]
            assert (w > 0).all() and (h > 0).all()
            assert (w * h >= 16.0).all()
            assert (img.boxes[:, [0, 1]] >= 0).all()
            assert (img.boxes[:, [2, 3]] <= scene_cfg.image_size).all()
            assert ((img.class_ids >= 0) & (img.class_ids < scene_cfg.num_fg_classes)).all()

    def test_boxes_tight_around_shapes(self, scene_cfg):
        # the drawn object must touch all four edges of its box: shrinking
        # the box by one pixel on any side must cut off object pixels
        img = generate_scene(3, scene_cfg)
        bg = generate_scene(3, SceneConfig(objects_per_image=(1, 1), background_texture_seed=999))
        for box in img.boxes:
            x1, y1, x2, y2 = (int(round(v)) for v in box)
            assert x2 > x1 + 1 and y2 > y1 + 1

    def test_pixels_in_unit_range(self, scene_cfg):
        img = generate_scene(5, scene_cfg)
        assert img.pixels.min() >= 0.0 and img.pixels.max() <= 1.0

    def test_invalid_config_rejected(self):
        with pytest.raises(ConfigurationError):
            generate_scene(0, SceneConfig(num_fg_classes=0))
        with pytest.raises(ConfigurationError):
            generate_scene(0, SceneConfig(image_size=100))  # not divisible by 8
        with pytest.raises(ConfigurationError):
            generate_scene(-1, SceneConfig())


class TestApplyShift:
    def test_identity_is_byte_identical(self, scene_cfg):
        img = generate_scene(1, scene_cfg)
        out = apply_shift(img, ShiftParams(), seed=0)
        assert np.array_equal(out.pixels, img.pixels)

    def test_full_white_blend(self, scene_cfg):
        img = generate_scene(1, scene_cfg)
        params = ShiftParams(additive_haze_alpha=1.0, haze_color=(1.0, 1.0, 1.0))
        out = apply_shift(img, params, seed=0)
        assert np.array_equal(out.pixels, np.ones_like(img.pixels))

    def test_half_blend_hand_value(self):
        # (1-a)*0.2 + a*1.0 with a=0.5 -> 0.6 per channel
        img = LabeledImage(
            pixels=np.full((8, 8, 3), 0.2), boxes=np.zeros((0, 4)), class_ids=np.zeros(0)
        )
        out = apply_shift(img, ShiftParams(additive_haze_alpha=0.5, haze_color=(1, 1, 1)), seed=0)
        np.testing.assert_allclose(out.pixels, 0.6, atol=1e-12)

    def test_labels_preserved(self, scene_cfg):
        from adaptdet.experiment import default_shift

        img = generate_scene(2, scene_cfg)
        out = apply_shift(img, default_shift(), seed=5)
        assert np.array_equal(out.boxes, img.boxes)
        assert np.array_equal(out.class_ids, img.class_ids)

    def test_haze_monotonicity(self, scene_cfg):
        img = generate_scene(4, scene_cfg)
        diffs = []
        for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
            out = apply_shift(
                img, ShiftParams(additive_haze_alpha=alpha, haze_color=(1, 1, 1)), seed=0
            )
            diffs.append(np.abs(out.pixels - img.pixels).mean())
        assert all(b >= a for a, b in zip(diffs, diffs[1:]))

    def test_output_clamped(self, scene_cfg):
        img = generate_scene(6, scene_cfg)
        params = ShiftParams(noise_sigma=0.5)
        out = apply_shift(img, params, seed=9)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigurationError):
            ShiftParams(additive_haze_alpha=1.5).validate()
        with pytest.raises(ConfigurationError):
            ShiftParams(noise_sigma=-1).validate()


class TestEmitDataset:
    def test_manifest_and_layout(self, tmp_path, scene_cfg):
        man = emit_dataset(tmp_path / "d", 10, scene_cfg, ShiftParams(), base_seed=0)
        assert man.n_images == 10 and len(man.entries) == 10
        for i in range(10):
            assert (tmp_path / "d" / "images" / f"{i:06d}.png").exists()
            assert (tmp_path / "d" / "annotations" / f"{i:06d}.json").exists()
        loaded = read_manifest(tmp_path / "d")
        assert loaded["version"] == 1
        assert len(loaded["entries"]) == 10

    def test_rerun_byte_identical(self, tmp_path, scene_cfg):
        m1 = emit_dataset(tmp_path / "d", 4, scene_cfg, ShiftParams(), base_seed=3)
        blob1 = (tmp_path / "d" / "manifest.json").read_bytes()
        img1 = (tmp_path / "d" / "images" / "000002.png").read_bytes()
        m2 = emit_dataset(tmp_path / "d", 4, scene_cfg, ShiftParams(), base_seed=3)
        assert m1.digest() == m2.digest()
        assert (tmp_path / "d" / "manifest.json").read_bytes() == blob1
        assert (tmp_path / "d" / "images" / "000002.png").read_bytes() == img1

    def test_eval_only_flag_recorded(self, tmp_path, scene_cfg):
        emit_dataset(tmp_path / "t", 3, scene_cfg, ShiftParams(), base_seed=0,
                     split="target_train", annotations_eval_only=True)
        man = read_manifest(tmp_path / "t")
        assert man["annotations_eval_only"] is True
        # annotations exist on disk even for eval-only splits
        assert (tmp_path / "t" / "annotations" / "000000.json").exists()

    def test_loaders(self, tmp_path, scene_cfg):
        emit_dataset(tmp_path / "d", 3, scene_cfg, ShiftParams(), base_seed=1)
        labeled = DetectionDataset(tmp_path / "d")
        imgs = ImageOnlyDataset(tmp_path / "d")
        assert len(labeled) == len(imgs) == 3
        assert labeled.image(0).shape == (128, 128, 3)
        boxes, cls = labeled.annotation(0)
        assert boxes.shape[1] == 4 and len(boxes) == len(cls)
        # loaded pixels match emitted pixels up to 8-bit quantization
        scene = generate_scene(1, scene_cfg)
        assert np.abs(labeled.image(0) - scene.pixels).max() <= 0.5 / 255 + 1e-12

    def test_image_only_loader_has_no_annotation_access(self, tmp_path, scene_cfg):
        emit_dataset(tmp_path / "d", 2, scene_cfg, ShiftParams(), base_seed=1)
        imgs = ImageOnlyDataset(tmp_path / "d")
        assert not hasattr(imgs, "annotation")
        assert not hasattr(imgs, "example")
        assert imgs.image(1).shape == (128, 128, 3)

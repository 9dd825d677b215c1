"""Experiment specification: datasets, variants, fingerprints, orchestration.

One declarative spec object drives everything — dataset generation, variant
training and evaluation — so a run is reproducible from its fingerprint.
The method-variant matrix mirrors the standard ablation arms: source-only,
naive / weighted local alignment, self-training, discrepancy, and their
combinations, plus an oracle arm trained on labeled target data that only
the evaluation side may touch.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .detector import ModelConfig, TwoStageDetector, config_fingerprint
from .evaluation import AblationResult, MetricsReport, evaluate_model, run_ablation
from .scenes import (
    DetectionDataset,
    ImageOnlyDataset,
    SceneConfig,
    ShiftParams,
    emit_dataset,
)
from .training import TrainConfig, run_pipeline

SOURCE_TRAIN, TARGET_TRAIN, TARGET_EVAL = "source_train", "target_train", "target_eval"

# method-variant matrix: align mode, self-training, discrepancy
VARIANTS: dict[str, dict] = {
    "source_only": {"align": "none", "self_training": False, "discrepancy": False},
    "naive_alignment": {"align": "naive", "self_training": False, "discrepancy": False},
    "weighted_alignment": {"align": "weighted", "self_training": False, "discrepancy": False},
    "self_training": {"align": "none", "self_training": True, "discrepancy": False},
    "discrepancy": {"align": "none", "self_training": False, "discrepancy": True},
    "weighted_self_training": {"align": "weighted", "self_training": True, "discrepancy": False},
    "full": {"align": "weighted", "self_training": True, "discrepancy": True},
}
TABLE_VARIANTS = list(VARIANTS)
# the oracle trains on labeled target data; it is an evaluation reference,
# never a method row
ORACLE = "oracle"
COVERAGE_PLOT_ARMS = ("source_only", "naive_alignment", "self_training", ORACLE)


def default_shift() -> ShiftParams:
    """Default target-domain shift, calibrated so the source-only model drops
    well over 10 mAP points below the oracle while adaptation can still
    bootstrap from confident detections (see README)."""
    s = 0.8
    eye = np.eye(3)
    mix = np.array([[0.55, 0.25, 0.10], [0.15, 0.60, 0.15], [0.10, 0.25, 0.55]])
    return ShiftParams(
        color_matrix=(1 - s) * eye + s * mix,
        additive_haze_alpha=0.55 * s,
        haze_color=(0.82, 0.86, 0.92),
        noise_sigma=0.03 * s,
        blur_radius=0.8 * s,
    )


@dataclass(frozen=True)
class ExperimentSpec:
    scene: SceneConfig = field(default_factory=SceneConfig)
    shift: ShiftParams = field(default_factory=default_shift)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_source: int = 120
    n_target_train: int = 120
    n_target_eval: int = 96
    seed_source: int = 1000
    seed_target_train: int = 20000
    seed_target_eval: int = 30000
    variant: str = "full"
    seeds: tuple[int, ...] = (0, 1, 2)
    data_dir: str = "data/synthetic"
    out_dir: str = "runs/default"

    def validate(self):
        self.scene.validate()
        self.shift.validate()
        self.train.validate()
        if self.variant not in VARIANTS and self.variant != ORACLE:
            raise ValueError(f"unknown variant {self.variant!r}; known: {list(VARIANTS)}")
        if self.model.image_size != self.scene.image_size:
            raise ValueError("model.image_size must equal scene.image_size")
        if self.model.num_fg_classes != self.scene.num_fg_classes:
            raise ValueError("model.num_fg_classes must equal scene.num_fg_classes")
        if self.scene.total_stride != self.model.stride:
            raise ValueError("scene.total_stride must equal model.stride")

    # -- fingerprints -------------------------------------------------------

    def data_payload(self) -> dict:
        return {
            "scene": dataclasses.asdict(self.scene),
            "shift": self.shift.to_dict(),
            "n": [self.n_source, self.n_target_train, self.n_target_eval],
            "seeds": [self.seed_source, self.seed_target_train, self.seed_target_eval],
        }

    def data_fingerprint(self) -> str:
        return config_fingerprint(self.data_payload())

    def fingerprint(self, variant: str | None = None, seed: int | None = None) -> str:
        variant = variant or self.variant
        return config_fingerprint(
            self.data_payload(),
            self.model.fingerprint_payload(),
            dataclasses.asdict(self.train_for(variant,
                                              self.train.seed if seed is None else seed)),
            {"variant": variant},
        )

    def train_for(self, variant: str, seed: int) -> TrainConfig:
        flags = VARIANTS.get(variant, VARIANTS["source_only"])
        return replace(self.train, seed=seed, **flags)

    # -- dataset paths ------------------------------------------------------

    def split_dir(self, split: str) -> Path:
        return Path(self.data_dir) / split

    def datasets_ready(self) -> bool:
        from .scenes import MANIFEST_NAME

        return all(
            (self.split_dir(s) / MANIFEST_NAME).exists()
            for s in (SOURCE_TRAIN, TARGET_TRAIN, TARGET_EVAL)
        )


# ---------------------------------------------------------------------------
# spec loading: defaults <- YAML file <- dotted key=value overrides


def _to_nested_dict(spec: ExperimentSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["shift"] = spec.shift.to_dict()
    return d


def _coerce_like(current, value):
    if isinstance(current, tuple):
        return tuple(value)
    if isinstance(current, bool):
        return bool(value)
    if isinstance(current, int) and not isinstance(value, bool) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def _spec_from_nested(d: dict) -> ExperimentSpec:
    scene = SceneConfig(**{**d["scene"], "objects_per_image": tuple(d["scene"]["objects_per_image"]),
                           "shape_catalog": tuple(d["scene"]["shape_catalog"])})
    shift = ShiftParams.from_dict(d["shift"])
    model = ModelConfig(**{**d["model"],
                           "anchor_scales": tuple(d["model"]["anchor_scales"]),
                           "anchor_ratios": tuple(d["model"]["anchor_ratios"])})
    train = TrainConfig(**d["train"])
    rest = {k: v for k, v in d.items() if k not in ("scene", "shift", "model", "train")}
    rest["seeds"] = tuple(rest.get("seeds", (0, 1, 2)))
    return ExperimentSpec(scene=scene, shift=shift, model=model, train=train, **rest)


def load_spec(config_path=None, overrides: list[str] | None = None) -> ExperimentSpec:
    """Build a spec: package defaults, then a YAML file, then key=value sets.

    Override keys are dotted paths into the nested structure, e.g.
    ``train.lr=0.01`` or ``shift.additive_haze_alpha=0.4``; values are parsed
    as YAML scalars and coerced to the default's type.
    """
    nested = _to_nested_dict(ExperimentSpec())
    if config_path is not None:
        loaded = yaml.safe_load(Path(config_path).read_text())
        if loaded:
            _deep_update(nested, loaded)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        node = nested
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node:
                raise KeyError(f"unknown config section {p!r} in override {item!r}")
            node = node[p]
        leaf = parts[-1]
        if leaf not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[leaf] = _coerce_like(node[leaf], value)
    spec = _spec_from_nested(nested)
    spec.validate()
    return spec


def _deep_update(base: dict, extra: dict):
    for k, v in extra.items():
        if k not in base:
            raise KeyError(f"unknown config key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            _deep_update(base[k], v)
        else:
            base[k] = _coerce_like(base[k], v)


def save_spec(spec: ExperimentSpec, path):
    Path(path).write_text(yaml.safe_dump(_to_nested_dict(spec), sort_keys=True))


# ---------------------------------------------------------------------------
# orchestration


def generate_datasets(spec: ExperimentSpec) -> dict[str, str]:
    """Emit source-train (clean), target-train and target-eval (shifted)."""
    spec.validate()
    identity = ShiftParams()
    digests = {}
    man = emit_dataset(spec.split_dir(SOURCE_TRAIN), spec.n_source, spec.scene, identity,
                       spec.seed_source, split=SOURCE_TRAIN)
    digests[SOURCE_TRAIN] = man.digest()
    man = emit_dataset(spec.split_dir(TARGET_TRAIN), spec.n_target_train, spec.scene,
                       spec.shift, spec.seed_target_train, split=TARGET_TRAIN,
                       annotations_eval_only=True)
    digests[TARGET_TRAIN] = man.digest()
    man = emit_dataset(spec.split_dir(TARGET_EVAL), spec.n_target_eval, spec.scene,
                       spec.shift, spec.seed_target_eval, split=TARGET_EVAL,
                       annotations_eval_only=True)
    digests[TARGET_EVAL] = man.digest()
    (Path(spec.data_dir) / "fingerprint.json").write_text(
        json.dumps({"data_fingerprint": spec.data_fingerprint(), "manifests": digests},
                   sort_keys=True, indent=1))
    return digests


def train_variant(spec: ExperimentSpec, variant: str, seed: int, out_dir=None,
                  progress=None, resume: bool = False):
    """Train one variant/seed; returns (model, discriminator, records).

    The oracle arm swaps the labeled target-train split in as the supervised
    dataset (an evaluation-side privilege); every other arm reads target
    images through the images-only loader.
    """
    train_cfg = spec.train_for(variant, seed)
    if variant == ORACLE:
        source = DetectionDataset(spec.split_dir(TARGET_TRAIN))
    else:
        source = DetectionDataset(spec.split_dir(SOURCE_TRAIN))
    target_images = ImageOnlyDataset(spec.split_dir(TARGET_TRAIN))
    return run_pipeline(
        source, target_images, spec.model, train_cfg, out_dir=out_dir,
        fingerprint=spec.fingerprint(variant, seed),
        data_fingerprint=spec.data_fingerprint(),
        progress=progress, resume=resume,
    )


def evaluate_on_target(spec: ExperimentSpec, model: TwoStageDetector,
                       seed: int = 0) -> MetricsReport:
    eval_ds = DetectionDataset(spec.split_dir(TARGET_EVAL))
    return evaluate_model(model, eval_ds, config_fingerprint=spec.data_fingerprint(),
                          seed=seed)


def ablation(spec: ExperimentSpec, variants: list[str] | None = None,
             seeds: list[int] | None = None, out_dir=None,
             progress=None) -> AblationResult:
    """Train + evaluate the variant matrix over shared seeds."""
    variants = list(VARIANTS) if variants is None else variants
    seeds = list(spec.seeds) if seeds is None else list(seeds)

    def arm(variant: str, seed: int) -> MetricsReport:
        run_dir = None if out_dir is None else Path(out_dir) / f"{variant}_seed{seed}"
        model, _, _ = train_variant(spec, variant, seed, out_dir=run_dir, progress=progress)
        return evaluate_on_target(spec, model, seed=seed)

    return run_ablation(arm, variants, seeds)


def coverage_plot_data(result: AblationResult, arms=COVERAGE_PLOT_ARMS) -> dict:
    """Seed-averaged coverage histograms for the standard four arms."""
    series = {}
    for arm in arms:
        row = result.row(arm)
        if row.error or not row.reports:
            series[arm] = None
            continue
        counts = np.mean([r.coverage.counts for r in row.reports], axis=0)
        series[arm] = {
            "bin_edges": row.reports[0].coverage.bin_edges,
            "mean_counts": [float(c) for c in counts],
            "zero_fraction": float(np.mean([r.coverage.zero_fraction for r in row.reports])),
        }
    return {"series": series}

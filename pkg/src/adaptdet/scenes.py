"""Synthetic paired-domain detection benchmark.

Scenes are flat-shaded shapes (disc / square / triangle) on a smooth textured
background; the class of an object is its shape kind. A parametric shift
(color transform -> haze blend -> Gaussian blur -> additive noise) turns the
clean "source" domain into a degraded "target" domain with labels untouched,
so adaptation claims can be tested without real datasets.

Everything here is a pure function of (seed, config, params). Datasets are
written as images/NNNNNN.png + annotations/NNNNNN.json + manifest.json, and
re-emitting with identical arguments is byte-identical.

The unsupervised protocol is enforced mechanically by the loader types:
`ImageOnlyDataset` exposes no annotation accessor at all, and the trainer only
accepts that type for target data. Target annotations exist on disk (flagged
eval-only in the manifest) but only `DetectionDataset` — used by evaluation —
reads them.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .boxes import boxes_to_array

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"

SHAPE_KINDS = ("disc", "square", "triangle")


class ConfigurationError(ValueError):
    """Raised for invalid scene/shift configurations."""


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    objects_per_image: tuple[int, int] = (2, 4)
    shape_catalog: tuple[str, ...] = SHAPE_KINDS
    num_fg_classes: int = 3
    background_texture_seed: int = 0
    min_half_size: int = 8
    max_half_size: int = 16
    total_stride: int = 8  # backbone stride the image size must divide by

    def validate(self):
        if self.num_fg_classes < 1:
            raise ConfigurationError("num_fg_classes must be >= 1")
        if self.image_size % self.total_stride != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by stride {self.total_stride}"
            )
        lo, hi = self.objects_per_image
        if not (0 < lo <= hi):
            raise ConfigurationError(f"bad objects_per_image range {self.objects_per_image}")
        if not self.shape_catalog or any(k not in SHAPE_KINDS for k in self.shape_catalog):
            raise ConfigurationError(f"unknown shape kinds in {self.shape_catalog}")
        if not (2 <= self.min_half_size <= self.max_half_size):
            raise ConfigurationError("half-size range must satisfy 2 <= min <= max")
        if 2 * self.max_half_size + 4 >= self.image_size:
            raise ConfigurationError("max object size does not fit in the image")


def _identity_matrix():
    return np.eye(3, dtype=np.float64)


@dataclass(frozen=True)
class ShiftParams:
    """Parametric domain shift; identity settings leave the image untouched."""

    color_matrix: np.ndarray = field(default_factory=_identity_matrix)
    additive_haze_alpha: float = 0.0
    haze_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    noise_sigma: float = 0.0
    blur_radius: float = 0.0

    def validate(self):
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ConfigurationError("color_matrix must be a finite 3x3 matrix")
        if not 0.0 <= self.additive_haze_alpha <= 1.0:
            raise ConfigurationError("additive_haze_alpha must be in [0, 1]")
        if any(not 0.0 <= c <= 1.0 for c in self.haze_color):
            raise ConfigurationError("haze_color components must be in [0, 1]")
        if self.noise_sigma < 0 or self.blur_radius < 0:
            raise ConfigurationError("noise_sigma and blur_radius must be >= 0")

    def is_identity(self) -> bool:
        return (
            np.array_equal(np.asarray(self.color_matrix), np.eye(3))
            and self.additive_haze_alpha == 0.0
            and self.noise_sigma == 0.0
            and self.blur_radius == 0.0
        )

    def to_dict(self) -> dict:
        return {
            "color_matrix": np.asarray(self.color_matrix, dtype=np.float64).tolist(),
            "additive_haze_alpha": self.additive_haze_alpha,
            "haze_color": list(self.haze_color),
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
        }

    @staticmethod
    def from_dict(d: dict) -> "ShiftParams":
        return ShiftParams(
            color_matrix=np.asarray(d["color_matrix"], dtype=np.float64),
            additive_haze_alpha=float(d["additive_haze_alpha"]),
            haze_color=tuple(float(c) for c in d["haze_color"]),
            noise_sigma=float(d["noise_sigma"]),
            blur_radius=float(d["blur_radius"]),
        )


@dataclass
class LabeledImage:
    """Float image in [0,1] with its ground-truth boxes and class ids."""

    pixels: np.ndarray  # (H, W, 3) float64 in [0, 1]
    boxes: np.ndarray  # (N, 4) float64, (x1, y1, x2, y2)
    class_ids: np.ndarray  # (N,) int64 in [0, num_fg_classes)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        self.boxes = boxes_to_array(self.boxes)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if len(self.boxes) != len(self.class_ids):
            raise ValueError("boxes and class_ids must have equal length")


def _pixel_grid(size: int):
    # pixel-center coordinates: pixel (r, c) is sampled at (c + 0.5, r + 0.5)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    return xs, ys


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth bilinear color gradient plus a faint sinusoidal texture."""
    corners = rng.uniform(0.25, 0.65, size=(2, 2, 3))
    t = np.linspace(0.0, 1.0, size)
    top = corners[0, 0] * (1 - t)[:, None] + corners[0, 1] * t[:, None]
    bot = corners[1, 0] * (1 - t)[:, None] + corners[1, 1] * t[:, None]
    img = top[None, :, :] * (1 - t)[:, None, None] + bot[None, :, :] * t[:, None, None]
    xs, ys = _pixel_grid(size)
    fx, fy = rng.uniform(0.5, 2.0, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    ripple = 0.02 * np.sin(2 * np.pi * (fx * xs + fy * ys) / size + phase)
    return np.clip(img + ripple[..., None], 0.0, 1.0)


def _shape_mask(kind: str, cx: float, cy: float, half: float, size: int) -> np.ndarray:
    xs, ys = _pixel_grid(size)
    if kind == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half**2
    if kind == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= half
    if kind == "triangle":
        # upward triangle: apex (cx, cy-half), base y = cy+half from cx-half to cx+half
        inside_y = (ys >= cy - half) & (ys <= cy + half)
        # half-width grows linearly from 0 at the apex to `half` at the base
        hw = (ys - (cy - half)) / 2.0
        return inside_y & (np.abs(xs - cx) <= hw)
    raise ConfigurationError(f"unknown shape kind {kind!r}")


def _object_color(rng: np.random.Generator) -> np.ndarray:
    # saturated hue so objects contrast with the muted background
    h = rng.uniform(0.0, 6.0)
    c, x = 0.75, 0.75 * (1 - abs(h % 2 - 1))
    rgb = {0: (c, x, 0), 1: (x, c, 0), 2: (0, c, x), 3: (0, x, c), 4: (x, 0, c), 5: (c, 0, x)}[
        int(h) % 6
    ]
    return np.asarray(rgb, dtype=np.float64) + 0.2


def generate_scene(seed: int, config: SceneConfig) -> LabeledImage:
    """Deterministically render one labeled scene.

    Each object's box tightly encloses its drawn mask; every box has
    area >= 16 px^2 by construction (min half-size 2 -> 4x4 extents at worst,
    defaults are far larger).
    """
    if seed < 0:
        raise ConfigurationError("seed must be >= 0")
    config.validate()
    rng = np.random.default_rng((int(seed), int(config.background_texture_seed), 0xA11CE))
    size = config.image_size
    img = _background(size, rng)

    n_objects = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    boxes, class_ids, placed = [], [], []
    for _ in range(n_objects):
        kind_idx = int(rng.integers(len(config.shape_catalog)))
        kind = config.shape_catalog[kind_idx]
        half = float(rng.uniform(config.min_half_size, config.max_half_size))
        # rejection-sample centers to keep overlap low; accept the last try
        for _attempt in range(40):
            cx = float(rng.uniform(half + 2, size - half - 2))
            cy = float(rng.uniform(half + 2, size - half - 2))
            cand = np.array([cx - half, cy - half, cx + half, cy + half])
            if all(_pair_iou(cand, p) < 0.2 for p in placed):
                break
        mask = _shape_mask(kind, cx, cy, half, size)
        if not mask.any():  # cannot happen at legal sizes, guard anyway
            continue
        color = _object_color(rng)
        img[mask] = color
        rs, cs = np.nonzero(mask)
        boxes.append([cs.min(), rs.min(), cs.max() + 1.0, rs.max() + 1.0])
        class_ids.append(kind_idx % config.num_fg_classes)
        placed.append(np.asarray(boxes[-1], dtype=np.float64))

    return LabeledImage(
        pixels=np.clip(img, 0.0, 1.0),
        boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        class_ids=np.asarray(class_ids, dtype=np.int64),
    )


def _pair_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0:
        return 0.0
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def apply_shift(img: LabeledImage, params: ShiftParams, seed: int) -> LabeledImage:
    """Apply the domain shift to pixels; boxes and class ids are untouched.

    Order: color matrix, haze blend pixel' = (1-a)*pixel + a*haze, Gaussian
    blur, additive Gaussian noise, clamp to [0, 1].
    """
    params.validate()
    px = img.pixels
    if params.is_identity():
        out = px.copy()
    else:
        out = px @ np.asarray(params.color_matrix, dtype=np.float64).T
        a = params.additive_haze_alpha
        if a > 0.0:
            out = (1.0 - a) * out + a * np.asarray(params.haze_color, dtype=np.float64)
        if params.blur_radius > 0.0:
            out = np.stack(
                [gaussian_filter(out[..., c], sigma=params.blur_radius, mode="nearest")
                 for c in range(3)],
                axis=-1,
            )
        if params.noise_sigma > 0.0:
            rng = np.random.default_rng((int(seed), 0x5F1F7))
            out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
        out = np.clip(out, 0.0, 1.0)
    return LabeledImage(pixels=out, boxes=img.boxes.copy(), class_ids=img.class_ids.copy())


# ---------------------------------------------------------------------------
# dataset emission and loading


@dataclass(frozen=True)
class DatasetManifest:
    version: int
    split: str
    annotations_eval_only: bool
    n_images: int
    base_seed: int
    config: SceneConfig
    shift: ShiftParams
    entries: tuple[dict, ...]

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "split": self.split,
            "annotations_eval_only": self.annotations_eval_only,
            "n_images": self.n_images,
            "base_seed": self.base_seed,
            "config": dataclasses.asdict(self.config),
            "shift_params": self.shift.to_dict(),
            "entries": list(self.entries),
        }

    def digest(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()


def _pixels_to_png(px: np.ndarray, path: Path):
    arr = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _png_to_pixels(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def emit_dataset(
    dir_path,
    n_images: int,
    config: SceneConfig,
    params: ShiftParams,
    base_seed: int,
    split: str = "train",
    annotations_eval_only: bool = False,
) -> DatasetManifest:
    """Write one dataset split to `dir_path`; byte-identical when re-run.

    Scene i uses seed base_seed + i and the per-image noise stream is derived
    from the same seed, so the whole split is a pure function of the
    arguments. Annotations are written for every image even when flagged
    eval-only; the flag governs which loader may read them.
    """
    config.validate()
    params.validate()
    root = Path(dir_path)
    img_dir = root / "images"
    ann_dir = root / "annotations"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
        ann_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {root}: {e}") from e

    entries = []
    for i in range(n_images):
        seed = base_seed + i
        scene = generate_scene(seed, config)
        scene = apply_shift(scene, params, seed=seed)
        name = f"{i:06d}"
        _pixels_to_png(scene.pixels, img_dir / f"{name}.png")
        ann = {
            "boxes": scene.boxes.tolist(),
            "class_ids": scene.class_ids.tolist(),
        }
        (ann_dir / f"{name}.json").write_text(json.dumps(ann, sort_keys=True, indent=1))
        entries.append(
            {
                "image": f"images/{name}.png",
                "annotation": f"annotations/{name}.json",
                "scene_seed": seed,
                "split": split,
            }
        )

    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        split=split,
        annotations_eval_only=annotations_eval_only,
        n_images=n_images,
        base_seed=base_seed,
        config=config,
        shift=params,
        entries=tuple(entries),
    )
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_dict(), sort_keys=True, indent=1))
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


class ImageOnlyDataset:
    """Images-only view of a dataset split.

    This is the only target-domain handle the trainer accepts: it has no
    method or attribute that can reach annotation files.
    """

    def __init__(self, root):
        self._root = Path(root)
        man = read_manifest(root)
        self._images = [self._root / e["image"] for e in man["entries"]]
        self.split = man["split"]
        self.image_size = int(man["config"]["image_size"])

    def __len__(self) -> int:
        return len(self._images)

    def image(self, i: int) -> np.ndarray:
        return _png_to_pixels(self._images[i])


class DetectionDataset:
    """Labeled view of a dataset split: images plus annotations."""

    def __init__(self, root):
        self._root = Path(root)
        man = read_manifest(root)
        self.manifest = man
        self._entries = man["entries"]
        self.split = man["split"]
        self.annotations_eval_only = bool(man["annotations_eval_only"])
        self.image_size = int(man["config"]["image_size"])
        self.num_fg_classes = int(man["config"]["num_fg_classes"])

    def __len__(self) -> int:
        return len(self._entries)

    def image(self, i: int) -> np.ndarray:
        return _png_to_pixels(self._root / self._entries[i]["image"])

    def annotation(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return read_annotation(self._root / self._entries[i]["annotation"])

    def example(self, i: int) -> LabeledImage:
        boxes, cls = self.annotation(i)
        return LabeledImage(pixels=self.image(i), boxes=boxes, class_ids=cls)


def read_annotation(path) -> tuple[np.ndarray, np.ndarray]:
    """Read one annotation file -> (boxes (N,4), class_ids (N,))."""
    d = json.loads(Path(path).read_text())
    boxes = np.asarray(d["boxes"], dtype=np.float64).reshape(-1, 4)
    cls = np.asarray(d["class_ids"], dtype=np.int64)
    return boxes, cls

"""Synthetic labeled detection scenes: geometric objects on textured backgrounds.

Three object classes (square, disc, triangle) are rasterized onto noisy
backgrounds.  Clear images form the source domain; the dataset builder
corrupts copies of independently sampled scenes into the adverse-weather
target domain.  Box coordinates are continuous with the half-open pixel
convention [x_min, x_max) x [y_min, y_max), used consistently by IoU, AP
and NMS.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image

from . import seeding
from .corruption import (
    CorruptionRecord,
    StyleConfig,
    WeatherConfig,
    corrupt,
    sample_style_params,
    sample_weather_params,
)

CLASS_NAMES = ("square", "disc", "triangle")
SOURCE_CLEAR = "source_clear"
TARGET_ADVERSE = "target_adverse"
SPLITS = ("source_train", "target_train", "source_test", "target_test")
# target_train labels exist in the manifest for analysis but are never
# exposed through the training data API.
SPLIT_LABELED = {
    "source_train": True,
    "target_train": False,
    "source_test": True,
    "target_test": True,
}
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """A generator configuration cannot produce valid scenes."""


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int

    def validate(self, image_size: tuple[int, int] | None = None) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")
        if image_size is not None:
            h, w = image_size
            if self.x_min < 0 or self.y_min < 0 or self.x_max > w or self.y_max > h:
                raise ValueError(f"box {self} exceeds image bounds {image_size}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def to_dict(self) -> dict:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
            "class_id": int(self.class_id),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(d["x_min"], d["y_min"], d["x_max"], d["y_max"], int(d["class_id"]))


@dataclass(frozen=True)
class SceneObject:
    class_id: int
    center: tuple[float, float]  # (x, y) pixels
    size: tuple[float, float]  # (w, h) pixels
    orientation: float  # radians
    shade: float  # fill value in [0,1]


@dataclass
class SceneSpec:
    objects: list[SceneObject]
    background_shade: float
    background_noise: float
    image_size: tuple[int, int]  # (H, W)
    noise_seed: int = 0


@dataclass
class LabeledImage:
    """Pixels plus ground truth; `boxes` is None when labels are withheld."""

    pixels: np.ndarray  # (3, H, W) float in [0,1]
    boxes: list[BoundingBox] | None
    domain: str
    corruption: CorruptionRecord | None = None
    image_id: str = ""

    @property
    def image_size(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]


@dataclass
class GenConfig:
    image_size: int = 64
    num_classes: int = 3
    min_objects: int = 1
    max_objects: int = 4
    # Sizes >= 16 px keep every box's central assignment region (half the
    # box) at least one stride wide, so no object lacks a positive cell.
    size_range: tuple[float, float] = (16.0, 26.0)
    shade_range: tuple[float, float] = (0.55, 0.95)
    background_shade_range: tuple[float, float] = (0.15, 0.4)
    background_noise: float = 0.03
    margin: float = 1.0

    def validate(self) -> None:
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must be in [1,{len(CLASS_NAMES)}]")
        if self.min_objects < 0 or self.max_objects < self.min_objects:
            raise ConfigError("need 0 <= min_objects <= max_objects")
        lo, hi = self.size_range
        if lo < 6:
            raise ConfigError("size_range minimum must be >= 6 px so shapes have interior pixels")
        # Worst-case rotated extent is the diagonal.
        if hi * 1.4143 + 2 * self.margin >= self.image_size:
            raise ConfigError(
                f"max object size {hi} cannot fit rotated inside a {self.image_size}px image"
            )


def _extent_half(obj: SceneObject) -> tuple[float, float]:
    """Half-width/half-height of the rotated shape's axis-aligned extent."""
    w, h = obj.size
    if CLASS_NAMES[obj.class_id] == "disc":
        r = w / 2
        return r, r
    c, s = abs(np.cos(obj.orientation)), abs(np.sin(obj.orientation))
    if CLASS_NAMES[obj.class_id] == "square":
        return (w * c + h * s) / 2, (w * s + h * c) / 2
    verts = _triangle_vertices(w, h)
    rot = np.array(
        [
            [np.cos(obj.orientation), -np.sin(obj.orientation)],
            [np.sin(obj.orientation), np.cos(obj.orientation)],
        ]
    )
    pts = verts @ rot.T
    return float(np.abs(pts[:, 0]).max()), float(np.abs(pts[:, 1]).max())


def _triangle_vertices(w: float, h: float) -> np.ndarray:
    # Isoceles triangle pointing up; vertex order gives positive edge crosses
    # for interior points in image coordinates (y down).
    return np.array([[0.0, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])


def sample_scene(seed: int, cfg: GenConfig) -> SceneSpec:
    """Sample a valid scene spec; deterministic per seed."""
    cfg.validate()
    rng = seeding.rng_from(seed)
    size = cfg.image_size
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    placed_boxes: list[tuple[float, float, float, float]] = []
    for _ in range(n):
        for _attempt in range(40):
            class_id = int(rng.integers(0, cfg.num_classes))
            w = float(rng.uniform(*cfg.size_range))
            h = w if CLASS_NAMES[class_id] == "disc" else float(rng.uniform(*cfg.size_range))
            orientation = float(rng.uniform(0.0, 2 * np.pi))
            shade = float(rng.uniform(*cfg.shade_range))
            obj = SceneObject(class_id, (0.0, 0.0), (w, h), orientation, shade)
            ex, ey = _extent_half(obj)
            lo_x, hi_x = ex + cfg.margin, size - ex - cfg.margin
            lo_y, hi_y = ey + cfg.margin, size - ey - cfg.margin
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            cx = float(rng.uniform(lo_x, hi_x))
            cy = float(rng.uniform(lo_y, hi_y))
            extent = (cx - ex, cy - ey, cx + ex, cy + ey)
            if any(_overlap_frac(extent, other) > 0.15 for other in placed_boxes):
                continue
            objects.append(SceneObject(class_id, (cx, cy), (w, h), orientation, shade))
            placed_boxes.append(extent)
            break
    return SceneSpec(
        objects=objects,
        background_shade=float(rng.uniform(*cfg.background_shade_range)),
        background_noise=cfg.background_noise,
        image_size=(size, size),
        noise_seed=seeding.derive_seed(seed, seeding.SCENE),
    )


def _overlap_frac(a: tuple, b: tuple) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / smaller


def object_mask(obj: SceneObject, image_size: tuple[int, int]) -> np.ndarray:
    """Boolean (H, W) mask of pixels whose centers fall inside the shape."""
    h, w = image_size
    ys, xs = np.mgrid[0:h, 0:w]
    px = xs + 0.5 - obj.center[0]
    py = ys + 0.5 - obj.center[1]
    c, s = np.cos(obj.orientation), np.sin(obj.orientation)
    # Rotate pixel offsets into the object frame.
    u = c * px + s * py
    v = -s * px + c * py
    ow, oh = obj.size
    name = CLASS_NAMES[obj.class_id]
    if name == "square":
        return (np.abs(u) <= ow / 2) & (np.abs(v) <= oh / 2)
    if name == "disc":
        return px * px + py * py <= (ow / 2) ** 2
    verts = _triangle_vertices(ow, oh)
    inside = np.ones((h, w), dtype=bool)
    for i in range(3):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % 3]
        cross = (bx - ax) * (v - ay) - (by - ay) * (u - ax)
        inside &= cross >= 0
    return inside


def render(spec: SceneSpec) -> LabeledImage:
    """Rasterize a scene; one tight box per object, derived from its pixel mask."""
    h, w = spec.image_size
    rng = seeding.rng_from(spec.noise_seed)
    base = spec.background_shade + rng.uniform(-spec.background_noise, spec.background_noise, size=(h, w))
    img = np.clip(base, 0.0, 1.0)[None, :, :].repeat(3, axis=0)
    boxes: list[BoundingBox] = []
    for obj in spec.objects:
        mask = object_mask(obj, (h, w))
        if not mask.any():
            raise ConfigError(f"object {obj} covers no pixels")
        img[:, mask] = obj.shade
        rows = np.flatnonzero(mask.any(axis=1))
        cols = np.flatnonzero(mask.any(axis=0))
        boxes.append(
            BoundingBox(
                x_min=float(cols[0]),
                y_min=float(rows[0]),
                x_max=float(cols[-1] + 1),
                y_max=float(rows[-1] + 1),
                class_id=obj.class_id,
            )
        )
    return LabeledImage(pixels=img, boxes=boxes, domain=SOURCE_CLEAR, corruption=None)


# --- dataset builds ----------------------------------------------------------


@dataclass
class CorruptionConfig:
    """How target-domain images are corrupted."""

    style: StyleConfig = field(default_factory=StyleConfig)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    # both | style_only | weather_only; ablation variants of the benchmark.
    target_mode: str = "both"

    def validate(self) -> None:
        if self.target_mode not in ("both", "style_only", "weather_only"):
            raise ConfigError(f"unknown target_mode {self.target_mode!r}")


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def save_png(pixels: np.ndarray, path: str) -> None:
    arr = to_uint8(pixels).transpose(1, 2, 0)
    img = Image.fromarray(arr, mode="RGB")
    _atomic_binary_write(path, _png_bytes(img))


def _png_bytes(img: Image.Image) -> bytes:
    import io

    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def load_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def _atomic_binary_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_text_write(path: str, text: str) -> None:
    _atomic_binary_write(path, text.encode("utf-8"))


def build_dataset(
    gen_config: GenConfig,
    corruption_config: CorruptionConfig,
    split_sizes: dict[str, int],
    out_dir: str,
    master_seed: int,
) -> str:
    """Write the four splits plus a manifest; fully reproducible from master_seed.

    source_* splits are clear; target_* splits are corrupted per
    `corruption_config`.  Returns the manifest path.
    """
    gen_config.validate()
    corruption_config.validate()
    unknown = set(split_sizes) - set(SPLITS)
    if unknown:
        raise ConfigError(f"unknown splits {sorted(unknown)}")
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for split in SPLITS:
        count = int(split_sizes.get(split, 0))
        if count == 0:
            continue
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        is_target = split.startswith("target")
        tag = seeding.split_tag(split)
        for i in range(count):
            spec = sample_scene(seeding.derive_seed(master_seed, tag, i, seeding.SCENE), gen_config)
            image = render(spec)
            record = None
            pixels = image.pixels
            if is_target:
                record = _sample_record(master_seed, tag, i, corruption_config)
                pixels, record = corrupt(pixels, record)
            rel = f"{split}/{i:05d}.png"
            save_png(pixels, os.path.join(out_dir, rel))
            entries.append(
                {
                    "file": rel,
                    "split": split,
                    "domain": TARGET_ADVERSE if is_target else SOURCE_CLEAR,
                    "boxes": [b.to_dict() for b in image.boxes],
                    "corruption": record.to_dict() if record is not None else None,
                }
            )
    manifest = {
        "version": MANIFEST_VERSION,
        "master_seed": int(master_seed),
        "images": entries,
    }
    manifest_path = os.path.join(out_dir, "manifest.json")
    atomic_text_write(manifest_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _sample_record(master_seed: int, tag: int, i: int, cfg: CorruptionConfig) -> CorruptionRecord:
    style = None
    weather = None
    if cfg.target_mode in ("both", "style_only"):
        style = sample_style_params(seeding.rng_from(seeding.derive_seed(master_seed, tag, i, seeding.STYLE)), cfg.style)
    if cfg.target_mode in ("both", "weather_only"):
        weather = sample_weather_params(
            seeding.rng_from(seeding.derive_seed(master_seed, tag, i, seeding.WEATHER)), cfg.weather
        )
    return CorruptionRecord(style=style, weather=weather, seed=seeding.derive_seed(master_seed, tag, i, 99))


def load_manifest(manifest_path: str) -> dict:
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def load_split(manifest_path: str, split: str) -> list[LabeledImage]:
    """Load one split; boxes are returned only for splits flagged labeled."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    labeled = SPLIT_LABELED[split]
    items: list[LabeledImage] = []
    for entry in manifest["images"]:
        if entry["split"] != split:
            continue
        pixels = load_png(os.path.join(root, entry["file"]))
        boxes = [BoundingBox.from_dict(b) for b in entry["boxes"]] if labeled else None
        record = CorruptionRecord.from_dict(entry["corruption"]) if entry["corruption"] else None
        items.append(
            LabeledImage(
                pixels=pixels,
                boxes=boxes,
                domain=entry["domain"],
                corruption=record,
                image_id=entry["file"],
            )
        )
    return items

"""Synthetic road scenes and cut-paste outlier objects."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .io import load_json, load_mten, save_json, save_mten
from .refinement import Taxonomy

VOID = 0
ROAD, SKY, BUILDING, VEGETATION, CAR, PERSON = 1, 2, 3, 4, 5, 6
CLASS_NAMES = {ROAD: "road", SKY: "sky", BUILDING: "building", VEGETATION: "vegetation", CAR: "car", PERSON: "person"}
CLASS_ROLES = {ROAD: "road", SKY: "stuff", BUILDING: "stuff", VEGETATION: "stuff", CAR: "thing", PERSON: "thing"}
TAXONOMY = Taxonomy(dict(CLASS_ROLES), dict(CLASS_NAMES))
NUM_CLASSES = len(CLASS_NAMES)

# base colours and noise level per class
PALETTES = {
    ROAD: ([(0.35, 0.35, 0.37), (0.42, 0.41, 0.40)], 0.03),
    SKY: ([(0.55, 0.72, 0.92), (0.65, 0.80, 0.95)], 0.015),
    BUILDING: ([(0.55, 0.32, 0.25), (0.62, 0.45, 0.35)], 0.04),
    VEGETATION: ([(0.18, 0.45, 0.15), (0.25, 0.55, 0.20)], 0.06),
    CAR: ([(0.10, 0.15, 0.50), (0.60, 0.08, 0.08)], 0.02),
    PERSON: ([(0.85, 0.70, 0.55), (0.30, 0.22, 0.35)], 0.03),
}
ANOMALY_PALETTE = [
    (0.95, 0.10, 0.85),
    (0.95, 0.92, 0.10),
    (0.05, 0.90, 0.90),
    (1.00, 0.55, 0.00),
    (0.60, 1.00, 0.20),
]
PALETTE_MIN_DISTANCE = 0.35
SPLIT_SALT = {"train": 11, "val": 23, "test": 37, "outliers": 51}
SHAPES = ("ellipse", "triangle", "star")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 48
    width: int = 64
    max_things: int = 3

    def validate(self):
        if self.height % 8 or self.width % 8 or self.height < 16 or self.width < 16:
            raise ValueError(f"image size {self.height}x{self.width} must be divisible by 8 and >= 16")
        return self


@dataclass
class SceneSample:
    image: np.ndarray  # [3,H,W] float32 in [0,1]
    labels: np.ndarray  # [H,W] int32, 1..K
    ood_mask: np.ndarray  # [H,W] uint8
    road_top: int = 0

    def copy(self) -> "SceneSample":
        return SceneSample(self.image.copy(), self.labels.copy(), self.ood_mask.copy(), self.road_top)


def scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, SPLIT_SALT[split], index])


def _paint(image, region, cls, rng):
    colors, noise = PALETTES[cls]
    base = np.asarray(colors[rng.integers(len(colors))], dtype=np.float64)
    n = int(region.sum())
    if n == 0:
        return
    pix = base[:, None] + rng.normal(0.0, noise, size=(3, n))
    image[:, region] = pix


def gen_scene(rng, config: SceneConfig = SceneConfig()) -> SceneSample:
    """Layered scene: sky, buildings, vegetation, road and a few things."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    config.validate()
    h, w = config.height, config.width
    labels = np.full((h, w), VEGETATION, dtype=np.int32)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    sky_end = int(rng.integers(int(0.15 * h), int(0.30 * h) + 1))
    road_top = int(rng.integers(int(0.55 * h), int(0.70 * h) + 1))
    labels[:sky_end] = SKY
    for _ in range(int(rng.integers(1, 5))):
        bw = int(rng.integers(max(2, w // 8), w // 3 + 1))
        x0 = int(rng.integers(0, w - bw + 1))
        top = int(rng.integers(max(1, sky_end - h // 8), road_top - 3))
        labels[top:road_top, x0 : x0 + bw] = BUILDING
    for _ in range(int(rng.integers(1, 4))):
        cy = road_top - float(rng.uniform(0, h / 10))
        cx = float(rng.uniform(0, w))
        ry, rx = float(rng.uniform(h / 14, h / 7)), float(rng.uniform(w / 12, w / 5))
        blob = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        labels[blob & (rows < road_top)] = VEGETATION
    labels[road_top:] = ROAD

    things = []
    for _ in range(int(rng.integers(0, config.max_things + 1))):
        cls = CAR if rng.random() < 0.6 else PERSON
        if cls == CAR:
            th, tw = int(rng.integers(h // 10, h // 6 + 1)), int(rng.integers(w // 8, w // 5 + 1))
        else:
            th, tw = int(rng.integers(h // 8, h // 5 + 1)), int(rng.integers(w // 20 + 1, w // 12 + 2))
        bottom = int(rng.integers(min(h, road_top + th // 2), h + 1))
        top = max(0, bottom - th)
        x0 = int(rng.integers(0, w - tw + 1))
        labels[top:bottom, x0 : x0 + tw] = cls
        things.append(cls)

    image = np.zeros((3, h, w), dtype=np.float64)
    for cls in sorted(CLASS_NAMES):
        _paint(image, labels == cls, cls, rng)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return SceneSample(image, labels, np.zeros((h, w), dtype=np.uint8), road_top)


def _shape_mask(shape, h, w, rng):
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    if shape == "ellipse":
        return ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1.0
    if shape == "triangle":
        # apex at top centre, base along the bottom row
        frac = (yy + 0.5) / h
        return np.abs(xx - cx) <= frac * (w / 2)
    ang = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot((yy - cy) / (h / 2), (xx - cx) / (w / 2))
    spikes = int(rng.integers(5, 8))
    limit = 0.55 + 0.45 * np.cos(spikes * ang) ** 2
    return rad <= limit


def gen_anomaly_object(rng, min_size=6, max_size=14):
    """Textured ellipse/triangle/star patch and its binary mask."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    h = int(rng.integers(min_size, max_size + 1))
    w = int(rng.integers(min_size, max_size + 1))
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    mask = _shape_mask(shape, h, w, rng)
    if not mask.any():
        mask[h // 2, w // 2] = True
    c1, c2 = rng.choice(len(ANOMALY_PALETTE), size=2, replace=False)
    period = int(rng.integers(2, 5))
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        pattern = ((yy // period) % 2).astype(bool)
    else:
        pattern = (((yy // period) + (xx // period)) % 2).astype(bool)
    a, b = np.asarray(ANOMALY_PALETTE[c1]), np.asarray(ANOMALY_PALETTE[c2])
    patch = np.where(pattern[None], a[:, None, None], b[:, None, None])
    patch = patch + rng.normal(0.0, 0.03, size=patch.shape)
    patch = np.clip(patch, 0, 1).astype(np.float32)
    return patch, mask.astype(np.uint8)


def anomaly_mix(scene: SceneSample, obj, position) -> SceneSample:
    """Paste ``obj = (patch, mask)`` with its top-left corner at ``position``."""
    patch, mask = obj
    y, x = position
    oh, ow = mask.shape
    h, w = scene.labels.shape
    if y < 0 or x < 0 or y + oh > h or x + ow > w:
        raise ValueError(f"object {oh}x{ow} at {position} falls outside {h}x{w}")
    out = scene.copy()
    m = mask.astype(bool)
    region = out.image[:, y : y + oh, x : x + ow]
    region[:, m] = patch[:, m]
    out.ood_mask[y : y + oh, x : x + ow][m] = 1
    return out


def random_position(rng, obj_shape, image_shape, road_top=None):
    oh, ow = obj_shape
    h, w = image_shape
    x = int(rng.integers(0, w - ow + 1))
    if road_top is None:
        y = int(rng.integers(0, h - oh + 1))
    else:
        lo = min(road_top, h - oh)
        y = int(rng.integers(lo, h - oh + 1))
    return y, x


def gen_outlier_pool(seed: int, size: int = 300) -> list:
    return [gen_anomaly_object(scene_rng(seed, "outliers", i)) for i in range(size)]


def sample_batch(inlier_set, outlier_pool, p_outlier, batch_size, rng):
    """Draw ``batch_size`` scenes, each outlier-mixed with probability ``p_outlier``.

    Returns (samples, flags) where flags[i] tells whether slot i got an object.
    """
    if not 0.0 <= p_outlier <= 1.0:
        raise ValueError("p_outlier must lie in [0, 1]")
    if not inlier_set:
        raise ValueError("inlier set is empty")
    if p_outlier > 0 and not outlier_pool:
        raise ValueError("outlier pool is empty")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    samples, flags = [], []
    for _ in range(batch_size):
        scene = inlier_set[int(rng.integers(len(inlier_set)))]
        is_out = bool(rng.random() < p_outlier)
        if is_out:
            obj = outlier_pool[int(rng.integers(len(outlier_pool)))]
            pos = random_position(rng, obj[1].shape, scene.labels.shape)
            scene = anomaly_mix(scene, obj, pos)
        samples.append(scene)
        flags.append(is_out)
    return samples, flags


def make_split(seed: int, count: int, split: str = "train", config: SceneConfig = SceneConfig(),
               anomalies=(1, 2)) -> list:
    """Scenes for one split; the test split gets 1-2 objects pasted on the road."""
    if count <= 0:
        raise ValueError("scene count must be positive")
    scenes = []
    for i in range(count):
        rng = scene_rng(seed, split, i)
        scene = gen_scene(rng, config)
        if split == "test":
            for _ in range(int(rng.integers(anomalies[0], anomalies[1] + 1))):
                obj = gen_anomaly_object(rng)
                pos = random_position(rng, obj[1].shape, scene.labels.shape, road_top=scene.road_top)
                scene = anomaly_mix(scene, obj, pos)
        scenes.append(scene)
    return scenes


# ------------------------------------------------------------------ on disk

@dataclass
class Dataset:
    scenes: list
    manifest: dict

    @property
    def taxonomy(self) -> Taxonomy:
        return Taxonomy.from_json(self.manifest["taxonomy"])

    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.scenes])

    def __len__(self):
        return len(self.scenes)


def build_manifest(seed, count, split, config: SceneConfig) -> dict:
    return {
        "num_classes": NUM_CLASSES,
        "class_names": [CLASS_NAMES[k] for k in sorted(CLASS_NAMES)],
        "taxonomy": TAXONOMY.to_json(),
        "scene_count": count,
        "image_size": [config.height, config.width],
        "seed": seed,
        "split": split,
        "void_label": VOID,
    }


def write_dataset(out_dir, scenes, manifest):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(scenes):
        save_mten(out / f"{i:04d}.image.mten", s.image)
        save_mten(out / f"{i:04d}.labels.mten", s.labels.astype(np.int32))
        save_mten(out / f"{i:04d}.ood.mten", s.ood_mask.astype(np.uint8))
    save_json(out / "manifest.json", manifest)


def generate_dataset(out_dir, seed, count, split="train", config: SceneConfig = SceneConfig()) -> Dataset:
    scenes = make_split(seed, count, split, config)
    manifest = build_manifest(seed, count, split, config)
    write_dataset(out_dir, scenes, manifest)
    return Dataset(scenes, manifest)


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise FileNotFoundError(f"no dataset manifest in {path}")
    manifest = load_json(path / "manifest.json")
    scenes = []
    for i in range(manifest["scene_count"]):
        img = load_mten(path / f"{i:04d}.image.mten")
        lab = load_mten(path / f"{i:04d}.labels.mten").astype(np.int32)
        ood = load_mten(path / f"{i:04d}.ood.mten").astype(np.uint8)
        road_rows = np.nonzero((lab == ROAD).all(axis=1))[0]
        scenes.append(SceneSample(img, lab, ood, int(road_rows[0]) if road_rows.size else 0))
    return Dataset(scenes, manifest)


def in_memory_dataset(seed, count, split="train", config: SceneConfig = SceneConfig()) -> Dataset:
    return Dataset(make_split(seed, count, split, config), build_manifest(seed, count, split, config))


def with_size(config: SceneConfig, height, width) -> SceneConfig:
    return replace(config, height=height, width=width)

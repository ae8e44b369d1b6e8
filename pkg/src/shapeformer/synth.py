"""Procedural occlusion scenes with ground-truth mask quartets.

Every category is drawn from one parametric shape family, so shapes inside a
category are regular while the families differ.  Scenes are stacked
back-to-front and visible masks follow from depth order.
"""
from __future__ import annotations

import base64
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import (DegenerateShape, FormatVersionMismatch, GenerationExhausted,
                     ParseError)
from .masks import Box, MaskQuartet

FORMAT_VERSION = 1
FAMILIES = ("rectangle", "ellipse", "triangle", "lshape")
MIN_SHAPE_AREA = 16
MIN_VISIBLE_FRACTION = 0.10
MAX_SCENE_ATTEMPTS = 100
MAX_AUGMENT_ATTEMPTS = 50
AUGMENT_RETAIN = (0.20, 0.95)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(seed: int, index: int) -> int:
    """Per-item seed from a run seed and an item index."""
    return splitmix64((seed & _MASK64) ^ splitmix64(index & _MASK64))


@dataclass
class GenConfig:
    image_size: int = 64
    num_categories: int = 4
    instances_min: int = 2
    instances_max: int = 4
    seed: int = 0
    families: tuple[str, ...] = ()
    object_size: tuple[int, int] = (14, 30)

    def __post_init__(self):
        if not self.families:
            self.families = tuple(FAMILIES[j % len(FAMILIES)] for j in range(self.num_categories))
        self.families = tuple(self.families)
        self.object_size = tuple(self.object_size)
        self.validate()

    def validate(self) -> None:
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if len(self.families) < self.num_categories:
            raise ValueError("a shape family is needed for every category")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families: {sorted(unknown)}")
        if not 1 <= self.instances_min <= self.instances_max:
            raise ValueError("bad instances range")

    def family(self, category: int) -> str:
        return self.families[category]

    def to_json(self) -> dict:
        d = asdict(self)
        d["families"] = list(self.families)
        d["object_size"] = list(self.object_size)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "GenConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        return cls(**known)


# -- shape rasterisation ---------------------------------------------------------------

def _grid(canvas):
    h, w = canvas
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def _raster_rectangle(canvas, x0, y0, x1, y1):
    px, py = _grid(canvas)
    return (px >= x0) & (px < x1) & (py >= y0) & (py < y1)


def _raster_ellipse(canvas, cx, cy, rx, ry, angle=0.0):
    if rx <= 0 or ry <= 0:
        raise DegenerateShape("ellipse radii must be positive")
    px, py = _grid(canvas)
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = px - cx, py - cy
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _raster_triangle(canvas, x0, y0, x1, y1, x2, y2):
    px, py = _grid(canvas)

    def edge(ax, ay, bx, by):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

    e0, e1, e2 = edge(x0, y0, x1, y1), edge(x1, y1, x2, y2), edge(x2, y2, x0, y0)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _raster_lshape(canvas, x0, y0, x1, y1, notch_w, notch_h, corner):
    """Box with one corner notch removed; ``corner`` 0..3 = TL, TR, BR, BL."""
    full = _raster_rectangle(canvas, x0, y0, x1, y1)
    nx0 = x0 if corner in (0, 3) else x1 - notch_w
    ny0 = y0 if corner in (0, 1) else y1 - notch_h
    return full & ~_raster_rectangle(canvas, nx0, ny0, nx0 + notch_w, ny0 + notch_h)


_RASTERS = {
    "rectangle": _raster_rectangle,
    "ellipse": _raster_ellipse,
    "triangle": _raster_triangle,
    "lshape": _raster_lshape,
}


def render_family(family: str, params, canvas) -> np.ndarray:
    mask = _RASTERS[family](tuple(canvas), *params)
    if np.count_nonzero(mask) < MIN_SHAPE_AREA:
        raise DegenerateShape(f"{family} {tuple(params)} covers fewer than {MIN_SHAPE_AREA} px")
    return mask


def render_shape(category: int, params, canvas, config: GenConfig | None = None) -> np.ndarray:
    """Rasterise ``params`` with the shape family of ``category``."""
    config = config or GenConfig()
    if not 0 <= category < config.num_categories:
        raise ValueError(f"category {category} outside [0, {config.num_categories})")
    return render_family(config.family(category), params, canvas)


def sample_params(family: str, rng: np.random.Generator, canvas, size_range) -> tuple:
    """Draw shape parameters whose footprint lies inside ``canvas``."""
    h, w = canvas
    lo, hi = size_range
    bw = int(rng.integers(lo, hi + 1))
    bh = int(rng.integers(lo, hi + 1))
    bw, bh = min(bw, w - 2), min(bh, h - 2)
    x0 = int(rng.integers(1, w - bw))
    y0 = int(rng.integers(1, h - bh))
    x1, y1 = x0 + bw, y0 + bh
    if family == "rectangle":
        return (x0, y0, x1, y1)
    if family == "ellipse":
        r = min(bw, bh) / 2.0
        rx = r
        ry = r * float(rng.uniform(0.5, 0.8))
        return (x0 + r, y0 + r, rx, ry, float(rng.uniform(0, np.pi)))
    if family == "triangle":
        apex = float(rng.uniform(x0, x1))
        pts = [(x0, y1), (x1, y1), (apex, y0)]
        turn = int(rng.integers(4))
        cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
        out = []
        for px, py in pts:
            dx, dy = px - cx, py - cy
            for _ in range(turn):
                dx, dy = -dy, dx
            # keep the rotated footprint on the canvas
            out.append((min(max(cx + dx, 0.0), w), min(max(cy + dy, 0.0), h)))
        return tuple(v for p in out for v in p)
    if family == "lshape":
        nw = max(1, int(round(bw * rng.uniform(0.4, 0.6))))
        nh = max(1, int(round(bh * rng.uniform(0.4, 0.6))))
        return (x0, y0, x1, y1, nw, nh, int(rng.integers(4)))
    raise ValueError(f"unknown family {family!r}")


# -- scenes ----------------------------------------------------------------------------

@dataclass
class Instance:
    box: Box
    category: int
    quartet: MaskQuartet
    depth_order: int  # 0 = nearest to the camera

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.box == other.box and self.category == other.category
                and self.depth_order == other.depth_order and self.quartet == other.quartet)


@dataclass
class SceneRecord:
    image: np.ndarray  # uint8, H x W
    instances: list[Instance] = field(default_factory=list)
    scene_seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, SceneRecord):
            return NotImplemented
        return (self.scene_seed == other.scene_seed
                and self.image.dtype == other.image.dtype
                and np.array_equal(self.image, other.image)
                and self.instances == other.instances)

    def to_json(self) -> dict:
        h, w = self.image.shape[:2]
        return {
            "format_version": FORMAT_VERSION,
            "scene_seed": self.scene_seed,
            "height": h,
            "width": w,
            "channels": 1 if self.image.ndim == 2 else self.image.shape[2],
            "image": base64.b64encode(np.ascontiguousarray(self.image, dtype=np.uint8).tobytes()).decode("ascii"),
            "instances": [
                {"box": inst.box.as_list(), "category": inst.category,
                 "depth_order": inst.depth_order, "masks": inst.quartet.to_json()}
                for inst in self.instances
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SceneRecord":
        if obj.get("format_version") != FORMAT_VERSION:
            raise FormatVersionMismatch(f"scene format {obj.get('format_version')!r}")
        h, w, ch = int(obj["height"]), int(obj["width"]), int(obj["channels"])
        raw = np.frombuffer(base64.b64decode(obj["image"]), dtype=np.uint8)
        if raw.size != h * w * ch:
            raise ParseError("image payload size does not match its header")
        image = raw.reshape((h, w) if ch == 1 else (h, w, ch)).copy()
        instances = [
            Instance(Box.from_list(d["box"]), int(d["category"]),
                     MaskQuartet.from_json(d["masks"]), int(d["depth_order"]))
            for d in obj["instances"]
        ]
        return cls(image=image, instances=instances, scene_seed=int(obj["scene_seed"]))


def occlusion_layers(amodals: list[np.ndarray]) -> list[MaskQuartet]:
    """Quartets for amodal masks stacked back-to-front (last = nearest).

    The occluding mask of an instance is the visible area of every nearer
    instance that overlaps it, clipped to the instance box.
    """
    n = len(amodals)
    visibles = []
    for i, amodal in enumerate(amodals):
        cover = np.zeros_like(amodal)
        for m in amodals[i + 1:]:
            cover |= m
        visibles.append(amodal & ~cover)
    quartets = []
    for i, amodal in enumerate(amodals):
        occluding = np.zeros_like(amodal)
        for j in range(i + 1, n):
            if (amodals[j] & amodal).any():
                occluding |= visibles[j]
        box = Box.tight(amodal)
        in_box = np.zeros_like(amodal)
        in_box[box.y0:box.y1, box.x0:box.x1] = True
        quartets.append(MaskQuartet.from_amodal_visible(amodal, visibles[i], occluding & in_box))
    return quartets


def _outline(mask: np.ndarray) -> np.ndarray:
    inner = mask.copy()
    inner[1:, :] &= mask[:-1, :]
    inner[:-1, :] &= mask[1:, :]
    inner[:, 1:] &= mask[:, :-1]
    inner[:, :-1] &= mask[:, 1:]
    return mask & ~inner


def category_tones(num_categories: int) -> np.ndarray:
    return np.linspace(0.35, 0.95, num_categories) if num_categories > 1 else np.array([0.7])


def generate_scene(config: GenConfig, scene_seed: int) -> SceneRecord:
    """Deterministic scene for ``(config, scene_seed)``."""
    rng = np.random.default_rng(scene_seed)
    size = config.image_size
    canvas = (size, size)
    for _ in range(MAX_SCENE_ATTEMPTS):
        n = int(rng.integers(config.instances_min, config.instances_max + 1))
        cats, amodals = [], []
        for _ in range(n):
            cat = int(rng.integers(config.num_categories))
            while True:
                params = sample_params(config.family(cat), rng, canvas, config.object_size)
                try:
                    amodals.append(render_shape(cat, params, canvas, config))
                    break
                except DegenerateShape:
                    continue
            cats.append(cat)
        quartets = occlusion_layers(amodals)
        ok = all(np.count_nonzero(q.visible) >= MIN_VISIBLE_FRACTION * np.count_nonzero(q.amodal)
                 for q in quartets)
        if ok:
            break
    else:
        raise GenerationExhausted(f"no valid scene after {MAX_SCENE_ATTEMPTS} attempts")

    tones = category_tones(config.num_categories)
    image = rng.uniform(0.0, 0.2, size=canvas)
    for cat, q in zip(cats, quartets):
        tone = tones[cat] + rng.uniform(-0.05, 0.05)
        image[q.visible] = tone
        image[_outline(q.visible)] = tone * 0.6
    image = image + rng.normal(0.0, 0.04, size=canvas)
    image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)

    instances = [
        Instance(Box.tight(q.amodal), cat, q, depth_order=n - 1 - i)
        for i, (cat, q) in enumerate(zip(cats, quartets))
    ]
    return SceneRecord(image=image, instances=instances, scene_seed=int(scene_seed))


def generate_split(config: GenConfig, count: int, offset: int = 0) -> list[SceneRecord]:
    return [generate_scene(config, derive_seed(config.seed, offset + i)) for i in range(count)]


# -- augmentation ----------------------------------------------------------------------

def apply_occluder(amodal: np.ndarray, occluder: np.ndarray) -> np.ndarray:
    return amodal & ~occluder


def occlusion_augment(amodal_gt, aug_seed: int) -> np.ndarray:
    """Simulated visible mask: ``amodal_gt`` minus a random pasted occluder.

    Occluders come from the scene shape families, sized relative to the amodal
    box and placed so they overlap it.  Returns ``amodal_gt`` unchanged when no
    placement keeps between 20% and 95% of the area.
    """
    amodal = np.asarray(amodal_gt, dtype=bool)
    area = np.count_nonzero(amodal)
    if area == 0:
        raise ValueError("occlusion_augment needs a non-empty amodal mask")
    rng = np.random.default_rng(aug_seed)
    h, w = amodal.shape
    box = Box.tight(amodal)
    lo, hi = AUGMENT_RETAIN
    for _ in range(MAX_AUGMENT_ATTEMPTS):
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
        ow = max(2, int(round(box.width * rng.uniform(0.3, 0.9))))
        oh = max(2, int(round(box.height * rng.uniform(0.3, 0.9))))
        cx = rng.uniform(box.x0, box.x1)
        cy = rng.uniform(box.y0, box.y1)
        x0, y0 = cx - ow / 2.0, cy - oh / 2.0
        try:
            occ = _occluder(family, rng, (h, w), x0, y0, ow, oh)
        except DegenerateShape:
            continue
        visible = apply_occluder(amodal, occ)
        kept = np.count_nonzero(visible) / area
        if lo <= kept <= hi:
            return visible
    return amodal.copy()


def _occluder(family, rng, canvas, x0, y0, ow, oh) -> np.ndarray:
    x1, y1 = x0 + ow, y0 + oh
    if family == "rectangle":
        params = (x0, y0, x1, y1)
    elif family == "ellipse":
        params = ((x0 + x1) / 2, (y0 + y1) / 2, ow / 2, oh / 2, float(rng.uniform(0, np.pi)))
    elif family == "triangle":
        params = (x0, y1, x1, y1, float(rng.uniform(x0, x1)), y0)
    else:
        nw, nh = max(1, int(ow * 0.5)), max(1, int(oh * 0.5))
        params = (int(x0), int(y0), int(np.ceil(x1)), int(np.ceil(y1)), nw, nh, int(rng.integers(4)))
    return render_family(family, params, canvas)


# -- dataset IO ------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    splits: dict[str, list[str]]
    config: dict
    format_version: int = FORMAT_VERSION

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "config": self.config,
                "splits": self.splits}


def _dump(obj, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, separators=(",", ":")))
    os.replace(tmp, path)


def write_dataset(records, manifest_path, split: str = "train",
                  config: GenConfig | dict | None = None) -> DatasetManifest:
    """Write ``records`` (a list, or a ``{split: list}`` mapping) next to a manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    root.mkdir(parents=True, exist_ok=True)
    by_split = records if isinstance(records, dict) else {split: records}
    if isinstance(config, GenConfig):
        config = config.to_json()
    splits: dict[str, list[str]] = {}
    for name, recs in by_split.items():
        files = []
        for i, rec in enumerate(recs):
            rel = f"{name}/scene_{i:06d}.json"
            (root / name).mkdir(parents=True, exist_ok=True)
            _dump(rec.to_json(), root / rel)
            files.append(rel)
        splits[name] = files
    manifest = DatasetManifest(splits=splits, config=config or {})
    _dump(manifest.to_json(), manifest_path)
    return manifest


def read_manifest(manifest_path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        obj = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if obj.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(f"manifest format {obj.get('format_version')!r}")
    return DatasetManifest(splits={k: list(v) for k, v in obj["splits"].items()},
                           config=obj.get("config", {}))


def read_dataset(manifest_path, split: str = "train") -> list[SceneRecord]:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = read_manifest(manifest_path)
    if split not in manifest.splits:
        raise ParseError(f"split {split!r} not in manifest (have {sorted(manifest.splits)})")
    records = []
    for rel in manifest.splits[split]:
        path = manifest_path.parent / rel
        try:
            obj = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read scene {path}: {exc}") from exc
        try:
            records.append(SceneRecord.from_json(obj))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, (FormatVersionMismatch, ParseError)):
                raise
            raise ParseError(f"malformed scene {path}: {exc}") from exc
    return records

"""Synthetic multi-object shapes dataset with exact box annotations.

Scenes are colored geometric shapes (one shape type per class) rasterized
onto smooth textured backgrounds. Boxes are computed from the rasterized
masks, so annotations are exact by construction. Pixels are quantized to
the 1/255 grid before a scene is built, which makes PNG round-trips
bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import zoom

MIN_IMAGE_SIDE = 16
MIN_BOX_AREA = 64.0

# (name, RGB base color); class i renders shape i. Colors are a shared
# pool drawn per object, independent of class: the label is carried by
# geometry alone, so a detector must read shape outlines rather than hue.
SHAPE_PALETTE = [
    ("circle", (0.87, 0.18, 0.16)),
    ("square", (0.16, 0.78, 0.24)),
    ("triangle", (0.20, 0.32, 0.90)),
    ("diamond", (0.92, 0.84, 0.15)),
    ("plus", (0.85, 0.22, 0.84)),
    ("hexagon", (0.16, 0.80, 0.84)),
    ("star", (0.95, 0.55, 0.12)),
    ("ring", (0.55, 0.20, 0.82)),
    ("halfdisc", (0.13, 0.52, 0.50)),
    ("cross", (0.94, 0.94, 0.92)),
]


class ConfigurationError(ValueError):
    """Invalid dataset generation parameters."""


class AnnotationError(ValueError):
    """Malformed annotation file; the message names the offending record."""


@dataclass(frozen=True)
class GroundTruthObject:
    box: tuple[float, float, float, float]
    label: int

    def validate(self, height: int, width: int, k_classes: int, where: str = "object"):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise AnnotationError(f"{where}: box corners not ordered: {self.box}")
        if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
            raise AnnotationError(f"{where}: box {self.box} outside {width}x{height} image")
        if not 0 <= self.label < k_classes:
            raise AnnotationError(f"{where}: label {self.label} not in [0, {k_classes})")
        if (x2 - x1) * (y2 - y1) < MIN_BOX_AREA:
            raise AnnotationError(f"{where}: box {self.box} smaller than {MIN_BOX_AREA} px^2")


@dataclass
class Scene:
    image: np.ndarray  # HxWx3 float32 in [0,1]
    objects: list[GroundTruthObject]
    id: str
    image_path: str | None = field(default=None, compare=False)

    def validate(self, k_classes: int):
        h, w = self.image.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            raise AnnotationError(f"scene '{self.id}': image {w}x{h} below minimum side {MIN_IMAGE_SIDE}")
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise AnnotationError(f"scene '{self.id}': expected HxWx3 image, got {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise AnnotationError(f"scene '{self.id}': intensities outside [0,1]")
        if not self.objects:
            raise AnnotationError(f"scene '{self.id}': no objects")
        for j, obj in enumerate(self.objects):
            obj.validate(h, w, k_classes, where=f"scene '{self.id}' object {j}")


def _shape_mask(name: str, size: int, cx: float, cy: float, s: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = xs - cx, ys - cy
    r2 = dx * dx + dy * dy
    if name == "circle":
        return r2 <= s * s
    if name == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= s
    if name == "triangle":
        return (np.abs(dy) <= s) & (np.abs(dx) <= (dy + s) / 2)
    if name == "diamond":
        return np.abs(dx) + np.abs(dy) <= s
    if name == "plus":
        arm = s / 3.0
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= s)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= s))
    if name == "hexagon":
        return (np.abs(dy) <= s * math.sqrt(3) / 2) & (
            math.sqrt(3) * np.abs(dx) + np.abs(dy) <= math.sqrt(3) * s
        )
    if name == "star":
        return np.sqrt(np.abs(dx)) + np.sqrt(np.abs(dy)) <= math.sqrt(s)
    if name == "ring":
        return (r2 <= s * s) & (r2 >= (0.55 * s) ** 2)
    if name == "halfdisc":
        return (r2 <= s * s) & (dy >= 0)
    if name == "cross":
        u = (dx + dy) / math.sqrt(2)
        v = (dx - dy) / math.sqrt(2)
        arm = s / 3.0
        return ((np.abs(u) <= arm) & (np.abs(v) <= s)) | ((np.abs(v) <= arm) & (np.abs(u) <= s))
    raise ValueError(f"unknown shape {name!r}")


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.45, 0.85, size=(8, 8, 3))
    smooth = zoom(coarse, (size / 8, size / 8, 1), order=1)
    # Luminance speckle, shared across channels: gray grain survives the
    # channel mean, so backgrounds keep visible texture in grayscale too.
    grain = rng.uniform(-0.08, 0.08, size=(size, size, 1))
    return np.clip(smooth + grain, 0.05, 0.98)


def _mask_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def _quantize(image: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8) / np.float32(255.0)).astype(
        np.float32
    )


def _place_objects(
    rng: np.random.Generator,
    size: int,
    labels: list[int],
) -> tuple[np.ndarray | None, list[tuple[tuple, int]]]:
    """Try to rasterize one mask per label; None if placement failed."""
    s_max = max(10, min(18, size // 5))
    canvas_masks = []
    placed = []
    centers = []
    for label in labels:
        name, _ = SHAPE_PALETTE[label]
        ok = False
        for _ in range(100):
            s = rng.uniform(9.0, s_max)
            cx = rng.uniform(s + 1, size - s - 2)
            cy = rng.uniform(s + 1, size - s - 2)
            # well-separated centers keep objects individually detectable
            if any(max(abs(cx - px), abs(cy - py)) < 18 for px, py in centers):
                continue
            mask = _shape_mask(name, size, cx, cy, s)
            if not mask.any():
                continue
            box = _mask_bbox(mask)
            if (box[2] - box[0]) * (box[3] - box[1]) < MIN_BOX_AREA:
                continue
            centers.append((cx, cy))
            canvas_masks.append(mask)
            placed.append((box, label))
            ok = True
            break
        if not ok:
            return None, []
    return canvas_masks, placed


def generate_dataset(
    seed: int,
    n_scenes: int,
    image_size: int = 128,
    k_classes: int = 3,
    objects_per_scene: tuple[int, int] = (1, 4),
    id_prefix: str = "scene",
) -> list[Scene]:
    """Deterministically generate annotated shape scenes.

    Class labels are dealt from a shuffled balanced deck, so per-class
    object counts stay within a hair of uniform for any scene count.
    """
    if not 2 <= k_classes <= 10:
        raise ConfigurationError(f"k_classes must lie in [2, 10], got {k_classes}")
    if image_size % 16 != 0 or image_size < 64:
        raise ConfigurationError(
            f"image_size must be a multiple of the detector stride (16) and >= 64, got {image_size}"
        )
    lo, hi = objects_per_scene
    if not 1 <= lo <= hi:
        raise ConfigurationError(f"invalid objects_per_scene range {objects_per_scene}")
    if n_scenes < 0:
        raise ConfigurationError(f"n_scenes must be >= 0, got {n_scenes}")

    rng = np.random.default_rng(seed)
    counts = [int(rng.integers(lo, hi + 1)) for _ in range(n_scenes)]
    total = sum(counts)
    deck = np.tile(np.arange(k_classes), math.ceil(total / k_classes) if total else 1)
    deck = rng.permutation(deck)
    cursor = 0

    scenes = []
    for i in range(n_scenes):
        labels = [int(c) for c in deck[cursor : cursor + counts[i]]]
        cursor += counts[i]
        while True:
            masks, placed = _place_objects(rng, image_size, labels)
            if masks is not None:
                break
        image = _textured_background(rng, image_size)
        for mask, (box, label) in zip(masks, placed):
            # Rejection-sample the fill until it stands out from whatever is
            # already under the mask; a washed-out object has no edges to learn.
            local_mean = float(image[mask].mean())
            best_color, best_gap = None, -1.0
            for _ in range(20):
                base = np.array(SHAPE_PALETTE[int(rng.integers(len(SHAPE_PALETTE)))][1])
                color = np.clip(base + rng.uniform(-0.06, 0.06, size=3), 0.05, 0.95)
                gap = abs(float(color.mean()) - local_mean)
                if gap > best_gap:
                    best_color, best_gap = color, gap
                if gap >= 0.25:
                    break
            image[mask] = best_color
        image = np.clip(image + rng.uniform(-0.015, 0.015, size=image.shape), 0.0, 1.0)
        scene = Scene(
            image=_quantize(image),
            objects=[GroundTruthObject(box=box, label=label) for box, label in placed],
            id=f"{id_prefix}-{i:05d}",
        )
        scene.validate(k_classes)
        scenes.append(scene)
    return scenes


def save_image_png(image: np.ndarray, path: str | Path) -> None:
    """Write an HxWx3 [0,1] array as an 8-bit PNG (lossless)."""
    arr = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return (arr / np.float32(255.0)).astype(np.float32)


def _images_dir_for(path: Path) -> Path:
    return path.parent / f"{path.stem}_images"


def write_annotations(scenes: list[Scene], path: str | Path, k_classes: int | None = None) -> None:
    """Write one JSON annotation file plus a sibling directory of PNGs.

    ``<stem>_images/<scene id>.png`` next to the annotation file; boxes are
    stored in absolute pixel coordinates at full float precision.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = []
    image_dir = _images_dir_for(path)
    if scenes:
        image_dir.mkdir(parents=True, exist_ok=True)
    for scene in scenes:
        rel = f"{image_dir.name}/{scene.id}.png"
        save_image_png(scene.image, path.parent / rel)
        records.append(
            {
                "id": scene.id,
                "image": rel,
                "objects": [
                    {"box": [float(v) for v in o.box], "label": int(o.label)}
                    for o in scene.objects
                ],
            }
        )
    payload = {"format": "sfattack-annotations-v1", "scenes": records}
    if k_classes is not None:
        payload["k_classes"] = int(k_classes)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)


def read_annotations(path: str | Path, load_images: bool = True) -> list[Scene]:
    """Read scenes back; every record is validated and failures name it."""
    path = Path(path)
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or "scenes" not in payload:
        raise AnnotationError(f"{path}: missing top-level 'scenes' list")
    k_classes = int(payload.get("k_classes", len(SHAPE_PALETTE)))

    scenes = []
    for rec in payload["scenes"]:
        sid = rec.get("id")
        if not isinstance(sid, str) or not sid:
            raise AnnotationError(f"{path}: record without a string 'id': {rec!r:.120}")
        try:
            objects = [
                GroundTruthObject(box=tuple(float(v) for v in o["box"]), label=int(o["label"]))
                for o in rec["objects"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"scene '{sid}': malformed object entry ({exc})") from exc
        image_rel = rec.get("image")
        if not isinstance(image_rel, str):
            raise AnnotationError(f"scene '{sid}': missing image filename")
        if load_images:
            image_file = path.parent / image_rel
            if not image_file.exists():
                raise AnnotationError(f"scene '{sid}': image file not found: {image_file}")
            image = load_image_png(image_file)
        else:
            image = np.zeros((MIN_IMAGE_SIDE, MIN_IMAGE_SIDE, 3), dtype=np.float32)
        scene = Scene(image=image, objects=objects, id=sid, image_path=str(path.parent / image_rel))
        if load_images:
            scene.validate(k_classes)
        scenes.append(scene)
    return scenes

"""Procedural fixture datasets: small shape scenes with full annotations.

Every stage of the pipeline is testable offline from these: RGB images,
binary saliency masks, panoptic id rasters with segment tables, and
captions.  Generation is deterministic for a fixed seed, so the committed
fixtures can be regenerated byte-identically.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import segment_id_to_color

PALETTE = {
    "red": (200, 40, 40),
    "blue": (40, 60, 200),
    "green": (40, 160, 60),
    "yellow": (220, 200, 40),
    "purple": (140, 60, 180),
    "orange": (230, 140, 30),
}
SHAPES = ("circle", "square", "triangle")
CATEGORY_IDS = {"circle": 1, "square": 2, "triangle": 3, "ground": 10}
GROUND_SEGMENT_ID = 1000


def _shape_mask(shape: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    # upward triangle: width grows linearly from apex to base
    rel = yy - (cy - r)
    return (rel >= 0) & (rel <= 2 * r) & (np.abs(xx - cx) <= rel / 2)


def _ground_rows(size: int) -> int:
    return max(size // 5, 3)


def _radius_range(size: int) -> tuple[int, int]:
    return max(size // 11, 2), max(size // 7, 3)


def _scene(
    rng: np.random.Generator,
    size: int,
    specs: list[tuple[str, str, int, int, int]],
    ground_rows: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[dict]]:
    if ground_rows is None:
        ground_rows = _ground_rows(size)
    """Render (image, saliency mask, panoptic raster, segment table entries)."""
    grad = np.linspace(150, 210, size)[:, None]
    image = np.repeat(grad[:, :, None], 3, axis=2) * np.ones((size, size, 3))
    image += rng.normal(0.0, 4.0, size=(size, size, 3))
    raster = np.zeros((size, size, 3), dtype=np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)

    image[size - ground_rows :, :, :] = (90, 80, 70)
    raster[size - ground_rows :, :] = segment_id_to_color(GROUND_SEGMENT_ID)
    segments = [
        {
            "id": GROUND_SEGMENT_ID,
            "category_id": CATEGORY_IDS["ground"],
            "area": ground_rows * size,
        }
    ]

    for i, (shape, color, cy, cx, r) in enumerate(specs):
        seg_id = 100 + 95 * i
        region = _shape_mask(shape, size, cy, cx, r)
        image[region] = PALETTE[color]
        raster[region] = segment_id_to_color(seg_id)
        mask[region] = 1
        segments.append(
            {"id": seg_id, "category_id": CATEGORY_IDS[shape], "area": int(region.sum())}
        )
    return np.clip(image, 0, 255).astype(np.uint8), mask, raster, segments


def _write_scene(root: Path, name: str, image, mask, raster) -> None:
    Image.fromarray(image).save(root / "images" / f"{name}.png")
    Image.fromarray(mask * 255, mode="L").save(root / "masks" / f"{name}.png")
    Image.fromarray(raster).save(root / "panoptic" / f"{name}.png")


def _init_dirs(root: Path) -> None:
    for sub in ("images", "masks", "panoptic"):
        (root / sub).mkdir(parents=True, exist_ok=True)


def _categories() -> list[dict]:
    return [
        {"id": CATEGORY_IDS["circle"], "name": "circle", "isthing": 1},
        {"id": CATEGORY_IDS["square"], "name": "square", "isthing": 1},
        {"id": CATEGORY_IDS["triangle"], "name": "triangle", "isthing": 1},
        {"id": CATEGORY_IDS["ground"], "name": "ground", "isthing": 0},
    ]


def _finish(root: Path, annotations: list[dict], captions: list[str]) -> None:
    doc = {"annotations": annotations, "categories": _categories()}
    (root / "panoptic.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    (root / "captions.tsv").write_text("\n".join(captions) + "\n", encoding="utf-8")


def generate_mini_coco(out_dir: str | Path, n_images: int = 30, size: int = 64, seed: int = 7) -> Path:
    """Shape scenes with 1-3 salient objects over ground and void background."""
    root = Path(out_dir)
    _init_dirs(root)
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    annotations = []
    captions = []
    r_lo, r_hi = _radius_range(size)
    band = _ground_rows(size)
    for idx in range(n_images):
        name = f"{idx:04d}"
        count = int(rng.integers(1, 4))
        lanes = rng.permutation(3)[:count]
        specs = []
        phrases = []
        for lane in sorted(lanes):
            shape = SHAPES[rng.integers(len(SHAPES))]
            color = colors[rng.integers(len(colors))]
            r = int(rng.integers(r_lo, r_hi + 1))
            cx = int(lane * size // 3 + size // 6 + rng.integers(-2, 3))
            cy = int(rng.integers(r + 2, size - band - r - 2))
            specs.append((shape, color, cy, cx, r))
            phrases.append(f"a {color} {shape}")
        image, mask, raster, segments = _scene(rng, size, specs)
        _write_scene(root, name, image, mask, raster)
        annotations.append(
            {"image_id": name, "file_name": f"{name}.png", "segments_info": segments}
        )
        captions.append(f"{name}.png\t" + " and ".join(phrases))
    _finish(root, annotations, captions)
    return root


def generate_two_object_set(out_dir: str | Path, n_images: int = 8, size: int = 64, seed: int = 11) -> Path:
    """Two far-apart salient shapes per image, both named by the caption."""
    root = Path(out_dir)
    _init_dirs(root)
    rng = np.random.default_rng(seed)
    colors = list(PALETTE)
    annotations = []
    captions = []
    r_lo, r_hi = _radius_range(size)
    q = size // 4
    for idx in range(n_images):
        name = f"{idx:04d}"
        c1, c2 = rng.choice(len(colors), size=2, replace=False)
        r1, r2 = int(rng.integers(r_lo, r_hi)), int(rng.integers(r_lo, r_hi))
        specs = [
            ("circle", colors[c1],
             int(rng.integers(q - 6, q + 2)), int(rng.integers(q - 6, q + 2)), r1),
            ("square", colors[c2],
             int(rng.integers(2 * q + 4, 2 * q + 12)), int(rng.integers(2 * q + 12, 3 * q + 4)), r2),
        ]
        image, mask, raster, segments = _scene(rng, size, specs)
        _write_scene(root, name, image, mask, raster)
        annotations.append(
            {"image_id": name, "file_name": f"{name}.png", "segments_info": segments}
        )
        captions.append(
            f"{name}.png\ta {colors[c1]} circle and a {colors[c2]} square"
        )
    _finish(root, annotations, captions)
    return root

"""Dataset loading and the panoptic-to-saliency relabeling pipeline.

Directory layout of a dataset root:

    images/        RGB PNG or JPEG
    masks/         8-bit single-channel PNG, 0 or 255
    panoptic/      segment-id rasters (id = R + 256 G + 65536 B)
    panoptic.json  segment tables, COCO-panoptic style
    captions.tsv   lines of "image_filename<TAB>caption text"
    selections.jsonl  one selection record per line

Iteration order is lexicographic by filename everywhere.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .autodiff import bilinear_resize_array
from .errors import ContractError, DatasetError, FormatError

IMAGE_MEAN = np.array([0.485, 0.456, 0.406])
IMAGE_STD = np.array([0.229, 0.224, 0.225])


@dataclass(frozen=True)
class SampleRecord:
    image_path: Path
    mask_path: Path
    split: str = "train"
    caption: str | None = None


def list_sample_records(root: str | Path, split: str = "train") -> list[SampleRecord]:
    """Pair images/ with masks/ by stem; captions.tsv attaches captions."""
    root = Path(root)
    images = sorted((root / "images").glob("*"))
    masks = {p.stem: p for p in (root / "masks").glob("*.png")}
    captions = load_captions(root / "captions.tsv") if (root / "captions.tsv").exists() else {}
    records = []
    for img in images:
        if img.stem not in masks:
            raise DatasetError(f"no mask for image {img}")
        records.append(
            SampleRecord(img, masks[img.stem], split, captions.get(img.name))
        )
    return records


def load_captions(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        name, _, caption = line.partition("\t")
        out[name] = caption
    return out


def _decode_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def _decode_mask(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except Exception as exc:
        raise DatasetError(f"cannot decode mask {path}: {exc}") from exc


def load_pair(record: SampleRecord, size: int) -> tuple[np.ndarray, np.ndarray]:
    """(image (3,size,size) normalized, mask (size,size) binary).

    Images scale to [0, 1] then normalize by fixed per-channel mean/std.
    Masks resize bilinearly and binarize at 0.5.
    """
    image = _decode_image(record.image_path)
    mask = _decode_mask(record.mask_path)
    if image.shape[:2] != mask.shape:
        raise DatasetError(
            f"extent mismatch: {record.image_path} is {image.shape[:2]}, "
            f"{record.mask_path} is {mask.shape}"
        )
    chw = image.transpose(2, 0, 1)
    if chw.shape[1:] != (size, size):
        chw = bilinear_resize_array(chw, size, size)
    chw = (chw - IMAGE_MEAN[:, None, None]) / IMAGE_STD[:, None, None]
    if mask.shape != (size, size):
        mask = bilinear_resize_array(mask[None], size, size)[0]
    return chw, (mask >= 0.5).astype(np.float64)


def load_image(path: str | Path, size: int) -> np.ndarray:
    """Image only, resized and normalized like load_pair (for prediction)."""
    chw = _decode_image(Path(path)).transpose(2, 0, 1)
    if chw.shape[1:] != (size, size):
        chw = bilinear_resize_array(chw, size, size)
    return (chw - IMAGE_MEAN[:, None, None]) / IMAGE_STD[:, None, None]


def save_saliency_png(path: str | Path, prob: np.ndarray) -> None:
    """8-bit single-channel PNG with value round(255 p)."""
    arr = np.rint(np.clip(prob, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((mask > 0.5).astype(np.uint8) * 255, mode="L").save(path)


# -- panoptic segment rasters -------------------------------------------------


@dataclass(frozen=True)
class SegmentInfo:
    id: int
    category: str
    is_foreground: bool


@dataclass
class PanopticSegmentMap:
    ids: np.ndarray  # (h, w) int64, 0 = void
    table: dict[int, SegmentInfo]

    def pixel_count(self, seg_id: int) -> int:
        return int((self.ids == seg_id).sum())


@dataclass(frozen=True)
class RelabelSelection:
    image: str
    segments: frozenset[int]
    annotator: str
    ts: str

    @classmethod
    def from_json(cls, line: str) -> "RelabelSelection":
        raw = json.loads(line)
        return cls(raw["image"], frozenset(int(s) for s in raw["segments"]),
                   raw["annotator"], raw["ts"])

    def to_json(self) -> str:
        return json.dumps(
            {
                "image": self.image,
                "segments": sorted(self.segments),
                "annotator": self.annotator,
                "ts": self.ts,
            }
        )


def segment_id_to_color(seg_id: int) -> tuple[int, int, int]:
    if not 0 <= seg_id < 1 << 24:
        raise ContractError(f"segment id {seg_id} outside 24-bit range")
    return seg_id % 256, (seg_id // 256) % 256, seg_id // 65536


def color_to_segment_id(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def decode_panoptic(raster: np.ndarray, table: dict[int, SegmentInfo]) -> PanopticSegmentMap:
    """Decode an RGB id raster; every nonvoid id must appear in the table."""
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise FormatError(f"panoptic raster must be 3-channel, got shape {raster.shape}")
    ids = color_to_segment_id(raster)
    present = np.unique(ids)
    for seg_id in present:
        if seg_id == 0 or int(seg_id) in table:
            continue
        y, x = np.argwhere(ids == seg_id)[0]
        raise FormatError(
            f"segment id {int(seg_id)} at pixel ({int(y)}, {int(x)}) missing from table"
        )
    return PanopticSegmentMap(ids, table)


def load_panoptic_table(path: str | Path) -> dict[str, dict[int, SegmentInfo]]:
    """Read panoptic.json: {image file name (raster): {segment id: info}}."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    categories = {c["id"]: c for c in raw.get("categories", [])}
    out: dict[str, dict[int, SegmentInfo]] = {}
    for ann in raw["annotations"]:
        table = {}
        for seg in ann["segments_info"]:
            cat = categories.get(seg["category_id"], {})
            table[int(seg["id"])] = SegmentInfo(
                id=int(seg["id"]),
                category=cat.get("name", str(seg["category_id"])),
                is_foreground=bool(cat.get("isthing", 0)),
            )
        out[ann["file_name"]] = table
    return out


def load_panoptic_map(dataset_dir: str | Path, image_name: str) -> PanopticSegmentMap:
    root = Path(dataset_dir)
    raster_name = Path(image_name).stem + ".png"
    raster_path = root / "panoptic" / raster_name
    if not raster_path.exists():
        raise DatasetError(f"no panoptic raster for {image_name} at {raster_path}")
    tables = load_panoptic_table(root / "panoptic.json")
    if raster_name not in tables:
        raise FormatError(f"{raster_name} missing from panoptic.json")
    with Image.open(raster_path) as img:
        raster = np.asarray(img.convert("RGB"))
    return decode_panoptic(raster, tables[raster_name])


def selection_to_mask(seg: PanopticSegmentMap, sel: RelabelSelection) -> np.ndarray:
    """Binary union of the selected segments; empty selection -> all zero."""
    unknown = sorted(s for s in sel.segments if s not in seg.table)
    if unknown:
        raise ContractError(f"selection names unknown segment ids {unknown}")
    if not sel.segments:
        return np.zeros_like(seg.ids, dtype=np.float64)
    return np.isin(seg.ids, sorted(sel.segments)).astype(np.float64)


def load_selections(path: str | Path) -> list[RelabelSelection]:
    path = Path(path)
    if not path.exists():
        return []
    return [
        RelabelSelection.from_json(line)
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


def latest_selections(records: list[RelabelSelection]) -> dict[tuple[str, str], RelabelSelection]:
    """Last record wins per (image, annotator)."""
    out: dict[tuple[str, str], RelabelSelection] = {}
    for rec in records:
        out[(rec.image, rec.annotator)] = rec
    return out


def export_relabeled_dataset(
    selections: list[RelabelSelection],
    dataset_dir: str | Path,
    out_dir: str | Path,
    merge: str = "per-annotator",
) -> tuple[list[dict], list[str]]:
    """Write one binary mask PNG per selection plus a manifest CSV.

    Returns (manifest rows, unresolved selection descriptions).  Re-running
    with the same inputs rewrites byte-identical outputs.  merge="majority"
    collapses multi-annotator selections by per-pixel majority vote.
    """
    root = Path(dataset_dir)
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    chosen = latest_selections(selections)
    by_image: dict[str, list[RelabelSelection]] = {}
    for rec in chosen.values():
        by_image.setdefault(rec.image, []).append(rec)

    rows: list[dict] = []
    unresolved: list[str] = []
    for image in sorted(by_image):
        recs = sorted(by_image[image], key=lambda r: r.annotator)
        try:
            seg = load_panoptic_map(root, image)
            masks = [(rec, selection_to_mask(seg, rec)) for rec in recs]
        except (DatasetError, FormatError, ContractError) as exc:
            unresolved.append(f"{image}: {exc}")
            continue
        stem = Path(image).stem
        if merge == "majority" and len(masks) > 1:
            votes = np.sum([m for _, m in masks], axis=0)
            merged = (votes * 2 > len(masks)).astype(np.float64)
            entries = [(None, merged)]
        else:
            entries = masks
        for rec, mask in entries:
            if rec is None:
                name = f"{stem}.png"
                annotator = "majority"
                segments: list[int] = sorted(set().union(*(r.segments for r in recs)))
            else:
                name = f"{stem}.png" if len(entries) == 1 else f"{stem}__{rec.annotator}.png"
                annotator = rec.annotator
                segments = sorted(rec.segments)
            save_mask_png(out / "masks" / name, mask)
            rows.append(
                {
                    "image": image,
                    "mask": f"masks/{name}",
                    "annotator": annotator,
                    "segments": " ".join(str(s) for s in segments),
                }
            )
    with open(out / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["image", "mask", "annotator", "segments"])
        writer.writeheader()
        writer.writerows(rows)
    return rows, unresolved

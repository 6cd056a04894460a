"""Annotation HTTP service backing the segment-selection UI.

JSON API (all under /api):

    GET  /api/images                      -> [{id, width, height, done}]
    GET  /api/images/{id}                 -> image PNG
    GET  /api/images/{id}/raster          -> panoptic id raster PNG
    GET  /api/images/{id}/panoptic        -> {segments: [...], raster_url}
    GET  /api/images/{id}/selection       -> {segments: [int]}
    POST /api/images/{id}/selection       -> 204, body {segments, annotator}
    GET  /api/export                      -> runs the relabel export

Selections append to selections.jsonl through one lock so concurrent
posts never interleave within a line.  Static UI files are served from an
optional directory at the root path.
"""

from __future__ import annotations

import json
import mimetypes
import threading
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    RelabelSelection,
    export_relabeled_dataset,
    load_panoptic_map,
    load_selections,
    latest_selections,
    segment_id_to_color,
)
from .errors import DatasetError, FormatError


class AnnotationState:
    """Dataset view plus the serialized selection appender."""

    def __init__(self, dataset_dir: str | Path, ui_dir: str | Path | None = None,
                 export_dir: str | Path | None = None):
        self.root = Path(dataset_dir)
        if not (self.root / "images").is_dir() or not (self.root / "panoptic").is_dir():
            raise DatasetError(f"{self.root} lacks images/ and panoptic/ subdirectories")
        if not (self.root / "panoptic.json").exists():
            raise DatasetError(f"{self.root} lacks panoptic.json")
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.export_dir = Path(export_dir) if export_dir else self.root / "export"
        self.selections_path = self.root / "selections.jsonl"
        self._write_lock = threading.Lock()
        self._maps_lock = threading.Lock()
        self._maps: dict[str, object] = {}
        self.images = sorted(p.name for p in (self.root / "images").glob("*.png"))

    def image_path(self, image_id: str) -> Path | None:
        path = self.root / "images" / f"{image_id}.png"
        return path if path.exists() else None

    def panoptic_map(self, image_id: str):
        with self._maps_lock:
            if image_id not in self._maps:
                self._maps[image_id] = load_panoptic_map(self.root, f"{image_id}.png")
            return self._maps[image_id]

    def done_ids(self) -> set[str]:
        records = latest_selections(load_selections(self.selections_path))
        return {Path(image).stem for image, _ in records}

    def selection_for(self, image_id: str) -> list[int]:
        records = [
            r for r in load_selections(self.selections_path)
            if Path(r.image).stem == image_id
        ]
        return sorted(records[-1].segments) if records else []

    def append_selection(self, image_id: str, segments: list[int], annotator: str) -> None:
        record = RelabelSelection(
            image=f"{image_id}.png",
            segments=frozenset(segments),
            annotator=annotator,
            ts=datetime.now(timezone.utc).isoformat(),
        )
        line = record.to_json() + "\n"
        with self._write_lock:
            with open(self.selections_path, "a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()

    def run_export(self) -> tuple[int, list[str]]:
        selections = load_selections(self.selections_path)
        rows, unresolved = export_relabeled_dataset(selections, self.root, self.export_dir)
        return len(rows), unresolved


def _handler_for(state: AnnotationState):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # quiet by default
            pass

        def _send(self, code: int, body: bytes = b"", content_type: str = "application/json"):
            self.send_response(code)
            if body:
                self.send_header("Content-Type", content_type)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            if body:
                self.wfile.write(body)

        def _json(self, code: int, payload) -> None:
            self._send(code, json.dumps(payload).encode("utf-8"))

        def _not_found(self, what: str) -> None:
            self._json(404, {"error": f"{what} not found"})

        def do_GET(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            try:
                if parts[:2] == ["api", "images"] and len(parts) == 2:
                    return self._list_images()
                if parts[:2] == ["api", "images"] and len(parts) >= 3:
                    return self._image_route(parts[2], parts[3:])
                if parts[:2] == ["api", "export"]:
                    count, unresolved = state.run_export()
                    return self._json(200, {"exported": count, "unresolved": unresolved})
                return self._static(parts)
            except (DatasetError, FormatError) as exc:
                return self._json(500, {"error": str(exc)})

        def _list_images(self):
            done = state.done_ids()
            out = []
            for name in state.images:
                with Image.open(state.root / "images" / name) as img:
                    width, height = img.size
                stem = Path(name).stem
                out.append({"id": stem, "width": width, "height": height, "done": stem in done})
            self._json(200, out)

        def _image_route(self, image_id: str, rest: list[str]):
            path = state.image_path(image_id)
            if path is None:
                return self._not_found(f"image {image_id}")
            if not rest:
                return self._send(200, path.read_bytes(), "image/png")
            if rest == ["raster"]:
                raster = state.root / "panoptic" / f"{image_id}.png"
                return self._send(200, raster.read_bytes(), "image/png")
            if rest == ["panoptic"]:
                seg = state.panoptic_map(image_id)
                counts = dict(zip(*np.unique(seg.ids, return_counts=True)))
                segments = [
                    {
                        "id": info.id,
                        "category": info.category,
                        "pixel_count": int(counts.get(info.id, 0)),
                        "color": list(segment_id_to_color(info.id)),
                    }
                    for info in sorted(seg.table.values(), key=lambda s: s.id)
                ]
                return self._json(
                    200,
                    {"segments": segments, "raster_url": f"/api/images/{image_id}/raster"},
                )
            if rest == ["selection"]:
                return self._json(200, {"segments": state.selection_for(image_id)})
            return self._not_found(self.path)

        def do_POST(self):
            parts = [p for p in self.path.split("?")[0].split("/") if p]
            if parts[:2] != ["api", "images"] or len(parts) != 4 or parts[3] != "selection":
                return self._not_found(self.path)
            image_id = parts[2]
            if state.image_path(image_id) is None:
                return self._not_found(f"image {image_id}")
            length = int(self.headers.get("Content-Length", 0))
            try:
                payload = json.loads(self.rfile.read(length) or b"{}")
            except json.JSONDecodeError:
                return self._json(400, {"error": "body is not valid JSON"})
            errors = {}
            segments = payload.get("segments")
            annotator = payload.get("annotator")
            if not isinstance(segments, list) or not all(isinstance(s, int) for s in segments):
                errors["segments"] = "must be a list of integers"
            if not isinstance(annotator, str) or not annotator:
                errors["annotator"] = "must be a non-empty string"
            if not errors:
                table = state.panoptic_map(image_id).table
                unknown = sorted(s for s in segments if s not in table)
                if unknown:
                    errors["segments"] = f"unknown segment ids {unknown}"
            if errors:
                return self._json(400, {"errors": errors})
            state.append_selection(image_id, segments, annotator)
            self._send(204)

        def _static(self, parts: list[str]):
            if state.ui_dir is None:
                return self._not_found(self.path)
            rel = "/".join(parts) or "index.html"
            path = (state.ui_dir / rel).resolve()
            if not str(path).startswith(str(state.ui_dir.resolve())) or not path.is_file():
                return self._not_found(self.path)
            ctype = mimetypes.guess_type(str(path))[0] or "application/octet-stream"
            self._send(200, path.read_bytes(), ctype)

    return Handler


def make_server(dataset_dir: str | Path, port: int, ui_dir: str | Path | None = None,
                export_dir: str | Path | None = None) -> ThreadingHTTPServer:
    state = AnnotationState(dataset_dir, ui_dir, export_dir)
    server = ThreadingHTTPServer(("127.0.0.1", port), _handler_for(state))
    server.state = state  # type: ignore[attr-defined]
    return server

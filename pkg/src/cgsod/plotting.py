"""Minimal SVG line charts for the metric curves.

Hand-rolled polylines keep the output deterministic and trivially
checkable (one polyline vertex per curve point).
"""

from __future__ import annotations

import csv
from pathlib import Path

WIDTH, HEIGHT, MARGIN = 480, 360, 48


def _scale(values, lo, hi, out_lo, out_hi):
    span = hi - lo or 1.0
    return [out_lo + (v - lo) / span * (out_hi - out_lo) for v in values]


def svg_line_chart(xs: list[float], ys: list[float], title: str, x_label: str, y_label: str) -> str:
    px = _scale(xs, min(xs), max(xs), MARGIN, WIDTH - MARGIN)
    py = _scale(ys, 0.0, 1.0, HEIGHT - MARGIN, MARGIN)
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(px, py))
    return "\n".join(
        [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
            f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{x_label}</text>',
            f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 16 {HEIGHT // 2})">{y_label}</text>',
            f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" '
            f'height="{HEIGHT - 2 * MARGIN}" fill="none" stroke="#999"/>',
            f'<polyline fill="none" stroke="#1f6fb2" stroke-width="1.5" points="{points}"/>',
            "</svg>",
        ]
    )


def read_curve_csv(path: str | Path) -> dict[str, list[float]]:
    cols: dict[str, list[float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            for key, value in row.items():
                cols.setdefault(key, []).append(float(value))
    return cols


def plot_curves(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write pr_curve.svg (recall vs precision) and f_curve.svg from one CSV."""
    cols = read_curve_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pr = out / "pr_curve.svg"
    pr.write_text(
        svg_line_chart(cols["recall"], cols["precision"], "PR curve", "recall", "precision"),
        encoding="utf-8",
    )
    fc = out / "f_curve.svg"
    fc.write_text(
        svg_line_chart(cols["threshold"], cols["f"], "F curve", "threshold", "F"),
        encoding="utf-8",
    )
    return [pr, fc]

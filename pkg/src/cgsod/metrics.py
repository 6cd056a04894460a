"""Saliency evaluation: MAE, thresholded PR / F curves, S-measure, E-measure.

Predictions are float maps in [0, 1]; ground truth is binary.  Curves use
K evenly spaced thresholds t_k = k / (K - 1) and counts of P >= t_k.  The
S- and E-measure internals follow their original published definitions
(centroid-split regions with SSIM-style scores; bias-removed quadratic
alignment), with the degenerate-ground-truth conventions documented on
each function.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, DimensionError


@dataclass(frozen=True)
class MetricsConfig:
    beta_sq: float = 0.3
    alpha: float = 0.5
    thresholds: int = 256
    eps: float = 1e-8
    adaptive_f: bool = False  # mean F from one adaptive threshold instead of the curve
    pooled_curves: bool = False  # dataset curves from pooled pixel counts

    def __post_init__(self):
        if self.beta_sq <= 0:
            raise ValueError(f"beta_sq must be positive, got {self.beta_sq}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.thresholds < 2:
            raise ValueError(f"need at least 2 thresholds, got {self.thresholds}")


def _check_pair(p: np.ndarray, g: np.ndarray) -> None:
    if p.shape != g.shape:
        raise DimensionError(f"prediction {p.shape} vs ground truth {g.shape}")


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute pixel difference."""
    _check_pair(pred, gt)
    return float(np.abs(pred - gt).mean())


def threshold_grid(count: int) -> np.ndarray:
    return np.arange(count) / (count - 1)


def pr_curve(
    pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig = MetricsConfig()
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Precision and recall at each threshold, plus a ground-truth-empty flag.

    With an empty ground truth recall is undefined; the arrays are still
    returned (recall collapses to 0 under the epsilon guard) and the flag
    tells dataset aggregation to leave this image out of curve averages.
    """
    _check_pair(pred, gt)
    fg = np.sort(pred[gt > 0.5], kind="stable")
    bg = np.sort(pred[gt <= 0.5], kind="stable")
    ts = threshold_grid(cfg.thresholds)
    tp = fg.size - np.searchsorted(fg, ts, side="left")
    fp = bg.size - np.searchsorted(bg, ts, side="left")
    precision = tp / (tp + fp + cfg.eps)
    recall = tp / (fg.size + cfg.eps)
    return precision, recall, fg.size == 0


def f_measure(precision, recall, beta_sq: float = 0.3, eps: float = 1e-8):
    """(1 + b2) p r / (b2 p + r), guarded against a zero denominator."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    return (1.0 + beta_sq) * precision * recall / (beta_sq * precision + recall + eps)


def adaptive_f_measure(pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig) -> float:
    """F at the single threshold min(2 * mean(P), 1)."""
    t = min(2.0 * pred.mean(), 1.0)
    binary = pred >= t
    tp = float(np.logical_and(binary, gt > 0.5).sum())
    fp = float(np.logical_and(binary, gt <= 0.5).sum())
    fn = float(np.logical_and(~binary, gt > 0.5).sum())
    p = tp / (tp + fp + cfg.eps)
    r = tp / (tp + fn + cfg.eps)
    return float(f_measure(p, r, cfg.beta_sq, cfg.eps))


def _object_similarity(values: np.ndarray, eps: float) -> float:
    if values.size == 0:
        return 0.0
    x = values.mean()
    sigma = values.std(ddof=1) if values.size > 1 else 0.0
    return float(2.0 * x / (x * x + 1.0 + sigma + eps))


def _region_similarity(p: np.ndarray, g: np.ndarray, eps: float) -> float:
    n = p.size
    if n == 0:
        return 0.0
    x, y = p.mean(), g.mean()
    if n > 1:
        sx = p.var(ddof=1)
        sy = g.var(ddof=1)
        sxy = ((p - x) * (g - y)).sum() / (n - 1)
    else:
        sx = sy = sxy = 0.0
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0.0:
        return float(a / (b + eps))
    return 1.0 if b == 0.0 else 0.0


def _foreground_centroid(gt: np.ndarray) -> tuple[int, int]:
    """1-based centroid of the foreground mass, rounded, as (col, row)."""
    h, w = gt.shape
    total = gt.sum()
    if total == 0:
        return round(w / 2), round(h / 2)
    cols = np.arange(1, w + 1)
    rows = np.arange(1, h + 1)
    cx = round(float((gt.sum(axis=0) * cols).sum() / total))
    cy = round(float((gt.sum(axis=1) * rows).sum() / total))
    return cx, cy


def s_measure(
    pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig = MetricsConfig()
) -> tuple[float, float, float]:
    """Structural similarity (combined, region-aware, object-aware).

    Combination: (1 - alpha) * S_region + alpha * S_object, floored at 0.
    Degenerate ground truth scores 1 - mean(P) (empty) or mean(P) (full);
    both component terms then report that same value.
    """
    _check_pair(pred, gt)
    g = (gt > 0.5).astype(np.float64)
    mu = g.mean()
    if mu == 0.0:
        s = 1.0 - float(pred.mean())
        return s, s, s
    if mu == 1.0:
        s = float(pred.mean())
        return s, s, s

    fg = _object_similarity(pred[g > 0.5], cfg.eps)
    bg = _object_similarity((1.0 - pred)[g <= 0.5], cfg.eps)
    s_object = float(mu * fg + (1.0 - mu) * bg)

    h, w = g.shape
    cx, cy = _foreground_centroid(g)
    area = h * w
    quads = [
        (slice(0, cy), slice(0, cx)),
        (slice(0, cy), slice(cx, w)),
        (slice(cy, h), slice(0, cx)),
        (slice(cy, h), slice(cx, w)),
    ]
    s_region = 0.0
    for rows, colspan in quads:
        sub_g = g[rows, colspan]
        weight = sub_g.size / area
        if weight > 0.0:
            s_region += weight * _region_similarity(pred[rows, colspan], sub_g, cfg.eps)

    combined = (1.0 - cfg.alpha) * s_region + cfg.alpha * s_object
    return max(combined, 0.0), s_region, s_object


def e_measure(pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig = MetricsConfig()) -> float:
    """Enhanced alignment score, averaged over pixels.

    The prediction binarizes at min(2 * mean(P), 1).  The aligned maps have
    their means removed; each pixel scores ((align + 1)^2) / 4 where align
    is the normalized product of the bias-free maps.  Empty ground truth
    scores mean(1 - P_bin), full ground truth mean(P_bin).
    """
    _check_pair(pred, gt)
    g = (gt > 0.5).astype(np.float64)
    t = min(2.0 * pred.mean(), 1.0)
    p = (pred >= t).astype(np.float64)
    if g.sum() == 0.0:
        enhanced = 1.0 - p
    elif g.sum() == g.size:
        enhanced = p
    else:
        dp = p - p.mean()
        dg = g - g.mean()
        align = 2.0 * dp * dg / (dp * dp + dg * dg + cfg.eps)
        enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


@dataclass
class ImageEval:
    name: str
    mae: float
    mean_f: float
    e_measure: float
    s_measure: float
    s_region: float
    s_object: float
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    gt_empty: bool


def evaluate_pair(
    pred: np.ndarray, gt: np.ndarray, cfg: MetricsConfig = MetricsConfig(), name: str = ""
) -> ImageEval:
    precision, recall, gt_empty = pr_curve(pred, gt, cfg)
    f = f_measure(precision, recall, cfg.beta_sq, cfg.eps)
    mean_f = adaptive_f_measure(pred, gt, cfg) if cfg.adaptive_f else float(f.mean())
    s, sr, so = s_measure(pred, gt, cfg)
    return ImageEval(
        name=name,
        mae=mae(pred, gt),
        mean_f=mean_f,
        e_measure=e_measure(pred, gt, cfg),
        s_measure=s,
        s_region=sr,
        s_object=so,
        precision=precision,
        recall=recall,
        f_curve=np.asarray(f),
        gt_empty=gt_empty,
    )


@dataclass
class EvalReport:
    images: int
    mae: float
    mean_f: float
    e_measure: float
    s_measure: float
    s_region: float
    s_object: float
    precision: np.ndarray
    recall: np.ndarray
    f_curve: np.ndarray
    curve_images: int
    skipped: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"images: {self.images}",
            f"curve_images: {self.curve_images}",
            f"skipped: {len(self.skipped)}",
            f"mae: {self.mae!r}",
            f"mean_f: {self.mean_f!r}",
            f"e_measure: {self.e_measure!r}",
            f"s_measure: {self.s_measure!r}",
            f"s_region: {self.s_region!r}",
            f"s_object: {self.s_object!r}",
            "",
            "threshold precision recall f",
        ]
        ts = threshold_grid(len(self.precision))
        for t, p, r, f in zip(ts, self.precision, self.recall, self.f_curve):
            lines.append(f"{t!r} {p!r} {r!r} {f!r}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")
        ts = threshold_grid(len(self.precision))
        for fname in ("pr_curve.csv", "f_curve.csv"):
            with open(out / fname, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["threshold", "precision", "recall", "f"])
                for t, p, r, f in zip(ts, self.precision, self.recall, self.f_curve):
                    writer.writerow([repr(float(t)), repr(float(p)), repr(float(r)), repr(float(f))])
        if self.skipped:
            (out / "skipped.txt").write_text("\n".join(self.skipped) + "\n", encoding="utf-8")


def load_prediction_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=np.float64)
    return arr / 255.0


def load_gt_png(path: str | Path) -> np.ndarray:
    """Ground truth binarizes at pixel value 128."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.float64)


def _eval_one(args) -> ImageEval:
    pred_path, gt_path, cfg = args
    pred = load_prediction_png(pred_path)
    gt = load_gt_png(gt_path)
    if pred.shape != gt.shape:
        raise DatasetError(f"extent mismatch between {pred_path} and {gt_path}")
    return evaluate_pair(pred, gt, cfg, name=Path(pred_path).name)


def aggregate(evals: list[ImageEval], cfg: MetricsConfig, skipped: list[str]) -> EvalReport:
    """Average per-image metrics; curves skip images with empty ground truth."""
    if not evals:
        raise DatasetError("no prediction/ground-truth pairs to evaluate")
    curve_evals = [e for e in evals if not e.gt_empty]
    if curve_evals:
        precision = np.mean([e.precision for e in curve_evals], axis=0)
        recall = np.mean([e.recall for e in curve_evals], axis=0)
        f = np.mean([e.f_curve for e in curve_evals], axis=0)
        mean_f = float(np.mean([e.mean_f for e in curve_evals]))
    else:
        precision = np.zeros(cfg.thresholds)
        recall = np.zeros(cfg.thresholds)
        f = np.zeros(cfg.thresholds)
        mean_f = 0.0
    return EvalReport(
        images=len(evals),
        mae=float(np.mean([e.mae for e in evals])),
        mean_f=mean_f,
        e_measure=float(np.mean([e.e_measure for e in evals])),
        s_measure=float(np.mean([e.s_measure for e in evals])),
        s_region=float(np.mean([e.s_region for e in evals])),
        s_object=float(np.mean([e.s_object for e in evals])),
        precision=precision,
        recall=recall,
        f_curve=f,
        curve_images=len(curve_evals),
        skipped=list(skipped),
    )


def evaluate_dataset(
    pred_dir: str | Path,
    gt_dir: str | Path,
    cfg: MetricsConfig = MetricsConfig(),
    jobs: int = 1,
) -> EvalReport:
    """Evaluate filename-matched PNG pairs; unmatched names are skipped.

    Results are independent of ``jobs``: pairs are processed in
    lexicographic order and averaged with numpy's deterministic reduction.
    """
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    preds = {p.name: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {p.name: p for p in sorted(gt_dir.glob("*.png"))}
    names = sorted(set(preds) & set(gts))
    skipped = sorted(set(preds) ^ set(gts))
    if not names:
        raise DatasetError(f"no matching PNG pairs between {pred_dir} and {gt_dir}")
    tasks = [(preds[n], gts[n], cfg) for n in names]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            evals = list(pool.map(_eval_one, tasks))
    else:
        evals = [_eval_one(t) for t in tasks]
    if cfg.pooled_curves:
        return _aggregate_pooled(evals, tasks, cfg, skipped)
    return aggregate(evals, cfg, skipped)


def _aggregate_pooled(evals, tasks, cfg: MetricsConfig, skipped) -> EvalReport:
    """Alternative curve aggregation from pooled pixel counts."""
    ts = threshold_grid(cfg.thresholds)
    tp = np.zeros(cfg.thresholds)
    fp = np.zeros(cfg.thresholds)
    n_fg = 0.0
    for pred_path, gt_path, _ in tasks:
        pred = load_prediction_png(pred_path)
        gt = load_gt_png(gt_path)
        fg = np.sort(pred[gt > 0.5], kind="stable")
        bg = np.sort(pred[gt <= 0.5], kind="stable")
        tp += fg.size - np.searchsorted(fg, ts, side="left")
        fp += bg.size - np.searchsorted(bg, ts, side="left")
        n_fg += fg.size
    precision = tp / (tp + fp + cfg.eps)
    recall = tp / (n_fg + cfg.eps)
    f = f_measure(precision, recall, cfg.beta_sq, cfg.eps)
    report = aggregate(evals, cfg, skipped)
    report.precision = precision
    report.recall = recall
    report.f_curve = np.asarray(f)
    return report

"""Full-reference metrics, the alpha-blend severity sweep and mAP@0.5."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .errors import AnnotationParseError, InvalidArgument, UndefinedMetric
from .image import alpha_blend, as_image, list_images, read_image, write_image

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
IOU_THRESHOLD = 0.5


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for data in [0, 1]; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    k = _gaussian_window()

    def blur(z):
        return correlate1d(correlate1d(z, k, axis=0, mode="reflect"), k, axis=1, mode="reflect")

    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = (SSIM_WINDOW - 1) // 2
    return s[pad:-pad, pad:-pad]


def ssim(a, b, per_channel: bool = False) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) on [0, 1] data.

    Color inputs are reduced to channel-mean intensity unless
    ``per_channel`` is set, in which case per-channel scores are averaged.
    Border pixels within half a window are excluded from the mean.
    """
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgument(f"SSIM needs both sides >= {SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        return float(_ssim_map(a, b).mean())
    if per_channel:
        return float(np.mean([_ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]))
    return float(_ssim_map(a.mean(axis=2), b.mean(axis=2)).mean())


def format_value(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return repr(float(v))


def _aggregate(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": math.nan, "std": math.nan}
    if np.isinf(v).any():
        # equal infinities have no spread; mixed ones have unbounded spread
        return {"mean": float(v.mean()), "std": 0.0 if np.all(v == v[0]) else math.inf}
    return {"mean": float(v.mean()), "std": float(v.std())}


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)  # {"id", "psnr_db", "ssim", ...}
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        return {k: _aggregate([r[k] for r in self.rows]) for k in ("psnr_db", "ssim")}

    def to_csv(self, path, key_fields=("id",)) -> None:
        fields = list(key_fields) + ["psnr_db", "ssim"]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(fields)
            for row in self.rows:
                writer.writerow([row[k] if k in key_fields else format_value(row[k]) for k in fields])
            agg = self.aggregates
            for stat in ("mean", "std"):
                pad = [stat] + [""] * (len(key_fields) - 1)
                writer.writerow(pad + [format_value(agg["psnr_db"][stat]), format_value(agg["ssim"][stat])])


def full_reference_report(pred_dir, ref_dir, per_channel: bool = False) -> MetricReport:
    """Score every image in ``pred_dir`` against the same filename in ``ref_dir``."""
    pred_dir, ref_dir = Path(pred_dir), Path(ref_dir)
    report = MetricReport(config={"pred": str(pred_dir), "ref": str(ref_dir), "per_channel": per_channel})
    for path in list_images(pred_dir):
        ref = ref_dir / path.name
        if not ref.is_file():
            raise InvalidArgument(f"no reference image for {path.name} in {ref_dir}")
        a, b = read_image(path), read_image(ref)
        report.rows.append({"id": path.name, "psnr_db": psnr(a, b), "ssim": ssim(a, b, per_channel)})
    return report


@dataclass
class BlendRow:
    pair_id: str
    alpha: float
    blended: np.ndarray
    enhanced: np.ndarray | None
    psnr_db: float
    ssim: float


def blend_sweep(pairs, alphas, enhancer=None) -> list[BlendRow]:
    """Blend each ``(pair_id, low, normal)`` at every alpha and score against normal.

    ``alpha`` is the share of the low-light image. ``enhancer`` is an
    optional callable applied to the blend before scoring.
    """
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise InvalidArgument(f"alphas must lie in [0, 1], got {alphas}")
    rows = []
    for pair_id, low, normal in pairs:
        normal = as_image(normal)
        for alpha in alphas:
            blended = alpha_blend(low, normal, alpha)
            enhanced = np.clip(as_image(enhancer(blended)), 0.0, 1.0) if enhancer is not None else None
            out = blended if enhanced is None else enhanced
            rows.append(BlendRow(str(pair_id), alpha, blended, enhanced, psnr(out, normal), ssim(out, normal)))
    return rows


def blend_report(rows: list[BlendRow]) -> MetricReport:
    report = MetricReport()
    report.rows = [{"pair_id": r.pair_id, "alpha": format_value(r.alpha), "psnr_db": r.psnr_db, "ssim": r.ssim} for r in rows]
    return report


def write_blend_images(rows: list[BlendRow], out_dir) -> None:
    """Export blends (and enhancements) for external detectors."""
    out_dir = Path(out_dir)
    for r in rows:
        stem = Path(r.pair_id).stem
        write_image(out_dir / "blended" / f"{stem}_a{r.alpha:.3f}.png", r.blended)
        if r.enhanced is not None:
            write_image(out_dir / "enhanced" / f"{stem}_a{r.alpha:.3f}.png", r.enhanced)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    category: str
    bbox: tuple[float, float, float, float]  # x, y, w, h
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgument(f"score {self.score} outside [0, 1]")
        if self.bbox[2] < 0 or self.bbox[3] < 0:
            raise InvalidArgument(f"negative box size in {self.bbox}")


def load_detections(path) -> list[DetectionRecord]:
    """Read a JSON list of ``{image_id, category, bbox [x, y, w, h], score}``."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, list):
        raise AnnotationParseError(f"{path}: expected a JSON list of detections")
    out = []
    for i, row in enumerate(doc):
        try:
            bbox = tuple(float(v) for v in row["bbox"])
            if len(bbox) != 4:
                raise ValueError("bbox must have 4 numbers")
            out.append(DetectionRecord(str(row["image_id"]), str(row["category"]), bbox, float(row.get("score", 1.0))))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(f"{path}: row {i}: {exc!r}") from exc
    return out


def iou(a, b) -> float:
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    iw = max(0.0, min(ax0 + aw, bx0 + bw) - max(ax0, bx0))
    ih = max(0.0, min(ay0 + ah, by0 + bh) - max(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def average_precision(predictions, truths, threshold: float = IOU_THRESHOLD) -> float:
    """All-point interpolated AP for one category with greedy matching.

    Predictions are visited in descending score order (ties keep input
    order); each takes the highest-IoU unmatched truth of its image when
    that IoU reaches ``threshold``.
    """
    if not truths:
        raise UndefinedMetric("average precision needs at least one truth")
    unmatched: dict[str, list] = {}
    for t in truths:
        unmatched.setdefault(t.image_id, []).append(t.bbox)
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].score)
    hits = []
    for i in order:
        p = predictions[i]
        candidates = unmatched.get(p.image_id, [])
        best, best_iou = None, -1.0
        for j, box in enumerate(candidates):
            v = iou(p.bbox, box)
            if v > best_iou:
                best, best_iou = j, v
        matched = best is not None and best_iou >= threshold
        hits.append(matched)
        if matched:
            candidates.pop(best)
    if not hits:
        return 0.0
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / len(truths)
    # precision envelope, then area under the step curve
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def map_at_50(predictions, truths) -> float:
    """Mean AP at IoU 0.5 over the categories present in ``truths``."""
    if not truths:
        raise UndefinedMetric("mAP is undefined without ground truth")
    categories = sorted({t.category for t in truths})
    aps = [
        average_precision([p for p in predictions if p.category == c], [t for t in truths if t.category == c])
        for c in categories
    ]
    return float(np.mean(aps))

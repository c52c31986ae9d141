"""Frame-level detection/localization metrics: PR curve, AP, best F1, aD, DetErr.

A frame is a positive detection when its confidence is strictly above the
threshold.  A positive on an active frame is a true positive only when the
horizontal error is within the spatial tolerance; otherwise it is a false
positive and the active frame also counts as missed (false negative), as in
object-detection matching.  Hence TP + FN always equals the number of
active frames.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .labels import FrameLabel, FramePrediction
from .rig import DEFAULT_IMAGE_WIDTH, TOLERANCE_PX, CameraModel, build_default_rig, pixel_error_to_degrees


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class Confusion:
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    ap: float
    f1_best: float
    f1_precision: float
    f1_recall: float
    f1_threshold: float
    ad_px: float
    ad_deg: float
    det_err: float
    n_frames: int
    n_active: int
    tolerance_px: float
    pr_curve: list[PRPoint] = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        d["pr_curve"] = [[p.threshold, p.precision, p.recall] for p in self.pr_curve]
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["pr_curve"] = [PRPoint(*p) for p in d["pr_curve"]]
        return cls(**d)

    def table_row(self, name: str = "model") -> str:
        ad = "n/a" if math.isnan(self.ad_px) else f"{self.ad_px:.0f}p, {self.ad_deg:.2f}°"
        return (f"{name:<12} DetErr {100 * self.det_err:5.1f}%  aD {ad:<14}  "
                f"AP {100 * self.ap:5.1f}%  F1 {100 * self.f1_best:5.1f}")


def sigmoid_thresholds(n: int = 101, z_max: float = 8.0) -> np.ndarray:
    """Sigmoid of ``n`` evenly spaced logits in [-z_max, z_max], plus 0 and 1.

    Dense near 0 and 1, coarse around 0.5.
    """
    if n < 3:
        raise MetricsError("need at least 3 thresholds")
    z = np.linspace(-z_max, z_max, n)
    th = np.concatenate([[0.0], 1.0 / (1.0 + np.exp(-z)), [1.0]])
    return np.unique(th)


# -- alignment -----------------------------------------------------------------

@dataclass(frozen=True)
class Aligned:
    confidence: np.ndarray
    x_pred_px: np.ndarray
    target_px: np.ndarray  # NaN on silent frames
    active: np.ndarray


def align(preds: Sequence[FramePrediction], labels: Sequence[FrameLabel],
          image_width: float = DEFAULT_IMAGE_WIDTH) -> Aligned:
    by_key = {}
    for p in preds:
        if p.key in by_key:
            raise MetricsError(f"duplicate prediction for frame {p.key}")
        by_key[p.key] = p
    lab_keys = set()
    conf, xp, tgt, act = [], [], [], []
    for lab in sorted(labels, key=lambda l: l.key):
        if lab.key in lab_keys:
            raise MetricsError(f"duplicate label for frame {lab.key}")
        lab_keys.add(lab.key)
        p = by_key.get(lab.key)
        if p is None:
            raise MetricsError(f"no prediction for labelled frame (frame_index={lab.key[0]}, camera_id={lab.key[1]})")
        conf.append(p.confidence)
        xp.append(p.x_pred_norm * image_width)
        if lab.active:
            if lab.mouth_x_px is not None:
                tgt.append(lab.mouth_x_px)
            elif lab.x_center_norm is not None:
                tgt.append(lab.x_center_norm * image_width)
            else:
                raise MetricsError(f"active frame {lab.key} has no position label")
        else:
            tgt.append(math.nan)
        act.append(lab.active)
    extra = sorted(set(by_key) - lab_keys)
    if extra:
        raise MetricsError(f"prediction without label (frame_index={extra[0][0]}, camera_id={extra[0][1]})")
    return Aligned(np.asarray(conf, float), np.asarray(xp, float), np.asarray(tgt, float), np.asarray(act, bool))


def _counts(a: Aligned, threshold: float, tolerance_px: float) -> Confusion:
    pos = a.confidence > threshold
    with np.errstate(invalid="ignore"):
        near = np.abs(a.x_pred_px - a.target_px) <= tolerance_px
    tp = int(np.sum(pos & a.active & near))
    fp = int(np.sum(pos & ~(a.active & near)))
    n_active = int(a.active.sum())
    return Confusion(tp=tp, fp=fp, fn=n_active - tp, tn=int(np.sum(~pos & ~a.active)))


def classify_frames(preds, labels, threshold: float, tolerance_px: float = TOLERANCE_PX,
                    image_width: float = DEFAULT_IMAGE_WIDTH) -> Confusion:
    return _counts(align(preds, labels, image_width), threshold, tolerance_px)


def _precision_recall(c: Confusion) -> tuple[float, float]:
    precision = 1.0 if c.tp + c.fp == 0 else c.tp / (c.tp + c.fp)
    return precision, c.tp / (c.tp + c.fn)


def curve_from_aligned(a: Aligned, tolerance_px: float, thresholds) -> list[PRPoint]:
    if not a.active.any():
        raise MetricsError("precision/recall needs at least one active frame")
    out = []
    for th in thresholds:
        p, r = _precision_recall(_counts(a, float(th), tolerance_px))
        out.append(PRPoint(float(th), p, r))
    return out


def precision_recall_curve(preds, labels, tolerance_px: float = TOLERANCE_PX, n_thresholds: int = 101,
                           image_width: float = DEFAULT_IMAGE_WIDTH, thresholds=None) -> list[PRPoint]:
    if thresholds is None:
        thresholds = sigmoid_thresholds(n_thresholds)
    return curve_from_aligned(align(preds, labels, image_width), tolerance_px, thresholds)


def exhaustive_thresholds(preds: Sequence[FramePrediction]) -> np.ndarray:
    """One threshold per distinct positive set: -inf and every unique confidence."""
    return np.concatenate([[-np.inf], np.unique([p.confidence for p in preds])])


def average_precision(curve: Sequence[PRPoint]) -> float:
    """All-points interpolated area under the PR curve."""
    if not curve:
        raise MetricsError("empty PR curve")
    pts = sorted(((p.recall, p.precision) for p in curve))
    r = np.array([q[0] for q in pts])
    p = np.array([q[1] for q in pts])
    env = np.maximum.accumulate(p[::-1])[::-1]
    widths = np.diff(np.concatenate([[0.0], r]))
    return float(np.sum(widths * env))


def f1_score(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def best_f1(curve: Sequence[PRPoint]) -> tuple[float, float, float, float]:
    """(f1, precision, recall, threshold); ties go to the higher threshold."""
    if not curve:
        raise MetricsError("empty PR curve")
    best = max(curve, key=lambda q: (f1_score(q.precision, q.recall), q.threshold))
    return f1_score(best.precision, best.recall), best.precision, best.recall, best.threshold


def _average_distance(a: Aligned, threshold: float) -> float:
    sel = (a.confidence > threshold) & a.active
    if not sel.any():
        raise MetricsError(f"no positive detections on active frames at threshold {threshold}")
    return float(np.mean(np.abs(a.x_pred_px[sel] - a.target_px[sel])))


def average_distance(preds, labels, camera: CameraModel | None = None, threshold: float = 0.5,
                     image_width: float | None = None) -> tuple[float, float]:
    """Mean |error| (px, deg) over positive detections on active frames."""
    camera = camera or build_default_rig().central_camera
    a = align(preds, labels, image_width or camera.image_width_px)
    px = _average_distance(a, threshold)
    return px, pixel_error_to_degrees(camera, px)


def _detection_error(a: Aligned, threshold: float) -> float:
    return float(np.mean((a.confidence > threshold) != a.active))


def detection_error(preds, labels, threshold: float = 0.5) -> float:
    a = align(preds, labels)
    if a.active.size == 0:
        raise MetricsError("no frames")
    return _detection_error(a, threshold)


def evaluate(preds, labels, tolerance_px: float = TOLERANCE_PX, n_thresholds: int = 101,
             camera: CameraModel | None = None, ad_threshold: float = 0.5,
             det_threshold: float = 0.5) -> MetricsReport:
    camera = camera or build_default_rig().central_camera
    a = align(preds, labels, camera.image_width_px)
    curve = curve_from_aligned(a, tolerance_px, sigmoid_thresholds(n_thresholds))
    f1, p, r, th = best_f1(curve)
    try:
        ad_px = _average_distance(a, ad_threshold)
        ad_deg = pixel_error_to_degrees(camera, ad_px)
    except MetricsError:
        ad_px = ad_deg = math.nan
    return MetricsReport(
        ap=average_precision(curve), f1_best=f1, f1_precision=p, f1_recall=r, f1_threshold=th,
        ad_px=ad_px, ad_deg=ad_deg, det_err=_detection_error(a, det_threshold),
        n_frames=int(a.active.size), n_active=int(a.active.sum()), tolerance_px=tolerance_px,
        pr_curve=curve,
    )


def curve_to_csv(curve: Sequence[PRPoint]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["threshold", "precision", "recall"])
    for p in curve:
        w.writerow([repr(p.threshold), repr(p.precision), repr(p.recall)])
    return out.getvalue()


def pr_curve_svg(curves: dict[str, Sequence[PRPoint]], width: int = 480, height: int = 400) -> str:
    """Standalone SVG of one or more PR curves, best-F1 point marked on each."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    m = 50
    pw, ph = width - 2 * m, height - 2 * m

    def xy(r, p):
        return m + r * pw, m + (1 - p) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
             f'<rect x="{m}" y="{m}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        v = k / 5
        x, _ = xy(v, 0)
        _, y = xy(0, v)
        parts.append(f'<text x="{x:.1f}" y="{m + ph + 16}" text-anchor="middle">{v:.1f}</text>')
        parts.append(f'<text x="{m - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    parts.append(f'<text x="{m + pw / 2}" y="{height - 8}" text-anchor="middle">Recall</text>')
    parts.append(f'<text x="14" y="{m + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {m + ph / 2})">Precision</text>')
    for i, (name, curve) in enumerate(curves.items()):
        c = colors[i % len(colors)]
        pts = sorted((q.recall, q.precision) for q in curve)
        path = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(r, p) for r, p in pts))
        parts.append(f'<polyline points="{path}" fill="none" stroke="{c}" stroke-width="2"/>')
        f1, p, r, _ = best_f1(curve)
        bx, by = xy(r, p)
        parts.append(f'<circle cx="{bx:.2f}" cy="{by:.2f}" r="4" fill="{c}"/>')
        parts.append(f'<text x="{m + pw - 8}" y="{m + 16 + 16 * i}" text-anchor="end" fill="{c}">'
                     f'{name} (F1 {100 * f1:.1f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"

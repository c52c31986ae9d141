"""Per-frame ground-truth labels and predictions, and their CSV files."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

LABEL_HEADER = ("frame_index", "camera_id", "active", "x_center_norm", "mouth_x_px")
PREDICTION_HEADER = ("frame_index", "camera_id", "x_pred_norm", "confidence")
FPS = 30


class LabelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FrameLabel:
    frame_index: int
    camera_id: int
    active: bool
    x_center_norm: Optional[float] = None
    mouth_x_px: Optional[float] = None

    def __post_init__(self):
        if not self.active and (self.x_center_norm is not None or self.mouth_x_px is not None):
            raise LabelFormatError("position fields are only allowed on active frames")
        if self.x_center_norm is not None and not 0.0 <= self.x_center_norm <= 1.0:
            raise LabelFormatError(f"x_center_norm {self.x_center_norm} outside [0, 1]")

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame_index, self.camera_id)


@dataclass(frozen=True)
class FramePrediction:
    frame_index: int
    camera_id: int
    x_pred_norm: float
    confidence: float

    def __post_init__(self):
        for name in ("x_pred_norm", "confidence"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise LabelFormatError(f"{name} {v} outside [0, 1]")

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame_index, self.camera_id)


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def labels_to_csv(labels: Iterable[FrameLabel]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(LABEL_HEADER)
    for lab in labels:
        w.writerow([lab.frame_index, lab.camera_id, int(lab.active),
                    _fmt(lab.x_center_norm), _fmt(lab.mouth_x_px)])
    return out.getvalue()


def predictions_to_csv(preds: Iterable[FramePrediction]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(PREDICTION_HEADER)
    for p in preds:
        w.writerow([p.frame_index, p.camera_id, repr(float(p.x_pred_norm)), repr(float(p.confidence))])
    return out.getvalue()


def _rows(text: str, header: tuple[str, ...], source: str):
    reader = csv.reader(io.StringIO(text))
    try:
        first = next(reader)
    except StopIteration:
        raise LabelFormatError(f"{source}: empty file") from None
    if tuple(h.strip() for h in first) != header:
        raise LabelFormatError(f"{source}:1: expected header {','.join(header)}")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise LabelFormatError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        yield lineno, [c.strip() for c in row]


def _opt_float(s: str) -> Optional[float]:
    if s == "":
        return None
    v = float(s)
    if not math.isfinite(v):
        raise ValueError(f"non-finite value {s}")
    return v


def parse_labels(text: str, source: str = "<labels>") -> list[FrameLabel]:
    out = []
    for lineno, (fi, cam, active, xc, mx) in _rows(text, LABEL_HEADER, source):
        try:
            if active not in ("0", "1"):
                raise ValueError(f"active must be 0 or 1, got {active!r}")
            out.append(FrameLabel(int(fi), int(cam), active == "1", _opt_float(xc), _opt_float(mx)))
        except ValueError as exc:
            raise LabelFormatError(f"{source}:{lineno}: {exc}") from None
    return out


def parse_predictions(text: str, source: str = "<predictions>") -> list[FramePrediction]:
    out = []
    for lineno, (fi, cam, x, c) in _rows(text, PREDICTION_HEADER, source):
        try:
            out.append(FramePrediction(int(fi), int(cam), float(x), float(c)))
        except ValueError as exc:
            raise LabelFormatError(f"{source}:{lineno}: {exc}") from None
    return out


def read_labels(path: str | Path) -> list[FrameLabel]:
    return parse_labels(Path(path).read_text(), str(path))


def read_predictions(path: str | Path) -> list[FramePrediction]:
    return parse_predictions(Path(path).read_text(), str(path))

"""Post-processing for the single-pass OCR head.

The head predicts, at two feature-map scales, three anchor boxes per cell.
Each anchor carries 4 regression offsets and 11 category scores
(background + digits 0-9).  This module turns those tensors into digit
boxes, suppresses duplicates, assembles card numbers and expiry dates, and
decides when a zoomed re-run is needed for tiny fonts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAN_LENGTHS = (15, 16)
DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_IOU_THRESHOLD = 0.45
DEFAULT_SMALL_FONT_RATIO = 0.04
LINE_TOLERANCE = 0.6
ZOOM_EXPAND = 1.25

HEAD_MAGIC = b"DDHEAD01"


@dataclass(frozen=True)
class HeadGeometry:
    input_w: int = 600
    input_h: int = 375
    scales: tuple[tuple[int, int], ...] = ((24, 38), (12, 19))  # (rows, cols)
    anchors_per_cell: int = 3
    categories: int = 11
    regression_coords: int = 4
    anchor_height_strides: float = 2.0
    anchor_aspects: tuple[float, ...] = (0.5, 0.65, 0.8)

    def __post_init__(self):
        if len(self.anchor_aspects) != self.anchors_per_cell:
            raise ValueError("one aspect ratio per anchor is required")
        if not self.scales:
            raise ValueError("at least one output scale is required")
        for rows, cols in self.scales:
            if rows < 1 or cols < 1:
                raise ValueError(f"invalid grid {rows}x{cols}")

    @property
    def reg_width(self) -> int:
        return self.anchors_per_cell * self.regression_coords

    @property
    def score_width(self) -> int:
        return self.anchors_per_cell * self.categories

    @property
    def cell_width(self) -> int:
        return self.reg_width + self.score_width

    def stride(self, scale_index: int) -> tuple[float, float]:
        rows, cols = self.scales[scale_index]
        return self.input_w / cols, self.input_h / rows


DEFAULT_GEOMETRY = HeadGeometry()


@dataclass
class ScaleOutput:
    regression: np.ndarray  # (rows, cols, anchors * 4)
    scores: np.ndarray      # (rows, cols, anchors * categories)


@dataclass
class RawHeadOutput:
    scales: list[ScaleOutput]
    # boxes that had to be placed on a non-overlapping anchor when encoding
    warnings: int = 0

    @classmethod
    def background(cls, geom: HeadGeometry = DEFAULT_GEOMETRY) -> "RawHeadOutput":
        out = []
        for rows, cols in geom.scales:
            scores = np.zeros((rows, cols, geom.anchors_per_cell, geom.categories))
            scores[..., 0] = 1.0
            out.append(ScaleOutput(
                regression=np.zeros((rows, cols, geom.reg_width)),
                scores=scores.reshape(rows, cols, geom.score_width),
            ))
        return cls(out)

    def validate(self, geom: HeadGeometry) -> None:
        if len(self.scales) != len(geom.scales):
            raise ValueError(
                f"expected {len(geom.scales)} scales, got {len(self.scales)}")
        for i, (s, (rows, cols)) in enumerate(zip(self.scales, geom.scales)):
            if s.regression.shape != (rows, cols, geom.reg_width):
                raise ValueError(f"scale {i}: regression shape {s.regression.shape}")
            if s.scores.shape != (rows, cols, geom.score_width):
                raise ValueError(f"scale {i}: score shape {s.scores.shape}")


@dataclass(frozen=True)
class DigitBox:
    center_x: float
    center_y: float
    width: float
    height: float
    digit: int
    score: float
    scale_index: int = -1
    cell: tuple[int, int] = (-1, -1)
    anchor: int = -1

    @property
    def x0(self) -> float:
        return self.center_x - self.width / 2

    @property
    def y0(self) -> float:
        return self.center_y - self.height / 2

    @property
    def x1(self) -> float:
        return self.center_x + self.width / 2

    @property
    def y1(self) -> float:
        return self.center_y + self.height / 2


@dataclass
class PanCandidate:
    digits: str
    confidence: float
    boxes: list[DigitBox] = field(default_factory=list)
    luhn: bool = False


def head_output_len(geom: HeadGeometry = DEFAULT_GEOMETRY) -> int:
    """Total number of activations the head emits across all scales."""
    return sum(rows * cols * geom.cell_width for rows, cols in geom.scales)


def anchor_for(geom: HeadGeometry, scale_index: int, row: int, col: int,
               anchor_index: int) -> tuple[float, float, float, float]:
    """Anchor rect as (center_x, center_y, width, height)."""
    if not 0 <= scale_index < len(geom.scales):
        raise IndexError(f"scale index {scale_index} out of range")
    rows, cols = geom.scales[scale_index]
    if not (0 <= row < rows and 0 <= col < cols):
        raise IndexError(f"cell ({row}, {col}) outside {rows}x{cols} grid")
    if not 0 <= anchor_index < geom.anchors_per_cell:
        raise IndexError(f"anchor index {anchor_index} out of range")
    sx, sy = geom.stride(scale_index)
    h = geom.anchor_height_strides * sy
    return ((col + 0.5) * sx, (row + 0.5) * sy, h * geom.anchor_aspects[anchor_index], h)


@lru_cache(maxsize=16)
def anchor_grid(geom: HeadGeometry, scale_index: int) -> np.ndarray:
    """(rows, cols, anchors, 4) array of anchors in center format."""
    rows, cols = geom.scales[scale_index]
    sx, sy = geom.stride(scale_index)
    h = geom.anchor_height_strides * sy
    grid = np.empty((rows, cols, geom.anchors_per_cell, 4))
    grid[..., 0] = ((np.arange(cols) + 0.5) * sx)[None, :, None]
    grid[..., 1] = ((np.arange(rows) + 0.5) * sy)[:, None, None]
    grid[..., 2] = (h * np.asarray(geom.anchor_aspects))[None, None, :]
    grid[..., 3] = h
    grid.setflags(write=False)
    return grid


@lru_cache(maxsize=16)
def flat_anchors(geom: HeadGeometry) -> tuple[np.ndarray, np.ndarray]:
    """All anchors stacked as (N, 4) plus their (scale, row, col, anchor) index."""
    boxes, index = [], []
    for s, (rows, cols) in enumerate(geom.scales):
        boxes.append(anchor_grid(geom, s).reshape(-1, 4))
        r, c, a = np.meshgrid(np.arange(rows), np.arange(cols),
                              np.arange(geom.anchors_per_cell), indexing="ij")
        index.append(np.stack([np.full(r.size, s), r.ravel(), c.ravel(), a.ravel()], 1))
    b = np.concatenate(boxes)
    i = np.concatenate(index)
    b.setflags(write=False)
    i.setflags(write=False)
    return b, i


def _normalized_scores(scores: np.ndarray) -> np.ndarray:
    sums = scores.sum(axis=-1, keepdims=True)
    # a finite row sum means every entry in the row is finite
    if not np.isfinite(sums).all():
        raise ValueError("non-finite values in scores")
    if scores.min() >= 0:
        err = float(np.abs(sums - 1.0).max())
        if err <= 1e-6:
            return scores
        # float32 round-off from tensor files, not logits
        if err <= 1e-3:
            return scores / sums
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _all_finite(a: np.ndarray) -> bool:
    # a finite sum rules out nan/inf without a full boolean pass
    return bool(np.isfinite(a.sum())) or bool(np.isfinite(a).all())


def decode_boxes(out: RawHeadOutput, geom: HeadGeometry = DEFAULT_GEOMETRY,
                 score_threshold: float = DEFAULT_SCORE_THRESHOLD) -> list[DigitBox]:
    out.validate(geom)
    boxes: list[DigitBox] = []
    for s, scale in enumerate(out.scales):
        rows, cols = geom.scales[s]
        if not _all_finite(scale.regression):
            raise ValueError(f"non-finite values in scale {s} regression")
        reg = scale.regression.reshape(rows, cols, geom.anchors_per_cell, 4)
        try:
            sc = _normalized_scores(
                scale.scores.reshape(rows, cols, geom.anchors_per_cell, geom.categories))
        except ValueError:
            raise ValueError(f"non-finite values in scale {s} scores") from None
        # argmax != 0 exactly when some digit beats background (first index wins ties)
        fg = sc[..., 1:].max(axis=-1)
        hit = (fg > sc[..., 0]) & (fg >= score_threshold)
        if not hit.any():
            continue
        digit = sc[hit][:, 1:].argmax(axis=-1)
        score = fg[hit]
        anchors = anchor_grid(geom, s)[hit]
        t = reg[hit]
        cx = anchors[:, 0] + t[:, 0] * anchors[:, 2]
        cy = anchors[:, 1] + t[:, 1] * anchors[:, 3]
        w = anchors[:, 2] * np.exp(t[:, 2])
        h = anchors[:, 3] * np.exp(t[:, 3])
        for k, (r, c, a) in enumerate(zip(*np.nonzero(hit))):
            if not (w[k] > 0 and h[k] > 0):
                continue
            # drop boxes that miss the input frame entirely
            if (cx[k] + w[k] / 2 <= 0 or cx[k] - w[k] / 2 >= geom.input_w
                    or cy[k] + h[k] / 2 <= 0 or cy[k] - h[k] / 2 >= geom.input_h):
                continue
            boxes.append(DigitBox(
                center_x=float(cx[k]), center_y=float(cy[k]),
                width=float(w[k]), height=float(h[k]),
                digit=int(digit[k]), score=float(score[k]),
                scale_index=s, cell=(int(r), int(c)), anchor=int(a),
            ))
    return boxes


def iou(a: DigitBox, b: DigitBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.width * a.height + b.width * b.height - inter)


def nms(boxes: Sequence[DigitBox],
        iou_threshold: float = DEFAULT_IOU_THRESHOLD) -> list[DigitBox]:
    """Greedy class-agnostic non-max suppression.

    Boxes are visited by descending score (ties by center_x, center_y, then
    digit and size so the result never depends on input order); a box survives
    when its IoU with every box already kept is below ``iou_threshold``.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must be in (0, 1)")
    order = sorted(boxes, key=lambda b: (-b.score, b.center_x, b.center_y, b.digit,
                                         b.width, b.height))
    if len(order) < 2:
        return list(order)
    ious = _iou_matrix(order)
    keep = np.zeros(len(order), dtype=bool)
    for i in range(len(order)):
        if not np.any(ious[i, keep] >= iou_threshold):
            keep[i] = True
    return [b for b, k in zip(order, keep) if k]


def _iou_matrix(boxes: Sequence[DigitBox]) -> np.ndarray:
    c = np.array([(b.x0, b.y0, b.x1, b.y1) for b in boxes])
    iw = np.minimum(c[:, None, 2], c[None, :, 2]) - np.maximum(c[:, None, 0], c[None, :, 0])
    ih = np.minimum(c[:, None, 3], c[None, :, 3]) - np.maximum(c[:, None, 1], c[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = np.array([b.width * b.height for b in boxes])
    return inter / (area[:, None] + area[None, :] - inter)


def _box_key(b: DigitBox):
    return (b.center_y, b.center_x, b.digit, -b.score, b.width, b.height)


def group_lines(boxes: Iterable[DigitBox]) -> list[list[DigitBox]]:
    """Cluster boxes into text lines by vertical center.

    A box joins the current line while its center is within
    ``LINE_TOLERANCE`` x median box height of the line's mean center.
    Lines are returned top to bottom, each sorted left to right.
    """
    ordered = sorted(boxes, key=_box_key)
    if not ordered:
        return []
    tol = LINE_TOLERANCE * float(np.median([b.height for b in ordered]))
    lines: list[list[DigitBox]] = []
    current: list[DigitBox] = []
    mean_y = 0.0
    for b in ordered:
        if current and abs(b.center_y - mean_y) <= tol:
            current.append(b)
            mean_y += (b.center_y - mean_y) / len(current)
        else:
            if current:
                lines.append(current)
            current, mean_y = [b], b.center_y
    lines.append(current)
    return [sorted(line, key=lambda b: (b.center_x, b.center_y, b.digit)) for line in lines]


def _line_score(line: list[DigitBox]) -> float:
    return sum(b.score for b in line) / len(line)


def _pan_line(lines: list[list[DigitBox]]) -> list[DigitBox] | None:
    if not lines:
        return None
    # most digits, then higher mean score, then the upper line
    return max(lines, key=lambda ln: (len(ln), _line_score(ln), -ln[0].center_y))


def assemble_pan(boxes: Sequence[DigitBox]) -> PanCandidate | None:
    line = _pan_line(group_lines(boxes))
    if line is None or len(line) not in PAN_LENGTHS:
        return None
    digits = "".join(str(b.digit) for b in line)
    return PanCandidate(digits=digits, confidence=_line_score(line),
                        boxes=list(line), luhn=luhn_valid(digits))


def assemble_expiry(boxes: Sequence[DigitBox]) -> tuple[int, int] | None:
    """Read MMYY from a four-digit line that is not the card-number line.

    When several lines qualify the highest-confidence valid one wins.
    """
    lines = group_lines(boxes)
    pan = _pan_line(lines)
    best = None
    for line in lines:
        if len(line) != 4:
            continue
        if pan is not None and line is pan and len(pan) in PAN_LENGTHS:
            continue
        month = line[0].digit * 10 + line[1].digit
        year = line[2].digit * 10 + line[3].digit
        if not 1 <= month <= 12:
            continue
        score = _line_score(line)
        if best is None or score > best[0]:
            best = (score, (month, year))
    return None if best is None else best[1]


def _digit_values(digits: str) -> list[int]:
    if not isinstance(digits, str) or not digits:
        raise ValueError("digit string must be non-empty")
    if not all("0" <= ch <= "9" for ch in digits):
        raise ValueError(f"non-digit characters in {digits!r}")
    return [ord(ch) - 48 for ch in digits]


def luhn_valid(digits: str) -> bool:
    total = 0
    for i, d in enumerate(reversed(_digit_values(digits))):
        if i % 2:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def luhn_check_digit(prefix: str) -> int:
    values = _digit_values(prefix)
    if len(values) not in (14, 15):
        raise ValueError("prefix must have 14 or 15 digits")
    # the check digit sits at position 0 from the right, so the prefix's
    # rightmost digit is doubled
    total = 0
    for i, d in enumerate(reversed(values)):
        if i % 2 == 0:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return (10 - total % 10) % 10


def needs_zoom(boxes: Sequence[DigitBox], geom: HeadGeometry = DEFAULT_GEOMETRY,
               small_font_ratio: float = DEFAULT_SMALL_FONT_RATIO
               ) -> tuple[float, float, float, float] | None:
    """Crop rect (x, y, w, h) for a zoomed re-run, or None.

    Triggered only when digits are small relative to the input height and no
    Luhn-valid number could be assembled.  The crop covers every box, is
    expanded by 25%, keeps the input aspect ratio and stays inside the frame.
    """
    if not boxes:
        return None
    median_h = float(np.median([b.height for b in boxes]))
    if median_h / geom.input_h >= small_font_ratio:
        return None
    pan = assemble_pan(boxes)
    if pan is not None and pan.luhn:
        return None

    x0 = max(0.0, min(b.x0 for b in boxes))
    y0 = max(0.0, min(b.y0 for b in boxes))
    x1 = min(float(geom.input_w), max(b.x1 for b in boxes))
    y1 = min(float(geom.input_h), max(b.y1 for b in boxes))
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    w, h = (x1 - x0) * ZOOM_EXPAND, (y1 - y0) * ZOOM_EXPAND
    aspect = geom.input_w / geom.input_h
    if w / h < aspect:
        w = h * aspect
    else:
        h = w / aspect
    if w > geom.input_w:
        w, h = float(geom.input_w), float(geom.input_h)
    x = min(max(cx - w / 2, 0.0), geom.input_w - w)
    y = min(max(cy - h / 2, 0.0), geom.input_h - h)
    return (x, y, w, h)


def read_pipeline(out: RawHeadOutput, geom: HeadGeometry = DEFAULT_GEOMETRY,
                  score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                  iou_threshold: float = DEFAULT_IOU_THRESHOLD):
    """decode -> nms -> assemble; returns (boxes, pan candidate, expiry)."""
    boxes = nms(decode_boxes(out, geom, score_threshold), iou_threshold)
    return boxes, assemble_pan(boxes), assemble_expiry(boxes)


# -- DDHEAD01 tensor files ---------------------------------------------------

def write_head(path: str | Path, out: RawHeadOutput) -> None:
    """Write ``out`` as a DDHEAD01 file.

    Layout: magic, u32 scale count, (u32 rows, u32 cols) per scale, then per
    scale the row-major float32 regression tensor followed by the score
    tensor.  All integers little-endian.
    """
    parts = [HEAD_MAGIC, struct.pack("<I", len(out.scales))]
    for s in out.scales:
        rows, cols = s.regression.shape[:2]
        parts.append(struct.pack("<II", rows, cols))
    for s in out.scales:
        parts.append(np.ascontiguousarray(s.regression, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(s.scores, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_head(path: str | Path, geom: HeadGeometry = DEFAULT_GEOMETRY) -> RawHeadOutput:
    data = Path(path).read_bytes()
    if data[:8] != HEAD_MAGIC:
        raise ValueError(f"{path}: not a DDHEAD01 file")
    (count,) = struct.unpack_from("<I", data, 8)
    pos = 12
    dims = []
    for _ in range(count):
        dims.append(struct.unpack_from("<II", data, pos))
        pos += 8
    scales = []
    for rows, cols in dims:
        n_reg = rows * cols * geom.reg_width
        n_sc = rows * cols * geom.score_width
        need = pos + 4 * (n_reg + n_sc)
        if len(data) < need:
            raise ValueError(f"{path}: truncated tensor data")
        reg = np.frombuffer(data, "<f4", n_reg, pos).reshape(rows, cols, geom.reg_width)
        pos += 4 * n_reg
        sc = np.frombuffer(data, "<f4", n_sc, pos).reshape(rows, cols, geom.score_width)
        pos += 4 * n_sc
        scales.append(ScaleOutput(reg.astype(np.float64), sc.astype(np.float64)))
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return RawHeadOutput(scales)


def box_to_dict(b: DigitBox) -> dict:
    return {
        "center_x": round(b.center_x, 4), "center_y": round(b.center_y, 4),
        "width": round(b.width, 4), "height": round(b.height, 4),
        "digit": b.digit, "score": round(b.score, 4),
        "scale": b.scale_index, "cell": list(b.cell), "anchor": b.anchor,
    }

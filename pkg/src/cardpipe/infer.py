"""Inference backends for the four sub-task models plus device latency profiles.

Two backends are provided.  :class:`OracleBackend` derives every model output
from the frame's ground truth with independently injectable error rates, so
pipeline redundancy can be measured.  :class:`TemplateBackend` reads digits
from actual pixels by normalized cross-correlation against the renderer's own
glyphs and defers the other three models to an oracle.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import glyphs
from .cardsynth import FRAME_H, FRAME_W, LOGO_IDS, MEDIA, FrameTruth, check_raster
from .ocrdecode import DEFAULT_GEOMETRY, HeadGeometry, RawHeadOutput, flat_anchors

log = logging.getLogger(__name__)

MODELS = ("ocr", "card_detect", "fake_media", "tamper")
DETECT_CATEGORIES = ("number_side", "non_number_side", "background")

TRUTH_SCORE = 0.95
MISREAD_SCORE = 0.6     # score on the wrong digit after a corruption
MISREAD_TRUE_SCORE = 0.35
LABEL_CONFIDENCE = 0.9
NCC_THRESHOLD = 0.7
LATENCY_JITTER = 0.05


@dataclass(frozen=True)
class CardDetectLabel:
    category: str
    confidence: float
    distribution: tuple[tuple[str, float], ...] = ()


@dataclass(frozen=True)
class FakeMediaLabel:
    category: str
    confidence: float


@dataclass(frozen=True)
class TamperObservation:
    objects: tuple[tuple[str, float, tuple[int, int, int, int]], ...] = ()

    @property
    def logo_ids(self) -> list[str]:
        return [o[0] for o in self.objects]


@dataclass(frozen=True)
class BackendConfig:
    digit_error_rate: float = 0.0
    detect_error_rate: float = 0.0
    media_error_rate: float = 0.0
    tamper_error_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("digit_error_rate", "detect_error_rate", "media_error_rate",
                     "tamper_error_rate"):
            v = getattr(self, name)
            if not 0 <= v < 1:
                raise ValueError(f"{name} must be in [0, 1), got {v}")

    @classmethod
    def from_rates(cls, rates: Sequence[float], seed: int = 0) -> "BackendConfig":
        if len(rates) != 4:
            raise ValueError("expected four error rates: digit, detect, media, tamper")
        return cls(*map(float, rates), seed=seed)


# -- device profiles ------------------------------------------------------------

@dataclass(frozen=True)
class DeviceProfile:
    name: str
    ocr_ms: float
    card_detect_ms: float
    fake_media_ms: float
    tamper_ms: float
    workers: int = 1
    camera_fps: float = 30.0
    # aggregate throughput, in single-inference units, when several
    # inferences run at once (processor sharing); 1.0 means fully serialized
    parallel_speedup: float = 1.0
    # extra stall before the next camera frame can be grabbed in blocking mode
    feed_resume_ms: float = 0.0
    calibration: str = ""

    def __post_init__(self):
        if min(self.ocr_ms, self.card_detect_ms, self.fake_media_ms, self.tamper_ms) <= 0:
            raise ValueError(f"{self.name}: latencies must be positive")
        if self.workers < 1:
            raise ValueError(f"{self.name}: workers must be >= 1")
        if self.camera_fps <= 0:
            raise ValueError(f"{self.name}: camera_fps must be positive")
        if self.parallel_speedup < 1:
            raise ValueError(f"{self.name}: parallel_speedup must be >= 1")
        if self.feed_resume_ms < 0:
            raise ValueError(f"{self.name}: feed_resume_ms must be >= 0")

    def latency(self, model: str) -> float:
        try:
            return {"ocr": self.ocr_ms, "card_detect": self.card_detect_ms,
                    "fake_media": self.fake_media_ms, "tamper": self.tamper_ms}[model]
        except KeyError:
            raise ValueError(f"unknown model {model!r}; expected one of {MODELS}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        return cls(
            name=d["name"], ocr_ms=float(d["ocr_ms"]), card_detect_ms=float(d["card_detect_ms"]),
            fake_media_ms=float(d["fake_media_ms"]), tamper_ms=float(d["tamper_ms"]),
            workers=int(d.get("workers", 1)), camera_fps=float(d.get("camera_fps", 30.0)),
            parallel_speedup=float(d.get("parallel_speedup", 1.0)),
            feed_resume_ms=float(d.get("feed_resume_ms", 0.0)),
            calibration=str(d.get("calibration", "")),
        )

    def to_dict(self) -> dict:
        return asdict(self)


def _profiles_from_json(text: str) -> dict[str, DeviceProfile]:
    data = json.loads(text)
    items = data["profiles"] if isinstance(data, dict) else data
    return {p.name: p for p in map(DeviceProfile.from_dict, items)}


def load_profiles(path: str | Path | None = None) -> dict[str, DeviceProfile]:
    """Profiles from a JSON file, or the bundled calibrated set when ``path`` is None."""
    if path is None:
        text = resources.files("cardpipe").joinpath("data/devices.json").read_text()
    else:
        text = Path(path).read_text()
    return _profiles_from_json(text)


def find_profile(name_or_path: str, search: Iterable[str | Path] = ()) -> DeviceProfile:
    """Resolve a profile by file path or name.

    Names are looked up in ``search`` directories, then ``$CARDPIPE_PROFILE_DIR``,
    then the bundled profiles.
    """
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        profiles = load_profiles(p)
        if len(profiles) != 1:
            raise ValueError(f"{p} holds {len(profiles)} profiles; pass a name instead")
        return next(iter(profiles.values()))
    dirs = [Path(d) for d in search]
    env = os.environ.get("CARDPIPE_PROFILE_DIR")
    if env:
        dirs.extend(Path(d) for d in env.split(os.pathsep) if d)
    for d in dirs:
        for f in sorted(d.glob("*.json")):
            profiles = load_profiles(f)
            if name_or_path in profiles:
                return profiles[name_or_path]
    bundled = load_profiles()
    if name_or_path in bundled:
        return bundled[name_or_path]
    raise KeyError(f"unknown device profile {name_or_path!r}")


def simulate_latency(profile: DeviceProfile, model: str,
                     rng: np.random.Generator | int | None = None, jitter: bool = True) -> float:
    """Model latency in ms with uniform +-5% seeded jitter."""
    base = profile.latency(model)
    if not jitter:
        return base
    rng = np.random.default_rng(rng)
    return base * (1.0 + rng.uniform(-LATENCY_JITTER, LATENCY_JITTER))


# -- head encoding ----------------------------------------------------------------

def _iou_table(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """IoU of (M, 4) against (N, 4) center-format boxes."""
    b0 = boxes[:, None, :2] - boxes[:, None, 2:] / 2
    b1 = boxes[:, None, :2] + boxes[:, None, 2:] / 2
    a0 = anchors[None, :, :2] - anchors[None, :, 2:] / 2
    a1 = anchors[None, :, :2] + anchors[None, :, 2:] / 2
    wh = np.clip(np.minimum(b1, a1) - np.maximum(b0, a0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_b = boxes[:, 2] * boxes[:, 3]
    area_a = anchors[:, 2] * anchors[:, 3]
    return inter / (area_b[:, None] + area_a[None, :] - inter)


def assign_anchors(boxes: np.ndarray, geom: HeadGeometry = DEFAULT_GEOMETRY
                   ) -> tuple[list[int], int]:
    """Give each center-format box its own anchor, best IoU first.

    Boxes are served in the order given.  An anchor is used at most once
    (one digit per activation).  A box that overlaps no free anchor falls
    back to the nearest free anchor center; those fallbacks are counted.
    """
    anchors, _ = flat_anchors(geom)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    # anchors outside the boxes' joint extent have zero IoU with all of them
    lo = (boxes[:, :2] - boxes[:, 2:] / 2).min(axis=0)
    hi = (boxes[:, :2] + boxes[:, 2:] / 2).max(axis=0)
    near = np.all((anchors[:, :2] + anchors[:, 2:] / 2 > lo)
                  & (anchors[:, :2] - anchors[:, 2:] / 2 < hi), axis=1)
    cand = np.flatnonzero(near)
    table = _iou_table(boxes, anchors[cand])
    used = np.zeros(len(anchors), dtype=bool)
    picks, fallbacks = [], 0
    for k, box in enumerate(boxes):
        ious = np.where(used[cand], -1.0, table[k])
        i = int(np.argmax(ious)) if len(cand) else -1
        if i < 0 or ious[i] <= 0:
            d2 = (anchors[:, 0] - box[0]) ** 2 + (anchors[:, 1] - box[1]) ** 2
            d2[used] = np.inf
            j = int(np.argmin(d2))
            fallbacks += 1
        else:
            j = int(cand[i])
        used[j] = True
        picks.append(j)
    return picks, fallbacks


@lru_cache(maxsize=4096)
def _cached_assignment(centers: tuple[tuple[float, float, float, float], ...],
                       geom: HeadGeometry) -> tuple[tuple[int, ...], int]:
    picks, fallbacks = assign_anchors(np.array(centers, dtype=np.float64), geom)
    return tuple(picks), fallbacks


def encode_head(boxes: Sequence[tuple[float, float, float, float]], score_rows: Sequence[np.ndarray],
                geom: HeadGeometry = DEFAULT_GEOMETRY) -> RawHeadOutput:
    """Inverse of the regression decode: write each (x, y, w, h) corner-format
    box and its 11-way score row onto its assigned anchor."""
    out = RawHeadOutput.background(geom)
    if not boxes:
        return out
    centers = np.array([(x + w / 2, y + h / 2, w, h) for x, y, w, h in boxes], dtype=np.float64)
    order = np.lexsort((centers[:, 1], centers[:, 0]))
    # sessions repeat the same layout frame after frame
    picks, fallbacks = _cached_assignment(tuple(map(tuple, centers[order].tolist())), geom)
    anchors, index = flat_anchors(geom)
    picks = np.asarray(picks)
    anc = anchors[picks]
    box = centers[order]
    reg = np.concatenate([(box[:, :2] - anc[:, :2]) / anc[:, 2:],
                          np.log(box[:, 2:] / anc[:, 2:])], axis=1)
    rows = np.asarray(score_rows, dtype=np.float64)[order]
    idx = index[picks]
    cats, per = geom.categories, geom.anchors_per_cell
    for s, scale in enumerate(out.scales):
        sel = idx[:, 0] == s
        if not sel.any():
            continue
        r, c, a = idx[sel, 1], idx[sel, 2], idx[sel, 3]
        rows_, cols_ = scale.regression.shape[:2]
        scale.regression.reshape(rows_, cols_, per, 4)[r, c, a] = reg[sel]
        scale.scores.reshape(rows_, cols_, per, cats)[r, c, a] = rows[sel]
    out.warnings = fallbacks
    return out


def digit_scores(digit: int, p: float, categories: int = 11) -> np.ndarray:
    row = np.full(categories, (1.0 - p) / (categories - 1))
    row[digit + 1] = p
    return row


def _misread_scores(true_digit: int, read_digit: int, categories: int = 11) -> np.ndarray:
    rest = (1.0 - MISREAD_SCORE - MISREAD_TRUE_SCORE) / (categories - 2)
    row = np.full(categories, rest)
    row[read_digit + 1] = MISREAD_SCORE
    row[true_digit + 1] = MISREAD_TRUE_SCORE
    return row


# -- oracle models ------------------------------------------------------------------

def oracle_ocr(truth: FrameTruth, geom: HeadGeometry = DEFAULT_GEOMETRY,
               cfg: BackendConfig = BackendConfig(), rng=None) -> RawHeadOutput:
    """Head output that decodes to the truth digits, each misread with
    probability ``cfg.digit_error_rate``."""
    rng = np.random.default_rng(rng)
    items = [*truth.digit_boxes, *truth.expiry_boxes]
    if not items:
        return RawHeadOutput.background(geom)
    eps = cfg.digit_error_rate
    flips = rng.random(len(items)) < eps if eps > 0 else np.zeros(len(items), dtype=bool)
    wrong = rng.integers(1, 10, len(items))
    rows = []
    for (rect, d), flip, off in zip(items, flips, wrong):
        if flip:
            rows.append(_misread_scores(d, (d + int(off)) % 10, geom.categories))
        else:
            rows.append(digit_scores(d, TRUTH_SCORE, geom.categories))
    return encode_head([rect for rect, _ in items], rows, geom)


def _true_detect_category(truth: FrameTruth) -> str:
    if not truth.centered:
        return "background"
    return "number_side" if truth.side == "number" else "non_number_side"


def oracle_card_detect(truth: FrameTruth, cfg: BackendConfig = BackendConfig(),
                       rng=None) -> CardDetectLabel:
    rng = np.random.default_rng(rng)
    category = _true_detect_category(truth)
    if cfg.detect_error_rate > 0 and rng.random() < cfg.detect_error_rate:
        others = [c for c in DETECT_CATEGORIES if c != category]
        category = others[int(rng.integers(len(others)))]
    rest = (1.0 - LABEL_CONFIDENCE) / (len(DETECT_CATEGORIES) - 1)
    dist = tuple((c, LABEL_CONFIDENCE if c == category else rest) for c in DETECT_CATEGORIES)
    return CardDetectLabel(category, LABEL_CONFIDENCE, dist)


def oracle_fake_media(truth: FrameTruth, cfg: BackendConfig = BackendConfig(),
                      rng=None) -> FakeMediaLabel:
    rng = np.random.default_rng(rng)
    category = truth.media
    if cfg.media_error_rate > 0 and rng.random() < cfg.media_error_rate:
        others = [m for m in MEDIA if m != category]
        category = others[int(rng.integers(len(others)))]
    return FakeMediaLabel(category, LABEL_CONFIDENCE)


def oracle_tamper(truth: FrameTruth, cfg: BackendConfig = BackendConfig(),
                  rng=None) -> TamperObservation:
    """Observed logos; a corruption drops or swaps exactly one of them
    (or adds a spurious one when the side carries no logo)."""
    rng = np.random.default_rng(rng)
    objects = [(lid, LABEL_CONFIDENCE, rect) for lid, rect in truth.logo_marks]
    if cfg.tamper_error_rate > 0 and rng.random() < cfg.tamper_error_rate:
        if not objects:
            lid = LOGO_IDS[int(rng.integers(len(LOGO_IDS)))]
            objects.append((lid, LABEL_CONFIDENCE, (0, 0, 1, 1)))
        else:
            k = int(rng.integers(len(objects)))
            if rng.random() < 0.5:
                del objects[k]
            else:
                lid, conf, rect = objects[k]
                others = [x for x in LOGO_IDS if x != lid]
                objects[k] = (others[int(rng.integers(len(others)))], conf, rect)
    return TamperObservation(tuple(objects))


# -- template matching backend ---------------------------------------------------

@lru_cache(maxsize=2048)
def _template_stack(h: int, w: int) -> np.ndarray:
    """(10, h*w) zero-mean, unit-norm ink templates."""
    t = np.stack([m.astype(np.float64).ravel() for m in glyphs.templates(h, w)])
    t -= t.mean(axis=1, keepdims=True)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    t.setflags(write=False)
    return t


def find_digits(frame: np.ndarray, threshold: float = NCC_THRESHOLD
                ) -> list[tuple[tuple[int, int, int, int], int, float]]:
    """Locate and read glyphs by normalized cross-correlation.

    Dark connected components with digit-like proportions are candidate
    glyph positions; each of the ten templates is slid over a +-1 px window
    around the candidate at the candidate's size and the best correlation
    above ``threshold`` wins.
    """
    check_raster(frame)
    gray = frame.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    lo, mid = np.percentile(gray, [0.05, 50])
    if mid - lo < 40:
        return []
    ink = gray < (lo + mid) / 2
    labels, _ = ndimage.label(ink, structure=np.ones((3, 3), dtype=bool))
    darkness = -gray
    found = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        y0, x0 = sl[0].start, sl[1].start
        h, w = sl[0].stop - y0, sl[1].stop - x0
        if h < glyphs.GLYPH_ROWS or not 0.4 <= w / h <= 0.8:
            continue
        tmpl = _template_stack(h, w)
        best = (-1.0, 0, (x0, y0))
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                py, px = y0 + dy, x0 + dx
                if py < 0 or px < 0 or py + h > FRAME_H or px + w > FRAME_W:
                    continue
                patch = darkness[py:py + h, px:px + w].ravel()
                patch = patch - patch.mean()
                norm = np.linalg.norm(patch)
                if norm == 0:
                    continue
                scores = tmpl @ (patch / norm)
                d = int(np.argmax(scores))
                if scores[d] > best[0]:
                    best = (float(scores[d]), d, (px, py))
        if best[0] > threshold:
            (px, py) = best[2]
            # rounding can push a perfect match a hair above 1
            found.append(((px, py, w, h), best[1], min(best[0], 1.0)))
    return found


def template_recognize(frame: np.ndarray, geom: HeadGeometry = DEFAULT_GEOMETRY) -> RawHeadOutput:
    found = find_digits(frame)
    return encode_head([r for r, _, _ in found],
                       [digit_scores(d, s, geom.categories) for _, d, s in found], geom)


# -- zoom ---------------------------------------------------------------------------

def zoom_truth(truth: FrameTruth, rect: tuple[float, float, float, float]) -> FrameTruth:
    """Truth of the frame cropped to ``rect`` and rescaled to the full input."""
    x, y, w, h = rect
    sx, sy = FRAME_W / w, FRAME_H / h

    def remap(items):
        out = []
        for (bx, by, bw, bh), d in items:
            nx, ny = (bx - x) * sx, (by - y) * sy
            nw, nh = bw * sx, bh * sy
            if nx >= 0 and ny >= 0 and nx + nw <= FRAME_W and ny + nh <= FRAME_H:
                out.append(((nx, ny, nw, nh), d))
        return tuple(out)

    return replace(truth, digit_boxes=remap(truth.digit_boxes),
                   expiry_boxes=remap(truth.expiry_boxes), logo_marks=())


def zoom_frame(frame: np.ndarray, rect: tuple[float, float, float, float]) -> np.ndarray:
    """Crop ``rect`` out of a raster and resize it back to 600x375."""
    check_raster(frame)
    x, y, w, h = (int(round(v)) for v in rect)
    crop = frame[max(0, y):y + h, max(0, x):x + w]
    img = Image.fromarray(crop).resize((FRAME_W, FRAME_H), Image.NEAREST)
    return np.asarray(img, dtype=np.uint8)


@dataclass(frozen=True)
class ZoomedFrame:
    """Frame-like view of a zoomed crop for backend calls."""

    source: object
    rect: tuple[float, float, float, float]

    @property
    def truth(self) -> FrameTruth:
        return zoom_truth(self.source.truth, self.rect)

    @property
    def raster(self) -> np.ndarray:
        return zoom_frame(self.source.raster, self.rect)


# -- backend objects -----------------------------------------------------------------

class FrameLike(Protocol):
    truth: FrameTruth
    raster: np.ndarray


class Backends(Protocol):
    def ocr(self, frame: FrameLike, seed: int) -> RawHeadOutput: ...
    def card_detect(self, frame: FrameLike, seed: int) -> CardDetectLabel: ...
    def fake_media(self, frame: FrameLike, seed: int) -> FakeMediaLabel: ...
    def tamper(self, frame: FrameLike, seed: int) -> TamperObservation: ...


@dataclass(frozen=True)
class OracleBackend:
    cfg: BackendConfig = field(default_factory=BackendConfig)
    geom: HeadGeometry = DEFAULT_GEOMETRY
    name = "oracle"

    def _rng(self, seed: int, model: str) -> np.random.Generator:
        return np.random.default_rng([self.cfg.seed, seed, MODELS.index(model)])

    def ocr(self, frame, seed):
        return oracle_ocr(frame.truth, self.geom, self.cfg, self._rng(seed, "ocr"))

    def card_detect(self, frame, seed):
        return oracle_card_detect(frame.truth, self.cfg, self._rng(seed, "card_detect"))

    def fake_media(self, frame, seed):
        return oracle_fake_media(frame.truth, self.cfg, self._rng(seed, "fake_media"))

    def tamper(self, frame, seed):
        return oracle_tamper(frame.truth, self.cfg, self._rng(seed, "tamper"))


@dataclass(frozen=True)
class TemplateBackend:
    """Pixel-reading OCR; the remaining models come from ``fallback``."""

    fallback: OracleBackend = field(default_factory=OracleBackend)
    geom: HeadGeometry = DEFAULT_GEOMETRY
    name = "template"

    def ocr(self, frame, seed):
        return template_recognize(frame.raster, self.geom)

    def card_detect(self, frame, seed):
        return self.fallback.card_detect(frame, seed)

    def fake_media(self, frame, seed):
        return self.fallback.fake_media(frame, seed)

    def tamper(self, frame, seed):
        return self.fallback.tamper(frame, seed)

"""Procedural card frames and scan sessions with exact ground truth.

Cards are drawn straight into a 600x375 RGB frame: a flat card body,
solid rounded-square logos and bitmap digits from :mod:`cardpipe.glyphs`.
Annotation boxes are computed by the same layout code that places the
glyphs, so they match the rendered ink exactly.  Media artifacts, blur and
noise are applied afterwards and never move the annotations.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from . import glyphs
from .ocrdecode import luhn_check_digit, luhn_valid

log = logging.getLogger(__name__)

FRAME_W, FRAME_H = 600, 375

QUAD = "quad-groups-4-4-4-4"
AMEX = "amex-4-6-5"
LAYOUT_GROUPS = {QUAD: (4, 4, 4, 4), AMEX: (4, 6, 5)}
FONT_STYLES = ("flat", "embossed")
LOGO_IDS = ("visa", "mastercard", "amex", "discover", "bank_a", "bank_b", "bank_c")
NETWORK_LOGOS = ("visa", "mastercard", "amex", "discover")
BANK_LOGOS = ("bank_a", "bank_b", "bank_c")
SIDES = ("number", "non_number")
MEDIA = ("physical", "screen", "paper", "cardboard")

DEFAULT_GIVE_UP_MS = 16_000
DEFAULT_GIVE_UP_TWO_SIDED_MS = 21_000

# layout constants, fractions of the card rect
PAN_LEFT = 0.07
PAN_CENTER_Y = 0.56
PAN_MAX_WIDTH = 0.86
EXPIRY_LEFT = 0.42
EXPIRY_OFFSET = 1.8   # expiry line center below the PAN center, in glyph heights
EXPIRY_SCALE = 0.7
SCANLINE_PERIOD = 4
SCANLINE_DEPTH = 0.15

LOGO_COLORS = {
    "visa": (26, 31, 113),
    "mastercard": (235, 0, 27),
    "amex": (46, 119, 187),
    "discover": (255, 96, 0),
    "bank_a": (0, 120, 60),
    "bank_b": (120, 0, 120),
    "bank_c": (90, 90, 90),
}

Rect = tuple[int, int, int, int]  # x, y, w, h in frame pixels


@dataclass(frozen=True)
class LogoMark:
    logo_id: str
    position: tuple[float, float, float, float]  # normalized x, y, w, h on the card

    def __post_init__(self):
        if self.logo_id not in LOGO_IDS:
            raise ValueError(f"unknown logo id {self.logo_id!r}")
        x, y, w, h = self.position
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > 1 or y + h > 1:
            raise ValueError(f"logo position {self.position} outside card bounds")


def _glyph_metrics(height: int) -> tuple[int, int, int, int]:
    """(glyph height, width, inter-digit gap, inter-group gap)."""
    w = glyphs.glyph_width(height)
    gap = max(1, round(0.2 * w))
    return height, w, gap, max(gap + 1, round(0.6 * w))


def pan_line_width(layout: str, digit_height: int) -> int:
    groups = LAYOUT_GROUPS[layout]
    _, w, gap, ggap = _glyph_metrics(digit_height)
    n = sum(groups)
    return n * w + (n - len(groups)) * gap + (len(groups) - 1) * ggap


@dataclass(frozen=True)
class CardSpec:
    pan: str
    layout: str = QUAD
    font_style: str = "flat"
    digit_height_px: int = 28
    expiry: tuple[int, int] | None = None
    number_side_logos: tuple[LogoMark, ...] = ()
    back_side_logos: tuple[LogoMark, ...] = ()

    def __post_init__(self):
        if self.layout not in LAYOUT_GROUPS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.font_style not in FONT_STYLES:
            raise ValueError(f"unknown font style {self.font_style!r}")
        if len(self.pan) != sum(LAYOUT_GROUPS[self.layout]):
            raise ValueError(f"{self.layout} needs a {sum(LAYOUT_GROUPS[self.layout])}-digit PAN")
        if not luhn_valid(self.pan):
            raise ValueError("PAN fails the Luhn checksum")
        if not 8 <= self.digit_height_px <= 80:
            raise ValueError("digit_height_px must be in [8, 80]")
        if pan_line_width(self.layout, self.digit_height_px) > PAN_MAX_WIDTH * FRAME_W:
            raise ValueError(
                f"digit height {self.digit_height_px}px does not fit a {self.layout} line")
        if self.expiry is not None:
            month, year = self.expiry
            if not (1 <= month <= 12 and 0 <= year <= 99):
                raise ValueError(f"invalid expiry {self.expiry}")
        object.__setattr__(self, "number_side_logos", tuple(self.number_side_logos))
        object.__setattr__(self, "back_side_logos", tuple(self.back_side_logos))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CardSpec":
        return cls(
            pan=d["pan"], layout=d["layout"], font_style=d["font_style"],
            digit_height_px=int(d["digit_height_px"]),
            expiry=tuple(d["expiry"]) if d.get("expiry") is not None else None,
            number_side_logos=tuple(LogoMark(m["logo_id"], tuple(m["position"]))
                                    for m in d.get("number_side_logos", ())),
            back_side_logos=tuple(LogoMark(m["logo_id"], tuple(m["position"]))
                                  for m in d.get("back_side_logos", ())),
        )


@dataclass(frozen=True)
class SceneSpec:
    side: str
    card_rect: tuple[int, int, int, int]
    centered: bool
    media: str = "physical"
    blur_sigma: float = 0.0
    noise_amp: float = 0.0

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"unknown side {self.side!r}")
        if self.media not in MEDIA:
            raise ValueError(f"unknown media {self.media!r}")
        if self.blur_sigma < 0 or self.noise_amp < 0:
            raise ValueError("blur and noise must be non-negative")
        x, y, w, h = self.card_rect
        if w <= 0 or h <= 0:
            raise ValueError(f"degenerate card rect {self.card_rect}")
        if self.centered:
            cx, cy = x + w / 2, y + h / 2
            if (abs(cx - FRAME_W / 2) > 0.1 * FRAME_W or abs(cy - FRAME_H / 2) > 0.1 * FRAME_H
                    or w < 0.4 * FRAME_W):
                raise ValueError("centered scene needs the card near the frame center "
                                 "and at least 40% of the frame width")


@dataclass(frozen=True)
class FrameTruth:
    digit_boxes: tuple[tuple[Rect, int], ...]
    side: str
    centered: bool
    media: str
    logo_marks: tuple[tuple[str, Rect], ...]
    session_pan: str
    expiry_boxes: tuple[tuple[Rect, int], ...] = ()

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "centered": self.centered,
            "media": self.media,
            "digit_boxes": [[*r, d] for r, d in self.digit_boxes],
            "expiry_boxes": [[*r, d] for r, d in self.expiry_boxes],
            "logo_marks": [[lid, *r] for lid, r in self.logo_marks],
        }

    @classmethod
    def from_dict(cls, d: dict, session_pan: str) -> "FrameTruth":
        return cls(
            digit_boxes=tuple((tuple(b[:4]), b[4]) for b in d["digit_boxes"]),
            side=d["side"], centered=d["centered"], media=d["media"],
            logo_marks=tuple((m[0], tuple(m[1:5])) for m in d["logo_marks"]),
            session_pan=session_pan,
            expiry_boxes=tuple((tuple(b[:4]), b[4]) for b in d.get("expiry_boxes", ())),
        )


# -- layout ------------------------------------------------------------------

def _clip(rect: Rect) -> Rect | None:
    x, y, w, h = rect
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, FRAME_W), min(y + h, FRAME_H)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def _line(digits: str, left: int, center_y: float, height: int,
          groups: Sequence[int]) -> list[tuple[Rect, int]]:
    _, w, gap, ggap = _glyph_metrics(height)
    top = int(round(center_y - height / 2))
    out = []
    x = left
    i = 0
    for g, size in enumerate(groups):
        if g:
            x += ggap - gap
        for _ in range(size):
            out.append(((x, top, w, height), int(digits[i])))
            x += w + gap
            i += 1
    return out


def _layout(spec: CardSpec, scene: SceneSpec):
    """Unclipped glyph and logo placement in frame pixels."""
    cx, cy, cw, ch = scene.card_rect
    gh = max(1, int(round(spec.digit_height_px * ch / FRAME_H)))
    pan_boxes: list[tuple[Rect, int]] = []
    exp_boxes: list[tuple[Rect, int]] = []
    if scene.side == "number":
        pan_center = cy + PAN_CENTER_Y * ch
        pan_boxes = _line(spec.pan, cx + int(round(PAN_LEFT * cw)), pan_center, gh,
                          LAYOUT_GROUPS[spec.layout])
        if spec.expiry is not None:
            eh = max(1, int(round(EXPIRY_SCALE * gh)))
            month, year = spec.expiry
            _, ew, egap, _ = _glyph_metrics(eh)
            # month and year separated by a blank slot instead of a slash
            exp_boxes = _line(f"{month:02d}{year:02d}", cx + int(round(EXPIRY_LEFT * cw)),
                              pan_center + EXPIRY_OFFSET * gh, eh, (2, 2))
            exp_boxes = [((x + (ew if k >= 2 else 0), y, w, h), d)
                         for k, ((x, y, w, h), d) in enumerate(exp_boxes)]
        logos = spec.number_side_logos
    else:
        logos = spec.back_side_logos
    logo_rects = []
    for mark in logos:
        lx, ly, lw, lh = mark.position
        logo_rects.append((mark.logo_id, (cx + int(round(lx * cw)), cy + int(round(ly * ch)),
                                          max(1, int(round(lw * cw))),
                                          max(1, int(round(lh * ch))))))
    return gh, pan_boxes, exp_boxes, logo_rects


def layout_truth(spec: CardSpec, scene: SceneSpec) -> FrameTruth:
    """Ground truth for a frame without rasterizing it."""
    _, pan_boxes, exp_boxes, logos = _layout(spec, scene)

    def clipped(items):
        out = []
        for rect, v in items:
            c = _clip(rect)
            if c is not None:
                out.append((c, v))
        return tuple(out)

    return FrameTruth(
        digit_boxes=clipped(pan_boxes), side=scene.side, centered=scene.centered,
        media=scene.media,
        logo_marks=tuple((lid, r) for r, lid in clipped((r, lid) for lid, r in logos)),
        session_pan=spec.pan,
        expiry_boxes=clipped(exp_boxes),
    )


# -- rasterization -------------------------------------------------------------

def _card_palette(pan: str) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(zlib.crc32(pan.encode()))
    body = rng.integers(205, 246, size=3)
    ink = rng.integers(15, 61, size=3)
    return body.astype(np.float64), ink.astype(np.float64)


def _fill(img: np.ndarray, rect: Rect, color, mask: np.ndarray | None = None) -> None:
    x, y, w, h = rect
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + w, FRAME_W), min(y + h, FRAME_H)
    if x1 <= x0 or y1 <= y0:
        return
    region = img[y0:y1, x0:x1]
    if mask is None:
        region[...] = color
    else:
        m = mask[y0 - y:y1 - y, x0 - x:x1 - x]
        region[m] = color


def _rounded_mask(w: int, h: int) -> np.ndarray:
    r = 0.2 * min(w, h)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dx = np.maximum(np.maximum(r - xx, xx - (w - r)), 0)
    dy = np.maximum(np.maximum(r - yy, yy - (h - r)), 0)
    return dx * dx + dy * dy <= r * r


def _background(rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(150, 190)
    tint = rng.uniform(-8, 8, size=3)
    slope = rng.uniform(-15, 15)
    ramp = np.linspace(-slope, slope, FRAME_W)
    img = np.empty((FRAME_H, FRAME_W, 3))
    img[...] = base + tint
    img += ramp[None, :, None]
    return img


def _apply_media(img: np.ndarray, rect: Rect, media: str) -> None:
    c = _clip(rect)
    if c is None or media == "physical":
        return
    x, y, w, h = c
    region = img[y:y + h, x:x + w]
    if media == "screen":
        rows = (np.arange(y, y + h) % SCANLINE_PERIOD) == 0
        region[rows] *= 1.0 - SCANLINE_DEPTH
    elif media == "paper":
        gray = region @ np.array([0.299, 0.587, 0.114])
        region[...] = 0.2 * region + 0.8 * gray[..., None] * 0.97
    elif media == "cardboard":
        region[...] = 0.65 * region + 0.35 * np.array([160.0, 120.0, 80.0])


def render_frame(spec: CardSpec, scene: SceneSpec, seed: int) -> tuple[np.ndarray, FrameTruth]:
    """Render one 600x375 RGB frame and its annotation.

    Deterministic for a fixed ``(spec, scene, seed)``.  Cards that extend past
    the frame are clipped along with their annotation boxes.
    """
    rng = np.random.default_rng(seed)
    img = _background(rng)
    body, ink = _card_palette(spec.pan)
    gh, pan_boxes, exp_boxes, logos = _layout(spec, scene)

    _fill(img, scene.card_rect, body)
    if scene.side == "non_number":
        x, y, w, h = scene.card_rect
        _fill(img, (x, y + int(0.08 * h), w, max(1, int(0.18 * h))), (30.0, 30.0, 30.0))
        _fill(img, (x + int(0.07 * w), y + int(0.34 * h), int(0.55 * w), int(0.12 * h)),
              (250.0, 250.0, 240.0))
    for logo_id, rect in logos:
        _fill(img, rect, LOGO_COLORS[logo_id], _rounded_mask(rect[2], rect[3]))

    emboss = spec.font_style == "embossed"
    shift = max(1, gh // 14)
    for rect, digit in [*pan_boxes, *exp_boxes]:
        x, y, w, h = rect
        mask = glyphs.glyph_mask(digit, h, w)
        if emboss:
            _fill(img, (x - shift, y - shift, w, h), np.minimum(body + 40, 255), mask)
        _fill(img, rect, ink, mask)

    _apply_media(img, scene.card_rect, scene.media)
    if scene.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(scene.blur_sigma, scene.blur_sigma, 0))
    if scene.noise_amp > 0:
        img = img + rng.normal(0.0, scene.noise_amp, img.shape)
    raster = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return raster, layout_truth(spec, scene)


def check_raster(frame: np.ndarray) -> None:
    if frame.shape != (FRAME_H, FRAME_W, 3) or frame.dtype != np.uint8:
        raise ValueError(f"expected a {FRAME_W}x{FRAME_H} uint8 RGB frame, "
                         f"got {frame.shape} {frame.dtype}")


def read_raster(path: str | Path) -> np.ndarray:
    """Load a PNG or binary PPM frame."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    check_raster(arr)
    return arr


def write_raster(path: str | Path, frame: np.ndarray) -> None:
    check_raster(frame)
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    Image.fromarray(frame, "RGB").save(path, format=fmt)


# -- sessions -----------------------------------------------------------------

@dataclass(frozen=True)
class SessionScript:
    camera_fps: float = 30.0
    entry_frames: int = 10
    centered_frames: int = 60
    back_frames: int = 45
    exit_frames: int = 0
    jitter_px: float = 2.0
    both_sides: bool = False
    media: str = "physical"
    blur_sigma: float = 0.0
    noise_amp: float = 0.0
    card_scale: float = 0.9
    give_up_ms: int | None = None

    def __post_init__(self):
        if not 0 < self.camera_fps <= 120:
            raise ValueError("camera_fps must be in (0, 120]")
        if min(self.entry_frames, self.centered_frames, self.back_frames, self.exit_frames) < 0:
            raise ValueError("frame counts must be non-negative")
        if not 0.4 <= self.card_scale <= 1.0:
            raise ValueError("card_scale must be in [0.4, 1]")
        if self.jitter_px < 0:
            raise ValueError("jitter must be non-negative")
        if self.media not in MEDIA:
            raise ValueError(f"unknown media {self.media!r}")

    @property
    def resolved_give_up_ms(self) -> int:
        if self.give_up_ms is not None:
            return int(self.give_up_ms)
        return DEFAULT_GIVE_UP_TWO_SIDED_MS if self.both_sides else DEFAULT_GIVE_UP_MS


class SessionFrame:
    """One timed frame of a session; the raster is rendered on first access."""

    __slots__ = ("index", "timestamp_ms", "spec", "scene", "path", "_seed", "_session_seed",
                 "_truth")

    def __init__(self, index: int, timestamp_ms: float, spec: CardSpec, scene: SceneSpec,
                 seed: int | None = None, path: Path | None = None,
                 session_seed: int | None = None):
        if seed is None and session_seed is None:
            raise ValueError("need a frame seed or a session seed")
        self.index = index
        self.timestamp_ms = timestamp_ms
        self.spec = spec
        self.scene = scene
        self.path = path
        self._seed = seed
        self._session_seed = session_seed
        self._truth: FrameTruth | None = None

    @property
    def seed(self) -> int:
        # derived on demand; most frames of a long session are never looked at
        if self._seed is None:
            self._seed = _frame_seed(self._session_seed, self.index)
        return self._seed

    @property
    def truth(self) -> FrameTruth:
        if self._truth is None:
            self._truth = layout_truth(self.spec, self.scene)
        return self._truth

    @property
    def raster(self) -> np.ndarray:
        if self.path is not None and self.path.exists():
            return read_raster(self.path)
        return render_frame(self.spec, self.scene, self.seed)[0]

    def _key(self):
        return (self.index, self.timestamp_ms, self.spec, self.scene, self.seed)

    def __eq__(self, other):
        return isinstance(other, SessionFrame) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return f"SessionFrame(index={self.index}, t={self.timestamp_ms:.1f}ms, side={self.scene.side})"


@dataclass
class ScanSession:
    session_id: str
    expected: CardSpec
    frames: list[SessionFrame]
    camera_fps: float
    give_up_ms: int
    both_sides: bool = False
    script: SessionScript = field(default_factory=SessionScript)
    seed: int = 0

    @property
    def frame_period_ms(self) -> float:
        return 1000.0 / self.camera_fps

    @property
    def end_ms(self) -> float:
        """Time at which the camera stops producing frames."""
        if not self.frames:
            return 0.0
        return self.frames[-1].timestamp_ms + self.frame_period_ms


def _frame_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _centered_rect(scale: float, rng: np.random.Generator, jitter: float) -> tuple[int, int, int, int]:
    w = int(round(scale * FRAME_W))
    h = int(round(w * FRAME_H / FRAME_W))
    dx, dy = rng.uniform(-jitter, jitter, 2) if jitter > 0 else (0.0, 0.0)
    return (int(round((FRAME_W - w) / 2 + dx)), int(round((FRAME_H - h) / 2 + dy)), w, h)


def _off_center_rect(rng: np.random.Generator) -> tuple[int, int, int, int]:
    scale = rng.uniform(0.45, 0.7)
    w = int(round(scale * FRAME_W))
    h = int(round(w * FRAME_H / FRAME_W))
    sign = rng.choice([-1, 1], 2)
    dx = sign[0] * rng.uniform(0.2, 0.45) * FRAME_W
    dy = sign[1] * rng.uniform(0.0, 0.3) * FRAME_H
    return (int(round((FRAME_W - w) / 2 + dx)), int(round((FRAME_H - h) / 2 + dy)), w, h)


def generate_session(spec: CardSpec, script: SessionScript = SessionScript(), seed: int = 0,
                     session_id: str = "session") -> ScanSession:
    """Timed frame sequence: off-center entry, centered number side,
    optionally centered back side, then off-center exit frames."""
    rng = np.random.default_rng([seed, 0x5E55])
    plan: list[tuple[str, bool]] = (
        [("number", False)] * script.entry_frames
        + [("number", True)] * script.centered_frames
        + ([("non_number", True)] * script.back_frames if script.both_sides else [])
        + [("non_number" if script.both_sides else "number", False)] * script.exit_frames
    )
    period = 1000.0 / script.camera_fps
    frames = []
    for i, (side, centered) in enumerate(plan):
        if centered:
            rect = _centered_rect(script.card_scale, rng, script.jitter_px)
        else:
            rect = _off_center_rect(rng)
        scene = SceneSpec(side=side, card_rect=rect, centered=centered, media=script.media,
                          blur_sigma=script.blur_sigma, noise_amp=script.noise_amp)
        frames.append(SessionFrame(i, i * period, spec, scene, session_seed=seed))
    return ScanSession(session_id=session_id, expected=spec, frames=frames,
                       camera_fps=script.camera_fps, give_up_ms=script.resolved_give_up_ms,
                       both_sides=script.both_sides, script=script, seed=seed)


# -- random cards and corpora -------------------------------------------------

_NETWORK_PREFIXES = {
    "visa": ("4",),
    "mastercard": ("51", "52", "53", "54", "55", "2221", "2500", "2720"),
    "amex": ("34", "37"),
    "discover": ("6011", "65"),
}


def random_pan(rng: np.random.Generator, network: str, length: int | None = None) -> str:
    if length is None:
        length = 15 if network == "amex" else 16
    prefix = str(rng.choice(_NETWORK_PREFIXES[network]))
    body = prefix + "".join(str(d) for d in rng.integers(0, 10, length - 1 - len(prefix)))
    return body + str(luhn_check_digit(body))


def random_card(rng: np.random.Generator, layouts=tuple(LAYOUT_GROUPS), font_styles=FONT_STYLES,
                digit_height=(18, 40)) -> CardSpec:
    layout = str(rng.choice(layouts))
    if layout == AMEX:
        network = "amex"
    else:
        network = str(rng.choice(("visa", "mastercard", "discover")))
    lo, hi = digit_height
    limit = max(h for h in range(8, 81) if pan_line_width(layout, h) <= PAN_MAX_WIDTH * FRAME_W)
    height = int(rng.integers(lo, min(hi, limit) + 1))
    bank = str(rng.choice(BANK_LOGOS))
    network_mark = LogoMark(network, (0.76, 0.74, 0.17, 0.18))
    # some designs keep the network logo on the back, as newer cards do
    if rng.random() < 0.3:
        front = (LogoMark(bank, (0.06, 0.08, 0.15, 0.2)),)
        back = (LogoMark(network, (0.76, 0.62, 0.17, 0.18)),)
    else:
        front = (LogoMark(bank, (0.06, 0.08, 0.15, 0.2)), network_mark)
        back = (LogoMark(bank, (0.07, 0.62, 0.15, 0.2)),)
    return CardSpec(
        pan=random_pan(rng, network), layout=layout, font_style=str(rng.choice(font_styles)),
        digit_height_px=height,
        expiry=(int(rng.integers(1, 13)), int(rng.integers(24, 36))),
        number_side_logos=front, back_side_logos=back,
    )


@dataclass(frozen=True)
class CorpusRanges:
    camera_fps: tuple[float, ...] = (30.0,)
    layouts: tuple[str, ...] = tuple(LAYOUT_GROUPS)
    font_styles: tuple[str, ...] = FONT_STYLES
    media: tuple[str, ...] = ("physical",)
    digit_height_px: tuple[int, int] = (18, 40)
    entry_frames: tuple[int, int] = (5, 20)
    jitter_px: float = 2.0
    both_sides_fraction: float = 0.0
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    noise_amp: tuple[float, float] = (0.0, 0.0)
    card_scale: tuple[float, float] = (0.85, 0.95)
    give_up_ms: int | None = None
    tail_ms: int = 1000

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusRanges":
        kw = {}
        for k, v in d.items():
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


def sample_session(ranges: CorpusRanges, seed: int, session_id: str) -> ScanSession:
    """Draw one session (card plus script) from ``ranges``; deterministic in seed."""
    rng = np.random.default_rng([seed, 0xC0])
    spec = random_card(rng, ranges.layouts, ranges.font_styles, ranges.digit_height_px)
    both = bool(rng.random() < ranges.both_sides_fraction)
    fps = float(rng.choice(ranges.camera_fps))
    give_up = ranges.give_up_ms
    if give_up is None:
        give_up = DEFAULT_GIVE_UP_TWO_SIDED_MS if both else DEFAULT_GIVE_UP_MS
    entry = int(rng.integers(ranges.entry_frames[0], ranges.entry_frames[1] + 1))
    total = int(np.ceil((give_up + ranges.tail_ms) * fps / 1000.0))
    if both:
        back = max(1, (total - entry) // 3)
        centered = max(1, total - entry - back)
    else:
        back, centered = 0, max(1, total - entry)
    script = SessionScript(
        camera_fps=fps, entry_frames=entry, centered_frames=centered, back_frames=back,
        jitter_px=ranges.jitter_px, both_sides=both, media=str(rng.choice(ranges.media)),
        blur_sigma=float(rng.uniform(*ranges.blur_sigma)),
        noise_amp=float(rng.uniform(*ranges.noise_amp)),
        card_scale=float(rng.uniform(*ranges.card_scale)), give_up_ms=give_up,
    )
    return generate_session(spec, script, seed=int(rng.integers(2**31)), session_id=session_id)


def _script_to_dict(script: SessionScript) -> dict:
    return asdict(script)


def corpus_plan(count: int, seed: int = 0) -> list[tuple[str, int]]:
    """(session_id, session seed) pairs of a corpus; shared by the on-disk
    writer and in-memory sweeps so both see the same sessions."""
    width = max(3, len(str(count - 1)))
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [(f"s{i:0{width}d}", int(seeds[i])) for i in range(count)]


def generate_corpus(out_dir: str | Path, count: int, ranges: CorpusRanges = CorpusRanges(),
                    seed: int = 0, write_frames: bool = True, frame_format: str = "png") -> dict:
    """Write ``count`` sessions plus ``manifest.json`` under ``out_dir``.

    Each session directory holds ``session.json`` (enough to regenerate the
    session exactly), ``truth.json`` and, when ``write_frames`` is set, one
    image per frame.  Returns the manifest.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if frame_format not in ("png", "ppm"):
        raise ValueError("frame_format must be 'png' or 'ppm'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for sid, sseed in corpus_plan(count, seed):
        session = sample_session(ranges, sseed, sid)
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        files = []
        if write_frames:
            (sdir / "frames").mkdir(exist_ok=True)
            for f in session.frames:
                name = f"frames/{f.index:06d}.{frame_format}"
                write_raster(sdir / name, render_frame(f.spec, f.scene, f.seed)[0])
                files.append(name)
        meta = {
            "session_id": sid,
            "seed": session.seed,
            "card": session.expected.to_dict(),
            "script": _script_to_dict(session.script),
        }
        (sdir / "session.json").write_text(json.dumps(meta, indent=1))
        truth = {
            "session_id": sid,
            "session_pan": session.expected.pan,
            "frames": [{"index": f.index, "timestamp_ms": round(f.timestamp_ms, 6),
                        **f.truth.to_dict()} for f in session.frames],
        }
        (sdir / "truth.json").write_text(json.dumps(truth, separators=(",", ":")))
        entries.append({
            "session_id": sid,
            "camera_fps": session.camera_fps,
            "give_up_ms": session.give_up_ms,
            "pan": session.expected.pan,
            "layout": session.expected.layout,
            "media": session.script.media,
            "font_style": session.expected.font_style,
            "digit_height_px": session.expected.digit_height_px,
            "both_sides": session.both_sides,
            "frame_count": len(session.frames),
            "frames": files,
        })
    manifest = {"seed": seed, "count": count, "ranges": asdict(ranges), "sessions": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    log.info("wrote %d sessions to %s", count, out)
    return manifest


def load_manifest(corpus_dir: str | Path) -> dict:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no corpus manifest at {path}")
    return json.loads(path.read_text())


def load_session(corpus_dir: str | Path, session_id: str) -> ScanSession:
    """Rebuild a stored session; stored frame images are used when present."""
    sdir = Path(corpus_dir) / session_id
    meta_path = sdir / "session.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no session {session_id!r} in {corpus_dir}")
    meta = json.loads(meta_path.read_text())
    spec = CardSpec.from_dict(meta["card"])
    s = meta["script"]
    script = SessionScript(**s)
    session = generate_session(spec, script, seed=int(meta["seed"]), session_id=session_id)
    frames_dir = sdir / "frames"
    if frames_dir.is_dir():
        for f in session.frames:
            for ext in ("png", "ppm"):
                p = frames_dir / f"{f.index:06d}.{ext}"
                if p.exists():
                    f.path = p
                    break
    return session


def load_corpus(corpus_dir: str | Path) -> list[ScanSession]:
    manifest = load_manifest(corpus_dir)
    return [load_session(corpus_dir, e["session_id"]) for e in manifest["sessions"]]

"""Server-side decision rules over the distilled scan payload.

The client sends only what the models concluded, never pixels.  Rules are
evaluated in a fixed order and the first one that fires decides.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Any

from .cardsynth import BANK_LOGOS, NETWORK_LOGOS
from .ocrdecode import luhn_valid
from .pipeline import ScanResult, mask_pan

log = logging.getLogger(__name__)

FAKE_MEDIA = ("screen", "paper", "cardboard")
DECISIONS = ("pass", "reject", "inconclusive")
EXIT_CODES = {"pass": 0, "reject": 2, "inconclusive": 3}


def bin_network(pan: str) -> str:
    """Card network from the leading digits; 'unknown' outside the table."""
    if len(pan) < 6:
        raise ValueError("need at least the six BIN digits")
    head = pan[:6]
    if not head.isdigit():
        raise ValueError(f"BIN must be digits, got {head!r}")
    if head[0] == "4":
        return "visa"
    if 51 <= int(head[:2]) <= 55 or 2221 <= int(head[:4]) <= 2720:
        return "mastercard"
    if head[:2] in ("34", "37"):
        return "amex"
    if head[:4] == "6011" or head[:2] == "65":
        return "discover"
    return "unknown"


class PayloadError(ValueError):
    """Malformed payload; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class TamperEntry:
    logo_id: str
    confidence: float
    frames: int


@dataclass(frozen=True)
class ScanPayload:
    session_id: str
    final_pan: str | None
    expiry: str | None
    sides_seen: tuple[str, ...]
    media_votes: dict[str, int]
    tamper_objects: tuple[TamperEntry, ...]
    frames_produced: int
    frames_processed: int
    fps: float
    duration_ms: float
    gave_up: bool
    mode: str
    profile: str

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.name == "sides_seen":
                v = list(v)
            elif f.name == "media_votes":
                v = dict(sorted(v.items()))
            elif f.name == "tamper_objects":
                v = [dataclasses.asdict(t) for t in v]
            d[f.name] = v
        return d


_SCALARS = {
    "session_id": (str, False), "final_pan": (str, True), "expiry": (str, True),
    "frames_produced": (int, False), "frames_processed": (int, False),
    "fps": ((int, float), False), "duration_ms": ((int, float), False),
    "gave_up": (bool, False), "mode": (str, False), "profile": (str, False),
}


def _check(path: str, value, types, nullable: bool):
    if value is None and nullable:
        return None
    # bool is an int subclass; keep the two apart
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise PayloadError(path, f"expected {types}, got bool")
    if not isinstance(value, types):
        raise PayloadError(path, f"expected {getattr(types, '__name__', types)}, "
                                 f"got {type(value).__name__}")
    return value


def payload_from_dict(d: Any) -> ScanPayload:
    if not isinstance(d, dict):
        raise PayloadError("$", "payload must be a JSON object")
    names = [f.name for f in dataclasses.fields(ScanPayload)]
    for name in names:
        if name not in d:
            raise PayloadError(name, "missing required field")
    extra = sorted(set(d) - set(names))
    if extra:
        log.info("ignoring %d unknown payload field(s): %s", len(extra), ", ".join(extra))
    kw: dict[str, Any] = {}
    for name, (types, nullable) in _SCALARS.items():
        kw[name] = _check(name, d[name], types, nullable)
    kw["fps"] = float(kw["fps"])
    kw["duration_ms"] = float(kw["duration_ms"])

    sides = _check("sides_seen", d["sides_seen"], list, False)
    kw["sides_seen"] = tuple(_check(f"sides_seen[{i}]", s, str, False) for i, s in enumerate(sides))

    votes = _check("media_votes", d["media_votes"], dict, False)
    kw["media_votes"] = {k: _check(f"media_votes.{k}", v, int, False) for k, v in votes.items()}

    objs = _check("tamper_objects", d["tamper_objects"], list, False)
    entries = []
    for i, o in enumerate(objs):
        p = f"tamper_objects[{i}]"
        _check(p, o, dict, False)
        for k in ("logo_id", "confidence", "frames"):
            if k not in o:
                raise PayloadError(f"{p}.{k}", "missing required field")
        entries.append(TamperEntry(
            _check(f"{p}.logo_id", o["logo_id"], str, False),
            float(_check(f"{p}.confidence", o["confidence"], (int, float), False)),
            _check(f"{p}.frames", o["frames"], int, False)))
    kw["tamper_objects"] = tuple(entries)
    return ScanPayload(**kw)


def serialize_payload(payload: ScanPayload) -> bytes:
    """Canonical JSON: dataclass field order, compact separators, sorted vote keys."""
    return json.dumps(payload.to_dict(), separators=(",", ":"), ensure_ascii=True).encode()


def parse_payload(data: bytes | str) -> ScanPayload:
    try:
        d = json.loads(data)
    except json.JSONDecodeError as e:
        raise PayloadError("$", f"invalid JSON ({e.msg} at char {e.pos})") from None
    return payload_from_dict(d)


def payload_from_result(result: ScanResult, unmasked: bool = False) -> ScanPayload:
    return payload_from_dict(result.to_report(unmasked=unmasked))


@dataclass(frozen=True)
class ExpectedCard:
    pan_on_record: str
    issuer: str | None = None     # bank logo id, when the issuer's logo is known

    def __post_init__(self):
        if not self.pan_on_record.isdigit() or not luhn_valid(self.pan_on_record):
            raise ValueError("pan_on_record must be a Luhn-valid digit string")
        if self.issuer is not None and self.issuer not in BANK_LOGOS:
            raise ValueError(f"issuer must be one of {BANK_LOGOS}")

    @classmethod
    def from_dict(cls, d: dict) -> "ExpectedCard":
        if "pan_on_record" not in d:
            raise PayloadError("pan_on_record", "missing required field")
        return cls(str(d["pan_on_record"]), d.get("issuer"))


@dataclass(frozen=True)
class RulesConfig:
    required_sides: tuple[str, ...] = ("number",)
    tamper_min_frames: int = 2


@dataclass(frozen=True)
class Verdict:
    decision: str
    reasons: tuple[str, ...] = ()
    evidence: dict[str, str] = field(default_factory=dict)   # reason -> payload field

    def __post_init__(self):
        if self.decision not in DECISIONS:
            raise ValueError(f"unknown decision {self.decision!r}")
        if (self.decision == "pass") != (not self.reasons):
            raise ValueError("pass carries no reasons; reject and inconclusive need one")

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.decision]

    def to_dict(self) -> dict:
        return {"decision": self.decision, "reasons": list(self.reasons),
                "evidence": dict(self.evidence)}


def pans_match(read: str, on_record: str) -> bool:
    """Compare a possibly masked read against the full number on record."""
    if len(read) != len(on_record):
        return False
    return all(a == "*" or a == b for a, b in zip(read, on_record))


def _media_rule(votes: dict[str, int]) -> Verdict | None:
    if not votes:
        return None
    top = max(votes.values())
    leaders = sorted(k for k, v in votes.items() if v == top)
    if len(leaders) == 1:
        if leaders[0] in FAKE_MEDIA:
            return Verdict("reject", ("fake_media",), {"fake_media": "media_votes"})
        return None
    if "physical" in leaders:
        return Verdict("inconclusive", ("media_tie",), {"media_tie": "media_votes"})
    return Verdict("reject", ("fake_media",), {"fake_media": "media_votes"})


def _tamper_conflicts(payload: ScanPayload, expected: ExpectedCard, rules: RulesConfig) -> list[str]:
    network = bin_network(payload.final_pan)
    out = []
    for t in payload.tamper_objects:
        if t.frames < rules.tamper_min_frames:
            continue
        if t.logo_id in NETWORK_LOGOS and network != "unknown" and t.logo_id != network:
            out.append(t.logo_id)
        elif t.logo_id in BANK_LOGOS and expected.issuer is not None and t.logo_id != expected.issuer:
            out.append(t.logo_id)
    return out


def decide(payload: ScanPayload, expected: ExpectedCard,
           rules: RulesConfig = RulesConfig()) -> Verdict:
    """Apply R1 (no read), R2 (number mismatch), R3 (fake media), R4 (logo
    inconsistency) and R5 (missing side) in order; the first that fires decides."""
    if payload.final_pan is None:
        return Verdict("inconclusive", ("no_ocr",), {"no_ocr": "final_pan"})
    if not pans_match(payload.final_pan, expected.pan_on_record):
        return Verdict("reject", ("pan_mismatch",), {"pan_mismatch": "final_pan"})
    media = _media_rule(payload.media_votes)
    if media is not None:
        return media
    if _tamper_conflicts(payload, expected, rules):
        return Verdict("reject", ("tamper_inconsistent",),
                       {"tamper_inconsistent": "tamper_objects"})
    missing = [s for s in rules.required_sides if s not in payload.sides_seen]
    if missing:
        return Verdict("inconclusive", ("missing_side",), {"missing_side": "sides_seen"})
    return Verdict("pass")


def masked(payload: ScanPayload) -> ScanPayload:
    if payload.final_pan is None or "*" in payload.final_pan:
        return payload
    return dataclasses.replace(payload, final_pan=mask_pan(payload.final_pan))

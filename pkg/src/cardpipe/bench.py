"""Simulation benchmarks: success rate against frame rate, the three
producer/consumer modes, and the useful-frames experiment.

Everything runs under the virtual clock, so a sweep is a pure function of its
spec and seeds and its CSV output is byte-stable.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import cardsynth
from .cardsynth import CorpusRanges, ScanSession, SessionScript
from .infer import BackendConfig, DeviceProfile, OracleBackend, TemplateBackend
from .ocrdecode import DEFAULT_GEOMETRY, read_pipeline
from .pipeline import MODES, PipelineConfig, ScanResult, frame_seed, run_scan

log = logging.getLogger(__name__)

CSV_HEADER = ("profile", "mode", "session_id", "success", "fps", "duration_ms", "frames_processed")
DEFAULT_DIGIT_ERROR = 0.15
FPS_BUCKETS = (("<1", 0.0, 1.0), ("1-2", 1.0, 2.0), (">=2", 2.0, math.inf))
MODE_RUN_MS = 20_000


@dataclass(frozen=True)
class SweepSpec:
    profiles: tuple[DeviceProfile, ...]
    modes: tuple[str, ...] = ("parallel",)
    corpus: str | None = None           # directory from generate_corpus; None samples in memory
    count: int = 500                    # in-memory corpus size
    corpus_seed: int = 0
    ranges: CorpusRanges = field(default_factory=CorpusRanges)
    errors: BackendConfig = field(default_factory=lambda: BackendConfig(
        digit_error_rate=DEFAULT_DIGIT_ERROR))
    seed: int = 0
    backend: str = "oracle"
    workers: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.profiles:
            raise ValueError("a sweep needs at least one profile")
        if not self.modes:
            raise ValueError("a sweep needs at least one mode")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        if self.backend not in ("oracle", "template"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.corpus is None and self.count < 1:
            raise ValueError("count must be >= 1")

    def make_backends(self):
        oracle = OracleBackend(self.errors)
        return oracle if self.backend == "oracle" else TemplateBackend(oracle)

    def session_ids(self) -> list[str]:
        if self.corpus is not None:
            return [e["session_id"] for e in cardsynth.load_manifest(self.corpus)["sessions"]]
        return [sid for sid, _ in cardsynth.corpus_plan(self.count, self.corpus_seed)]

    def session(self, session_id: str) -> ScanSession:
        if self.corpus is not None:
            return cardsynth.load_session(self.corpus, session_id)
        seeds = dict(cardsynth.corpus_plan(self.count, self.corpus_seed))
        return cardsynth.sample_session(self.ranges, seeds[session_id], session_id)

    def metadata(self) -> dict:
        return {
            "profiles": [p.name for p in self.profiles],
            "modes": list(self.modes),
            "corpus": self.corpus if self.corpus is not None else "in-memory",
            "count": len(self.session_ids()),
            "corpus_seed": self.corpus_seed,
            "seed": self.seed,
            "backend": self.backend,
            "error_rates": {k: v for k, v in asdict(self.errors).items() if k != "seed"},
            "duration_includes_vote_window": True,
            "fps_definition": "frames through OCR per second of main-loop time",
        }


@dataclass(frozen=True)
class SweepRow:
    profile: str
    mode: str
    session_id: str
    success: bool
    fps: float
    duration_ms: float
    frames_processed: int

    def csv_fields(self) -> list[str]:
        return [self.profile, self.mode, self.session_id, str(int(self.success)),
                f"{self.fps:.6f}", f"{self.duration_ms:.3f}", str(self.frames_processed)]


def _row(spec: SweepSpec, profile: DeviceProfile, mode: str, session: ScanSession,
         result: ScanResult) -> SweepRow:
    return SweepRow(profile.name, mode, session.session_id,
                    result.success(session.expected.pan) and not result.gave_up,
                    result.fps, result.duration_ms, result.frames_processed)


def _run_session(spec: SweepSpec, session_id: str) -> list[SweepRow]:
    session = spec.session(session_id)
    backends = spec.make_backends()
    rows = []
    for profile in spec.profiles:
        for mode in spec.modes:
            cfg = PipelineConfig(mode=mode, workers=spec.workers, seed=spec.seed)
            rows.append(_row(spec, profile, mode, session, run_scan(session, backends, profile, cfg)))
    return rows


def run_sweep(spec: SweepSpec) -> list[SweepRow]:
    """One row per (profile, mode, session), ordered by profile, mode, then session."""
    if spec.corpus is not None and not (Path(spec.corpus) / "manifest.json").exists():
        raise FileNotFoundError(f"no corpus manifest under {spec.corpus}")
    ids = spec.session_ids()
    if spec.jobs > 1:
        with ProcessPoolExecutor(spec.jobs) as pool:
            per_session = list(pool.map(_run_session, [spec] * len(ids), ids, chunksize=8))
    else:
        per_session = [_run_session(spec, sid) for sid in ids]
    rows = [r for rs in per_session for r in rs]
    p_order = {p.name: i for i, p in enumerate(spec.profiles)}
    m_order = {m: i for i, m in enumerate(spec.modes)}
    rows.sort(key=lambda r: (p_order[r.profile], m_order[r.mode], r.session_id))
    return rows


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()


def write_csv(rows: Iterable[SweepRow], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows))


def read_csv(path: str | Path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        return [SweepRow(r["profile"], r["mode"], r["session_id"], r["success"] == "1",
                         float(r["fps"]), float(r["duration_ms"]), int(r["frames_processed"]))
                for r in reader]


# -- buckets -------------------------------------------------------------------------

@dataclass(frozen=True)
class Bucket:
    label: str
    lo: float
    hi: float
    sessions: int
    successes: int
    mean_duration_ms: float

    @property
    def success_rate(self) -> float:
        return self.successes / self.sessions if self.sessions else float("nan")

    def to_dict(self) -> dict:
        rate = self.success_rate
        return {"bucket": self.label, "sessions": self.sessions, "successes": self.successes,
                "success_rate": None if math.isnan(rate) else round(rate, 6),
                "mean_duration_ms": round(self.mean_duration_ms, 3)}


@dataclass(frozen=True)
class BucketStats:
    buckets: tuple[Bucket, ...]

    @property
    def total(self) -> int:
        return sum(b.sessions for b in self.buckets)

    def __getitem__(self, label: str) -> Bucket:
        for b in self.buckets:
            if b.label == label:
                return b
        raise KeyError(label)

    def to_dict(self) -> list[dict]:
        return [b.to_dict() for b in self.buckets]


def bucket_by_fps(rows: Sequence[SweepRow], by: str = "session") -> BucketStats:
    """Partition sessions into the <1, 1-2 and >=2 FPS buckets.

    ``by="session"`` uses each session's own measured FPS.  ``by="profile"``
    places every session at its device's mean measured FPS over the rows,
    the way fleet measurements bucket device types.
    """
    if by == "session":
        key = {id(r): r.fps for r in rows}
    elif by == "profile":
        groups: dict[tuple[str, str], list[float]] = {}
        for r in rows:
            groups.setdefault((r.profile, r.mode), []).append(r.fps)
        means = {k: float(np.mean(v)) for k, v in groups.items()}
        key = {id(r): means[(r.profile, r.mode)] for r in rows}
    else:
        raise ValueError(f"unknown bucketing {by!r}; use 'session' or 'profile'")
    out = []
    for label, lo, hi in FPS_BUCKETS:
        sel = [r for r in rows if lo <= key[id(r)] < hi]
        dur = float(np.mean([r.duration_ms for r in sel])) if sel else 0.0
        out.append(Bucket(label, lo, hi, len(sel), sum(r.success for r in sel), dur))
    return BucketStats(tuple(out))


def summarize(spec: SweepSpec, rows: Sequence[SweepRow]) -> dict:
    per_profile = {}
    for p in spec.profiles:
        for m in spec.modes:
            sel = [r for r in rows if r.profile == p.name and r.mode == m]
            if not sel:
                continue
            per_profile[f"{p.name}/{m}"] = {
                "sessions": len(sel),
                "success_rate": round(sum(r.success for r in sel) / len(sel), 6),
                "mean_fps": round(float(np.mean([r.fps for r in sel])), 6),
            }
    return {"metadata": spec.metadata(),
            "buckets_by_device": bucket_by_fps(rows, by="profile").to_dict(),
            "buckets_by_session": bucket_by_fps(rows, by="session").to_dict(),
            "per_profile": per_profile}


def write_summary(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(summary, indent=2) + "\n")


def write_curve_tsv(rows: Sequence[SweepRow], path: str | Path) -> None:
    """Per-profile mean FPS against success rate, one line per profile/mode."""
    lines = ["# profile\tmode\tmean_fps\tsuccess_rate"]
    keys = dict.fromkeys((r.profile, r.mode) for r in rows)
    for prof, mode in keys:
        sel = [r for r in rows if r.profile == prof and r.mode == mode]
        lines.append(f"{prof}\t{mode}\t{np.mean([r.fps for r in sel]):.6f}\t"
                     f"{sum(r.success for r in sel) / len(sel):.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- mode comparison -------------------------------------------------------------------

def mode_session(profile: DeviceProfile, card_seed: int = 0, duration_ms: int = MODE_RUN_MS
                 ) -> ScanSession:
    """A session of centered number-side frames lasting ``duration_ms``."""
    spec = cardsynth.random_card(np.random.default_rng([card_seed, 0x30DE]))
    frames = int(round(duration_ms * profile.camera_fps / 1000.0))
    script = SessionScript(camera_fps=profile.camera_fps, entry_frames=0, centered_frames=frames,
                           give_up_ms=duration_ms)
    return cardsynth.generate_session(spec, script, seed=card_seed, session_id=f"modes-{card_seed}")


@dataclass(frozen=True)
class ModeRow:
    profile: str
    mode: str
    seed: int
    fps: float
    frames_processed: int
    duration_ms: float
    success: bool


def compare_modes(profile: DeviceProfile, session: ScanSession | None = None,
                  seeds: Sequence[int] = (0,), backends=None, modes: Sequence[str] = MODES,
                  workers: int | None = None) -> list[ModeRow]:
    """Run the fixed-length session in each mode; the scan does not stop at
    the first read so FPS is measured over the whole run."""
    backends = backends or OracleBackend()
    rows = []
    for seed in seeds:
        sess = session if session is not None else mode_session(profile, seed)
        for mode in modes:
            cfg = PipelineConfig(mode=mode, workers=workers, stop_on_success=False, seed=seed)
            r = run_scan(sess, backends, profile, cfg)
            rows.append(ModeRow(profile.name, mode, seed, r.fps, r.frames_processed,
                                r.duration_ms, r.success(sess.expected.pan)))
    return rows


def mean_fps_by_mode(rows: Sequence[ModeRow]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r.mode, []).append(r.fps)
    return {m: float(np.mean(v)) for m, v in out.items()}


def mode_rows_to_sweep(rows: Sequence[ModeRow]) -> list[SweepRow]:
    return [SweepRow(r.profile, r.mode, f"modes-{r.seed}", r.success, r.fps, r.duration_ms,
                     r.frames_processed) for r in rows]


# -- useful frames -----------------------------------------------------------------

@dataclass(frozen=True)
class UsefulStat:
    fps: float
    processed: int
    useful: int

    @property
    def fraction(self) -> float:
        return self.useful / self.processed if self.processed else float("nan")


def subsample_indices(session: ScanSession, fps: float) -> list[int]:
    """Frame indices seen by a camera running at ``fps`` instead of the native rate."""
    native = session.camera_fps
    if fps <= 0:
        raise ValueError("fps must be positive")
    if fps > native + 1e-9:
        raise ValueError(f"{fps} fps is above the session's native {native} fps")
    n = len(session.frames)
    out, k = [], 0
    while True:
        t = k * 1000.0 / fps
        i = int(round(t * native / 1000.0))
        if i >= n:
            break
        out.append(i)
        k += 1
    return out


def useful_frames(session: ScanSession, simulated_fps: Sequence[float], backends=None,
                  seed: int = 0, geom=DEFAULT_GEOMETRY) -> list[UsefulStat]:
    """OCR every subsampled frame; a frame is useful when its read equals the truth PAN."""
    backends = backends or OracleBackend()
    truth = session.expected.pan
    cache: dict[int, bool] = {}

    def useful(i: int) -> bool:
        if i not in cache:
            f = session.frames[i]
            _, pan, _ = read_pipeline(backends.ocr(f, frame_seed(seed, session, i)), geom)
            cache[i] = pan is not None and pan.digits == truth
        return cache[i]

    stats = []
    for fps in simulated_fps:
        idx = subsample_indices(session, fps)
        stats.append(UsefulStat(float(fps), len(idx), sum(useful(i) for i in idx)))
    return stats


def useful_session(seed: int, duration_ms: int = MODE_RUN_MS, camera_fps: float = 30.0
                   ) -> ScanSession:
    spec = cardsynth.random_card(np.random.default_rng([seed, 0x05EF]))
    frames = int(round(duration_ms * camera_fps / 1000.0))
    script = SessionScript(camera_fps=camera_fps, entry_frames=0, centered_frames=frames,
                           give_up_ms=duration_ms)
    return cardsynth.generate_session(spec, script, seed=seed, session_id=f"useful-{seed}")

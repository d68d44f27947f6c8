"""Scan orchestration: the main loop (card detection + OCR over a bounded LIFO
frame buffer), the cross-frame vote, and the completion loop (fake media and
tamper models over the best saved frames).

Two clocks are supported.  The virtual clock is a single-threaded
discrete-event simulation whose results depend only on the inputs and seed;
it is what the benchmarks use.  The wall clock runs a real producer thread
and worker threads sleeping for the simulated latencies, for demos.
"""

from __future__ import annotations

import collections
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .cardsynth import ScanSession, SessionFrame
from .infer import Backends, DeviceProfile, ZoomedFrame
from .ocrdecode import (DEFAULT_GEOMETRY, DEFAULT_IOU_THRESHOLD, DEFAULT_SCORE_THRESHOLD,
                        HeadGeometry, PanCandidate, needs_zoom, read_pipeline)

log = logging.getLogger(__name__)

MODES = ("blocking", "buffered", "parallel")
CLOCKS = ("virtual", "wall")
PHASES = ("seeking", "voting", "completion", "done")
SIDE_OF_CATEGORY = {"number_side": "number", "non_number_side": "non_number"}

_EPS = 1e-9


def mask_pan(pan: str | None) -> str | None:
    """Keep the BIN and the last four digits."""
    if pan is None:
        return None
    if len(pan) <= 10:
        return "*" * len(pan)
    return pan[:6] + "*" * (len(pan) - 10) + pan[-4:]


# -- frame buffer -----------------------------------------------------------------

class FrameBuffer:
    """Bounded LIFO: pop returns the newest entry, push evicts the oldest.

    Safe for one producer and many consumers.
    """

    def __init__(self, capacity: int = 2):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._closed = False
        self.evicted = 0

    def push(self, item) -> Any | None:
        """Add ``item`` as the newest entry; returns the evicted entry, if any."""
        with self._cond:
            self._items.appendleft(item)
            dropped = None
            if len(self._items) > self.capacity:
                dropped = self._items.pop()
                self.evicted += 1
            self._cond.notify()
            return dropped

    def pop(self, block: bool = False, timeout: float | None = None):
        """Remove and return the newest entry.

        Non-blocking pops on an empty buffer return None; blocking pops wait
        until an entry arrives, the timeout passes, or the buffer is closed.
        """
        with self._cond:
            if block:
                self._cond.wait_for(lambda: self._items or self._closed, timeout)
            if not self._items:
                return None
            return self._items.popleft()

    def clear(self) -> None:
        with self._cond:
            self._items.clear()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def snapshot(self) -> list:
        """Entries newest first."""
        with self._cond:
            return list(self._items)

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


# -- configuration and state ---------------------------------------------------------

@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "parallel"
    workers: int | None = None      # parallel mode only; None takes the profile's count
    vote_window_ms: float = 1500.0
    completion_budget_ms: float = 1000.0
    completion_max_frames: int = 6
    buffer_capacity: int = 2
    clock: str = "virtual"
    vote: bool = True               # False: the first Luhn-valid read is final
    stop_on_success: bool = True
    zoom: bool = True
    jitter: bool = True
    seed: int = 0
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    iou_threshold: float = DEFAULT_IOU_THRESHOLD
    required_back_frames: int | None = None  # None: completion_max_frames
    wall_time_scale: float = 1.0    # wall clock only; 0.1 runs ten times faster

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.clock not in CLOCKS:
            raise ValueError(f"unknown clock {self.clock!r}")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.completion_max_frames < 0 or self.buffer_capacity < 1:
            raise ValueError("completion_max_frames must be >= 0 and buffer_capacity >= 1")
        if self.vote_window_ms < 0 or self.completion_budget_ms < 0:
            raise ValueError("time budgets must be non-negative")
        if self.wall_time_scale <= 0:
            raise ValueError("wall_time_scale must be positive")

    def resolved_workers(self, profile: DeviceProfile) -> int:
        if self.mode != "parallel":
            return 1
        return self.workers if self.workers is not None else profile.workers

    def speedup(self, profile: DeviceProfile) -> float:
        return profile.parallel_speedup if self.mode == "parallel" else 1.0

    @property
    def back_frames_needed(self) -> int:
        if self.required_back_frames is not None:
            return self.required_back_frames
        return self.completion_max_frames


@dataclass(frozen=True)
class SavedFrame:
    frame: SessionFrame
    side: str
    confidence: float
    timestamp_ms: float


@dataclass
class ScanState:
    max_saved: int = 6
    phase: str = "seeking"
    candidates: list[tuple[float, PanCandidate]] = field(default_factory=list)
    expiry_reads: list[tuple[int, int]] = field(default_factory=list)
    saved_frames: dict[str, list[SavedFrame]] = field(default_factory=dict)
    sides_seen: set[str] = field(default_factory=set)

    def enroll(self, t: float, cand: PanCandidate) -> None:
        if not cand.luhn:
            raise ValueError("only Luhn-valid reads may vote")
        self.candidates.append((t, cand))
        if self.phase == "seeking":
            self.phase = "voting"

    def save(self, item: SavedFrame) -> None:
        """Keep the best ``max_saved`` frames per side by (confidence, recency)."""
        self.sides_seen.add(item.side)
        pool = self.saved_frames.setdefault(item.side, [])
        if any(p.timestamp_ms == item.timestamp_ms for p in pool):
            return
        pool.append(item)
        pool.sort(key=_saved_key)
        del pool[self.max_saved:]


def _saved_key(s: SavedFrame):
    return (-s.confidence, -s.timestamp_ms)


@dataclass(frozen=True)
class TamperObject:
    logo_id: str
    confidence: float
    frames: int

    def to_dict(self) -> dict:
        return {"logo_id": self.logo_id, "confidence": round(self.confidence, 6),
                "frames": self.frames}


@dataclass(frozen=True)
class ScanResult:
    session_id: str
    final_pan: str | None
    final_confidence: float | None
    expiry: tuple[int, int] | None
    sides_seen: tuple[str, ...]
    media_votes: dict[str, int]
    tamper_objects: tuple[TamperObject, ...]
    frames_produced: int
    frames_examined: int        # frames that went through card detection
    frames_processed: int       # frames that went through OCR
    frames_failed: int
    duration_ms: float          # main loop, including the vote window
    gave_up: bool
    mode: str
    profile: str
    pan_reads: tuple[str, ...] = ()   # Luhn-valid reads enrolled in the vote
    first_success_ms: float | None = None
    zoom_used: bool = False
    completion_processed: int = 0
    completion_ms: float = 0.0

    @property
    def fps(self) -> float:
        if self.duration_ms <= 0:
            return 0.0
        return self.frames_processed * 1000.0 / self.duration_ms

    def success(self, truth_pan: str) -> bool:
        return self.final_pan is not None and self.final_pan == truth_pan

    def to_report(self, unmasked: bool = False) -> dict:
        pan = self.final_pan if unmasked else mask_pan(self.final_pan)
        return {
            "session_id": self.session_id,
            "final_pan": pan,
            "expiry": None if self.expiry is None else f"{self.expiry[0]:02d}/{self.expiry[1]:02d}",
            "sides_seen": list(self.sides_seen),
            "media_votes": dict(sorted(self.media_votes.items())),
            "tamper_objects": [t.to_dict() for t in self.tamper_objects],
            "frames_produced": self.frames_produced,
            "frames_processed": self.frames_processed,
            "fps": round(self.fps, 6),
            "duration_ms": round(self.duration_ms, 6),
            "gave_up": self.gave_up,
            "mode": self.mode,
            "profile": self.profile,
            "frames_examined": self.frames_examined,
            "frames_failed": self.frames_failed,
            "valid_reads": len(self.pan_reads),
            "first_success_ms": None if self.first_success_ms is None
            else round(self.first_success_ms, 6),
            "zoom_used": self.zoom_used,
            "completion_processed": self.completion_processed,
            "completion_ms": round(self.completion_ms, 6),
        }


# -- voting -------------------------------------------------------------------------

def vote_pan(candidates: Sequence[PanCandidate]) -> PanCandidate | None:
    """Plurality by digit string; ties go to the larger summed confidence,
    then to the lexicographically smaller string."""
    groups: dict[str, list[PanCandidate]] = {}
    for c in candidates:
        if not c.luhn:
            raise ValueError(f"Luhn-invalid candidate {mask_pan(c.digits)} cannot vote")
        groups.setdefault(c.digits, []).append(c)
    if not groups:
        return None
    # fsum is exactly rounded, so the tiebreak does not depend on arrival order
    digits = min(groups, key=lambda d: (-len(groups[d]),
                                        -math.fsum(c.confidence for c in groups[d]), d))
    return max(groups[digits], key=lambda c: c.confidence)


def _vote_expiry(reads: Sequence[tuple[int, int]]) -> tuple[int, int] | None:
    if not reads:
        return None
    counts = collections.Counter(reads)
    return min(counts, key=lambda e: (-counts[e], e))


# -- per-frame work -----------------------------------------------------------------

def frame_seed(scan_seed: int, session: ScanSession, index: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([scan_seed, session.seed, index, salt]).generate_state(1)[0])


@dataclass
class FrameOutcome:
    frame: SessionFrame
    work_ms: float
    category: str | None = None
    confidence: float = 0.0
    ran_ocr: bool = False
    pan: PanCandidate | None = None
    expiry: tuple[int, int] | None = None
    zoomed: bool = False
    failed: bool = False


class _Latency:
    """Seeded +-5% jitter per job, keyed by the job's sequence number."""

    def __init__(self, profile: DeviceProfile, jitter: bool, key: Sequence[int]):
        self.profile, self.jitter, self.key = profile, jitter, list(key)

    def __call__(self, model: str, job: int, draw: int = 0) -> float:
        base = self.profile.latency(model)
        if not self.jitter:
            return base
        rng = np.random.default_rng([*self.key, job, draw])
        return base * (1.0 + rng.uniform(-0.05, 0.05))


def _read(out, geom: HeadGeometry, cfg: PipelineConfig):
    return read_pipeline(out, geom, cfg.score_threshold, cfg.iou_threshold)


def process_frame(frame: SessionFrame, backends: Backends, latency: _Latency, job: int,
                  seed: int, cfg: PipelineConfig, ocr_enabled: bool, zoom_available: bool,
                  geom: HeadGeometry = DEFAULT_GEOMETRY) -> FrameOutcome:
    """Card detection, then OCR on number-side frames, then at most one zoom re-read.

    All outputs are computed up front; the caller decides when the work
    finishes on its clock.
    """
    out = FrameOutcome(frame, latency("card_detect", job))
    try:
        label = backends.card_detect(frame, seed)
    except Exception:
        log.warning("card detection failed on frame %d", frame.index, exc_info=True)
        out.failed = True
        return out
    out.category, out.confidence = label.category, label.confidence
    if label.category != "number_side" or not ocr_enabled:
        return out
    out.work_ms += latency("ocr", job)
    out.ran_ocr = True
    try:
        boxes, pan, expiry = _read(backends.ocr(frame, seed), geom, cfg)
        if zoom_available and cfg.zoom:
            rect = needs_zoom(boxes, geom)
            if rect is not None:
                out.zoomed = True
                out.work_ms += latency("ocr", job, draw=1)
                zoomed = ZoomedFrame(frame, rect)
                _, pan, z_exp = _read(backends.ocr(zoomed, seed ^ 0x5A5A5A5A), geom, cfg)
                expiry = expiry or z_exp
    except Exception:
        log.warning("OCR failed on frame %d", frame.index, exc_info=True)
        out.failed = True
        return out
    out.pan, out.expiry = pan, expiry
    return out


# -- processor sharing -------------------------------------------------------------

def share_schedule(works: Sequence[float], workers: int, speedup: float,
                   horizon: float = math.inf) -> list[float]:
    """Finish times of jobs that are all ready at t=0 and start in order as
    workers free up.  ``k`` running jobs each progress at min(1, speedup/k).
    Jobs not finished by ``horizon`` get ``inf``."""
    finish = [math.inf] * len(works)
    pending = collections.deque(range(len(works)))
    active: dict[int, float] = {}
    now = 0.0
    while pending or active:
        while pending and len(active) < workers:
            j = pending.popleft()
            active[j] = works[j]
        rate = min(1.0, speedup / len(active))
        step = min(active.values()) / rate
        if now + step > horizon + _EPS:
            break
        now += step
        for j in list(active):
            active[j] -= step * rate
            if active[j] <= _EPS:
                finish[j] = now
                del active[j]
    return finish


# -- completion loop ------------------------------------------------------------------

def select_completion_frames(state: ScanState, max_frames: int = 6) -> list[SavedFrame]:
    """Per side, the best ``max_frames`` centered frames by card-detect confidence
    (newer first on ties), deduplicated by timestamp."""
    out = []
    for side in sorted(state.saved_frames):
        seen, picked = set(), []
        for s in sorted(state.saved_frames[side], key=_saved_key):
            if s.timestamp_ms in seen:
                continue
            seen.add(s.timestamp_ms)
            picked.append(s)
            if len(picked) == max_frames:
                break
        out.extend(picked)
    return out


@dataclass(frozen=True)
class CompletionResult:
    media_votes: dict[str, int]
    tamper_objects: tuple[TamperObject, ...]
    processed: int
    elapsed_ms: float


def merge_tamper(observations) -> tuple[TamperObject, ...]:
    """Union of per-frame observations: max confidence and frame count per logo."""
    conf: dict[str, float] = {}
    frames: collections.Counter = collections.Counter()
    for obs in observations:
        for lid in set(obs.logo_ids):
            frames[lid] += 1
        for lid, c, _ in obs.objects:
            conf[lid] = max(conf.get(lid, 0.0), c)
    return tuple(TamperObject(lid, conf[lid], frames[lid]) for lid in sorted(conf))


def run_completion(frames: Sequence[SavedFrame], backends: Backends, profile: DeviceProfile,
                   cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                   session: ScanSession | None = None) -> CompletionResult:
    """Fake media and tamper models on the saved frames within the time budget."""
    if not frames:
        return CompletionResult({}, (), 0, 0.0)
    sess_seed = 0 if session is None else session.seed
    latency = _Latency(profile, cfg.jitter, [seed, sess_seed, 0xC0])
    works = [latency("fake_media", i) + latency("tamper", i, draw=1) for i in range(len(frames))]
    finish = share_schedule(works, cfg.resolved_workers(profile), cfg.speedup(profile),
                            cfg.completion_budget_ms)
    votes: collections.Counter = collections.Counter()
    observations = []
    done = 0
    for s, t in zip(frames, finish):
        if t > cfg.completion_budget_ms + _EPS:
            continue
        fseed = int(np.random.SeedSequence([seed, sess_seed, s.frame.index, 7]).generate_state(1)[0])
        try:
            media = backends.fake_media(s.frame, fseed)
            tamper = backends.tamper(s.frame, fseed)
        except Exception:
            log.warning("completion models failed on frame %d", s.frame.index, exc_info=True)
            continue
        votes[media.category] += 1
        observations.append(tamper)
        done += 1
    finished = [t for t in finish if t <= cfg.completion_budget_ms + _EPS]
    elapsed = cfg.completion_budget_ms if len(finished) < len(frames) else max(finished)
    return CompletionResult(dict(sorted(votes.items())), merge_tamper(observations), done, elapsed)


# -- main loop: virtual clock ----------------------------------------------------------

class _Scan:
    """Bookkeeping shared by both clocks."""

    def __init__(self, session: ScanSession, profile: DeviceProfile, cfg: PipelineConfig,
                 seed: int):
        self.session, self.profile, self.cfg, self.seed = session, profile, cfg, seed
        self.state = ScanState(max_saved=cfg.completion_max_frames)
        self.first_success: float | None = None
        self.window_close: float | None = None
        self.final: PanCandidate | None = None
        self.finalized = False
        self.zoom_used = False
        self.examined = self.processed = self.failed = 0
        self.latency = _Latency(profile, cfg.jitter, [seed, session.seed, 0x1A7])

    @property
    def ocr_enabled(self) -> bool:
        return not (self.finalized and self.cfg.stop_on_success)

    def start(self, frame: SessionFrame, backends, job: int) -> FrameOutcome:
        fseed = frame_seed(self.seed, self.session, frame.index)
        out = process_frame(frame, backends, self.latency, job, fseed, self.cfg,
                            self.ocr_enabled, not self.zoom_used)
        if out.zoomed:
            self.zoom_used = True
        return out

    def complete(self, out: FrameOutcome, now: float) -> None:
        self.examined += 1
        if out.failed:
            self.failed += 1
        side = SIDE_OF_CATEGORY.get(out.category or "")
        if side is not None:
            self.state.save(SavedFrame(out.frame, side, out.confidence, out.frame.timestamp_ms))
        if not out.ran_ocr:
            return
        self.processed += 1
        if self.finalized:
            return
        if out.expiry is not None:
            self.state.expiry_reads.append(out.expiry)
        if out.pan is not None and out.pan.luhn:
            self.state.enroll(now, out.pan)
            if self.first_success is None:
                self.first_success = now
                self.window_close = now + self.cfg.vote_window_ms

    def finalize(self) -> None:
        if self.finalized:
            return
        self.finalized = True
        cands = [c for _, c in self.state.candidates]
        if not cands:
            return
        self.final = vote_pan(cands) if self.cfg.vote else cands[0]
        self.state.phase = "completion"

    def back_side_done(self) -> bool:
        if not self.session.both_sides:
            return True
        return len(self.state.saved_frames.get("non_number", ())) >= self.cfg.back_frames_needed

    def result(self, backends, end: float, produced: int) -> ScanResult:
        self.finalize()
        gave_up = self.final is None
        completion = CompletionResult({}, (), 0, 0.0)
        if not gave_up:
            frames = select_completion_frames(self.state, self.cfg.completion_max_frames)
            completion = run_completion(frames, backends, self.profile, self.cfg, self.seed,
                                        self.session)
        self.state.phase = "done"
        return ScanResult(
            session_id=self.session.session_id,
            final_pan=None if self.final is None else self.final.digits,
            final_confidence=None if self.final is None else self.final.confidence,
            expiry=_vote_expiry(self.state.expiry_reads) if not gave_up else None,
            sides_seen=tuple(sorted(self.state.sides_seen)),
            media_votes=completion.media_votes,
            tamper_objects=completion.tamper_objects,
            frames_produced=produced, frames_examined=self.examined,
            frames_processed=self.processed, frames_failed=self.failed,
            duration_ms=end, gave_up=gave_up, mode=self.cfg.mode, profile=self.profile.name,
            pan_reads=tuple(c.digits for _, c in self.state.candidates),
            first_success_ms=self.first_success, zoom_used=self.zoom_used,
            completion_processed=completion.processed, completion_ms=completion.elapsed_ms,
        )


def _run_virtual(session: ScanSession, backends, profile: DeviceProfile,
                 cfg: PipelineConfig, seed: int, trace: list | None = None) -> ScanResult:
    scan = _Scan(session, profile, cfg, seed)
    frames = session.frames
    workers = cfg.resolved_workers(profile)
    speedup = cfg.speedup(profile)
    buf = FrameBuffer(cfg.buffer_capacity)
    active: list[list] = []     # [remaining work, job seq, outcome]
    resume_at = 0.0             # blocking mode: earliest frame the camera hands over
    now, nxt, job = 0.0, 0, 0
    end = None

    def dispatch(frame: SessionFrame):
        nonlocal job
        if trace is not None:
            # (start time, frame index, newest produced index)
            trace.append((now, frame.index, nxt - 1))
        active.append([0.0, job, None])
        out = scan.start(frame, backends, job)
        active[-1][0], active[-1][2] = out.work_ms, out
        job += 1

    while end is None:
        rate = min(1.0, speedup / len(active)) if active else 0.0
        t_done = now + min(a[0] for a in active) / rate if active else math.inf
        t_prod = frames[nxt].timestamp_ms if nxt < len(frames) else math.inf
        stops = [math.inf]
        if scan.first_success is None:
            if cfg.stop_on_success:
                stops.append(session.give_up_ms)
        elif not scan.finalized:
            stops.append(scan.window_close)
        if not cfg.stop_on_success:
            stops.append(session.end_ms)
        t = min(t_done, t_prod, *stops)
        if t == math.inf:
            # camera stopped and nothing is in flight
            end = max(now, session.end_ms)
            if scan.first_success is None:
                end = min(end, session.give_up_ms)
            break
        for a in active:
            a[0] -= rate * (t - now)
        now = t
        # completions first, in job order
        for a in sorted((a for a in active if a[0] <= _EPS), key=lambda a: a[1]):
            active.remove(a)
            scan.complete(a[2], now)
            if cfg.mode == "blocking":
                resume_at = now + profile.feed_resume_ms
        if cfg.stop_on_success and scan.first_success is None \
                and now >= session.give_up_ms - _EPS:
            end = float(session.give_up_ms)
            break
        if scan.window_close is not None and not scan.finalized and now >= scan.window_close - _EPS:
            scan.finalize()
        if not cfg.stop_on_success:
            if now >= session.end_ms - _EPS:
                end = session.end_ms
                break
        elif scan.finalized and scan.back_side_done():
            end = now
            break
        # productions
        while nxt < len(frames) and frames[nxt].timestamp_ms <= now + _EPS:
            f = frames[nxt]
            nxt += 1
            if cfg.mode == "blocking":
                if not active and f.timestamp_ms >= resume_at - _EPS:
                    dispatch(f)
            else:
                buf.push(f)
        # dispatch
        if cfg.mode != "blocking":
            while len(active) < workers and len(buf):
                dispatch(buf.pop())
    produced = sum(1 for f in frames if f.timestamp_ms < end - _EPS) if end > 0 else 0
    return scan.result(backends, end, produced)


# -- main loop: wall clock -------------------------------------------------------------

def _run_wall(session: ScanSession, backends, profile: DeviceProfile,
              cfg: PipelineConfig, seed: int) -> ScanResult:
    """Threaded run with real sleeps.  Timing, and therefore results, vary run to run."""
    scan = _Scan(session, profile, cfg, seed)
    scale = cfg.wall_time_scale
    workers = cfg.resolved_workers(profile)
    speedup = cfg.speedup(profile)
    buf = FrameBuffer(cfg.buffer_capacity)
    lock = threading.Lock()
    stop = threading.Event()
    counters = {"job": 0, "active": 0, "produced": 0}
    t0 = time.monotonic()

    def clock_ms() -> float:
        return (time.monotonic() - t0) * 1000.0 / scale

    def producer():
        for f in session.frames:
            delay = f.timestamp_ms * scale / 1000.0 - (time.monotonic() - t0)
            if stop.wait(max(0.0, delay)):
                return
            with lock:
                counters["produced"] += 1
            buf.push(f)
        buf.close()

    def worker():
        while not stop.is_set():
            f = buf.pop(block=True, timeout=0.05)
            if f is None:
                if buf._closed and not len(buf):
                    return
                continue
            with lock:
                j = counters["job"]
                counters["job"] += 1
                counters["active"] += 1
                out = scan.start(f, backends, j)
                share = max(1.0, counters["active"] / speedup)
            stop.wait(out.work_ms * share * scale / 1000.0)
            with lock:
                counters["active"] -= 1
                if not stop.is_set():
                    scan.complete(out, clock_ms())
            if cfg.mode == "blocking":
                # the camera was held while this frame ran
                buf.clear()
                if profile.feed_resume_ms:
                    stop.wait(profile.feed_resume_ms * scale / 1000.0)

    threads = [threading.Thread(target=producer, daemon=True)]
    threads += [threading.Thread(target=worker, daemon=True) for _ in range(workers)]
    for th in threads:
        th.start()
    end = None
    while end is None:
        time.sleep(min(0.01, 10 * scale / 1000.0))
        now = clock_ms()
        with lock:
            if scan.first_success is None and now >= session.give_up_ms:
                end = float(session.give_up_ms)
            elif scan.window_close is not None and now >= scan.window_close:
                scan.finalize()
                if not cfg.stop_on_success:
                    if now >= session.end_ms:
                        end = now
                elif scan.back_side_done():
                    end = now
            elif not any(th.is_alive() for th in threads):
                end = now
            if not cfg.stop_on_success and now >= session.end_ms:
                end = now
    stop.set()
    buf.close()
    for th in threads:
        th.join(timeout=5)
    with lock:
        return scan.result(backends, end, counters["produced"])


def run_scan(session: ScanSession, backends: Backends, profile: DeviceProfile,
             cfg: PipelineConfig = PipelineConfig(), seed: int | None = None,
             trace: list | None = None) -> ScanResult:
    """Run one scan session through the main and completion loops.

    Under the virtual clock, ``trace`` (if given) receives one
    (start_ms, frame_index, newest_produced_index) tuple per dispatched frame.
    """
    if not session.frames:
        raise ValueError(f"session {session.session_id!r} has no frames")
    seed = cfg.seed if seed is None else seed
    if cfg.clock == "wall":
        return _run_wall(session, backends, profile, cfg, seed)
    return _run_virtual(session, backends, profile, cfg, seed, trace)

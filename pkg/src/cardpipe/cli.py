"""``cardpipe`` command line: synth, scan, decode, bench and verdict.

Machine-readable results go to stdout, logs to stderr.  Files are only
written under ``--out``.  Exit codes: 0 success (or verdict pass), 1 usage
or I/O error, 2 verdict reject, 3 verdict inconclusive.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench, cardsynth, infer, ocrdecode, pipeline, verdict

log = logging.getLogger("cardpipe")

STANDARD_CORPUS_SIZE = 500


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which would collide with "reject"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _rates(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad error rates {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("expected four comma-separated rates: ed,ec,em,et")
    return vals


def _csv_list(text: str) -> list[str]:
    return [x for x in text.split(",") if x]


def _profiles(specs: list[str] | None) -> list[infer.DeviceProfile]:
    if not specs:
        return list(infer.load_profiles().values())
    out = []
    for spec in specs:
        for item in _csv_list(spec):
            path = Path(item)
            if path.suffix == ".json" and path.exists():
                out.extend(infer.load_profiles(path).values())
            else:
                out.append(infer.find_profile(item))
    return out


def _one_profile(specs: list[str] | None, default: str) -> infer.DeviceProfile:
    profiles = _profiles(specs or [default])
    if len(profiles) != 1:
        raise UsageError("exactly one --profile is needed here")
    return profiles[0]


def _backends(args, errors: tuple[float, ...], seed: int):
    cfg = infer.BackendConfig.from_rates(errors, seed=seed)
    oracle = infer.OracleBackend(cfg)
    return oracle if args.backend == "oracle" else infer.TemplateBackend(oracle)


def _out_dir(args) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# -- subcommands ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("synth needs --out")
    ranges = cardsynth.CorpusRanges()
    if args.ranges:
        ranges = cardsynth.CorpusRanges.from_dict(json.loads(Path(args.ranges).read_text()))
    if args.media:
        ranges = dataclasses.replace(ranges, media=tuple(_csv_list(args.media)))
    manifest = cardsynth.generate_corpus(args.out, args.count, ranges, seed=args.seed,
                                         write_frames=not args.no_frames,
                                         frame_format=args.format)
    _emit(json.dumps({"out": str(args.out), "sessions": manifest["count"], "seed": args.seed}))
    return 0


def _load_session(args) -> cardsynth.ScanSession:
    if args.corpus:
        return cardsynth.load_session(args.corpus, args.session)
    plan = dict(cardsynth.corpus_plan(STANDARD_CORPUS_SIZE, args.corpus_seed))
    if args.session not in plan:
        raise UsageError(f"unknown session {args.session!r} in the standard corpus")
    return cardsynth.sample_session(cardsynth.CorpusRanges(), plan[args.session], args.session)


def cmd_scan(args) -> int:
    session = _load_session(args)
    profile = _one_profile(args.profile, "pixel-2-like")
    cfg = pipeline.PipelineConfig(mode=args.mode, workers=args.workers, seed=args.seed)
    backends = _backends(args, args.error_rates, args.seed)
    result = pipeline.run_scan(session, backends, profile, cfg)
    text = json.dumps(result.to_report(unmasked=args.unmasked), indent=2)
    out = _out_dir(args)
    if out is not None:
        (out / f"scan-{session.session_id}.json").write_text(text + "\n")
    _emit(text)
    return 0


def cmd_decode(args) -> int:
    out = ocrdecode.read_head(args.tensor)
    boxes, pan, expiry = ocrdecode.read_pipeline(out, score_threshold=args.score_threshold,
                                                 iou_threshold=args.iou_threshold)
    if not boxes:
        _emit("no candidates")
        return 0
    doc = {
        "boxes": [ocrdecode.box_to_dict(b) for b in boxes],
        "pan": None if pan is None else {
            "digits": pan.digits if args.unmasked else pipeline.mask_pan(pan.digits),
            "confidence": round(pan.confidence, 6),
            "luhn": pan.luhn,
        },
        "expiry": None if expiry is None else f"{expiry[0]:02d}/{expiry[1]:02d}",
    }
    _emit(json.dumps(doc, indent=2))
    return 0


def cmd_bench(args) -> int:
    out = _out_dir(args)
    errors = args.error_rates or (bench.DEFAULT_DIGIT_ERROR, 0.0, 0.0, 0.0)
    backends = _backends(args, errors, args.seed)
    if args.experiment == "modes":
        profile = _one_profile(args.profile, "lg-k20-like")
        modes = args.modes or list(pipeline.MODES)
        seeds = list(range(args.seed, args.seed + args.repeats))
        rows = bench.compare_modes(profile, seeds=seeds, backends=backends, modes=modes,
                                   workers=args.workers)
        text = bench.rows_to_csv(bench.mode_rows_to_sweep(rows))
        if out is not None:
            (out / "modes.csv").write_text(text)
            bench.write_summary({"profile": profile.to_dict(),
                                 "mean_fps": bench.mean_fps_by_mode(rows)}, out / "modes.json")
    elif args.experiment == "sweep":
        spec = bench.SweepSpec(
            profiles=tuple(_profiles(args.profile)),
            modes=tuple(args.modes or ["parallel"]),
            corpus=args.corpus, count=args.count, corpus_seed=args.corpus_seed,
            errors=infer.BackendConfig.from_rates(errors, seed=args.seed),
            seed=args.seed, backend=args.backend, workers=args.workers, jobs=args.jobs)
        rows = bench.run_sweep(spec)
        text = bench.rows_to_csv(rows)
        if out is not None:
            (out / "sweep.csv").write_text(text)
            bench.write_summary(bench.summarize(spec, rows), out / "summary.json")
            bench.write_curve_tsv(rows, out / "curve.tsv")
    else:
        fps = [float(x) for x in _csv_list(args.fps)]
        lines = ["session_id,fps,processed,useful,fraction"]
        for i in range(args.sessions):
            sess = bench.useful_session(args.seed + i)
            for st in bench.useful_frames(sess, fps, backends, seed=args.seed):
                lines.append(f"{sess.session_id},{st.fps:g},{st.processed},{st.useful},"
                             f"{st.fraction:.6f}")
        text = "\n".join(lines) + "\n"
        if out is not None:
            (out / "useful.csv").write_text(text)
    _emit(text)
    return 0


def cmd_verdict(args) -> int:
    payload = verdict.parse_payload(Path(args.report).read_bytes())
    expected = verdict.ExpectedCard.from_dict(json.loads(Path(args.expected).read_text()))
    rules = verdict.RulesConfig(required_sides=tuple(_csv_list(args.required_sides)),
                                tamper_min_frames=args.tamper_min_frames)
    v = verdict.decide(payload, expected, rules)
    text = json.dumps({"session_id": payload.session_id, **v.to_dict()}, indent=2)
    out = _out_dir(args)
    if out is not None:
        (out / f"verdict-{payload.session_id}.json").write_text(text + "\n")
    _emit(text)
    return v.exit_code


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cardpipe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False):
        sp.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
        sp.add_argument("--out", help="output directory; nothing is written elsewhere")

    def run_flags(sp):
        sp.add_argument("--profile", action="append", help="profile name or JSON file")
        sp.add_argument("--mode", choices=pipeline.MODES, default="parallel")
        sp.add_argument("--workers", type=int, default=None)
        sp.add_argument("--backend", choices=("oracle", "template"), default="oracle")
        sp.add_argument("--corpus", help="corpus directory written by synth")
        sp.add_argument("--corpus-seed", type=int, default=0,
                        help="seed of the in-memory standard corpus when --corpus is absent")

    sp = sub.add_parser("synth", help="write a synthetic scan corpus")
    common(sp, seed_required=True)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--format", choices=("png", "ppm"), default="png")
    sp.add_argument("--no-frames", action="store_true", help="write session metadata only")
    sp.add_argument("--media", help="comma list of media to sample from")
    sp.add_argument("--ranges", help="JSON file of corpus parameter ranges")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("scan", help="run one session through the pipeline")
    common(sp)
    run_flags(sp)
    sp.add_argument("--session", required=True)
    sp.add_argument("--error-rates", type=_rates, default=(0.0, 0.0, 0.0, 0.0))
    sp.add_argument("--unmasked", action="store_true", help="print the full card number")
    sp.set_defaults(func=cmd_scan)

    sp = sub.add_parser("decode", help="decode a DDHEAD01 head-output file")
    sp.add_argument("tensor")
    sp.add_argument("--score-threshold", type=float, default=ocrdecode.DEFAULT_SCORE_THRESHOLD)
    sp.add_argument("--iou-threshold", type=float, default=ocrdecode.DEFAULT_IOU_THRESHOLD)
    sp.add_argument("--unmasked", action="store_true")
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("bench", help="benchmarks under the virtual clock")
    common(sp, seed_required=True)
    run_flags(sp)
    sp.add_argument("--experiment", choices=("modes", "sweep", "useful"), default="modes")
    sp.add_argument("--modes", type=_csv_list, help="comma list of modes")
    sp.add_argument("--count", type=int, default=STANDARD_CORPUS_SIZE)
    sp.add_argument("--repeats", type=int, default=1, help="seeds per mode (modes experiment)")
    sp.add_argument("--fps", default="1,2,3,4,5,6,7,8,9,10", help="useful-frames rates")
    sp.add_argument("--sessions", type=int, default=27, help="sessions for the useful experiment")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    sp.add_argument("--error-rates", type=_rates, default=None)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("verdict", help="apply the decision rules to a scan report")
    sp.add_argument("--report", required=True)
    sp.add_argument("--expected", required=True)
    sp.add_argument("--out")
    sp.add_argument("--required-sides", default="number")
    sp.add_argument("--tamper-min-frames", type=int, default=2)
    sp.set_defaults(func=cmd_verdict)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        level=logging.WARNING - 10 * min(args.verbose, 2))
    try:
        return args.func(args)
    except UsageError as e:
        print(f"cardpipe: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as e:
        print(f"cardpipe: error: {e}", file=sys.stderr)
        return 1

import csv
import io

import pytest

from cardpipe import bench
from cardpipe import infer

PROFILES = infer.load_profiles()


def row(profile, fps, success, sid="s", mode="parallel"):
    return bench.SweepRow(profile, mode, sid, success, fps, 1000.0, 1)


def test_bucket_by_session():
    rows = [row("a", 0.5, False), row("a", 1.5, True), row("b", 2.0, True), row("b", 9, False)]
    b = bench.bucket_by_fps(rows)
    assert [x.sessions for x in b.buckets] == [1, 1, 2]
    assert b["<1"].success_rate == 0.0 and b[">=2"].success_rate == 0.5
    assert b.total == 4
    with pytest.raises(KeyError):
        b["2-3"]


def test_bucket_by_profile_uses_device_mean():
    rows = [row("a", 0.5, False), row("a", 1.7, True), row("b", 3.0, True)]
    b = bench.bucket_by_fps(rows, by="profile")   # a's mean is 1.1
    assert [x.sessions for x in b.buckets] == [0, 2, 1]
    assert b["<1"].to_dict()["success_rate"] is None
    with pytest.raises(ValueError):
        bench.bucket_by_fps(rows, by="device")


def test_csv_round_trip(tmp_path):
    rows = [row("a", 1.25, True, "s000"), row("b", 0.5, False, "s001")]
    path = tmp_path / "x.csv"
    bench.write_csv(rows, path)
    assert bench.read_csv(path) == rows
    parsed = list(csv.reader(io.StringIO(path.read_text())))
    assert tuple(parsed[0]) == bench.CSV_HEADER
    assert parsed[1] == ["a", "parallel", "s000", "1", "1.250000", "1000.000", "1"]
    (tmp_path / "bad.csv").write_text("a,b\n")
    with pytest.raises(ValueError):
        bench.read_csv(tmp_path / "bad.csv")


def test_small_sweep_is_deterministic_and_ordered(tmp_path):
    spec = bench.SweepSpec(profiles=(PROFILES["iphone-xr-like"], PROFILES["lg-k20-like"]),
                           count=4, errors=infer.BackendConfig(0.1))
    rows = bench.run_sweep(spec)
    assert len(rows) == 8
    assert [r.profile for r in rows] == ["iphone-xr-like"] * 4 + ["lg-k20-like"] * 4
    assert rows == bench.run_sweep(spec)
    summary = bench.summarize(spec, rows)
    assert summary["metadata"]["count"] == 4
    assert summary["metadata"]["duration_includes_vote_window"] is True
    bench.write_curve_tsv(rows, tmp_path / "c.tsv")
    assert len((tmp_path / "c.tsv").read_text().splitlines()) == 3


def test_sweep_parallel_jobs_match_serial():
    base = dict(profiles=(PROFILES["pixel-2-like"],), count=3)
    assert bench.run_sweep(bench.SweepSpec(**base)) == bench.run_sweep(bench.SweepSpec(**base, jobs=2))


def test_sweep_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        bench.SweepSpec(profiles=())
    with pytest.raises(ValueError):
        bench.SweepSpec(profiles=(PROFILES["pixel-2-like"],), modes=("warp",))
    with pytest.raises(FileNotFoundError):
        bench.run_sweep(bench.SweepSpec(profiles=(PROFILES["pixel-2-like"],),
                                        corpus=str(tmp_path)))


def test_compare_modes_rows():
    rows = bench.compare_modes(PROFILES["iphone-se-like"], seeds=(0,))
    assert [r.mode for r in rows] == list(bench.MODES)
    assert all(r.duration_ms == pytest.approx(bench.MODE_RUN_MS) for r in rows)
    means = bench.mean_fps_by_mode(rows)
    assert means["parallel"] >= means["buffered"] >= means["blocking"]
    assert len(bench.mode_rows_to_sweep(rows)) == 3


def test_subsample_indices():
    s = bench.useful_session(0, duration_ms=1000)
    assert bench.subsample_indices(s, 30) == list(range(30))
    assert bench.subsample_indices(s, 10) == list(range(0, 30, 3))
    assert bench.subsample_indices(s, 1) == [0]
    with pytest.raises(ValueError):
        bench.subsample_indices(s, 60)
    with pytest.raises(ValueError):
        bench.subsample_indices(s, 0)


def test_useful_frames_clean_is_all_useful():
    s = bench.useful_session(1, duration_ms=2000)
    stats = bench.useful_frames(s, [1, 5, 10])
    assert [st.processed for st in stats] == [2, 10, 20]
    assert all(st.fraction == 1.0 for st in stats)

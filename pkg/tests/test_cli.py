import json
import subprocess
import sys

import pytest

from cardpipe import cardsynth as cs
from cardpipe import infer
from cardpipe import ocrdecode as od
from cardpipe.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_synth_and_scan_from_corpus(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    code, out, _ = run(capsys, "synth", "--seed", "3", "--count", "2", "--no-frames",
                       "--out", str(corpus))
    assert code == 0 and json.loads(out)["sessions"] == 2
    code, out, _ = run(capsys, "scan", "--corpus", str(corpus), "--session", "s001",
                       "--profile", "iphone-xr-like", "--out", str(tmp_path / "r"))
    assert code == 0
    rep = json.loads(out)
    pan = cs.load_manifest(corpus)["sessions"][1]["pan"]
    assert rep["final_pan"] == pan[:6] + "*" * (len(pan) - 10) + pan[-4:]
    assert (tmp_path / "r" / "scan-s001.json").read_text() == out


def test_scan_standard_corpus_unmasked(capsys):
    code, out, _ = run(capsys, "scan", "--session", "s000", "--profile", "iphone-xr-like",
                       "--unmasked")
    assert code == 0
    sid_seed = dict(cs.corpus_plan(500, 0))["s000"]
    pan = cs.sample_session(cs.CorpusRanges(), sid_seed, "s000").expected.pan
    assert json.loads(out)["final_pan"] == pan


def test_scan_unknown_session(capsys):
    code, _, err = run(capsys, "scan", "--session", "zzz")
    assert code == 1 and "unknown session" in err


def test_usage_errors_exit_one(capsys):
    assert run(capsys, "bench")[0] == 1            # --seed is required
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "scan", "--session", "s000", "--error-rates", "0.1")[0] == 1
    assert run(capsys, "scan", "--session", "s000", "--profile", "nope")[0] == 1


def test_decode(tmp_path, capsys):
    spec = cs.CardSpec(pan="4111111111111111", expiry=(5, 30))
    truth = cs.layout_truth(spec, cs.SceneSpec("number", (30, 19, 540, 338), True))
    path = tmp_path / "h.bin"
    od.write_head(path, infer.oracle_ocr(truth, rng=0))
    code, out, _ = run(capsys, "decode", str(path))
    doc = json.loads(out)
    assert code == 0
    assert doc["pan"]["digits"] == "411111******1111" and doc["expiry"] == "05/30"
    assert len(doc["boxes"]) == 20
    empty = tmp_path / "e.bin"
    od.write_head(empty, od.RawHeadOutput.background())
    assert run(capsys, "decode", str(empty))[1].strip() == "no candidates"
    empty.write_bytes(b"garbage")
    assert run(capsys, "decode", str(empty))[0] == 1


def test_bench_modes(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--seed", "0", "--experiment", "modes",
                       "--profile", "iphone-se-like", "--out", str(tmp_path))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].startswith("profile,mode") and len(lines) == 4
    means = json.loads((tmp_path / "modes.json").read_text())["mean_fps"]
    assert means["parallel"] >= means["buffered"] >= means["blocking"]


def test_bench_sweep_and_useful(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--seed", "1", "--experiment", "sweep", "--count", "3",
                       "--profile", "iphone-xr-like,lg-k20-like", "--out", str(tmp_path))
    assert code == 0 and len(out.strip().splitlines()) == 7
    assert {p.name for p in tmp_path.iterdir()} == {"sweep.csv", "summary.json", "curve.tsv"}
    code, out, _ = run(capsys, "bench", "--seed", "1", "--experiment", "useful",
                       "--sessions", "2", "--fps", "1,5")
    assert code == 0 and len(out.strip().splitlines()) == 5


def _report(tmp_path, **kw):
    rep = dict(session_id="s1", final_pan="411111******1111", expiry=None,
               sides_seen=["number"], media_votes={"physical": 4}, tamper_objects=[],
               frames_produced=10, frames_processed=5, fps=5.0, duration_ms=1000.0,
               gave_up=False, mode="parallel", profile="x")
    rep.update(kw)
    p = tmp_path / "rep.json"
    p.write_text(json.dumps(rep))
    e = tmp_path / "exp.json"
    e.write_text(json.dumps({"pan_on_record": "4111111111111111"}))
    return str(p), str(e)


@pytest.mark.parametrize("kw,code,decision", [
    ({}, 0, "pass"),
    ({"final_pan": "555555******4444"}, 2, "reject"),
    ({"final_pan": None}, 3, "inconclusive"),
    ({"media_votes": {"screen": 3, "physical": 2}}, 2, "reject"),
])
def test_verdict_exit_codes(tmp_path, capsys, kw, code, decision):
    rep, exp = _report(tmp_path, **kw)
    got, out, _ = run(capsys, "verdict", "--report", rep, "--expected", exp)
    assert got == code
    assert json.loads(out)["decision"] == decision


def test_verdict_bad_payload(tmp_path, capsys):
    rep, exp = _report(tmp_path)
    d = json.loads(open(rep).read())
    del d["fps"]
    open(rep, "w").write(json.dumps(d))
    code, _, err = run(capsys, "verdict", "--report", rep, "--expected", exp)
    assert code == 1 and "fps" in err


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "cardpipe", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0
    for sub in ("synth", "scan", "decode", "bench", "verdict"):
        assert sub in proc.stdout

import json
import logging

import pytest

from cardpipe import verdict as vd

VISA = "4111111111111111"
MC = "5555555555554444"


def payload(**kw):
    base = dict(session_id="s1", final_pan="411111******1111", expiry="03/29",
                sides_seen=["number"], media_votes={"physical": 6},
                tamper_objects=[{"logo_id": "visa", "confidence": 0.9, "frames": 6}],
                frames_produced=100, frames_processed=40, fps=10.0, duration_ms=4000.0,
                gave_up=False, mode="parallel", profile="pixel-2-like")
    base.update(kw)
    return vd.payload_from_dict(base)


def decide(expected=VISA, issuer=None, **kw):
    return vd.decide(payload(**kw), vd.ExpectedCard(expected, issuer))


@pytest.mark.parametrize("pan,net", [(VISA, "visa"), (MC, "mastercard"),
                                     ("2221000000000009", "mastercard"),
                                     ("2720990000000007", "mastercard"),
                                     ("378282246310005", "amex"), ("341111111111111", "amex"),
                                     ("6011111111111117", "discover"),
                                     ("6500000000000002", "discover"),
                                     ("3530111333300000", "unknown"),
                                     ("2720999999999996", "mastercard"),
                                     ("2721000000000004", "unknown"),
                                     ("411111******1111", "visa")])
def test_bin_network(pan, net):
    assert vd.bin_network(pan) == net


def test_bin_network_errors():
    with pytest.raises(ValueError):
        vd.bin_network("4111")
    with pytest.raises(ValueError):
        vd.bin_network("41****1111111111")


def test_pass():
    v = decide()
    assert v.decision == "pass" and v.reasons == () and v.exit_code == 0


def test_no_ocr_first():
    v = decide(final_pan=None, media_votes={"screen": 5})
    assert (v.decision, v.reasons) == ("inconclusive", ("no_ocr",))
    assert v.exit_code == 3


def test_pan_mismatch():
    v = decide(final_pan="401288******1881")
    assert (v.decision, v.reasons, v.evidence) == ("reject", ("pan_mismatch",),
                                                   {"pan_mismatch": "final_pan"})
    assert decide(final_pan=VISA).decision == "pass"
    assert decide(final_pan="4111111111111111").decision == "pass"


@pytest.mark.parametrize("votes,want", [
    ({"screen": 3, "physical": 2}, ("reject", ("fake_media",))),
    ({"physical": 3, "screen": 2}, ("pass", ())),
    ({"physical": 2, "paper": 2}, ("inconclusive", ("media_tie",))),
    ({"screen": 2, "paper": 2, "physical": 1}, ("reject", ("fake_media",))),
    ({}, ("pass", ())),
])
def test_media_rule(votes, want):
    v = decide(media_votes=votes)
    assert (v.decision, v.reasons) == want


def test_tamper_bin_inconsistency():
    objs = [{"logo_id": "mastercard", "confidence": 0.9, "frames": 2}]
    v = decide(tamper_objects=objs)
    assert (v.decision, v.reasons) == ("reject", ("tamper_inconsistent",))
    # a single frame is not enough evidence
    objs1 = [{"logo_id": "mastercard", "confidence": 0.9, "frames": 1}]
    assert decide(tamper_objects=objs1).decision == "pass"


def test_tamper_issuer():
    objs = [{"logo_id": "bank_b", "confidence": 0.9, "frames": 3}]
    assert decide(issuer="bank_a", tamper_objects=objs).reasons == ("tamper_inconsistent",)
    assert decide(issuer="bank_b", tamper_objects=objs).decision == "pass"
    assert decide(tamper_objects=objs).decision == "pass"


def test_missing_side():
    v = vd.decide(payload(), vd.ExpectedCard(VISA), vd.RulesConfig(("number", "non_number")))
    assert (v.decision, v.reasons) == ("inconclusive", ("missing_side",))


def test_rule_order():
    # a fake medium outranks logo conflicts and missing sides
    v = vd.decide(payload(media_votes={"screen": 4},
                          tamper_objects=[{"logo_id": "amex", "confidence": 0.9, "frames": 4}]),
                  vd.ExpectedCard(VISA), vd.RulesConfig(("number", "non_number")))
    assert v.reasons == ("fake_media",)


def test_payload_round_trip():
    p = payload(media_votes={"screen": 1, "physical": 3})
    data = vd.serialize_payload(p)
    assert vd.parse_payload(data) == p
    assert vd.serialize_payload(vd.parse_payload(data)) == data
    assert list(json.loads(data)["media_votes"]) == ["physical", "screen"]


@pytest.mark.parametrize("field", ["final_pan", "media_votes", "gave_up", "profile"])
def test_missing_field(field):
    d = payload().to_dict()
    del d[field]
    with pytest.raises(vd.PayloadError) as e:
        vd.payload_from_dict(d)
    assert e.value.path == field


@pytest.mark.parametrize("field,value,path", [
    ("frames_processed", True, "frames_processed"), ("fps", "fast", "fps"),
    ("sides_seen", ["number", 3], "sides_seen[1]"),
    ("media_votes", {"screen": 1.5}, "media_votes.screen"),
    ("tamper_objects", [{"logo_id": "visa", "confidence": 0.9}], "tamper_objects[0].frames"),
])
def test_type_errors(field, value, path):
    d = payload().to_dict()
    d[field] = value
    with pytest.raises(vd.PayloadError) as e:
        vd.payload_from_dict(d)
    assert e.value.path == path


def test_unknown_fields_logged(caplog):
    d = dict(payload().to_dict(), zoom_used=True, frames_failed=0)
    with caplog.at_level(logging.INFO, logger="cardpipe.verdict"):
        p = vd.payload_from_dict(d)
    assert p == payload()
    assert "frames_failed, zoom_used" in caplog.text


def test_bad_json():
    with pytest.raises(vd.PayloadError):
        vd.parse_payload(b"{nope")
    with pytest.raises(vd.PayloadError):
        vd.parse_payload(b"[1, 2]")


def test_expected_card_validation():
    with pytest.raises(ValueError):
        vd.ExpectedCard("4111111111111112")
    with pytest.raises(ValueError):
        vd.ExpectedCard(VISA, issuer="visa")
    with pytest.raises(vd.PayloadError):
        vd.ExpectedCard.from_dict({})


def test_verdict_invariants():
    with pytest.raises(ValueError):
        vd.Verdict("pass", ("no_ocr",))
    with pytest.raises(ValueError):
        vd.Verdict("reject")
    with pytest.raises(ValueError):
        vd.Verdict("maybe", ("x",))


def test_masked():
    p = payload(final_pan=VISA)
    assert vd.masked(p).final_pan == "411111******1111"
    assert vd.masked(payload(final_pan=None)).final_pan is None

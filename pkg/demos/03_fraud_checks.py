"""Two attacks the server rules catch: a card shown on a screen, and a
Visa number on a card whose network logo reads Mastercard.

    python demos/03_fraud_checks.py
"""

from dataclasses import replace

from cardpipe import cardsynth, infer, verdict
from cardpipe.pipeline import PipelineConfig, run_scan

PAN = "4111111111111111"
profile = infer.find_profile("iphone-se-like")
backends = infer.OracleBackend()
expected = verdict.ExpectedCard(PAN)


def scan(card, media="physical"):
    script = cardsynth.SessionScript(centered_frames=200, media=media)
    session = cardsynth.generate_session(card, script, seed=1, session_id=media)
    return verdict.payload_from_result(run_scan(session, backends, profile, PipelineConfig()))


honest = cardsynth.CardSpec(pan=PAN, number_side_logos=(
    cardsynth.LogoMark("visa", (0.76, 0.74, 0.17, 0.18)),))
for label, payload in [
    ("physical card", scan(honest)),
    ("replayed on a phone screen", scan(honest, media="screen")),
    ("mastercard logo pasted on", scan(replace(honest, number_side_logos=(
        cardsynth.LogoMark("mastercard", (0.76, 0.74, 0.17, 0.18)),)))),
]:
    v = verdict.decide(payload, expected)
    print(f"{label:<28} media={payload.media_votes} "
          f"logos={[t.logo_id for t in payload.tamper_objects]} -> {v.decision} {list(v.reasons)}")

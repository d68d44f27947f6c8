"""Scan one synthetic card on an iPhone SE-class phone, then ask the server for a verdict.

    python demos/01_single_scan.py
"""

import json

from cardpipe import cardsynth, infer, verdict
from cardpipe.pipeline import PipelineConfig, run_scan

# a card, and a user who takes half a second to center it
card = cardsynth.CardSpec(
    pan="4111111111111111", expiry=(8, 29),
    number_side_logos=(cardsynth.LogoMark("bank_a", (0.06, 0.08, 0.15, 0.2)),
                       cardsynth.LogoMark("visa", (0.76, 0.74, 0.17, 0.18))))
script = cardsynth.SessionScript(entry_frames=15, centered_frames=300)
session = cardsynth.generate_session(card, script, seed=2, session_id="demo")

# the oracle misreads each digit 15% of the time; voting cleans that up
backends = infer.OracleBackend(infer.BackendConfig(digit_error_rate=0.15))
profile = infer.find_profile("iphone-se-like")
result = run_scan(session, backends, profile, PipelineConfig(mode="parallel"))

# misreads that still pass Luhn disagree with each other, so the true number
# wins the plurality even when it is outnumbered overall
print(f"{len(result.pan_reads)} Luhn-valid reads, "
      f"{sum(p != card.pan for p in result.pan_reads)} of them wrong:")
for read in result.pan_reads:
    print("  ", read, "ok" if read == card.pan else "misread")   # a public test number
print(json.dumps(result.to_report(), indent=2))

payload = verdict.payload_from_result(result)
v = verdict.decide(payload, verdict.ExpectedCard(card.pan, issuer="bank_a"))
print("verdict:", v.decision, list(v.reasons))

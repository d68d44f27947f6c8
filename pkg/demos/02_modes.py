"""Blocking vs buffered vs parallel on each calibrated phone, 20 s of centered card.

    python demos/02_modes.py
"""

from cardpipe import bench, infer

CALIBRATED = ("iphone-5s-like", "iphone-se-like", "iphone-xr-like",
              "lg-k20-like", "xiaomi-redmi-7-like", "pixel-2-like")

profiles = infer.load_profiles()
print(f"{'profile':<22}{'blocking':>10}{'buffered':>10}{'parallel':>10}")
for name in CALIBRATED:
    fps = bench.mean_fps_by_mode(bench.compare_modes(profiles[name], seeds=(0, 1, 2)))
    print(f"{name:<22}{fps['blocking']:>10.2f}{fps['buffered']:>10.2f}{fps['parallel']:>10.2f}")

#!/usr/bin/env python3
"""Tiles, the on-disk container, PNG export and cloud screening.

Walks through the data plane: build tiles in memory, round-trip them
through the portable binary format, export an RGB preview, decode a QA60
quality band and screen a tile with the brightness-saturation heuristic.
"""

import tempfile
from pathlib import Path

import numpy as np

from sar2rgb import (
    BandRole,
    HeuristicParams,
    Sensor,
    Tile,
    TileMeta,
    decode_qa60,
    export_png,
    heuristic_cloud_mask,
    read_tile,
    screen_tile,
    write_tile,
)

out = Path(tempfile.mkdtemp(prefix="sar2rgb_demo1_"))
print(f"writing outputs under {out}\n")

# --- an RGB tile and the bit-exact container --------------------------------

rng = np.random.default_rng(7)
rgb = Tile(
    rng.random((3, 64, 64), dtype=np.float32) * 0.5,
    (BandRole.RED, BandRole.GREEN, BandRole.BLUE),
    TileMeta("demo_tile", "2021-06-01", Sensor.S2),
)
write_tile(rgb, out / "demo.s2tl")
back = read_tile(out / "demo.s2tl")
print("round trip bit-exact:", back == rgb)
print("container size on disk:", (out / "demo.s2tl").stat().st_size, "bytes")

export_png(rgb, out / "demo.png")
print("8-bit preview written:", out / "demo.png")

# --- QA60 decoding -----------------------------------------------------------

qa_values = np.zeros((8, 8), dtype=np.float32)
qa_values[0, 0] = 1 << 10          # opaque cloud
qa_values[0, 1] = 1 << 11          # cirrus
qa_values[0, 2] = (1 << 10) | (1 << 11)
qa_values[0, 3] = 1 << 9           # some other flag: ignored
qa60 = Tile(qa_values[None], (BandRole.QA60,), TileMeta("demo_tile", sensor=Sensor.QA60))
mask = decode_qa60(qa60)
print("\nQA60 cloudy pixels:", int(mask.flags.sum()), "(bits 10/11 only)")

# --- heuristic screening -----------------------------------------------------

# paint a bright washed-out disc onto a dark scene
scene = np.full((3, 64, 64), 0.15, dtype=np.float32)
yy, xx = np.mgrid[0:64, 0:64]
disc = (yy - 32) ** 2 + (xx - 40) ** 2 <= 12**2
for c in range(3):
    scene[c][disc] = 0.94 + 0.01 * c
cloudy_tile = Tile(scene, (BandRole.RED, BandRole.GREEN, BandRole.BLUE),
                   TileMeta("cloudy", sensor=Sensor.S2))

params = HeuristicParams()  # score > 0.65 and brightness > 0.35
mask = heuristic_cloud_mask(cloudy_tile, params)
report = screen_tile(cloudy_tile, qa60=None, params=params)
print("heuristic cloud pixels:", int(mask.flags.sum()), "of", mask.flags.size)
print("screen report:", report.to_json())

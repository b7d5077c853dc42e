"""Synthetic paired SAR/optical corpora for tests and demos.

Each pair is built from two smooth procedural backscatter fields (VV and
VH, in dB within [-25, 0]). The RGB tile is a fixed smooth pointwise
function of those fields (so the translation is learnable); the stored
SAR tile is the fields plus seeded per-pixel speckle, the way a radar
sensor would observe them. The speckle makes the observed-SAR -> RGB
task irreducibly ambiguous, like real data: a pixel-loss model does best
by predicting the conditional median, while adversarial sharpening costs
pixel accuracy. Set ``speckle_db=0`` for a noiseless corpus where RGB is
an exact function of the stored tile.

A seeded subset of optical tiles receives a bright low-saturation disc
-- which trips the heuristic cloud test -- and the matching QA60 pixels
get the opaque-cloud bit. The clean color mapping stays saturated and
dim enough that no clean pixel ever screens as cloudy or nodata under
the default thresholds.

Fully determined by the seed: regenerating a corpus is byte-identical.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .cloudscreen import QA60_OPAQUE_CLOUD_BIT
from .curation import PairRecord, write_pair_manifest
from .rastercore import RGB_ROLES, SAR_ROLES, BandRole, Sensor, Tile, TileMeta, write_tile
from .seeding import SplitMix64, fisher_yates

MANIFEST_NAME = "pairs.jsonl"
SPECKLE_DB = 2.5  # observation-noise amplitude on stored SAR tiles


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random field in [0, 1]: a few low-frequency cosine waves
    squashed through a sigmoid."""
    u = np.linspace(0.0, 1.0, size, endpoint=False, dtype=np.float64)
    uu, vv = np.meshgrid(u, u, indexing="ij")
    acc = np.zeros((size, size), dtype=np.float64)
    for _ in range(6):
        p, q = rng.integers(-3, 4, size=2)
        amp = rng.uniform(0.3, 1.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        acc += amp * np.cos(2.0 * np.pi * (p * uu + q * vv) + phase)
    return 1.0 / (1.0 + np.exp(-1.5 * acc))


def sar_to_rgb_reference(vv_db: np.ndarray, vh_db: np.ndarray) -> np.ndarray:
    """The fixed pointwise mapping the corpus uses as ground truth.

    Coefficients are chosen so the whole unit square of (VV, VH) maps to
    colors that are too saturated or too dark for the default heuristic
    cloud test, and never hit the nodata sentinel.
    """
    vvn = (vv_db + 25.0) / 25.0
    vhn = (vh_db + 25.0) / 25.0
    r = 0.10 + 0.45 * vvn
    g = 0.08 + 0.30 * vvn + 0.22 * vhn
    b = 0.06 + 0.38 * vhn
    return np.stack([r, g, b]).astype(np.float32)


def _disc_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    radius = rng.uniform(size / 8.0, size / 5.0)
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def synth_fixture(
    n_pairs: int,
    size: int,
    cloud_fraction: float,
    seed: int,
    out_dir: str | Path,
    speckle_db: float = SPECKLE_DB,
) -> list[PairRecord]:
    """Generate a paired corpus under ``out_dir`` and its pairs manifest.

    Writes ``<pair>_s1.s2tl`` / ``<pair>_s2.s2tl`` / ``<pair>_qa60.s2tl``
    per pair plus ``pairs.jsonl`` (paths relative to ``out_dir``, screen
    reports absent). Exactly round(cloud_fraction * n_pairs) optical
    tiles carry a cloud disc; the choice of tiles, disc geometry, SAR
    fields and speckle all derive from ``seed``.
    """
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    if size < 16 or size & (size - 1) != 0:
        raise ValueError(f"size must be a power of two >= 16, got {size}")
    if not 0.0 <= cloud_fraction <= 1.0:
        raise ValueError(f"cloud_fraction must be in [0, 1], got {cloud_fraction}")
    if speckle_db < 0:
        raise ValueError(f"speckle_db must be >= 0, got {speckle_db}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_cloudy = round(cloud_fraction * n_pairs)
    cloudy = set(fisher_yates(n_pairs, SplitMix64(seed))[:n_cloudy])

    records = []
    for i in range(n_pairs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        pair_id = f"fx{i:04d}"

        vv_true = -25.0 + 25.0 * _smooth_field(rng, size)
        vh_true = -25.0 + 25.0 * _smooth_field(rng, size)
        rgb = sar_to_rgb_reference(vv_true, vh_true)
        vv_db = np.clip(vv_true + speckle_db * rng.standard_normal((size, size)),
                        -25.0, 0.0).astype(np.float32)
        vh_db = np.clip(vh_true + speckle_db * rng.standard_normal((size, size)),
                        -25.0, 0.0).astype(np.float32)
        qa60 = np.zeros((1, size, size), dtype=np.float32)

        if i in cloudy:
            disc = _disc_mask(rng, size)
            base = rng.uniform(0.90, 0.96)
            for c in range(3):
                # near-equal channels: bright and unsaturated
                rgb[c][disc] = np.float32(base + 0.01 * c)
            qa60[0][disc] = float(1 << QA60_OPAQUE_CLOUD_BIT)

        s1 = Tile(np.stack([vv_db, vh_db]), SAR_ROLES, TileMeta(pair_id, sensor=Sensor.S1))
        s2 = Tile(rgb, RGB_ROLES, TileMeta(pair_id, sensor=Sensor.S2))
        qa = Tile(qa60, (BandRole.QA60,), TileMeta(pair_id, sensor=Sensor.QA60))

        names = {}
        for kind, tile in (("s1", s1), ("s2", s2), ("qa60", qa)):
            name = f"{pair_id}_{kind}.s2tl"
            write_tile(tile, out_dir / name)
            names[kind] = name
        records.append(PairRecord(pair_id, names["s1"], names["s2"], names["qa60"]))

    write_pair_manifest(records, out_dir / MANIFEST_NAME)
    return records

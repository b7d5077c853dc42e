"""Pairing, filtering, holdout splitting and normalization conventions.

Manifests are JSON-lines, one pair per line with the screening report
embedded once screening has run. Filter presets: ``dataset1`` keeps pairs
with zero nodata and zero QA60 cloud ratio; ``dataset2`` additionally
requires zero heuristic cloud ratio.

Normalization conventions between physical units and model space:

* optical digital numbers divide by 10000 and clamp to [0, 1] reflectance;
* SAR backscatter in dB clamps to [-25, 0] and maps affinely to [-1, 1];
* reflectance maps to model space by x -> 2x - 1 and back by y -> (y+1)/2.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, replace
from datetime import date as _date
from pathlib import Path
from typing import Sequence

import numpy as np

from .cloudscreen import ScreenReport
from .rastercore import RGB_ROLES, SAR_ROLES, Sensor, Tile, TileMeta
from .seeding import SplitMix64, fisher_yates

log = logging.getLogger(__name__)


class MatchKey(enum.Enum):
    TILE_ID = "tile_id"
    TILE_ID_AND_DATE = "tile_id_and_date"


@dataclass(frozen=True)
class PairPolicy:
    match_key: MatchKey = MatchKey.TILE_ID
    max_day_gap: int = 0

    def __post_init__(self):
        if self.max_day_gap < 0:
            raise ValueError(f"max_day_gap must be >= 0, got {self.max_day_gap}")


@dataclass(frozen=True)
class TileRecord:
    """One tile file known to the curation layer (metadata + location)."""

    meta: TileMeta
    path: str


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    s1_path: str
    s2_path: str
    qa60_path: str | None = None
    screen: ScreenReport | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "pair_id": self.pair_id,
                "s1_path": self.s1_path,
                "s2_path": self.s2_path,
                "qa60_path": self.qa60_path,
                "screen": None if self.screen is None else json.loads(self.screen.to_json()),
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PairRecord":
        obj = json.loads(line)
        screen = obj.get("screen")
        return cls(
            pair_id=obj["pair_id"],
            s1_path=obj["s1_path"],
            s2_path=obj["s2_path"],
            qa60_path=obj.get("qa60_path"),
            screen=None if screen is None else ScreenReport.from_json(json.dumps(screen)),
        )


@dataclass(frozen=True)
class FilterSpec:
    """Upper bounds on screening ratios; absent bounds are not checked."""

    max_nodata_ratio: float
    max_qa60_cloud_ratio: float | None = None
    max_heuristic_cloud_ratio: float | None = None

    def __post_init__(self):
        for name in ("max_nodata_ratio", "max_qa60_cloud_ratio", "max_heuristic_cloud_ratio"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


FILTER_PRESETS = {
    "dataset1": FilterSpec(max_nodata_ratio=0.0, max_qa60_cloud_ratio=0.0),
    "dataset2": FilterSpec(
        max_nodata_ratio=0.0, max_qa60_cloud_ratio=0.0, max_heuristic_cloud_ratio=0.0
    ),
}


def filter_preset(name: str) -> FilterSpec:
    try:
        return FILTER_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown filter preset {name!r}; available: {sorted(FILTER_PRESETS)}")


def _parse_date(record: TileRecord) -> _date:
    if not record.meta.acquired_date:
        raise ValueError(f"record {record.meta.tile_id!r} has no date but the policy needs one")
    return _date.fromisoformat(record.meta.acquired_date)


def _check_unique_keys(records: Sequence[TileRecord], sensor: str) -> None:
    seen = set()
    for rec in records:
        key = (rec.meta.tile_id, rec.meta.acquired_date)
        if key in seen:
            raise ValueError(f"duplicate {sensor} record key {key}")
        seen.add(key)


def pair_manifests(
    s1_records: Sequence[TileRecord],
    s2_records: Sequence[TileRecord],
    policy: PairPolicy = PairPolicy(),
) -> list[PairRecord]:
    """Match optical records to SAR records under the pairing policy.

    TILE_ID pairs records sharing a tile id (ids must then be unique per
    sensor). TILE_ID_AND_DATE matches each optical record to the
    nearest-dated SAR record with the same tile id within ``max_day_gap``
    days, ties broken toward the earlier SAR date. Unmatched records are
    dropped and counted in the log. QA60 companions are attached by the
    caller (they share the optical record's tile id).
    """
    _check_unique_keys(s1_records, "S1")
    _check_unique_keys(s2_records, "S2")

    pairs: list[PairRecord] = []
    if policy.match_key is MatchKey.TILE_ID:
        s1_by_id: dict[str, TileRecord] = {}
        for rec in s1_records:
            if rec.meta.tile_id in s1_by_id:
                raise ValueError(f"ambiguous S1 tile_id {rec.meta.tile_id!r} under TILE_ID policy")
            s1_by_id[rec.meta.tile_id] = rec
        seen_s2 = set()
        for rec in s2_records:
            if rec.meta.tile_id in seen_s2:
                raise ValueError(f"ambiguous S2 tile_id {rec.meta.tile_id!r} under TILE_ID policy")
            seen_s2.add(rec.meta.tile_id)
            mate = s1_by_id.get(rec.meta.tile_id)
            if mate is not None:
                pairs.append(PairRecord(rec.meta.tile_id, mate.path, rec.path))
    else:
        s1_by_id: dict[str, list[TileRecord]] = {}
        for rec in s1_records:
            s1_by_id.setdefault(rec.meta.tile_id, []).append(rec)
        for rec in s2_records:
            candidates = s1_by_id.get(rec.meta.tile_id, [])
            target = _parse_date(rec)
            best = None
            best_key = None
            for cand in candidates:
                cand_date = _parse_date(cand)
                gap = abs((cand_date - target).days)
                if gap > policy.max_day_gap:
                    continue
                key = (gap, cand_date)  # nearest first, earlier date wins ties
                if best_key is None or key < best_key:
                    best, best_key = cand, key
            if best is not None:
                pairs.append(
                    PairRecord(
                        f"{rec.meta.tile_id}_{rec.meta.acquired_date}", best.path, rec.path
                    )
                )

    dropped = len(s2_records) - len(pairs)
    if dropped:
        log.info("pair_manifests: %d pairs, %d optical records unmatched", len(pairs), dropped)
    return pairs


def attach_screens(pairs: Sequence[PairRecord], reports: Sequence[ScreenReport]) -> list[PairRecord]:
    """Embed screening reports into pair records, keyed by tile id.

    Report tile ids match either the pair id or the optical tile's file
    stem; every pair must find its report.
    """
    by_id = {rep.tile_id: rep for rep in reports}
    out = []
    for pair in pairs:
        rep = by_id.get(pair.pair_id)
        if rep is None:
            rep = by_id.get(Path(pair.s2_path).stem)
        if rep is None:
            raise ValueError(f"no screening report for pair {pair.pair_id!r}")
        out.append(replace(pair, screen=rep))
    return out


def filter_dataset(pairs: Sequence[PairRecord], spec: FilterSpec) -> list[PairRecord]:
    """Keep pairs whose present ratios are within the spec's bounds.

    Order-preserving and idempotent; every pair must carry a screening
    report, and bounding the QA60 ratio requires the report to have one.
    """
    kept = []
    for pair in pairs:
        if pair.screen is None:
            raise ValueError(f"pair {pair.pair_id!r} has no screening report")
        rep = pair.screen
        if spec.max_qa60_cloud_ratio is not None and rep.qa60_cloud_ratio is None:
            raise ValueError(
                f"filter bounds qa60_cloud_ratio but pair {pair.pair_id!r} has no QA60 report"
            )
        if rep.nodata_ratio > spec.max_nodata_ratio:
            continue
        if (
            spec.max_qa60_cloud_ratio is not None
            and rep.qa60_cloud_ratio > spec.max_qa60_cloud_ratio
        ):
            continue
        if (
            spec.max_heuristic_cloud_ratio is not None
            and rep.heuristic_cloud_ratio > spec.max_heuristic_cloud_ratio
        ):
            continue
        kept.append(pair)
    return kept


def split_holdout(
    pairs: Sequence[PairRecord], n: int, seed: int
) -> tuple[list[PairRecord], list[PairRecord]]:
    """Split off a seeded uniform holdout of size ``n``.

    The holdout is the first n indices of a Fisher-Yates shuffle driven by
    SplitMix64 seeded directly with ``seed`` (in shuffled order); the
    training remainder keeps its original order.
    """
    if not 0 <= n < len(pairs):
        raise ValueError(f"holdout size {n} must satisfy 0 <= n < {len(pairs)}")
    order = fisher_yates(len(pairs), SplitMix64(seed))
    eval_idx = order[:n]
    eval_set = set(eval_idx)
    train = [pairs[i] for i in range(len(pairs)) if i not in eval_set]
    holdout = [pairs[i] for i in eval_idx]
    return train, holdout


# --- normalization conventions -------------------------------------------

S2_REFLECTANCE_SCALE = 10000.0
S1_DB_RANGE = (-25.0, 0.0)


def normalize_s2_reflectance(raw: Tile, scale: float = S2_REFLECTANCE_SCALE) -> Tile:
    """Digital numbers -> reflectance: divide by ``scale``, clamp to [0, 1]."""
    if (raw.data < 0).any():
        raise ValueError("optical digital numbers must be >= 0")
    data = np.clip(raw.data / np.float32(scale), 0.0, 1.0)
    return Tile(data, raw.band_roles, raw.meta)


def normalize_s1(db_tile: Tile, db_range: tuple[float, float] = S1_DB_RANGE) -> np.ndarray:
    """SAR backscatter in dB -> model-space array in [-1, 1].

    Values clamp to ``db_range`` and map affinely onto [-1, 1]; with the
    default range that is x -> (x + 25) / 12.5 - 1.
    """
    lo, hi = db_range
    if not lo < hi:
        raise ValueError(f"invalid dB range {db_range}")
    data = db_tile.data
    if not np.isfinite(data).all():
        raise ValueError("SAR tile contains non-finite values")
    clamped = np.clip(data, np.float32(lo), np.float32(hi))
    half = np.float32((hi - lo) / 2.0)
    return ((clamped - np.float32(lo)) / half - np.float32(1.0)).astype(np.float32)


def rgb_to_model(reflectance: Tile) -> np.ndarray:
    """Reflectance [0, 1] -> model space [-1, 1] via x -> 2x - 1."""
    data = reflectance.data
    if (data < -1e-6).any() or (data > 1 + 1e-6).any():
        raise ValueError("rgb_to_model expects reflectance in [0, 1]")
    return (data * np.float32(2.0) - np.float32(1.0)).astype(np.float32)


def model_to_rgb(
    array: np.ndarray,
    tile_id: str = "prediction",
    acquired_date: str = "",
    nodata_sentinel: float = 0.0,
) -> Tile:
    """Model space [-1, 1] -> reflectance Tile via y -> (y + 1) / 2."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"model output must be [3, H, W], got shape {arr.shape}")
    if (arr < -1 - 1e-6).any() or (arr > 1 + 1e-6).any():
        raise ValueError("model_to_rgb expects values in [-1, 1]")
    data = np.clip((arr + np.float32(1.0)) / np.float32(2.0), 0.0, 1.0)
    meta = TileMeta(tile_id, acquired_date, Sensor.S2, nodata_sentinel)
    return Tile(data, RGB_ROLES, meta)


# --- manifest I/O ----------------------------------------------------------


def write_pair_manifest(pairs: Sequence[PairRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pair in pairs:
            fh.write(pair.to_json() + "\n")


def read_pair_manifest(path: str | Path) -> list[PairRecord]:
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(PairRecord.from_json(line))
    return pairs


def load_pair_tiles(pair: PairRecord, root: str | Path = ".") -> tuple[Tile, Tile]:
    """Load the (SAR, optical) tiles behind a pair record.

    Relative manifest paths resolve against ``root``. Band roles are
    checked so downstream code can rely on [VV, VH] / [RED, GREEN, BLUE].
    """
    from .rastercore import read_tile, require_roles

    root = Path(root)
    s1 = read_tile(root / pair.s1_path)
    s2 = read_tile(root / pair.s2_path)
    require_roles(s1, SAR_ROLES, f"pair {pair.pair_id} SAR tile")
    require_roles(s2, RGB_ROLES, f"pair {pair.pair_id} optical tile")
    return s1, s2

"""Per-tile quality statistics: nodata ratio and two cloud ratios.

Two cloud signals are computed per optical tile: the QA60 quality band
(bits 10 and 11 flag opaque cloud and cirrus) and a heuristic mask based
on the gap between brightness and saturation -- bright, washed-out pixels
are clouds, bright saturated pixels are not. All pixel math is float32 so
vectorized results match a scalar per-pixel loop exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .rastercore import RGB_ROLES, BandRole, Tile, require_roles

QA60_OPAQUE_CLOUD_BIT = 10
QA60_CIRRUS_BIT = 11
_QA60_CLOUD_BITS = (1 << QA60_OPAQUE_CLOUD_BIT) | (1 << QA60_CIRRUS_BIT)


class MaskSource(enum.Enum):
    QA60 = "qa60"
    HEURISTIC = "heuristic"


@dataclass(frozen=True)
class CloudMask:
    flags: np.ndarray  # bool [height, width], True = cloudy
    source: MaskSource

    def __post_init__(self):
        flags = np.asarray(self.flags, dtype=bool)
        if flags.ndim != 2:
            raise ValueError(f"cloud mask must be 2-D, got shape {flags.shape}")
        object.__setattr__(self, "flags", flags)


@dataclass(frozen=True)
class HeuristicParams:
    """Thresholds of the brightness-saturation cloud test.

    A pixel is cloudy when value minus saturation exceeds
    ``score_threshold`` and the value itself exceeds
    ``brightness_threshold``. The defaults flag bright low-saturation
    pixels while dark or strongly colored pixels pass.
    """

    score_threshold: float = 0.65
    brightness_threshold: float = 0.35
    epsilon: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.score_threshold <= 1.0:
            raise ValueError(f"score_threshold must be in (0, 1], got {self.score_threshold}")
        if not 0.0 <= self.brightness_threshold <= 1.0:
            raise ValueError(
                f"brightness_threshold must be in [0, 1], got {self.brightness_threshold}"
            )
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class ScreenReport:
    """Quality statistics for one optical tile."""

    tile_id: str
    nodata_ratio: float
    qa60_cloud_ratio: float | None
    heuristic_cloud_ratio: float

    def __post_init__(self):
        for name in ("nodata_ratio", "heuristic_cloud_ratio", "qa60_cloud_ratio"):
            value = getattr(self, name)
            if value is None:
                continue
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "tile_id": self.tile_id,
                "nodata_ratio": self.nodata_ratio,
                "qa60_cloud_ratio": self.qa60_cloud_ratio,
                "heuristic_cloud_ratio": self.heuristic_cloud_ratio,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "ScreenReport":
        obj = json.loads(line)
        return cls(
            tile_id=obj["tile_id"],
            nodata_ratio=obj["nodata_ratio"],
            qa60_cloud_ratio=obj.get("qa60_cloud_ratio"),
            heuristic_cloud_ratio=obj["heuristic_cloud_ratio"],
        )


def decode_qa60(qa60: Tile) -> CloudMask:
    """Decode the QA60 quality band: cloudy iff bit 10 (opaque cloud) or
    bit 11 (cirrus) is set. All other bits are ignored."""
    require_roles(qa60, (BandRole.QA60,), "decode_qa60")
    values = qa60.data[0]
    if (values != np.round(values)).any() or (values < 0).any() or (values > 65535).any():
        raise ValueError("QA60 values must be integers in [0, 65535]")
    bits = values.astype(np.int32)
    flags = (bits & _QA60_CLOUD_BITS) != 0
    return CloudMask(flags, MaskSource.QA60)


def nodata_mask(rgb: Tile) -> np.ndarray:
    """Boolean [H, W] map of pixels where all three bands equal the
    nodata sentinel."""
    require_roles(rgb, RGB_ROLES, "nodata_mask")
    sentinel = np.float32(rgb.meta.nodata_sentinel)
    return (rgb.data == sentinel).all(axis=0)


def nodata_ratio(rgb: Tile) -> float:
    """Fraction of pixels with no data in any band."""
    mask = nodata_mask(rgb)
    return int(mask.sum()) / mask.size


def heuristic_cloud_mask(rgb: Tile, params: HeuristicParams = HeuristicParams()) -> CloudMask:
    """Brightness-saturation cloud test on a reflectance RGB tile.

    Per pixel, with values already scaled to [0, 1]:
    V = max(r, g, b); S = (V - min(r, g, b)) / max(V, epsilon);
    cloudy iff V - S > score_threshold and V > brightness_threshold.
    """
    require_roles(rgb, RGB_ROLES, "heuristic_cloud_mask")
    data = rgb.data
    if (data < -1e-6).any() or (data > 1 + 1e-6).any():
        lo, hi = float(data.min()), float(data.max())
        raise ValueError(f"heuristic mask expects reflectance in [0, 1], got [{lo}, {hi}]")
    value = data.max(axis=0)
    darkest = data.min(axis=0)
    saturation = (value - darkest) / np.maximum(value, np.float32(params.epsilon))
    score = value - saturation
    flags = (score > np.float32(params.score_threshold)) & (
        value > np.float32(params.brightness_threshold)
    )
    return CloudMask(flags, MaskSource.HEURISTIC)


def mask_ratio(mask: CloudMask) -> float:
    """Fraction of flagged pixels."""
    return int(mask.flags.sum()) / mask.flags.size


def screen_tile(
    rgb: Tile,
    qa60: Tile | None = None,
    params: HeuristicParams = HeuristicParams(),
) -> ScreenReport:
    """Aggregate screening statistics for one optical tile.

    ``rgb`` must already be reflectance-scaled to [0, 1] (the default
    nodata sentinel 0.0 survives that scaling). Nodata pixels are
    excluded from the heuristic ratio's denominator; a tile that is
    entirely nodata reports heuristic_cloud_ratio 0. The QA60 ratio is
    over all pixels.
    """
    nodata = nodata_mask(rgb)
    n_nodata = int(nodata.sum())
    ratio_nodata = n_nodata / nodata.size

    qa_ratio = None
    if qa60 is not None:
        if qa60.data.shape[1:] != rgb.data.shape[1:]:
            raise ValueError(
                f"QA60 tile {qa60.data.shape[1:]} does not match RGB tile {rgb.data.shape[1:]}"
            )
        qa_ratio = mask_ratio(decode_qa60(qa60))

    cloudy = heuristic_cloud_mask(rgb, params).flags
    n_valid = nodata.size - n_nodata
    if n_valid == 0:
        heuristic_ratio = 0.0
    else:
        heuristic_ratio = int((cloudy & ~nodata).sum()) / n_valid

    return ScreenReport(
        tile_id=rgb.meta.tile_id,
        nodata_ratio=ratio_nodata,
        qa60_cloud_ratio=qa_ratio,
        heuristic_cloud_ratio=heuristic_ratio,
    )

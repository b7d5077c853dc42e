"""MAE / PSNR metrics, evaluation reports, ensembling and submission packaging.

Metrics operate on the [0, 1] reflectance scale with peak 1.0, and the
per-image values aggregate as unweighted means over images. Reductions
run in float64 so results agree with a scalar reference loop to well
below reporting precision (tile data itself stays float32).
"""

from __future__ import annotations

import enum
import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .rastercore import RGB_ROLES, Tile, require_roles, tile_to_bytes

PSNR_CAP_DB = 99.0
_PSNR_MSE_FLOOR = 1e-12


def _check_rgb01(tile: Tile, what: str) -> None:
    require_roles(tile, RGB_ROLES, what)
    if (tile.data < -1e-6).any() or (tile.data > 1 + 1e-6).any():
        lo, hi = float(tile.data.min()), float(tile.data.max())
        raise ValueError(f"{what} expects reflectance in [0, 1], got range [{lo}, {hi}]")


def _check_pair(pred: Tile, target: Tile, what: str) -> None:
    _check_rgb01(pred, what)
    _check_rgb01(target, what)
    if pred.data.shape != target.data.shape:
        raise ValueError(f"{what}: shape mismatch {pred.data.shape} vs {target.data.shape}")


def mae(pred: Tile, target: Tile) -> float:
    """Mean absolute error over all 3 x H x W elements."""
    _check_pair(pred, target, "mae")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    return float(np.mean(np.abs(diff)))


def psnr(pred: Tile, target: Tile) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; identical images
    (mse below 1e-12) return the cap 99.0 dB to keep aggregates finite."""
    _check_pair(pred, target, "psnr")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse < _PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return 10.0 * math.log10(1.0 / mse)


@dataclass(frozen=True)
class MetricsReport:
    n_images: int
    mae_mean: float
    psnr_mean_db: float
    per_image: tuple[tuple[str, float, float], ...]  # (pair_id, mae, psnr_db)

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_images": self.n_images,
                "mae_mean": self.mae_mean,
                "psnr_mean_db": self.psnr_mean_db,
                "per_image": [
                    {"pair_id": pid, "mae": m, "psnr_db": p} for pid, m, p in self.per_image
                ],
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        obj = json.loads(text)
        return cls(
            n_images=obj["n_images"],
            mae_mean=obj["mae_mean"],
            psnr_mean_db=obj["psnr_mean_db"],
            per_image=tuple(
                (row["pair_id"], row["mae"], row["psnr_db"]) for row in obj["per_image"]
            ),
        )


def evaluate(
    preds: Sequence[tuple[str, Tile]], refs: Sequence[tuple[str, Tile]]
) -> MetricsReport:
    """Per-image MAE/PSNR plus unweighted means, in pair-id order.

    Prediction and reference pair-id sets must match exactly.
    """
    pred_map = _unique_map(preds, "predictions")
    ref_map = _unique_map(refs, "references")
    if set(pred_map) != set(ref_map):
        missing = sorted(set(ref_map) - set(pred_map))
        extra = sorted(set(pred_map) - set(ref_map))
        raise ValueError(f"pair_id mismatch: missing={missing[:5]} extra={extra[:5]}")
    rows = []
    for pid in sorted(pred_map):
        rows.append((pid, mae(pred_map[pid], ref_map[pid]), psnr(pred_map[pid], ref_map[pid])))
    return MetricsReport(
        n_images=len(rows),
        mae_mean=float(np.mean([r[1] for r in rows])),
        psnr_mean_db=float(np.mean([r[2] for r in rows])),
        per_image=tuple(rows),
    )


class EnsembleMode(enum.Enum):
    MEAN = "mean"
    ASSIGN = "assign"


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[str, ...]
    mode: EnsembleMode = EnsembleMode.MEAN
    assignment: Mapping[str, str] | None = None  # pair_id -> member, ASSIGN mode

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.mode is EnsembleMode.ASSIGN and self.assignment is None:
            raise ValueError("ASSIGN mode needs an assignment map")


def _unique_map(items: Sequence[tuple[str, Tile]], what: str) -> dict[str, Tile]:
    out: dict[str, Tile] = {}
    for pid, tile in items:
        if pid in out:
            raise ValueError(f"duplicate pair_id {pid!r} in {what}")
        out[pid] = tile
    return out


def ensemble(
    outputs: Mapping[str, Sequence[tuple[str, Tile]]], spec: EnsembleSpec
) -> list[tuple[str, Tile]]:
    """Combine member prediction sets into one.

    MEAN averages members pixelwise (clamped back to [0, 1]); ASSIGN
    routes each pair to its assigned member's tile unchanged. All members
    must cover the same pair ids, and ASSIGN must cover every one.
    Output order follows the first member's pair order.
    """
    missing = [m for m in spec.members if m not in outputs]
    if missing:
        raise ValueError(f"no outputs for ensemble members {missing}")
    member_maps = {m: _unique_map(outputs[m], f"member {m!r}") for m in spec.members}
    first = spec.members[0]
    ids = [pid for pid, _ in outputs[first]]
    for m in spec.members[1:]:
        if set(member_maps[m]) != set(member_maps[first]):
            raise ValueError(f"member {m!r} predicts a different pair_id set than {first!r}")

    combined: list[tuple[str, Tile]] = []
    if spec.mode is EnsembleMode.MEAN:
        for pid in ids:
            acc = np.zeros(member_maps[first][pid].data.shape, dtype=np.float64)
            # accumulate in sorted member order so MEAN is exactly
            # invariant to the order members are listed in
            for m in sorted(spec.members):
                acc += member_maps[m][pid].data.astype(np.float64)
            mean = np.clip(acc / len(spec.members), 0.0, 1.0).astype(np.float32)
            src = member_maps[first][pid]
            combined.append((pid, Tile(mean, src.band_roles, src.meta)))
    else:
        unassigned = [pid for pid in ids if pid not in spec.assignment]
        if unassigned:
            raise ValueError(f"ASSIGN map misses pair_ids {unassigned[:5]}")
        for pid in ids:
            member = spec.assignment[pid]
            if member not in member_maps:
                raise ValueError(f"pair {pid!r} assigned to unknown member {member!r}")
            combined.append((pid, member_maps[member][pid]))
    return combined


def submission_checksum(tile_blobs: Sequence[bytes]) -> int:
    """CRC-32 over concatenated tile-file bytes (callers pass them in
    sorted pair_id order)."""
    crc = 0
    for blob in tile_blobs:
        crc = zlib.crc32(blob, crc)
    return crc & 0xFFFFFFFF


def package_submission(preds: Sequence[tuple[str, Tile]], out_dir: str | Path) -> Path:
    """Write one ``<pair_id>.s2tl`` per prediction plus a
    ``submission.jsonl`` manifest whose last line carries the file count
    and the CRC-32 over all tile bytes in sorted pair_id order.
    Re-running over the same predictions is byte-identical."""
    pred_map = _unique_map(preds, "submission")
    for pid, tile in pred_map.items():
        _check_rgb01(tile, f"submission tile {pid!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    blobs = []
    lines = []
    for pid in sorted(pred_map):
        tile = pred_map[pid]
        blob = tile_to_bytes(tile)
        (out_dir / f"{pid}.s2tl").write_bytes(blob)
        blobs.append(blob)
        lines.append(json.dumps({"pair_id": pid, "file": f"{pid}.s2tl", "nbytes": len(blob)}))
    lines.append(json.dumps({"count": len(blobs), "crc32": submission_checksum(blobs)}))
    manifest = out_dir / "submission.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest

"""Tile data model and the portable on-disk tile container.

A :class:`Tile` is a float32 array of shape [bands, height, width] plus
band roles and minimal metadata. Tiles are immutable after construction
and all I/O here is bit-exact: writing the same tile twice produces
byte-identical files, and a write/read round trip reproduces the tile
exactly.

On-disk container (extension ``.s2tl``), all fields little-endian::

    magic   'S2TL'                      4 bytes
    version u8 (currently 1)
    sensor  u8 (0=S1, 1=S2, 2=QA60)
    bands   u16
    height  u32
    width   u32
    nodata_sentinel f32
    tile_id_len u16, tile_id UTF-8 bytes
    date_len    u16, date UTF-8 bytes
    band_roles  bands x u8 (0=VV, 1=VH, 2=RED, 3=GREEN, 4=BLUE, 5=QA60)
    payload     band-major, row-major f32 values

GeoTIFF / PNG / npy sources enter only through :func:`ingest_external`;
the core stays free of raster-library dependencies.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"S2TL"
FORMAT_VERSION = 1


class TileFormatError(Exception):
    """Raised for malformed or unreadable tile containers."""


class Sensor(enum.Enum):
    S1 = 0
    S2 = 1
    QA60 = 2


class BandRole(enum.Enum):
    VV = 0
    VH = 1
    RED = 2
    GREEN = 3
    BLUE = 4
    QA60 = 5


RGB_ROLES = (BandRole.RED, BandRole.GREEN, BandRole.BLUE)
SAR_ROLES = (BandRole.VV, BandRole.VH)


@dataclass(frozen=True)
class TileMeta:
    tile_id: str
    acquired_date: str = ""
    sensor: Sensor = Sensor.S2
    nodata_sentinel: float = 0.0

    def __post_init__(self):
        if not self.tile_id:
            raise ValueError("tile_id must be non-empty")
        if "/" in self.tile_id or "\\" in self.tile_id:
            raise ValueError(f"tile_id may not contain path separators: {self.tile_id!r}")


@dataclass(frozen=True, eq=False)
class Tile:
    """Immutable multi-band float32 raster tile."""

    data: np.ndarray
    band_roles: tuple[BandRole, ...] = field(default=RGB_ROLES)
    meta: TileMeta = field(default_factory=lambda: TileMeta("tile"))

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"tile data must be [bands, height, width], got shape {arr.shape}")
        bands, height, width = arr.shape
        roles = tuple(BandRole(r) for r in self.band_roles)
        if bands != len(roles):
            raise ValueError(f"band count {bands} does not match {len(roles)} band roles")
        if bands < 1 or height < 1 or width < 1:
            raise ValueError(f"tile dimensions must be >= 1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("tile values must be finite (nodata is a sentinel value, not NaN)")
        if roles == (BandRole.QA60,):
            if (arr < 0).any() or (arr > 65535).any() or (arr != np.round(arr)).any():
                raise ValueError("QA60 band must hold integers in [0, 65535]")
        elif BandRole.QA60 in roles:
            raise ValueError("QA60 tiles carry exactly one band")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "band_roles", roles)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Tile):
            return NotImplemented
        return (
            self.band_roles == other.band_roles
            and self.meta == other.meta
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )


def require_roles(tile: Tile, roles: tuple[BandRole, ...], what: str) -> None:
    if tile.band_roles != roles:
        raise ValueError(
            f"{what} expects band roles {[r.name for r in roles]}, "
            f"got {[r.name for r in tile.band_roles]}"
        )


_HEAD = struct.Struct("<4sBBHIIf")


def tile_to_bytes(tile: Tile) -> bytes:
    """Serialize a tile to the container layout (pure function of the tile)."""
    tid = tile.meta.tile_id.encode("utf-8")
    date = tile.meta.acquired_date.encode("utf-8")
    parts = [
        _HEAD.pack(
            MAGIC,
            FORMAT_VERSION,
            tile.meta.sensor.value,
            tile.bands,
            tile.height,
            tile.width,
            np.float32(tile.meta.nodata_sentinel),
        ),
        struct.pack("<H", len(tid)),
        tid,
        struct.pack("<H", len(date)),
        date,
        bytes(r.value for r in tile.band_roles),
        tile.data.astype("<f4", copy=False).tobytes(),
    ]
    return b"".join(parts)


def write_tile(tile: Tile, path: str | Path) -> None:
    """Write ``tile`` to ``path`` in the container layout, byte for byte."""
    Path(path).write_bytes(tile_to_bytes(tile))


def tile_from_bytes(blob: bytes) -> Tile:
    """Parse a tile container from raw bytes."""
    if len(blob) < _HEAD.size:
        raise TileFormatError("truncated header")
    magic, version, sensor, bands, height, width, sentinel = _HEAD.unpack_from(blob, 0)
    if magic != MAGIC:
        raise TileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise TileFormatError(f"unsupported format version {version}")
    off = _HEAD.size

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise TileFormatError(f"truncated payload while reading {what}")
        out = blob[off : off + n]
        off += n
        return out

    (tid_len,) = struct.unpack("<H", take(2, "tile_id length"))
    tid = take(tid_len, "tile_id").decode("utf-8")
    (date_len,) = struct.unpack("<H", take(2, "date length"))
    date = take(date_len, "date").decode("utf-8")
    roles = tuple(BandRole(b) for b in take(bands, "band roles"))
    payload = take(bands * height * width * 4, "pixel payload")
    if off != len(blob):
        raise TileFormatError(f"{len(blob) - off} trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width)
    meta = TileMeta(tid, date, Sensor(sensor), float(np.float32(sentinel)))
    return Tile(data.copy(), roles, meta)


def read_tile(path: str | Path) -> Tile:
    """Read a tile container; inverse of :func:`write_tile`, bit-exact."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no tile file at {path}")
    return tile_from_bytes(path.read_bytes())


def read_tile_meta(path: str | Path) -> TileMeta:
    """Read only the metadata of a tile container (header fields)."""
    with open(path, "rb") as fh:
        head = fh.read(_HEAD.size)
        if len(head) < _HEAD.size:
            raise TileFormatError("truncated header")
        magic, version, sensor, _, _, _, sentinel = _HEAD.unpack(head)
        if magic != MAGIC:
            raise TileFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise TileFormatError(f"unsupported format version {version}")
        (tid_len,) = struct.unpack("<H", fh.read(2))
        tid = fh.read(tid_len).decode("utf-8")
        (date_len,) = struct.unpack("<H", fh.read(2))
        date = fh.read(date_len).decode("utf-8")
    return TileMeta(tid, date, Sensor(sensor), float(np.float32(sentinel)))


def export_png(tile: Tile, path: str | Path) -> None:
    """Export an RGB tile with values in [0, 1] as an 8-bit PNG.

    Channels quantize as round-half-up of v*255 so exports reproduce
    exactly across implementations. Values outside [0, 1] by more than
    1e-6 are rejected rather than clamped.
    """
    require_roles(tile, RGB_ROLES, "export_png")
    if (tile.data < -1e-6).any() or (tile.data > 1 + 1e-6).any():
        lo, hi = float(tile.data.min()), float(tile.data.max())
        raise ValueError(f"export_png expects values in [0, 1], got range [{lo}, {hi}]")
    v = np.clip(tile.data, 0.0, 1.0)
    # round-half-up, then clamp: floor(v*255 + 0.5)
    q = np.clip(np.floor(v * 255.0 + 0.5), 0, 255).astype(np.uint8)
    Image.fromarray(q.transpose(1, 2, 0), mode="RGB").save(Path(path), format="PNG")


def _load_external_array(path: Path) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        arr = np.asarray(np.load(path))  # band-major [C, H, W] or [H, W]
    elif suffix == ".s2tl":
        return read_tile(path).data
    else:
        try:
            img = Image.open(path)
            arr = np.asarray(img)
        except Exception as exc:
            raise TileFormatError(f"cannot read raster {path}: {exc}") from exc
        if arr.ndim == 3:
            # image readers return [H, W, C]; tiles are band-major
            arr = arr.transpose(2, 0, 1)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise TileFormatError(f"raster {path} has unsupported shape {arr.shape}")
    return arr


def ingest_external(
    path: str | Path,
    band_spec: tuple[BandRole, ...] | list[BandRole],
    tile_id: str | None = None,
    acquired_date: str = "",
    sensor: Sensor | None = None,
    nodata_sentinel: float = 0.0,
) -> Tile:
    """Adapt an external raster (npy / PNG / TIFF / s2tl) into a Tile.

    Stored values are copied unmodified into float32; reflectance or dB
    scaling is the curation layer's job. The source band count must match
    ``band_spec`` exactly.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no raster file at {path}")
    roles = tuple(BandRole(r) for r in band_spec)
    arr = _load_external_array(path)
    if arr.shape[0] != len(roles):
        raise ValueError(
            f"raster {path.name} has {arr.shape[0]} bands but band_spec names {len(roles)}"
        )
    if sensor is None:
        if roles == (BandRole.QA60,):
            sensor = Sensor.QA60
        elif set(roles) <= {BandRole.VV, BandRole.VH}:
            sensor = Sensor.S1
        else:
            sensor = Sensor.S2
    meta = TileMeta(tile_id or path.stem, acquired_date, sensor, nodata_sentinel)
    return Tile(arr.astype(np.float32), roles, meta)

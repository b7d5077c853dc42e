import struct

import numpy as np
import pytest
from PIL import Image

from sar2rgb.rastercore import (
    RGB_ROLES,
    SAR_ROLES,
    BandRole,
    Sensor,
    Tile,
    TileFormatError,
    TileMeta,
    export_png,
    ingest_external,
    read_tile,
    read_tile_meta,
    tile_to_bytes,
    write_tile,
)

from conftest import make_qa60, make_rgb, make_sar


def random_tile(rng):
    bands = int(rng.integers(1, 5))
    roles_pool = [BandRole.VV, BandRole.VH, BandRole.RED, BandRole.GREEN, BandRole.BLUE]
    roles = tuple(roles_pool[int(i)] for i in rng.integers(0, len(roles_pool), bands))
    h, w = (int(x) for x in rng.integers(1, 9, 2))
    # wide dynamic range incl. negatives, tiny and large magnitudes
    data = (rng.standard_normal((bands, h, w)) * 10.0 ** rng.integers(-6, 7)).astype(np.float32)
    meta = TileMeta(
        tile_id=f"tile{int(rng.integers(0, 10**6))}",
        acquired_date="2021-07-0" + str(int(rng.integers(1, 10))),
        sensor=Sensor(int(rng.integers(0, 2))),
        nodata_sentinel=float(rng.choice([0.0, -9999.0])),
    )
    return Tile(data, roles, meta)


class TestTileInvariants:
    def test_band_role_mismatch(self):
        with pytest.raises(ValueError, match="band roles"):
            Tile(np.zeros((3, 2, 2), dtype=np.float32), SAR_ROLES, TileMeta("t"))

    def test_non_finite_rejected(self):
        data = np.zeros((3, 2, 2), dtype=np.float32)
        data[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            make_rgb(data)

    def test_empty_tile_id(self):
        with pytest.raises(ValueError):
            TileMeta("")

    def test_tile_id_path_separator(self):
        with pytest.raises(ValueError):
            TileMeta("a/b")

    def test_qa60_requires_integers(self):
        with pytest.raises(ValueError, match="QA60"):
            make_qa60(np.full((2, 2), 0.5))

    def test_qa60_range(self):
        with pytest.raises(ValueError, match="QA60"):
            make_qa60(np.full((2, 2), 70000.0))

    def test_qa60_single_band(self):
        with pytest.raises(ValueError, match="exactly one band"):
            Tile(np.zeros((2, 2, 2), dtype=np.float32),
                 (BandRole.QA60, BandRole.RED), TileMeta("t"))


class TestRoundTrip:
    def test_round_trip_identity(self, tmp_path, rng):
        tile = random_tile(rng)
        path = tmp_path / "t.s2tl"
        write_tile(tile, path)
        assert read_tile(path) == tile

    def test_round_trip_many_random_tiles(self, tmp_path, rng):
        path = tmp_path / "t.s2tl"
        for _ in range(200):
            tile = random_tile(rng)
            write_tile(tile, path)
            back = read_tile(path)
            assert back == tile
            assert back.data.tobytes() == tile.data.tobytes()

    def test_write_is_deterministic(self, tmp_path, rng):
        tile = random_tile(rng)
        write_tile(tile, tmp_path / "a.s2tl")
        write_tile(tile, tmp_path / "b.s2tl")
        assert (tmp_path / "a.s2tl").read_bytes() == (tmp_path / "b.s2tl").read_bytes()

    def test_read_tile_meta_matches(self, tmp_path, rng):
        tile = random_tile(rng)
        write_tile(tile, tmp_path / "t.s2tl")
        assert read_tile_meta(tmp_path / "t.s2tl") == tile.meta


class TestBinaryLayout:
    def test_minimal_tile_exact_bytes(self):
        # independently assembled from the container layout
        tile = Tile(np.zeros((1, 1, 1), dtype=np.float32), (BandRole.RED,),
                    TileMeta("a", "", Sensor.S2, 0.0))
        expected = (
            b"S2TL"
            + struct.pack("<B", 1)          # version
            + struct.pack("<B", 1)          # sensor S2
            + struct.pack("<H", 1)          # bands
            + struct.pack("<I", 1)          # height
            + struct.pack("<I", 1)          # width
            + struct.pack("<f", 0.0)        # nodata sentinel
            + struct.pack("<H", 1) + b"a"   # tile id
            + struct.pack("<H", 0)          # empty date
            + bytes([2])                    # band role RED
            + struct.pack("<f", 0.0)        # payload: one zero float
        )
        blob = tile_to_bytes(tile)
        assert blob == expected
        assert len(blob) == 26 + 4  # header+strings+roles, then 4 payload bytes

    def test_bad_magic(self, tmp_path):
        tile = make_rgb(np.zeros((3, 2, 2), dtype=np.float32))
        blob = bytearray(tile_to_bytes(tile))
        blob[:4] = b"XXXX"
        path = tmp_path / "bad.s2tl"
        path.write_bytes(bytes(blob))
        with pytest.raises(TileFormatError, match="magic"):
            read_tile(path)

    def test_unsupported_version(self, tmp_path):
        tile = make_rgb(np.zeros((3, 2, 2), dtype=np.float32))
        blob = bytearray(tile_to_bytes(tile))
        blob[4] = 2
        path = tmp_path / "v2.s2tl"
        path.write_bytes(bytes(blob))
        with pytest.raises(TileFormatError, match="version"):
            read_tile(path)

    def test_truncated_payload(self, tmp_path):
        # header declares 3 bands 2x2 but carries payload for only 2 bands,
        # assembled byte by byte from the layout
        header = (
            b"S2TL"
            + struct.pack("<B", 1)
            + struct.pack("<B", 1)
            + struct.pack("<H", 3)
            + struct.pack("<I", 2)
            + struct.pack("<I", 2)
            + struct.pack("<f", 0.0)
            + struct.pack("<H", 1) + b"t"
            + struct.pack("<H", 0)
            + bytes([2, 3, 4])
        )
        payload = struct.pack("<8f", *([0.5] * 8))  # 2 bands x 2 x 2 only
        path = tmp_path / "trunc.s2tl"
        path.write_bytes(header + payload)
        with pytest.raises(TileFormatError, match="truncated"):
            read_tile(path)

    def test_trailing_bytes_rejected(self, tmp_path, rng):
        tile = random_tile(rng)
        path = tmp_path / "t.s2tl"
        path.write_bytes(tile_to_bytes(tile) + b"\x00")
        with pytest.raises(TileFormatError, match="trailing"):
            read_tile(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_tile(tmp_path / "absent.s2tl")


class TestExportPng:
    def test_black_and_white(self, tmp_path):
        for value, expect in [(0.0, 0), (1.0, 255)]:
            tile = make_rgb(np.full((3, 4, 4), value, dtype=np.float32))
            out = tmp_path / f"v{expect}.png"
            export_png(tile, out)
            arr = np.asarray(Image.open(out))
            assert (arr == expect).all()

    def test_round_half_up(self, tmp_path):
        tile = make_rgb(np.full((3, 2, 2), 0.5, dtype=np.float32))
        out = tmp_path / "half.png"
        export_png(tile, out)
        assert (np.asarray(Image.open(out)) == 128).all()

    def test_decode_within_quantum(self, tmp_path, rng):
        data = rng.random((3, 8, 8), dtype=np.float32)
        tile = make_rgb(data)
        out = tmp_path / "r.png"
        export_png(tile, out)
        back = np.asarray(Image.open(out)).astype(np.float32).transpose(2, 0, 1) / 255.0
        assert np.abs(back - data).max() <= 1.0 / 255.0

    def test_out_of_range_rejected(self, tmp_path):
        tile = make_rgb(np.full((3, 2, 2), 1.1, dtype=np.float32))
        with pytest.raises(ValueError, match="0, 1"):
            export_png(tile, tmp_path / "x.png")

    def test_wrong_roles_rejected(self, tmp_path):
        tile = make_sar(np.zeros((2, 2, 2), dtype=np.float32))
        with pytest.raises(ValueError, match="roles"):
            export_png(tile, tmp_path / "x.png")

    def test_slack_tolerated(self, tmp_path):
        tile = make_rgb(np.full((3, 2, 2), 1.0 + 5e-7, dtype=np.float32))
        export_png(tile, tmp_path / "ok.png")
        assert (np.asarray(Image.open(tmp_path / "ok.png")) == 255).all()


class TestIngest:
    def test_npy_two_band(self, tmp_path, rng):
        arr = rng.standard_normal((2, 6, 6)).astype(np.float32)
        np.save(tmp_path / "s.npy", arr)
        tile = ingest_external(tmp_path / "s.npy", SAR_ROLES)
        assert tile.band_roles == SAR_ROLES
        assert tile.meta.sensor is Sensor.S1
        assert np.array_equal(tile.data, arr)

    def test_band_count_mismatch(self, tmp_path, rng):
        arr = rng.standard_normal((3, 4, 4)).astype(np.float32)
        np.save(tmp_path / "s.npy", arr)
        with pytest.raises(ValueError, match="bands"):
            ingest_external(tmp_path / "s.npy", SAR_ROLES)

    def test_png_values_copied_unmodified(self, tmp_path, rng):
        img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
        Image.fromarray(img).save(tmp_path / "p.png")
        tile = ingest_external(tmp_path / "p.png", RGB_ROLES)
        assert np.array_equal(tile.data, img.transpose(2, 0, 1).astype(np.float32))

    def test_ingest_write_read_round_trip(self, tmp_path):
        # fixture raster built by the synthetic corpus generator
        from sar2rgb.fixtures import synth_fixture

        records = synth_fixture(1, 16, 0.0, seed=3, out_dir=tmp_path / "corpus")
        source = read_tile(tmp_path / "corpus" / records[0].s1_path)
        np.save(tmp_path / "ext.npy", source.data)
        tile = ingest_external(tmp_path / "ext.npy", SAR_ROLES, tile_id=source.meta.tile_id,
                               sensor=Sensor.S1)
        write_tile(tile, tmp_path / "round.s2tl")
        back = read_tile(tmp_path / "round.s2tl")
        assert np.array_equal(back.data, source.data)

    def test_unreadable_source(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest_external(tmp_path / "nope.npy", SAR_ROLES)

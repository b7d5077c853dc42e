import numpy as np
import pytest

from sar2rgb.rastercore import RGB_ROLES, SAR_ROLES, BandRole, Sensor, Tile, TileMeta


def make_rgb(data, tile_id="t", sentinel=0.0):
    return Tile(np.asarray(data, dtype=np.float32), RGB_ROLES,
                TileMeta(tile_id, sensor=Sensor.S2, nodata_sentinel=sentinel))


def make_qa60(values, tile_id="t"):
    arr = np.asarray(values, dtype=np.float32)[None, :, :]
    return Tile(arr, (BandRole.QA60,), TileMeta(tile_id, sensor=Sensor.QA60))


def make_sar(data, tile_id="t"):
    return Tile(np.asarray(data, dtype=np.float32), SAR_ROLES,
                TileMeta(tile_id, sensor=Sensor.S1))


def random_rgb(rng, h=8, w=8, tile_id="t"):
    return make_rgb(rng.random((3, h, w), dtype=np.float32), tile_id=tile_id)


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)

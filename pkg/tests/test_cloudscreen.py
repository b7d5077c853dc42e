import numpy as np
import pytest

from sar2rgb.cloudscreen import (
    HeuristicParams,
    MaskSource,
    ScreenReport,
    decode_qa60,
    heuristic_cloud_mask,
    mask_ratio,
    nodata_ratio,
    screen_tile,
)

from conftest import make_qa60, make_rgb


def heuristic_oracle(data, params):
    """Scalar per-pixel float32 loop; independent of the vectorized path."""
    f32 = np.float32
    _, h, w = data.shape
    flags = np.zeros((h, w), dtype=bool)
    for y in range(h):
        for x in range(w):
            r, g, b = (f32(data[c, y, x]) for c in range(3))
            v = max(r, g, b)
            s = f32(f32(v - min(r, g, b)) / max(v, f32(params.epsilon)))
            score = f32(v - s)
            flags[y, x] = score > f32(params.score_threshold) and v > f32(
                params.brightness_threshold
            )
    return flags


class TestDecodeQa60:
    @pytest.mark.parametrize(
        "value,cloudy",
        [(0, False), (1024, True), (2048, True), (3072, True), (512, False)],
    )
    def test_bit_layout(self, value, cloudy):
        mask = decode_qa60(make_qa60(np.full((2, 2), float(value))))
        assert mask.source is MaskSource.QA60
        assert (mask.flags == cloudy).all()

    def test_only_bits_10_11_matter(self, rng):
        # property: masking everything but bits 10/11 before decoding
        # leaves the result unchanged, over random 16-bit words
        values = rng.integers(0, 65536, size=(16, 16)).astype(np.float32)
        full = decode_qa60(make_qa60(values))
        masked = decode_qa60(make_qa60(np.asarray(values, dtype=np.int64) & 0b110000000000))
        assert np.array_equal(full.flags, masked.flags)

    def test_wrong_role(self):
        with pytest.raises(ValueError, match="roles"):
            decode_qa60(make_rgb(np.zeros((3, 2, 2))))

    def test_non_integer_values(self):
        tile = make_qa60(np.full((2, 2), 1024.0))
        object.__setattr__(tile, "data", tile.data + np.float32(0.5))
        with pytest.raises(ValueError, match="integers"):
            decode_qa60(tile)


class TestNodataRatio:
    def test_all_sentinel(self):
        assert nodata_ratio(make_rgb(np.zeros((3, 4, 4)))) == 1.0

    def test_no_sentinel(self):
        assert nodata_ratio(make_rgb(np.full((3, 4, 4), 0.5))) == 0.0

    def test_quarter(self):
        data = np.full((3, 2, 2), 0.5, dtype=np.float32)
        data[:, 0, 0] = 0.0
        assert nodata_ratio(make_rgb(data)) == 0.25

    def test_partial_sentinel_pixel_not_counted(self):
        data = np.full((3, 2, 2), 0.5, dtype=np.float32)
        data[0, 0, 0] = 0.0  # only one band hits the sentinel
        assert nodata_ratio(make_rgb(data)) == 0.0

    def test_custom_sentinel(self):
        data = np.full((3, 2, 2), 7.0, dtype=np.float32)
        assert nodata_ratio(make_rgb(data, sentinel=7.0)) == 1.0


class TestHeuristicMask:
    def test_white_is_cloudy(self):
        mask = heuristic_cloud_mask(make_rgb(np.ones((3, 2, 2))))
        assert mask.flags.all()

    def test_saturated_red_is_not(self):
        data = np.zeros((3, 2, 2), dtype=np.float32)
        data[0] = 1.0
        assert not heuristic_cloud_mask(make_rgb(data)).flags.any()

    def test_dark_gray_is_not(self):
        assert not heuristic_cloud_mask(make_rgb(np.full((3, 2, 2), 0.05))).flags.any()

    def test_channel_permutation_invariance(self, rng):
        data = rng.random((3, 8, 8), dtype=np.float32)
        base = heuristic_cloud_mask(make_rgb(data)).flags
        for perm in [(1, 2, 0), (2, 0, 1), (0, 2, 1)]:
            permuted = heuristic_cloud_mask(make_rgb(data[list(perm)])).flags
            assert np.array_equal(base, permuted)

    def test_matches_scalar_oracle(self, rng):
        params = HeuristicParams()
        for _ in range(20):
            data = rng.random((3, 6, 6), dtype=np.float32)
            tile = make_rgb(data)
            assert np.array_equal(heuristic_cloud_mask(tile, params).flags,
                                  heuristic_oracle(data, params))

    def test_threshold_monotonicity(self, rng):
        data = rng.random((3, 16, 16), dtype=np.float32)
        tile = make_rgb(data)
        prev = None
        for thr in [0.1, 0.3, 0.5, 0.7, 0.9]:
            ratio = mask_ratio(heuristic_cloud_mask(tile, HeuristicParams(score_threshold=thr)))
            if prev is not None:
                assert ratio <= prev
            prev = ratio

    def test_range_check(self):
        with pytest.raises(ValueError, match="0, 1"):
            heuristic_cloud_mask(make_rgb(np.full((3, 2, 2), 1.5)))

    def test_param_validation(self):
        with pytest.raises(ValueError):
            HeuristicParams(score_threshold=0.0)
        with pytest.raises(ValueError):
            HeuristicParams(brightness_threshold=-0.1)
        with pytest.raises(ValueError):
            HeuristicParams(epsilon=0.0)


class TestMaskRatio:
    def test_extremes_and_count(self):
        from sar2rgb.cloudscreen import CloudMask

        assert mask_ratio(CloudMask(np.zeros((4, 4), bool), MaskSource.HEURISTIC)) == 0.0
        assert mask_ratio(CloudMask(np.ones((4, 4), bool), MaskSource.HEURISTIC)) == 1.0
        flags = np.zeros((10, 10), bool)
        flags.flat[:37] = True
        assert mask_ratio(CloudMask(flags, MaskSource.HEURISTIC)) == 0.37


class TestScreenTile:
    def test_clean_tile_all_zero_ratios(self):
        # mid-tone vegetation-ish colors, no sentinel pixels, QA60 clear;
        # verified per pixel by the scalar oracle
        data = np.stack([
            np.full((8, 8), 0.18, dtype=np.float32),
            np.full((8, 8), 0.30, dtype=np.float32),
            np.full((8, 8), 0.12, dtype=np.float32),
        ])
        rgb = make_rgb(data)
        qa60 = make_qa60(np.zeros((8, 8)))
        assert not heuristic_oracle(data, HeuristicParams()).any()
        report = screen_tile(rgb, qa60)
        assert (report.nodata_ratio, report.qa60_cloud_ratio,
                report.heuristic_cloud_ratio) == (0.0, 0.0, 0.0)

    def test_white_blob_ratio(self):
        # one white 4x4 blob on a 16x16 dark field -> 16/256
        data = np.full((3, 16, 16), 0.1, dtype=np.float32)
        data[:, 4:8, 4:8] = 0.95
        tile = make_rgb(data)
        oracle = heuristic_oracle(data, HeuristicParams())
        assert int(oracle.sum()) == 16
        report = screen_tile(tile)
        assert report.heuristic_cloud_ratio == 16 / 256
        assert report.qa60_cloud_ratio is None

    def test_all_sentinel_tile(self):
        report = screen_tile(make_rgb(np.zeros((3, 4, 4))))
        assert report.nodata_ratio == 1.0
        assert report.heuristic_cloud_ratio == 0.0

    def test_nodata_excluded_from_heuristic_denominator(self):
        # 4x4 tile: 4 sentinel pixels, 3 cloudy among the 12 valid ones
        data = np.full((3, 4, 4), 0.2, dtype=np.float32)
        data[:, 0, :] = 0.0
        data[:, 1, :3] = 0.9
        report = screen_tile(make_rgb(data))
        assert report.nodata_ratio == 4 / 16
        assert report.heuristic_cloud_ratio == 3 / 12

    def test_dimension_mismatch(self):
        rgb = make_rgb(np.full((3, 4, 4), 0.2))
        qa60 = make_qa60(np.zeros((8, 8)))
        with pytest.raises(ValueError, match="match"):
            screen_tile(rgb, qa60)

    def test_ratios_match_oracle_on_random_tiles(self, rng):
        params = HeuristicParams()
        for _ in range(10):
            data = rng.random((3, 5, 7), dtype=np.float32)
            data[:, rng.random((5, 7)) < 0.2] = 0.0
            tile = make_rgb(data)
            report = screen_tile(tile, params=params)
            nodata = np.array([[all(data[c, y, x] == np.float32(0.0) for c in range(3))
                                for x in range(7)] for y in range(5)])
            cloudy = heuristic_oracle(data, params)
            n_valid = int((~nodata).sum())
            expect_h = 0.0 if n_valid == 0 else int((cloudy & ~nodata).sum()) / n_valid
            assert report.nodata_ratio == int(nodata.sum()) / nodata.size
            assert report.heuristic_cloud_ratio == expect_h


class TestScreenReportJson:
    def test_round_trip(self):
        report = ScreenReport("t1", 0.25, None, 0.0625)
        assert ScreenReport.from_json(report.to_json()) == report

    def test_ratio_bounds(self):
        with pytest.raises(ValueError):
            ScreenReport("t", 1.5, None, 0.0)

import numpy as np
import pytest

from conftest import sphere_mask
from swct.errors import DataError, GrowthCapError, SeedError
from swct.segkit import GrowParams, region_grow
from swct.volcore import LabelMap, Volume3, binary_labelmap


def ball_volume(shape=(48, 48, 48), center=(24, 24, 24), radius=10,
                inside=1500, outside=-1000):
    arr = np.full(shape, outside, dtype=np.int32)
    ball = sphere_mask(shape, center, radius)
    arr[ball] = inside
    return Volume3((0.5, 0.5, 0.5), (0, 0, 0), arr), ball


class TestParams:
    def test_empty_seeds_rejected(self):
        with pytest.raises(DataError):
            GrowParams((), (0, 100))

    def test_inverted_range_rejected(self):
        with pytest.raises(DataError):
            GrowParams(((1, 1, 1),), (100, 0))

    def test_bad_connectivity_rejected(self):
        with pytest.raises(DataError):
            GrowParams(((1, 1, 1),), (0, 1), connectivity=18)


class TestGrow:
    def test_uniform_ball_exact(self):
        v, ball = ball_volume()
        mask = region_grow(v, GrowParams(((24, 24, 24),), (1000, 2000)))
        assert np.array_equal(mask.as_bool(), ball)

    def test_seed_out_of_range_error(self):
        v, _ = ball_volume()
        with pytest.raises(SeedError, match="outside range"):
            region_grow(v, GrowParams(((0, 0, 0),), (1000, 2000)))

    def test_seed_outside_volume_error(self):
        v, _ = ball_volume()
        with pytest.raises(SeedError, match="outside volume"):
            region_grow(v, GrowParams(((99, 0, 0),), (1000, 2000)))

    def test_restriction_intersects(self):
        v, ball = ball_volume()
        half = np.zeros(v.dims, dtype=np.uint8)
        half[:24] = 1
        restriction = LabelMap(v.spacing, v.origin, half)
        mask = region_grow(v, GrowParams(((20, 24, 24),), (1000, 2000),
                                         restriction=restriction))
        assert np.array_equal(mask.as_bool(), ball & half.astype(bool))

    def test_seed_excluded_by_restriction(self):
        v, _ = ball_volume()
        restriction = binary_labelmap(v, np.zeros(v.dims, dtype=bool))
        with pytest.raises(SeedError, match="restriction"):
            region_grow(v, GrowParams(((24, 24, 24),), (1000, 2000),
                                      restriction=restriction))

    def test_seed_order_invariance(self):
        v, _ = ball_volume()
        seeds = [(24, 24, 24), (20, 24, 24), (24, 28, 24)]
        a = region_grow(v, GrowParams(tuple(seeds), (1000, 2000)))
        b = region_grow(v, GrowParams(tuple(reversed(seeds)), (1000, 2000)))
        assert np.array_equal(a.codes, b.codes)

    def test_fixed_point(self):
        v, _ = ball_volume()
        mask = region_grow(v, GrowParams(((24, 24, 24),), (1000, 2000)))
        inside = tuple(int(c) for c in np.argwhere(mask.as_bool())[137])
        again = region_grow(v, GrowParams((inside,), (1000, 2000)))
        assert np.array_equal(again.codes, mask.codes)

    def test_cap_exceeded_raises(self):
        v, ball = ball_volume()
        n = int(ball.sum())
        with pytest.raises(GrowthCapError, match="leak"):
            region_grow(v, GrowParams(((24, 24, 24),), (1000, 2000),
                                      max_voxels=n - 1))

    def test_cap_equal_is_fine(self):
        v, ball = ball_volume()
        n = int(ball.sum())
        mask = region_grow(v, GrowParams(((24, 24, 24),), (1000, 2000),
                                         max_voxels=n))
        assert int(mask.codes.sum()) == n

    def test_leak_through_bridge_hits_cap(self):
        # thin high-HU bridge connects the ball to a big pool: growth leaks
        v, ball = ball_volume()
        arr = v.voxels.copy()
        arr[24, 24, 34:40] = 1500          # bridge out of the ball (+z)
        arr[4:44, 4:44, 40:44] = 1500      # the pool
        leaky = Volume3(v.spacing, v.origin, arr)
        cap = int(ball.sum()) + 50
        with pytest.raises(GrowthCapError):
            region_grow(leaky, GrowParams(((24, 24, 24),), (1000, 2000),
                                          max_voxels=cap))

    def test_26_connectivity_crosses_diagonals(self):
        arr = np.full((8, 8, 8), -1000, dtype=np.int32)
        arr[2, 2, 2] = 1500
        arr[3, 3, 3] = 1500  # diagonal neighbor only
        v = Volume3((1, 1, 1), (0, 0, 0), arr)
        m6 = region_grow(v, GrowParams(((2, 2, 2),), (1000, 2000)))
        m26 = region_grow(v, GrowParams(((2, 2, 2),), (1000, 2000),
                                        connectivity=26))
        assert int(m6.codes.sum()) == 1
        assert int(m26.codes.sum()) == 2

    def test_phantom_bolus_recovery(self, default_phantom):
        from swct.evalkit import dice
        seq, _ = default_phantom
        for f in (0, 10, 20):
            gt = seq.frames[f].labels.codes == 9
            c = tuple(int(v) for v in np.argwhere(gt).mean(axis=0).round())
            mask = region_grow(seq.frames[f].volume,
                               GrowParams((c,), (1000, 2000)))
            assert dice(mask.as_bool(), gt).value == 1.0

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from hccnet.augment import (
    AugmentConfig,
    central_crop,
    flip,
    intensity_shift_scale,
    multi_crop,
    random_crop,
    random_flip_rot90,
    rot90,
    sample_series,
    sequence_view,
    stack_series,
)
from hccnet.volumes import Volume

from conftest import make_visit


def rand_volume(shape=(1, 6, 6, 6), seed=0):
    return Volume(np.random.default_rng(seed).standard_normal(shape).astype(np.float32))


class TestCrop:
    def test_full_size_is_identity(self):
        v = rand_volume()
        assert random_crop(v, 6, np.random.default_rng(0)) == v

    def test_too_large(self):
        with pytest.raises(ValueError):
            random_crop(rand_volume(), 7, np.random.default_rng(0))

    def test_origin_uniform(self):
        # 72 -> 48 leaves 25 origins along z; a z ramp makes the first voxel equal the origin
        v = Volume(np.broadcast_to(np.arange(72, dtype=np.float32)[None, :, None, None], (1, 72, 48, 48)))
        rng = np.random.default_rng(1)
        origins = [int(random_crop(v, 48, rng).data[0, 0, 0, 0]) for _ in range(10_000)]
        counts = np.bincount(origins, minlength=25)
        assert counts.shape == (25,) and counts.min() > 0
        assert stats.chisquare(counts).pvalue > 1e-3

    def test_central_crop_origin(self):
        v = Volume(np.arange(7, dtype=np.float32)[None, :, None, None] * np.ones((1, 7, 3, 3), np.float32))
        c = central_crop(v, 3)
        assert c.data[0, 0, 0, 0] == 2.0  # floor((7 - 3) / 2)
        assert c.dims == (3, 3, 3)

    def test_channels_preserved(self):
        v = rand_volume((4, 9, 9, 9))
        assert random_crop(v, 6, np.random.default_rng(0)).channels == 4


class TestSeries:
    def test_single_series(self):
        visit = make_visit(0)
        rng = np.random.default_rng(0)
        assert all(sample_series(visit, rng) is visit.series[0] for _ in range(5))

    def test_uniform_choice(self):
        visit = make_visit(0, n_series=4)
        rng = np.random.default_rng(2)
        ids = Counter(id(sample_series(visit, rng)) for _ in range(10_000))
        for s in visit.series:
            assert abs(ids[id(s)] / 10_000 - 0.25) <= 0.02

    def test_stack(self):
        visit = make_visit(0, n_series=4)
        v = stack_series(visit)
        assert v.channels == 4
        for c, s in enumerate(visit.series):
            assert v.channel(c).data.tobytes() == s.data.tobytes()
        one = make_visit(0)
        assert stack_series(one) == one.series[0]


class TestIntensity:
    def test_identity_ranges(self):
        v = rand_volume()
        cfg = AugmentConfig(scale_range=(1, 1), shift_range=(0, 0))
        assert intensity_shift_scale(v, cfg, np.random.default_rng(0)) == v

    def test_constant_volume(self):
        v = Volume(np.ones((1, 3, 3, 3)))
        cfg = AugmentConfig(scale_range=(1.1, 1.1), shift_range=(0, 0))
        out = intensity_shift_scale(v, cfg, np.random.default_rng(0))
        np.testing.assert_allclose(out.data, 1.1, rtol=1e-6)

    def test_scale_uniform(self):
        v = Volume(np.ones((1, 3, 3, 3)))  # zero range, so the shift term vanishes
        cfg = AugmentConfig(p_intensity=1.0)
        rng = np.random.default_rng(3)
        a = np.array([intensity_shift_scale(v, cfg, rng).data.flat[0] for _ in range(10_000)])
        assert a.min() >= 0.9 - 1e-6 and a.max() <= 1.1 + 1e-6
        assert stats.kstest(a, stats.uniform(0.9, 0.2).cdf).pvalue > 1e-3

    def test_never_applied(self):
        v = rand_volume()
        assert intensity_shift_scale(v, AugmentConfig(p_intensity=0.0), np.random.default_rng(0)) is v


class TestFlipRot:
    def test_involution(self):
        v = rand_volume()
        for axis in range(3):
            assert flip(flip(v, axis), axis) == v

    def test_order_four(self):
        v = rand_volume()
        for axis in range(3):
            out = v
            for _ in range(4):
                out = rot90(out, axis)
            assert out == v
            assert rot90(v, axis) != v

    def test_non_cubic_rotation(self):
        v = rand_volume((1, 3, 4, 5))
        with pytest.raises(ValueError):
            rot90(v, 0)
        with pytest.raises(ValueError):
            random_flip_rot90(v, AugmentConfig(p_flip=0, p_rot90=1.0), np.random.default_rng(0))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), p_flip=st.floats(0, 1), p_rot=st.floats(0, 1))
    def test_voxel_multiset_preserved(self, seed, p_flip, p_rot):
        v = rand_volume((2, 5, 5, 5), seed)
        out = random_flip_rot90(v, AugmentConfig(p_flip=p_flip, p_rot90=p_rot), np.random.default_rng(seed))
        np.testing.assert_array_equal(np.sort(out.data, axis=None), np.sort(v.data, axis=None))


class TestPipelines:
    def test_multi_crop_shapes(self):
        visit = make_visit(0, dims=(12, 12, 12), n_series=4)
        cfg = AugmentConfig(global_crop=9, local_crop=6)
        g, l = multi_crop(visit, np.random.default_rng(0), cfg)
        assert len(g) == 2 and len(l) == 2
        assert all(x.dims == (9, 9, 9) and x.channels == 1 for x in g)
        assert all(x.dims == (6, 6, 6) and x.channels == 1 for x in l)

    def test_default_view_sizes(self):
        cfg = AugmentConfig()
        assert (cfg.global_crop, cfg.local_crop) == (72, 48)

    def test_multi_crop_identity(self):
        visit = make_visit(0, dims=(6, 6, 6))
        cfg = AugmentConfig.identity(global_crop=6, local_crop=6)
        g, l = multi_crop(visit, np.random.default_rng(0), cfg)
        assert all(x == visit.series[0] for x in g + l)

    def test_multi_crop_pure_given_rng(self):
        visit = make_visit(0, dims=(12, 12, 12), n_series=4)
        cfg = AugmentConfig(global_crop=9, local_crop=6)
        a = multi_crop(visit, np.random.default_rng(9), cfg)
        b = multi_crop(visit, np.random.default_rng(9), cfg)
        assert all(x == y for x, y in zip(a[0] + a[1], b[0] + b[1]))

    def test_sequence_view_channels(self):
        visit = make_visit(0, dims=(9, 9, 9), n_series=4)
        out = sequence_view(visit, 6, AugmentConfig(), np.random.default_rng(0))
        assert out.channels == 4 and out.dims == (6, 6, 6)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AugmentConfig(p_flip=1.5)
        with pytest.raises(ValueError):
            AugmentConfig(scale_range=(0.0, 1.0))

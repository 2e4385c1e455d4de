import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.exceptions import NotFittedError

from composite_backdoor.errors import InvalidSpecError, ProvenanceError
from composite_backdoor.triggers import (
    DEFAULT_SHARPEN_KERNEL,
    BlendTrigger,
    CompositeTrigger,
    SharpenKernelTrigger,
    WarpTrigger,
)

from oracles import sharpen_ref, warp_ref

RAMP_4x4 = (np.arange(16, dtype=np.float64).reshape(4, 4, 1)) / 16.0

# fixed 2x2x2 control grid for the frozen warp regression below
FROZEN_GRID = np.array([[[0.3, -0.6], [-0.8, 0.2]],
                        [[0.5, 0.9], [-0.1, -0.4]]])

# warp_ref(RAMP_4x4, FROZEN_GRID, strength=0.5), frozen from the scalar-loop
# oracle in oracles.py
FROZEN_WARP_EXPECTED = np.array([
    [0.00740131578947369, 0.06186038011695907, 0.11330409356725146, 0.1875],
    [0.24351242690058472, 0.30425262616417587, 0.36433290015161357, 0.4250730994152047],
    [0.555829678362573, 0.5930426954732511, 0.6207730940004332, 0.657986111111111],
    [0.7623355263157895, 0.8204495614035088, 0.8754568713450293, 0.8955592105263158],
])

# sharpen_ref on a 5x5 image of 0.2 with a 0.9 center pixel, default kernel,
# ratio 0.075; frozen from the naive-convolution oracle
FROZEN_SHARPEN_EXPECTED = np.array([
    [0.2, 0.2, 0.2, 0.2, 0.2],
    [0.2, 0.2, 0.14750000000000002, 0.2, 0.2],
    [0.2, 0.14750000000000002, 1.0, 0.1475, 0.2],
    [0.2, 0.2, 0.1475, 0.2, 0.2],
    [0.2, 0.2, 0.2, 0.2, 0.2],
])


def random_image(rng, h=8, w=8, c=3):
    return rng.random((h, w, c))


def warp_with_grid(grid, strength, shape):
    trig = WarpTrigger(grid_size=grid.shape[0], strength=strength, seed=0)
    trig.fit_shape(shape)
    trig.control_grid_ = grid.copy()
    trig._precompute_sampling()
    return trig


class TestWarp:
    def test_zero_strength_is_bit_exact_identity(self):
        rng = np.random.default_rng(0)
        img = random_image(rng)
        trig = WarpTrigger(grid_size=4, strength=0.0, seed=3).fit_shape(img.shape)
        out = trig.transform(img[None])[0]
        assert np.array_equal(out, img)

    def test_constant_image_invariant_any_strength(self):
        img = np.full((8, 8, 3), 0.37)
        for s in (0.25, 1.0, 4.0):
            trig = WarpTrigger(grid_size=4, strength=s, seed=7).fit_shape(img.shape)
            out = trig.transform(img[None])[0]
            assert np.array_equal(out, img)

    def test_frozen_ramp_matches_resampling_oracle(self):
        trig = warp_with_grid(FROZEN_GRID, 0.5, (4, 4, 1))
        out = trig.transform(RAMP_4x4[None])[0, :, :, 0]
        np.testing.assert_allclose(out, FROZEN_WARP_EXPECTED, atol=1e-6)
        # and the oracle itself still reproduces the frozen array
        ref = warp_ref(RAMP_4x4, FROZEN_GRID, 0.5)[:, :, 0]
        np.testing.assert_allclose(ref, FROZEN_WARP_EXPECTED, atol=1e-12)

    def test_random_cases_match_oracle(self):
        rng = np.random.default_rng(42)
        for k, s, h, w in [(2, 0.5, 4, 4), (4, 0.25, 8, 8), (3, 2.0, 6, 9), (4, 0.4167, 10, 7)]:
            img = rng.random((h, w, 2))
            trig = WarpTrigger(grid_size=k, strength=s, seed=rng.integers(1 << 30))
            trig.fit_shape(img.shape)
            out = trig.transform(img[None])[0]
            ref = warp_ref(img, trig.control_grid_, s)
            np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_grid_regenerates_bit_identical_from_seed(self):
        a = WarpTrigger(grid_size=4, strength=0.25, seed=11).fit_shape((8, 8, 3))
        b = WarpTrigger(grid_size=4, strength=0.25, seed=11).fit_shape((8, 8, 3))
        assert np.array_equal(a.control_grid_, b.control_grid_)

    def test_grid_size_below_two_rejected(self):
        with pytest.raises(InvalidSpecError):
            WarpTrigger(grid_size=1, strength=0.25).fit_shape((8, 8, 3))

    def test_negative_strength_rejected(self):
        with pytest.raises(InvalidSpecError):
            WarpTrigger(grid_size=4, strength=-0.1).fit_shape((8, 8, 3))


class TestBlend:
    def test_zero_ratio_identity(self):
        rng = np.random.default_rng(1)
        img = random_image(rng)
        trig = BlendTrigger(ratio=0.0, seed=5).fit_shape(img.shape)
        assert np.array_equal(trig.transform(img[None])[0], img)

    def test_full_ratio_returns_pattern(self):
        rng = np.random.default_rng(2)
        img = random_image(rng)
        trig = BlendTrigger(ratio=1.0, seed=5).fit_shape(img.shape)
        assert np.array_equal(trig.transform(img[None])[0], trig.pattern_)

    def test_closed_form_blend_value(self):
        img = np.full((4, 4, 3), 0.5)
        trig = BlendTrigger(ratio=0.005, seed=0).fit_shape(img.shape)
        trig.pattern_ = np.ones_like(img)
        out = trig.transform(img[None])[0]
        # (1 - 0.005) * 0.5 + 0.005 * 1.0
        np.testing.assert_allclose(out, 0.5025, atol=1e-12)

    def test_pattern_in_unit_range_and_seeded(self):
        a = BlendTrigger(ratio=0.1, seed=9).fit_shape((16, 16, 3))
        b = BlendTrigger(ratio=0.1, seed=9).fit_shape((16, 16, 3))
        assert np.array_equal(a.pattern_, b.pattern_)
        assert a.pattern_.min() >= 0.0 and a.pattern_.max() <= 1.0

    def test_shape_mismatch_rejected(self):
        trig = BlendTrigger(ratio=0.1, seed=0).fit_shape((8, 8, 3))
        with pytest.raises(InvalidSpecError):
            trig.transform(np.zeros((2, 4, 4, 3)))

    def test_ratio_out_of_range_rejected(self):
        with pytest.raises(InvalidSpecError):
            BlendTrigger(ratio=1.5).fit_shape((4, 4, 1))


class TestSharpenKernel:
    def test_zero_ratio_identity(self):
        rng = np.random.default_rng(3)
        img = random_image(rng)
        trig = SharpenKernelTrigger(ratio=0.0).fit_shape(img.shape)
        assert np.array_equal(trig.transform(img[None])[0], img)

    def test_unit_sum_kernel_on_constant_image(self):
        # 0.5 is dyadic, so the whole computation stays exact
        img = np.full((6, 6, 3), 0.5)
        for g in (0.075, 0.5, 1.0):
            trig = SharpenKernelTrigger(ratio=g).fit_shape(img.shape)
            assert np.array_equal(trig.transform(img[None])[0], img)

    def test_frozen_bright_center_matches_convolution_oracle(self):
        img = np.full((5, 5, 1), 0.2)
        img[2, 2, 0] = 0.9
        trig = SharpenKernelTrigger(ratio=0.075).fit_shape(img.shape)
        out = trig.transform(img[None])[0, :, :, 0]
        np.testing.assert_allclose(out, FROZEN_SHARPEN_EXPECTED, atol=1e-6)
        ref = sharpen_ref(img, DEFAULT_SHARPEN_KERNEL, 0.075)[:, :, 0]
        np.testing.assert_allclose(ref, FROZEN_SHARPEN_EXPECTED, atol=1e-12)

    def test_random_kernels_match_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(4):
            img = rng.random((7, 9, 3))
            kernel = rng.uniform(-1, 1, (3, 3))
            trig = SharpenKernelTrigger(ratio=0.3, kernel=kernel).fit_shape(img.shape)
            out = trig.transform(img[None])[0]
            ref = sharpen_ref(img, kernel, 0.3)
            np.testing.assert_allclose(out, ref, atol=1e-6)

    def test_non_3x3_kernel_rejected(self):
        with pytest.raises(InvalidSpecError):
            SharpenKernelTrigger(ratio=0.1, kernel=np.ones((2, 2))).fit_shape((4, 4, 1))


class TestScaling:
    def test_warp_strength_scales(self):
        trig = WarpTrigger(grid_size=4, strength=0.25, seed=1).fit_shape((8, 8, 3))
        scaled = trig.scaled(5.0 / 3.0)
        assert scaled.strength == pytest.approx(0.4166666666666667, abs=1e-12)
        assert np.array_equal(scaled.control_grid_, trig.control_grid_)

    def test_factor_one_is_identity(self):
        trig = BlendTrigger(ratio=0.005, seed=2).fit_shape((8, 8, 3))
        scaled = trig.scaled(1.0)
        assert scaled.ratio == trig.ratio
        assert np.array_equal(scaled.pattern_, trig.pattern_)

    def test_ratio_clamps_at_one(self):
        trig = BlendTrigger(ratio=0.005, seed=2).fit_shape((8, 8, 3))
        assert trig.scaled(400.0).ratio == 1.0

    def test_nonpositive_factor_rejected(self):
        trig = WarpTrigger().fit_shape((8, 8, 3))
        for f in (0.0, -1.0):
            with pytest.raises(ValueError):
                trig.scaled(f)

    @given(a=st.floats(0.1, 5.0), b=st.floats(0.1, 5.0))
    @settings(max_examples=30, deadline=None)
    def test_scale_composition(self, a, b):
        trig = WarpTrigger(grid_size=2, strength=0.3, seed=0).fit_shape((4, 4, 1))
        twice = trig.scaled(a).scaled(b)
        once = trig.scaled(a * b)
        assert twice.strength == pytest.approx(once.strength, rel=1e-12)


class TestComposite:
    def composite(self, shape=(8, 8, 3), seeds=(101, 102, 103)):
        return CompositeTrigger([
            WarpTrigger(grid_size=4, strength=0.25, seed=seeds[0]),
            BlendTrigger(ratio=0.005, seed=seeds[1]),
            SharpenKernelTrigger(ratio=0.075, seed=seeds[2]),
        ]).fit_shape(shape)

    def test_identity_component_passthrough(self):
        rng = np.random.default_rng(5)
        img = random_image(rng)
        trig = CompositeTrigger([BlendTrigger(ratio=0.0, seed=1)]).fit_shape(img.shape)
        assert np.array_equal(trig.transform(img[None])[0], img)

    def test_absorbing_component(self):
        rng = np.random.default_rng(6)
        img = random_image(rng)
        blend = BlendTrigger(ratio=1.0, seed=4)
        noop = SharpenKernelTrigger(ratio=0.0)
        trig = CompositeTrigger([blend, noop]).fit_shape(img.shape)
        assert np.array_equal(trig.transform(img[None])[0], blend.pattern_)

    def test_equals_manual_chaining(self):
        rng = np.random.default_rng(7)
        img = rng.random((2, 8, 8, 3))
        trig = self.composite()
        warp, blend, sharpen = trig.components
        manual = sharpen.transform(blend.transform(warp.transform(img)))
        np.testing.assert_allclose(trig.transform(img), manual, atol=1e-6)
        assert np.array_equal(trig.transform(img), manual)

    def test_empty_rejected(self):
        with pytest.raises(InvalidSpecError):
            CompositeTrigger([]).fit_shape((8, 8, 3))

    def test_duplicate_kinds_rejected(self):
        with pytest.raises(InvalidSpecError):
            CompositeTrigger([
                BlendTrigger(ratio=0.1, seed=1),
                BlendTrigger(ratio=0.2, seed=2),
            ]).fit_shape((8, 8, 3))

    def test_scaled_scales_every_component(self):
        trig = self.composite()
        scaled = trig.scaled(0.5)
        mags = scaled.magnitudes()
        assert mags["warp"]["strength"] == pytest.approx(0.125)
        assert mags["blend"]["ratio"] == pytest.approx(0.0025)
        assert mags["sharpen"]["ratio"] == pytest.approx(0.0375)

    def test_unfitted_transform_raises(self):
        trig = CompositeTrigger([BlendTrigger(ratio=0.1)])
        with pytest.raises(NotFittedError):
            trig.transform(np.zeros((1, 4, 4, 3)))


class TestNoiseVariant:
    def test_deterministic_given_seed(self):
        base = WarpTrigger(grid_size=4, strength=0.25, seed=1).fit_shape((8, 8, 3))
        a = base.noise_variant(777)
        b = base.noise_variant(777)
        assert np.array_equal(a.control_grid_, b.control_grid_)

    def test_distinct_seeds_differ(self):
        base = BlendTrigger(ratio=0.1, seed=1).fit_shape((8, 8, 3))
        a = base.noise_variant(1)
        b = base.noise_variant(2)
        assert not np.array_equal(a.pattern_, b.pattern_)

    def test_magnitude_preserved(self):
        base = SharpenKernelTrigger(ratio=0.075).fit_shape((8, 8, 3))
        var = base.noise_variant(5)
        assert var.ratio == base.ratio
        assert var.random_kernel
        assert not np.array_equal(var.kernel_, base.kernel_)
        assert var.kernel_.min() >= -1.0 and var.kernel_.max() <= 1.0

    def test_warp_variant_grid_distribution(self):
        # uniform [-1, 1] on a 16x16x2 grid: mean should sit within 3 sigma of 0
        base = WarpTrigger(grid_size=16, strength=0.25, seed=1).fit_shape((16, 16, 3))
        var = base.noise_variant(31415)
        g = var.control_grid_
        assert g.min() >= -1.0 and g.max() <= 1.0
        sigma = np.sqrt((1.0 / 3.0) / g.size)
        assert abs(g.mean()) < 3.0 * sigma


class TestSerialization:
    def roundtrip(self, trig):
        d = CompositeTrigger([trig]).fit_shape((8, 8, 3)).to_dict()
        return CompositeTrigger.from_dict(d).components[0]

    def test_warp_roundtrip(self):
        orig = WarpTrigger(grid_size=4, strength=0.4167, seed=33)
        back = self.roundtrip(orig)
        orig.fit_shape((8, 8, 3))
        assert np.array_equal(back.control_grid_, orig.control_grid_)
        assert back.strength == orig.strength

    def test_blend_roundtrip(self):
        orig = BlendTrigger(ratio=0.0083, seed=44)
        back = self.roundtrip(orig)
        orig.fit_shape((8, 8, 3))
        assert np.array_equal(back.pattern_, orig.pattern_)

    def test_sharpen_roundtrip_default_and_random(self):
        for trig in (SharpenKernelTrigger(ratio=0.125, seed=1),
                     SharpenKernelTrigger(ratio=0.125, seed=2, random_kernel=True)):
            back = self.roundtrip(trig)
            assert np.array_equal(back.kernel_, trig.kernel_)

    def test_tampered_hash_rejected(self):
        d = WarpTrigger(grid_size=4, strength=0.25, seed=1).fit_shape((8, 8, 3)).to_dict()
        d["seed"] = 2  # artifact no longer matches the stored hash
        with pytest.raises(ProvenanceError):
            from composite_backdoor.triggers import _ImageTrigger
            _ImageTrigger.from_dict(d)


@given(
    h=st.integers(4, 12),
    w=st.integers(4, 12),
    c=st.sampled_from([1, 3]),
    kind=st.sampled_from(["warp", "blend", "sharpen"]),
    mag=st.floats(0.0, 1.0),
    seed=st.integers(0, 2**31),
)
@settings(max_examples=40, deadline=None)
def test_shape_and_range_preserved(h, w, c, kind, mag, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((2, h, w, c))
    if kind == "warp":
        trig = WarpTrigger(grid_size=3, strength=4.0 * mag, seed=seed)
    elif kind == "blend":
        trig = BlendTrigger(ratio=mag, seed=seed)
    else:
        trig = SharpenKernelTrigger(ratio=mag, seed=seed)
    out = trig.fit_shape(img.shape[1:]).transform(img)
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    # determinism: applying twice gives bit-identical pixels
    assert np.array_equal(out, trig.transform(img))

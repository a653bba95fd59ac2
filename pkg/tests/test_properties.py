"""Differentiable property extraction: values, edge cases, gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selfguide import autodiff as ad
from selfguide.autodiff import Tensor, check_gradients
from selfguide.properties import (DEFAULT_CONFIG, PropertyConfig, appearance,
                                  centroid, normalize_map, shape, size,
                                  threshold_map)

RNG = np.random.default_rng(11)


class TestNormalize:
    def test_exact_endpoints(self):
        y = normalize_map(Tensor(RNG.random((9, 9)) * 3 + 1)).data
        assert y.min() == 0.0 and y.max() == 1.0

    def test_constant_map_goes_to_zero(self):
        y = normalize_map(Tensor(np.full((4, 4), 2.5))).data
        np.testing.assert_array_equal(y, 0.0)

    def test_affine_invariance(self):
        x = RNG.random((6, 6))
        a = normalize_map(Tensor(x)).data
        b = normalize_map(Tensor(3.0 * x - 7.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient(self):
        proj = RNG.standard_normal((8, 8))
        check_gradients(lambda a: (normalize_map(a) * proj).sum(),
                        [RNG.random((8, 8))])


class TestThreshold:
    def test_binary_fixed_point_exact(self):
        m = (RNG.random((12, 12)) > 0.4).astype(np.float64)
        np.testing.assert_array_equal(threshold_map(Tensor(m)).data, m)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (6, 7), elements=st.sampled_from([0.0, 1.0])))
    def test_binary_fixed_point_hypothesis(self, m):
        if m.min() == m.max():  # constant maps normalize to zero by design
            return
        np.testing.assert_array_equal(threshold_map(Tensor(m)).data, m)

    def test_output_range_endpoints(self):
        y = threshold_map(Tensor(RNG.random((16, 16)))).data
        assert abs(y.min()) < 1e-9 and abs(y.max() - 1.0) < 1e-9

    def test_sharpness_monotonicity(self):
        """Steeper thresholds push mid values harder toward the poles."""
        x = Tensor(np.linspace(0, 1, 11).reshape(1, 11))
        soft = threshold_map(x, PropertyConfig(sharpness=5.0)).data
        hard = threshold_map(x, PropertyConfig(sharpness=50.0)).data
        mid = slice(1, 5)
        assert np.all(hard[0, mid] < soft[0, mid])

    def test_bad_sharpness_rejected(self):
        with pytest.raises(ValueError):
            PropertyConfig(sharpness=0.0)

    def test_gradient(self):
        proj = RNG.standard_normal((8, 8))
        check_gradients(lambda a: (threshold_map(a) * proj).sum(),
                        [RNG.random((8, 8))])


class TestCentroid:
    def test_one_hot_hits_pixel_center(self):
        m = np.zeros((8, 8))
        m[2, 5] = 1.0
        c = centroid(Tensor(m)).data
        np.testing.assert_allclose(c, [(5 + 0.5) / 8, (2 + 0.5) / 8])

    def test_uniform_map_is_center(self):
        c = centroid(Tensor(np.ones((6, 10)))).data
        np.testing.assert_allclose(c, [0.5, 0.5], atol=1e-12)

    def test_mass_weighting(self):
        m = np.zeros((4, 4))
        m[0, 0] = 1.0
        m[0, 3] = 3.0
        c = centroid(Tensor(m)).data
        np.testing.assert_allclose(c[0], (0.125 * 1 + 0.875 * 3) / 4)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            centroid(Tensor(np.zeros((4, 4))))

    def test_gradient(self):
        proj = RNG.standard_normal(2)
        check_gradients(lambda a: (centroid(a) * proj).sum(),
                        [RNG.random((8, 8)) + 0.05])

    def test_thresholded_variant(self):
        m = RNG.random((8, 8))
        cfg = PropertyConfig(centroid_thresholded=True)
        c1 = centroid(Tensor(m), cfg).data
        with ad.no_grad():
            want = centroid(threshold_map(Tensor(m))).data
        np.testing.assert_allclose(c1, want, atol=1e-12)


class TestSizeAndShape:
    def test_size_of_binary_mask_is_coverage(self):
        m = (RNG.random((10, 10)) > 0.7).astype(np.float64)
        if m.min() == m.max():
            m[0, 0] = 1.0 - m[0, 0]
        assert float(size(Tensor(m)).data) == pytest.approx(m.mean(), abs=1e-12)

    def test_shape_is_thresholded_map(self):
        m = RNG.random((8, 8))
        np.testing.assert_array_equal(shape(Tensor(m)).data,
                                      threshold_map(Tensor(m)).data)

    def test_size_gradient(self):
        check_gradients(lambda a: size(a), [RNG.random((8, 8))])

    def test_shape_gradient(self):
        proj = RNG.standard_normal((8, 8))
        check_gradients(lambda a: (shape(a) * proj).sum(), [RNG.random((8, 8))])


class TestAppearance:
    def test_uniform_mask_averages_features(self):
        psi = RNG.standard_normal((8, 8, 5))
        m = (RNG.random((8, 8)) > 0.5).astype(np.float64)
        m[0, 0], m[1, 1] = 1.0, 0.0
        got = appearance(Tensor(m), Tensor(psi)).data
        want = psi[m == 1.0].mean(axis=0)
        np.testing.assert_allclose(got, want, rtol=1e-9)

    def test_resamples_coarser_mask(self):
        psi = RNG.standard_normal((8, 8, 3))
        m = RNG.random((4, 4))
        out = appearance(Tensor(m), Tensor(psi))
        assert out.shape == (3,)

    def test_gradient_flows_through_activations_only(self):
        """The mask path is stop-gradient: attention input gets an
        exactly-zero gradient, the feature path passes FD."""
        proj = RNG.standard_normal(5)
        worst = check_gradients(
            lambda a, p: (appearance(a, p) * proj).sum(),
            [RNG.random((8, 8)), RNG.standard_normal((8, 8, 5))],
            skip=(0,))
        assert worst <= 1e-5

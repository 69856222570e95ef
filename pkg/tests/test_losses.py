import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depthalign.errors import DegenerateError, DimensionError, ParameterError
from depthalign.fields import SparseDepth
from depthalign.losses import (
    LossConfig,
    LossValueGrad,
    edge_weights,
    loss_depth,
    loss_depth_l2,
    loss_rssim,
    loss_smooth,
    total_loss,
)

from fdcheck import check_all, fd_grad, random_instance


def single_point(shape, ij, value):
    mask = np.zeros(shape, bool)
    mask[ij] = True
    vals = np.zeros(shape)
    vals[ij] = value
    return SparseDepth(vals, mask)


class TestLossConfig:
    @pytest.mark.parametrize(
        "kw", [{"lambda_smooth": -1}, {"lambda_rssim": -0.1}, {"rssim_window": 4}, {"rssim_window": 1}, {"rssim_C": 0}]
    )
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            LossConfig(**kw)

    def test_defaults(self):
        cfg = LossConfig()
        assert (cfg.lambda_smooth, cfg.lambda_rssim, cfg.rssim_window, cfg.stride) == (0.2, 0.3, 7, 7)


class TestLossDepth:
    def test_exact_match(self, rng):
        pred = rng.normal(size=(4, 4))
        y = SparseDepth.from_dense(np.abs(pred) + 1)
        y = SparseDepth(np.where(y.mask, pred, 0), np.ones((4, 4), bool))
        out = loss_depth(pred, y)
        assert out.value == 0
        np.testing.assert_array_equal(out.grad, 0)

    def test_single_point(self):
        y = single_point((3, 3), (1, 2), 5.0)
        pred = np.full((3, 3), 3.0)
        out = loss_depth(pred, y)
        assert out.value == 2.0
        assert out.grad[1, 2] == -1.0
        assert np.count_nonzero(out.grad) == 1

    def test_empty(self):
        with pytest.raises(ParameterError):
            loss_depth(np.zeros((2, 2)), SparseDepth(np.zeros((2, 2)), np.zeros((2, 2), bool)))

    def test_shape(self):
        with pytest.raises(DimensionError):
            loss_depth(np.zeros((2, 3)), single_point((2, 2), (0, 0), 1.0))

    def test_l2_variant(self, rng):
        pred, y, _, _ = random_instance(3)
        out = loss_depth_l2(pred, y)
        r = (y.values - pred)[y.mask]
        assert out.value == pytest.approx(0.5 * np.sum(r**2) / y.count)
        pixels = list(zip(*np.nonzero(np.ones_like(pred, bool))))
        num = fd_grad(lambda x: loss_depth_l2(x, y).value, pred, pixels)
        np.testing.assert_allclose(out.grad.ravel(), num, atol=1e-8)


class TestLossSmooth:
    def test_constant(self, rng):
        assert loss_smooth(np.full((5, 6), 3.0), rng.random((5, 6))).value == 0

    def test_x_ramp(self):
        H, W, s = 4, 6, -0.7
        pred = s * np.arange(W)[None, :] * np.ones((H, 1))
        out = loss_smooth(pred, np.zeros((H, W)))
        assert out.value == pytest.approx(abs(s) * (W - 1) * H / (H * W))

    def test_edge_weights_in_unit_interval(self, rng):
        wx, wy = edge_weights(rng.random((5, 7)) * 10)
        assert wx.shape == (5, 6) and wy.shape == (4, 7)
        assert np.all((wx > 0) & (wx <= 1)) and np.all((wy > 0) & (wy <= 1))

    def test_color_guidance(self, rng):
        img = rng.random((4, 5, 3))
        wx, _ = edge_weights(img)
        np.testing.assert_allclose(wx, np.exp(-np.abs(np.diff(img.mean(-1), axis=1))))

    def test_shape(self):
        with pytest.raises(DimensionError):
            loss_smooth(np.zeros((3, 3)), np.zeros((3, 4)))


class TestLossRssim:
    def test_identical(self, rng):
        d = rng.normal(size=(14, 14))
        assert loss_rssim(d, d).value == pytest.approx(0.0, abs=1e-12)

    def test_affine_invariance(self, rng):
        d = rng.normal(size=(14, 21))
        assert loss_rssim(d, 3.0 * d - 7.0).value == pytest.approx(0.0, abs=1e-10)

    def test_negation(self, rng):
        d = rng.normal(size=(7, 7))
        C = 1e-4
        u = (d - d.mean()) / d.std()
        var = u.var()
        expected = 1 - (-2 * var + C) / (2 * var + C)
        assert loss_rssim(d, -d, LossConfig(rssim_C=C)).value == pytest.approx(expected, rel=1e-10)
        assert loss_rssim(d, -d, LossConfig(rssim_C=1e-12)).value == pytest.approx(2.0, abs=1e-9)

    def test_symmetry(self, rng):
        a, b = rng.normal(size=(2, 14, 14))
        assert loss_rssim(a, b).value == pytest.approx(loss_rssim(b, a).value, rel=1e-12)

    def test_negative_scale_is_not_invariant(self, rng):
        a, b = rng.normal(size=(2, 14, 14))
        assert loss_rssim(-a, b).value != pytest.approx(loss_rssim(a, b).value)

    def test_zero_variance(self, rng):
        with pytest.raises(DegenerateError):
            loss_rssim(np.ones((7, 7)), rng.normal(size=(7, 7)))

    def test_window_larger_than_image(self, rng):
        with pytest.raises(ParameterError):
            loss_rssim(rng.normal(size=(5, 5)), rng.normal(size=(5, 5)))

    def test_gradient_wrt_first_argument(self, rng):
        a, b = rng.normal(size=(2, 14, 14))
        pixels = list(zip(*np.nonzero(np.ones_like(a, bool))))
        num = fd_grad(lambda x: loss_rssim(x, b).value, a, pixels)
        np.testing.assert_allclose(loss_rssim(a, b, which="d1").grad.ravel(), num, atol=1e-7)

    def test_overlapping_stride(self, rng):
        a, b = rng.normal(size=(2, 12, 12))
        cfg = LossConfig(rssim_window=5, rssim_stride=2)
        pixels = list(zip(*np.nonzero(np.ones_like(a, bool))))
        num = fd_grad(lambda x: loss_rssim(a, x, cfg).value, b, pixels)
        np.testing.assert_allclose(loss_rssim(a, b, cfg).grad.ravel(), num, atol=1e-7)

    @given(
        arrays(np.float64, (14, 14), elements=st.floats(-10, 10)),
        st.floats(0.1, 100),
        st.floats(-50, 50),
    )
    @settings(max_examples=40, deadline=None)
    def test_invariance_property(self, d, a, b):
        if d.std() < 1e-3:
            return
        other = np.sin(np.arange(196.0)).reshape(14, 14)
        assert loss_rssim(a * d + b, other).value == pytest.approx(loss_rssim(d, other).value, abs=1e-8)


class TestTotalLoss:
    def test_zero_weights_is_depth(self):
        pred, y, g, d = random_instance(0)
        cfg = LossConfig(lambda_smooth=0, lambda_rssim=0)
        out = total_loss(pred, y, g, d, cfg)
        ref = loss_depth(pred, y)
        assert out.value == ref.value
        np.testing.assert_array_equal(out.grad, ref.grad)

    def test_weighted_sum(self):
        pred, y, g, d = random_instance(1)
        cfg = LossConfig()
        out = total_loss(pred, y, g, d, cfg)
        parts = [loss_depth(pred, y), loss_smooth(pred, g), loss_rssim(d, pred, cfg)]
        assert out.value == pytest.approx(parts[0].value + 0.2 * parts[1].value + 0.3 * parts[2].value, rel=1e-12)
        np.testing.assert_allclose(out.grad, parts[0].grad + 0.2 * parts[1].grad + 0.3 * parts[2].grad, atol=1e-15)

    def test_affine_of_structure_fitting_y(self, rng):
        d = rng.normal(size=(14, 14))
        pred = 2.0 * d + 5.0
        mask = rng.random(d.shape) < 0.2
        y = SparseDepth(np.where(mask, pred, 0), mask)
        g = np.zeros_like(d)
        out = total_loss(pred, y, g, d)
        assert out.value == pytest.approx(0.2 * loss_smooth(pred, g).value, abs=1e-10)

    def test_value_grad_arithmetic(self):
        a = LossValueGrad(1.0, np.ones(2))
        b = LossValueGrad(2.0, np.full(2, 3.0))
        c = a + b.scaled(0.5)
        assert c.value == 2.0
        np.testing.assert_array_equal(c.grad, [2.5, 2.5])


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        errs = check_all(seed)
        assert max(errs.values()) < 1e-4, errs

    @given(st.integers(0, 2**31))
    @settings(max_examples=10, deadline=None)
    def test_nonnegative(self, seed):
        pred, y, g, d = random_instance(seed, (8, 8))
        assert loss_depth(pred, y).value >= 0 if y.count else True
        assert loss_smooth(pred, g).value >= 0

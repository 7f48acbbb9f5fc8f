import numpy as np
import pytest

from splatbev.losses import (DEPTH_LOG_FLOOR, LossConfig, NormalizedDepth,
                             loss_bev, loss_center_l2, loss_depth_l1,
                             loss_depth_silog, loss_feature_cosine, loss_focal,
                             loss_offset_l1, loss_render_mse, loss_total)
from splatbev.core import RenderOutput


def fd_check(fn, x, grad, eps=1e-6, n_probes=24, rng=None, rtol=1e-5, atol=1e-9):
    """Central-difference audit of an elementwise-input scalar function.

    ``atol`` absorbs central-difference roundoff on near-zero gradients.
    """
    rng = rng or np.random.default_rng(0)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = rng.choice(flat.size, size=min(n_probes, flat.size), replace=False)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn()
        flat[i] = orig - eps
        lo = fn()
        flat[i] = orig
        fd = (hi - lo) / (2 * eps)
        assert abs(fd - gflat[i]) <= max(rtol * max(abs(fd), abs(gflat[i])), atol), \
            f"index {i}: fd {fd} vs analytic {gflat[i]}"


class TestRenderMse:
    def test_identical_is_zero(self, rng):
        x = rng.uniform(0, 1, (2, 4, 4, 3))
        assert loss_render_mse(x, x.copy()).value == 0.0

    def test_constant_offset_one(self):
        pred = np.zeros((1, 3, 3, 3))
        ref = np.ones((1, 3, 3, 3))
        assert loss_render_mse(pred, ref).value == pytest.approx(1.0)

    def test_mean_over_views(self):
        # per-view MSEs 0.2 and 0.4 via constant offsets
        ref = np.zeros((2, 4, 4, 3))
        pred = np.stack([np.full((4, 4, 3), np.sqrt(0.2)),
                         np.full((4, 4, 3), np.sqrt(0.4))])
        assert loss_render_mse(pred, ref).value == pytest.approx(0.3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            loss_render_mse(np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 3, 3)))

    def test_gradient(self, rng):
        pred = rng.uniform(0, 1, (2, 3, 3, 3))
        ref = rng.uniform(0, 1, (2, 3, 3, 3))
        term = loss_render_mse(pred, ref)
        fd_check(lambda: loss_render_mse(pred, ref).value, pred, term.grad, rng=rng)


class TestDepthL1:
    def test_identical_zero(self, rng):
        d = rng.uniform(1, 5, (2, 4, 4))
        v = np.ones((2, 4, 4), dtype=bool)
        assert loss_depth_l1(d, d.copy(), v).value == 0.0

    def test_constant_offset(self, rng):
        ref = rng.uniform(1, 5, (1, 4, 4))
        v = np.ones((1, 4, 4), dtype=bool)
        assert loss_depth_l1(ref + 2.0, ref, v).value == pytest.approx(2.0)

    def test_half_pixels_off_by_one(self):
        ref = np.ones((1, 2, 4))
        pred = ref.copy()
        pred[0, 0] += 1.0  # half the pixels
        v = np.ones((1, 2, 4), dtype=bool)
        assert loss_depth_l1(pred, ref, v).value == pytest.approx(0.5)

    def test_no_valid_pixels_flagged(self):
        term = loss_depth_l1(np.ones((1, 2, 2)), np.ones((1, 2, 2)),
                             np.zeros((1, 2, 2), dtype=bool))
        assert term.value == 0.0
        assert term.flags

    def test_gradient(self, rng):
        pred = rng.uniform(1, 5, (2, 3, 3))
        ref = rng.uniform(1, 5, (2, 3, 3))
        v = rng.uniform(0, 1, (2, 3, 3)) > 0.3
        term = loss_depth_l1(pred, ref, v)
        fd_check(lambda: loss_depth_l1(pred, ref, v).value, pred, term.grad, rng=rng)


class TestSilog:
    def test_identical_zero(self, rng):
        d = rng.uniform(1, 5, (1, 4, 4))
        v = np.ones((1, 4, 4), dtype=bool)
        assert loss_depth_silog(d, d.copy(), v).value == pytest.approx(0.0, abs=1e-14)

    @pytest.mark.parametrize("k", [0.1, 1.0, 3.0, 10.0])
    def test_scale_invariance(self, k, rng):
        ref = rng.uniform(0.5, 10, (2, 6, 6))
        v = np.ones((2, 6, 6), dtype=bool)
        assert abs(loss_depth_silog(k * ref, ref, v).value) < 1e-10

    def test_two_pixel_value(self):
        # deltas {0, ln 2} -> variance (ln 2)^2 / 4
        ref = np.array([[[1.0, 1.0]]])
        pred = np.array([[[1.0, 2.0]]])
        v = np.ones((1, 1, 2), dtype=bool)
        expected = (np.log(2) ** 2) / 4
        assert loss_depth_silog(pred, ref, v).value == pytest.approx(expected)

    def test_no_valid_pixels_flagged(self):
        term = loss_depth_silog(np.ones((1, 2, 2)), np.ones((1, 2, 2)),
                                np.zeros((1, 2, 2), dtype=bool))
        assert term.value == 0.0 and term.flags

    def test_gradient(self, rng):
        pred = rng.uniform(0.5, 5, (2, 3, 3))
        ref = rng.uniform(0.5, 5, (2, 3, 3))
        v = np.ones((2, 3, 3), dtype=bool)
        term = loss_depth_silog(pred, ref, v)
        fd_check(lambda: loss_depth_silog(pred, ref, v).value, pred, term.grad,
                 rng=rng)


class TestFeatureCosine:
    def test_identical_zero(self, rng):
        f = rng.normal(0, 1, (2, 3, 3, 8))
        assert loss_feature_cosine(f, f.copy()).value == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_is_one(self):
        pred = np.zeros((1, 2, 2, 2))
        teach = np.zeros((1, 2, 2, 2))
        pred[..., 0] = 1.0
        teach[..., 1] = 1.0
        assert loss_feature_cosine(pred, teach).value == pytest.approx(1.0)

    def test_opposite_is_two(self, rng):
        f = rng.normal(0, 1, (1, 3, 3, 4))
        assert loss_feature_cosine(-f, f).value == pytest.approx(2.0)

    def test_positive_scale_invariance(self, rng):
        pred = rng.normal(0, 1, (1, 4, 4, 6))
        teach = rng.normal(0, 1, (1, 4, 4, 6))
        base = loss_feature_cosine(pred, teach).value
        scales = rng.uniform(0.1, 10, (1, 4, 4, 1))
        assert abs(loss_feature_cosine(pred * scales, teach).value - base) < 1e-10
        assert abs(loss_feature_cosine(pred, teach * scales).value - base) < 1e-10

    def test_zero_norm_pixels_flagged_as_cos_zero(self):
        pred = np.ones((1, 1, 2, 3))
        teach = np.ones((1, 1, 2, 3))
        teach[0, 0, 1] = 0.0
        term = loss_feature_cosine(pred, teach)
        assert term.value == pytest.approx(0.5)  # one perfect, one zero-norm
        assert term.flags
        assert not term.grad[0, 0, 1].any()

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            loss_feature_cosine(np.ones((1, 2, 2, 3)), np.ones((1, 2, 2, 4)))

    def test_gradient(self, rng):
        pred = rng.normal(0, 1, (1, 3, 3, 4))
        teach = rng.normal(0, 1, (1, 3, 3, 4))
        term = loss_feature_cosine(pred, teach)
        fd_check(lambda: loss_feature_cosine(pred, teach).value, pred, term.grad,
                 rng=rng)


class TestTotals:
    def test_reference_weights(self):
        assert loss_total(1.0, 1.0, 1.0, 1.0, LossConfig()) == pytest.approx(2.1)
        assert loss_bev(1.0, 1.0, 1.0, LossConfig()) == pytest.approx(3.1)

    def test_zeros(self):
        assert loss_total(0, 0, 0, 0, LossConfig()) == 0.0

    def test_zero_weights_leave_render_only(self):
        cfg = LossConfig(weight_depth_l1=0, weight_depth_silog=0, weight_feature=0)
        assert loss_total(0.7, 9.0, 9.0, 9.0, cfg) == pytest.approx(0.7)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(weight_feature=-0.1)

    def test_non_finite_parts_rejected(self):
        with pytest.raises(ValueError):
            loss_total(np.nan, 0, 0, 0, LossConfig())


class TestFocal:
    def test_saturated_positive_vanishes(self):
        logits = np.full((2, 2, 1), 40.0)
        targets = np.ones((2, 2, 1))
        assert loss_focal(logits, targets).value == pytest.approx(0.0, abs=1e-12)

    def test_reduces_to_cross_entropy(self):
        logits = np.zeros((1, 1, 1))
        targets = np.ones((1, 1, 1))
        term = loss_focal(logits, targets, gamma=0.0, alpha=None)
        assert term.value == pytest.approx(np.log(2))

    def test_reference_value(self):
        logits = np.zeros((1, 1, 1))
        targets = np.ones((1, 1, 1))
        term = loss_focal(logits, targets, gamma=2.0, alpha=0.25)
        assert term.value == pytest.approx(0.25 * 0.25 * np.log(2))

    def test_monotone_decrease_toward_fixed_point(self):
        targets = np.ones((1, 1, 1))
        values = [loss_focal(np.full((1, 1, 1), float(x)), targets).value
                  for x in range(-3, 30, 3)]
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_non_finite_logits_rejected(self):
        with pytest.raises(ValueError):
            loss_focal(np.full((1, 1, 1), np.inf), np.ones((1, 1, 1)))

    @pytest.mark.parametrize("gamma,alpha", [(2.0, 0.25), (0.0, None), (1.0, 0.5)])
    def test_gradient(self, gamma, alpha, rng):
        logits = rng.normal(0, 2, (4, 4, 3))
        targets = (rng.uniform(0, 1, (4, 4, 3)) > 0.7).astype(float)
        term = loss_focal(logits, targets, gamma=gamma, alpha=alpha)
        fd_check(lambda: loss_focal(logits, targets, gamma=gamma, alpha=alpha).value,
                 logits, term.grad, rng=rng)


class TestCenterAndOffset:
    def test_perfect_zero(self, rng):
        c = rng.uniform(0, 1, (4, 4))
        assert loss_center_l2(c, c.copy()).value == 0.0
        off = rng.normal(0, 2, (4, 4, 2))
        mask = np.ones((4, 4), dtype=bool)
        assert loss_offset_l1(off, off.copy(), mask).value == 0.0

    def test_center_offset_by_tenth(self, rng):
        t = rng.uniform(0, 1, (5, 5))
        assert loss_center_l2(t + 0.1, t).value == pytest.approx(0.01)

    def test_offset_masked_mean(self):
        pred = np.zeros((2, 2, 2))
        target = np.ones((2, 2, 2))
        mask = np.zeros((2, 2), dtype=bool)
        mask[0, 0] = True
        assert loss_offset_l1(pred, target, mask).value == pytest.approx(1.0)

    def test_empty_mask_flagged(self):
        term = loss_offset_l1(np.ones((2, 2, 2)), np.zeros((2, 2, 2)),
                              np.zeros((2, 2), dtype=bool))
        assert term.value == 0.0 and term.flags

    def test_gradients(self, rng):
        pred = rng.uniform(0, 1, (3, 3))
        target = rng.uniform(0, 1, (3, 3))
        term = loss_center_l2(pred, target)
        fd_check(lambda: loss_center_l2(pred, target).value, pred, term.grad, rng=rng)
        off = rng.normal(0, 1, (3, 3, 2))
        off_t = rng.normal(0, 1, (3, 3, 2))
        mask = rng.uniform(0, 1, (3, 3)) > 0.4
        term = loss_offset_l1(off, off_t, mask)
        fd_check(lambda: loss_offset_l1(off, off_t, mask).value, off, term.grad,
                 rng=rng)


class TestNormalizedDepth:
    def test_masks_low_alpha(self):
        out = RenderOutput.zeros(2, 2, 1)
        out.alpha[:] = [[0.9, 0.2], [0.6, 0.51]]
        out.depth[:] = [[1.8, 5.0], [3.0, 2.55]]
        nd = NormalizedDepth.from_render(out)
        np.testing.assert_array_equal(nd.valid, [[True, False], [True, True]])
        assert nd.value[0, 0] == pytest.approx(2.0)
        assert nd.value[0, 1] == 0.0

    def test_backprop_chain(self, rng):
        out = RenderOutput.zeros(3, 3, 1)
        out.alpha[:] = rng.uniform(0.55, 1.0, (3, 3))
        out.depth[:] = rng.uniform(1, 5, (3, 3))
        nd = NormalizedDepth.from_render(out)
        g = rng.normal(0, 1, (3, 3))
        d_depth, d_alpha = nd.backprop(g)
        eps = 1e-7
        i, j = 1, 2
        for arr, grad in ((out.depth, d_depth), (out.alpha, d_alpha)):
            orig = arr[i, j]
            arr[i, j] = orig + eps
            hi = float((NormalizedDepth.from_render(out).value * g).sum())
            arr[i, j] = orig - eps
            lo = float((NormalizedDepth.from_render(out).value * g).sum())
            arr[i, j] = orig
            assert (hi - lo) / (2 * eps) == pytest.approx(grad[i, j], rel=1e-5)


def test_all_losses_nonnegative(rng):
    pred = rng.uniform(0.1, 1, (1, 4, 4, 3))
    ref = rng.uniform(0.1, 1, (1, 4, 4, 3))
    v = np.ones((1, 4, 4), dtype=bool)
    assert loss_render_mse(pred, ref).value >= 0
    assert loss_depth_l1(pred[..., 0], ref[..., 0], v).value >= 0
    assert loss_depth_silog(pred[..., 0], ref[..., 0], v).value >= 0
    assert loss_feature_cosine(pred, ref).value >= 0
    logits = rng.normal(0, 1, (4, 4, 2))
    targets = (rng.uniform(0, 1, (4, 4, 2)) > 0.5).astype(float)
    assert loss_focal(logits, targets).value >= 0

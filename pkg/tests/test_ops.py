"""Tensor-kernel tests: every forward against an independent oracle, every
backward against central finite differences."""

import numpy as np
import pytest

from helpers import (
    batchnorm_two_pass,
    conv2d_loops,
    fd_gradient,
    grad_rel_error,
    maxpool2d_windows,
    random_projection_loss,
    xcorr_windows,
)
from siamfc import ops
from siamfc.ops import ConvSpec, ScoreMap, ShapeError


def rng_for(seed):
    return np.random.default_rng(seed)


def randn(rng, *shape, scale=1.0):
    return (rng.normal(size=shape) * scale).astype(np.float32)


class TestConv2d:
    def test_paper_conv1_shape(self):
        # 3x127x127 through 11x11 stride 2, 96 out-channels -> 96x59x59
        spec = ConvSpec(11, 11, 2, 1, 96)
        x = randn(rng_for(0), 1, 3, 127, 127)
        w = randn(rng_for(1), 96, 3, 11, 11, scale=0.05)
        out = ops.conv2d(x, w, np.zeros(96, np.float32), spec)
        assert out.shape == (1, 96, 59, 59)

    def test_identity_1x1_kernel(self):
        spec = ConvSpec(1, 1, 1, 1, 4)
        x = randn(rng_for(2), 2, 4, 6, 6)
        w = np.eye(4, dtype=np.float32).reshape(4, 4, 1, 1)
        out = ops.conv2d(x, w, np.zeros(4, np.float32), spec)
        assert np.array_equal(out, x)

    def test_matches_loop_oracle(self):
        rng = rng_for(3)
        x = randn(rng, 2, 5, 8, 8)
        w = randn(rng, 6, 5, 3, 3, scale=0.3)
        b = randn(rng, 6, scale=0.3)
        spec = ConvSpec(3, 3, 1, 1, 6)
        got = ops.conv2d(x, w, b, spec)
        want = conv2d_loops(x, w, b, stride=1, groups=1)
        assert np.abs(got - want).max() <= 1e-5

    @pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2), (2, 2)])
    def test_strides_and_groups_vs_oracle(self, stride, groups):
        rng = rng_for(10 + stride * 10 + groups)
        x = randn(rng, 2, 4, 9, 7)
        w = randn(rng, 6, 4 // groups, 3, 3, scale=0.3)
        b = randn(rng, 6, scale=0.1)
        spec = ConvSpec(3, 3, stride, groups, 6)
        got = ops.conv2d(x, w, b, spec)
        want = conv2d_loops(x, w, b, stride=stride, groups=groups)
        assert np.abs(got - want).max() <= 1e-5

    def test_direct_path_matches_im2col_path(self):
        rng = rng_for(4)
        x = randn(rng, 2, 4, 10, 8)
        w = randn(rng, 8, 2, 3, 3, scale=0.3)
        b = randn(rng, 8, scale=0.2)
        spec = ConvSpec(3, 3, 2, 2, 8)
        fast = ops.conv2d(x, w, b, spec, method="im2col")
        direct = ops.conv2d(x, w, b, spec, method="direct")
        assert np.abs(fast - direct).max() <= 1e-6

    def test_group_isolation(self):
        # group g of the output reads only group g of the input
        rng = rng_for(5)
        x = randn(rng, 1, 4, 6, 6)
        w = randn(rng, 4, 2, 3, 3)
        b = np.zeros(4, np.float32)
        spec = ConvSpec(3, 3, 1, 2, 4)
        base = ops.conv2d(x, w, b, spec)
        x2 = x.copy()
        x2[:, 2:] += 1.0  # perturb only group 1's input channels
        out2 = ops.conv2d(x2, w, b, spec)
        assert np.array_equal(base[:, :2], out2[:, :2])
        assert not np.array_equal(base[:, 2:], out2[:, 2:])

    def test_kernel_larger_than_input_raises(self):
        spec = ConvSpec(5, 5, 1, 1, 2)
        x = randn(rng_for(6), 1, 3, 4, 4)
        w = randn(rng_for(7), 2, 3, 5, 5)
        with pytest.raises(ShapeError, match="smaller than kernel"):
            ops.conv2d(x, w, np.zeros(2, np.float32), spec)

    def test_channel_mismatch_names_dimension(self):
        spec = ConvSpec(3, 3, 1, 1, 2)
        x = randn(rng_for(8), 1, 5, 8, 8)
        w = randn(rng_for(9), 2, 3, 3, 3)
        with pytest.raises(ShapeError, match="channels"):
            ops.conv2d(x, w, np.zeros(2, np.float32), spec)

    def test_translation_commutation_single_layer(self):
        # stride-k conv commutes with input translation by k*tau on the
        # valid interior
        rng = rng_for(11)
        k = 2
        big = randn(rng, 1, 3, 20, 20)
        w = randn(rng, 4, 3, 3, 3, scale=0.3)
        b = randn(rng, 4, scale=0.1)
        spec = ConvSpec(3, 3, k, 1, 4)
        for tau in (1, 2, 3):
            a = ops.conv2d(big[:, :, : 20 - k * tau, : 20 - k * tau], w, b, spec)
            shifted = ops.conv2d(big[:, :, k * tau :, k * tau :], w, b, spec)
            overlap = a.shape[2] - tau
            assert np.abs(a[:, :, tau:, tau:] - shifted[:, :, :overlap, :overlap]).max() <= 1e-5


class TestMaxPool:
    def test_paper_pool1_shape(self):
        x = randn(rng_for(20), 1, 96, 59, 59)
        assert ops.maxpool2d(x, 3, 2).shape == (1, 96, 29, 29)

    def test_constant_input(self):
        x = np.full((1, 2, 6, 6), 3.25, np.float32)
        out = ops.maxpool2d(x, 3, 2)
        assert np.all(out == 3.25)

    def test_matches_window_enumeration(self):
        x = randn(rng_for(21), 1, 1, 4, 4)
        got = ops.maxpool2d(x, 2, 2)
        want = maxpool2d_windows(x, 2, 2)
        assert np.array_equal(got.astype(np.float64), want)

    def test_window_larger_than_input_raises(self):
        with pytest.raises(ShapeError, match="larger than input"):
            ops.maxpool2d(randn(rng_for(22), 1, 1, 2, 2), 3, 1)


class TestRelu:
    def test_basic_values(self):
        x = np.array([-1.0, 0.0, 2.0], np.float32).reshape(1, 1, 1, 3)
        assert np.array_equal(ops.relu(x).ravel(), [0.0, 0.0, 2.0])

    def test_all_negative_is_zero(self):
        x = -np.abs(randn(rng_for(23), 1, 2, 3, 3)) - 0.1
        assert np.all(ops.relu(x) == 0.0)

    def test_idempotent(self):
        x = randn(rng_for(24), 2, 3, 5, 5)
        once = ops.relu(x)
        assert np.array_equal(ops.relu(once), once)


class TestBatchNorm:
    def test_train_normalizes_per_channel(self):
        rng = rng_for(30)
        c = 4
        x = randn(rng, 3, c, 6, 6, scale=2.0) + 1.5
        gamma = np.ones(c, np.float32)
        beta = np.zeros(c, np.float32)
        out = ops.batchnorm(x, gamma, beta, np.zeros(c, np.float32),
                            np.ones(c, np.float32), "train")
        for ci in range(c):
            vals = out[:, ci]
            assert abs(vals.mean()) <= 1e-5
            assert abs(vals.var() - 1.0) <= 1e-3

    def test_infer_identity_with_unit_stats(self):
        c = 3
        x = randn(rng_for(31), 2, c, 4, 4)
        out = ops.batchnorm(
            x, np.ones(c, np.float32), np.zeros(c, np.float32),
            np.zeros(c, np.float32), np.ones(c, np.float32), "infer",
        )
        # identity up to the 1e-5 variance epsilon
        assert np.allclose(out, x, atol=2e-5, rtol=1e-5)

    def test_matches_two_pass_oracle(self):
        rng = rng_for(32)
        c = 5
        x = randn(rng, 2, c, 5, 5, scale=1.5)
        gamma = randn(rng, c, scale=0.5) + 1.0
        beta = randn(rng, c, scale=0.5)
        out = ops.batchnorm(x, gamma, beta, np.zeros(c, np.float32),
                            np.ones(c, np.float32), "train")
        want = batchnorm_two_pass(x, gamma, beta)
        assert np.abs(out - want).max() <= 1e-5

    def test_running_stats_ema(self):
        rng = rng_for(33)
        c = 2
        x = randn(rng, 4, c, 3, 3, scale=2.0) + 3.0
        rm = np.zeros(c, np.float32)
        rv = np.ones(c, np.float32)
        ops.batchnorm(x, np.ones(c, np.float32), np.zeros(c, np.float32), rm, rv, "train")
        m = 4 * 3 * 3
        want_m = 0.1 * x.mean(axis=(0, 2, 3))
        want_v = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
        assert np.allclose(rm, want_m, atol=1e-5)
        assert np.allclose(rv, want_v, atol=1e-4)

    def test_infer_never_mutates_stats(self):
        c = 2
        rm = np.full(c, 0.5, np.float32)
        rv = np.full(c, 2.0, np.float32)
        ops.batchnorm(randn(rng_for(34), 2, c, 3, 3), np.ones(c, np.float32),
                      np.zeros(c, np.float32), rm, rv, "infer")
        assert np.all(rm == 0.5) and np.all(rv == 2.0)

    def test_zero_variance_is_finite(self):
        c = 2
        x = np.ones((2, c, 3, 3), np.float32)
        out = ops.batchnorm(x, np.ones(c, np.float32), np.zeros(c, np.float32),
                            np.zeros(c, np.float32), np.ones(c, np.float32), "train")
        assert np.all(np.isfinite(out))

    def test_train_needs_two_samples(self):
        c = 2
        with pytest.raises(ShapeError, match=">= 2"):
            ops.batchnorm(np.ones((1, c, 1, 1), np.float32), np.ones(c, np.float32),
                          np.zeros(c, np.float32), np.zeros(c, np.float32),
                          np.ones(c, np.float32), "train")


class TestXcorr:
    def test_paper_shapes(self):
        z = randn(rng_for(40), 1, 256, 6, 6, scale=0.1)
        x = randn(rng_for(41), 1, 256, 22, 22, scale=0.1)
        assert ops.xcorr(z, x).shape == (1, 1, 17, 17)

    def test_zero_exemplar_zero_map(self):
        z = np.zeros((1, 4, 3, 3), np.float32)
        x = randn(rng_for(42), 1, 4, 9, 9)
        assert np.all(ops.xcorr(z, x) == 0.0)

    def test_matches_sliding_window_oracle(self):
        rng = rng_for(43)
        z = randn(rng, 2, 6, 4, 3, scale=0.4)
        x = randn(rng, 2, 6, 9, 8, scale=0.4)
        got = ops.xcorr(z, x)
        want = xcorr_windows(z, x)
        assert np.abs(got - want).max() <= 1e-4

    def test_broadcast_exemplar_matches_repeat(self):
        rng = rng_for(44)
        z = randn(rng, 1, 3, 2, 2)
        x = randn(rng, 4, 3, 6, 6)
        got = ops.xcorr(z, x)
        want = ops.xcorr(np.repeat(z, 4, axis=0), x)
        assert np.array_equal(got, want)

    def test_equal_size_symmetry(self):
        # equal spatial sizes -> 1x1 scalar map, symmetric in its arguments
        rng = rng_for(45)
        a = randn(rng, 1, 5, 4, 4)
        b = randn(rng, 1, 5, 4, 4)
        ab = ops.xcorr(a, b)
        ba = ops.xcorr(b, a)
        assert ab.shape == (1, 1, 1, 1)
        assert np.array_equal(ab, ba)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError, match="channel mismatch"):
            ops.xcorr(randn(rng_for(46), 1, 3, 2, 2), randn(rng_for(47), 1, 4, 5, 5))

    def test_exemplar_larger_raises(self):
        with pytest.raises(ShapeError, match="larger than search"):
            ops.xcorr(randn(rng_for(48), 1, 3, 6, 6), randn(rng_for(49), 1, 3, 5, 5))


class TestBicubicUpsample:
    def test_17_to_272(self):
        m = ScoreMap(randn(rng_for(50), 17, 17).reshape(17, 17), 8.0, 8.0)
        up = ops.bicubic_upsample(m, 272, 272)
        assert up.values.shape == (272, 272)
        assert up.stride_y == pytest.approx(0.5)
        assert up.stride_x == pytest.approx(0.5)

    def test_constant_preserved(self):
        m = ScoreMap(np.full((9, 9), 2.5, np.float32), 8.0, 8.0)
        up = ops.bicubic_upsample(m, 100, 100)
        assert np.abs(up.values - 2.5).max() <= 1e-5

    def test_peak_stays_local(self):
        # argmax of the upsampled map lands within one input cell of the
        # input argmax for single-peak maps
        rng = rng_for(51)
        for trial in range(10):
            vals = rng.uniform(0, 0.2, size=(11, 11)).astype(np.float32)
            pi, pj = rng.integers(2, 9, size=2)
            vals[pi, pj] = 1.0
            up = ops.bicubic_upsample(ScoreMap(vals, 8.0, 8.0), 176, 176)
            ui, uj = np.unravel_index(np.argmax(up.values), up.values.shape)
            factor = 176 / 11
            src_i = (ui + 0.5) / factor - 0.5
            src_j = (uj + 0.5) / factor - 0.5
            assert abs(src_i - pi) <= 1.0 and abs(src_j - pj) <= 1.0

    def test_downscale_rejected(self):
        m = ScoreMap(np.zeros((9, 9), np.float32), 8.0, 8.0)
        with pytest.raises(ShapeError, match="downscale"):
            ops.bicubic_upsample(m, 5, 9)


class TestCosineWindow:
    def test_degenerate_1x1(self):
        assert ops.cosine_window(1, 1) == pytest.approx(1.0)

    def test_flip_symmetry(self):
        win = ops.cosine_window(9, 13)
        assert np.allclose(win, win[::-1, :])
        assert np.allclose(win, win[:, ::-1])

    def test_5x5_center_closed_form(self):
        win = ops.cosine_window(5, 5)
        hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(5) / 4)
        unnormalized = np.outer(hann, hann)
        assert unnormalized[2, 2] == pytest.approx(hann[2] * hann[2])
        assert win[2, 2] == pytest.approx(unnormalized[2, 2] / unnormalized.sum())

    def test_sum_one_and_bounds(self):
        win = ops.cosine_window(17, 17)
        assert win.sum() == pytest.approx(1.0)
        assert win.min() >= 0.0 and win.max() <= 1.0
        assert win.max() == win[8, 8]


class TestBackward:
    def test_relu_gates_gradient(self):
        x = np.array([-2.0, 3.0], np.float32).reshape(1, 1, 1, 2)
        g = np.ones_like(x)
        gx = ops.relu_backward(x, g)
        assert np.array_equal(gx.ravel(), [0.0, 1.0])

    def test_conv2d_grads_vs_fd(self):
        rng = rng_for(60)
        for trial in range(5):
            x = randn(rng, 1, 2, 6, 5, scale=0.8)
            w = randn(rng, 4, 1, 3, 3, scale=0.5)
            b = randn(rng, 4, scale=0.2)
            spec = ConvSpec(3, 3, 1 + trial % 2, 2, 4)
            loss, upstream = random_projection_loss((1, 4, *spec.out_size(6, 5)), rng)
            gx, gw, gb = ops.conv2d_backward(x, w, spec, upstream)
            assert grad_rel_error(
                gx, fd_gradient(lambda t: loss(ops.conv2d(t, w, b, spec)), x)) <= 1e-2
            assert grad_rel_error(
                gw, fd_gradient(lambda t: loss(ops.conv2d(x, t, b, spec)), w)) <= 1e-2
            assert grad_rel_error(
                gb, fd_gradient(lambda t: loss(ops.conv2d(x, w, t, spec)), b)) <= 1e-2

    def test_maxpool_grads_vs_fd(self):
        rng = rng_for(61)
        # well-separated values so FD does not straddle a tie
        x = (np.arange(36, dtype=np.float32).reshape(1, 1, 6, 6) * 0.37 + 0.1
             + randn(rng, 1, 1, 6, 6, scale=0.01))
        loss, upstream = random_projection_loss((1, 1, 3, 3), rng)
        gx = ops.maxpool2d_backward(x, 2, 2, upstream)
        fd = fd_gradient(lambda t: loss(ops.maxpool2d(t, 2, 2)), x)
        assert grad_rel_error(gx, fd) <= 1e-2

    def test_maxpool_tie_routes_to_first(self):
        x = np.zeros((1, 1, 2, 2), np.float32)
        g = np.ones((1, 1, 1, 1), np.float32)
        gx = ops.maxpool2d_backward(x, 2, 1, g)
        assert gx[0, 0, 0, 0] == 1.0
        assert gx.sum() == 1.0

    def test_batchnorm_grads_vs_fd(self):
        rng = rng_for(62)
        c = 3
        x = randn(rng, 2, c, 4, 4, scale=1.2)
        gamma = randn(rng, c, scale=0.3) + 1.0
        beta = randn(rng, c, scale=0.3)
        loss, upstream = random_projection_loss((2, c, 4, 4), rng)
        gx, dgamma, dbeta = ops.batchnorm_backward(x, gamma, upstream)

        def run(xx, gg, bb):
            return ops.batchnorm(xx, gg, bb, np.zeros(c, np.float32),
                                 np.ones(c, np.float32), "train")

        assert grad_rel_error(gx, fd_gradient(lambda t: loss(run(t, gamma, beta)), x)) <= 1e-2
        assert grad_rel_error(
            dgamma, fd_gradient(lambda t: loss(run(x, t, beta)), gamma)) <= 1e-2
        assert grad_rel_error(
            dbeta, fd_gradient(lambda t: loss(run(x, gamma, t)), beta)) <= 1e-2

    def test_xcorr_grads_vs_fd(self):
        rng = rng_for(63)
        z = randn(rng, 2, 3, 2, 2, scale=0.6)
        x = randn(rng, 2, 3, 5, 4, scale=0.6)
        loss, upstream = random_projection_loss((2, 1, 4, 3), rng)
        gz, gx = ops.xcorr_backward(z, x, upstream)
        assert grad_rel_error(gz, fd_gradient(lambda t: loss(ops.xcorr(t, x)), z)) <= 1e-2
        assert grad_rel_error(gx, fd_gradient(lambda t: loss(ops.xcorr(z, t)), x)) <= 1e-2

    def test_xcorr_broadcast_grad_accumulates(self):
        rng = rng_for(64)
        z = randn(rng, 1, 2, 2, 2)
        x = randn(rng, 3, 2, 4, 4)
        loss, upstream = random_projection_loss((3, 1, 3, 3), rng)
        gz, _ = ops.xcorr_backward(z, x, upstream)
        assert gz.shape == z.shape
        assert grad_rel_error(gz, fd_gradient(lambda t: loss(ops.xcorr(t, x)), z)) <= 1e-2

    def test_xcorr_scalar_case_is_product_rule(self):
        z = np.array([[[[2.0]]]], np.float32)
        x = np.array([[[[3.0]]]], np.float32)
        g = np.array([[[[1.0]]]], np.float32)
        gz, gx = ops.xcorr_backward(z, x, g)
        assert gz.ravel()[0] == 3.0
        assert gx.ravel()[0] == 2.0

    def test_conv_backward_can_skip_input_grad(self):
        rng = rng_for(65)
        x = randn(rng, 1, 2, 5, 5)
        w = randn(rng, 3, 2, 3, 3)
        spec = ConvSpec(3, 3, 1, 1, 3)
        upstream = randn(rng, 1, 3, 3, 3)
        gx, gw, gb = ops.conv2d_backward(x, w, spec, upstream, need_input_grad=False)
        assert gx is None
        gx2, gw2, gb2 = ops.conv2d_backward(x, w, spec, upstream)
        assert np.array_equal(gw, gw2) and np.array_equal(gb, gb2)
        assert gx2 is not None

"""Core tensor ops: convolution oracles, adjoint identities, gradient checks."""

import numpy as np
import pytest

from moco4d import autodiff as ad
from moco4d.errors import DimensionError, NumericError, TapeReplayError


def conv3d_naive(x, k, b, stride=1, padding=0):
    """Direct 7-nested-loop correlation, the independent oracle."""
    cin, D, H, W = x.shape
    cout, _, ks, _, _ = k.shape
    xp = np.pad(x, ((0, 0), (padding,) * 2, (padding,) * 2, (padding,) * 2))
    Do = (D + 2 * padding - ks) // stride + 1
    Ho = (H + 2 * padding - ks) // stride + 1
    Wo = (W + 2 * padding - ks) // stride + 1
    y = np.zeros((cout, Do, Ho, Wo), dtype=np.float64)
    for o in range(cout):
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(ks):
                            for j in range(ks):
                                for l in range(ks):
                                    acc += (xp[c, d * stride + i, h * stride + j,
                                               w * stride + l] * k[o, c, i, j, l])
                    y[o, d, h, w] = acc + b[o]
    return y


def box_sum_naive(x, w):
    hw = w // 2
    out = np.zeros_like(x)
    D, H, W = x.shape
    for d in range(D):
        for h in range(H):
            for ww in range(W):
                out[d, h, ww] = x[max(0, d - hw):d + hw + 1,
                                  max(0, h - hw):h + hw + 1,
                                  max(0, ww - hw):ww + hw + 1].sum()
    return out


class TestConv3d:
    def test_zero_input_gives_constant_bias(self):
        rng = np.random.default_rng(0)
        x = np.zeros((2, 4, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = np.array([1.5, -2.0, 0.25])
        y = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b), 1, 1)
        for c in range(3):
            assert np.all(y.data[c] == b[c])

    def test_counting_case(self):
        x = np.ones((1, 3, 3, 3))
        k = np.ones((1, 1, 3, 3, 3))
        b = np.zeros(1)
        y = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b), 1, 0)
        assert y.data.shape == (1, 1, 1, 1)
        assert y.data[0, 0, 0, 0] == 27.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
    def test_matches_naive_loop_oracle(self, stride, padding):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(2, 5, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = rng.normal(size=3)
        got = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b), stride, padding)
        want = conv3d_naive(x, k, b, stride, padding)
        rel = np.abs(got.data - want) / np.maximum(np.abs(want), 1e-300)
        assert rel.max() <= 1e-12

    def test_output_extent_formula(self):
        x = np.zeros((1, 8, 6, 10))
        k = np.zeros((4, 1, 3, 3, 3))
        b = np.zeros(4)
        y = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b), 2, 1)
        assert y.data.shape == (4, 4, 3, 5)

    def test_kernel_extent_one(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 3, 3))
        k = rng.normal(size=(4, 2, 1, 1, 1))
        b = rng.normal(size=4)
        y = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b), 1, 0)
        want = np.tensordot(k[:, :, 0, 0, 0], x, axes=(1, 0)) + b[:, None, None, None]
        np.testing.assert_allclose(y.data, want, rtol=1e-13)

    def test_linearity_with_zero_bias(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 4, 4, 4))
        y = rng.normal(size=(2, 4, 4, 4))
        k = rng.normal(size=(3, 2, 3, 3, 3))
        b = np.zeros(3)
        a, c = 1.7, -0.3
        lhs = ad.conv3d(ad.constant(a * x + c * y), ad.constant(k), ad.constant(b)).data
        rhs = (a * ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(b)).data
               + c * ad.conv3d(ad.constant(y), ad.constant(k), ad.constant(b)).data)
        assert np.abs(lhs - rhs).max() / np.abs(rhs).max() <= 1e-10

    def test_shape_mismatch_raises(self):
        x = np.zeros((2, 4, 4, 4))
        k = np.zeros((3, 5, 3, 3, 3))
        with pytest.raises(DimensionError):
            ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(np.zeros(3)))

    def test_non_finite_raises(self):
        x = np.zeros((1, 3, 3, 3))
        x[0, 1, 1, 1] = np.nan
        k = np.zeros((1, 1, 3, 3, 3))
        with pytest.raises(NumericError):
            ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(np.zeros(1)))


class TestConv3dTranspose:
    def test_zero_input_gives_bias(self):
        k = np.random.default_rng(0).normal(size=(2, 3, 3, 3, 3))
        b = np.array([0.5, -1.0, 2.0])
        y = ad.conv3d_transpose(ad.constant(np.zeros((2, 2, 2, 2))),
                                ad.constant(k), ad.constant(b))
        assert y.data.shape == (3, 4, 4, 4)
        for c in range(3):
            assert np.all(y.data[c] == b[c])

    def test_impulse_response_stamps_kernel(self):
        # single 1 at an interior site: output is the summed kernel stamp
        k = np.random.default_rng(1).normal(size=(1, 1, 3, 3, 3))
        x = np.zeros((1, 4, 4, 4))
        x[0, 2, 2, 2] = 1.0
        y = ad.conv3d_transpose(ad.constant(x), ad.constant(k),
                                ad.constant(np.zeros(1))).data
        # y[t] = sum_{d,i: 2d-1+i=t} x[d] k[i] -> around t = 2*2-1 = 3
        want = np.zeros((1, 8, 8, 8))
        want[0, 3:6, 3:6, 3:6] = k[0, 0]
        np.testing.assert_allclose(y, want, atol=1e-15)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(5)
        k = rng.normal(size=(3, 2, 3, 3, 3))
        x = rng.normal(size=(2, 6, 6, 8))
        y = rng.normal(size=(3, 3, 3, 4))
        zb = np.zeros(3)
        conv_x = ad.conv3d(ad.constant(x), ad.constant(k), ad.constant(zb), 2, 1).data
        convt_y = ad.conv3d_transpose(ad.constant(y), ad.constant(k),
                                      ad.constant(np.zeros(2))).data
        lhs = np.vdot(conv_x, y)
        rhs = np.vdot(x, convt_y)
        assert abs(lhs - rhs) / max(abs(lhs), 1e-300) <= 1e-10

    def test_doubles_extents(self):
        k = np.zeros((2, 4, 3, 3, 3))
        y = ad.conv3d_transpose(ad.constant(np.zeros((2, 3, 5, 4))),
                                ad.constant(k), ad.constant(np.zeros(4)))
        assert y.data.shape == (4, 6, 10, 8)


class TestActivations:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(ad.constant(np.zeros(3))).data[0] == 0.5

    def test_tanh_zero(self):
        assert ad.tanh(ad.constant(np.zeros(3))).data[0] == 0.0

    def test_leaky_relu_definition(self):
        y = ad.leaky_relu(ad.constant(np.array([-1.0, 2.0])), slope=0.2)
        np.testing.assert_allclose(y.data, [-0.2, 2.0])

    def test_ranges(self):
        # scale kept below float64 saturation (tanh rounds to 1.0 near |x|~19)
        x = np.random.default_rng(0).normal(scale=4.0, size=1000)
        s = ad.sigmoid(ad.constant(x)).data
        t = ad.tanh(ad.constant(x)).data
        assert np.all((s > 0) & (s < 1))
        assert np.all((t > -1) & (t < 1))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.param("x", np.random.default_rng(0).normal(size=(4, 5)))
        with ad.Tape() as tape:
            loss = ad.sum_all(x)
        grads = ad.backward(tape, loss)
        np.testing.assert_array_equal(grads["x"], np.ones((4, 5)))

    def test_half_sum_of_squares_gradient_is_x(self):
        data = np.random.default_rng(1).normal(size=(3, 3))
        x = ad.param("x", data.copy())
        with ad.Tape() as tape:
            loss = ad.mul(ad.sum_all(ad.square(x)), 0.5)
        grads = ad.backward(tape, loss)
        np.testing.assert_allclose(grads["x"], data, rtol=1e-15)

    def test_gradient_accumulates_over_reuse(self):
        x = ad.param("x", np.array([2.0]))
        with ad.Tape() as tape:
            loss = ad.sum_all(ad.mul(x, x))  # d/dx x^2 = 2x
        grads = ad.backward(tape, loss)
        np.testing.assert_allclose(grads["x"], [4.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.param("x", np.ones(3))
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(DimensionError):
            ad.backward(tape, y)

    def test_tape_replay_bit_identical(self):
        x = ad.param("x", np.random.default_rng(2).normal(size=(2, 3, 3, 3)))
        k = ad.param("k", np.random.default_rng(3).normal(size=(2, 2, 3, 3, 3)))
        with ad.Tape() as tape:
            y = ad.conv3d(x, k, ad.constant(np.zeros(2)))
            ad.mean_all(ad.sigmoid(y))
        tape.replay()  # must not raise

    def test_tape_replay_detects_mutation(self):
        x = ad.param("x", np.ones((2, 2)))
        with ad.Tape() as tape:
            y = ad.mul(x, 3.0)
            ad.sum_all(y)
        y.data[0, 0] = 99.0
        with pytest.raises(TapeReplayError):
            tape.replay()


class TestGradCheck:
    def test_quadratic_central_difference_is_exact(self):
        params = {"x": ad.param("x", np.random.default_rng(0).normal(size=8))}

        def f(p):
            return ad.sum_all(ad.square(p["x"]))

        err = ad.grad_check(f, params, h=1e-4, samples=8)
        assert err <= 1e-8

    def test_conv3d_layer(self):
        rng = np.random.default_rng(4)
        params = {
            "k": ad.param("k", rng.normal(size=(3, 2, 3, 3, 3))),
            "b": ad.param("b", rng.normal(size=3)),
            "x": ad.param("x", rng.normal(size=(2, 5, 5, 5))),
        }

        def f(p):
            y = ad.conv3d(p["x"], p["k"], p["b"], 1, 1)
            return ad.mean_all(ad.mul(ad.tanh(y), y))

        err = ad.grad_check(f, params, h=1e-4, samples=120, rng=rng)
        assert err <= 1e-4

    def test_conv3d_transpose_layer(self):
        rng = np.random.default_rng(6)
        params = {
            "k": ad.param("k", rng.normal(size=(2, 3, 3, 3, 3))),
            "b": ad.param("b", rng.normal(size=3)),
            "x": ad.param("x", rng.normal(size=(2, 2, 2, 2))),
        }

        def f(p):
            y = ad.conv3d_transpose(p["x"], p["k"], p["b"])
            return ad.mean_all(ad.square(ad.sigmoid(y)))

        err = ad.grad_check(f, params, h=1e-4, samples=120, rng=rng)
        assert err <= 1e-4

    def test_rejects_nonpositive_h(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda p: ad.sum_all(p["x"]), {"x": ad.param("x", np.ones(2))}, h=0.0)


class TestBoxSum:
    def test_matches_naive(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(6, 5, 7))
        got = ad.box_sum(ad.constant(x), 3).data
        want = box_sum_naive(x, 3)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    def test_self_adjoint(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, 5, 5))
        y = rng.normal(size=(5, 5, 5))
        bx = ad.box_sum(ad.constant(x), 3).data
        by = ad.box_sum(ad.constant(y), 3).data
        assert abs(np.vdot(bx, y) - np.vdot(x, by)) <= 1e-10 * abs(np.vdot(bx, y))

    def test_window_larger_than_extent_rejected(self):
        with pytest.raises(DimensionError):
            ad.box_sum(ad.constant(np.zeros((3, 3, 3))), 5)


class TestInterpResize:
    def test_constant_preserved_up_and_down(self):
        x = np.full((2, 4, 4, 4), 3.25)
        up = ad.interp_resize(ad.constant(x), (8, 8, 8)).data
        assert np.all(up == 3.25)
        down = ad.interp_resize(ad.constant(up), (4, 4, 4)).data
        assert np.all(down == 3.25)

    def test_linear_ramp_interior_exact(self):
        n = 8
        ramp = np.arange(n, dtype=np.float64)
        x = np.broadcast_to(ramp[None, :, None, None], (1, n, n, n)).copy()
        up = ad.interp_resize(ad.constant(x), (2 * n, n, n)).data
        # interior output centers map to src coords (i + .5)/2 - .5
        for i in range(1, 2 * n - 1):
            src = (i + 0.5) / 2.0 - 0.5
            np.testing.assert_allclose(up[0, i, 0, 0], src, rtol=0, atol=1e-12)

    def test_adjoint_identity(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 4, 4, 4))
        g = rng.normal(size=(2, 8, 8, 8))
        xt = ad.param("x", x)
        with ad.Tape() as tape:
            y = ad.interp_resize(xt, (8, 8, 8))
            loss = ad.sum_all(ad.mul(y, ad.constant(g)))
        grads = ad.backward(tape, loss)
        lhs = np.vdot(y.data, g)
        rhs = np.vdot(x, grads["x"])
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)


def test_determinism_repeated_runs():
    def run():
        rng = np.random.default_rng(123)
        x = ad.param("x", rng.normal(size=(2, 6, 6, 6)).astype(np.float32))
        k = ad.param("k", rng.normal(size=(3, 2, 3, 3, 3)).astype(np.float32))
        with ad.Tape() as tape:
            y = ad.conv3d(x, k, ad.constant(np.zeros(3, dtype=np.float32)), 2, 1)
            loss = ad.mean_all(ad.square(y))
        g = ad.backward(tape, loss)
        return loss.data.copy(), {n: v.copy() for n, v in g.items()}

    l1, g1 = run()
    l2, g2 = run()
    assert np.array_equal(l1, l2)
    for n in g1:
        assert np.array_equal(g1[n], g2[n])

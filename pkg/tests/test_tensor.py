"""Tensor kernels: forward values against naive oracles, gradients against
central finite differences in float64 mode."""

import numpy as np
import pytest

from l0seq import tensor as tz
from l0seq.errors import NumericError, ShapeError
from l0seq.rng import RngState


@pytest.fixture(autouse=True)
def verify_mode():
    tz.set_mode("verify")
    yield
    tz.set_mode("verify")


def numeric_grad(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    g = np.zeros_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x0.copy()
        xp[i] += h
        xm = x0.copy()
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def check_grad(build, x0: np.ndarray, rtol: float = 1e-5):
    """build(Tensor) -> scalar Tensor; compares autodiff grad to FD."""
    x = tz.Tensor(x0.copy(), requires_grad=True)
    loss = build(x)
    tz.backward(loss)
    got = x.grad

    def f(arr):
        with tz.no_grad():
            return build(tz.Tensor(arr)).item()

    want = numeric_grad(f, x0)
    np.testing.assert_allclose(got, want, rtol=rtol, atol=1e-8)


class TestForward:
    def test_matmul_matches_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        want = np.zeros((4, 3))
        for i in range(4):
            for j in range(3):
                for k in range(5):
                    want[i, j] += a[i, k] * b[k, j]
        got = tz.matmul(tz.Tensor(a), tz.Tensor(b)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_matmul_shape_error_reports_both_shapes(self):
        a = tz.Tensor(np.zeros((2, 3)))
        b = tz.Tensor(np.zeros((4, 5)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            tz.matmul(a, b)

    def test_matmul_rejects_vectors(self):
        with pytest.raises(ShapeError):
            tz.matmul(tz.Tensor(np.zeros(3)), tz.Tensor(np.zeros((3, 2))))

    def test_softmax_reference_row(self):
        got = tz.softmax(tz.Tensor([1.0, 2.0, 3.0]), axis=-1).data
        np.testing.assert_allclose(
            got, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)

    def test_softmax_shift_invariance(self):
        x = np.array([100.0, 101.0, 102.0])
        a = tz.softmax(tz.Tensor(x), axis=-1).data
        b = tz.softmax(tz.Tensor(x - 100.0), axis=-1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_softmax_huge_inputs_stay_finite(self):
        x = np.array([[1e4, -1e4, 0.0]])
        out = tz.softmax(tz.Tensor(x), axis=-1).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_layer_norm_zero_mean_unit_var(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 8)) * 5 + 2
        g = np.ones(8)
        b = np.zeros(8)
        y = tz.layer_norm(tz.Tensor(x), tz.Tensor(g), tz.Tensor(b)).data
        np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)

    def test_clamp_values(self):
        x = tz.Tensor([-2.0, -0.5, 0.5, 2.0])
        np.testing.assert_allclose(
            tz.clamp(x, 0.0, 1.0).data, [0.0, 0.0, 0.5, 1.0])

    def test_sigmoid_extreme_inputs(self):
        out = tz.sigmoid(tz.Tensor([-800.0, 0.0, 800.0])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-12)

    def test_embedding_gathers_rows(self):
        table = tz.Tensor(np.arange(12.0).reshape(4, 3))
        ids = np.array([[3, 0], [1, 1]])
        out = tz.embedding(table, ids).data
        assert out.shape == (2, 2, 3)
        np.testing.assert_allclose(out[0, 0], [9.0, 10.0, 11.0])
        np.testing.assert_allclose(out[1, 0], out[1, 1])

    def test_concat_and_index_select(self):
        a = tz.Tensor(np.ones((2, 3)))
        b = tz.Tensor(np.zeros((1, 3)))
        c = tz.concat([a, b], axis=0)
        assert c.shape == (3, 3)
        sel = tz.index_select(c, [2, 0]).data
        np.testing.assert_allclose(sel[0], 0.0)
        np.testing.assert_allclose(sel[1], 1.0)

    def test_cross_entropy_uniform_logits(self):
        # equal logits: loss is log V regardless of smoothing
        V = 7
        logits = tz.Tensor(np.zeros((3, V)))
        loss = tz.cross_entropy_smoothed(logits, np.array([0, 3, 6]), 0.1)
        np.testing.assert_allclose(loss.data, np.log(V), atol=1e-12)

    def test_cross_entropy_no_smoothing_matches_nll(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(5, 9))
        t = rng.integers(0, 9, size=5)
        loss = tz.cross_entropy_smoothed(tz.Tensor(z), t, 0.0).data
        p = tz.softmax_np(z, axis=-1)
        np.testing.assert_allclose(loss, -np.log(p[np.arange(5), t]), atol=1e-12)

    def test_verify_mode_flags_nonfinite(self):
        with np.errstate(divide="ignore"):
            with pytest.raises(NumericError):
                tz.log(tz.Tensor([0.0]))

    def test_fast_mode_uses_float32(self):
        tz.set_mode("fast")
        assert tz.Tensor([1.0]).data.dtype == np.float32


class TestBackward:
    def test_add_mul_broadcast(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(1, 4))
        check_grad(
            lambda x: tz.sum_(tz.mul(tz.add(x, tz.Tensor(w)), x)),
            rng.normal(size=(3, 4)))

    def test_matmul_grads_both_sides(self):
        rng = np.random.default_rng(4)
        b0 = rng.normal(size=(5, 2))
        check_grad(
            lambda x: tz.sum_(tz.matmul(x, tz.Tensor(b0))),
            rng.normal(size=(3, 5)))
        a0 = rng.normal(size=(3, 5))
        check_grad(
            lambda x: tz.sum_(tz.matmul(tz.Tensor(a0), x)),
            rng.normal(size=(5, 2)))

    def test_batched_matmul_broadcast_grad(self):
        rng = np.random.default_rng(5)
        b0 = rng.normal(size=(4, 2))  # broadcast over the batch axis
        check_grad(
            lambda x: tz.sum_(tz.mul(tz.matmul(x, tz.Tensor(b0)), 0.7)),
            rng.normal(size=(3, 5, 4)))

    def test_softmax_grad(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(3, 6))
        check_grad(
            lambda x: tz.sum_(tz.mul(tz.softmax(x, axis=-1), tz.Tensor(w))),
            rng.normal(size=(3, 6)))

    def test_layer_norm_grad_all_inputs(self):
        rng = np.random.default_rng(7)
        x0 = rng.normal(size=(4, 6))
        g0 = rng.normal(size=6)
        b0 = rng.normal(size=6)
        w = rng.normal(size=(4, 6))

        check_grad(
            lambda x: tz.sum_(tz.mul(
                tz.layer_norm(x, tz.Tensor(g0), tz.Tensor(b0)), tz.Tensor(w))),
            x0)
        # gain and bias paths
        x = tz.Tensor(x0)
        gain = tz.Tensor(g0.copy(), requires_grad=True)
        bias = tz.Tensor(b0.copy(), requires_grad=True)
        loss = tz.sum_(tz.mul(tz.layer_norm(x, gain, bias), tz.Tensor(w)))
        tz.backward(loss)

        def f_gain(arr):
            with tz.no_grad():
                return tz.sum_(tz.mul(
                    tz.layer_norm(tz.Tensor(x0), tz.Tensor(arr), tz.Tensor(b0)),
                    tz.Tensor(w))).item()

        np.testing.assert_allclose(gain.grad, numeric_grad(f_gain, g0),
                                   rtol=1e-5, atol=1e-8)
        np.testing.assert_allclose(bias.grad, w.sum(axis=0), atol=1e-10)

    def test_sigmoid_exp_log_chain(self):
        rng = np.random.default_rng(8)
        check_grad(
            lambda x: tz.sum_(tz.log(tz.add(tz.exp(tz.sigmoid(x)), 1.0))),
            rng.normal(size=(3, 3)))

    def test_clamp_grad_zero_on_flats(self):
        x = tz.Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
        tz.backward(tz.sum_(tz.clamp(x, 0.0, 1.0)))
        np.testing.assert_allclose(x.grad, [0.0, 1.0, 0.0])

    def test_relu_and_minmax_grads(self):
        rng = np.random.default_rng(9)
        # keep FD away from the kinks
        x0 = rng.normal(size=(4, 4))
        x0[np.abs(x0) < 1e-2] = 0.5
        check_grad(lambda x: tz.sum_(tz.relu(x)), x0)
        y = rng.normal(size=(4, 4))
        check_grad(lambda x: tz.sum_(tz.maximum(x, tz.Tensor(y))), x0)
        check_grad(lambda x: tz.sum_(tz.minimum(x, tz.Tensor(y))), x0)

    def test_cross_entropy_grad(self):
        rng = np.random.default_rng(10)
        t = rng.integers(0, 8, size=4)
        check_grad(
            lambda x: tz.sum_(tz.cross_entropy_smoothed(x, t, 0.1)),
            rng.normal(size=(4, 8)))

    def test_embedding_grad_accumulates_repeats(self):
        table = tz.Tensor(np.zeros((5, 2)), requires_grad=True)
        ids = np.array([1, 1, 4])
        tz.backward(tz.sum_(tz.embedding(table, ids)))
        np.testing.assert_allclose(table.grad[1], [2.0, 2.0])
        np.testing.assert_allclose(table.grad[4], [1.0, 1.0])
        np.testing.assert_allclose(table.grad[0], 0.0)

    def test_mean_reduction_grad(self):
        rng = np.random.default_rng(11)
        check_grad(lambda x: tz.mean_(tz.mul(x, x)), rng.normal(size=(6,)))

    def test_reshape_transpose_grads(self):
        rng = np.random.default_rng(12)
        w = rng.normal(size=(2, 3, 4))
        check_grad(
            lambda x: tz.sum_(tz.mul(
                tz.transpose(tz.reshape(x, (3, 4, 2)), (2, 0, 1)), tz.Tensor(w))),
            rng.normal(size=(12, 2)))

    def test_dropout_scales_gradient_by_mask(self):
        x = tz.Tensor(np.ones(1000), requires_grad=True)
        out = tz.dropout(x, 0.25, RngState(77))
        tz.backward(tz.sum_(out))
        kept = x.grad > 0
        # kept entries carry the inverted-dropout scale
        np.testing.assert_allclose(x.grad[kept], 1.0 / 0.75)
        assert 0.6 < kept.mean() < 0.9

    def test_grad_accumulates_over_reuse(self):
        x = tz.Tensor(np.array([2.0]), requires_grad=True)
        loss = tz.sum_(tz.add(tz.mul(x, x), x))  # x^2 + x
        tz.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    def test_backward_rejects_nonscalar(self):
        x = tz.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            tz.backward(tz.add(x, 1.0))

    def test_no_grad_blocks_graph(self):
        x = tz.Tensor(np.ones(3), requires_grad=True)
        with tz.no_grad():
            y = tz.mul(x, 2.0)
        assert not y.requires_grad

    def test_deep_chain_no_recursion_limit(self):
        x = tz.Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = tz.add(y, 0.0)
        tz.backward(tz.sum_(y))
        np.testing.assert_allclose(x.grad, [1.0])

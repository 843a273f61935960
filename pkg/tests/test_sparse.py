"""Compacted memories and count-weighted attention against the
dense-with-zeros oracle."""

import numpy as np
import pytest

from l0seq import sparse, tensor as tz
from l0seq.errors import DegenerateMemoryError, ShapeError
from l0seq.tensor import Tensor


def dense_with_zeros_oracle(q, enc, gates, wk, wv, n_heads):
    """Reference: full-length attention where pruned rows are zero vectors.

    q (H, M, dh); enc (N, d); gates (N,). Bias-free projections, no mask."""
    z = enc * gates[:, None]
    n, d = enc.shape
    dh = d // n_heads
    k = (z @ wk).reshape(n, n_heads, dh).transpose(1, 0, 2)
    v = (z @ wv).reshape(n, n_heads, dh).transpose(1, 0, 2)
    e = np.matmul(q, np.swapaxes(k, -1, -2)) / np.sqrt(dh)
    e -= e.max(axis=-1, keepdims=True)
    w = np.exp(e)
    w /= w.sum(axis=-1, keepdims=True)
    return np.matmul(w, v)


def sparse_side(q, enc, gates, wk, wv, n_heads):
    mem = sparse.compact(enc, gates)
    x_bar = mem.x_bar.data[0]
    s, d = x_bar.shape
    dh = d // n_heads
    k = (x_bar @ wk).reshape(s, n_heads, dh).transpose(1, 0, 2)
    v = (x_bar @ wv).reshape(s, n_heads, dh).transpose(1, 0, 2)
    return sparse.attend_with_counts(q, k, v, mem.counts(), 1.0 / np.sqrt(dh))


class TestCompact:
    def test_hand_trace(self):
        enc = np.arange(20.0).reshape(5, 4)
        gates = np.array([0.0, 1.0, 0.0, 0.5, 0.0])
        mem = sparse.compact(enc, gates)
        np.testing.assert_array_equal(mem.indices[0], [1, 3])
        np.testing.assert_array_equal(mem.counts()[0], [3.0, 1.0, 1.0])
        np.testing.assert_array_equal(mem.x_bar.data[0, 0], 0.0)
        np.testing.assert_allclose(mem.x_bar.data[0, 1], enc[1])
        np.testing.assert_allclose(mem.x_bar.data[0, 2], 0.5 * enc[3])

    def test_nothing_pruned(self):
        enc = np.random.default_rng(0).normal(size=(4, 3))
        mem = sparse.compact(enc, np.ones(4))
        np.testing.assert_array_equal(mem.counts()[0], [0.0, 1, 1, 1, 1])
        np.testing.assert_allclose(mem.x_bar.data[0, 1:], enc)

    def test_all_pruned_raises(self):
        with pytest.raises(DegenerateMemoryError):
            sparse.compact(np.ones((3, 2)), np.zeros(3))

    def test_count_conservation_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = int(rng.integers(1, 30))
            gates = rng.uniform(size=n) * (rng.uniform(size=n) > 0.4)
            if not (gates > 0).any():
                gates[0] = 0.5
            mem = sparse.compact(rng.normal(size=(n, 3)), gates)
            assert mem.counts().sum() == n

    def test_padding_excluded(self):
        enc = np.ones((5, 2))
        gates = np.array([1.0, 0.0, 1.0, 1.0, 1.0])
        real = np.array([True, True, True, False, False])
        mem = sparse.compact(enc, gates, real)
        # N counts real tokens only; padding is neither retained nor counted
        np.testing.assert_array_equal(mem.indices[0], [0, 2])
        assert mem.counts().sum() == 3

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        enc = rng.normal(size=(3, 6, 4))
        gates = (rng.uniform(size=(3, 6)) > 0.5).astype(float)
        gates[:, 0] = 1.0
        real = np.ones((3, 6), dtype=bool)
        real[2, 4:] = False
        gates = gates * real
        gates[2, 0] = 1.0
        mem = sparse.compact_batch(enc, gates, real)
        for b in range(3):
            single = sparse.compact(enc[b], gates[b], real[b])
            s = single.length
            np.testing.assert_allclose(mem.x_bar.data[b, :s], single.x_bar.data[0])
            np.testing.assert_allclose(mem.counts()[b, :s], single.counts()[0])
            assert (mem.counts()[b, s:] == 0).all()

    def test_batch_all_pruned_names_rows(self):
        enc = np.ones((2, 3, 2))
        gates = np.array([[1.0, 0, 0], [0.0, 0, 0]])
        with pytest.raises(DegenerateMemoryError, match=r"\[1\]"):
            sparse.compact_batch(enc, gates, np.ones((2, 3), dtype=bool))


class TestCountSoftmax:
    def test_two_position_hand_trace(self):
        # N=2, d=1, position 0 pruned: dense sees rows [0, g*x]; the dummy
        # slot carries count 1 and logit 0
        x = np.array([[2.0], [3.0]])
        gates = np.array([0.0, 1.0])
        q = np.array([[[0.7]]])  # one head, one query, dh=1
        wk = np.array([[1.0]])
        wv = np.array([[1.0]])
        got = sparse_side(q, x, gates, wk, wv, 1)
        e_kept = 0.7 * 3.0
        w_kept = np.exp(e_kept) / (np.exp(e_kept) + np.exp(0.0))
        np.testing.assert_allclose(got[0, 0, 0], w_kept * 3.0, atol=1e-12)
        want = dense_with_zeros_oracle(q, x, gates, wk, wv, 1)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_no_pruning_is_plain_softmax(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(2, 1, 4, 5))
        counts = np.concatenate([np.zeros((2, 1)), np.ones((2, 4))], axis=1)
        got = sparse.count_softmax_np(scores, counts[:, None, None, :])
        ref = np.exp(scores[..., 1:])
        ref /= ref.sum(axis=-1, keepdims=True)
        np.testing.assert_allclose(got[..., 1:], ref, atol=1e-12)
        assert (got[..., 0] == 0.0).all()

    def test_dead_slots_immune_to_huge_scores(self):
        scores = np.array([[0.0, 1e6, 1.0]])
        counts = np.array([[1.0, 0.0, 1.0]])
        w = sparse.count_softmax_np(scores, counts)
        assert np.isfinite(w).all()
        assert w[0, 1] == 0.0
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-12)

    def test_all_dead_raises(self):
        with pytest.raises(DegenerateMemoryError):
            sparse.count_softmax_np(np.zeros((1, 3)), np.zeros((1, 3)))

    def test_oracle_agreement_random_cases(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(25):
            n = int(rng.integers(2, 33))
            heads = int(rng.choice([1, 2, 4]))
            dh = int(rng.choice([2, 4, 8]))
            d = heads * dh
            m = int(rng.integers(1, 6))
            enc = rng.normal(size=(n, d))
            kind = rng.uniform(size=n)
            gates = np.where(kind < 0.4, 0.0,
                             np.where(kind < 0.7, 1.0, rng.uniform(size=n)))
            if not (gates > 0).any():
                gates[0] = 1.0
            wk = rng.normal(size=(d, d)) / np.sqrt(d)
            wv = rng.normal(size=(d, d)) / np.sqrt(d)
            q = rng.normal(size=(heads, m, dh))
            got = sparse_side(q, enc, gates, wk, wv, heads)
            want = dense_with_zeros_oracle(q, enc, gates, wk, wv, heads)
            worst = max(worst, np.abs(got - want).max())
        assert worst < 1e-10

    def test_autodiff_matches_plain(self):
        rng = np.random.default_rng(5)
        scores = rng.normal(size=(2, 3, 4, 6))
        counts = np.abs(rng.normal(size=(2, 6))) + 0.1
        got = sparse.count_softmax(Tensor(scores), counts).data
        want = sparse.count_softmax_np(scores, counts[:, None, None, :])
        np.testing.assert_allclose(got, want, atol=1e-15)

    def test_autodiff_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(6)
        s0 = rng.normal(size=(1, 2, 3, 5))
        counts = np.array([[2.0, 1.0, 0.0, 1.0, 1.0]])
        wgt = rng.normal(size=s0.shape)

        def f(arr):
            w = sparse.count_softmax_np(arr, counts[:, None, None, :])
            return float((w * wgt).sum())

        s = Tensor(s0.copy(), requires_grad=True)
        loss = tz.sum_(tz.mul(sparse.count_softmax(s, counts), Tensor(wgt)))
        tz.backward(loss)
        h = 1e-6
        fd = np.zeros_like(s0)
        it = np.nditer(s0, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            sp, sm = s0.copy(), s0.copy()
            sp[i] += h
            sm[i] -= h
            fd[i] = (f(sp) - f(sm)) / (2 * h)
        np.testing.assert_allclose(s.grad, fd, rtol=1e-5, atol=1e-9)

    def test_counts_shape_validation(self):
        with pytest.raises(ShapeError):
            sparse.count_softmax(Tensor(np.zeros((2, 1, 1, 4))), np.ones((2, 3)))


class TestBench:
    def test_record_format_fields(self):
        r = sparse.BenchRecord(N=8, N_prime=4, M=2, d=8, heads=2,
                               dense_ns_per_step=200.0, sparse_ns_per_step=100.0)
        assert r.speedup == pytest.approx(2.0)
        line = r.format()
        for key in ("N=8", "N_prime=4", "M=2", "d=8", "heads=2",
                    "dense_ns_per_step=", "sparse_ns_per_step=", "speedup="):
            assert key in line

    def test_bench_runs_and_reports(self):
        r = sparse.bench_cross_attention(64, 0.5, 4, d=32, heads=2,
                                         repetitions=2)
        assert r.N == 64 and r.N_prime == 32
        assert r.dense_ns_per_step > 0 and r.sparse_ns_per_step > 0

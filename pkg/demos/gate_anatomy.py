"""Walk through the stochastic gate machinery with plain arrays.

Shows the three things the library promises about its gates: the sampled
distribution has point masses at exactly 0 and 1 that match closed forms,
the test-time deterministic gate agrees with the sampled mean where it
should, and attention over a compacted memory reproduces dense attention
with zero vectors at the pruned positions.

    python demos/gate_anatomy.py
"""

import math

import numpy as np

import l0seq.hardconcrete as hc
from l0seq.rng import RngState
from l0seq.sparse import attend_with_counts

rng = RngState(7).derive("demo")

print("== point masses of the sampled gate ==")
print(f"{'log_alpha':>10} {'P(g=0) mc':>10} {'closed':>8} "
      f"{'P(g=1) mc':>10} {'closed':>8} {'E[g] mc':>8}")
for la in (-3.0, -1.0, 0.0, 1.0, 3.0):
    g = hc.sample_gate(np.full(200_000, la), rng=rng)
    print(f"{la:>10.1f} {(g == 0).mean():>10.4f} {float(hc.prob_zero(la)):>8.4f} "
          f"{(g == 1).mean():>10.4f} {float(hc.prob_one(la)):>8.4f} "
          f"{g.mean():>8.4f}")

print()
print("== deterministic test-time gate vs sampled mean ==")
print("the clipped-mean estimator is exact at log_alpha = 0 and biased")
print("toward the nearest point mass elsewhere:")
for la in (-2.0, 0.0, 2.0):
    g = hc.sample_gate(np.full(200_000, la), rng=rng)
    print(f"  log_alpha {la:+.0f}: estimator {float(hc.expected_gate(la)):.4f}, "
          f"sampled mean {g.mean():.4f}")

print()
print("== expected open count drives the penalty ==")
la = np.array([-3.0, -0.5, 0.0, 1.5, 4.0])
print(f"  log_alphas {la.tolist()}")
print(f"  sum of open probabilities = {hc.expected_l0(la):.4f}")

print()
print("== compacted attention equals dense-with-zeros ==")
np_rng = np.random.default_rng(0)
n, d, heads, m = 12, 16, 2, 3
dh = d // heads
enc = np_rng.standard_normal((n, d))
gates = np.array([1, 0, 1, 1, 0, 0, 1, 0.6, 0, 1, 0, 0.0])
wk = np_rng.standard_normal((d, d)) / math.sqrt(d)
wv = np_rng.standard_normal((d, d)) / math.sqrt(d)
q = np_rng.standard_normal((heads, m, dh))


def split(x):
    return x.reshape(x.shape[0], heads, dh).transpose(1, 0, 2)


mem = enc * gates[:, None]
k, v = split(mem @ wk), split(mem @ wv)
s = np.matmul(q, np.swapaxes(k, -1, -2)) / math.sqrt(dh)
w = np.exp(s - s.max(axis=-1, keepdims=True))
dense = np.matmul(w / w.sum(axis=-1, keepdims=True), v)

idx = np.flatnonzero(gates > 0)
x_bar = np.concatenate([np.zeros((1, d)), enc[idx] * gates[idx, None]])
counts = np.concatenate(([float(n - idx.size)], np.ones(idx.size)))
ks, vs = split(x_bar @ wk), split(x_bar @ wv)
sparse = attend_with_counts(q, ks, vs, counts[None, :], 1.0 / math.sqrt(dh))

print(f"  {n} positions, {idx.size} retained; memory shrinks "
      f"{n} -> {1 + idx.size} rows")
print(f"  max |dense - compacted| = {np.abs(dense - sparse).max():.3e}")

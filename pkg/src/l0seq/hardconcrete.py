"""Stochastic gates from a stretched, rectified binary-concrete distribution.

A gate g in [0, 1] is produced in three steps from a location parameter
log_alpha and logistic noise:

    s    = sigmoid((log u - log(1 - u) + log_alpha) / beta),  u ~ U(0, 1)
    sbar = s * (1 + 2 * eps) - eps          # stretch onto [-eps, 1 + eps]
    g    = min(1, max(0, sbar))             # rectify back onto [0, 1]

The stretch-and-rectify step gives the distribution point masses at exactly
0 and exactly 1 while staying reparameterizable, so the probability that a
gate is open (g > 0) is differentiable in log_alpha and can be penalized
directly.  Closed forms used throughout:

    P(g = 0) = sigmoid(beta * log(eps / (1 + eps)) - log_alpha)
    P(g = 1) = sigmoid(log_alpha - beta * log((1 + eps) / eps))
    E[g]     = min(1, max(0, sigmoid(log_alpha) * (1 + 2 * eps) - eps))

With the defaults beta = 2/3, eps = 0.1 a gate at log_alpha = 0 is closed
with probability ~0.168 and fully open with the same probability.

Plain-array functions serve analysis and Monte Carlo checks; the ``*_t``
variants build autodiff graphs for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .rng import RngState

__all__ = [
    "HardConcreteParams",
    "draw_noise",
    "sample_gate",
    "sample_gate_t",
    "prob_zero",
    "prob_one",
    "expected_gate",
    "open_probability",
    "open_probability_t",
    "expected_l0",
]


@dataclass(frozen=True)
class HardConcreteParams:
    """Temperature and stretch of the gate distribution.

    beta is the concrete temperature (lower = closer to Bernoulli); eps
    widens the support to [-eps, 1 + eps] before rectification, which is
    what creates the point masses at 0 and 1.  beta must be in (0, 1] for
    the density to stay unimodal-or-flat; eps must be positive.
    """

    beta: float = 2.0 / 3.0
    eps: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be positive, got {self.eps}")

    @property
    def stretch(self) -> float:
        return 1.0 + 2.0 * self.eps

    @property
    def log_ratio(self) -> float:
        """log(eps / (1 + eps)), the constant in both tail probabilities."""
        return math.log(self.eps / (1.0 + self.eps))


DEFAULT_PARAMS = HardConcreteParams()


def _sigmoid(x):
    return tz._sigmoid_np(np.asarray(x, dtype=np.float64))


def draw_noise(rng: RngState, shape) -> np.ndarray:
    """Logistic noise log(u) - log(1 - u) with u strictly inside (0, 1)."""
    u = rng.open_uniform(size=shape)
    return np.log(u) - np.log1p(-u)


def sample_gate(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS,
                rng: RngState | None = None,
                noise: np.ndarray | None = None) -> np.ndarray:
    """Draw gates elementwise for an array of log_alpha values."""
    la = np.asarray(log_alpha, dtype=np.float64)
    if noise is None:
        if rng is None:
            raise ValueError("sample_gate needs an rng or precomputed noise")
        noise = draw_noise(rng, la.shape)
    s = _sigmoid((noise + la) / params.beta)
    sbar = s * params.stretch - params.eps
    return np.clip(sbar, 0.0, 1.0)


def sample_gate_t(log_alpha: tz.Tensor, params: HardConcreteParams = DEFAULT_PARAMS,
                  rng: RngState | None = None,
                  noise: np.ndarray | None = None) -> tz.Tensor:
    """Differentiable gate sample (one-sample reparameterization).

    Pass precomputed ``noise`` to evaluate the same draw under perturbed
    parameters (finite-difference checks, paired comparisons)."""
    if noise is None:
        if rng is None:
            raise ValueError("sample_gate_t needs an rng or precomputed noise")
        noise = draw_noise(rng, log_alpha.shape)
    pre = tz.mul(tz.add(log_alpha, tz.Tensor(noise)), 1.0 / params.beta)
    sbar = tz.add(tz.mul(tz.sigmoid(pre), params.stretch), -params.eps)
    return tz.clamp(sbar, 0.0, 1.0)


def prob_zero(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    """Probability the rectifier lands the gate exactly at 0."""
    la = np.asarray(log_alpha, dtype=np.float64)
    return _sigmoid(params.beta * params.log_ratio - la)


def prob_one(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    """Probability the rectifier lands the gate exactly at 1."""
    la = np.asarray(log_alpha, dtype=np.float64)
    return _sigmoid(la + params.beta * params.log_ratio)


def expected_gate(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    """Deterministic gate value used at evaluation time (noise at its mean)."""
    la = np.asarray(log_alpha, dtype=np.float64)
    return np.clip(_sigmoid(la) * params.stretch - params.eps, 0.0, 1.0)


def open_probability(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> np.ndarray:
    """P(g > 0) = 1 - P(g = 0), the per-gate term of the expected L0 norm."""
    la = np.asarray(log_alpha, dtype=np.float64)
    return _sigmoid(la - params.beta * params.log_ratio)


def open_probability_t(log_alpha: tz.Tensor,
                       params: HardConcreteParams = DEFAULT_PARAMS) -> tz.Tensor:
    """Differentiable P(g > 0); summing it gives the sparsity penalty."""
    return tz.sigmoid(tz.add(log_alpha, -params.beta * params.log_ratio))


def expected_l0(log_alpha, params: HardConcreteParams = DEFAULT_PARAMS) -> float:
    """Expected count of open gates, summed over all positions."""
    return float(open_probability(log_alpha, params).sum())

"""Gate layers over encoder outputs: predicting log alpha, scaling
encodings by sampled or expected gates, and bookkeeping for the sparsity
penalty and reports.

Each gated encoder layer owns a single zero-initialized weight vector w;
a position's gate location is the dot product of its encoding with w, so
every gate starts at log alpha 0 (expected gate one half, closed
probability about 0.168).  Training scales encodings by reparameterized
gate samples and charges the expected-open-count penalty; evaluation
scales by the deterministic expected gate, and positions whose expected
gate is exactly 0 are the ones the compacted decode path prunes.

Padding positions are forced closed everywhere and never count toward
the penalty or the sparsity rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hardconcrete as hc
from . import tensor as tz
from .errors import ConfigError, DataError, ShapeError
from .rng import RngState
from .tensor import Tensor

__all__ = [
    "GateSet",
    "TrainGates",
    "predict_log_alpha",
    "apply_gates_train",
    "apply_gates_eval",
    "sparsity_rate",
    "place_gates",
    "gate_report",
]


@dataclass
class GateSet:
    """Per-position gate record for one batch at one gate layer.

    log_alphas, gates: (B, N); pad_mask: True where the position is
    padding.  Gates at padding are 0 by construction."""

    log_alphas: np.ndarray
    gates: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if not (self.log_alphas.shape == self.gates.shape == self.pad_mask.shape):
            raise ShapeError("gate set field shapes disagree")

    @property
    def real_mask(self) -> np.ndarray:
        return ~self.pad_mask

    @property
    def open_mask(self) -> np.ndarray:
        return (self.gates > 0) & self.real_mask

    def n_real(self) -> int:
        return int(self.real_mask.sum())

    def n_closed(self) -> int:
        return int((~self.open_mask & self.real_mask).sum())


@dataclass
class TrainGates:
    """Training-mode gating output: the scaled encodings, the recorded
    samples, and the per-sentence expected-open-count penalty (a graph
    node so the sparsity pressure reaches w and the encoder)."""

    gated: Tensor
    gate_set: GateSet
    penalty: Tensor  # (B,)


def predict_log_alpha(encodings: Tensor, w: Tensor) -> Tensor:
    """log alpha per position: (B, N, d) x (d,) -> (B, N) dot products."""
    if encodings.ndim != 3 or w.shape != (encodings.shape[-1],):
        raise ShapeError(
            f"encodings {encodings.shape} incompatible with predictor {w.shape}")
    out = tz.matmul(encodings, tz.reshape(w, (w.shape[0], 1)))
    return tz.reshape(out, encodings.shape[:2])


def apply_gates_train(encodings: Tensor, w: Tensor, real_mask: np.ndarray,
                      params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
                      rng: RngState | None = None,
                      noise: np.ndarray | None = None) -> TrainGates:
    """Scale each position by one sampled gate; padding is zeroed.

    Pass ``noise`` (logistic, same shape as the gate grid) to pin the
    sample for gradient checks; otherwise it is drawn from ``rng``."""
    log_alpha = predict_log_alpha(encodings, w)
    if noise is None:
        if rng is None:
            raise ValueError("apply_gates_train needs an rng or frozen noise")
        noise = hc.draw_noise(rng, log_alpha.shape)
    mask = real_mask.astype(encodings.data.dtype)
    gates = tz.mul(hc.sample_gate_t(log_alpha, params, noise=noise), Tensor(mask))
    gated = tz.mul(encodings, tz.reshape(gates, (*gates.shape, 1)))
    open_p = tz.mul(hc.open_probability_t(log_alpha, params), Tensor(mask))
    penalty = tz.sum_(open_p, axis=1)
    gate_set = GateSet(log_alphas=log_alpha.data.copy(),
                       gates=gates.data.copy(), pad_mask=~real_mask)
    return TrainGates(gated=gated, gate_set=gate_set, penalty=penalty)


def apply_gates_eval(encodings: Tensor, w: Tensor, real_mask: np.ndarray,
                     params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
                     ) -> tuple[Tensor, GateSet]:
    """Deterministic gating by the expected gate; open positions are kept
    and simply weighted, closed positions become zero rows."""
    log_alpha = predict_log_alpha(encodings, w)
    gates = hc.expected_gate(log_alpha.data, params) * real_mask
    gated = tz.mul(encodings, Tensor(gates[..., None]))
    gate_set = GateSet(log_alphas=log_alpha.data.copy(), gates=gates,
                       pad_mask=~real_mask)
    return gated, gate_set


def sparsity_rate(gate_sets) -> float:
    """Closed real positions over all real positions, across a corpus."""
    closed = total = 0
    for gs in gate_sets:
        closed += gs.n_closed()
        total += gs.n_real()
    if total == 0:
        raise DataError("sparsity rate undefined: no source positions")
    return closed / total


def place_gates(n_layers: int, placement: str) -> tuple[int, ...]:
    """Resolve a placement name to the 1-based encoder layers to gate.

    "none": no gates; "top": after the final layer (the default
    configuration); "all": between every adjacent pair of layers and after
    the last; a decimal number: that single layer."""
    if placement == "none":
        return ()
    if placement == "top":
        return (max(n_layers, 1),)
    if placement == "all":
        return tuple(range(1, n_layers + 1))
    try:
        layer = int(placement)
    except ValueError:
        raise ConfigError(f"unknown gate placement {placement!r}") from None
    if not 1 <= layer <= n_layers:
        raise ConfigError(f"gate layer {layer} outside 1..{n_layers}")
    return (layer,)


def gate_report(tokens: list[list[str]], gate_sets: list[GateSet]) -> str:
    """Per-token dump: token, log alpha, gate, kept flag; one token per
    line, sentences separated by blank lines."""
    lines = []
    for sent_tokens, gs in zip(tokens, gate_sets):
        open_mask = gs.open_mask
        for j, tok in enumerate(sent_tokens):
            lines.append(f"{tok}\t{gs.log_alphas[0, j]:+.4f}\t"
                         f"{gs.gates[0, j]:.4f}\t{int(open_mask[0, j])}")
        lines.append("")
    return "\n".join(lines)

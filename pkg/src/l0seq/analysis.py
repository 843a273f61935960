"""Attention diagnostics: how much decoder cross-attention mass each
source word collects, and how peaked the encoder's last self-attention
layer is for kept vs dropped positions.

Both metrics run teacher-forced in eval mode (expected gates, no
dropout) so they are deterministic for a given model and corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gates as gt
from . import hardconcrete as hc
from . import tensor as tz
from .data import PAD, Corpus, pad_batch
from .model import DenseMemory, Model
from .sparse import compact_batch
from .tensor import Tensor


def eval_gate_pass(model: Model, src: np.ndarray,
                   hc_params: hc.HardConcreteParams):
    """Encoder pass with eval-mode gates at the configured layers.

    Returns (dense_enc, raw_enc, gate_set, real): the fully gated
    encodings, plus the pre-gate top-layer encodings and the top gate
    set when the top layer is gated (None otherwise; intermediate gates
    scale rows but never prune).
    """
    top = model.config.n_layers
    raw_top = None
    gs_top = None

    def layer_hook(layer, x, rm):
        nonlocal raw_top, gs_top
        if layer not in model.config.gate_layers:
            return x
        w = model.p(f"gates.layer{layer}.w")
        gx, gs = gt.apply_gates_eval(x, w, rm, hc_params)
        if layer == top:
            raw_top, gs_top = x, gs
        return gx

    hook = layer_hook if model.config.gate_layers else None
    dense_enc, real = model.encode(src, layer_hook=hook)
    if gs_top is None:
        return dense_enc, None, None, real
    return dense_enc, raw_top, gs_top, real


@dataclass
class MassReport:
    """Summed cross-attention mass per real source word.

    masses holds one entry per analyzed source word (pruned words get
    0); retained marks which words the gates kept.  Sentences whose
    gates pruned everything are skipped and counted in n_fallback.
    """

    masses: np.ndarray
    retained: np.ndarray
    n_fallback: int = 0

    @property
    def mean_all(self) -> float:
        return float(self.masses.mean())

    @property
    def mean_retained(self) -> float:
        return float(self.masses[self.retained].mean())

    def frac_below(self, threshold: float, retained_only: bool = True) -> float:
        m = self.masses[self.retained] if retained_only else self.masses
        return float((m < threshold).mean())

    def histogram(self, bins=20, retained_only: bool = True):
        m = self.masses[self.retained] if retained_only else self.masses
        return np.histogram(m, bins=bins)


def attention_mass(model: Model, corpus: Corpus, *,
                   hc_params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
                   gated: bool | None = None,
                   batch_sents: int = 64) -> MassReport:
    """Teacher-forced cross-attention mass summed onto source words.

    Per-layer attention maps are averaged over layers and heads first,
    then summed over the real target positions.  Under gating the
    decoder attends to the compacted memory, so pruned words receive
    exactly zero and the dummy slot's mass is discarded.
    """
    if gated is None:
        gated = bool(model.config.gate_layers)
    n_layers = model.config.n_layers
    masses: list[np.ndarray] = []
    retained: list[np.ndarray] = []
    fallback = 0
    with tz.no_grad():
        for lo in range(0, len(corpus), batch_sents):
            batch = pad_batch(corpus, range(lo, min(lo + batch_sents, len(corpus))))
            src = batch.src
            if gated:
                dense_enc, raw_enc, gs, real = eval_gate_pass(
                    model, src, hc_params)
                gvals = None if gs is None else gs.gates
            else:
                dense_enc, real = model.encode(src)
                raw_enc, gvals = None, None

            keep_rows = np.arange(batch.nsentences)
            if gvals is not None:
                alive = ((gvals > 0) & real).any(axis=1)
                fallback += int((~alive).sum())
                keep_rows = np.flatnonzero(alive)
                if keep_rows.size == 0:
                    continue
                mem = compact_batch(Tensor(raw_enc.data[keep_rows]),
                                    gvals[keep_rows], real[keep_rows])
            else:
                mem = DenseMemory(dense_enc, real)

            sink: dict = {}
            tgt_in = batch.tgt_in[keep_rows]
            model.decode_train(tgt_in, mem, sink=sink)
            stack = np.stack([sink[("cross", i)] for i in range(n_layers)])
            # (layers, B, H, M, S) -> (B, M, S)
            avg = stack.mean(axis=(0, 2))
            avg = avg * (tgt_in != PAD)[:, :, None]
            word_mass = avg.sum(axis=1)  # (B, S)

            for r, row in enumerate(keep_rows):
                n = int(real[row].sum())
                if gvals is not None:
                    out = np.zeros(n)
                    # slot 0 is the dummy row; retained slots follow in order
                    out[mem.indices[r]] = word_mass[r, 1: 1 + len(mem.indices[r])]
                    masses.append(out)
                    retained.append(gvals[row, :n] > 0)
                else:
                    masses.append(word_mass[r, :n])
                    retained.append(np.ones(n, dtype=bool))
    return MassReport(masses=np.concatenate(masses),
                      retained=np.concatenate(retained),
                      n_fallback=fallback)


@dataclass
class EntropyReport:
    """Mean self-attention entropy of last-encoder-layer rows, split by
    whether the eval-mode gate keeps (ĝ>0) or prunes (ĝ=0) the row."""

    retained_mean: float
    pruned_mean: float
    n_retained: int
    n_pruned: int


def encoder_entropy(model: Model, corpus: Corpus, *,
                    hc_params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
                    gates_from: Model | None = None,
                    batch_sents: int = 64) -> EntropyReport:
    """Entropy of the last encoder layer's self-attention, head-averaged.

    Rows are classified by the gate values of ``gates_from`` (default:
    the model itself), which lets an ungated baseline be split by a
    gated model's keep/drop decisions for a matched comparison.  A model
    with no final-layer gates classifies every row as retained.
    """
    gate_src = gates_from if gates_from is not None else model
    last = model.config.n_layers - 1
    ret_sum = prn_sum = 0.0
    n_ret = n_prn = 0
    with tz.no_grad():
        for lo in range(0, len(corpus), batch_sents):
            batch = pad_batch(corpus, range(lo, min(lo + batch_sents, len(corpus))))
            sink: dict = {}
            _, real = model.encode(batch.src, sink=sink)
            w = sink[("enc_self", last)].mean(axis=1)  # (B, N, N), head-averaged
            p = np.where(w > 0, w, 1.0)
            h = -(w * np.log(p)).sum(axis=-1)  # (B, N)

            _, _, gs, _ = eval_gate_pass(gate_src, batch.src, hc_params)
            if gs is None:
                keep = real
            else:
                keep = (gs.gates > 0) & real
            drop = real & ~keep
            ret_sum += float(h[keep].sum())
            prn_sum += float(h[drop].sum())
            n_ret += int(keep.sum())
            n_prn += int(drop.sum())
    return EntropyReport(
        retained_mean=ret_sum / n_ret if n_ret else float("nan"),
        pruned_mean=prn_sum / n_prn if n_prn else float("nan"),
        n_retained=n_ret, n_pruned=n_prn)

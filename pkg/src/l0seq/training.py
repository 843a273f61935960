"""Training and finetuning: the joint likelihood-plus-sparsity objective,
schedules, the optimizer, and evaluation over toy corpora.

The loss is the mean per-sentence label-smoothed negative log-likelihood
plus lambda times the mean per-sentence expected open-gate count (a
one-sample reparameterized estimate when gates are enabled).  Lambda can
ramp linearly from 0 so a finetuned model is not shocked by full sparsity
pressure at step one; the learning rate follows the inverse-square-root
schedule with warmup.

Determinism contract: every random draw comes from substreams derived
from the config seed (batch order, gate noise, dropout), the batch
schedule for epoch k is a pure function of (seed, corpus, k), and the
optimizer is plain serialized state, so a resumed run replays the exact
trajectory of an uninterrupted one in 64-bit mode.

Training-mode gating never compacts anything: sampled gates scale the
full-length memory (zeros included) and only decoding does the actual
pruning.  Pattern finetuning substitutes fixed binary masks for sampled
gates and drops the penalty term.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import gates as gt
from . import hardconcrete as hc
from . import tensor as tz
from .data import Batch, Corpus, PAD, make_batches, pad_batch
from .errors import ConfigError, NumericError
from .model import DenseMemory, Model, greedy_decode
from .rng import RngState
from .sparse import compact_batch
from .tensor import Tensor

logger = logging.getLogger("l0seq")

__all__ = [
    "TrainConfig",
    "Adam",
    "lr_schedule",
    "lambda_schedule",
    "clip_global_norm",
    "joint_loss",
    "sentence_nll",
    "TrainResult",
    "train",
    "EvalResult",
    "evaluate",
    "token_accuracy",
    "bigram_overlap",
    "finetune_l0drop",
    "FinetuneRow",
]

MODES = ("pretrain", "finetune_l0drop", "finetune_pattern", "scratch_l0drop")


@dataclass
class TrainConfig:
    lam: float = 0.0
    lambda_warmup_steps: int = 0  # 0 = constant lambda from step one
    steps: int = 1000
    batch_tokens: int = 1024
    lr_warmup: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    seed: int = 1
    mode: str = "pretrain"
    log_interval: int = 50

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1 or self.batch_tokens < 1 or self.lr_warmup < 1:
            raise ConfigError("steps, batch_tokens, lr_warmup must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label smoothing must be in [0, 1)")

    @property
    def gates_enabled(self) -> bool:
        return self.mode in ("finetune_l0drop", "scratch_l0drop")

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def lr_schedule(step: int, d_model: int, warmup: int) -> float:
    """Inverse square root of the step count after a linear warmup."""
    if step < 1:
        raise ValueError("lr schedule starts at step 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def lambda_schedule(step: int, lam: float, warmup_steps: int) -> float:
    """Linear 0 -> lam over warmup_steps, then constant; 0 warmup = constant."""
    if warmup_steps <= 0:
        return lam
    return lam * min(1.0, step / warmup_steps)


class Adam(object):
    """Bias-corrected Adam over the model's parameter map."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.t"] = np.array([self.t], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for k in self.m:
            self.m[k] = arrays[f"adam.m.{k}"].copy()
            self.v[k] = arrays[f"adam.v.{k}"].copy()


def clip_global_norm(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Accumulates in sorted name order: the sum must not depend on dict
    insertion order, or a model loaded from a checkpoint (sorted names)
    would clip by a slightly different norm than the run that saved it."""
    total = 0.0
    for name in sorted(params):
        p = params[name]
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= scale
    return norm


def _masked_sentence_nll(logits: Tensor, tgt_out: np.ndarray,
                         smoothing: float) -> Tensor:
    """(B, M, V) logits + padded targets -> per-sentence summed loss (B,)."""
    b, m, v = logits.shape
    flat = tz.reshape(logits, (b * m, v))
    per_pos = tz.cross_entropy_smoothed(flat, tgt_out.reshape(-1), smoothing)
    mask = (tgt_out != PAD).astype(logits.data.dtype)
    per_pos = tz.mul(tz.reshape(per_pos, (b, m)), Tensor(mask))
    return tz.sum_(per_pos, axis=1)


def joint_loss(model: Model, batch: Batch, *, lambda_now: float = 0.0,
               smoothing: float = 0.1,
               hc_params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
               drop_rng: RngState | None = None,
               gate_rng: RngState | None = None,
               gates_enabled: bool = True,
               frozen_noise: dict[int, np.ndarray] | None = None,
               pattern_mask: np.ndarray | None = None):
    """One training forward pass; returns (scalar loss Tensor, stats dict).

    With gates enabled, each configured encoder layer samples one gate per
    position and contributes its per-sentence expected open count to the
    penalty.  ``frozen_noise`` maps gate layer -> logistic noise to pin the
    samples for gradient checks.  ``pattern_mask`` (B, N binary) replaces
    sampled gates entirely: encodings are masked after the top layer and no
    penalty is charged."""
    gate_sets: dict[int, gt.GateSet] = {}
    penalties: list[Tensor] = []

    def hook(layer: int, x: Tensor, real_mask: np.ndarray) -> Tensor:
        if layer not in model.config.gate_layers:
            return x
        w = model.p(f"gates.layer{layer}.w")
        noise = frozen_noise.get(layer) if frozen_noise is not None else None
        out = gt.apply_gates_train(x, w, real_mask, hc_params,
                                   rng=gate_rng, noise=noise)
        gate_sets[layer] = out.gate_set
        penalties.append(out.penalty)
        return out.gated

    def pattern_hook(layer: int, x: Tensor, real_mask: np.ndarray) -> Tensor:
        if layer != model.config.n_layers:
            return x
        m = (pattern_mask & real_mask).astype(x.data.dtype)
        return tz.mul(x, Tensor(m[..., None]))

    if pattern_mask is not None:
        layer_hook = pattern_hook
    elif gates_enabled and model.config.gate_layers:
        layer_hook = hook
    else:
        layer_hook = None
    enc, real_mask = model.encode(batch.src, rng=drop_rng, layer_hook=layer_hook)
    memory = DenseMemory(enc, real_mask)
    logits = model.decode_train(batch.tgt_in, memory, rng=drop_rng)
    nll = _masked_sentence_nll(logits, batch.tgt_out, smoothing)
    mle = tz.mean_(nll)
    stats = {"mle": float(mle.data), "lambda": lambda_now,
             "ntokens": batch.ntokens, "nsentences": batch.nsentences}
    if penalties:
        total = penalties[0]
        for p in penalties[1:]:
            total = tz.add(total, p)
        pen = tz.mean_(total)
        loss = tz.add(mle, tz.mul(pen, lambda_now))
        stats["l0"] = float(pen.data)
        closed = sum((~gs.open_mask & gs.real_mask).sum() for gs in gate_sets.values())
        real = sum(gs.n_real() for gs in gate_sets.values())
        stats["sampled_sparsity"] = closed / real if real else 0.0
    else:
        loss = mle
        stats["l0"] = 0.0
    stats["loss"] = float(loss.data)
    return loss, stats, gate_sets


def sentence_nll(model: Model, batch: Batch, memory, smoothing: float) -> np.ndarray:
    """Deterministic per-sentence teacher-forced loss (no dropout)."""
    with tz.no_grad():
        logits = model.decode_train(batch.tgt_in, memory)
        return _masked_sentence_nll(logits, batch.tgt_out, smoothing).data.copy()


@dataclass
class TrainResult:
    model: Model
    log: list[dict]
    steps_done: int
    epoch: int
    batch_idx: int
    optimizer: "Adam | None" = None
    noise_rng: RngState | None = None
    drop_rng: RngState | None = None


def train(model: Model, corpus: Corpus, tcfg: TrainConfig, *,
          optimizer: Adam | None = None,
          noise_rng: RngState | None = None,
          drop_rng: RngState | None = None,
          start_step: int = 0, start_epoch: int = 0, start_batch: int = 0,
          pattern_masks: list[np.ndarray] | None = None,
          on_step=None) -> TrainResult:
    """Run (or continue) a training loop for tcfg.steps total steps.

    Resume: pass the deserialized optimizer and rng states plus the saved
    (step, epoch, batch) cursor; the batch schedule of completed epochs is
    recomputed from the seed, so the continued trajectory is the one the
    uninterrupted run would have taken."""
    if tcfg.mode == "finetune_pattern" and pattern_masks is None:
        raise ConfigError("pattern finetuning requires precomputed masks")
    root = RngState(tcfg.seed)
    batch_rng = root.derive("batches")
    if optimizer is None:
        optimizer = Adam(model.params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    if noise_rng is None:
        noise_rng = root.derive("gates")
    if drop_rng is None:
        drop_rng = root.derive("dropout")

    # replay the schedule up to the cursor (pure function of seed + corpus)
    epoch = -1
    batches: list[np.ndarray] = []
    for epoch in range(start_epoch + 1):
        batches = make_batches(corpus, tcfg.batch_tokens, batch_rng)
    batch_idx = start_batch
    step = start_step
    log_rows: list[dict] = []
    t0 = time.perf_counter()
    while step < tcfg.steps:
        if batch_idx >= len(batches):
            epoch += 1
            batches = make_batches(corpus, tcfg.batch_tokens, batch_rng)
            batch_idx = 0
        batch = pad_batch(corpus, batches[batch_idx])
        batch_idx += 1
        step += 1
        lam_now = (lambda_schedule(step, tcfg.lam, tcfg.lambda_warmup_steps)
                   if tcfg.gates_enabled else 0.0)
        pmask = None
        if pattern_masks is not None:
            n = batch.src.shape[1]
            pmask = np.zeros(batch.src.shape, dtype=bool)
            for r, i in enumerate(batch.indices):
                m = pattern_masks[int(i)]
                pmask[r, : len(m)] = m
        model.zero_grad()
        loss, stats, _ = joint_loss(
            model, batch, lambda_now=lam_now, smoothing=tcfg.label_smoothing,
            drop_rng=drop_rng, gate_rng=noise_rng,
            gates_enabled=tcfg.gates_enabled, pattern_mask=pmask)
        if not np.isfinite(loss.data):
            raise NumericError(
                f"non-finite loss at step {step}: {stats}")
        tz.backward(loss)
        gnorm = clip_global_norm(model.params, tcfg.clip_norm)
        lr = tcfg.lr_scale * lr_schedule(step, model.config.d_model, tcfg.lr_warmup)
        optimizer.step(lr)
        if step % tcfg.log_interval == 0 or step == tcfg.steps:
            row = {"step": step, "loss": stats["loss"], "mle": stats["mle"],
                   "l0": stats["l0"], "lambda": lam_now, "lr": lr,
                   "grad_norm": gnorm,
                   "wall_s": time.perf_counter() - t0}
            if "sampled_sparsity" in stats:
                row["sampled_sparsity"] = stats["sampled_sparsity"]
            log_rows.append(row)
        if on_step is not None:
            on_step(step, epoch, batch_idx, optimizer, noise_rng, drop_rng)
    return TrainResult(model=model, log=log_rows, steps_done=step,
                       epoch=epoch, batch_idx=batch_idx, optimizer=optimizer,
                       noise_rng=noise_rng, drop_rng=drop_rng)


def token_accuracy(outputs: list[list[int]], refs: list[np.ndarray]) -> float:
    """Position-aligned exact-match rate over reference tokens."""
    hit = total = 0
    for out, ref in zip(outputs, refs):
        total += len(ref)
        hit += sum(1 for i in range(min(len(out), len(ref)))
                   if out[i] == int(ref[i]))
    return hit / total if total else 0.0


def bigram_overlap(outputs: list[list[int]], refs: list[np.ndarray]) -> float:
    """Clipped bigram matches over reference bigrams, corpus level."""
    from collections import Counter
    hit = total = 0
    for out, ref in zip(outputs, refs):
        rb = Counter(zip(ref[:-1].tolist(), ref[1:].tolist()))
        ob = Counter(zip(out[:-1], out[1:]))
        total += sum(rb.values())
        hit += sum(min(c, ob[g]) for g, c in rb.items())
    return hit / total if total else 0.0


@dataclass
class EvalResult:
    token_accuracy: float
    bigram_overlap: float
    sparsity: float | None
    outputs: list[list[int]]
    fallback_sentences: int = 0


def evaluate(model: Model, corpus: Corpus, *,
             hc_params: hc.HardConcreteParams = hc.DEFAULT_PARAMS,
             use_sparse: bool = True, gated: bool | None = None,
             pattern_masks: list[np.ndarray] | None = None,
             batch_sents: int = 64, max_len: int | None = None) -> EvalResult:
    """Greedy-decode a corpus and score it against the references.

    gated defaults to "model has gate layers".  With gating, decoding uses
    the compacted memory (dense fallback per fully pruned sentence, logged);
    without, the plain dense memory.  Sparsity is the corpus rate over
    eval-mode gates (or pattern masks)."""
    if gated is None:
        gated = bool(model.config.gate_layers) or pattern_masks is not None
    top = model.config.n_layers
    outputs: list[list[int]] = []
    gate_sets: list[gt.GateSet] = []
    fallbacks = 0
    with tz.no_grad():
        for lo in range(0, len(corpus), batch_sents):
            batch = pad_batch(corpus, range(lo, min(lo + batch_sents, len(corpus))))
            cap = max_len or min(model.config.max_len,
                                 batch.src.shape[1] * 2 + 5)
            # per decode style: dense_enc (fully gated, for dense attention),
            # raw_enc + gvals (pre-gate memory + gate values, for compaction)
            if pattern_masks is not None:
                raw_enc, real = model.encode(batch.src)
                gvals = np.zeros(batch.src.shape)
                for r, i in enumerate(batch.indices):
                    m = pattern_masks[int(i)]
                    gvals[r, : len(m)] = m
                gvals = gvals * real
                dense_enc = tz.mul(raw_enc, Tensor(gvals[..., None]))
                gate_sets.append(gt.GateSet(
                    log_alphas=np.zeros_like(gvals), gates=gvals,
                    pad_mask=~real))
            elif gated and model.config.gate_layers:
                raw_top: Tensor | None = None
                gs_top: gt.GateSet | None = None

                def layer_hook(layer, x, rm):
                    nonlocal raw_top, gs_top
                    if layer not in model.config.gate_layers:
                        return x
                    w = model.p(f"gates.layer{layer}.w")
                    gx, gs = gt.apply_gates_eval(x, w, rm, hc_params)
                    if layer == top:
                        raw_top, gs_top = x, gs
                    return gx

                dense_enc, real = model.encode(batch.src, layer_hook=layer_hook)
                if gs_top is not None:
                    raw_enc, gvals = raw_top, gs_top.gates
                    gate_sets.append(gs_top)
                else:  # intermediate-only gating scales rows but prunes nothing
                    raw_enc, gvals = None, None
            else:
                dense_enc, real = model.encode(batch.src)
                raw_enc, gvals = None, None
            b = batch.nsentences
            if use_sparse and gvals is not None:
                alive = ((gvals > 0) & real).any(axis=1)
                dead = np.flatnonzero(~alive)
                live = np.flatnonzero(alive)
                outs: list[list[int]] = [[] for _ in range(b)]
                if live.size:
                    mem = compact_batch(
                        Tensor(raw_enc.data[live]), gvals[live], real[live])
                    for r, o in zip(live, greedy_decode(model, mem,
                                                        int(live.size), cap)):
                        outs[int(r)] = o
                if dead.size:
                    fallbacks += int(dead.size)
                    logger.warning(
                        "falling back to dense attention for %d fully pruned "
                        "sentence(s)", dead.size)
                    mem = DenseMemory(Tensor(dense_enc.data[dead]), real[dead])
                    for r, o in zip(dead, greedy_decode(model, mem,
                                                        int(dead.size), cap)):
                        outs[int(r)] = o
                outputs.extend(outs)
            else:
                outputs.extend(greedy_decode(
                    model, DenseMemory(dense_enc, real), b, cap))
    sparsity = gt.sparsity_rate(gate_sets) if gate_sets else None
    return EvalResult(
        token_accuracy=token_accuracy(outputs, corpus.tgt),
        bigram_overlap=bigram_overlap(outputs, corpus.tgt),
        sparsity=sparsity, outputs=outputs, fallback_sentences=fallbacks)


@dataclass
class FinetuneRow:
    lam: float
    sparsity: float
    token_accuracy: float
    model: Model


def finetune_l0drop(baseline: Model, corpus: Corpus, eval_corpus: Corpus,
                    lambdas: list[float], tcfg: TrainConfig) -> list[FinetuneRow]:
    """Finetune one copy of the baseline per lambda; report the corpus
    sparsity and quality each reaches."""
    rows = []
    for lam in lambdas:
        params = {k: Tensor(v.data.copy(), requires_grad=True)
                  for k, v in baseline.params.items()}
        model = Model(baseline.config, params=params)
        cfg = TrainConfig(**{**tcfg.to_dict(), "lam": lam,
                             "mode": "finetune_l0drop"})
        train(model, corpus, cfg)
        ev = evaluate(model, eval_corpus)
        logger.info("finetune lambda=%.2f sparsity=%.3f acc=%.3f",
                    lam, ev.sparsity or 0.0, ev.token_accuracy)
        rows.append(FinetuneRow(lam=lam, sparsity=ev.sparsity or 0.0,
                                token_accuracy=ev.token_accuracy, model=model))
    return rows

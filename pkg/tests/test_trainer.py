"""Schedules, the joint objective, toy data, metrics, and loop determinism."""

import numpy as np
import pytest

import l0seq.hardconcrete as hc
import l0seq.tensor as tz
from l0seq.data import DataError, make_toy_corpus, pad_batch
from l0seq.errors import ConfigError
from l0seq.model import DenseMemory, Model
from l0seq.rng import RngState
from l0seq.training import (TrainConfig, bigram_overlap, joint_loss,
                            lambda_schedule, lr_schedule, token_accuracy,
                            train)
from l0seq.training import _masked_sentence_nll
from l0seq import gates as gt

from conftest import small_config


# ---------------------------------------------------------------- schedules

def test_lr_peak_at_warmup_end():
    d, w = 512, 4000
    assert lr_schedule(w, d, w) == pytest.approx(d ** -0.5 * w ** -0.5)


def test_lr_half_peak_at_four_warmups():
    d, w = 512, 4000
    peak = lr_schedule(w, d, w)
    assert lr_schedule(4 * w, d, w) == pytest.approx(peak / 2)


def test_lr_ramp_start_is_tiny():
    assert lr_schedule(1, 512, 4000) == pytest.approx(512 ** -0.5 * 4000 ** -1.5)
    with pytest.raises(ValueError):
        lr_schedule(0, 512, 4000)


def test_lambda_schedule_ramp():
    assert lambda_schedule(100, 0.9, 0) == 0.9  # no warmup = constant
    assert lambda_schedule(200, 0.9, 400) == pytest.approx(0.45)
    assert lambda_schedule(400, 0.9, 400) == pytest.approx(0.9)
    assert lambda_schedule(4000, 0.9, 400) == 0.9


# ------------------------------------------------------------------- config

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lam=-0.1)
    with pytest.raises(ConfigError):
        TrainConfig(mode="finetune")
    with pytest.raises(ConfigError):
        TrainConfig(steps=0)
    with pytest.raises(ConfigError):
        TrainConfig(label_smoothing=1.0)


def test_gates_enabled_by_mode():
    on = {"pretrain": False, "finetune_l0drop": True,
          "finetune_pattern": False, "scratch_l0drop": True}
    for mode, want in on.items():
        assert TrainConfig(mode=mode).gates_enabled is want


# ---------------------------------------------------------------- toy data

def test_toy_corpus_tasks_and_determinism():
    for task in ("copy", "reverse", "sorted"):
        a = make_toy_corpus(task, 15, 3, 6, 50, 9)
        b = make_toy_corpus(task, 15, 3, 6, 50, 9)
        assert a.src_vocab.content_hash() == b.src_vocab.content_hash()
        for s1, s2 in zip(a.src, b.src):
            assert np.array_equal(s1, s2)
        for t1, t2 in zip(a.tgt, b.tgt):
            assert np.array_equal(t1, t2)
    cp = make_toy_corpus("copy", 15, 3, 6, 50, 9)
    rv = make_toy_corpus("reverse", 15, 3, 6, 50, 9)
    st = make_toy_corpus("sorted", 15, 3, 6, 50, 9)
    for s, t in zip(cp.src, cp.tgt):
        assert np.array_equal(s, t)
    for s, t in zip(rv.src, rv.tgt):
        assert np.array_equal(s[::-1], t)
    for s, t in zip(st.src, st.tgt):
        assert np.array_equal(np.sort(s), t)


def test_toy_corpus_shape_and_range():
    c = make_toy_corpus("copy", 50, 5, 20, 300, 2)
    first = c.src_vocab.encode(["0"])[0]
    for s in c.src:
        assert 5 <= len(s) <= 20
        assert s.min() >= first and s.max() < first + 50
    with pytest.raises(DataError):
        make_toy_corpus("swap", 10, 1, 5, 10, 1)
    with pytest.raises(DataError):
        make_toy_corpus("copy", 10, 5, 4, 10, 1)


def test_toy_corpus_frequency_skew():
    # rank-ordered frequencies: token "0" is common, token "49" is rare
    c = make_toy_corpus("copy", 50, 5, 20, 2000, 3)
    ids = np.concatenate(c.src)
    lo = c.src_vocab.encode(["0"])[0]
    hi = c.src_vocab.encode(["49"])[0]
    n0 = int((ids == lo).sum())
    n49 = int((ids == hi).sum())
    assert n0 > 20 * max(n49, 1)
    assert n0 > 0.15 * ids.size


# ------------------------------------------------------------------ metrics

def test_token_accuracy_examples():
    assert token_accuracy([[5, 6, 7]], [np.array([5, 6, 8])]) == pytest.approx(2 / 3)
    assert token_accuracy([[5]], [np.array([5, 6])]) == pytest.approx(1 / 2)
    assert token_accuracy([[5, 6, 7]], [np.array([5])]) == 1.0
    assert token_accuracy([], []) == 0.0


def test_bigram_overlap_examples():
    assert bigram_overlap([[1, 2, 3]], [np.array([1, 2, 3])]) == 1.0
    assert bigram_overlap([[3, 1, 2]], [np.array([1, 2, 3])]) == pytest.approx(1 / 2)
    assert bigram_overlap([[4, 4, 4]], [np.array([1, 2, 3])]) == 0.0


# ------------------------------------------------------------ joint objective

def _one_batch(corpus, n=8):
    return pad_batch(corpus, range(n))


def test_zero_lambda_loss_is_mle(tiny_copy):
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=11)
    batch = _one_batch(tiny_copy)
    loss, stats, _ = joint_loss(model, batch, lambda_now=0.0,
                                gate_rng=RngState(4).derive("g"))
    assert stats["l0"] > 0.0
    assert stats["loss"] == stats["mle"]
    assert float(loss.data) == stats["mle"]


def test_gates_disabled_matches_gateless_build(tiny_copy):
    """A gated model with gating switched off must compute the exact same
    loss as a build whose config has no gate layers at all."""
    gated = Model(small_config(tiny_copy, gate_layers=(2,)), seed=11)
    plain = Model(small_config(tiny_copy), seed=11)
    for k, p in plain.params.items():
        gated.params[k].data = p.data.copy()
    batch = _one_batch(tiny_copy)
    l1, s1, _ = joint_loss(gated, batch, gates_enabled=False)
    l2, s2, _ = joint_loss(plain, batch)
    assert float(l1.data) == float(l2.data)
    assert s1["mle"] == s2["mle"]


def test_frozen_noise_pins_the_sample(tiny_copy):
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=11)
    batch = _one_batch(tiny_copy)
    noise = {2: RngState(8).normal(size=batch.src.shape)}
    l1, _, gs1 = joint_loss(model, batch, lambda_now=0.3, frozen_noise=noise)
    l2, _, gs2 = joint_loss(model, batch, lambda_now=0.3, frozen_noise=noise)
    assert float(l1.data) == float(l2.data)
    assert np.array_equal(gs1[2].gates, gs2[2].gates)
    l3, _, _ = joint_loss(model, batch, lambda_now=0.3,
                          gate_rng=RngState(9).derive("g"))
    assert float(l3.data) != float(l1.data)


def test_all_ones_pattern_equals_no_gating(tiny_copy):
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=11)
    batch = _one_batch(tiny_copy)
    ones = np.ones(batch.src.shape, dtype=bool)
    lp, sp, _ = joint_loss(model, batch, pattern_mask=ones)
    ln, sn, _ = joint_loss(model, batch, gates_enabled=False)
    assert float(lp.data) == float(ln.data)
    assert sp["l0"] == 0.0


def test_pruning_pattern_raises_loss(tiny_copy):
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=11)
    batch = _one_batch(tiny_copy)
    keep_first = np.zeros(batch.src.shape, dtype=bool)
    keep_first[:, 0] = True
    lp, _, _ = joint_loss(model, batch, pattern_mask=keep_first)
    ln, _, _ = joint_loss(model, batch, gates_enabled=False)
    assert float(lp.data) > float(ln.data)


def test_one_sample_objective_upper_bounds_expected_gate_loss(trained_base,
                                                              tiny_copy,
                                                              tiny_eval):
    """Jensen-direction check: with the gate predictor at its zero init the
    deterministic eval gate (0.5) equals the true expected gate, and the
    mean sampled NLL over many draws must sit at or above the NLL under
    those expected gates, up to a 3-sigma statistical band."""
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=3)
    for key, p in trained_base.params.items():
        model.params[key].data = p.data.copy()
    batch = pad_batch(tiny_eval, range(4))
    k = 1000
    rng = RngState(13).derive("jensen")
    vals = np.empty(k)
    with tz.no_grad():
        for i in range(k):
            _, stats, _ = joint_loss(model, batch, lambda_now=0.0,
                                     gate_rng=rng)
            vals[i] = stats["mle"]

        def hook(layer, x, rm):
            if layer not in model.config.gate_layers:
                return x
            w = model.p(f"gates.layer{layer}.w")
            gx, _ = gt.apply_gates_eval(x, w, rm, hc.DEFAULT_PARAMS)
            return gx

        enc, real = model.encode(batch.src, layer_hook=hook)
        logits = model.decode_train(batch.tgt_in, DenseMemory(enc, real))
        det = float(_masked_sentence_nll(logits, batch.tgt_out, 0.1).data.mean())
    sigma = vals.std(ddof=1) / np.sqrt(k)
    assert vals.mean() >= det - 3 * sigma


# ------------------------------------------------------------------ the loop

def test_identical_seeds_identical_trajectories(tiny_copy):
    runs = []
    for _ in range(2):
        model = Model(small_config(tiny_copy), seed=21)
        train(model, tiny_copy, TrainConfig(steps=25, batch_tokens=256,
                                            lr_warmup=50, seed=21))
        runs.append({k: v.data.copy() for k, v in model.params.items()})
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k]), k


def test_pattern_mode_requires_masks(tiny_copy):
    model = Model(small_config(tiny_copy), seed=1)
    with pytest.raises(ConfigError):
        train(model, tiny_copy, TrainConfig(steps=1, mode="finetune_pattern"))


def test_lambda_ramp_appears_in_log(tiny_copy):
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=4)
    res = train(model, tiny_copy,
                TrainConfig(steps=20, batch_tokens=256, lr_warmup=50, seed=4,
                            mode="finetune_l0drop", lam=0.8,
                            lambda_warmup_steps=20, log_interval=5))
    lams = [row["lambda"] for row in res.log]
    assert lams == pytest.approx([0.2, 0.4, 0.6, 0.8])
    assert all(row["l0"] > 0 for row in res.log)


@pytest.mark.slow
def test_loss_decreases_over_training():
    # the long-haul sanity check runs in float32 mode to keep it quick
    tz.set_mode("fast")
    corpus = make_toy_corpus("copy", 20, 4, 8, 400, 7)
    model = Model(small_config(corpus, n_layers=1, dropout=0.0), seed=6)
    res = train(model, corpus, TrainConfig(steps=2000, batch_tokens=256,
                                           lr_warmup=400, seed=6,
                                           log_interval=1))
    first, last = res.log[0], res.log[-1]
    assert first["step"] == 1 and last["step"] == 2000
    assert last["loss"] < first["loss"]

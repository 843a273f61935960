"""Shared fixtures: a small trained copy-task model, a gated variant of it
with deterministic mixed gates, and a mode guard so no test leaks float32
mode into its neighbors."""

import numpy as np
import pytest

import l0seq.tensor as tz
from l0seq.data import Corpus, make_toy_corpus, pad_batch
from l0seq.model import Model, ModelConfig
from l0seq.training import TrainConfig, train


@pytest.fixture(autouse=True)
def _verify_mode():
    tz.set_mode("verify")
    yield
    tz.set_mode("verify")


@pytest.fixture(scope="session")
def tiny_copy() -> Corpus:
    return make_toy_corpus("copy", 20, 4, 8, 400, 7)


@pytest.fixture(scope="session")
def tiny_eval(tiny_copy) -> Corpus:
    return Corpus(tiny_copy.src[:40], tiny_copy.tgt[:40],
                  tiny_copy.src_vocab, tiny_copy.tgt_vocab)


def small_config(corpus: Corpus, **kw) -> ModelConfig:
    base = dict(src_vocab=len(corpus.src_vocab), tgt_vocab=len(corpus.tgt_vocab),
                d_model=32, n_heads=2, d_ffn=64, n_layers=2,
                dropout=0.1, attn_dropout=0.0, max_len=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="session")
def trained_base(tiny_copy) -> Model:
    tz.set_mode("verify")
    model = Model(small_config(tiny_copy), seed=3)
    train(model, tiny_copy, TrainConfig(steps=200, batch_tokens=512,
                                        lr_warmup=100, seed=3))
    return model


@pytest.fixture(scope="session")
def gated_model(tiny_copy, tiny_eval, trained_base) -> Model:
    """trained_base's weights plus a gate layer whose predictor is set by
    hand so eval-mode gates come out mixed: roughly half the positions
    closed, half open, deterministically."""
    tz.set_mode("verify")
    model = Model(small_config(tiny_copy, gate_layers=(2,)), seed=3)
    for k, v in trained_base.params.items():
        model.params[k].data = v.data.copy()

    batch = pad_batch(tiny_eval, range(len(tiny_eval)))
    with tz.no_grad():
        enc, real = model.encode(batch.src)
    rows = enc.data[real]
    center = rows.mean(axis=0)
    rng = np.random.default_rng(5)
    w = rng.normal(size=rows.shape[1])
    w -= center * (center @ w) / (center @ center)
    la = rows @ w
    w *= 3.0 / la.std()
    la = rows @ w
    assert (la < -2.5).any() and (la > 2.5).any()
    model.params["gates.layer2.w"].data = w.astype(enc.data.dtype)
    return model

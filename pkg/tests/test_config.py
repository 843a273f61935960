"""Flat key=value config parsing and resolution."""

import pytest

from l0seq.config import load_kv, model_config, parse_kv, train_config
from l0seq.errors import ConfigError
from l0seq.gates import place_gates


def test_parse_kv_basics():
    kv = parse_kv("a = 1\n# comment\n\nb=two  # trailing\n  c  =  3  \n")
    assert kv == {"a": "1", "b": "two", "c": "3"}


def test_parse_kv_line_numbers_in_errors():
    with pytest.raises(ConfigError, match=r"<config>:3"):
        parse_kv("a = 1\n\nnot a pair\n")
    with pytest.raises(ConfigError, match=r"myfile:2"):
        parse_kv("a = 1\na = 2\n", source="myfile")


def test_parse_kv_rejects_empty_sides():
    with pytest.raises(ConfigError, match="empty"):
        parse_kv("= 3")
    with pytest.raises(ConfigError, match="empty"):
        parse_kv("key =")


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key 'd_modell'"):
        model_config({"d_modell": "64"}, 10, 10)
    with pytest.raises(ConfigError, match="unknown"):
        train_config({"lamda": "0.1"})


def test_model_config_resolution():
    kv = parse_kv("d_model = 32\nn_heads = 2\nn_layers = 3\n"
                  "gate_placement = top\nscale_embeddings = no\n")
    mcfg = model_config(kv, 11, 13)
    assert mcfg.src_vocab == 11 and mcfg.tgt_vocab == 13
    assert mcfg.d_model == 32 and mcfg.n_heads == 2
    assert mcfg.gate_layers == (3,)
    assert mcfg.scale_embeddings is False
    assert mcfg.d_ffn == 256  # untouched defaults survive


def test_bad_typed_value():
    with pytest.raises(ConfigError, match="expected int"):
        model_config({"d_model": "sixty-four"}, 4, 4)
    with pytest.raises(ConfigError, match="expected a boolean"):
        model_config({"use_positions": "maybe"}, 4, 4)


def test_place_gates_table():
    assert place_gates(4, "none") == ()
    assert place_gates(4, "top") == (4,)
    assert place_gates(4, "all") == (1, 2, 3, 4)
    assert place_gates(4, "2") == (2,)
    with pytest.raises(ConfigError, match="outside"):
        place_gates(4, "5")
    with pytest.raises(ConfigError, match="unknown gate placement"):
        place_gates(4, "middle")


def test_train_config_resolution():
    kv = parse_kv("mode = scratch_l0drop\nlambda = 0.4\n"
                  "lambda_warmup_steps = 100\nsteps = 7\nseed = 9\n")
    tcfg = train_config(kv)
    assert tcfg.mode == "scratch_l0drop"
    assert tcfg.lam == 0.4
    assert tcfg.lambda_warmup_steps == 100
    assert tcfg.steps == 7 and tcfg.seed == 9


def test_label_smoothing_lives_in_one_place():
    # the model key doubles as the training default ...
    tcfg = train_config({"label_smoothing": "0.2"})
    assert tcfg.label_smoothing == 0.2
    tcfg = train_config({}, default_smoothing=0.05)
    assert tcfg.label_smoothing == 0.05
    # ... and an explicit key wins over the fallback
    tcfg = train_config({"label_smoothing": "0.2"}, default_smoothing=0.05)
    assert tcfg.label_smoothing == 0.2


def test_train_config_bad_mode():
    with pytest.raises(ConfigError, match="mode must be one of"):
        train_config({"mode": "annealed"})


def test_load_kv_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_kv(tmp_path / "nope.cfg")
    p = tmp_path / "run.cfg"
    p.write_text("steps = 3\n", encoding="utf-8")
    assert load_kv(p) == {"steps": "3"}

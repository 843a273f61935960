"""Flat key=value run configuration.

One file configures both the model and the training loop.  Lines are
``key = value``; blank lines and ``#`` comments are ignored.  Unknown
keys are rejected so typos fail loudly.

Model keys: d_model, n_heads, d_ffn, n_layers, dropout, attn_dropout,
max_len, scale_embeddings, use_positions, gate_placement (none | top |
all | a single 1-based layer number), label_smoothing.

Train keys: mode, lambda, lambda_warmup_steps, steps, batch_tokens,
lr_warmup, lr_scale, beta1, beta2, adam_eps, clip_norm, seed,
log_interval.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .gates import place_gates
from .model import ModelConfig
from .training import MODES, TrainConfig

_MODEL_KEYS = {
    "d_model": int, "n_heads": int, "d_ffn": int, "n_layers": int,
    "dropout": float, "attn_dropout": float, "max_len": int,
    "scale_embeddings": bool, "use_positions": bool,
    "gate_placement": str, "label_smoothing": float,
}
_TRAIN_KEYS = {
    "mode": str, "lambda": float, "lambda_warmup_steps": int, "steps": int,
    "batch_tokens": int, "lr_warmup": int, "lr_scale": float,
    "beta1": float, "beta2": float, "adam_eps": float, "clip_norm": float,
    "seed": int, "log_interval": int,
}
_BOOL = {"true": True, "1": True, "yes": True,
         "false": False, "0": False, "no": False}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings, with duplicate and syntax checking."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not key or not val:
            raise ConfigError(f"{source}:{ln}: empty key or value")
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _convert(key: str, val: str, typ):
    if typ is bool:
        if val.lower() not in _BOOL:
            raise ConfigError(f"key {key!r}: expected a boolean, got {val!r}")
        return _BOOL[val.lower()]
    if typ is str:
        return val
    try:
        return typ(val)
    except ValueError:
        raise ConfigError(
            f"key {key!r}: expected {typ.__name__}, got {val!r}") from None


def check_keys(kv: dict[str, str]) -> None:
    known = set(_MODEL_KEYS) | set(_TRAIN_KEYS)
    for key in kv:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")


def model_config(kv: dict[str, str], src_vocab: int, tgt_vocab: int) -> ModelConfig:
    """Resolve the model half of a parsed config against vocabulary sizes."""
    check_keys(kv)
    args = {k: _convert(k, kv[k], t)
            for k, t in _MODEL_KEYS.items() if k in kv and k != "gate_placement"}
    placement = kv.get("gate_placement", "none")
    n_layers = args.get("n_layers", 2)
    args["gate_layers"] = place_gates(n_layers, placement)
    return ModelConfig(src_vocab=src_vocab, tgt_vocab=tgt_vocab, **args)


def train_config(kv: dict[str, str],
                 default_smoothing: float | None = None) -> TrainConfig:
    """Resolve the training half; label_smoothing falls back to the
    model key so the value lives in one place."""
    check_keys(kv)
    args = {}
    for key, typ in _TRAIN_KEYS.items():
        if key in kv:
            args["lam" if key == "lambda" else key] = _convert(key, kv[key], typ)
    if "label_smoothing" in kv:
        args["label_smoothing"] = _convert("label_smoothing",
                                           kv["label_smoothing"], float)
    elif default_smoothing is not None:
        args["label_smoothing"] = default_smoothing
    if "mode" in args and args["mode"] not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {args['mode']!r}")
    return TrainConfig(**args)


def load_kv(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_kv(p.read_text(encoding="utf-8"), source=str(p))

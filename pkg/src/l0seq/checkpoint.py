"""Checkpoint container: one binary file holding named arrays plus JSON
metadata, written deterministically so save -> load -> save reproduces the
file byte for byte.

Layout:

    bytes 0..7    magic "L0SEQCKP"
    bytes 8..11   format version, little-endian uint32
    bytes 12..19  manifest length in bytes, little-endian uint64
    manifest      UTF-8 JSON: {"arrays": {name: {dtype, shape, offset}},
                  "meta": {...}}, sorted keys, no whitespace
    payload       raw little-endian array bytes, concatenated in sorted
                  name order; offsets in the manifest are payload-relative

A full training checkpoint stores the parameters, the optimizer moments,
the noise and dropout stream states, the (step, epoch, batch) cursor, both
configs, and the vocabulary hashes, which is everything a resumed run
needs to continue the exact trajectory.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import DataError
from .model import Model, ModelConfig
from .rng import RngState
from .tensor import Tensor
from .training import Adam, TrainConfig

__all__ = [
    "save_arrays",
    "load_arrays",
    "save_model",
    "load_model",
    "save_training_state",
    "load_training_state",
    "file_hash",
]

MAGIC = b"L0SEQCKP"
VERSION = 1


def _le(arr: np.ndarray) -> np.ndarray:
    dt = arr.dtype.newbyteorder("<")
    # asarray, not ascontiguousarray: the latter would silently promote
    # zero-dimensional arrays to shape (1,)
    return np.asarray(arr, dtype=dt, order="C")


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    names = sorted(arrays)
    manifest_arrays = {}
    offset = 0
    blobs = []
    for name in names:
        a = _le(np.asarray(arrays[name]))
        blob = a.tobytes()
        manifest_arrays[name] = {"dtype": a.dtype.str, "shape": list(a.shape),
                                 "offset": offset}
        offset += len(blob)
        blobs.append(blob)
    manifest = json.dumps({"arrays": manifest_arrays, "meta": meta or {}},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).tobytes())
        f.write(np.uint64(len(manifest)).tobytes())
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    mlen = int(np.frombuffer(raw[12:20], dtype="<u8")[0])
    manifest = json.loads(raw[20: 20 + mlen].decode("utf-8"))
    base = 20 + mlen
    arrays = {}
    for name, spec in manifest["arrays"].items():
        dt = np.dtype(spec["dtype"])
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        start = base + spec["offset"]
        arr = np.frombuffer(raw, dtype=dt, count=n, offset=start)
        arrays[name] = arr.reshape(spec["shape"]).copy()
    return arrays, manifest["meta"]


def _rng_arrays(prefix: str, rng: RngState) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in rng.get_state().items()}


def _rng_restore(prefix: str, arrays: dict[str, np.ndarray]) -> RngState:
    state = {k: arrays[f"{prefix}.{k}"]
             for k in ("counter", "key", "buffer", "scalars")}
    r = RngState(0)
    r.set_state(state)
    return r


def save_model(path: str | Path, model: Model,
               src_vocab: Vocab | None = None,
               tgt_vocab: Vocab | None = None,
               extra_meta: dict | None = None) -> None:
    """Parameters + model config only (no optimizer): a decode checkpoint."""
    arrays = {f"param.{k}": v.data for k, v in model.params.items()}
    meta = {"model_config": model.config.to_dict(),
            "src_vocab_hash": src_vocab.content_hash() if src_vocab else None,
            "tgt_vocab_hash": tgt_vocab.content_hash() if tgt_vocab else None}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def check_vocab(meta: dict, src_vocab: Vocab | None,
                tgt_vocab: Vocab | None) -> None:
    for vocab, key in ((src_vocab, "src_vocab_hash"), (tgt_vocab, "tgt_vocab_hash")):
        if vocab is not None and meta.get(key) is not None:
            if vocab.content_hash() != meta[key]:
                raise DataError(
                    f"checkpoint was trained with a different vocabulary ({key})")


def load_model(path: str | Path, src_vocab: Vocab | None = None,
               tgt_vocab: Vocab | None = None) -> tuple[Model, dict]:
    arrays, meta = load_arrays(path)
    check_vocab(meta, src_vocab, tgt_vocab)
    config = ModelConfig.from_dict(meta["model_config"])
    params = {k[len("param."):]: Tensor(v, requires_grad=True)
              for k, v in arrays.items() if k.startswith("param.")}
    return Model(config, params=params), meta


def save_training_state(path: str | Path, model: Model, tcfg: TrainConfig,
                        optimizer: Adam, noise_rng: RngState,
                        drop_rng: RngState, step: int, epoch: int,
                        batch_idx: int, src_vocab: Vocab | None = None,
                        tgt_vocab: Vocab | None = None) -> None:
    arrays = {f"param.{k}": v.data for k, v in model.params.items()}
    arrays.update(optimizer.state_arrays())
    arrays.update(_rng_arrays("rng.noise", noise_rng))
    arrays.update(_rng_arrays("rng.dropout", drop_rng))
    meta = {"model_config": model.config.to_dict(),
            "train_config": tcfg.to_dict(),
            "cursor": {"step": step, "epoch": epoch, "batch_idx": batch_idx},
            "src_vocab_hash": src_vocab.content_hash() if src_vocab else None,
            "tgt_vocab_hash": tgt_vocab.content_hash() if tgt_vocab else None}
    save_arrays(path, arrays, meta)


def load_training_state(path: str | Path):
    """Returns (model, tcfg, optimizer, noise_rng, drop_rng, cursor, meta)."""
    arrays, meta = load_arrays(path)
    config = ModelConfig.from_dict(meta["model_config"])
    params = {k[len("param."):]: Tensor(v, requires_grad=True)
              for k, v in arrays.items() if k.startswith("param.")}
    model = Model(config, params=params)
    tcfg = TrainConfig(**meta["train_config"])
    optimizer = Adam(model.params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps)
    optimizer.load_state_arrays(arrays)
    noise_rng = _rng_restore("rng.noise", arrays)
    drop_rng = _rng_restore("rng.dropout", arrays)
    return model, tcfg, optimizer, noise_rng, drop_rng, meta["cursor"], meta


def file_hash(path: str | Path) -> str:
    import hashlib
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Encoder-decoder Transformer over the autodiff tensors.

Post-norm residual order (sublayer, residual add, layer normalization),
sinusoidal positions, and bias-free attention projections.  The projections
must stay bias-free: the sparse cross-attention path represents all pruned
source positions by a single zero vector, and only a bias-free linear map
keeps zero encodings mapping to zero keys and values.

Cross-attention accepts either a :class:`DenseMemory` (full source, padding
masked additively) or a :class:`~l0seq.sparse.CompactedMemory` (shortened
source with a counted dummy row); both cache their key/value projections
per decoder layer so incremental decoding projects each source once.

Training entry points are :meth:`Model.encode` and :meth:`Model.decode_train`
(teacher forcing); decoding uses :func:`greedy_decode` / :func:`beam_decode`
with per-layer self-attention caches, which the caller runs under
:func:`~l0seq.tensor.no_grad`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .data import BOS, EOS, PAD
from .errors import ConfigError, DataError, ShapeError
from .rng import RngState
from .sparse import CompactedMemory, count_softmax
from .tensor import MASK_NEG, Tensor

__all__ = [
    "ModelConfig",
    "Model",
    "DenseMemory",
    "sinusoid_table",
    "causal_bias",
    "pad_bias",
    "greedy_decode",
    "beam_decode",
    "length_penalty_factor",
    "log_softmax_np",
]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape.  Defaults are the desk-scale configuration; the
    full-scale reference shape (d=512, ffn 2048, heads 8, six layers) is the
    same network scaled up."""

    src_vocab: int
    tgt_vocab: int
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 256
    n_layers: int = 2
    dropout: float = 0.1
    attn_dropout: float = 0.1
    label_smoothing: float = 0.1
    max_len: int = 256
    scale_embeddings: bool = True  # multiply embeddings by sqrt(d) before positions
    use_positions: bool = True
    # encoder layers (1-based) whose outputs pass through a gate layer;
    # () means no gates anywhere and no gate parameters exist
    gate_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if min(self.src_vocab, self.tgt_vocab, self.d_model, self.d_ffn,
               self.n_heads, self.max_len) <= 0 or self.n_layers < 0:
            raise ConfigError("all model dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        for l in self.gate_layers:
            if not 1 <= l <= max(self.n_layers, 1):
                raise ConfigError(f"gate layer {l} outside 1..{self.n_layers}")
        if len(set(self.gate_layers)) != len(self.gate_layers):
            raise ConfigError("duplicate gate layer indices")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["gate_layers"] = list(self.gate_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["gate_layers"] = tuple(d.get("gate_layers", ()))
        return cls(**d)


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    """Fixed positional signal: sin on even channels, cos on odd ones."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    chan = np.arange(0, d, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, chan / d)
    table = np.zeros((max_len, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table


def causal_bias(m: int) -> np.ndarray:
    """(1, 1, m, m) additive bias hiding future target positions."""
    b = np.full((m, m), MASK_NEG, dtype=np.float64)
    b[np.tril_indices(m)] = 0.0
    return b[None, None]


def pad_bias(real_mask: np.ndarray) -> np.ndarray:
    """(B, 1, 1, T) additive bias hiding padding keys; real_mask True = token."""
    return np.where(real_mask, 0.0, MASK_NEG)[:, None, None, :]


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return tz.transpose(tz.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return tz.reshape(tz.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


class DenseMemory:
    """Full-length source memory for cross-attention.

    Holds the (gated or plain) encoder output and the source padding mask;
    key/value projections are computed once per decoder layer and reused
    across decoding steps."""

    def __init__(self, enc: Tensor, real_mask: np.ndarray):
        if enc.ndim != 3 or enc.shape[:2] != real_mask.shape:
            raise ShapeError(
                f"memory {enc.shape} does not match mask {real_mask.shape}")
        self.enc = enc
        self.real_mask = real_mask.astype(bool)
        self._bias = pad_bias(self.real_mask)
        self._kv: dict[int, tuple[Tensor, Tensor]] = {}

    @property
    def length(self) -> int:
        return self.enc.shape[1]

    def kv(self, layer: int, wk: Tensor, wv: Tensor, n_heads: int):
        if layer not in self._kv:
            k = split_heads(tz.matmul(self.enc, wk), n_heads)
            v = split_heads(tz.matmul(self.enc, wv), n_heads)
            self._kv[layer] = (k, v)
        return self._kv[layer]

    def attn_bias(self) -> np.ndarray:
        return self._bias

    def counts(self):
        return None


class Model:
    """Parameter container plus the forward passes.

    Parameters live in a flat name -> Tensor map (``encoder.layer0.self_attn.Wq``
    style paths) so checkpoints and optimizers can treat them uniformly.
    Passing ``rng`` to a forward method enables dropout (training); ``None``
    runs the deterministic evaluation path.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.pos_table = sinusoid_table(config.max_len, config.d_model)
        self.params = params if params is not None else self._init_params(seed)

    # -- parameters ---------------------------------------------------------

    def _init_params(self, seed: int) -> dict[str, Tensor]:
        """Each parameter draws from its own substream keyed by its path, so
        adding or removing unrelated parameters (the gate layers) never
        shifts anyone else's initialization."""
        c = self.config
        params: dict[str, Tensor] = {}

        def xavier(name: str, fan_in: int, fan_out: int):
            r = RngState(seed).derive("init/" + name)
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            params[name] = Tensor(
                r.uniform(size=(fan_in, fan_out)) * 2 * limit - limit,
                requires_grad=True)

        def embed(name: str, vocab: int):
            r = RngState(seed).derive("init/" + name)
            params[name] = Tensor(
                r.normal(size=(vocab, c.d_model)) / math.sqrt(c.d_model),
                requires_grad=True)

        def norm(prefix: str):
            params[prefix + ".gain"] = Tensor(np.ones(c.d_model), requires_grad=True)
            params[prefix + ".bias"] = Tensor(np.zeros(c.d_model), requires_grad=True)

        def attn(prefix: str):
            for w in ("Wq", "Wk", "Wv", "Wo"):
                xavier(f"{prefix}.{w}", c.d_model, c.d_model)

        def ffn(prefix: str):
            xavier(prefix + ".W1", c.d_model, c.d_ffn)
            params[prefix + ".b1"] = Tensor(np.zeros(c.d_ffn), requires_grad=True)
            xavier(prefix + ".W2", c.d_ffn, c.d_model)
            params[prefix + ".b2"] = Tensor(np.zeros(c.d_model), requires_grad=True)

        embed("src_embed.table", c.src_vocab)
        embed("tgt_embed.table", c.tgt_vocab)
        for i in range(c.n_layers):
            attn(f"encoder.layer{i}.self_attn")
            norm(f"encoder.layer{i}.self_attn_norm")
            ffn(f"encoder.layer{i}.ffn")
            norm(f"encoder.layer{i}.ffn_norm")
        for i in range(c.n_layers):
            attn(f"decoder.layer{i}.self_attn")
            norm(f"decoder.layer{i}.self_attn_norm")
            attn(f"decoder.layer{i}.cross_attn")
            norm(f"decoder.layer{i}.cross_attn_norm")
            ffn(f"decoder.layer{i}.ffn")
            norm(f"decoder.layer{i}.ffn_norm")
        xavier("output.W", c.d_model, c.tgt_vocab)
        params["output.b"] = Tensor(np.zeros(c.tgt_vocab), requires_grad=True)
        # one zero-initialized gate predictor per gated encoder layer, so
        # every gate starts at log alpha = 0 (expected gate one half)
        for l in self.config.gate_layers:
            params[f"gates.layer{l}.w"] = Tensor(
                np.zeros(c.d_model), requires_grad=True)
        return params

    def p(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # -- attention core -----------------------------------------------------

    def _attend(self, prefix: str, q_in: Tensor, k: Tensor, v: Tensor,
                bias: np.ndarray | None, counts: np.ndarray | None,
                rng: RngState | None, sink: dict | None, sink_key=None) -> Tensor:
        c = self.config
        q = split_heads(tz.matmul(q_in, self.p(prefix + ".Wq")), c.n_heads)
        scores = tz.mul(tz.matmul(q, tz.transpose(k, (0, 1, 3, 2))),
                        1.0 / math.sqrt(c.d_head))
        if counts is not None:
            weights = count_softmax(scores, counts)
        else:
            if bias is not None:
                allowed = bias > MASK_NEG / 2
                if not allowed.any(axis=-1).all():
                    raise DataError("attention row with every key masked out")
                scores = tz.add(scores, Tensor(bias))
            weights = tz.softmax(scores, axis=-1)
        if sink is not None:
            sink[sink_key] = weights.data.copy()
        if rng is not None and c.attn_dropout > 0:
            weights = tz.dropout(weights, c.attn_dropout, rng)
        out = merge_heads(tz.matmul(weights, v))
        return tz.matmul(out, self.p(prefix + ".Wo"))

    def _self_attention(self, prefix: str, x: Tensor, bias: np.ndarray,
                        rng: RngState | None, sink=None, sink_key=None) -> Tensor:
        c = self.config
        k = split_heads(tz.matmul(x, self.p(prefix + ".Wk")), c.n_heads)
        v = split_heads(tz.matmul(x, self.p(prefix + ".Wv")), c.n_heads)
        return self._attend(prefix, x, k, v, bias, None, rng, sink, sink_key)

    def _cross_attention(self, prefix: str, layer: int, y: Tensor, memory,
                         rng: RngState | None, sink=None) -> Tensor:
        k, v = memory.kv(layer, self.p(prefix + ".Wk"), self.p(prefix + ".Wv"),
                         self.config.n_heads)
        counts = memory.counts()
        bias = None if counts is not None else memory.attn_bias()
        return self._attend(prefix, y, k, v, bias, counts, rng, sink,
                            ("cross", layer))

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        h = tz.relu(tz.add(tz.matmul(x, self.p(prefix + ".W1")), self.p(prefix + ".b1")))
        return tz.add(tz.matmul(h, self.p(prefix + ".W2")), self.p(prefix + ".b2"))

    def _residual(self, norm_prefix: str, x: Tensor, sub: Tensor,
                  rng: RngState | None) -> Tensor:
        if rng is not None and self.config.dropout > 0:
            sub = tz.dropout(sub, self.config.dropout, rng)
        return tz.layer_norm(tz.add(x, sub),
                             self.p(norm_prefix + ".gain"),
                             self.p(norm_prefix + ".bias"))

    # -- encoder ------------------------------------------------------------

    def _embed(self, table_name: str, ids: np.ndarray, offset: int = 0) -> Tensor:
        c = self.config
        t = ids.shape[-1]
        if offset + t > c.max_len:
            raise DataError(f"sequence length {offset + t} exceeds max_len {c.max_len}")
        x = tz.embedding(self.p(table_name), ids)
        if c.scale_embeddings:
            x = tz.mul(x, math.sqrt(c.d_model))
        if c.use_positions:
            x = tz.add(x, Tensor(self.pos_table[offset:offset + t]))
        return x

    def encoder_layer(self, i: int, x: Tensor, bias: np.ndarray,
                      rng: RngState | None, sink=None) -> Tensor:
        a = self._self_attention(f"encoder.layer{i}.self_attn", x, bias, rng,
                                 sink, ("enc_self", i))
        x = self._residual(f"encoder.layer{i}.self_attn_norm", x, a, rng)
        f = self._ffn(f"encoder.layer{i}.ffn", x)
        return self._residual(f"encoder.layer{i}.ffn_norm", x, f, rng)

    def encode(self, src_ids: np.ndarray, rng: RngState | None = None,
               layer_hook=None, sink: dict | None = None) -> tuple[Tensor, np.ndarray]:
        """Run the encoder stack; returns (encodings, real-token mask).

        ``layer_hook(layer_1based, x, real_mask) -> x`` is applied after each
        layer's output, which is how gate layers interpose without the
        encoder knowing about them."""
        real_mask = src_ids != PAD
        bias = pad_bias(real_mask)
        x = self._embed("src_embed.table", src_ids)
        if rng is not None and self.config.dropout > 0:
            x = tz.dropout(x, self.config.dropout, rng)
        for i in range(self.config.n_layers):
            x = self.encoder_layer(i, x, bias, rng, sink)
            if layer_hook is not None:
                x = layer_hook(i + 1, x, real_mask)
        return x, real_mask

    # -- decoder ------------------------------------------------------------

    def decoder_layer(self, i: int, y: Tensor, self_bias: np.ndarray, memory,
                      rng: RngState | None, sink=None) -> Tensor:
        a = self._self_attention(f"decoder.layer{i}.self_attn", y, self_bias, rng)
        y = self._residual(f"decoder.layer{i}.self_attn_norm", y, a, rng)
        x = self._cross_attention(f"decoder.layer{i}.cross_attn", i, y, memory,
                                  rng, sink)
        y = self._residual(f"decoder.layer{i}.cross_attn_norm", y, x, rng)
        f = self._ffn(f"decoder.layer{i}.ffn", y)
        return self._residual(f"decoder.layer{i}.ffn_norm", y, f, rng)

    def output_logits(self, y: Tensor) -> Tensor:
        return tz.add(tz.matmul(y, self.p("output.W")), self.p("output.b"))

    def decode_train(self, tgt_in_ids: np.ndarray, memory,
                     rng: RngState | None = None, sink: dict | None = None) -> Tensor:
        """Teacher-forced decoder pass: (B, M) shifted target ids -> (B, M, V)
        next-token logits under the causal mask."""
        b, m = tgt_in_ids.shape
        if m == 0:
            raise DataError("empty target sequence")
        self_bias = causal_bias(m) + pad_bias(tgt_in_ids != PAD)
        # the first decoder position is always the sequence-start token, so
        # no row of the combined mask can be empty
        y = self._embed("tgt_embed.table", tgt_in_ids)
        if rng is not None and self.config.dropout > 0:
            y = tz.dropout(y, self.config.dropout, rng)
        for i in range(self.config.n_layers):
            y = self.decoder_layer(i, y, self_bias, memory, rng, sink)
        return self.output_logits(y)

    # -- incremental decoding ----------------------------------------------

    def start_decode(self) -> list:
        """Empty per-layer self-attention caches for incremental decoding."""
        return [None] * self.config.n_layers

    def decode_step(self, caches: list, ids_t: np.ndarray, memory,
                    step: int) -> np.ndarray:
        """Advance one target position for a batch; returns (B, V) logits.

        Caches grow by one key/value column per call; the caller owns the
        no-grad context and the argmax/beam logic."""
        c = self.config
        y = self._embed("tgt_embed.table", ids_t[:, None], offset=step)
        for i in range(c.n_layers):
            prefix = f"decoder.layer{i}.self_attn"
            k_new = split_heads(tz.matmul(y, self.p(prefix + ".Wk")), c.n_heads)
            v_new = split_heads(tz.matmul(y, self.p(prefix + ".Wv")), c.n_heads)
            if caches[i] is None:
                k, v = k_new, v_new
            else:
                k = tz.concat([caches[i][0], k_new], axis=2)
                v = tz.concat([caches[i][1], v_new], axis=2)
            caches[i] = (k, v)
            # every cached position is in the past: no causal bias needed
            a = self._attend(prefix, y, k, v, None, None, None, None)
            y = self._residual(f"decoder.layer{i}.self_attn_norm", y, a, None)
            x = self._cross_attention(f"decoder.layer{i}.cross_attn", i, y,
                                      memory, None)
            y = self._residual(f"decoder.layer{i}.cross_attn_norm", y, x, None)
            f = self._ffn(f"decoder.layer{i}.ffn", y)
            y = self._residual(f"decoder.layer{i}.ffn_norm", y, f, None)
        return self.output_logits(y).data[:, 0, :]


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return z - m - np.log(e.sum(axis=-1, keepdims=True))


def length_penalty_factor(length: int, alpha: float) -> float:
    """((5 + length) / 6) ** alpha; alpha 0 disables length normalization."""
    return ((5.0 + length) / 6.0) ** alpha


def greedy_decode(model: Model, memory, batch: int, max_len: int) -> list[list[int]]:
    """Argmax decoding for a batch sharing one memory; returns token ids per
    sentence, without the start symbol, ending at (and excluding) EOS."""
    with tz.no_grad():
        caches = model.start_decode()
        ids = np.full(batch, BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        out: list[list[int]] = [[] for _ in range(batch)]
        for step in range(max_len):
            logits = model.decode_step(caches, ids, memory, step)
            nxt = logits.argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            for b in range(batch):
                if not done[b] and nxt[b] != EOS:
                    out[b].append(int(nxt[b]))
            done |= nxt == EOS
            if done.all():
                break
            ids = nxt
    return out


def beam_decode(model: Model, memory, beam: int, alpha: float,
                max_len: int) -> list[int]:
    """Beam search over a single sentence (memory batch must be 1).

    Live hypotheses are ranked by total log-probability; finished ones
    compete on log-probability divided by the length penalty, with the
    closing symbol counted in the length.  Beam 1 reproduces greedy
    decoding.  Sibling hypotheses share the self-attention caches of their
    common prefix; ``decode_step`` replaces cache entries rather than
    mutating arrays, so sharing is safe under a per-hypothesis list copy.
    """
    if beam < 1:
        raise ConfigError(f"beam must be >= 1, got {beam}")
    with tz.no_grad():
        # (total logp, emitted tokens, caches, next input token)
        live = [(0.0, [], model.start_decode(), BOS)]
        finished: list[tuple[float, list[int]]] = []
        for step in range(max_len):
            candidates = []
            for score, seq, caches, last in live:
                logits = model.decode_step(caches, np.array([last]), memory, step)
                logp = log_softmax_np(logits[0])
                top = np.argsort(-logp, kind="stable")[:beam]
                for tok in top:
                    candidates.append(
                        (score + float(logp[tok]), seq + [int(tok)], caches))
            candidates.sort(key=lambda e: -e[0])
            live = []
            for score, seq, caches in candidates:
                if seq[-1] == EOS:
                    finished.append(
                        (score / length_penalty_factor(len(seq), alpha), seq[:-1]))
                elif len(live) < beam:
                    live.append((score, seq, list(caches), seq[-1]))
                if len(live) >= beam:
                    break
            if not live:
                break
        if not finished:
            finished = [(score / length_penalty_factor(len(seq), alpha), seq)
                        for score, seq, _, _ in live]
        finished.sort(key=lambda e: (-e[0], e[1]))
        return finished[0][1]

"""Vocabularies, parallel corpora, toy tasks, and batching.

Id space: 0 <pad>, 1 <s>, 2 </s>, 3 <unk>, then content tokens in
vocabulary-file order.  Stored sentences carry content ids only; the batch
builder adds the start symbol (decoder input) and end symbol (decoder
target) and pads to rectangles.  Vocabulary files hold one token per line,
reserved symbols first, then content tokens by descending corpus frequency
with lexicographic tie-break.  Id-encoded corpus files hold one sentence
per line as space-separated integers.
"""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import RngState

__all__ = [
    "PAD", "BOS", "EOS", "UNK", "RESERVED",
    "Vocab", "Corpus", "Batch",
    "build_vocab", "load_text_lines", "save_ids", "load_ids",
    "make_toy_corpus", "pad_batch", "make_batches",
]

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ["<pad>", "<s>", "</s>", "<unk>"]


class Vocab:
    """Token <-> id map with four reserved leading symbols."""

    def __init__(self, tokens: list[str]):
        for t in tokens:
            if t in RESERVED:
                raise DataError(f"reserved symbol {t!r} cannot be a content token")
        if len(set(tokens)) != len(tokens):
            raise DataError("duplicate tokens in vocabulary")
        self.tokens = list(RESERVED) + list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: list[str]) -> np.ndarray:
        return np.array([self.index.get(w, UNK) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids
                if int(i) not in (PAD, BOS, EOS)]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[: len(RESERVED)] != RESERVED:
            raise DataError(f"{path}: vocabulary must start with {RESERVED}")
        return cls(lines[len(RESERVED):])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for t in self.tokens:
            h.update(t.encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()


def build_vocab(sentences: list[list[str]], max_size: int | None = None) -> Vocab:
    """Content tokens by descending count, ties broken lexicographically."""
    counts = Counter()
    for s in sentences:
        counts.update(s)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ordered = ordered[:max_size]
    return Vocab([t for t, _ in ordered])


@dataclass
class Corpus:
    """Parallel id sequences (content ids only, no specials, no padding)."""

    src: list[np.ndarray]
    tgt: list[np.ndarray]
    src_vocab: Vocab
    tgt_vocab: Vocab
    tags: list[list[str]] | None = None

    def __post_init__(self):
        if len(self.src) != len(self.tgt):
            raise DataError(
                f"source/target sentence counts differ: {len(self.src)} vs {len(self.tgt)}")
        if self.tags is not None and len(self.tags) != len(self.src):
            raise DataError("tag sequence count does not match corpus")
        for seqs, vocab, side in ((self.src, self.src_vocab, "source"),
                                  (self.tgt, self.tgt_vocab, "target")):
            for i, s in enumerate(seqs):
                if len(s) == 0:
                    raise DataError(f"{side} sentence {i} is empty")
                # <unk> may appear in encoded text; the other specials may not
                if s.min() < UNK or s.max() >= len(vocab):
                    raise DataError(f"{side} sentence {i} has ids outside vocabulary")

    def __len__(self) -> int:
        return len(self.src)

    def subset(self, indices) -> "Corpus":
        idx = list(indices)
        return Corpus([self.src[i] for i in idx], [self.tgt[i] for i in idx],
                      self.src_vocab, self.tgt_vocab,
                      None if self.tags is None else [self.tags[i] for i in idx])


def load_text_lines(path: str | Path) -> list[list[str]]:
    text = Path(path).read_text(encoding="utf-8")
    sentences = [line.split() for line in text.splitlines()]
    if not sentences:
        raise DataError(f"{path}: empty input file")
    return sentences


def save_ids(path: str | Path, seqs: list[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in seqs:
            f.write(" ".join(str(int(i)) for i in s) + "\n")


def load_ids(path: str | Path) -> list[np.ndarray]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        out.append(np.array([int(x) for x in line.split()], dtype=np.int64))
    if not out:
        raise DataError(f"{path}: empty id file")
    return out


# Token frequencies follow a power law so the corpus behaves like text:
# a few tokens dominate and most sentences repeat them.  Uniform draws
# would give every position unique content, which defeats any pruning
# or frequency-based analysis run on top of this data.
ZIPF_EXPONENT = 1.3


def make_toy_corpus(task: str, vocab_size: int, min_len: int, max_len: int,
                    size: int, seed: int) -> Corpus:
    """Synthetic parallel data over decimal-string tokens.

    copy: target equals source; reverse: target is the source reversed;
    sorted: target is the source in ascending token order.  Token "0" is
    the most frequent and frequency decays by rank (see ZIPF_EXPONENT).
    Regeneration with the same arguments reproduces the corpus exactly.
    """
    if task not in ("copy", "reverse", "sorted"):
        raise DataError(f"unknown toy task {task!r}")
    if not (1 <= min_len <= max_len) or size < 1 or vocab_size < 1:
        raise DataError("invalid toy corpus sizes")
    vocab = Vocab([str(i) for i in range(vocab_size)])
    rng = RngState(seed).derive(f"toy/{task}")
    first = len(RESERVED)
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    weights = ranks ** -ZIPF_EXPONENT
    cdf = np.cumsum(weights / weights.sum())
    src, tgt = [], []
    for _ in range(size):
        n = int(rng.integers(min_len, max_len + 1))
        draw = np.searchsorted(cdf, rng.uniform(size=n), side="right")
        s = (first + np.minimum(draw, vocab_size - 1)).astype(np.int64)
        if task == "copy":
            t = s.copy()
        elif task == "reverse":
            t = s[::-1].copy()
        else:
            t = np.sort(s)
        src.append(s)
        tgt.append(t)
    return Corpus(src, tgt, vocab, vocab)


@dataclass
class Batch:
    """Padded rectangle: src (B, N); tgt_in starts with <s>, tgt_out ends
    with </s>; both (B, M) with M = longest target + 1."""

    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    indices: np.ndarray

    @property
    def nsentences(self) -> int:
        return self.src.shape[0]

    @property
    def ntokens(self) -> int:
        return int((self.tgt_out != PAD).sum())


def pad_batch(corpus: Corpus, indices) -> Batch:
    idx = np.asarray(list(indices), dtype=np.int64)
    srcs = [corpus.src[i] for i in idx]
    tgts = [corpus.tgt[i] for i in idx]
    n = max(len(s) for s in srcs)
    m = max(len(t) for t in tgts) + 1
    b = len(idx)
    src = np.full((b, n), PAD, dtype=np.int64)
    tgt_in = np.full((b, m), PAD, dtype=np.int64)
    tgt_out = np.full((b, m), PAD, dtype=np.int64)
    for r, (s, t) in enumerate(zip(srcs, tgts)):
        src[r, : len(s)] = s
        tgt_in[r, 0] = BOS
        tgt_in[r, 1: len(t) + 1] = t
        tgt_out[r, : len(t)] = t
        tgt_out[r, len(t)] = EOS
    return Batch(src, tgt_in, tgt_out, idx)


def make_batches(corpus: Corpus, max_tokens: int, rng: RngState) -> list[np.ndarray]:
    """One epoch's batch index lists: a fresh permutation, filled greedily
    until adding a sentence would push the target-token count (closing
    symbol included) past ``max_tokens``.  Every batch holds at least one
    sentence.  Consumes exactly one permutation from ``rng``, so the
    schedule for epoch k is reproducible by fast-forwarding k draws."""
    order = rng.permutation(len(corpus))
    batches: list[np.ndarray] = []
    current: list[int] = []
    budget = 0
    for i in order:
        need = len(corpus.tgt[i]) + 1
        if current and budget + need > max_tokens:
            batches.append(np.array(current, dtype=np.int64))
            current, budget = [], 0
        current.append(int(i))
        budget += need
    if current:
        batches.append(np.array(current, dtype=np.int64))
    return batches

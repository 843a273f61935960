"""Rule-based sparsity: deterministic binary gates from tags, token
frequency, or position parity, usable anywhere learned gates are.

A pattern never produces an empty memory: if its rule would drop every
token of a sentence, the first token is force-kept.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tz
from .data import PAD, Corpus, Vocab, load_text_lines
from .errors import ConfigError, DataError
from .model import Model, beam_decode, greedy_decode
from .sparse import compact, compact_batch

KINDS = ("tag", "freq", "inv_freq", "group")


class FrequencyTable:
    """Corpus token counts with a deterministic ordering.

    Counts must be positive integers.  Ordering is by count with a
    lexicographic tie-break on the token, so two builds of the same
    corpus always agree on the boundary token.
    """

    def __init__(self, counts: dict[str, int]):
        for tok, c in counts.items():
            if not isinstance(c, int) or c <= 0:
                raise DataError(f"count for {tok!r} must be a positive int, got {c!r}")
        self.counts = dict(counts)
        self.total = sum(self.counts.values())

    @classmethod
    def from_sentences(cls, sentences: list[list[str]]) -> "FrequencyTable":
        agg = Counter()
        for s in sentences:
            agg.update(s)
        return cls(dict(agg))

    def ordered(self, ascending: bool = False) -> list[tuple[str, int]]:
        if ascending:
            return sorted(self.counts.items(), key=lambda kv: (kv[1], kv[0]))
        return sorted(self.counts.items(), key=lambda kv: (-kv[1], kv[0]))

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{c}" for tok, c in self.ordered()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FrequencyTable":
        counts: dict[str, int] = {}
        for ln, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}:{ln}: expected 'token<TAB>count'")
            tok, raw = parts
            try:
                c = int(raw)
            except ValueError:
                raise DataError(f"{path}:{ln}: count {raw!r} is not an integer") from None
            if tok in counts:
                raise DataError(f"{path}:{ln}: duplicate token {tok!r}")
            counts[tok] = c
        return cls(counts)


def build_drop_set_freq(table: FrequencyTable, coverage: float,
                        inverse: bool = False) -> frozenset[str]:
    """Smallest prefix of the frequency ordering whose cumulative corpus
    mass first reaches ``coverage``.

    Descending order drops the most frequent tokens, ascending
    (``inverse``) the rarest.  Overshoot past the target is bounded by
    the mass of the boundary token.
    """
    if not 0.0 < coverage < 1.0:
        raise ConfigError(f"coverage must be in (0, 1), got {coverage}")
    if not table.counts:
        raise DataError("cannot build a drop set from an empty frequency table")
    drop = []
    cum = 0
    for tok, c in table.ordered(ascending=inverse):
        drop.append(tok)
        cum += c
        # integer cumulative so the full prefix hits mass exactly 1.0
        if cum / table.total >= coverage:
            break
    return frozenset(drop)


@dataclass(frozen=True)
class SparsityPattern:
    """A fixed rule mapping a sentence to binary gates.

    kind "tag" drops tokens whose tag is in ``drop_tags``; "freq" and
    "inv_freq" drop tokens in ``drop_tokens`` (built from a frequency
    table at ``coverage_target``); "group" keeps 1-based odd positions.
    """

    kind: str
    drop_tags: frozenset[str] = frozenset()
    coverage_target: float | None = None
    drop_tokens: frozenset[str] = frozenset()
    parity: str = "odd"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"pattern kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "tag" and not self.drop_tags:
            raise ConfigError("tag pattern needs a nonempty drop_tags set")
        if self.kind in ("freq", "inv_freq") and not self.drop_tokens:
            raise ConfigError(f"{self.kind} pattern needs a drop set; "
                              "build one with freq_pattern()")
        if self.kind == "group" and self.parity != "odd":
            raise ConfigError("group pattern keeps odd positions only")

    @property
    def needs_tags(self) -> bool:
        return self.kind == "tag"


def tag_pattern(drop_tags) -> SparsityPattern:
    return SparsityPattern(kind="tag", drop_tags=frozenset(drop_tags))


def freq_pattern(table: FrequencyTable, coverage: float,
                 inverse: bool = False) -> SparsityPattern:
    drop = build_drop_set_freq(table, coverage, inverse=inverse)
    return SparsityPattern(kind="inv_freq" if inverse else "freq",
                           coverage_target=coverage, drop_tokens=drop)


def group_pattern() -> SparsityPattern:
    return SparsityPattern(kind="group")


def mask_sentence(pattern: SparsityPattern, tokens: list[str],
                  tags: list[str] | None = None) -> np.ndarray:
    """Binary gate vector for one sentence, float 0/1, first token
    force-kept if the rule would drop everything."""
    n = len(tokens)
    if n == 0:
        raise DataError("cannot mask an empty sentence")
    if pattern.kind == "group":
        gates = np.zeros(n)
        gates[0::2] = 1.0
    elif pattern.kind == "tag":
        if tags is None:
            raise DataError("tag pattern requires a parallel tag sequence")
        if len(tags) != n:
            raise DataError(f"tag/token length mismatch: {len(tags)} tags "
                            f"for {n} tokens")
        gates = np.array([0.0 if t in pattern.drop_tags else 1.0 for t in tags])
    else:
        gates = np.array([0.0 if t in pattern.drop_tokens else 1.0 for t in tokens])
    if gates.sum() == 0.0:
        gates[0] = 1.0
    return gates


def mask_corpus(pattern: SparsityPattern, corpus: Corpus, vocab: Vocab | None = None,
                tags: list[list[str]] | None = None) -> list[np.ndarray]:
    """Per-sentence gate vectors for a corpus's source side.

    Frequency kinds need the source vocabulary to recover token strings;
    the tag kind needs a tag sequence per sentence.
    """
    if pattern.kind in ("freq", "inv_freq") and vocab is None:
        raise DataError(f"{pattern.kind} pattern needs the source vocabulary")
    if pattern.needs_tags:
        if tags is None:
            raise DataError("tag pattern requires a tag file")
        if len(tags) != len(corpus):
            raise DataError(f"{len(tags)} tag lines for {len(corpus)} sentences")
    masks = []
    for i, ids in enumerate(corpus.src):
        toks = ([vocab.tokens[int(t)] for t in ids] if vocab is not None
                else [""] * len(ids))
        masks.append(mask_sentence(pattern, toks, tags[i] if tags else None))
    return masks


def load_tags(path: str | Path) -> list[list[str]]:
    """Token-aligned tags, one sentence per line, whitespace-separated."""
    return load_text_lines(path)


def pattern_decode(model: Model, pattern: SparsityPattern, corpus: Corpus, *,
                   vocab: Vocab | None = None, tags: list[list[str]] | None = None,
                   max_len: int = 64, beam: int = 1, alpha: float = 0.0,
                   batch_sents: int = 64) -> list[list[int]]:
    """Decode every source sentence through a compacted memory gated by
    the pattern's binary mask.  Returns output ids per sentence."""
    masks = mask_corpus(pattern, corpus, vocab=vocab, tags=tags)
    out: list[list[int]] = []
    with tz.no_grad():
        for lo in range(0, len(corpus), batch_sents):
            idx = range(lo, min(lo + batch_sents, len(corpus)))
            lens = [len(corpus.src[i]) for i in idx]
            width = max(lens)
            src = np.full((len(lens), width), PAD, dtype=np.int64)
            gmat = np.zeros((len(lens), width))
            for r, i in enumerate(idx):
                src[r, : lens[r]] = corpus.src[i]
                gmat[r, : lens[r]] = masks[i]
            enc, real = model.encode(src)
            if beam == 1:
                mem = compact_batch(enc, gmat, real)
                out.extend(greedy_decode(model, mem, len(lens), max_len))
            else:
                for r in range(len(lens)):
                    mem = compact(enc.data[r, : lens[r]], gmat[r, : lens[r]])
                    out.append(beam_decode(model, mem, beam, alpha, max_len))
    return out

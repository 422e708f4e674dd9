"""Synthetic corpora and sequence tasks.

Content symbols are ``0 .. vocab-1`` in every task and corpus. Tasks append
their special symbols after the content range, so a task's model vocabulary
is ``vocab + len(specials)``:

* copy / reverse / sort: ``SEP = vocab``, ``BLANK = vocab + 1``. The input
  is ``m`` content tokens, ``SEP``, then ``m`` blanks; the blanks must be
  filled with the source tokens copied, reversed or sorted.
* masked: ``MASK = vocab``. Corpus sequences have a random subset of
  positions replaced by ``MASK``; those positions are predicted.
"""

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model.schedule import ConfigError
from .numerics import make_rng


class TaskKind(str, Enum):
    COPY = "copy"
    REVERSE = "reverse"
    SORT = "sort"
    MASKED = "masked"


class CorpusSource(str, Enum):
    STRUCTURED = "structured"
    RANDOM = "random"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.COPY
    vocab: int = 16
    seq_len: int = 17
    mask_rate: float = 0.15
    corpus_source: CorpusSource = CorpusSource.STRUCTURED
    corpus_seed: int = 0  # fixes the structured chain's transition table

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        object.__setattr__(self, "corpus_source", CorpusSource(self.corpus_source))
        if self.vocab < 1 or self.seq_len < 1:
            raise ConfigError("task vocab and seq_len must be positive")
        if self.kind is TaskKind.MASKED:
            if not 0.0 < self.mask_rate < 1.0:
                raise ConfigError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        elif self.seq_len < 3:
            raise ConfigError(f"{self.kind.value} needs seq_len >= 3")

    @property
    def model_vocab(self):
        return self.vocab + (1 if self.kind is TaskKind.MASKED else 2)

    @property
    def source_len(self):
        return (self.seq_len - 1) // 2

    def to_dict(self):
        return {"kind": self.kind.value, "vocab": self.vocab, "seq_len": self.seq_len,
                "mask_rate": self.mask_rate, "corpus_source": self.corpus_source.value,
                "corpus_seed": self.corpus_seed}

    @classmethod
    def from_dict(cls, d):
        known = {"kind", "vocab", "seq_len", "mask_rate", "corpus_source", "corpus_seed"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown task keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# corpora
# ---------------------------------------------------------------------------

class MarkovChain2:
    """Order-2 chain with a sparse seeded transition table.

    Each symbol ``b`` owns a small successor set; the next-token weights over
    that set depend on the previous pair ``(a, b)``.
    """

    def __init__(self, vocab, seed, fanout=3):
        if vocab < 8:
            raise ValueError(f"structured corpus needs vocab >= 8, got {vocab}")
        rng = make_rng(seed)
        self.vocab = vocab
        self.succ = np.stack([rng.choice(vocab, size=fanout, replace=False) for _ in range(vocab)])
        self.weights = rng.dirichlet(np.full(fanout, 0.5), size=(vocab, vocab))

    def sample(self, rng, seq_len, count):
        out = np.empty((count, seq_len), dtype=np.int64)
        if count == 0:
            return out
        out[:, 0] = rng.integers(0, self.vocab, size=count)
        if seq_len > 1:
            out[:, 1] = self.succ[out[:, 0], rng.integers(0, self.succ.shape[1], size=count)]
        cum = np.cumsum(self.weights, axis=-1)
        for t in range(2, seq_len):
            a, b = out[:, t - 2], out[:, t - 1]
            u = rng.random(count)[:, None]
            pick = (u > cum[a, b]).sum(axis=1)
            pick = np.minimum(pick, self.succ.shape[1] - 1)
            out[:, t] = self.succ[b, pick]
        return out


def gen_structured_corpus(seed, vocab, seq_len, count, table_seed=None):
    """``count`` sequences from a fixed order-2 Markov chain.

    ``table_seed`` fixes the chain (defaults to ``seed``); ``seed`` drives
    sampling, so held-out sets can share a chain with training data.
    """
    chain = MarkovChain2(vocab, seed if table_seed is None else table_seed)
    return chain.sample(make_rng(seed), seq_len, count)


def gen_random_corpus(seed, vocab, seq_len, count):
    """I.i.d. uniform tokens."""
    return make_rng(seed).integers(0, vocab, size=(count, seq_len), dtype=np.int64)


def bigram_conditional_entropy(corpus, vocab):
    """Empirical H(x_t | x_{t-1}) in bits."""
    corpus = np.asarray(corpus)
    counts = np.zeros((vocab, vocab))
    np.add.at(counts, (corpus[:, :-1].ravel(), corpus[:, 1:].ravel()), 1.0)
    total = counts.sum()
    row = counts.sum(axis=1, keepdims=True)
    nz = counts > 0
    cond = np.where(nz, counts / np.where(row > 0, row, 1.0), 1.0)
    return float(-(counts[nz] * np.log2(cond[nz])).sum() / total)


def write_corpus(path, corpus):
    with open(path, "w") as fh:
        for seq in corpus:
            fh.write(" ".join(str(int(t)) for t in seq) + "\n")


def read_corpus(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([int(t) for t in line.split()])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-integer token") from None
    lengths = {len(r) for r in rows}
    if len(lengths) > 1:
        raise ValueError(f"{path}: sequences have mixed lengths {sorted(lengths)}")
    return np.array(rows, dtype=np.int64).reshape(len(rows), -1)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

class TaskSampler:
    """Draws ``(tokens, targets, weights)`` batches for a task."""

    def __init__(self, spec, seed):
        self.spec = spec
        self.rng = make_rng(seed)
        self.chain = None
        if spec.kind is TaskKind.MASKED and spec.corpus_source is CorpusSource.STRUCTURED:
            self.chain = MarkovChain2(spec.vocab, spec.corpus_seed)

    def _corpus(self, count):
        s = self.spec
        if self.chain is not None:
            return self.chain.sample(self.rng, s.seq_len, count)
        return self.rng.integers(0, s.vocab, size=(count, s.seq_len), dtype=np.int64)

    def batch(self, size):
        s = self.spec
        if s.kind is TaskKind.MASKED:
            return mask_batch(self._corpus(size), s.vocab, s.mask_rate, self.rng)
        m = s.source_len
        src = self.rng.integers(0, s.vocab, size=(size, m), dtype=np.int64)
        if s.kind is TaskKind.COPY:
            out = src
        elif s.kind is TaskKind.REVERSE:
            out = src[:, ::-1]
        else:
            out = np.sort(src, axis=1)
        sep, blank = s.vocab, s.vocab + 1
        tokens = np.full((size, s.seq_len), blank, dtype=np.int64)
        tokens[:, :m] = src
        tokens[:, m] = sep
        targets = np.zeros((size, s.seq_len), dtype=np.int64)
        targets[:, m + 1: 2 * m + 1] = out
        weights = np.zeros((size, s.seq_len))
        weights[:, m + 1: 2 * m + 1] = 1.0
        return tokens, targets, weights


def mask_batch(corpus, mask_id, rate, rng):
    """Replace a random subset of positions (at least one per row) by ``mask_id``."""
    count, n = corpus.shape
    mask = rng.random((count, n)) < rate
    forced = rng.integers(0, n, size=count)
    mask[np.arange(count), forced] = True
    tokens = np.where(mask, mask_id, corpus)
    return tokens, corpus.copy(), mask.astype(np.float64)


def chi2_uniform_pvalue(tokens, vocab):
    """p-value of a chi-square goodness-of-fit test against the uniform law."""
    from scipy.stats import chisquare

    counts = np.bincount(np.asarray(tokens).ravel(), minlength=vocab)
    return float(chisquare(counts).pvalue)


def max_entropy_bits(vocab):
    return math.log2(vocab)

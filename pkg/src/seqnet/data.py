"""Vocabularies, parallel corpora, word-budget batching and toy tasks."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

EOS, BOS, UNK, PAD = 0, 1, 2, 3
RESERVED = ("</s>", "<s>", "<unk>", "<pad>")
DEFAULT_MAX_LEN = 60


class Vocab:
    """Token <-> id map with ids 0-3 reserved for EOS, BOS, UNK and PAD."""

    def __init__(self, tokens):
        tokens = list(tokens)
        self.itos = list(RESERVED) + tokens
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens) -> list[int]:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids, strip_eos=True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_eos and i == EOS:
                break
            out.append(self.itos[i])
        return out

    def save(self, path):
        Path(path).write_text("".join(t + "\n" for t in self.itos[len(RESERVED):]),
                              encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(line for line in text.split("\n") if line)


def build_vocab(sources, size_limit: int | None = None) -> Vocab:
    """Frequency-ordered vocabulary (ties lexicographic) over whitespace tokens.

    ``sources`` are file paths or iterables of lines.  ``size_limit`` caps the
    number of regular (non-reserved) tokens.
    """
    counts: collections.Counter = collections.Counter()
    for src in sources:
        lines = read_lines(src) if isinstance(src, (str, Path)) else src
        for line in lines:
            counts.update(line.split())
    if not counts:
        raise ValueError("empty corpus")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    ranked = [t for t in ranked if t not in RESERVED]
    if size_limit is not None:
        ranked = ranked[:size_limit]
    return Vocab(ranked)


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


@dataclass
class ParallelCorpus:
    pairs: list  # (source ids, target ids); targets without EOS
    src_vocab: Vocab
    trg_vocab: Vocab

    def __len__(self):
        return len(self.pairs)

    def subset(self, indices) -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in indices], self.src_vocab, self.trg_vocab)

    def source_lines(self):
        return [" ".join(self.src_vocab.decode(s, strip_eos=False)) for s, _ in self.pairs]

    def target_lines(self):
        return [" ".join(self.trg_vocab.decode(t, strip_eos=False)) for _, t in self.pairs]

    def write(self, src_path, trg_path):
        Path(src_path).write_text("".join(x + "\n" for x in self.source_lines()), encoding="utf-8")
        Path(trg_path).write_text("".join(x + "\n" for x in self.target_lines()), encoding="utf-8")


def read_parallel(src_path, trg_path, src_vocab: Vocab, trg_vocab: Vocab,
                  max_len: int | None = DEFAULT_MAX_LEN) -> ParallelCorpus:
    """Line-aligned corpus; pairs with an empty side or over ``max_len`` are dropped."""
    src_lines = read_lines(src_path)
    trg_lines = read_lines(trg_path)
    if len(src_lines) != len(trg_lines):
        raise ValueError(f"{src_path} and {trg_path} differ in line count "
                         f"({len(src_lines)} vs {len(trg_lines)})")
    pairs = []
    for s, t in zip(src_lines, trg_lines):
        s_ids, t_ids = src_vocab.encode(s), trg_vocab.encode(t)
        if not s_ids or not t_ids:
            continue
        if max_len is not None and (len(s_ids) > max_len or len(t_ids) > max_len):
            continue
        pairs.append((s_ids, t_ids))
    return ParallelCorpus(pairs, src_vocab, trg_vocab)


@dataclass
class Batch:
    src: np.ndarray  # [B, T_src] padded with PAD
    src_lens: np.ndarray
    trg: np.ndarray | None  # [B, T_trg] incl. the appended EOS, padded with PAD
    trg_lens: np.ndarray | None
    indices: list = field(default_factory=list)

    @property
    def size(self):
        return len(self.src_lens)

    @property
    def n_words(self):
        return int(self.trg_lens.sum()) if self.trg_lens is not None else int(self.src_lens.sum())


def make_batch(sources, targets=None, indices=None) -> Batch:
    """Pad id lists into a batch; EOS is appended to every target."""
    src_lens = np.array([len(s) for s in sources], dtype=np.int64)
    if len(sources) == 0 or src_lens.min() == 0:
        raise ValueError("empty source sentence")
    src = np.full((len(sources), src_lens.max()), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, :len(s)] = s
    trg = trg_lens = None
    if targets is not None:
        trg_lens = np.array([len(t) + 1 for t in targets], dtype=np.int64)
        trg = np.full((len(targets), trg_lens.max()), PAD, dtype=np.int64)
        for i, t in enumerate(targets):
            trg[i, :len(t)] = t
            trg[i, len(t)] = EOS
    return Batch(src, src_lens, trg, trg_lens, list(indices or range(len(sources))))


def pair_length(pair) -> int:
    return max(len(pair[0]), len(pair[1]))


def batch_by_words(corpus: ParallelCorpus, word_budget: int, rng: np.random.Generator,
                   window_batches: int = 100) -> list[Batch]:
    """Shuffle, bucket by target length inside windows, pack under a padded word budget.

    A batch's cost is ``count * max(pair length)``; sentences are added while
    the cost stays within ``word_budget``.
    """
    n = len(corpus)
    if n == 0:
        return []
    lengths = np.array([pair_length(p) for p in corpus.pairs])
    trg_lens = np.array([len(t) for _, t in corpus.pairs])
    if lengths.max() > word_budget:
        i = int(lengths.argmax())
        raise ValueError(f"sentence {i} has {lengths[i]} words, over the budget {word_budget}")
    order = rng.permutation(n)
    per_batch = max(1, word_budget // max(1, int(round(lengths.mean()))))
    window = per_batch * window_batches
    groups: list[list[int]] = []
    for start in range(0, n, window):
        chunk = sorted(order[start:start + window], key=lambda i: (trg_lens[i], lengths[i], i))
        cur: list[int] = []
        cur_max = 0
        for i in chunk:
            new_max = max(cur_max, lengths[i])
            if cur and new_max * (len(cur) + 1) > word_budget:
                groups.append(cur)
                cur, new_max = [], lengths[i]
            cur.append(int(i))
            cur_max = new_max
        if cur:
            groups.append(cur)
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return [
        make_batch([corpus.pairs[i][0] for i in g], [corpus.pairs[i][1] for i in g], g)
        for g in groups
    ]


def batch_by_count(sources, max_seqs: int) -> list[Batch]:
    """Consecutive fixed-size source-only batches (decoding)."""
    out = []
    for start in range(0, len(sources), max_seqs):
        idx = list(range(start, min(start + max_seqs, len(sources))))
        out.append(make_batch([sources[i] for i in idx], indices=idx))
    return out


TOY_KINDS = ("copy", "reverse", "sort")


def toy_vocab(vocab_size: int) -> Vocab:
    """Symbols ``w0 .. w{V-1}`` in id order."""
    return Vocab(f"w{i}" for i in range(vocab_size))


def generate_toy_task(kind: str, vocab_size: int, length_range=(1, 12), n: int = 1000,
                      seed: int = 0) -> ParallelCorpus:
    """Random symbol strings and their copy, reversal or sorted version."""
    if kind not in TOY_KINDS:
        raise ValueError(f"unknown toy task {kind!r}; expected one of {TOY_KINDS}")
    if vocab_size < 5:
        raise ValueError("toy vocabulary needs at least 5 symbols")
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {length_range}")
    vocab = toy_vocab(vocab_size)
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        src = [int(x) + len(RESERVED) for x in rng.integers(0, vocab_size, size=length)]
        if kind == "copy":
            trg = list(src)
        elif kind == "reverse":
            trg = src[::-1]
        else:
            trg = sorted(src)
        pairs.append((src, trg))
    return ParallelCorpus(pairs, vocab, vocab)

"""Corpus BLEU, smoothed sentence BLEU and the expected-BLEU risk objective."""

from __future__ import annotations

import collections
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import EOS, PAD

MAX_ORDER = 4


@dataclass
class NGramStats:
    matched: np.ndarray  # clipped matches per order 1..4
    total: np.ndarray  # candidate n-gram counts per order
    cand_len: int
    ref_len: int

    def __add__(self, other):
        return NGramStats(self.matched + other.matched, self.total + other.total,
                          self.cand_len + other.cand_len, self.ref_len + other.ref_len)


def _tokens(x):
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(tokens, n):
    return collections.Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(candidate, reference) -> NGramStats:
    cand, ref = _tokens(candidate), _tokens(reference)
    matched = np.zeros(MAX_ORDER, dtype=np.int64)
    total = np.zeros(MAX_ORDER, dtype=np.int64)
    for n in range(1, MAX_ORDER + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matched[n - 1] = sum(min(k, r[g]) for g, k in c.items())
        total[n - 1] = max(0, len(cand) - n + 1)
    return NGramStats(matched, total, len(cand), len(ref))


def brevity_penalty(cand_len: int, ref_len: int) -> float:
    if cand_len == 0:
        return 0.0
    return min(1.0, math.exp(1.0 - ref_len / cand_len))


def bleu_from_stats(stats: NGramStats, smooth: bool = False) -> float:
    """BLEU in percent; ``smooth`` applies add-one to orders 2-4."""
    if stats.cand_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(MAX_ORDER):
        m, c = int(stats.matched[n]), int(stats.total[n])
        if smooth and n > 0:
            m, c = m + 1, c + 1
        if m == 0 or c == 0:
            return 0.0
        log_p += math.log(m / c)
    return 100.0 * brevity_penalty(stats.cand_len, stats.ref_len) * math.exp(log_p / MAX_ORDER)


def corpus_bleu(candidates, references) -> float:
    """Counts are summed over the corpus before the precisions are formed."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    total = ngram_stats(candidates[0], references[0])
    for c, r in zip(candidates[1:], references[1:]):
        total = total + ngram_stats(c, r)
    return bleu_from_stats(total)


def sentence_bleu_smoothed(candidate, reference) -> float:
    return bleu_from_stats(ngram_stats(candidate, reference), smooth=True)


@dataclass
class RiskBatch:
    hypotheses: list  # per sentence: list of token sequences
    scores: list  # per sentence: model log-probs, one per hypothesis
    references: list
    beam_size: int = 4


def _risk_terms(scores, bleus):
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty n-best list")
    if not np.isfinite(s).all():
        raise FloatingPointError("non-finite hypothesis scores")
    p = np.exp(s - s.max())
    p /= p.sum()
    bleus = np.asarray(bleus, dtype=np.float64)
    expected = float(p @ bleus)
    return -expected, -p * (bleus - expected)


def expected_risk_loss(rb: RiskBatch):
    """Negative expected sentence BLEU under the renormalized n-best.

    Returns ``(loss, grads)`` with ``grads[b][i] = dloss/dscore`` of
    hypothesis ``i`` of sentence ``b``; the loss is averaged over sentences.
    """
    n = len(rb.hypotheses)
    if n == 0:
        raise ValueError("empty risk batch")
    loss, grads = 0.0, []
    for hyps, scores, ref in zip(rb.hypotheses, rb.scores, rb.references):
        bleus = [sentence_bleu_smoothed(h, ref) for h in hyps]
        l, g = _risk_terms(scores, bleus)
        loss += l / n
        grads.append(g / n)
    return loss, grads


def _strip(tokens):
    return [int(t) for t in tokens if t != EOS]


def risk_gradients(train_graph, decode_graph, batch, params, beam_size: int = 4,
                   insert_reference: bool = False):
    """Expected-risk loss and parameter gradients for one batch.

    The n-best comes from an unnormalized beam search without gradient; each
    hypothesis is then re-scored by a teacher-forced pass so that its score is
    differentiable.  Returns ``(loss, grads, nbest)``.
    """
    from .beam import beam_search
    from .compiler import sequence_scores

    nbest = beam_search(decode_graph, batch, params, beam_size=beam_size, alpha=0.0)
    refs = [list(batch.trg[i, :batch.trg_lens[i]]) for i in range(batch.size)]
    hyps = []
    for i, n in enumerate(nbest):
        if not n:
            raise ValueError(f"empty n-best list for sentence {i}")
        seqs = [list(h.tokens) for h in n]
        if insert_reference and refs[i] not in seqs:
            seqs.append(refs[i])
        hyps.append(seqs)
    rows = [i for i, seqs in enumerate(hyps) for _ in seqs]
    flat = [s for seqs in hyps for s in seqs]
    lens = np.array([len(s) for s in flat], dtype=np.int64)
    targets = np.full((len(flat), lens.max()), PAD, dtype=np.int64)
    for j, s in enumerate(flat):
        targets[j, :len(s)] = s
    expanded = type(batch)(batch.src[rows], batch.src_lens[rows], None, None, list(rows))
    bleus = [[sentence_bleu_smoothed(_strip(h), _strip(refs[i])) for h in seqs]
             for i, seqs in enumerate(hyps)]
    bounds = np.cumsum([0] + [len(s) for s in hyps])

    def risk(scores):
        loss, grad = 0.0, np.zeros_like(scores)
        for b in range(len(hyps)):
            lo, hi = bounds[b], bounds[b + 1]
            l, g = _risk_terms(scores[lo:hi], bleus[b])
            loss += l / len(hyps)
            grad[lo:hi] = g / len(hyps)
        return loss, grad

    with T.Tape() as tape:
        s = sequence_scores(train_graph, expanded, params, targets, lens)
        loss = T.external_loss(s, risk)
    grads = T.backward(tape, loss, params)
    return float(loss.data), grads, nbest


def risk_training_step(train_graph, decode_graph, batch, params, optimizer, beam_size: int = 4,
                       lr: float = 1e-4, clip: float = 5.0, insert_reference: bool = False):
    """One expected-risk update applied in place with Adam; returns ``(params, loss)``."""
    from .trainer import adam_step, clip_global_norm

    loss, grads, _ = risk_gradients(train_graph, decode_graph, batch, params, beam_size,
                                    insert_reference)
    adam_step(params, clip_global_norm(grads, clip), optimizer, lr)
    return params, loss

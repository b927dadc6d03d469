"""Batched beam search with an ended-hypothesis pool and length normalization."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .data import BOS, EOS

DEFAULT_ALPHA = 0.6
DEFAULT_LEN_FACTOR = 1.5
EXTRA_LEN = 10


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple
    log_prob: float
    ended: bool = False  # True once the hypothesis has emitted EOS or was force-ended
    slot: int = -1  # row of its recurrent state inside the sentence's beam block

    def score(self, alpha: float) -> float:
        """``log_prob / len**alpha``; EOS counts towards the length."""
        n = max(1, len(self.tokens))
        return self.log_prob / (n ** alpha) if alpha else self.log_prob


# per sentence: hypotheses sorted by normalized score, best first
NBest = list


@dataclass
class BeamState:
    beam_size: int
    alpha: float
    max_lens: np.ndarray
    live: list  # per sentence: list of live Hypothesis, slot = row offset in the block
    ended: list  # per sentence: ended pool, at most beam_size entries
    finished: np.ndarray
    t: int = 0
    loop_state: object = None

    @property
    def batch_size(self):
        return len(self.live)

    def feedback(self) -> np.ndarray:
        """Last token of every state row; BOS at the first step and for empty slots."""
        k = self.beam_size
        fb = np.full(self.batch_size * k, BOS, dtype=np.int64)
        for b, hyps in enumerate(self.live):
            for h in hyps:
                if h.tokens:
                    fb[b * k + h.slot] = h.tokens[-1]
        return fb


def max_output_lengths(src_lens, factor: float = DEFAULT_LEN_FACTOR, extra: int = EXTRA_LEN):
    return np.array([math.ceil(factor * int(n)) + extra for n in src_lens], dtype=np.int64)


def initial_beam_state(batch_size: int, beam_size: int, max_lens, alpha=DEFAULT_ALPHA,
                       loop_state=None) -> BeamState:
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    return BeamState(
        beam_size=beam_size, alpha=alpha, max_lens=np.asarray(max_lens, dtype=np.int64),
        live=[[Hypothesis((), 0.0, slot=0)] for _ in range(batch_size)],
        ended=[[] for _ in range(batch_size)],
        finished=np.zeros(batch_size, dtype=bool), loop_state=loop_state,
    )


def _add_ended(pool: list, hyp: Hypothesis, capacity: int, alpha: float):
    pool.append(hyp)
    # stable sort keeps earlier (better raw-ranked) entries first among equal scores
    pool.sort(key=lambda h: -h.score(alpha))
    del pool[capacity:]


def expand_and_prune(state: BeamState, log_probs, reorder=None) -> BeamState:
    """One search step over ``log_probs`` of shape ``[batch * beam, V]``.

    Candidates are ranked by accumulated log probability with ties broken by
    ``(parent slot, token id)``.  ``reorder(loop_state, rows)`` gathers the
    recurrent state rows of the surviving parents.
    """
    k = state.beam_size
    lp = np.asarray(log_probs, dtype=np.float64)
    n_rows, vocab = lp.shape
    if n_rows != state.batch_size * k:
        raise ValueError(f"expected {state.batch_size * k} rows of log probs, got {n_rows}")
    t = state.t + 1
    rows = np.arange(n_rows)  # default: empty slots keep their own row
    live_out, ended_out = [], [list(p) for p in state.ended]
    finished = state.finished.copy()
    for b in range(state.batch_size):
        block = b * k
        parents = state.live[b]
        if finished[b] or not parents:
            live_out.append([])
            finished[b] = True
            continue
        scores = np.full(k * vocab, -np.inf)
        for h in parents:
            scores[h.slot * vocab:(h.slot + 1) * vocab] = h.log_prob + lp[block + h.slot]
        by_slot = {h.slot: h for h in parents}
        order = np.argsort(-scores, kind="stable")
        new_live: list[Hypothesis] = []
        for idx in order:
            sc = scores[idx]
            if not np.isfinite(sc):
                break
            parent = by_slot[int(idx) // vocab]
            tok = int(idx) % vocab
            if tok == EOS:
                _add_ended(ended_out[b], Hypothesis(parent.tokens + (EOS,), float(sc), True),
                           k, state.alpha)
                continue
            slot = len(new_live)
            new_live.append(Hypothesis(parent.tokens + (tok,), float(sc), slot=slot))
            rows[block + slot] = block + parent.slot
            if len(new_live) == k:
                break
        if t >= state.max_lens[b]:
            for h in new_live:
                _add_ended(ended_out[b], replace(h, ended=True, slot=-1), k, state.alpha)
            new_live = []
        pool = ended_out[b]
        if not new_live:
            finished[b] = True
        elif len(pool) == k:
            best_live = max(h.score(state.alpha) for h in new_live)
            if best_live <= pool[-1].score(state.alpha):
                finished[b] = True
        if finished[b]:
            new_live = []
        live_out.append(new_live)
    loop_state = state.loop_state
    if reorder is not None and loop_state is not None:
        loop_state = reorder(loop_state, rows)
    return BeamState(k, state.alpha, state.max_lens, live_out, ended_out, finished, t, loop_state)


def search(model, beam_size: int, max_lens, alpha: float = DEFAULT_ALPHA) -> NBest:
    """Beam search against a step model.

    ``model`` provides ``batch_size``, ``initial_state(beam)``,
    ``step(state, feedback) -> (log_probs, state)`` and ``reorder(state, rows)``.
    """
    state = initial_beam_state(model.batch_size, beam_size, max_lens, alpha,
                               model.initial_state(beam_size))
    while not state.finished.all():
        log_probs, loop_state = model.step(state.loop_state, state.feedback())
        if not np.isfinite(log_probs).any(axis=-1).all():
            raise FloatingPointError(f"non-finite scores at decoder step {state.t}")
        state.loop_state = loop_state
        state = expand_and_prune(state, log_probs, model.reorder)
    return [sorted(pool, key=lambda h: -h.score(alpha)) for pool in state.ended]


def beam_search(graph, src_batch, params, beam_size: int = 12,
                max_len_factor: float = DEFAULT_LEN_FACTOR, alpha: float = DEFAULT_ALPHA,
                max_len: int | None = None) -> NBest:
    """Decode a source batch with a compiled Decode-mode graph.

    The per-sentence length limit is ``ceil(max_len_factor * src_len) + 10``
    unless ``max_len`` fixes it.
    """
    from .compiler import ExecMode, GraphStepModel

    if graph.mode is not ExecMode.DECODE:
        raise ValueError("beam_search needs a Decode-mode graph")
    if beam_size < 1:
        raise ValueError(f"beam_size must be >= 1, got {beam_size}")
    src = np.asarray(src_batch.src)
    src_lens = np.asarray(src_batch.src_lens)
    if src.size == 0 or (src_lens < 1).any():
        raise ValueError("empty source sentence")
    if max_len is None:
        lens = max_output_lengths(src_lens, max_len_factor)
    else:
        lens = np.full(len(src_lens), max_len, dtype=np.int64)
    return search(GraphStepModel(graph, params, src, src_lens), beam_size, lens, alpha)


def greedy_search(model, max_lens) -> list:
    """Argmax chain until EOS or the length limit."""
    state = model.initial_state(1)
    n = model.batch_size
    out = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    fb = np.full(n, BOS, dtype=np.int64)
    t = 0
    while not done.all():
        lp, state = model.step(state, fb)
        fb = np.asarray(lp).argmax(axis=-1)
        t += 1
        for i in np.flatnonzero(~done):
            out[i].append(int(fb[i]))
            if fb[i] == EOS or t >= max_lens[i]:
                done[i] = True
    return out


def decide(nbest: NBest, references=None, alpha: float | None = None):
    """Rank-1 token ids per sentence (EOS stripped).

    With ``references`` (token lists or strings per sentence) the corpus BLEU
    of those outputs is returned as well.
    """
    best = []
    for i, hyps in enumerate(nbest):
        if not hyps:
            raise ValueError(f"empty n-best list for sentence {i}")
        top = hyps[0] if alpha is None else max(hyps, key=lambda h: h.score(alpha))
        best.append([x for x in top.tokens if x != EOS])
    if references is None:
        return best
    from .bleu import corpus_bleu

    return best, corpus_bleu(best, references)


@dataclass
class TableModel:
    """Step model whose next-token distribution is a lookup on the prefix.

    ``fn(prefix tuple, sentence index) -> log probs [V]``.  Handy for checking
    the search against enumeration.
    """

    fn: object
    batch_size: int
    vocab: int

    def initial_state(self, beam):
        return 0, [() for _ in range(self.batch_size * beam)]

    def step(self, state, feedback):
        t, prefixes = state
        beam = len(prefixes) // self.batch_size
        if t:
            prefixes = [p + (int(f),) for p, f in zip(prefixes, feedback)]
        lp = np.stack([np.asarray(self.fn(p, i // beam), dtype=np.float64)
                       for i, p in enumerate(prefixes)])
        return lp, (t + 1, prefixes)

    def reorder(self, state, rows):
        t, prefixes = state
        return t, [prefixes[r] for r in rows]


def enumerate_sequences(fn, vocab: int, max_len: int, sentence: int = 0):
    """All complete outputs with their log probability (exhaustive oracle)."""
    out = []

    def rec(prefix, lp):
        if prefix and (prefix[-1] == EOS or len(prefix) == max_len):
            out.append((prefix, lp))
            return
        dist = np.asarray(fn(prefix, sentence), dtype=np.float64)
        for v in range(vocab):
            rec(prefix + (v,), lp + float(dist[v]))

    rec((), 0.0)
    return out


def translate(graph, params, sources, beam_size: int = 12, alpha: float = DEFAULT_ALPHA,
              batch_seqs: int = 50, max_len_factor: float = DEFAULT_LEN_FACTOR) -> list:
    """Rank-1 token ids (EOS stripped) for a list of source id sequences."""
    from .data import batch_by_count

    out = []
    for batch in batch_by_count(list(sources), batch_seqs):
        out.extend(decide(beam_search(graph, batch, params, beam_size, max_len_factor, alpha)))
    return out

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnet.beam import (
    BeamState, Hypothesis, TableModel, beam_search, decide, enumerate_sequences,
    expand_and_prune, greedy_search, initial_beam_state, max_output_lengths, search, translate,
)
from seqnet.compiler import DataDims, ExecMode, GraphStepModel, compile_graph, init_params
from seqnet.configs import toy_config
from seqnet.data import EOS, make_batch

A, B = 1, 2  # toy vocabulary {EOS=0, A, B}


def fixed_model(prefix, i):
    p = (0.1, 0.6, 0.3) if not prefix else (0.3, 0.2, 0.5)
    return np.log(p)


def random_table(seed, vocab, concentration=0.5):
    """Prefix -> log-distribution, fixed per (seed, sentence, prefix)."""

    def fn(prefix, i):
        r = np.random.default_rng([seed, i, len(prefix)] + list(prefix))
        return np.log(r.dirichlet(np.full(vocab, concentration)))

    return fn


def run(fn, vocab, beam, max_len, alpha=0.0, batch=1):
    return search(TableModel(fn, batch, vocab), beam, np.full(batch, max_len), alpha)


# -- examples ----------------------------------------------------------------

def test_hand_example_beam_two():
    nbest = run(fixed_model, 3, beam=2, max_len=2)[0]
    assert [h.tokens for h in nbest] == [(A, B), (A, EOS)]
    assert math.exp(nbest[0].log_prob) == pytest.approx(0.30)
    assert math.exp(nbest[1].log_prob) == pytest.approx(0.18)


def test_hand_example_against_enumeration():
    seqs = sorted(enumerate_sequences(fixed_model, 3, 2), key=lambda x: -x[1])
    assert seqs[0][0] == (A, B) and seqs[1][0] == (A, EOS)


def test_forced_end_has_no_eos():
    nbest = run(fixed_model, 3, beam=2, max_len=2)[0]
    assert nbest[0].ended and nbest[0].tokens[-1] != EOS


def test_beam_one_is_greedy():
    for seed in range(30):
        fn = random_table(seed, 5)
        model = TableModel(fn, 3, 5)
        lens = np.array([4, 6, 3])
        beam = [list(n[0].tokens) for n in search(model, 1, lens, alpha=0.6)]
        assert beam == greedy_search(model, lens)


def test_duplicate_sentences_identical_nbest():
    fn = random_table(3, 5)

    def same_for_all(prefix, i):
        return fn(prefix, 0)

    nb = run(same_for_all, 5, beam=3, max_len=5, alpha=0.6, batch=2)
    assert nb[0] == nb[1]


def test_errors():
    with pytest.raises(ValueError):
        initial_beam_state(1, 0, [3])
    with pytest.raises(ValueError):
        decide([[]])


def test_max_output_lengths():
    assert max_output_lengths([1, 4, 7]).tolist() == [12, 16, 21]


# -- expand_and_prune --------------------------------------------------------

def test_single_parent_is_topk_of_row():
    state = initial_beam_state(1, 3, [10])
    lp = np.log(np.array([[0.05, 0.4, 0.1, 0.3, 0.15]] + [[0.2] * 5] * 2))
    out = expand_and_prune(state, lp)
    assert [h.tokens for h in out.live[0]] == [(1,), (3,), (4,)]


def test_ties_break_by_parent_then_token():
    state = BeamState(2, 0.0, np.array([10]),
                      [[Hypothesis((5,), -1.0, slot=0), Hypothesis((6,), -1.0, slot=1)]],
                      [[]], np.zeros(1, bool), t=1)
    lp = np.full((2, 4), np.log(0.25))
    out = expand_and_prune(state, lp)
    assert [h.tokens for h in out.live[0]] == [(5, 1), (5, 2)]
    assert out.ended[0][0].tokens == (5, EOS)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_expand_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    parents = [Hypothesis((7,), float(-rng.random()), slot=0),
               Hypothesis((8,), float(-rng.random()), slot=1)]
    state = BeamState(2, 0.0, np.array([10]), [parents], [[]], np.zeros(1, bool), t=1)
    lp = np.log(rng.dirichlet(np.ones(4), size=2))
    out = expand_and_prune(state, lp, reorder=lambda s, rows: rows)
    cands = sorted(((parents[p].log_prob + lp[p, v], p, v) for p in range(2) for v in range(4)),
                   key=lambda c: -c[0])
    live, ended = [], []
    for c in cands:  # the scan stops once the beam is full
        (ended if c[2] == EOS else live).append(c)
        if len(live) == 2:
            break
    assert [h.log_prob for h in out.ended[0]] == pytest.approx([c[0] for c in ended])
    if len(ended) == 2 and live[0][0] <= ended[-1][0]:
        # nothing live can still beat a full ended pool: the sentence stops
        assert out.live[0] == [] and out.finished[0]
        return
    assert [h.tokens for h in out.live[0]] == [(parents[p].tokens[0], v) for _, p, v in live]
    assert [h.log_prob for h in out.live[0]] == pytest.approx([c[0] for c in live])


def test_reorder_receives_parent_rows():
    seen = {}
    state = initial_beam_state(1, 2, [10], loop_state="s")
    state.live[0] = [Hypothesis((5,), -2.0, slot=0), Hypothesis((6,), -0.1, slot=1)]
    lp = np.log(np.array([[0.1, 0.3, 0.6], [0.1, 0.3, 0.6]]))

    def reorder(s, rows):
        seen["rows"] = list(rows)
        return s

    expand_and_prune(state, lp, reorder)
    assert seen["rows"] == [1, 1]  # both survivors descend from slot 1


# -- decide ----------------------------------------------------------------

def test_decide_single_and_best():
    h = Hypothesis((4, 5, EOS), -1.0, True)
    assert decide([[h]]) == [[4, 5]]
    hyps = [Hypothesis((4, EOS), -1.0, True), Hypothesis((4, 5, 6, 7, EOS), -1.5, True)]
    # alpha 0.6 prefers the longer hypothesis: -1.5 / 5**0.6 > -1 / 2**0.6
    assert decide([hyps], alpha=0.6) == [[4, 5, 6, 7]]
    assert decide([hyps], alpha=0.0) == [[4]]


def test_decide_reports_bleu_against_references():
    nbest = run(random_table(4, 6, 5.0), 6, beam=3, max_len=8, alpha=0.6, batch=4)
    best = decide(nbest)
    cands, bleu = decide(nbest, [list(b) + [9, 9, 9, 9] for b in best])
    assert cands == best and bleu < 100
    long_nbest = [[Hypothesis(tuple(range(4, 10)) + (EOS,), -1.0, True)]]
    _, bleu = decide(long_nbest, [list(range(4, 10))])
    assert bleu == pytest.approx(100.0)


# -- properties ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_large_beam_equals_enumeration(seed):
    vocab, max_len = 4, 3
    fn = random_table(seed, vocab)
    nbest = run(fn, vocab, beam=64, max_len=max_len)[0]
    oracle = sorted(enumerate_sequences(fn, vocab, max_len), key=lambda x: -x[1])[:64]
    assert [h.tokens for h in nbest] == [s for s, _ in oracle]
    np.testing.assert_allclose([h.log_prob for h in nbest], [lp for _, lp in oracle])


@settings(max_examples=50, deadline=None, derandomize=True)
@given(st.integers(0, 2**31 - 1), st.integers(3, 5), st.integers(2, 4))
def test_enumeration_oracle_small_models(seed, vocab, max_len):
    fn = random_table(seed, vocab)
    beam = vocab ** max_len
    nbest = run(fn, vocab, beam=beam, max_len=max_len, alpha=0.6)[0]
    seqs = enumerate_sequences(fn, vocab, max_len)
    oracle = sorted(seqs, key=lambda x: -x[1] / len(x[0]) ** 0.6)[:beam]
    assert [h.tokens for h in nbest] == [s for s, _ in oracle]


@settings(max_examples=80, deadline=None, derandomize=True)
@given(st.integers(0, 2**31 - 1))
def test_best_score_monotone_in_beam_size(seed):
    fn = random_table(seed, 4)
    best = [run(fn, 4, beam=k, max_len=4)[0][0].log_prob for k in (1, 2, 3, 5, 8)]
    assert all(b >= a - 1e-12 for a, b in zip(best, best[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.floats(0.0, 1.0))
def test_outputs_end_in_eos_or_hit_max_len(seed, beam, alpha):
    fn = random_table(seed, 5)
    lens = np.array([3, 5])
    for b, hyps in enumerate(search(TableModel(fn, 2, 5), beam, lens, alpha)):
        assert 0 < len(hyps) <= beam
        for h in hyps:
            assert h.tokens[-1] == EOS or len(h.tokens) == lens[b]
            assert EOS not in h.tokens[:-1]
            assert np.isfinite(h.log_prob)
        scores = [h.score(alpha) for h in hyps]
        assert scores == sorted(scores, reverse=True)


# -- compiled graph -----------------------------------------------------------

@pytest.fixture(scope="module")
def decode_setup():
    dims = DataDims(12, 12)
    cfg = toy_config(hidden=6, embed=4)
    g = compile_graph(cfg, ExecMode.DECODE, dims)
    params = init_params(g, 5)
    rng = np.random.default_rng(0)
    sources = [list(rng.integers(4, 12, size=rng.integers(1, 6))) for _ in range(5)]
    return g, params, sources


def test_graph_batched_equals_single(decode_setup):
    g, params, sources = decode_setup
    batched = beam_search(g, make_batch(sources), params, beam_size=3)
    for i, s in enumerate(sources):
        single = beam_search(g, make_batch([s]), params, beam_size=3)[0]
        assert [h.tokens for h in single] == [h.tokens for h in batched[i]]
        np.testing.assert_allclose([h.log_prob for h in single],
                                   [h.log_prob for h in batched[i]], atol=1e-9)


def test_graph_beam_one_is_greedy(decode_setup):
    g, params, sources = decode_setup
    batch = make_batch(sources)
    lens = max_output_lengths(batch.src_lens)
    greedy = greedy_search(GraphStepModel(g, params, batch.src, batch.src_lens), lens)
    beam = [list(n[0].tokens) for n in beam_search(g, batch, params, beam_size=1)]
    assert beam == greedy


def test_graph_duplicate_sentence(decode_setup):
    g, params, sources = decode_setup
    nb = beam_search(g, make_batch([sources[0], sources[0]]), params, beam_size=4)
    assert [h.tokens for h in nb[0]] == [h.tokens for h in nb[1]]


def test_graph_errors(decode_setup):
    g, params, sources = decode_setup
    with pytest.raises(ValueError):
        beam_search(g, make_batch(sources), params, beam_size=0)
    g_train = compile_graph(g.cfg, ExecMode.TRAIN, g.dims)
    with pytest.raises(ValueError):
        beam_search(g_train, make_batch(sources), params)


def test_translate_strips_eos(decode_setup):
    g, params, sources = decode_setup
    outs = translate(g, params, sources, beam_size=2, batch_seqs=2)
    assert len(outs) == len(sources)
    assert all(EOS not in o for o in outs)

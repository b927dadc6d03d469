import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnet.data import (
    EOS, PAD, RESERVED, UNK, ParallelCorpus, Vocab, batch_by_count, batch_by_words, build_vocab,
    generate_toy_task, make_batch, read_parallel, toy_vocab,
)


# -- vocabulary --------------------------------------------------------------

def test_vocab_frequency_order():
    v = build_vocab([["a a b"]], size_limit=10)
    assert v.stoi["a"] == 4 and v.stoi["b"] == 5
    assert len(v) == 6


def test_vocab_ties_are_lexicographic():
    v = build_vocab([["z y x y z"]])
    assert v.itos[4:] == ["y", "z", "x"]


def test_vocab_reserved_and_limit():
    v = build_vocab([["a a a b b c"]], size_limit=2)
    assert len(v) >= 4 and v.itos[:4] == list(RESERVED)
    assert v.encode("c") == [UNK]
    assert v.encode("a b") == [4, 5]


def test_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([[]])
    with pytest.raises(ValueError):
        build_vocab([["   "]])


def test_vocab_save_load(tmp_path):
    v = build_vocab([["one two two three three three"]])
    v.save(tmp_path / "v.txt")
    lines = (tmp_path / "v.txt").read_text().splitlines()
    assert lines[0] == "three"  # line number = id - 4
    assert Vocab.load(tmp_path / "v.txt") == v


@given(st.lists(st.sampled_from("ab cd ef gh ij".split()), min_size=1, max_size=20))
def test_encode_decode_identity(tokens):
    v = build_vocab([[" ".join(tokens)]])
    assert v.decode(v.encode(tokens)) == tokens


def test_decode_stops_at_eos():
    v = toy_vocab(5)
    assert v.decode([4, 5, EOS, 6]) == ["w0", "w1"]
    assert v.decode([4, EOS], strip_eos=False) == ["w0", "</s>"]


# -- corpus files --------------------------------------------------------------

def test_read_parallel_filters(tmp_path):
    (tmp_path / "s").write_text("a b\n\nc\n" + "a " * 70 + "\n")
    (tmp_path / "t").write_text("b a\nx\n\nb\n")
    v = build_vocab([tmp_path / "s", tmp_path / "t"])
    c = read_parallel(tmp_path / "s", tmp_path / "t", v, v)
    assert len(c) == 1 and c.pairs[0] == (v.encode("a b"), v.encode("b a"))
    assert len(read_parallel(tmp_path / "s", tmp_path / "t", v, v, max_len=None)) == 2


def test_read_parallel_line_mismatch(tmp_path):
    (tmp_path / "s").write_text("a\nb\n")
    (tmp_path / "t").write_text("a\n")
    v = build_vocab([tmp_path / "s"])
    with pytest.raises(ValueError, match="line count"):
        read_parallel(tmp_path / "s", tmp_path / "t", v, v)


# -- batches -----------------------------------------------------------------

def test_make_batch_pads_and_appends_eos():
    b = make_batch([[4, 5, 6], [7]], [[8], [9, 10]])
    assert b.src.tolist() == [[4, 5, 6], [7, PAD, PAD]]
    assert b.trg.tolist() == [[8, EOS, PAD], [9, 10, EOS]]
    assert b.trg_lens.tolist() == [2, 3] and b.n_words == 5


def test_make_batch_rejects_empty_source():
    with pytest.raises(ValueError):
        make_batch([[4], []])


def _corpus(lengths, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [(list(rng.integers(4, 9, n)), list(rng.integers(4, 9, n))) for n in lengths]
    v = toy_vocab(5)
    return ParallelCorpus(pairs, v, v)


def test_budget_of_one_sentence_gives_singletons():
    c = _corpus([5] * 12)
    batches = batch_by_words(c, 5, np.random.default_rng(0))
    assert len(batches) == 12 and all(b.size == 1 for b in batches)


def test_equal_lengths_pack_in_threes():
    c = _corpus([4] * 12)
    batches = batch_by_words(c, 12, np.random.default_rng(1))
    assert [b.size for b in batches] == [3] * 4


def test_sentence_over_budget():
    with pytest.raises(ValueError, match="budget"):
        batch_by_words(_corpus([3, 9]), 8, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 15), min_size=1, max_size=80), st.integers(15, 60),
       st.integers(0, 1000))
def test_batches_partition_the_corpus(lengths, budget, seed):
    c = _corpus(lengths, seed)
    batches = batch_by_words(c, budget, np.random.default_rng(seed))
    idx = [i for b in batches for i in b.indices]
    assert sorted(idx) == list(range(len(c)))
    for b in batches:
        assert b.size * max(max(len(c.pairs[i][0]), len(c.pairs[i][1])) for i in b.indices) <= budget
        for row, i in enumerate(b.indices):
            s, t = c.pairs[i]
            assert b.src[row, :len(s)].tolist() == s and (b.src[row, len(s):] == PAD).all()
            assert b.trg[row, :len(t)].tolist() == t


def test_batching_deterministic_per_seed():
    c = _corpus(list(range(1, 13)) * 5)
    a = [b.indices for b in batch_by_words(c, 30, np.random.default_rng(7))]
    b = [b.indices for b in batch_by_words(c, 30, np.random.default_rng(7))]
    assert a == b


def test_batch_by_count():
    bs = batch_by_count([[4]] * 5, 2)
    assert [b.indices for b in bs] == [[0, 1], [2, 3], [4]]
    assert bs[0].trg is None and bs[0].n_words == 2


# -- toy tasks ---------------------------------------------------------------

def test_reverse_example():
    c = generate_toy_task("reverse", 5, n=50, seed=3)
    for s, t in c.pairs:
        assert t == s[::-1]
    v = toy_vocab(5)
    assert v.encode("w2 w1 w0")[::-1] == v.encode("w0 w1 w2")


def test_copy_and_sort():
    for s, t in generate_toy_task("copy", 6, n=50).pairs:
        assert s == t
    for s, t in generate_toy_task("sort", 6, n=50).pairs:
        assert all(a <= b for a, b in zip(t, t[1:]))
        assert collections.Counter(s) == collections.Counter(t)


def test_toy_lengths_and_determinism():
    a = generate_toy_task("reverse", 20, (1, 12), n=500, seed=1)
    b = generate_toy_task("reverse", 20, (1, 12), n=500, seed=1)
    assert a.pairs == b.pairs
    lens = {len(s) for s, _ in a.pairs}
    assert min(lens) == 1 and max(lens) == 12
    assert all(4 <= x < 24 for s, _ in a.pairs for x in s)
    assert generate_toy_task("reverse", 20, n=50, seed=2).pairs != a.pairs[:50]


def test_toy_errors():
    with pytest.raises(ValueError):
        generate_toy_task("shuffle", 10)
    with pytest.raises(ValueError):
        generate_toy_task("copy", 4)
    with pytest.raises(ValueError):
        generate_toy_task("copy", 10, (0, 3))


def test_corpus_write_round_trip(tmp_path):
    c = generate_toy_task("sort", 7, n=20, seed=4)
    c.write(tmp_path / "s", tmp_path / "t")
    back = read_parallel(tmp_path / "s", tmp_path / "t", c.src_vocab, c.trg_vocab)
    assert back.pairs == c.pairs

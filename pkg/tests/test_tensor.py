import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqnet import tensor as T
from seqnet.tensor import BATCH, FEATURE, TIME, Tensor

pytestmark = pytest.mark.usefixtures("f64")


# -- forward examples -------------------------------------------------------

def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_dot_product():
    assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(T.ShapeError) as e:
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_elementwise_values():
    assert T.elementwise("sigmoid", Tensor(0.0)).data == 0.5
    assert T.elementwise("tanh", Tensor(0.0)).data == 0.0
    np.testing.assert_array_equal(T.elementwise("add", Tensor([1.0, 2.0]), Tensor([10.0])).data,
                                  [11, 12])


def test_log_of_nonpositive_propagates_nan():
    with np.errstate(all="ignore"):
        out = T.elementwise("log", Tensor([-1.0, 1.0]))
    assert np.isnan(out.data[0]) and out.data[1] == 0.0


def test_elementwise_incompatible_shapes():
    with pytest.raises(ValueError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_reduce_sum_respects_seq_lens():
    x = Tensor(np.ones((1, 5)), (BATCH, TIME), seq_lens=[3])
    assert T.reduce_sum(x, TIME).data.tolist() == [3.0]
    x = Tensor(np.ones((2, 4)), (BATCH, TIME), seq_lens=[2, 4])
    assert T.reduce_sum(x, TIME).data.tolist() == [2.0, 4.0]
    assert T.reduce_sum(Tensor([1.0, 2.0, 3.0], (FEATURE,)), FEATURE).data == 6.0


def test_reduce_sum_unknown_axis():
    with pytest.raises(T.ShapeError):
        T.reduce_sum(Tensor(np.ones(3), (FEATURE,)), TIME)


def test_gather_rows_lookup_and_scatter():
    table = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    np.testing.assert_array_equal(T.gather_rows(table, [1, 0]).data, [[3, 4], [1, 2]])
    np.testing.assert_array_equal(T.gather_rows(table, [0, 0, 0]).data, [[1, 2]] * 3)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.gather_rows(table, [0, 0]))
    (g,) = T.backward(tape, loss, [table])
    np.testing.assert_array_equal(g, [[2, 2], [0, 0]])


def test_gather_rows_out_of_range_names_layer():
    with pytest.raises(IndexError, match="src"):
        T.gather_rows(Tensor(np.ones((3, 2))), [0, 3], layer="src")


def test_dropout_modes():
    x = Tensor(np.arange(6.0))
    rng = np.random.default_rng(0)
    assert T.dropout(x, 0.0, True, rng) is x
    assert T.dropout(x, 0.3, False, rng) is x
    with pytest.raises(ValueError):
        T.dropout(x, 1.0, True, rng)


def test_dropout_survivor_fraction():
    x = Tensor(np.ones(10_000))
    out = T.dropout(x, 0.5, True, T.rng_for(7, "dropout")).data
    frac = np.mean(out != 0)
    assert abs(frac - 0.5) < 0.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_backward_simple_cases():
    p = Tensor([1.0, 2.0], requires_grad=True)
    q = Tensor([5.0], requires_grad=True)
    with T.Tape() as tape:
        loss = T.reduce_sum(T.mul(p, p))
    g_p, g_q = T.backward(tape, loss, [p, q])
    np.testing.assert_array_equal(g_p, [2, 4])
    np.testing.assert_array_equal(g_q, [0])  # unreachable
    with T.Tape() as tape:
        loss = T.reduce_sum(p)
    np.testing.assert_array_equal(T.backward(tape, loss, [p])[0], [1, 1])


def test_backward_rejects_non_scalar():
    p = Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = T.mul(p, p)
    with pytest.raises(T.ShapeError):
        T.backward(tape, y, [p])


def test_fan_out_accumulates():
    p = Tensor(3.0, requires_grad=True)
    with T.Tape() as tape:
        loss = T.add(T.mul(p, p), p)
    assert T.backward(tape, loss, [p])[0] == 7.0


def test_tape_replay_reproduces_forward(rng):
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 3)))
    with T.Tape() as tape:
        y = T.tanh(T.matmul(x, w))
        loss = T.reduce_sum(T.mul(y, y))
    values = tape.replay()
    np.testing.assert_array_equal(values[id(y)], y.data)
    np.testing.assert_array_equal(values[id(loss)], loss.data)
    assert all(set(map(id, r.inputs)) for r in tape.records)


def test_param_store_order():
    ps = T.ParamStore({"b": np.ones(2), "a": np.zeros(1), "c/x": np.ones(1)})
    assert ps.names() == ["a", "b", "c/x"]
    assert list(ps) == ps.names()


def test_rng_for_is_deterministic():
    a = T.rng_for(3, "layer", 5).random(4)
    b = T.rng_for(3, "layer", 5).random(4)
    c = T.rng_for(3, "layer", 6).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# -- finite differences ---------------------------------------------------

def test_fd_quadratic():
    assert T.finite_diff_check(lambda x: T.mul(x, x), np.array(3.0)) < 1e-8


def _lstm_params(rng, d, h):
    return [rng.normal(size=(d, 4 * h)) * 0.5, rng.normal(size=(h, 4 * h)) * 0.5,
            rng.normal(size=4 * h) * 0.1]


def test_fd_lstm_step(rng):
    d, h, b = 3, 4, 2
    pts = [rng.normal(size=(b, d)), rng.normal(size=(b, h)), rng.normal(size=(b, h))]
    pts += _lstm_params(rng, d, h)

    def f(xs):
        hn, cn = T.lstm_step(*xs)
        return T.add(T.reduce_sum(hn), T.reduce_sum(T.mul(cn, cn)))

    assert T.finite_diff_check(f, pts) < 1e-4


def test_fd_masked_softmax_ce(rng):
    lens = np.array([3, 5])
    targets = np.array([1, 4])

    def f(x):
        p = T.masked_softmax(Tensor_axes(x, (BATCH, TIME)), TIME, lens)
        return T.scale(T.reduce_sum(T.log(T.pick(p, targets))), -1.0)

    assert T.finite_diff_check(f, rng.normal(size=(2, 5))) < 1e-4


def Tensor_axes(x, axes):
    """Attach axis names to a leaf tensor without breaking the tape link."""
    x.axes = axes
    return x


def _named(axes):
    def wrap(x):
        return Tensor_axes(x, axes)
    return wrap


# One scalar-valued function per registered op; every op is exercised.
def _op_cases(rng):
    bt = _named((BATCH, TIME))
    btf = _named((BATCH, TIME, FEATURE))
    bf = _named((BATCH, FEATURE))
    lens = np.array([2, 4])
    w_out = rng.normal(size=(2, 4, 3))

    def wsum(y, w=None):
        w = rng_fixed(y.data.shape) if w is None else w
        return T.reduce_sum(T.mul(y, Tensor(w)))

    cases = {
        "add": (lambda xs: wsum(T.add(xs[0], xs[1])), [rng.normal(size=(2, 3)), rng.normal(size=3)]),
        "sub": (lambda xs: wsum(T.sub(xs[0], xs[1])), [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
        "mul": (lambda xs: wsum(T.mul(xs[0], xs[1])), [rng.normal(size=(2, 3)), rng.normal(size=3)]),
        "scale": (lambda x: wsum(T.scale(x, 2.5)), rng.normal(size=4)),
        "tanh": (lambda x: wsum(T.tanh(x)), rng.normal(size=4)),
        "sigmoid": (lambda x: wsum(T.sigmoid(x)), rng.normal(size=4)),
        "relu": (lambda x: wsum(T.relu(x)), rng.uniform(0.2, 1.0, size=4) * rng.choice([-1, 1], 4)),
        "exp": (lambda x: wsum(T.exp(x)), rng.normal(size=4)),
        "log": (lambda x: wsum(T.log(x)), rng.uniform(0.5, 2.0, size=4)),
        "matmul": (lambda xs: wsum(T.matmul(xs[0], xs[1])), [rng.normal(size=(2, 3)), rng.normal(size=(3, 4))]),
        "reduce_sum": (lambda x: wsum(T.reduce_sum(bt(x), TIME)), rng.normal(size=(2, 4))),
        "gather_rows": (lambda x: wsum(T.gather_rows(x, [2, 0, 2])), rng.normal(size=(3, 2))),
        "dropout": (lambda x: wsum(T.dropout(x, 0.4, True, mask=np.array([2.0, 0.0, 2.0, 2.0]) / 1.2)), rng.normal(size=4)),
        "concat": (lambda xs: wsum(T.concat([bf(xs[0]), bf(xs[1])])), [rng.normal(size=(2, 3)), rng.normal(size=(2, 2))]),
        "select": (lambda x: wsum(T.select(btf(x), TIME, 1)), rng.normal(size=(2, 3, 2))),
        "stack": (lambda xs: wsum(T.stack([bf(xs[0]), bf(xs[1])], TIME)), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))]),
        "shift": (lambda xs: wsum(T.shift_right(btf(xs[0]), TIME, bf(xs[1]))), [rng.normal(size=(2, 3, 2)), rng.normal(size=(2, 2))]),
        "take_rows": (lambda x: wsum(T.take_rows(bf(x), [1, 1, 0])), rng.normal(size=(2, 3))),
        "softmax_over_spatial": (lambda x: wsum(T.masked_softmax(bt(x), TIME, lens)), rng.normal(size=(2, 4))),
        "log_softmax": (lambda x: wsum(T.log_softmax(x)), rng.normal(size=(2, 5))),
        "pick": (lambda x: wsum(T.pick(x, np.array([4, 1]))), rng.normal(size=(2, 5))),
        "ce_label_smoothing": (lambda x: T.smoothed_ce(T.log_softmax(x), np.array([[1, 2], [0, 3]]),
                                                np.array([[0.5, 0.25], [0.25, 0.0]]), 0.1),
                        rng.normal(size=(2, 2, 5))),
        "lstm_step": (lambda xs: wsum(T.lstm_step(*xs)[0]),
                      [rng.normal(size=(2, 3)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))]
                      + _lstm_params(rng, 3, 2)),
        "lstm_sequence": (lambda xs: wsum(T.lstm_sequence(btf(xs[0]), *xs[1:], lens, -1), w_out),
                          [rng.normal(size=(2, 4, 3))] + _lstm_params(rng, 3, 3)),
        "external": (lambda x: T.external_loss(x, lambda a: (float((a ** 3).sum()), 3 * a ** 2)),
                     rng.normal(size=3)),
    }
    return cases


_FIXED = {}


def rng_fixed(shape):
    """Deterministic output weights so that sums do not hide sign errors."""
    if shape not in _FIXED:
        _FIXED[shape] = np.random.default_rng(len(shape) * 31 + sum(shape)).normal(size=shape)
    return _FIXED[shape]


def test_every_registered_op_has_a_gradient_case():
    cases = _op_cases(np.random.default_rng(0))
    assert set(T.OPS) <= set(cases), set(T.OPS) - set(cases)


@pytest.mark.parametrize("op", sorted(_op_cases(np.random.default_rng(0))))
def test_op_gradients_match_finite_differences(op):
    for seed in range(10):
        fn, point = _op_cases(np.random.default_rng(seed))[op]
        assert T.finite_diff_check(fn, point) < 1e-4, (op, seed)


# -- properties ----------------------------------------------------------------

def test_masking_property_lstm_sequence(rng):
    lens = np.array([2, 4, 1])
    x = rng.normal(size=(3, 4, 3))
    params = [Tensor(p, requires_grad=True) for p in _lstm_params(rng, 3, 2)]
    out = []
    for trial in range(2):
        xx = x.copy()
        if trial:
            for b, n in enumerate(lens):
                xx[b, n:] = rng.normal(size=xx[b, n:].shape) * 10
        for direction in (1, -1):
            with T.Tape() as tape:
                y = T.lstm_sequence(Tensor(xx, (BATCH, TIME, FEATURE)), *params, lens, direction)
                loss = T.reduce_sum(T.mul(y, Tensor(rng_fixed(y.shape))))
            out.append((y.data, T.backward(tape, loss, params)))
    for a, b in ((out[0], out[2]), (out[1], out[3])):
        mask = (np.arange(4)[None, :] < lens[:, None])[..., None]
        np.testing.assert_array_equal(np.where(mask, a[0], 0), np.where(mask, b[0], 0))
        np.testing.assert_array_equal(a[0][~mask[..., 0]], 0)
        for ga, gb in zip(a[1], b[1]):
            np.testing.assert_array_equal(ga, gb)


def test_masking_property_softmax_and_sum(rng):
    lens = np.array([1, 3])
    x = rng.normal(size=(2, 4))
    x2 = x.copy()
    x2[0, 1:] += 100.0
    x2[1, 3] = -50.0
    for fn in (lambda t: T.masked_softmax(t, TIME, lens),
               lambda t: T.reduce_sum(Tensor(t.data, t.axes, lens), TIME)):
        a = fn(Tensor(x, (BATCH, TIME)))
        b = fn(Tensor(x2, (BATCH, TIME)))
        if a.data.ndim == 2:
            mask = np.arange(4)[None, :] < lens[:, None]
            np.testing.assert_array_equal(a.data[mask], b.data[mask])
            assert (a.data[~mask] == 0).all()
        else:
            np.testing.assert_array_equal(a.data, b.data)


_axes = st.lists(st.sampled_from([1, 2, 3]), min_size=4, max_size=4)


@settings(max_examples=60, deadline=None)
@given(ea=_axes, eb=_axes, keep_a=st.lists(st.booleans(), min_size=4, max_size=4),
       keep_b=st.lists(st.booleans(), min_size=4, max_size=4), seed=st.integers(0, 2**16))
def test_named_broadcast_matches_tile_oracle(ea, eb, keep_a, keep_b, seed):
    names = T.CANONICAL_AXES
    full = [max(a, b) for a, b in zip(ea, eb)]
    rng = np.random.default_rng(seed)
    # each side keeps a subset of axes at either the full extent or 1
    def side(ext, keep):
        axes = tuple(n for n, k in zip(names, keep) if k)
        shape = tuple(e if e == f else 1 for e, f, k in zip(ext, full, keep) if k)
        return axes, shape
    axes_a, shape_a = side([f if a == f else 1 for a, f in zip(ea, full)], keep_a)
    axes_b, shape_b = side([f if b == f else 1 for b, f in zip(eb, full)], keep_b)
    a = rng.normal(size=shape_a)
    b = rng.normal(size=shape_b)
    out = T.add(Tensor(a, axes_a), Tensor(b, axes_b))
    out_axes = tuple(n for n in names if n in axes_a or n in axes_b)
    assert out.axes == out_axes

    def tile(arr, axes):
        shape = []
        it = iter(arr.shape)
        for n in out_axes:
            shape.append(next(it) if n in axes else 1)
        target = tuple(max(sa, sb) for sa, sb in zip(_full(a, axes_a), _full(b, axes_b)))
        return np.tile(arr.reshape(shape), [t // s for t, s in zip(target, shape)])

    def _full(arr, axes):
        it = iter(arr.shape)
        return [next(it) if n in axes else 1 for n in out_axes]

    np.testing.assert_array_equal(out.data, tile(a, axes_a) + tile(b, axes_b))


def test_forward_is_bitwise_deterministic(rng):
    cases_a = _op_cases(np.random.default_rng(5))
    cases_b = _op_cases(np.random.default_rng(5))
    for op in cases_a:
        fa, pa = cases_a[op]
        fb, pb = cases_b[op]
        wrap = (lambda p: [Tensor(x) for x in p]) if isinstance(pa, list) else Tensor
        np.testing.assert_array_equal(fa(wrap(pa)).data, fb(wrap(pb)).data)

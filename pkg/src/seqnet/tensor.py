"""Dense tensors with named axes and a tape-based reverse-mode autodiff.

Axis names are drawn from a fixed canonical order ``("B", "Tdec", "T", "F")``:
batch (beam hypotheses are flattened into it), decoder time, encoder time and
feature.  Every named tensor keeps its axes in that order, so broadcasting two
named tensors only ever inserts extent-1 axes.  Tensors without names (weights,
raw arrays in tests) use plain numpy positional broadcasting.

Ops record onto the innermost active :class:`Tape` whenever one of their inputs
requires a gradient.  :func:`backward` walks the tape in reverse.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np

BATCH = "B"
DEC_TIME = "Tdec"
TIME = "T"
FEATURE = "F"
CANONICAL_AXES = (BATCH, DEC_TIME, TIME, FEATURE)
_AXIS_RANK = {a: i for i, a in enumerate(CANONICAL_AXES)}

_dtype = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes or axes are incompatible."""


def default_dtype():
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    _dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the floating point type used for new tensors."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def _check_axes(axes, ndim):
    if axes is None:
        return None
    axes = tuple(axes)
    if len(axes) != ndim:
        raise ShapeError(f"axes {axes} do not match array rank {ndim}")
    ranks = [_AXIS_RANK.get(a) for a in axes]
    if None in ranks:
        raise ShapeError(f"unknown axis name in {axes}")
    if ranks != sorted(set(ranks)) or len(set(ranks)) != len(ranks):
        raise ShapeError(f"axes {axes} not in canonical order {CANONICAL_AXES}")
    return axes


class Tensor:
    """A dense array plus optional axis names and per-sequence valid lengths.

    ``seq_lens`` refers to the ``T`` axis and must be given per batch entry.
    """

    __slots__ = ("data", "axes", "seq_lens", "requires_grad", "name")

    def __init__(self, data, axes=None, seq_lens=None, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype.kind == "f" and arr.dtype != _dtype:
            arr = arr.astype(_dtype)
        elif arr.dtype.kind in "bu" or (arr.dtype.kind == "i" and requires_grad):
            arr = arr.astype(_dtype)
        self.data = arr
        self.axes = _check_axes(axes, arr.ndim)
        if seq_lens is not None:
            seq_lens = np.asarray(seq_lens, dtype=np.int64)
            if self.axes is None or TIME not in self.axes or BATCH not in self.axes:
                raise ShapeError("seq_lens require named B and T axes")
            t_ext = arr.shape[self.axes.index(TIME)]
            if seq_lens.shape != (arr.shape[self.axes.index(BATCH)],):
                raise ShapeError("seq_lens must have one entry per batch element")
            if np.any(seq_lens <= 0) or np.any(seq_lens > t_ext):
                raise ShapeError(f"seq_lens {seq_lens.tolist()} outside (0, {t_ext}]")
        self.seq_lens = seq_lens
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def extent(self, axis):
        return self.data.shape[self.axes.index(axis)]

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, axes={self.axes}, grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731


def tensor(data, axes=None, seq_lens=None, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, axes, seq_lens, requires_grad, name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Record:
    __slots__ = ("op", "inputs", "outputs", "in_shapes", "kw", "ctx")

    def __init__(self, op, inputs, outputs, in_shapes, kw, ctx):
        self.op = op
        self.inputs = inputs
        self.outputs = outputs
        self.in_shapes = in_shapes
        self.kw = kw
        self.ctx = ctx


class Tape:
    """Ordered op records of one forward computation.

    Use as a context manager; ops executed inside are recorded.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def replay(self, overrides=None) -> dict:
        """Re-run every record from its inputs; returns ``id(output) -> array``.

        ``overrides`` maps ``id(tensor) -> array`` for leaf values to substitute.
        """
        values = dict(overrides or {})
        for rec in self.records:
            arrays = [
                values.get(id(t), t.data).reshape(s) for t, s in zip(rec.inputs, rec.in_shapes)
            ]
            out = rec.op.forward({}, *arrays, **rec.kw)
            outs = out if isinstance(out, tuple) else (out,)
            for t, o in zip(rec.outputs, outs):
                values[id(t)] = o
        return values


_tapes: list[Tape] = []


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


@contextlib.contextmanager
def no_tape():
    """Suspend recording (e.g. for decoding)."""
    saved = list(_tapes)
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


OPS: dict[str, type] = {}


def register(cls):
    OPS[cls.name] = cls
    return cls


def _apply(op, inputs: Sequence[Tensor], arrays, out_axes, **kw):
    ctx: dict = {}
    out = op.forward(ctx, *arrays, **kw)
    outs = out if isinstance(out, tuple) else (out,)
    if isinstance(out_axes, tuple) and out_axes and isinstance(out_axes[0], (tuple, type(None))):
        axes_list = out_axes
    else:
        axes_list = (out_axes,) * len(outs)
    tensors = tuple(Tensor(o, a) for o, a in zip(outs, axes_list))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        for t in tensors:
            t.requires_grad = True
        tape.records.append(
            Record(op, tuple(inputs), tensors, tuple(a.shape for a in arrays), kw, ctx)
        )
    return tensors if isinstance(out, tuple) else tensors[0]


def backward(tape: Tape, loss: Tensor, wrt=None):
    """Reverse-mode gradients of scalar ``loss``.

    ``wrt`` may be a :class:`ParamStore` / name->Tensor mapping (returns
    name->array, zeros for unreachable entries) or a sequence of tensors
    (returns a list of arrays).  With ``wrt=None`` the raw ``id -> grad`` map
    is returned.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gouts = [grads.get(id(o)) for o in rec.outputs]
        if all(g is None for g in gouts):
            continue
        gouts = [np.zeros_like(o.data) if g is None else g for g, o in zip(gouts, rec.outputs)]
        gins = rec.op.backward(rec.ctx, *gouts)
        for t, g in zip(rec.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.data.shape:
                g = g.reshape(t.data.shape)
            prev = grads.get(id(t))
            # fan-out: accumulate by addition
            grads[id(t)] = g if prev is None else prev + g
    if wrt is None:
        return grads
    if isinstance(wrt, (ParamStore, dict)):
        return {
            name: grads[id(p)] if id(p) in grads else np.zeros_like(p.data)
            for name, p in wrt.items()
        }
    return [grads[id(t)] if id(t) in grads else np.zeros_like(t.data) for t in wrt]


# ---------------------------------------------------------------------------
# broadcasting helpers


def _union_axes(*axes_list):
    names = set()
    for axes in axes_list:
        names.update(axes)
    return tuple(a for a in CANONICAL_AXES if a in names)


def _align(t: Tensor, target_axes):
    shape = []
    for a in target_axes:
        shape.append(t.data.shape[t.axes.index(a)] if a in t.axes else 1)
    return t.data.reshape(shape)


def _broadcast_inputs(*ts: Tensor):
    """Return (arrays, out_axes) for an elementwise op on named or raw tensors."""
    named = [t for t in ts if t.axes is not None]
    if len(named) == len(ts):
        axes = _union_axes(*(t.axes for t in ts))
        arrays = [_align(t, axes) for t in ts]
        try:
            np.broadcast_shapes(*(a.shape for a in arrays))
        except ValueError:
            raise ShapeError(
                f"incompatible shapes {[t.shape for t in ts]} with axes {[t.axes for t in ts]}"
            ) from None
        return arrays, axes
    arrays = [t.data for t in ts]
    try:
        shape = np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(f"incompatible shapes {[t.shape for t in ts]}") from None
    axes = None
    for t in named:
        if t.data.shape == shape:
            axes = t.axes
    return arrays, axes


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


@register
class AddOp:
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), unbroadcast(g, sb)


@register
class SubOp:
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        ctx["shapes"] = (a.shape, b.shape)
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx["shapes"]
        return unbroadcast(g, sa), -unbroadcast(g, sb)


@register
class MulOp:
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)


def _binary(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    arrays, axes = _broadcast_inputs(a, b)
    return _apply(op, (a, b), arrays, axes)


def add(a, b) -> Tensor:
    return _binary(AddOp, a, b)


def sub(a, b) -> Tensor:
    return _binary(SubOp, a, b)


def mul(a, b) -> Tensor:
    return _binary(MulOp, a, b)


@register
class ScaleOp:
    name = "scale"

    @staticmethod
    def forward(ctx, x, c):
        ctx["c"] = c
        return x * np.asarray(c, dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["c"],)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    return _apply(ScaleOp, (x,), (x.data,), x.axes, c=c)


def _unary(name, fwd, bwd):
    """Build a registered unary op; ``bwd(x, y, g)`` returns the input grad."""

    class _Unary:
        @staticmethod
        def forward(ctx, x):
            y = fwd(x)
            ctx["x"], ctx["y"] = x, y
            return y

        @staticmethod
        def backward(ctx, g):
            return (bwd(ctx["x"], ctx["y"], g),)

    _Unary.name = name
    _Unary.__name__ = f"{name.capitalize()}Op"
    register(_Unary)

    def fn(x) -> Tensor:
        x = as_tensor(x)
        return _apply(_Unary, (x,), (x.data,), x.axes)

    fn.__name__ = name
    return fn


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


tanh = _unary("tanh", np.tanh, lambda x, y, g: g * (1.0 - y * y))
sigmoid = _unary("sigmoid", _sigmoid, lambda x, y, g: g * y * (1.0 - y))
relu = _unary("relu", lambda x: np.maximum(x, 0), lambda x, y, g: g * (x > 0))
exp = _unary("exp", np.exp, lambda x, y, g: g * y)


def _log_fwd(x):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.log(x)


log = _unary("log", _log_fwd, lambda x, y, g: g / x)

_ELEMENTWISE = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "exp": exp, "log": log}
_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(kind: str, *inputs) -> Tensor:
    """Dispatch ``kind`` in {add, mul, sub, tanh, sigmoid, relu, exp, log}."""
    if kind in _BINARY:
        if len(inputs) < 2:
            raise ShapeError(f"{kind} needs at least two inputs")
        out = inputs[0]
        for x in inputs[1:]:
            out = _BINARY[kind](out, x)
        return out
    if kind in _ELEMENTWISE:
        (x,) = inputs
        return _ELEMENTWISE[kind](x)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


@register
class MatMulOp:
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        ctx["a"], ctx["b"] = a, b
        # one 2-D GEMM instead of numpy's per-row loop over leading axes
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[1:])

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        k, n = b.shape
        g2 = g.reshape(-1, n)
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, k).T @ g2
        return ga, gb


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., M, K] @ b[K, N]``, batched over the leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _apply(MatMulOp, (a, b), (a.data, b.data), a.axes)


def _time_mask(t: Tensor):
    """Boolean mask aligned to ``t``'s axes (True = valid) or None."""
    if t.seq_lens is None:
        return None
    b_ext = t.extent(BATCH)
    t_ext = t.extent(TIME)
    m = np.arange(t_ext)[None, :] < t.seq_lens[:, None]
    shape = [1] * t.ndim
    shape[t.axes.index(BATCH)] = b_ext
    shape[t.axes.index(TIME)] = t_ext
    return m.reshape(shape)


@register
class ReduceSumOp:
    name = "reduce_sum"

    @staticmethod
    def forward(ctx, x, axis, mask):
        ctx["shape"], ctx["axis"], ctx["mask"] = x.shape, axis, mask
        if mask is not None:
            x = np.where(mask, x, 0)
        return np.asarray(x.sum(axis=axis))

    @staticmethod
    def backward(ctx, g):
        shape, axis, mask = ctx["shape"], ctx["axis"], ctx["mask"]
        if axis is not None:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, shape)
        if mask is not None:
            g = np.where(mask, g, 0)
        return (np.array(g),)


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    """Sum over a named axis (or an integer axis for unnamed tensors, or all).

    Summing over ``T`` skips positions beyond ``x.seq_lens``.
    """
    x = as_tensor(x)
    mask = _time_mask(x)
    if axis is None:
        return _apply(ReduceSumOp, (x,), (x.data,), (), axis=None, mask=mask)
    if isinstance(axis, str):
        if x.axes is None or axis not in x.axes:
            raise ShapeError(f"unknown axis {axis!r} for tensor with axes {x.axes}")
        pos = x.axes.index(axis)
        out_axes = tuple(a for a in x.axes if a != axis)
        if axis != TIME:
            mask = None
    else:
        pos = axis
        out_axes = None
        mask = None
    out = _apply(ReduceSumOp, (x,), (x.data,), out_axes, axis=pos, mask=mask)
    if x.seq_lens is not None and out.axes and TIME in out.axes:
        out.seq_lens = x.seq_lens
    return out


@register
class GatherRowsOp:
    name = "gather_rows"

    @staticmethod
    def forward(ctx, table, ids):
        ctx["shape"], ctx["ids"] = table.shape, ids
        return table[ids]

    @staticmethod
    def backward(ctx, g):
        gt = np.zeros(ctx["shape"], dtype=g.dtype)
        np.add.at(gt, ctx["ids"].reshape(-1), g.reshape(-1, ctx["shape"][1]))
        return (gt,)


def gather_rows(table: Tensor, ids, axes=None, layer: str | None = None) -> Tensor:
    """Row lookup ``table[ids]``; the gradient scatter-adds into ``table``.

    ``axes`` names the axes of ``ids``; a trailing ``F`` axis is appended.
    """
    ids_arr = ids.data if isinstance(ids, Tensor) else np.asarray(ids)
    if axes is None and isinstance(ids, Tensor):
        axes = ids.axes
    ids_arr = ids_arr.astype(np.int64)
    v = table.shape[0]
    if ids_arr.size and (ids_arr.min() < 0 or ids_arr.max() >= v):
        where = f" in layer {layer!r}" if layer else ""
        raise IndexError(f"id out of range [0, {v}){where}: {ids_arr.min()}..{ids_arr.max()}")
    out_axes = None if axes is None else tuple(axes) + (FEATURE,)
    return _apply(GatherRowsOp, (table,), (table.data,), out_axes, ids=ids_arr)


@register
class MaskMulOp:
    name = "dropout"

    @staticmethod
    def forward(ctx, x, mask):
        ctx["mask"] = mask
        return x * mask

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["mask"],)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None,
            mask: np.ndarray | None = None) -> Tensor:
    """Inverted dropout.  ``mask`` may be supplied precomputed (already scaled)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if not train or rate == 0.0:
        return x
    if mask is None:
        mask = dropout_mask(rng, x.shape, rate, x.data.dtype)
    return _apply(MaskMulOp, (x,), (x.data,), x.axes, mask=mask)


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=None) -> np.ndarray:
    dtype = dtype or _dtype
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) * np.asarray(1.0 / (1.0 - rate), dtype=dtype)


# ---------------------------------------------------------------------------
# structural ops


@register
class ConcatOp:
    name = "concat"

    @staticmethod
    def forward(ctx, *xs, shape=None):
        ctx["shapes"] = [x.shape for x in xs]
        if shape is not None:
            xs = [np.broadcast_to(x, tuple(shape) + (x.shape[-1],)) for x in xs]
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(ctx, g):
        out, start = [], 0
        for s in ctx["shapes"]:
            piece = g[..., start:start + s[-1]]
            start += s[-1]
            out.append(unbroadcast(piece, s))
        return tuple(out)


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last (feature) axis, broadcasting the others."""
    xs = [as_tensor(x) for x in xs]
    if len(xs) == 1:
        return xs[0]
    if all(x.axes is not None for x in xs):
        for x in xs:
            if not x.axes or x.axes[-1] != FEATURE:
                raise ShapeError(f"concat needs a trailing F axis, got {x.axes}")
        axes = _union_axes(*(x.axes for x in xs))
        arrays = [_align(x, axes) for x in xs]
        try:
            lead = np.broadcast_shapes(*(a.shape[:-1] for a in arrays))
        except ValueError:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
        return _apply(ConcatOp, xs, arrays, axes, shape=lead)
    return _apply(ConcatOp, xs, [x.data for x in xs], None, shape=None)


@register
class SelectOp:
    name = "select"

    @staticmethod
    def forward(ctx, x, pos, index):
        ctx["shape"], ctx["pos"], ctx["index"] = x.shape, pos, index
        return np.take(x, index, axis=pos)

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        idx = [slice(None)] * len(ctx["shape"])
        idx[ctx["pos"]] = ctx["index"]
        out[tuple(idx)] = g
        return (out,)


def select(x: Tensor, axis: str, index: int) -> Tensor:
    """Take position ``index`` along named ``axis`` (the axis is removed)."""
    pos = x.axes.index(axis)
    out_axes = tuple(a for a in x.axes if a != axis)
    return _apply(SelectOp, (x,), (x.data,), out_axes, pos=pos, index=index)


@register
class StackOp:
    name = "stack"

    @staticmethod
    def forward(ctx, *xs, pos, shape):
        ctx["pos"], ctx["shapes"] = pos, [x.shape for x in xs]
        return np.stack([np.broadcast_to(x, shape) for x in xs], axis=pos)

    @staticmethod
    def backward(ctx, g):
        pos = ctx["pos"]
        return tuple(
            unbroadcast(np.take(g, i, axis=pos), s) for i, s in enumerate(ctx["shapes"])
        )


def stack(xs: Sequence[Tensor], axis: str) -> Tensor:
    """Stack named tensors along a new named axis (other axes broadcast)."""
    axes = _union_axes(*(x.axes for x in xs))
    if axis in axes:
        raise ShapeError(f"axis {axis!r} already present")
    arrays = [_align(x, axes) for x in xs]
    shape = np.broadcast_shapes(*(a.shape for a in arrays))
    out_axes = _union_axes(axes, (axis,))
    pos = out_axes.index(axis)
    return _apply(StackOp, xs, arrays, out_axes, pos=pos, shape=shape)


@register
class ShiftOp:
    name = "shift"

    @staticmethod
    def forward(ctx, x, init, pos):
        ctx["pos"], ctx["init_shape"] = pos, init.shape
        first = np.broadcast_to(np.expand_dims(init, pos), _with(x.shape, pos, 1))
        rest = np.take(x, np.arange(x.shape[pos] - 1), axis=pos)
        return np.concatenate([first, rest], axis=pos)

    @staticmethod
    def backward(ctx, g):
        pos = ctx["pos"]
        n = g.shape[pos]
        gx = np.concatenate(
            [np.take(g, np.arange(1, n), axis=pos), np.zeros(_with(g.shape, pos, 1), g.dtype)],
            axis=pos,
        )
        ginit = unbroadcast(np.take(g, 0, axis=pos), ctx["init_shape"])
        return gx, ginit


def _with(shape, pos, value):
    s = list(shape)
    s[pos] = value
    return tuple(s)


def shift_right(x: Tensor, axis: str, initial: Tensor) -> Tensor:
    """``out[t] = x[t-1]`` along ``axis``, ``out[0] = initial`` (broadcast)."""
    initial = as_tensor(initial)
    pos = x.axes.index(axis)
    rest = tuple(a for a in x.axes if a != axis)
    if initial.axes is None:
        init_arr = initial.data.reshape((1,) * (len(rest) - initial.ndim) + initial.shape)
    else:
        init_arr = _align(initial, rest)
    return _apply(ShiftOp, (x, initial), (x.data, init_arr), x.axes, pos=pos)


@register
class TakeRowsOp:
    name = "take_rows"

    @staticmethod
    def forward(ctx, x, rows):
        ctx["shape"], ctx["rows"] = x.shape, rows
        return x[rows]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        np.add.at(out, ctx["rows"], g)
        return (out,)


def take_rows(x: Tensor, rows) -> Tensor:
    """Reorder/duplicate entries along the leading (batch) axis."""
    return _apply(TakeRowsOp, (x,), (x.data,), x.axes, rows=np.asarray(rows, dtype=np.int64))


# ---------------------------------------------------------------------------
# softmax family


@register
class MaskedSoftmaxOp:
    name = "softmax_over_spatial"

    @staticmethod
    def forward(ctx, x, pos, mask):
        xm = np.where(mask, x, -np.inf)
        m = xm.max(axis=pos, keepdims=True)
        e = np.where(mask, np.exp(xm - m), 0.0)
        y = e / e.sum(axis=pos, keepdims=True)
        y = y.astype(x.dtype, copy=False)
        ctx["y"], ctx["pos"] = y, pos
        return y

    @staticmethod
    def backward(ctx, g):
        y, pos = ctx["y"], ctx["pos"]
        return (y * (g - (g * y).sum(axis=pos, keepdims=True)),)


def masked_softmax(x: Tensor, axis: str, lens) -> Tensor:
    """Softmax over named ``axis`` restricted to positions ``< lens[b]``."""
    lens = np.asarray(lens)
    if np.any(lens <= 0):
        raise ValueError("softmax over an axis with all positions masked")
    pos = x.axes.index(axis)
    ext = x.shape[pos]
    m = np.arange(ext)[None, :] < lens[:, None]
    shape = [1] * x.ndim
    shape[x.axes.index(BATCH)] = m.shape[0]
    shape[pos] = ext
    mask = m.reshape(shape)
    return _apply(MaskedSoftmaxOp, (x,), (x.data,), x.axes, pos=pos, mask=mask)


@register
class LogSoftmaxOp:
    name = "log_softmax"

    @staticmethod
    def forward(ctx, x):
        m = x.max(axis=-1, keepdims=True)
        z = x - m
        y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        ctx["y"] = y
        return y

    @staticmethod
    def backward(ctx, g):
        y = ctx["y"]
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    return _apply(LogSoftmaxOp, (x,), (x.data,), x.axes)


@register
class PickOp:
    name = "pick"

    @staticmethod
    def forward(ctx, x, ids):
        ctx["shape"], ctx["ids"] = x.shape, ids
        return np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx["shape"], dtype=g.dtype)
        np.put_along_axis(out, ctx["ids"][..., None], g[..., None], axis=-1)
        return (out,)


def pick(x: Tensor, ids) -> Tensor:
    """``x[..., ids[...]]``: select one feature entry per position."""
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids, dtype=np.int64)
    out_axes = None if x.axes is None else x.axes[:-1]
    return _apply(PickOp, (x,), (x.data,), out_axes, ids=ids)


@register
class SmoothedCEOp:
    name = "ce_label_smoothing"

    @staticmethod
    def forward(ctx, logp, targets, weights, eps):
        v = logp.shape[-1]
        q = np.full(logp.shape, eps / v, dtype=logp.dtype)
        np.put_along_axis(q, targets[..., None], (1.0 - eps + eps / v), axis=-1)
        q = q * weights[..., None]
        ctx["q"] = q
        return np.asarray(-(q * logp).sum(), dtype=logp.dtype)

    @staticmethod
    def backward(ctx, g):
        return (-ctx["q"] * g,)


def smoothed_ce(logp: Tensor, targets, weights, eps: float) -> Tensor:
    """``-sum_pos weight[pos] * sum_v q_v log p_v`` with label-smoothed ``q``.

    ``weights`` carries masking and normalisation (e.g. ``mask / n_valid``).
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logp.data.dtype)
    v = logp.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    return _apply(SmoothedCEOp, (logp,), (logp.data,), (), targets=targets, weights=weights,
                  eps=float(eps))


# ---------------------------------------------------------------------------
# LSTM kernels


def _lstm_gates(z, h_dim):
    i = _sigmoid(z[..., :h_dim])
    f = _sigmoid(z[..., h_dim:2 * h_dim])
    g = np.tanh(z[..., 2 * h_dim:3 * h_dim])
    o = _sigmoid(z[..., 3 * h_dim:])
    return i, f, g, o


@register
class LstmStepOp:
    name = "lstm_step"

    @staticmethod
    def forward(ctx, x, h, c, w, r, b):
        hd = r.shape[0]
        z = x @ w + h @ r + b
        i, f, g, o = _lstm_gates(z, hd)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        ctx.update(x=x, h=h, c=c, w=w, r=r, i=i, f=f, g=g, o=o, tc=tc)
        return h_new, c_new

    @staticmethod
    def backward(ctx, gh, gc):
        i, f, g, o, tc = ctx["i"], ctx["f"], ctx["g"], ctx["o"], ctx["tc"]
        x, h, c, w, r = ctx["x"], ctx["h"], ctx["c"], ctx["w"], ctx["r"]
        gc = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc * g * i * (1.0 - i),
                gc * c * f * (1.0 - f),
                gc * i * (1.0 - g * g),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        dz2 = dz.reshape(-1, dz.shape[-1])
        gx = dz @ w.T
        gh_prev = dz @ r.T
        gw = np.broadcast_to(x, dz.shape[:-1] + x.shape[-1:]).reshape(-1, x.shape[-1]).T @ dz2
        gr = np.broadcast_to(h, dz.shape[:-1] + h.shape[-1:]).reshape(-1, h.shape[-1]).T @ dz2
        gb = dz2.sum(axis=0)
        gcp = gc * f
        return (
            unbroadcast(gx, x.shape),
            unbroadcast(gh_prev, h.shape),
            unbroadcast(gcp, c.shape),
            gw,
            gr,
            gb,
        )


def lstm_step(x: Tensor, h: Tensor, c: Tensor, w: Tensor, r: Tensor, b: Tensor):
    """One LSTM step with gate blocks ordered (input, forget, candidate, output)."""
    hd = r.shape[0]
    if w.shape[1] != 4 * hd or r.shape != (hd, 4 * hd) or b.shape != (4 * hd,):
        raise ShapeError(f"lstm params inconsistent: W{w.shape} R{r.shape} b{b.shape}")
    if x.shape[-1] != w.shape[0] or h.shape[-1] != hd or c.shape[-1] != hd:
        raise ShapeError(f"lstm input shapes x{x.shape} h{h.shape} c{c.shape} vs W{w.shape}")
    axes = x.axes if x.axes is not None else h.axes
    if x.axes is not None and h.axes is not None:
        axes = _union_axes(x.axes, h.axes, c.axes or ())
        arrays = [_align(x, axes), _align(h, axes), _align(c, axes) if c.axes else c.data]
    else:
        arrays = [x.data, h.data, c.data]
    return _apply(LstmStepOp, (x, h, c, w, r, b), arrays + [w.data, r.data, b.data],
                  (axes, axes))


@register
class LstmSequenceOp:
    name = "lstm_sequence"

    @staticmethod
    def forward(ctx, x, w, r, b, lens, direction):
        bsz, steps, _ = x.shape
        hd = r.shape[0]
        idx = _seq_index(lens, steps, direction)
        # time-major copies keep every per-step slice contiguous
        xs = np.take_along_axis(x, idx[:, :, None], axis=1).transpose(1, 0, 2).copy()
        xw = (xs.reshape(steps * bsz, -1) @ w + b).reshape(steps, bsz, 4 * hd)
        valid = (np.arange(steps)[:, None] < lens[None, :])[:, :, None]
        acts = np.empty((steps, bsz, 4 * hd), x.dtype)
        h_in = np.zeros((steps, bsz, hd), x.dtype)
        c_in = np.zeros((steps, bsz, hd), x.dtype)
        tcs = np.empty((steps, bsz, hd), x.dtype)
        hs = np.zeros((steps, bsz, hd), x.dtype)
        h = np.zeros((bsz, hd), x.dtype)
        c = np.zeros((bsz, hd), x.dtype)
        g_sl = slice(2 * hd, 3 * hd)
        for t in range(steps):
            h_in[t], c_in[t] = h, c
            z = xw[t] + h @ r
            a = acts[t]
            a[...] = _sigmoid(z)
            a[:, g_sl] = np.tanh(z[:, g_sl])
            i, f, g, o = a[:, :hd], a[:, hd:2 * hd], a[:, g_sl], a[:, 3 * hd:]
            c_new = f * c + i * g
            tcs[t] = np.tanh(c_new)
            h_new = o * tcs[t]
            v = valid[t]
            h = np.where(v, h_new, h)
            c = np.where(v, c_new, c)
            hs[t] = np.where(v, h_new, 0.0)
        out = np.zeros((bsz, steps, hd), x.dtype)
        np.put_along_axis(out, idx[:, :, None], hs.transpose(1, 0, 2), axis=1)
        ctx.update(xs=xs, w=w, r=r, idx=idx, valid=valid, acts=acts, h_in=h_in, c_in=c_in,
                   tcs=tcs)
        return out

    @staticmethod
    def backward(ctx, gout):
        xs, w, r, idx, valid = ctx["xs"], ctx["w"], ctx["r"], ctx["idx"], ctx["valid"]
        acts, h_in, c_in, tcs = ctx["acts"], ctx["h_in"], ctx["c_in"], ctx["tcs"]
        steps, bsz, _ = xs.shape
        hd = r.shape[0]
        ghs = np.take_along_axis(gout, idx[:, :, None], axis=1).transpose(1, 0, 2)
        dzs = np.empty((steps, bsz, 4 * hd), gout.dtype)
        gh = np.zeros((bsz, hd), gout.dtype)
        gc = np.zeros((bsz, hd), gout.dtype)
        r_t = np.ascontiguousarray(r.T)
        for t in reversed(range(steps)):
            a = acts[t]
            i, f, g, o = a[:, :hd], a[:, hd:2 * hd], a[:, 2 * hd:3 * hd], a[:, 3 * hd:]
            tc = tcs[t]
            v = valid[t]
            gh_t = np.where(v, gh + ghs[t], 0.0)
            gc_t = np.where(v, gc, 0.0) + gh_t * o * (1.0 - tc * tc)
            dz = dzs[t]
            dz[:, :hd] = gc_t * g * i * (1.0 - i)
            dz[:, hd:2 * hd] = gc_t * c_in[t] * f * (1.0 - f)
            dz[:, 2 * hd:3 * hd] = gc_t * i * (1.0 - g * g)
            dz[:, 3 * hd:] = gh_t * tc * o * (1.0 - o)
            # masked steps pass state gradients through unchanged
            gh = np.where(v, dz @ r_t, gh)
            gc = np.where(v, gc_t * f, gc)
        dz2 = dzs.reshape(-1, 4 * hd)
        gr = h_in.reshape(-1, hd).T @ dz2
        gw = xs.reshape(-1, xs.shape[-1]).T @ dz2
        gb = dz2.sum(axis=0)
        gxs = (dz2 @ w.T).reshape(steps, bsz, -1).transpose(1, 0, 2)
        gx = np.zeros_like(gxs)
        np.put_along_axis(gx, idx[:, :, None], gxs, axis=1)
        return gx, gw, gr, gb


def _seq_index(lens, steps, direction):
    """Per-sequence time index map; reversed within each sequence's length."""
    t = np.arange(steps)[None, :]
    if direction == 1:
        return np.broadcast_to(t, (len(lens), steps)).copy()
    lens = lens[:, None]
    return np.where(t < lens, lens - 1 - t, t)


def lstm_sequence(x: Tensor, w: Tensor, r: Tensor, b: Tensor, seq_lens, direction: int = 1):
    """Run an LSTM over ``x[B, T, D]``; ``direction=-1`` reverses each sequence.

    Outputs at positions ``>= seq_lens[b]`` are zero.
    """
    if direction not in (1, -1):
        raise ValueError(f"direction must be +1 or -1, got {direction}")
    if x.ndim != 3:
        raise ShapeError(f"lstm_sequence expects [B, T, D], got {x.shape}")
    hd = r.shape[0]
    if x.shape[-1] != w.shape[0] or w.shape[1] != 4 * hd:
        raise ShapeError(f"lstm input {x.shape} does not match W{w.shape}")
    lens = np.asarray(seq_lens, dtype=np.int64)
    out = _apply(LstmSequenceOp, (x, w, r, b), (x.data, w.data, r.data, b.data),
                 x.axes if x.axes is not None else (BATCH, TIME, FEATURE),
                 lens=lens, direction=direction)
    out.seq_lens = lens
    return out


# ---------------------------------------------------------------------------
# custom scalar-function op (used by the risk objective)


@register
class ExternalGradOp:
    """Scalar output whose value and input gradient are computed outside."""

    name = "external"

    @staticmethod
    def forward(ctx, x, fn):
        value, grad = fn(x)
        ctx["grad"] = grad
        return np.asarray(value, dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (ctx["grad"] * g,)


def external_loss(x: Tensor, fn: Callable[[np.ndarray], tuple]) -> Tensor:
    """Scalar ``fn(x.data) -> (value, dvalue/dx)`` inserted into the tape."""
    return _apply(ExternalGradOp, (x,), (x.data,), (), fn=fn)


# ---------------------------------------------------------------------------
# parameters and randomness


class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order."""

    def __init__(self, params: dict | None = None):
        self._params: dict[str, Tensor] = {}
        for name, value in (params or {}).items():
            self[name] = value

    def __setitem__(self, name, value):
        if not isinstance(value, Tensor):
            value = Tensor(np.asarray(value))
        value.requires_grad = True
        value.name = name
        self._params[name] = value

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def names(self):
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in self.names()]

    def __iter__(self):
        return iter(self.names())

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.items()}

    def copy(self) -> "ParamStore":
        return ParamStore({n: Tensor(p.data.copy()) for n, p in self.items()})

    def shapes(self):
        return {n: tuple(p.data.shape) for n, p in self.items()}


def _key_words(keys: Iterable) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, str):
            words.append(zlib.crc32(k.encode("utf-8")))
        else:
            k = int(k)
            words.extend([k & 0xFFFFFFFF, (k >> 32) & 0xFFFFFFFF])
    return words


def rng_for(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and ``keys``.

    The same (seed, keys) always yields the same stream, independent of the
    order in which streams are requested.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *_key_words(keys)])
    return np.random.Generator(np.random.Philox(key=ss.generate_state(2, np.uint64)))


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(f: Callable, point, epsilon: float = 1e-5, return_grads=False,
                      oracle_dtype=np.longdouble):
    """Max relative error between tape gradients and central differences.

    ``f`` maps a list of tensors to a scalar tensor; ``point`` is one array or
    a list of arrays.  The tape gradient is taken in 64-bit precision.  The
    perturbed evaluations run in ``oracle_dtype`` (extended precision where the
    platform has it) so that rounding in the oracle stays far below the
    tolerance even for gradient entries near 1e-8.  The relative error uses a
    ``max(|a|, |b|, 1e-8)`` denominator per element.
    """
    single = not isinstance(point, (list, tuple))
    points = [point] if single else list(point)
    with precision(np.float64):
        xs = [Tensor(np.array(p, dtype=np.float64), requires_grad=True) for p in points]
        with Tape() as tape:
            out = f(xs[0] if single else xs)
        analytic = backward(tape, out, xs)
    worst = 0.0
    numeric_all = []
    with precision(oracle_dtype), no_tape():
        ys = [Tensor(np.array(p, dtype=oracle_dtype)) for p in points]
        eps = oracle_dtype(epsilon)
        for y, ga in zip(ys, analytic):
            num = np.zeros(y.data.shape)
            flat = y.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(ys[0] if single else ys).data
                flat[i] = orig - eps
                fm = f(ys[0] if single else ys).data
                flat[i] = orig
                nflat[i] = float((fp - fm) / (2 * eps))
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(num)), 1e-8)
            if num.size:
                worst = max(worst, float(np.max(np.abs(ga - num) / denom)))
            numeric_all.append(num)
    if return_grads:
        return worst, analytic, numeric_all
    return worst

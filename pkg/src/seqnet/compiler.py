"""Compile a network description into a mode-specialised, hoisted schedule.

Sub-layers of the recurrent subnetwork are partitioned into

* ``pre_loop``: values that do not depend on anything step-local; computed
  once over the whole decoder time axis (``Tdec``),
* ``loop_body``: the recurrent core, computed once per output step,
* ``post_loop``: layers fed by the loop but not feeding back into it; computed
  once over the stacked per-step outputs.

Layers are evaluated with named-axis ops, so the same layer code runs on a
single step (axes ``B, [T], F``) and on a whole sequence (``B, Tdec, [T], F``).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .config import (
    BASE, DATA, PLAIN, PREV, ConfigError, LayerSpec, NetworkConfig, Ref,
    cyclic_components, resolve_references, validate_config,
)
from .tensor import BATCH, DEC_TIME, FEATURE, TIME, ParamStore, Tensor

BOS_ID = 1
PRE, LOOP, POST = "pre_loop", "loop_body", "post_loop"


class ExecMode(enum.Enum):
    TRAIN = "train"
    SCHEDULED_SAMPLING = "scheduled_sampling"
    DECODE = "decode"

    @property
    def step_local_choice(self):
        return self is not ExecMode.TRAIN


@dataclass(frozen=True)
class DataDims:
    src_vocab: int
    trg_vocab: int


@dataclass
class LayerInfo:
    qname: str
    spec: LayerSpec
    scope: str  # "top" or "sub"
    axes: tuple  # non-feature axes (per step for sub-layers)
    dim: int  # feature size, or vocabulary size for sparse values
    sparse: bool = False

    @property
    def cls(self):
        return self.spec.cls


@dataclass
class CompiledGraph:
    cfg: NetworkConfig
    mode: ExecMode
    dims: DataDims
    hoist: bool
    infos: dict
    pre_loop: list
    loop_body: list
    post_loop: list
    loop_carried: list
    param_manifest: dict
    rec_name: str | None = None
    choice: str | None = None
    sampling_prob: float = 0.0
    stage: dict = field(default_factory=dict)
    pre_choice: list = field(default_factory=list)
    post_choice: list = field(default_factory=list)
    loss_layers: list = field(default_factory=list)

    def qualify(self, name: str) -> str:
        if name in self.infos:
            return name
        if self.rec_name and f"{self.rec_name}/{name}" in self.infos:
            return f"{self.rec_name}/{name}"
        raise KeyError(name)

    def stage_of(self, name: str) -> str:
        """``pre_loop``, ``loop_body`` or ``post_loop`` for a (possibly bare) layer name."""
        return self.stage[self.qualify(name)]

    def schedule_text(self) -> str:
        lines = [f"mode: {self.mode.value} (hoisting {'on' if self.hoist else 'off'})"]
        for title, nodes in ((PRE, self.pre_loop), (LOOP, self.loop_body),
                             (POST, self.post_loop)):
            lines.append(f"{title}: {len(nodes)}")
            lines.extend(f"  {n}" for n in nodes)
        lines.append("loop_carried:")
        lines.extend(f"  {n} <- {rule}" for n, rule in self.loop_carried)
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# shape inference


def _qual(rec, name):
    return f"{rec}/{name}"


def _data_info(dims):
    spec = LayerSpec(DATA, "data")
    return LayerInfo(DATA, spec, "top", (BATCH, TIME), dims.src_vocab, sparse=True)


def _union(*axes_list):
    names = set()
    for axes in axes_list:
        names.update(axes)
    return tuple(a for a in (BATCH, DEC_TIME, TIME) if a in names)


def _top_refs(spec: LayerSpec):
    refs = spec.refs
    if not refs and spec.subnet is None and spec.cls not in ("decide",):
        return [Ref(PLAIN, DATA)]
    return refs


def _infer_layer(spec, scope, inputs, dims, qname):
    """``inputs``: list of LayerInfo (None for not-yet-known prev inputs)."""
    known = [i for i in inputs if i is not None]

    def fail(msg):
        raise ConfigError(f"layer {qname!r}: {msg}")

    cls = spec.cls
    if cls == "linear":
        if len(known) == 1 and known[0].sparse:
            return known[0].axes, spec.n_out, False
        if any(i.sparse for i in known):
            fail("cannot mix sparse and dense inputs")
        return _union(*(i.axes for i in known)), spec.n_out, False
    if cls == "rec":
        if not known or any(i.sparse for i in known):
            fail("rec layer needs dense inputs")
        axes = _union(*(i.axes for i in known))
        if axes != (BATCH, TIME):
            fail(f"rec layer needs [B, T] inputs, got {axes}")
        return axes, spec.n_out, False
    if cls == "rnn_cell":
        axes = _union(*(i.axes for i in known))
        if TIME in axes or DEC_TIME in axes:
            fail(f"rnn_cell input must be per-step [B], got {axes}")
        return (BATCH,), spec.n_out, False
    if cls == "copy":
        if len(known) == 1:
            i = known[0]
            return i.axes, i.dim, i.sparse
        if any(i.sparse for i in known):
            fail("cannot concatenate sparse inputs")
        return _union(*(i.axes for i in known)), sum(i.dim for i in known), False
    if cls in ("combine", "activation"):
        if any(i.sparse for i in known):
            fail("sparse input not supported")
        dims_ = {i.dim for i in known} - {1}
        if len(dims_) > 1:
            fail(f"feature dims {sorted(dims_)} do not broadcast")
        return _union(*(i.axes for i in known)), (dims_.pop() if dims_ else 1), False
    if cls == "softmax_over_spatial":
        i = known[0]
        if TIME not in i.axes:
            fail("softmax_over_spatial needs an encoder time axis")
        return i.axes, i.dim, False
    if cls == "generic_attention":
        w, b = inputs[-2], inputs[-1]
        if TIME not in w.axes or TIME not in b.axes:
            fail("generic_attention needs time axes on weights and base")
        if w.dim != 1:
            fail(f"attention weights must have feature dim 1, got {w.dim}")
        axes = tuple(a for a in _union(w.axes, b.axes) if a != TIME)
        return axes, b.dim, False
    if cls == "softmax":
        if any(i.sparse for i in known):
            fail("sparse input not supported")
        n = spec.n_out or dims.trg_vocab
        if spec.get("loss") == "ce" and n != dims.trg_vocab:
            fail(f"n_out {n} does not match target vocabulary {dims.trg_vocab}")
        return _union(*(i.axes for i in known)), n, False
    if cls == "choice":
        i = known[0]
        return i.axes, i.dim, True
    if cls == "decide":
        i = known[0]
        return i.axes, i.dim, True
    fail(f"unsupported class {cls!r}")


def infer_shapes(cfg: NetworkConfig, dims: DataDims, dep=None) -> dict:
    """Per-layer axes and feature dims, iterated to a fixed point over prev: edges."""
    dep = dep or resolve_references(cfg)
    sub = cfg.subnet_layer()
    data = _data_info(dims)
    infos: dict[str, LayerInfo] = {}
    for _ in range(8):
        changed = False
        for node in dep.nodes:
            if sub is not None and node.startswith(sub.name + "/"):
                spec = sub.subnet[node[len(sub.name) + 1:]]
                scope = "sub"
                ins = []
                for ref in spec.refs:
                    if ref.kind == BASE:
                        ins.append(infos[ref.name])
                    else:
                        ins.append(infos.get(_qual(sub.name, ref.name)))
                if any(i is None for i, r in zip(ins, spec.refs) if r.kind != PREV):
                    continue
                if spec.cls in ("choice", "softmax_over_spatial") and ins[0] is None:
                    continue
            else:
                spec = cfg[node]
                scope = "top"
                if spec.subnet is not None:
                    out = infos.get(_qual(node, "output"))
                    if out is None:
                        continue
                    new = LayerInfo(node, spec, scope, (BATCH, DEC_TIME), out.dim, out.sparse)
                    changed |= _store(infos, new)
                    continue
                ins = [data if r.name == DATA else infos[r.name] for r in _top_refs(spec)]
            axes, dim, sparse = _infer_layer(spec, scope, ins, dims, node)
            changed |= _store(infos, LayerInfo(node, spec, scope, axes, dim, sparse))
        if not changed:
            break
    missing = [n for n in dep.nodes if n not in infos]
    if missing:
        raise ConfigError(f"could not infer shapes of layers {missing}")
    return infos


def _store(infos, new):
    old = infos.get(new.qname)
    if old is not None and (old.axes, old.dim, old.sparse) == (new.axes, new.dim, new.sparse):
        return False
    infos[new.qname] = new
    return True


def _input_infos(info: LayerInfo, infos, rec, dims):
    spec = info.spec
    if info.scope == "top":
        return [_data_info(dims) if r.name == DATA else infos[r.name] for r in _top_refs(spec)]
    out = []
    for r in spec.refs:
        out.append(infos[r.name] if r.kind == BASE else infos[_qual(rec, r.name)])
    return out


def param_shapes(info: LayerInfo, inputs) -> dict:
    spec = info.spec
    q = info.qname
    cls = spec.cls
    if cls == "linear":
        if len(inputs) == 1 and inputs[0].sparse:
            d_in = inputs[0].dim
        else:
            d_in = sum(i.dim for i in inputs)
        return {f"{q}/W": (d_in, info.dim), f"{q}/b": (info.dim,)}
    if cls == "softmax":
        d_in = sum(i.dim for i in inputs)
        return {f"{q}/W": (d_in, info.dim), f"{q}/b": (info.dim,)}
    if cls == "rec" and spec.subnet is None or cls == "rnn_cell":
        d_in = sum(i.dim for i in inputs)
        h = info.dim
        return {f"{q}/W": (d_in, 4 * h), f"{q}/R": (h, 4 * h), f"{q}/b": (4 * h,)}
    return {}


# ---------------------------------------------------------------------------
# compilation and hoisting


def compile_graph(cfg: NetworkConfig, mode: ExecMode, dims: DataDims, hoist: bool = True,
                  sampling_prob: float = 0.0, sink: bool = False) -> CompiledGraph:
    """Compile ``cfg`` for ``mode`` with loop-invariant hoisting (unless ``hoist=False``).

    ``sink=True`` additionally moves loop-variant layers that feed nothing
    recurrent (the readout and softmax of a teacher-forced decoder) after the
    loop, where they run once over the stacked sequence.  It is off by
    default: a layer stays in the loop body whenever it depends on the loop.
    """
    diags = validate_config(cfg)
    if diags:
        raise ConfigError("; ".join(diags))
    if not 0.0 <= sampling_prob <= 1.0:
        raise ValueError(f"sampling probability {sampling_prob} outside [0, 1]")
    dep = resolve_references(cfg)
    infos = infer_shapes(cfg, dims, dep)
    sub = cfg.subnet_layer()
    rec = sub.name if sub is not None else None
    manifest = {}
    for node in dep.nodes:
        info = infos[node]
        manifest.update(param_shapes(info, _input_infos(info, infos, rec, dims)))
    manifest = {k: manifest[k] for k in sorted(manifest)}

    stage: dict[str, str] = {}
    loop_carried = []
    choice = None
    loss_layers = []
    pre_choice, post_choice = [], []
    if sub is not None:
        sub_nodes = [n for n in dep.nodes if n.startswith(rec + "/")]
        choice = next(n for n in sub_nodes if infos[n].cls == "choice")
        part = hoist_loop_invariants(sub.subnet, mode, hoist, sink)
        for n in sub_nodes:
            stage[n] = part[n[len(rec) + 1:]]
        if mode is not ExecMode.DECODE:
            has_loss = [n for n in sub_nodes if infos[n].spec.get("loss")]
            if not has_loss:
                raise ConfigError(f"layer {rec!r}: subnetwork has no loss for training")
            loss_layers = has_loss
        loop_nodes = [n for n in sub_nodes if stage[n] == LOOP]
        for n in loop_nodes:
            spec = infos[n].spec
            if spec.cls == "rnn_cell":
                loop_carried.append((n, "lstm state (zeros)"))
            for r in spec.refs:
                q = _qual(rec, r.name)
                if r.kind == PREV and stage.get(q) == LOOP and q not in [c for c, _ in loop_carried]:
                    loop_carried.append((q, _initial_rule(infos[q])))
        if choice in loop_nodes:
            after = {choice}
            for n in loop_nodes:
                spec = infos[n].spec
                if any(r.kind == PLAIN and _qual(rec, r.name) in after for r in spec.refs):
                    after.add(n)
            pre_choice = [n for n in loop_nodes if n not in after]
            post_choice = [n for n in loop_nodes if n in after and n != choice]
        else:
            pre_choice = loop_nodes
    for node in dep.nodes:
        if node in stage:
            continue
        info = infos[node]
        if rec is not None and (node == rec or _depends_on(cfg, node, rec)):
            stage[node] = POST
        else:
            stage[node] = PRE
    order = dep.nodes
    pre = [n for n in order if stage[n] == PRE and (infos[n].scope == "top")]
    pre += [n for n in order if stage[n] == PRE and infos[n].scope == "sub"]
    post = [n for n in order if stage[n] == POST and infos[n].scope == "sub"]
    post += [f"{n}:loss" for n in loss_layers]
    post += [n for n in order if stage[n] == POST and infos[n].scope == "top"]
    loop = [n for n in order if stage[n] == LOOP]
    return CompiledGraph(
        cfg=cfg, mode=mode, dims=dims, hoist=hoist, infos=infos,
        pre_loop=pre, loop_body=loop, post_loop=post, loop_carried=loop_carried,
        param_manifest=manifest, rec_name=rec, choice=choice, sampling_prob=sampling_prob,
        stage=stage, pre_choice=pre_choice, post_choice=post_choice, loss_layers=loss_layers,
    )


compile = compile_graph  # noqa: A001


def _initial_rule(info):
    if "initial_output" in info.spec.attrs:
        return f"constant {info.spec.attrs['initial_output']}"
    if info.sparse:
        return f"token {BOS_ID}"
    return "zeros"


def _depends_on(cfg, node, target):
    seen, work = set(), [node]
    while work:
        n = work.pop()
        for r in cfg[n].refs:
            if r.name == target:
                return True
            if r.name in cfg and r.name not in seen:
                seen.add(r.name)
                work.append(r.name)
    return False


def hoist_loop_invariants(subnet: NetworkConfig, mode: ExecMode, hoist: bool = True,
                          sink: bool = False) -> dict:
    """Partition subnetwork layers into pre_loop / loop_body / post_loop.

    A layer is loop-variant if it is the step-local choice, an ``rnn_cell``,
    reads a ``prev:`` value, or (transitively) consumes a variant layer.
    Variant layers stay in ``loop_body``; with ``sink`` the ones no
    loop-carried computation depends on go to ``post_loop`` instead.
    """
    names = list(subnet.layers)
    if not hoist:
        return {n: LOOP for n in names}
    step_local = mode.step_local_choice

    def inputs(name):
        spec = subnet[name]
        if spec.cls == "choice" and not step_local:
            return []  # ground truth labels: the choice does not read the model
        return [r for r in spec.refs if r.kind in (PLAIN, PREV) and r.name in subnet]

    variant = set()
    for n in names:
        spec = subnet[n]
        if spec.cls == "rnn_cell" or (spec.cls == "choice" and step_local):
            variant.add(n)
        if any(r.kind == PREV for r in inputs(n)):
            variant.add(n)
    consumers = {n: [] for n in names}
    for n in names:
        for r in inputs(n):
            if r.kind == PLAIN:
                consumers[r.name].append(n)
    work = list(variant)
    while work:
        n = work.pop()
        for c in consumers[n]:
            if c not in variant:
                variant.add(c)
                work.append(c)

    succ = {n: [] for n in names}
    for n in names:
        for r in inputs(n):
            succ[r.name].append(n)
    core = {n for comp in cyclic_components(succ) for n in comp}
    core |= {n for n in names if subnet[n].cls == "rnn_cell"}
    if step_local:
        core |= {n for n in names if subnet[n].cls == "choice"}
    core &= variant
    work = list(core)
    while work:
        n = work.pop()
        for r in inputs(n):
            if r.name in variant and r.name not in core:
                core.add(r.name)
                work.append(r.name)
    out = {}
    for n in names:
        out[n] = PRE if n not in variant else (LOOP if n in core or not sink else POST)
    return out


# ---------------------------------------------------------------------------
# parameters


def init_params(g: CompiledGraph, seed: int = 0, names=None) -> ParamStore:
    """Glorot-uniform weights, zero biases, LSTM forget-gate bias 1."""
    lstm_biases = lstm_bias_names(g)
    store = ParamStore()
    for name, shape in g.param_manifest.items():
        if names is not None and name not in names:
            continue
        store[name] = Tensor(init_param(name, shape, seed, lstm_bias=name in lstm_biases))
    return store


def lstm_bias_names(g: CompiledGraph) -> set:
    return {
        f"{q}/b" for q, info in g.infos.items()
        if info.cls == "rnn_cell" or (info.cls == "rec" and info.spec.subnet is None)
    }


def init_param(name, shape, seed, lstm_bias=False):
    dtype = T.default_dtype()
    if len(shape) == 1:
        out = np.zeros(shape, dtype=dtype)
        if lstm_bias:
            h = shape[0] // 4
            out[h:2 * h] = 1.0
        return out
    rng = T.rng_for(seed, "init", name)
    fan_in, fan_out = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# execution


class StepRng:
    """Dropout/sampling randomness keyed by (seed, update step, layer, time)."""

    def __init__(self, seed: int, step: int = 0):
        self.seed = int(seed)
        self.step = int(step)

    def gen(self, *keys):
        return T.rng_for(self.seed, self.step, *keys)


@dataclass
class TrainOutput:
    loss: Tensor
    tape: T.Tape
    values: dict
    per_seq_loss: np.ndarray
    n_tokens: int
    logp: dict = field(default_factory=dict)


class _Run:
    """Evaluation environment for one batch."""

    def __init__(self, g: CompiledGraph, params: ParamStore, src, src_lens, train, rng,
                 n_steps=None):
        self.g = g
        self.p = params
        self.train = train
        self.rng = rng
        self.src = Tensor(np.asarray(src, dtype=np.int64), (BATCH, TIME))
        self.src_lens = np.asarray(src_lens, dtype=np.int64)
        self.rows = self.src.shape[0]
        self.t_src = self.src.shape[1]
        self.n_steps = n_steps
        self.top: dict[str, Tensor] = {}
        self.seq: dict[str, Tensor] = {}
        self.rec = g.rec_name

    # -- helpers -----------------------------------------------------------

    def qual(self, name):
        return f"{self.rec}/{name}"

    def initial(self, q):
        info = self.g.infos[q]
        init = info.spec.attrs.get("initial_output")
        if info.sparse:
            value = BOS_ID if init is None else int(init)
            return Tensor(np.full((self.rows,), value, dtype=np.int64), (BATCH,))
        shape = []
        for a in info.axes:
            shape.append(self.rows if a == BATCH else self.t_src)
        shape.append(info.dim)
        fill = 0.0 if init is None else float(init)
        return Tensor(np.full(shape, fill, dtype=T.default_dtype()), info.axes + (FEATURE,))

    def _dropout(self, q, idx, x, rate, t):
        """``t``: decoder step, ``None`` for top-level, ``"seq"`` for whole sequences."""
        if not self.train or rate == 0.0 or x.data.dtype.kind not in "f":
            return x
        if t == "seq":
            axes = tuple(a for a in x.axes if a != DEC_TIME)
            shape = tuple(s for a, s in zip(x.axes, x.shape) if a != DEC_TIME)
            masks = [T.dropout_mask(self.rng.gen(q, idx, tt), shape, rate, x.data.dtype)
                     for tt in range(self.n_steps)]
            out_axes = T._union_axes(axes, (DEC_TIME,))
            mask = np.stack(masks, axis=out_axes.index(DEC_TIME))
            return T.mul(x, Tensor(mask, out_axes))
        key = -1 if t is None else t
        mask = T.dropout_mask(self.rng.gen(q, idx, key), x.shape, rate, x.data.dtype)
        return T.mul(x, Tensor(mask, x.axes))

    # -- layer evaluation ----------------------------------------------------

    def eval_layer(self, q, get, t):
        """Evaluate layer ``q``; ``get(ref)`` resolves references."""
        info = self.g.infos[q]
        spec = info.spec
        cls = spec.cls
        rate = spec.attrs.get("dropout", 0.0)
        p = self.p
        refs = [Ref(PLAIN, DATA)] if info.scope == "top" and not spec.refs else spec.refs
        if cls == "generic_attention":
            a = get(Ref.parse(spec.attrs["weights"]))
            base = get(Ref.parse(spec.attrs["base"]))
            base = self._dropout(q, 0, base, rate, t)
            return L.generic_attention(a, base)
        ins = []
        for r in refs:
            x = get(r)
            if self._is_softmax(r, info) and cls != "choice":
                x = T.exp(x)
            ins.append(x)
        if cls == "linear":
            if len(ins) == 1 and ins[0].data.dtype.kind == "i":
                return L.embed(ins[0], ins[0].axes, p[f"{q}/W"], p[f"{q}/b"],
                               spec.get("activation"), layer=q)
            ins = [self._dropout(q, i, x, rate, t) for i, x in enumerate(ins)]
            return L.linear(ins, p[f"{q}/W"], p[f"{q}/b"], spec.get("activation"))
        if cls == "softmax":
            ins = [self._dropout(q, i, x, rate, t) for i, x in enumerate(ins)]
            return T.log_softmax(L.linear(ins, p[f"{q}/W"], p[f"{q}/b"]))
        ins = [self._dropout(q, i, x, rate, t) for i, x in enumerate(ins)]
        if cls == "combine":
            out = T.elementwise(spec.attrs["kind"], *ins)
            return L.apply_activation(spec.get("activation"), out)
        if cls == "activation":
            return L.apply_activation(spec.attrs["activation"], ins[0])
        if cls == "copy":
            return ins[0] if len(ins) == 1 else T.concat(ins)
        if cls == "softmax_over_spatial":
            return L.softmax_over_spatial(ins[0], self.src_lens)
        if cls == "rec":
            x = ins[0] if len(ins) == 1 else T.concat(ins)
            lp = L.LstmParams(p[f"{q}/W"], p[f"{q}/R"], p[f"{q}/b"])
            return L.lstm_sequence(lp, x, self.src_lens, spec.attrs.get("direction", 1))
        if cls == "decide":
            return ins[0]
        raise ConfigError(f"layer {q!r}: class {cls!r} not evaluable here")

    def _is_softmax(self, ref, info):
        if ref.name == DATA:
            return False
        if info.scope == "top" or ref.kind == BASE:
            target = ref.name
        else:
            target = self.qual(ref.name)
        return self.g.infos[target].cls == "softmax"

    def get_top(self, ref):
        if ref.name == DATA:
            return self.src
        return self.top[ref.name]

    def run_top(self, nodes):
        for q in nodes:
            info = self.g.infos[q]
            if info.scope != "top" or info.spec.subnet is not None:
                continue
            self.top[q] = self.eval_layer(q, self.get_top, None)


def _at(x: Tensor, t: int) -> Tensor:
    return T.select(x, DEC_TIME, t) if x.axes and DEC_TIME in x.axes else x


def _run_teacher_forced(g: CompiledGraph, batch, params, rng, train, targets=None):
    """Forward pass over a batch with the loop unrolled to the longest target."""
    trg = np.asarray(batch.trg if targets is None else targets, dtype=np.int64)
    n_steps = trg.shape[1]
    run = _Run(g, params, batch.src, batch.src_lens, train, rng, n_steps)
    rec = g.rec_name
    infos = g.infos
    run.run_top([n for n in g.pre_loop if infos[n].scope == "top"])
    trg_t = Tensor(trg, (BATCH, DEC_TIME))
    choice = g.choice
    policy = None
    if g.mode is ExecMode.SCHEDULED_SAMPLING and g.sampling_prob > 0:
        policy = g.sampling_prob

    init_cache: dict = {}

    def initial(q):
        if q not in init_cache:
            init_cache[q] = run.initial(q)
        return init_cache[q]

    stacked_lists: dict[str, list] = {}
    stacked: dict[str, Tensor] = {}

    def stacked_value(q):
        if q not in stacked:
            stacked[q] = T.stack(stacked_lists[q], DEC_TIME)
        return stacked[q]

    def shifted(q):
        key = "prev:" + q
        if key not in stacked:
            if g.stage[q] == LOOP:
                x = stacked_value(q)
            else:
                x = run.seq[q]
            if DEC_TIME in x.axes:
                stacked[key] = T.shift_right(x, DEC_TIME, initial(q))
            else:
                stacked[key] = T.stack([initial(q)] + [x] * (n_steps - 1), DEC_TIME)
        return stacked[key]

    def get_seq(ref):
        if ref.kind == BASE:
            return run.top[ref.name]
        q = run.qual(ref.name)
        if ref.kind == PREV:
            return shifted(q)
        if g.stage[q] == LOOP:
            return stacked_value(q)
        return run.seq[q]

    # sub-layers hoisted in front of the loop
    for q in g.pre_loop:
        if infos[q].scope != "sub":
            continue
        if q == choice:
            run.seq[q] = trg_t
        else:
            run.seq[q] = run.eval_layer(q, get_seq, "seq")

    loop = g.loop_body
    needed_after = _needed_after_loop(g)
    cells: dict = {}
    prev: dict = {}
    for t in range(n_steps if loop else 0):
        cur: dict = {}

        def get_step(ref, t=t, cur=cur):
            if ref.kind == BASE:
                return run.top[ref.name]
            q = run.qual(ref.name)
            st = g.stage[q]
            if ref.kind == PLAIN:
                return cur[q] if st == LOOP else _at(run.seq[q], t)
            if t == 0:
                return initial(q)
            return prev[q] if st == LOOP else _at(run.seq[q], t - 1)

        for q in loop:
            info = infos[q]
            if info.cls == "choice":
                true_t = trg[:, t]
                if policy is None:
                    ids = true_t
                else:
                    src_ref = info.spec.refs[0]
                    logp_t = get_step(src_ref)
                    pol = L.ChoicePolicy("sample", policy, rng.gen(q, "sample", t))
                    ids = L.choice_select(pol, logp_t, true_t)
                cur[q] = Tensor(np.asarray(ids, dtype=np.int64), (BATCH,))
            elif info.cls == "rnn_cell":
                cur[q] = _cell_step(run, q, get_step, cells, t)
            else:
                cur[q] = run.eval_layer(q, get_step, t)
        for q in needed_after:
            stacked_lists.setdefault(q, []).append(cur[q])
        prev = cur

    for q in g.post_loop:
        if q.endswith(":loss") or infos[q].scope != "sub":
            continue
        run.seq[q] = run.eval_layer(q, get_seq, "seq")

    logp = {}
    for q in g.loss_layers:
        logp[q] = stacked_value(q) if g.stage[q] == LOOP else run.seq[q]
    if rec is not None:
        out_q = run.qual("output")
        run.top[rec] = stacked_value(out_q) if g.stage[out_q] == LOOP else run.seq[out_q]
        run.run_top([n for n in g.post_loop if not n.endswith(":loss")
                     and infos[n].scope == "top"])
    return run, logp


def _needed_after_loop(g):
    """Loop layers whose stacked values are read after the loop."""
    rec = g.rec_name
    need = set()
    for q in g.post_loop:
        if q.endswith(":loss"):
            need.add(q[:-5])
            continue
        info = g.infos[q]
        if info.scope != "sub":
            continue
        for r in info.spec.refs:
            if r.kind != BASE:
                need.add(f"{rec}/{r.name}")
    if rec is not None:
        need.add(f"{rec}/output")
    return [q for q in g.loop_body if q in need]


def _cell_step(run, q, get, cells, t):
    info = run.g.infos[q]
    spec = info.spec
    p = run.p
    ins = [get(r) for r in spec.refs]
    ins = [run._dropout(q, i, x, spec.attrs.get("dropout", 0.0), t) for i, x in enumerate(ins)]
    x = ins[0] if len(ins) == 1 else T.concat(ins)
    if q in cells:
        h, c = cells[q]
    else:
        z = np.zeros((run.rows, info.dim), dtype=T.default_dtype())
        h = c = Tensor(z, (BATCH, FEATURE))
    lp = L.LstmParams(p[f"{q}/W"], p[f"{q}/R"], p[f"{q}/b"])
    h, c = L.lstm_step(lp, x, h, c)
    cells[q] = (h, c)
    return h


def execute_training_graph(g: CompiledGraph, batch, params: ParamStore, rng: StepRng | None = None,
                           train: bool = True) -> TrainOutput:
    """Forward pass with loss; the returned tape covers all three stages.

    The loss is the label-smoothed cross entropy averaged over all valid
    target positions of the batch.
    """
    if g.mode is ExecMode.DECODE:
        raise ValueError("execute_training_graph needs a Train or ScheduledSampling graph")
    if getattr(batch, "trg", None) is None:
        raise ValueError("batch has no targets")
    rng = rng or StepRng(0, 0)
    trg = np.asarray(batch.trg, dtype=np.int64)
    trg_lens = np.asarray(batch.trg_lens, dtype=np.int64)
    mask = np.arange(trg.shape[1])[None, :] < trg_lens[:, None]
    with T.Tape() as tape:
        run, logp = _run_teacher_forced(g, batch, params, rng, train)
        total = None
        per_seq = np.zeros(len(trg_lens))
        for q in g.loss_layers:
            eps = g.infos[q].spec.attrs.get("loss_opts", {}).get("label_smoothing", 0.0)
            lp = logp[q]
            loss = L.ce_label_smoothing(lp, trg, eps, mask)
            total = loss if total is None else T.add(total, loss)
            per_seq += _per_seq_ce(lp.data, trg, mask, eps)
    if not np.isfinite(total.data):
        _raise_non_finite(g, run, logp, mask)
    return TrainOutput(total, tape, {**run.top, **run.seq}, per_seq, int(mask.sum()), logp)


def _per_seq_ce(lp, trg, mask, eps):
    v = lp.shape[-1]
    picked = np.take_along_axis(lp, trg[..., None], axis=-1)[..., 0]
    ce = -((1.0 - eps) * picked + eps / v * lp.sum(axis=-1))
    ce = np.where(mask, ce, 0.0)
    return ce.sum(axis=1) / mask.sum(axis=1)


def _raise_non_finite(g, run, logp, mask):
    for q, lp in logp.items():
        bad = ~np.isfinite(lp.data).all(axis=-1) & mask
        if bad.any():
            t = int(np.argwhere(bad.any(axis=0))[0][0])
            raise FloatingPointError(f"non-finite loss at step {t} in layer {q!r}")
    raise FloatingPointError("non-finite loss")


def sequence_scores(g: CompiledGraph, batch, params: ParamStore, targets, target_lens):
    """Differentiable sum of token log-probs of forced ``targets`` per sequence.

    Must run inside an active :class:`~seqnet.tensor.Tape` to get gradients.
    Dropout is off so the scores agree with what the decoder saw.
    """
    targets = np.asarray(targets, dtype=np.int64)
    target_lens = np.asarray(target_lens, dtype=np.int64)
    run, logp = _run_teacher_forced(g, batch, params, StepRng(0, 0), False, targets=targets)
    q = g.loss_layers[0]
    picked = T.pick(logp[q], targets)
    mask = (np.arange(targets.shape[1])[None, :] < target_lens[:, None]).astype(picked.data.dtype)
    return T.reduce_sum(T.mul(picked, Tensor(mask, (BATCH, DEC_TIME))), DEC_TIME)


# ---------------------------------------------------------------------------
# step-wise decoding


@dataclass
class LoopState:
    """Per-row recurrent state of the decoder loop (rows = batch x beam)."""

    run: _Run
    t: int = 0
    prev: dict = field(default_factory=dict)
    cur: dict = field(default_factory=dict)
    cells: dict = field(default_factory=dict)

    @property
    def rows(self):
        return self.run.rows


def init_decoder(g: CompiledGraph, src, src_lens, params: ParamStore, beam: int = 1) -> LoopState:
    """Run everything before the loop and replicate it ``beam`` times per sentence."""
    if g.mode is not ExecMode.DECODE:
        raise ValueError("init_decoder needs a Decode-mode graph")
    src = np.asarray(src, dtype=np.int64)
    src_lens = np.asarray(src_lens, dtype=np.int64)
    with T.no_tape():
        run = _Run(g, params, src, src_lens, False, None)
        run.run_top([n for n in g.pre_loop if g.infos[n].scope == "top"])
        for q in g.pre_loop:
            if g.infos[q].scope == "sub":
                run.seq[q] = run.eval_layer(q, lambda r: _get_invariant(run, r), 0)
    if beam > 1:
        rows = np.repeat(np.arange(len(src)), beam)
        run.src = Tensor(src[rows], (BATCH, TIME))
        run.src_lens = src_lens[rows]
        run.rows = len(rows)
        run.top = {k: _take(v, rows) for k, v in run.top.items()}
        run.seq = {k: _take(v, rows) for k, v in run.seq.items()}
    return LoopState(run)


def _get_invariant(run, ref):
    if ref.kind == BASE:
        return run.top[ref.name]
    return run.seq[run.qual(ref.name)]


def _take(x: Tensor, rows) -> Tensor:
    if x.axes is None or not x.axes or x.axes[0] != BATCH:
        return x
    return Tensor(x.data[rows], x.axes)


def reorder_state(state: LoopState, rows) -> LoopState:
    """Gather state rows (``rows[i]`` = parent row of new row ``i``)."""
    rows = np.asarray(rows, dtype=np.int64)
    return LoopState(
        state.run,
        state.t,
        {k: _take(v, rows) for k, v in state.prev.items()},
        {k: _take(v, rows) for k, v in state.cur.items()},
        {k: (_take(h, rows), _take(c, rows)) for k, (h, c) in state.cells.items()},
    )


def step_decoder(g: CompiledGraph, state: LoopState, feedback_tokens):
    """Advance one output step.

    ``feedback_tokens`` are the tokens chosen at the previous step (ignored at
    ``t = 0``, where ``prev:`` values take their initial rule).  Returns
    ``(log_probs [rows, V], new_state)``.
    """
    run = state.run
    choice = g.choice
    src_q = run.qual(g.infos[choice].spec.refs[0].name)
    with T.no_tape():
        prev = state.prev
        cells = dict(state.cells)
        if state.t > 0:
            fb = np.asarray(feedback_tokens, dtype=np.int64)
            if fb.shape != (run.rows,):
                raise ValueError(f"feedback shape {fb.shape} does not match {run.rows} rows")
            done = dict(state.cur)
            done[choice] = Tensor(fb, (BATCH,))
            getter = _decode_getter(g, run, done, state.prev, state.t - 1)
            for q in g.post_choice:
                done[q] = _eval_loop_layer(run, q, getter, cells, state.t - 1)
            prev = done
        cur: dict = {}
        getter = _decode_getter(g, run, cur, prev, state.t)
        for q in g.pre_choice:
            cur[q] = _eval_loop_layer(run, q, getter, cells, state.t)
    new = LoopState(run, state.t + 1, prev, cur, cells)
    return cur[src_q].data, new


def _eval_loop_layer(run, q, get, cells, t):
    if run.g.infos[q].cls == "rnn_cell":
        return _cell_step(run, q, get, cells, t)
    return run.eval_layer(q, get, t)


def _decode_getter(g, run, cur, prev, t):
    init_cache = {}

    def get(ref):
        if ref.kind == BASE:
            return run.top[ref.name]
        q = run.qual(ref.name)
        st = g.stage[q]
        if ref.kind == PLAIN:
            return cur[q] if st == LOOP else run.seq[q]
        if t == 0:
            if q not in init_cache:
                init_cache[q] = run.initial(q)
            return init_cache[q]
        return prev[q] if st == LOOP else run.seq[q]

    return get


class GraphStepModel:
    """Adapter exposing a Decode graph to the beam search."""

    def __init__(self, g: CompiledGraph, params: ParamStore, src, src_lens):
        self.g = g
        self.params = params
        self.src = np.asarray(src)
        self.src_lens = np.asarray(src_lens)
        self.batch_size = len(self.src)
        self.vocab = g.infos[g.choice].dim

    def initial_state(self, beam):
        return init_decoder(self.g, self.src, self.src_lens, self.params, beam)

    def step(self, state, feedback):
        return step_decoder(self.g, state, feedback)

    def reorder(self, state, rows):
        return reorder_state(state, rows)

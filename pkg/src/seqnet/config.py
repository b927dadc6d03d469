"""Declarative network description: parsing, validation, reference resolution.

A network is a JSON object mapping layer names to layer dicts (``class``,
``from`` and class-specific attributes).  One ``rec`` layer may carry a layer
dict as its ``unit``; that is the recurrent subnetwork, where references can
be ``prev:name`` (previous step) or ``base:name`` (enclosing network).
"""

from __future__ import annotations

import copy
import hashlib
import heapq
import json
from dataclasses import dataclass, field

DATA = "data"
PLAIN, PREV, BASE = "plain", "prev", "base"

LAYER_CLASSES = (
    "linear", "rec", "copy", "combine", "activation", "softmax_over_spatial",
    "generic_attention", "rnn_cell", "choice", "softmax", "decide", "subnetwork",
)

_COMMON = {"class", "from", "dropout", "initial_output"}
_ATTRS = {
    "linear": ({"n_out"}, {"activation"}),
    "rec": ({"unit"}, {"n_out", "direction"}),
    "copy": (set(), set()),
    "combine": ({"kind"}, {"activation"}),
    "activation": ({"activation"}, set()),
    "softmax_over_spatial": (set(), set()),
    "generic_attention": ({"weights", "base"}, set()),
    "rnn_cell": ({"unit", "n_out"}, set()),
    "choice": (set(), {"beam_size"}),
    "softmax": (set(), {"n_out", "loss", "loss_opts"}),
    "decide": (set(), {"loss"}),
    "subnetwork": ({"subnetwork"}, set()),
}

UNIT_ALIASES = {
    "lstm": "lstm",
    "nativelstm2": "lstm",
    "nativelstm": "lstm",
    "lstmblock": "lstm",
    "standardlstm": "lstm",
}
ACTIVATIONS = ("identity", "tanh", "sigmoid", "relu", "exp", "log", "inv_fertility")
COMBINE_KINDS = ("add", "mul", "sub")
LOSSES = {"softmax": ("ce",), "decide": ("bleu",)}
LOSS_OPTS = {"label_smoothing"}


class ConfigError(ValueError):
    """Invalid network description."""


@dataclass(frozen=True)
class Ref:
    kind: str
    name: str

    @classmethod
    def parse(cls, text: str) -> "Ref":
        if not isinstance(text, str) or not text:
            raise ConfigError(f"invalid reference {text!r}")
        if text.startswith("prev:"):
            return cls(PREV, text[5:])
        if text.startswith("base:"):
            return cls(BASE, text[5:])
        if text in ("data", "data:data"):
            return cls(PLAIN, DATA)
        return cls(PLAIN, text)

    def __str__(self):
        return self.name if self.kind == PLAIN else f"{self.kind}:{self.name}"


@dataclass
class LayerSpec:
    name: str
    cls: str
    sources: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    subnet: "NetworkConfig | None" = None

    @property
    def refs(self) -> list[Ref]:
        """All references: ``from`` entries plus ``weights``/``base`` attributes."""
        out = [Ref.parse(s) for s in self.sources]
        for key in ("weights", "base"):
            if key in self.attrs:
                out.append(Ref.parse(self.attrs[key]))
        return out

    def get(self, key, default=None):
        return self.attrs.get(key, default)

    @property
    def n_out(self):
        return self.attrs.get("n_out")

    def to_dict(self) -> dict:
        d = {"class": self.cls}
        d["from"] = list(self.sources)
        for k in sorted(self.attrs):
            d[k] = copy.deepcopy(self.attrs[k])
        if self.subnet is not None:
            d["unit"] = self.subnet.to_dict()
        return d


@dataclass
class NetworkConfig:
    layers: dict  # name -> LayerSpec, in document order

    def __getitem__(self, name) -> LayerSpec:
        return self.layers[name]

    def __contains__(self, name):
        return name in self.layers

    def names(self):
        return list(self.layers)

    def subnet_layer(self) -> LayerSpec | None:
        """The top-level ``rec`` layer holding the recurrent subnetwork, if any."""
        for spec in self.layers.values():
            if spec.subnet is not None:
                return spec
        return None

    def to_dict(self) -> dict:
        return {name: spec.to_dict() for name, spec in self.layers.items()}

    def to_json(self, indent=2) -> str:
        return json.dumps({"network": self.to_dict()}, indent=indent)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def copy(self) -> "NetworkConfig":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# parsing


def parse_network_config(text, validate: bool = True) -> NetworkConfig:
    """Parse a JSON network description.

    Accepts ``{"network": {...}}`` or a bare layer map.  With ``validate``
    (the default) any diagnostic from :func:`validate_config` is raised.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    if isinstance(text, str):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(
                f"syntax error at line {e.lineno} column {e.colno}: {e.msg}"
            ) from None
    else:
        doc = text
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    net = doc.get("network")
    if isinstance(net, dict) and "class" not in net:
        doc = net
    cfg = network_from_dict(doc, top_level=True)
    if validate:
        diags = validate_config(cfg)
        if diags:
            raise ConfigError("; ".join(diags))
    return cfg


def network_from_dict(layers: dict, top_level: bool = True) -> NetworkConfig:
    if not layers:
        raise ConfigError("no layers")
    out = {}
    for name, d in layers.items():
        out[name] = _layer_from_dict(name, d, top_level)
    return NetworkConfig(out)


def _layer_from_dict(name: str, d, top_level: bool) -> LayerSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"layer {name!r}: definition must be an object")
    cls = d.get("class")
    if cls not in _ATTRS:
        raise ConfigError(f"layer {name!r}: unknown class {cls!r}")
    required, optional = _ATTRS[cls]
    allowed = required | optional | _COMMON
    for key in d:
        if key not in allowed:
            raise ConfigError(f"layer {name!r}: unknown attribute {key!r} for class {cls!r}")
    for key in sorted(required):
        if key not in d:
            raise ConfigError(f"layer {name!r}: missing required attribute {key!r}")
    sources = d.get("from", [])
    if isinstance(sources, str):
        sources = [sources]
    if not isinstance(sources, list) or not all(isinstance(s, str) for s in sources):
        raise ConfigError(f"layer {name!r}: 'from' must be a list of layer names")
    attrs = {k: copy.deepcopy(v) for k, v in d.items() if k not in ("class", "from")}
    subnet = None
    if cls == "rec" and isinstance(attrs.get("unit"), dict):
        if not top_level:
            raise ConfigError(f"layer {name!r}: nested recurrent subnetworks are not supported")
        subnet = network_from_dict(attrs.pop("unit"), top_level=False)
    elif cls == "subnetwork":
        raise ConfigError(f"layer {name!r}: class 'subnetwork' is not supported; use 'rec'")
    _normalise_attrs(name, cls, attrs, has_subnet=subnet is not None)
    return LayerSpec(name, cls, list(sources), attrs, subnet)


def _normalise_attrs(name, cls, attrs, has_subnet):
    def fail(msg):
        raise ConfigError(f"layer {name!r}: {msg}")

    if cls in ("rec", "rnn_cell") and not has_subnet:
        unit = attrs.get("unit")
        if not isinstance(unit, str) or unit.lower() not in UNIT_ALIASES:
            fail(f"unsupported unit {unit!r}")
        attrs["unit"] = UNIT_ALIASES[unit.lower()]
        if "n_out" not in attrs:
            fail("missing required attribute 'n_out'")
    if cls == "rec" and not has_subnet:
        attrs.setdefault("direction", 1)
        if attrs["direction"] not in (1, -1):
            fail(f"direction must be 1 or -1, got {attrs['direction']!r}")
    if "n_out" in attrs:
        n = attrs["n_out"]
        if not isinstance(n, int) or isinstance(n, bool) or n <= 0:
            fail(f"n_out must be a positive integer, got {n!r}")
    attrs.setdefault("dropout", 0.0)
    p = attrs["dropout"]
    if not isinstance(p, (int, float)) or isinstance(p, bool) or not 0 <= p < 1:
        fail(f"dropout must be in [0, 1), got {p!r}")
    attrs["dropout"] = float(p)
    if "activation" in attrs and attrs["activation"] not in ACTIVATIONS:
        fail(f"unknown activation {attrs['activation']!r}")
    if cls == "combine" and attrs["kind"] not in COMBINE_KINDS:
        fail(f"unknown combine kind {attrs['kind']!r}")
    if "loss" in attrs and attrs["loss"] not in LOSSES.get(cls, ()):
        fail(f"unsupported loss {attrs['loss']!r}")
    opts = attrs.get("loss_opts")
    if opts is not None:
        if not isinstance(opts, dict) or set(opts) - LOSS_OPTS:
            fail(f"unsupported loss_opts {opts!r}")
        eps = opts.get("label_smoothing", 0.0)
        if not isinstance(eps, (int, float)) or not 0 <= eps < 1:
            fail(f"label_smoothing must be in [0, 1), got {eps!r}")
    if "initial_output" in attrs and not isinstance(attrs["initial_output"], (int, float)):
        fail("initial_output must be a number")
    for key in ("weights", "base"):
        if key in attrs and not isinstance(attrs[key], str):
            fail(f"{key!r} must be a layer reference")


# ---------------------------------------------------------------------------
# validation


def validate_config(cfg: NetworkConfig) -> list[str]:
    """Diagnostics for every violated structural rule; empty iff valid."""
    diags: list[str] = []
    if not cfg.layers:
        return ["no layers"]
    subnets = [s for s in cfg.layers.values() if s.subnet is not None]
    if len(subnets) > 1:
        diags.append(
            "layers " + ", ".join(repr(s.name) for s in subnets)
            + ": only one recurrent subnetwork is supported"
        )
    _check_scope(cfg, None, diags)
    for sub in subnets:
        _check_scope(sub.subnet, cfg, diags, owner=sub.name)
        choices = [s.name for s in sub.subnet.layers.values() if s.cls == "choice"]
        if not choices:
            diags.append(f"layer {sub.name!r}: no choice layer in subnetwork")
        elif len(choices) > 1:
            diags.append(f"layer {sub.name!r}: multiple choice layers {choices}")
        if "output" not in sub.subnet:
            diags.append(f"layer {sub.name!r}: subnetwork has no layer named 'output'")
    return diags


def _check_scope(net: NetworkConfig, parent: NetworkConfig | None, diags, owner=None):
    where = (lambda n: f"{owner}/{n}") if owner else (lambda n: n)
    for spec in net.layers.values():
        if spec.cls not in _ATTRS:
            diags.append(f"layer {where(spec.name)!r}: unknown class {spec.cls!r}")
            continue
        if spec.subnet is not None and parent is not None:
            diags.append(f"layer {where(spec.name)!r}: nested subnetwork")
        if parent is None and spec.cls in ("choice", "rnn_cell"):
            diags.append(f"layer {spec.name!r}: class {spec.cls!r} only valid in a subnetwork")
        if parent is not None and spec.cls == "rec":
            diags.append(f"layer {where(spec.name)!r}: 'rec' inside subnetwork is not supported")
        if parent is None and spec.cls == "decide" and not any(
            Ref.parse(s).name in net and net[Ref.parse(s).name].subnet is not None
            for s in spec.sources
        ):
            diags.append(f"layer {spec.name!r}: decide must read a recurrent subnetwork")
        if spec.cls == "choice":
            refs = [r for r in spec.refs]
            if len(refs) != 1 or refs[0].kind != PLAIN or refs[0].name not in net \
                    or net[refs[0].name].cls != "softmax":
                diags.append(f"layer {where(spec.name)!r}: choice needs one softmax layer input")
        for ref in spec.refs:
            path = f"{where(spec.name)} -> {ref}"
            if ref.kind == BASE:
                if parent is None:
                    diags.append(f"layer {spec.name!r}: base reference outside subnetwork ({path})")
                elif ref.name not in parent:
                    diags.append(f"layer {where(spec.name)!r}: unknown base layer ({path})")
            elif ref.kind == PREV:
                if parent is None:
                    diags.append(f"layer {spec.name!r}: prev reference outside subnetwork ({path})")
                elif ref.name not in net:
                    diags.append(f"layer {where(spec.name)!r}: unknown prev layer ({path})")
            elif ref.name == DATA:
                if parent is not None:
                    diags.append(f"layer {where(spec.name)!r}: data input inside subnetwork")
            elif ref.name not in net:
                diags.append(f"layer {where(spec.name)!r}: unknown layer ({path})")
    for cycle in _plain_cycles(net):
        names = ", ".join(repr(where(n)) for n in cycle)
        diags.append(f"cycle without prev: through layers {names}")


def _plain_cycles(net: NetworkConfig) -> list[list[str]]:
    succ = {n: [] for n in net.layers}
    for spec in net.layers.values():
        for ref in spec.refs:
            if ref.kind == PLAIN and ref.name in succ:
                succ[ref.name].append(spec.name)
    return cyclic_components(succ)


def cyclic_components(succ: dict) -> list[list[str]]:
    """Strongly connected components that contain a cycle (size > 1 or self-loop)."""
    index, low, stack, on, out = {}, {}, [], set(), []
    counter = 0

    def visit(v):
        nonlocal counter
        index[v] = low[v] = counter
        counter += 1
        stack.append(v)
        on.add(v)
        work = [(v, iter(succ[v]))]
        while work:
            node, it = work[-1]
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on.add(w)
                    work.append((w, iter(succ[w])))
                    break
                if w in on:
                    low[node] = min(low[node], index[w])
            else:
                work.pop()
                if work:
                    parent = work[-1][0]
                    low[parent] = min(low[parent], low[node])
                if low[node] == index[node]:
                    comp = []
                    while True:
                        w = stack.pop()
                        on.discard(w)
                        comp.append(w)
                        if w == node:
                            break
                    if len(comp) > 1 or node in succ[node]:
                        out.append(sorted(comp))

    for n in sorted(succ):
        if n not in index:
            visit(n)
    return out


# ---------------------------------------------------------------------------
# dependency graph


@dataclass
class DepGraph:
    """Layer dependency graph; sub-layers are named ``"<rec layer>/<layer>"``."""

    nodes: list  # topological order (plain + base edges), lexicographic ties
    edges: list  # (src, dst, label)

    def inputs_of(self, node):
        return [(s, lab) for s, d, lab in self.edges if d == node]

    def order_index(self):
        return {n: i for i, n in enumerate(self.nodes)}


def resolve_references(cfg: NetworkConfig) -> DepGraph:
    """Labelled edges for every reference and a deterministic topological order."""
    edges = []
    nodes = list(cfg.layers)
    sub = cfg.subnet_layer()
    qual = {}
    if sub is not None:
        for n in sub.subnet.layers:
            qual[n] = f"{sub.name}/{n}"
            nodes.append(qual[n])
    for spec in cfg.layers.values():
        for ref in spec.refs:
            if ref.name == DATA:
                continue
            if ref.name not in cfg:
                raise ConfigError(f"layer {spec.name!r}: unresolvable reference {ref}")
            edges.append((ref.name, spec.name, PLAIN))
    if sub is not None:
        for spec in sub.subnet.layers.values():
            for ref in spec.refs:
                if ref.kind == BASE:
                    if ref.name not in cfg:
                        raise ConfigError(f"layer {qual[spec.name]!r}: unresolvable {ref}")
                    edges.append((ref.name, qual[spec.name], BASE))
                else:
                    if ref.name not in sub.subnet:
                        raise ConfigError(f"layer {qual[spec.name]!r}: unresolvable {ref}")
                    edges.append((qual[ref.name], qual[spec.name], ref.kind))
        if "output" in sub.subnet:
            edges.append((qual["output"], sub.name, PLAIN))
    order = topological_order(nodes, [(s, d) for s, d, lab in edges if lab != PREV])
    return DepGraph(order, edges)


def topological_order(nodes, edges) -> list:
    """Kahn's algorithm with lexicographic tie-breaking."""
    indeg = {n: 0 for n in nodes}
    succ = {n: [] for n in nodes}
    for s, d in edges:
        if s == d:
            raise ConfigError(f"cycle without prev: through layer {s!r}")
        succ[s].append(d)
        indeg[d] += 1
    heap = [n for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        n = heapq.heappop(heap)
        out.append(n)
        for d in succ[n]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(heap, d)
    if len(out) != len(nodes):
        left = sorted(n for n in nodes if n not in set(out))
        raise ConfigError(f"cycle without prev: through layers {left}")
    return out


def load_config(path) -> NetworkConfig:
    with open(path, encoding="utf-8") as f:
        return parse_network_config(f.read())

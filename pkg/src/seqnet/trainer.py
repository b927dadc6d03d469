"""Adam, learning-rate scheduling, layer-wise pretraining, epochs and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .compiler import (DataDims, ExecMode, StepRng, compile_graph, execute_training_graph,
                       init_params)
from .config import ConfigError, NetworkConfig, parse_network_config
from .data import ParallelCorpus, Vocab, batch_by_words
from .tensor import ParamStore, Tensor

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: ParamStore, grads: dict, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params.names():
        p = params[name].data
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        g = g.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: dict, max_norm: float | None) -> dict:
    if not max_norm:
        return grads
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


# ---------------------------------------------------------------------------
# learning-rate schedule


@dataclass
class LrSchedule:
    lr: float = 1e-3
    decay: float = 0.7
    threshold: float = 0.001
    patience: int = 1
    min_lr: float = 1e-5
    best: float = math.inf
    wait: int = 1  # epochs left before the next decay
    enabled: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError(f"decay factor {self.decay} outside (0, 1)")
        self.wait = self.patience


def lr_schedule_update(s: LrSchedule, cv_score: float) -> float:
    """Decay the rate after ``patience`` epochs without relative improvement ``threshold``."""
    if not s.enabled:
        s.best = min(s.best, cv_score)
        return s.lr
    if cv_score < s.best * (1.0 - s.threshold) or not math.isfinite(s.best):
        s.best = cv_score
        s.wait = s.patience
        return s.lr
    s.wait -= 1
    if s.wait <= 0:
        s.lr = max(s.lr * s.decay, s.min_lr)
        s.wait = s.patience
    return s.lr


# ---------------------------------------------------------------------------
# layer-wise pretraining


@dataclass
class EncoderStack:
    pairs: list  # [(forward layer, backward layer)] bottom to top
    top: str  # layer reading the topmost pair (the encoder copy layer)
    bottom_sources: list


def encoder_stack(cfg: NetworkConfig, top: str = "encoder") -> EncoderStack:
    """Locate a uniformly wired stack of bidirectional LSTM pairs under ``top``."""
    if top not in cfg or cfg[top].cls != "copy":
        raise ConfigError(f"pretraining needs a copy layer named {top!r} on top of the encoder")

    def is_lstm(name):
        return name in cfg and cfg[name].cls == "rec" and cfg[name].subnet is None

    pairs = []
    sources = list(cfg[top].sources)
    while sources and all(is_lstm(s) for s in sources):
        if len(sources) != 2:
            raise ConfigError(f"encoder level {sources} is not a bidirectional pair")
        a, b = (cfg[s] for s in sources)
        if a.sources != b.sources or {a.attrs.get("direction", 1), b.attrs.get("direction", 1)} != {1, -1}:
            raise ConfigError(f"encoder pair {sources} is not uniformly wired")
        fw, bw = (a.name, b.name) if a.attrs.get("direction", 1) == 1 else (b.name, a.name)
        pairs.append((fw, bw))
        sources = list(a.sources)
    if not pairs:
        raise ConfigError("no bidirectional LSTM encoder stack found")
    pairs.reverse()
    for lo, hi in zip(pairs, pairs[1:]):
        for name in hi:
            if sorted(cfg[name].sources) != sorted(lo):
                raise ConfigError(f"layer {name!r} does not read exactly the pair below it")
    return EncoderStack(pairs, top, sources)


def pretrain_depths(full_depth: int, start_depth: int = 2) -> list[int]:
    if full_depth <= start_depth:
        return [full_depth]
    return list(range(start_depth, full_depth + 1))


def pretrain_stage_config(full: NetworkConfig, stage: int, start_depth: int = 2) -> NetworkConfig:
    """``full`` with the encoder truncated to the stage's depth."""
    stack = encoder_stack(full)
    depths = pretrain_depths(len(stack.pairs), start_depth)
    if not 0 <= stage < len(depths):
        raise ValueError(f"stage {stage} outside 0..{len(depths) - 1}")
    depth = depths[stage]
    cfg = full.copy()
    for pair in stack.pairs[depth:]:
        for name in pair:
            del cfg.layers[name]
    cfg.layers[stack.top].sources = list(stack.pairs[depth - 1])
    return cfg


def grow_params(prev: ParamStore, graph, seed: int) -> ParamStore:
    """Copy every shared tensor and freshly initialize the rest of the next stage.

    ``graph`` is the compiled next-stage network; its manifest decides which
    tensors exist.
    """
    manifest = graph.param_manifest
    missing = [n for n in prev.names() if n not in manifest]
    if missing:
        raise ValueError(f"parameters {missing} are not in the next stage's manifest")
    fresh = init_params(graph, seed, names=[n for n in manifest if n not in prev])
    out = ParamStore()
    for name, shape in manifest.items():
        if name in prev:
            if tuple(prev[name].shape) != tuple(shape):
                raise ValueError(f"shape of {name!r} changes from {prev[name].shape} to {shape}")
            out[name] = Tensor(prev[name].data.copy())
        else:
            out[name] = fresh[name]
    return out


def grow_adam(state: AdamState, params: ParamStore) -> AdamState:
    """Keep the moments of surviving parameters; new ones start from zero."""
    return AdamState({n: state.m[n] for n in params.names() if n in state.m},
                     {n: state.v[n] for n in params.names() if n in state.v},
                     state.t, state.beta1, state.beta2, state.eps)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainOptions:
    word_budget: int = 1000
    max_epochs: int = 15
    clip: float = 5.0
    objective: str = "ce"  # "ce" | "risk"
    risk_beam: int = 4
    scheduled_sampling: float = 0.0
    label_smoothing: float | None = None
    hoist: bool = True
    pretrain: bool = True
    start_depth: int = 2
    epochs_per_stage: int = 2
    lr: float = 1e-3
    lr_decay: float = 0.7
    lr_threshold: float = 0.001
    lr_patience: int = 1
    min_lr: float = 1e-5
    lr_schedule: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.objective not in ("ce", "risk"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.word_budget < 1:
            raise ValueError("word budget must be positive")


@dataclass
class TrainState:
    params: ParamStore
    adam: AdamState
    lr: LrSchedule
    epoch: int = 0
    stage: int = 0
    seed: int = 0
    step: int = 0  # optimizer updates so far; keys the dropout masks
    history: list = field(default_factory=list)


def set_label_smoothing(cfg: NetworkConfig, eps: float) -> NetworkConfig:
    cfg = cfg.copy()
    rec = cfg.subnet_layer()
    specs = list(cfg.layers.values()) + (list(rec.subnet.layers.values()) if rec else [])
    for spec in specs:
        if spec.cls == "softmax" and spec.attrs.get("loss") == "ce":
            spec.attrs.setdefault("loss_opts", {})["label_smoothing"] = eps
    return cfg


def n_stages(cfg: NetworkConfig, opts: TrainOptions) -> int:
    if not opts.pretrain:
        return 1
    try:
        return len(pretrain_depths(len(encoder_stack(cfg).pairs), opts.start_depth))
    except ConfigError:
        return 1


def stage_for_epoch(epoch: int, stages: int, opts: TrainOptions) -> int:
    return min(epoch // max(1, opts.epochs_per_stage), stages - 1) if opts.pretrain else 0


def stage_config(cfg: NetworkConfig, stage: int, opts: TrainOptions) -> NetworkConfig:
    if opts.label_smoothing is not None:
        cfg = set_label_smoothing(cfg, opts.label_smoothing)
    if n_stages(cfg, opts) == 1:
        return cfg
    return pretrain_stage_config(cfg, stage, opts.start_depth)


class Trainer:
    """Owns the compiled graphs of every pretraining stage and the train state."""

    def __init__(self, cfg: NetworkConfig, dims: DataDims, opts: TrainOptions,
                 state: TrainState | None = None):
        self.full = cfg
        self.dims = dims
        self.opts = opts
        self.stages = n_stages(cfg, opts)
        self._graphs: dict = {}
        if state is None:
            g = self.graph(0)
            params = init_params(g, opts.seed)
            state = TrainState(params, AdamState(),
                               LrSchedule(opts.lr, opts.lr_decay, opts.lr_threshold,
                                          opts.lr_patience, opts.min_lr,
                                          enabled=opts.lr_schedule),
                               seed=opts.seed)
        self.state = state

    def config(self, stage: int | None = None) -> NetworkConfig:
        return stage_config(self.full, self.state.stage if stage is None else stage, self.opts)

    def graph(self, stage: int | None = None, mode: ExecMode | None = None):
        stage = self.state.stage if stage is None else stage
        if mode is None:
            mode = ExecMode.SCHEDULED_SAMPLING if self.opts.scheduled_sampling else ExecMode.TRAIN
        key = (stage, mode)
        if key not in self._graphs:
            self._graphs[key] = compile_graph(self.config(stage), mode, self.dims,
                                              hoist=self.opts.hoist,
                                              sampling_prob=self.opts.scheduled_sampling)
        return self._graphs[key]

    def eval_graph(self):
        return self.graph(mode=ExecMode.TRAIN)

    def decode_graph(self):
        return self.graph(mode=ExecMode.DECODE)

    def _enter_stage(self, stage: int):
        st = self.state
        if stage == st.stage:
            return
        st.params = grow_params(st.params, self.graph(stage), st.seed)
        st.adam = grow_adam(st.adam, st.params)
        st.stage = stage
        log.info("pretraining: stage %d, encoder depth %d", stage,
                 len(encoder_stack(self.config(stage)).pairs))

    def cv_loss(self, corpus: ParallelCorpus | None) -> float:
        """Per-token cross entropy (without label smoothing) with dropout off."""
        if corpus is None or len(corpus) == 0:
            return math.nan
        g = self.eval_graph()
        total, n = 0.0, 0
        rng = np.random.default_rng(0)
        for batch in batch_by_words(corpus, max(self.opts.word_budget, _longest(corpus)), rng):
            with T.no_tape():
                out = execute_training_graph(g, batch, self.state.params, train=False)
            lp = out.logp[g.loss_layers[0]].data
            mask = np.arange(batch.trg.shape[1])[None, :] < batch.trg_lens[:, None]
            picked = np.take_along_axis(lp, batch.trg[..., None], axis=-1)[..., 0]
            total -= float(picked[mask].sum())
            n += int(mask.sum())
        return total / n

    def train_epoch(self, train: ParallelCorpus, cv: ParallelCorpus | None = None):
        """One pass over the shuffled data; returns ``(train loss, cv loss)``."""
        st, opts = self.state, self.opts
        self._enter_stage(stage_for_epoch(st.epoch, self.stages, opts))
        g = self.graph()
        rng = T.rng_for(st.seed, "batches", st.epoch)
        losses, words = 0.0, 0
        for batch in batch_by_words(train, opts.word_budget, rng):
            if opts.objective == "risk":
                from .bleu import risk_gradients

                loss, grads, _ = risk_gradients(self.eval_graph(), self.decode_graph(), batch,
                                                st.params, opts.risk_beam)
            else:
                out = execute_training_graph(g, batch, st.params, StepRng(st.seed, st.step))
                grads = T.backward(out.tape, out.loss, st.params)
                loss = float(out.loss.data)
            adam_step(st.params, clip_global_norm(grads, opts.clip), st.adam, st.lr.lr)
            st.step += 1
            losses += loss * batch.n_words
            words += batch.n_words
        cv_loss = self.cv_loss(cv)
        if cv is not None:
            lr_schedule_update(st.lr, cv_loss)
        st.epoch += 1
        train_loss = losses / max(words, 1)
        st.history.append({"epoch": st.epoch, "train_loss": train_loss, "cv_loss": cv_loss,
                           "lr": st.lr.lr, "stage": st.stage})
        return train_loss, cv_loss

    def fit(self, train: ParallelCorpus, cv: ParallelCorpus | None = None, epochs=None,
            callback=None, checkpoint_dir=None, vocabs=None):
        """Train up to ``epochs`` more epochs; ``callback(trainer)`` returning True stops early."""
        epochs = self.opts.max_epochs if epochs is None else epochs
        for _ in range(epochs):
            t0 = time.perf_counter()
            train_loss, cv_loss = self.train_epoch(train, cv)
            log.info("epoch %d: train %.4f cv %.4f lr %.2e (%.1fs)", self.state.epoch,
                     train_loss, cv_loss, self.state.lr.lr, time.perf_counter() - t0)
            if checkpoint_dir is not None:
                save_checkpoint(checkpoint_dir, self, vocabs)
            if callback is not None and callback(self):
                break
        return self.state


def _longest(corpus):
    return max(max(len(s), len(t)) for s, t in corpus.pairs)


# ---------------------------------------------------------------------------
# checkpoints


def _write_floats(path, arrays):
    with open(path, "wb") as f:
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_floats(path, shapes):
    raw = np.fromfile(path, dtype="<f4")
    need = sum(int(np.prod(s)) for s in shapes)
    if raw.size != need:
        raise ValueError(f"{path} holds {raw.size} floats, manifest needs {need}")
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(raw[pos:pos + n].reshape(s).astype(np.float32))
        pos += n
    return out


def save_checkpoint(directory, trainer: Trainer, vocabs: tuple | None = None):
    """Write ``meta.json``, ``params.bin``, ``adam.bin`` and the network description."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    st = trainer.state
    names = st.params.names()
    cfg = trainer.config()
    lr = asdict(st.lr)
    meta = {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.digest(),
        "full_config_hash": trainer.full.digest(),
        "manifest": [{"name": n, "shape": list(st.params[n].shape)} for n in names],
        "epoch": st.epoch,
        "stage": st.stage,
        "lr": lr,
        "best_cv": None if math.isinf(st.lr.best) else st.lr.best,
        "rng": {"seed": st.seed, "step": st.step},
        "adam": {"t": st.adam.t, "beta1": st.adam.beta1, "beta2": st.adam.beta2,
                 "eps": st.adam.eps},
        "dims": {"src_vocab": trainer.dims.src_vocab, "trg_vocab": trainer.dims.trg_vocab},
        "options": asdict(trainer.opts),
        "history": st.history,
    }
    meta["lr"]["best"] = meta["best_cv"]
    _write_floats(d / "params.bin", [st.params[n].data for n in names])
    zeros = {n: np.zeros(st.params[n].shape, np.float32) for n in names}
    _write_floats(d / "adam.bin", [st.adam.m.get(n, zeros[n]) for n in names]
                  + [st.adam.v.get(n, zeros[n]) for n in names])
    (d / "network.json").write_text(cfg.to_json(), encoding="utf-8")
    (d / "full_network.json").write_text(trainer.full.to_json(), encoding="utf-8")
    if vocabs is not None:
        vocabs[0].save(d / "source.vocab")
        vocabs[1].save(d / "target.vocab")
    tmp = d / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    tmp.replace(d / "meta.json")


@dataclass
class Checkpoint:
    meta: dict
    config: NetworkConfig  # network the parameters belong to
    full_config: NetworkConfig
    params: ParamStore
    adam: AdamState
    vocabs: tuple | None


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"{d} is not a checkpoint directory (no meta.json)")
    meta = json.loads((d / "meta.json").read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
    cfg = parse_network_config((d / "network.json").read_text(encoding="utf-8"))
    if cfg.digest() != meta["config_hash"]:
        raise ValueError("network.json does not match the config hash in meta.json")
    full = parse_network_config((d / "full_network.json").read_text(encoding="utf-8"))
    names = [e["name"] for e in meta["manifest"]]
    shapes = [tuple(e["shape"]) for e in meta["manifest"]]
    params = ParamStore({n: Tensor(a) for n, a in zip(names, _read_floats(d / "params.bin", shapes))})
    adam = AdamState(t=meta["adam"]["t"], beta1=meta["adam"]["beta1"],
                     beta2=meta["adam"]["beta2"], eps=meta["adam"]["eps"])
    if (d / "adam.bin").exists() and adam.t > 0:
        mv = _read_floats(d / "adam.bin", shapes + shapes)
        adam.m = dict(zip(names, mv[:len(names)]))
        adam.v = dict(zip(names, mv[len(names):]))
    vocabs = None
    if (d / "source.vocab").exists():
        vocabs = (Vocab.load(d / "source.vocab"), Vocab.load(d / "target.vocab"))
    return Checkpoint(meta, cfg, full, params, adam, vocabs)


def resume_trainer(directory, opts: TrainOptions | None = None) -> Trainer:
    """Rebuild a :class:`Trainer` whose next epoch continues the saved run exactly."""
    ck = load_checkpoint(directory)
    meta = ck.meta
    if opts is None:
        opts = TrainOptions(**meta["options"])
    lr_meta = dict(meta["lr"])
    best = lr_meta.pop("best")
    wait = lr_meta.pop("wait")
    lr = LrSchedule(**lr_meta)
    lr.best = math.inf if best is None else best
    lr.wait = wait
    state = TrainState(ck.params, ck.adam, lr, meta["epoch"], meta["stage"],
                       meta["rng"]["seed"], meta["rng"]["step"], list(meta["history"]))
    dims = DataDims(**meta["dims"])
    return Trainer(ck.full_config, dims, opts, state)

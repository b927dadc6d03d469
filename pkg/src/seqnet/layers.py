"""Layer semantics: LSTM, spatial softmax, attention, feedback, choice, loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import TIME, Tensor

# gate blocks along the 4H axis; checkpoints depend on this order
GATE_ORDER = ("input", "forget", "candidate", "output")


@dataclass
class LstmParams:
    W: Tensor  # [D_in, 4H]
    R: Tensor  # [H, 4H]
    b: Tensor  # [4H]

    @property
    def hidden(self):
        return self.R.shape[0]


def lstm_step(params: LstmParams, x_t: Tensor, h_prev: Tensor, c_prev: Tensor):
    """Returns ``(h_t, c_t)``."""
    return T.lstm_step(x_t, h_prev, c_prev, params.W, params.R, params.b)


def lstm_sequence(params: LstmParams, xs: Tensor, seq_lens, direction: int = 1) -> Tensor:
    return T.lstm_sequence(xs, params.W, params.R, params.b, seq_lens, direction)


def apply_activation(name: str | None, x: Tensor) -> Tensor:
    if name in (None, "identity"):
        return x
    if name == "inv_fertility":
        return fertility_gate(x)
    return T.elementwise(name, x)


def linear(inputs, W: Tensor, b: Tensor | None, activation=None) -> Tensor:
    """Affine map of the feature-concatenated inputs."""
    x = T.concat(inputs)
    y = T.matmul(x, W)
    if b is not None:
        y = T.add(y, b)
    return apply_activation(activation, y)


def embed(ids, axes, W: Tensor, b: Tensor | None, activation=None, layer=None) -> Tensor:
    """Linear layer applied to one-hot ids, realised as a row lookup."""
    y = T.gather_rows(W, ids, axes=axes, layer=layer)
    if b is not None:
        y = T.add(y, b)
    return apply_activation(activation, y)


def softmax_over_spatial(e: Tensor, seq_lens) -> Tensor:
    """Softmax across the encoder time axis; masked positions are exactly 0."""
    if seq_lens is None:
        raise ValueError("softmax_over_spatial needs sequence lengths")
    return T.masked_softmax(e, TIME, seq_lens)


def generic_attention(weights: Tensor, base: Tensor) -> Tensor:
    """Context vector ``sum_t weights[t] * base[t]``."""
    if weights.extent(TIME) != base.extent(TIME):
        raise T.ShapeError(
            f"attention time extents differ: {weights.extent(TIME)} vs {base.extent(TIME)}"
        )
    return T.reduce_sum(T.mul(weights, base), TIME)


def attention_energy(enc_keys: Tensor, s_transformed: Tensor, weight_feedback: Tensor | None,
                     v: Tensor, v_bias: Tensor | None = None) -> Tensor:
    """``v . tanh(enc_keys + weight_feedback + s_transformed)``."""
    x = T.add(enc_keys, s_transformed)
    if weight_feedback is not None:
        x = T.add(x, weight_feedback)
    return linear([T.tanh(x)], v, v_bias)


def accumulate_attention(accum_prev: Tensor | None, a: Tensor) -> Tensor:
    return a if accum_prev is None else T.add(accum_prev, a)


def fertility_gate(x: Tensor) -> Tensor:
    """``2 * sigmoid(x)``: a multiplicative inverse-fertility factor in (0, 2)."""
    return T.scale(T.sigmoid(x), 2.0)


def fertility_scale(accum: Tensor, gate: Tensor) -> Tensor:
    return T.mul(accum, gate)


@dataclass
class ChoicePolicy:
    kind: str = "true"  # "true" | "sample" | "beam"
    p: float = 0.0
    rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.kind not in ("true", "sample", "beam"):
            raise ValueError(f"unknown choice policy {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"sampling probability {self.p} outside [0, 1]")


def choice_select(policy: ChoicePolicy, log_probs, true_labels) -> np.ndarray:
    """Token ids fed back to the next step under ``policy``."""
    if policy.kind == "beam":
        raise ValueError("beam expansion is performed by the beam decoder")
    if true_labels is None:
        raise ValueError("choice needs true labels in training")
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if policy.kind == "true" or policy.p == 0.0:
        return true_labels
    lp = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    predicted = lp.argmax(axis=-1)
    if policy.p == 1.0:
        return predicted
    use_model = policy.rng.random(true_labels.shape) < policy.p
    return np.where(use_model, predicted, true_labels)


def ce_label_smoothing(log_probs: Tensor, targets, epsilon: float, mask=None) -> Tensor:
    """Mean over valid positions of ``-sum_v q_v log p_v``.

    ``q = (1 - eps) * onehot + eps / V``; ``mask`` (same shape as ``targets``)
    marks valid positions.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"label smoothing {epsilon} outside [0, 1)")
    targets = np.asarray(targets)
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask, dtype=float)
    n = mask.sum()
    if n == 0:
        raise ValueError("no valid target positions")
    return T.smoothed_ce(log_probs, targets, mask / n, epsilon)

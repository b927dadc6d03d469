"""Builders for the attention encoder-decoder network description."""

from __future__ import annotations

from .config import NetworkConfig, parse_network_config


def attention_network(
    num_layers: int = 6,
    hidden: int = 1000,
    embed: int = 620,
    attention: int | None = None,
    readout: int | None = None,
    dropout: float = 0.3,
    label_smoothing: float = 0.1,
    inverse_fertility: bool = False,
) -> dict:
    """Layer dict of a bidirectional-LSTM encoder with an attention decoder.

    With the defaults this is the six-layer network of the reference config
    (620-dim embeddings, 1000-dim LSTMs).
    """
    attention = attention or hidden
    readout = readout or hidden
    net = {"src": {"class": "linear", "n_out": embed}}
    prev = ["src"]
    for i in range(num_layers):
        for name, direction in ((f"enc{i}_fw", 1), (f"enc{i}_bw", -1)):
            net[name] = {
                "class": "rec", "unit": "nativelstm2", "n_out": hidden,
                "direction": direction, "from": list(prev),
            }
        prev = [f"enc{i}_fw", f"enc{i}_bw"]
    net["encoder"] = {"class": "copy", "from": prev}
    net["enc_ctx"] = {"class": "linear", "from": ["encoder"], "n_out": attention}
    unit = {
        "output": {"class": "choice", "from": ["output_prob"]},
        "trg": {"class": "linear", "from": ["output"], "n_out": embed, "initial_output": 0},
        "weight_feedback": {"class": "linear", "from": ["prev:accum_a"], "n_out": attention},
        "s_tr": {"class": "linear", "from": ["s"], "n_out": attention},
        "e_in": {"class": "combine", "kind": "add",
                 "from": ["base:enc_ctx", "weight_feedback", "s_tr"]},
        "e_tanh": {"class": "activation", "activation": "tanh", "from": ["e_in"]},
        "e": {"class": "linear", "from": ["e_tanh"], "n_out": 1},
        "a": {"class": "softmax_over_spatial", "from": ["e"]},
        "accum_a": {"class": "combine", "kind": "add", "from": ["prev:accum_a", "a"]},
        "att": {"class": "generic_attention", "weights": "a", "base": "base:encoder"},
        "s": {"class": "rnn_cell", "unit": "LSTMBlock", "from": ["prev:trg", "prev:att"],
              "n_out": hidden},
        "readout": {"class": "linear", "activation": "relu", "from": ["s", "prev:trg", "att"],
                    "n_out": readout},
        "output_prob": {"class": "softmax", "from": ["readout"], "dropout": dropout,
                        "loss": "ce", "loss_opts": {"label_smoothing": label_smoothing}},
    }
    if inverse_fertility:
        # per-position gate in (0, 2) computed once per sequence, applied by multiplication
        net["inv_fertility"] = {"class": "linear", "activation": "inv_fertility",
                                "from": ["encoder"], "n_out": 1}
        unit["fert_accum"] = {"class": "combine", "kind": "mul",
                              "from": ["prev:accum_a", "base:inv_fertility"]}
        unit["weight_feedback"]["from"] = ["fert_accum"]
    net["output"] = {"class": "rec", "from": [], "unit": unit}
    net["decision"] = {"class": "decide", "from": ["output"], "loss": "bleu"}
    return net


def attention_config(**kwargs) -> NetworkConfig:
    return parse_network_config({"network": attention_network(**kwargs)})


def listing_config() -> NetworkConfig:
    """The full reference network: six encoder layer pairs, 1000 units, embeddings of 620."""
    return attention_config()


def toy_config(num_layers=2, hidden=32, embed=16, dropout=0.0, label_smoothing=0.1,
               inverse_fertility=False) -> NetworkConfig:
    return attention_config(num_layers=num_layers, hidden=hidden, embed=embed,
                            dropout=dropout, label_smoothing=label_smoothing,
                            inverse_fertility=inverse_fertility)

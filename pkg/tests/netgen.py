"""Random but valid attention-decoder networks for property tests."""

import numpy as np


def random_network(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    h = int(rng.integers(3, 6))
    emb = int(rng.integers(2, 5))
    att_dim = int(rng.integers(2, 5))
    net = {"src": {"class": "linear", "n_out": emb}}
    prev = ["src"]
    for i in range(int(rng.integers(1, 3))):
        for name, d in ((f"enc{i}_fw", 1), (f"enc{i}_bw", -1)):
            net[name] = {"class": "rec", "unit": "lstm", "n_out": h, "direction": d, "from": prev}
        prev = [f"enc{i}_fw", f"enc{i}_bw"]
    net["encoder"] = {"class": "copy", "from": prev}
    net["enc_ctx"] = {"class": "linear", "from": ["encoder"], "n_out": att_dim}

    unit = {
        "output": {"class": "choice", "from": ["output_prob"]},
        "trg": {"class": "linear", "from": ["output"], "n_out": emb, "initial_output": 0},
    }
    if rng.random() < 0.7:
        unit["s"] = {"class": "rnn_cell", "unit": "LSTMBlock", "from": ["prev:trg", "prev:att"],
                     "n_out": h}
    else:
        unit["s"] = {"class": "linear", "activation": "tanh", "from": ["prev:s", "prev:trg", "prev:att"],
                     "n_out": h}
    unit["s_tr"] = {"class": "linear", "from": ["s"], "n_out": att_dim}
    energy = ["base:enc_ctx", "s_tr"]
    if rng.random() < 0.5:
        unit["weight_feedback"] = {"class": "linear", "from": ["prev:accum_a"], "n_out": att_dim}
        unit["accum_a"] = {"class": "combine", "kind": "add", "from": ["prev:accum_a", "a"]}
        energy.append("weight_feedback")
    if rng.random() < 0.4:
        unit["key2"] = {"class": "linear", "from": ["base:enc_ctx"], "n_out": att_dim}
        energy.append("key2")
    rng.shuffle(energy)
    unit["e_in"] = {"class": "combine", "kind": "add", "from": energy}
    unit["e_tanh"] = {"class": "activation", "activation": "tanh", "from": ["e_in"]}
    unit["e"] = {"class": "linear", "from": ["e_tanh"], "n_out": 1}
    unit["a"] = {"class": "softmax_over_spatial", "from": ["e"]}
    unit["att"] = {"class": "generic_attention", "weights": "a", "base": "base:encoder"}

    n_extra = int(rng.integers(0, 4))
    pool = ["trg", "prev:trg", "s", "att", "prev:att"]
    extra_names = [f"x{i}" for i in range(n_extra)]
    after_choice = {"trg"}  # plain dependents of the choice layer cannot feed the readout
    for i, name in enumerate(extra_names):
        choices = pool + [f"prev:{x}" for x in extra_names]
        k = int(rng.integers(1, 3))
        srcs = [str(c) for c in rng.choice(choices, size=k, replace=False)]
        spec = {"class": "linear", "from": srcs, "n_out": int(rng.integers(2, 5)),
                "activation": str(rng.choice(["tanh", "relu", "sigmoid", "identity"]))}
        if rng.random() < 0.3:
            spec["dropout"] = 0.25
        unit[name] = spec
        pool.append(name)
        if after_choice.intersection(srcs):
            after_choice.add(name)
    readout_from = ["s", "prev:trg", "att"] + [x for x in extra_names
                                               if x not in after_choice and rng.random() < 0.6]
    unit["readout"] = {"class": "linear", "activation": "relu", "from": readout_from,
                       "n_out": int(rng.integers(3, 6))}
    unit["output_prob"] = {"class": "softmax", "from": ["readout"],
                           "dropout": float(rng.choice([0.0, 0.3])), "loss": "ce",
                           "loss_opts": {"label_smoothing": float(rng.choice([0.0, 0.1]))}}
    # dict order should not matter to the compiler
    keys = list(unit)
    rng.shuffle(keys)
    net["output"] = {"class": "rec", "from": [], "unit": {k: unit[k] for k in keys}}
    net["decision"] = {"class": "decide", "from": ["output"], "loss": "bleu"}
    return net

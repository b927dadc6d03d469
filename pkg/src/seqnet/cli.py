"""Command-line entry point: ``seqnet <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config

log = logging.getLogger("seqnet")


class UsageError(Exception):
    pass


def _network(args):
    from .configs import attention_config

    if args.config:
        return load_config(args.config)
    if args.preset == "listing":
        return attention_config()
    return attention_config(num_layers=args.layers, hidden=args.hidden, embed=args.embed,
                            dropout=args.dropout)


def _add_network_args(p, hidden=64, layers=2):
    p.add_argument("--config", help="JSON network description")
    p.add_argument("--preset", choices=("toy", "listing"), default="toy",
                   help="built-in network when --config is absent (default: toy)")
    p.add_argument("--layers", type=int, default=layers, help="encoder layer pairs for the toy preset")
    p.add_argument("--hidden", type=int, default=hidden)
    p.add_argument("--embed", type=int, default=32)
    p.add_argument("--dropout", type=float, default=0.0)


def _on_off(value):
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    from .compiler import DataDims
    from .data import build_vocab, read_parallel
    from .trainer import Trainer, TrainOptions, load_checkpoint, resume_trainer

    out = Path(args.output)
    if args.resume:
        trainer = resume_trainer(args.output)
        ck = load_checkpoint(args.output)
        src_vocab, trg_vocab = ck.vocabs
    else:
        src_vocab = build_vocab([args.train_src], args.vocab_size)
        trg_vocab = build_vocab([args.train_trg], args.vocab_size)
        opts = TrainOptions(
            word_budget=args.word_budget, max_epochs=args.epochs, objective=args.objective,
            risk_beam=args.risk_beam, scheduled_sampling=args.scheduled_sampling,
            label_smoothing=args.label_smoothing, hoist=not args.no_hoist,
            pretrain=args.pretrain, start_depth=args.start_depth,
            epochs_per_stage=args.epochs_per_stage, lr=args.lr, lr_schedule=args.lr_schedule,
            seed=args.seed,
        )
        cfg = _network(args)
        trainer = Trainer(cfg, DataDims(len(src_vocab), len(trg_vocab)), opts)
        if args.init:
            init = load_checkpoint(args.init)
            for name in trainer.state.params.names():
                if name not in init.params:
                    raise ValueError(f"--init checkpoint lacks parameter {name!r}")
                trainer.state.params[name].data[...] = init.params[name].data
    train = read_parallel(args.train_src, args.train_trg, src_vocab, trg_vocab, args.max_len)
    dev = None
    if args.dev_src:
        dev = read_parallel(args.dev_src, args.dev_trg, src_vocab, trg_vocab, None)
    if len(train) == 0:
        raise ValueError("no usable training pairs")
    # on resume --epochs is the run's total, so the saved epochs count towards it
    remaining = args.epochs - trainer.state.epoch if args.resume else args.epochs
    trainer.opts.max_epochs = args.epochs
    trainer.fit(train, dev, epochs=max(0, remaining), checkpoint_dir=out,
                vocabs=(src_vocab, trg_vocab))
    for h in trainer.state.history:
        print(f"epoch {h['epoch']}\ttrain {h['train_loss']:.4f}\tcv {h['cv_loss']:.4f}\t"
              f"lr {h['lr']:.2e}")
    return 0


def cmd_decode(args):
    from .beam import translate
    from .compiler import DataDims, ExecMode, compile_graph
    from .data import read_lines
    from .trainer import load_checkpoint

    if args.beam < 1:
        raise UsageError("--beam must be at least 1")
    ck = load_checkpoint(args.checkpoint)
    if ck.vocabs is None:
        raise ValueError(f"checkpoint {args.checkpoint} has no vocabulary files")
    src_vocab, trg_vocab = ck.vocabs
    g = compile_graph(ck.config, ExecMode.DECODE, DataDims(**ck.meta["dims"]))
    lines = read_lines(args.input)
    ids = [src_vocab.encode(line) for line in lines]
    keep = [i for i, x in enumerate(ids) if x]
    hyps = translate(g, ck.params, [ids[i] for i in keep], args.beam, args.len_norm_alpha,
                     args.batch_seqs)
    out = [""] * len(lines)
    for i, h in zip(keep, hyps):
        out[i] = " ".join(trg_vocab.decode(h))
    Path(args.output).write_text("".join(x + "\n" for x in out), encoding="utf-8")
    return 0


def cmd_eval_bleu(args):
    from .bleu import corpus_bleu
    from .data import read_lines

    hyp, ref = read_lines(args.hyp), read_lines(args.ref)
    print(f"{corpus_bleu(hyp, ref):.2f}")
    return 0


def bench(cfg, n: int = 1000, word_budget: int = 2000, seed: int = 0, variants=(True, False),
          vocab: int = 20, decode_seqs: int = 50, beam: int = 4, repeats: int = 3):
    """Seconds for one training epoch and one decode pass per hoisting setting.

    Settings are interleaved and each reports its fastest of ``repeats`` runs,
    which damps noise from other load on the machine.
    """
    from .beam import translate
    from .compiler import DataDims, ExecMode, compile_graph
    from .data import generate_toy_task
    from .trainer import Trainer, TrainOptions

    corpus = generate_toy_task("reverse", vocab, (1, 12), n, seed)
    dims = DataDims(len(corpus.src_vocab), len(corpus.trg_vocab))
    sources = [s for s, _ in corpus.pairs[:decode_seqs]]
    best = {h: [float("inf"), float("inf")] for h in variants}
    for _ in range(max(1, repeats)):
        for hoist in variants:
            trainer = Trainer(cfg, dims, TrainOptions(word_budget=word_budget, pretrain=False,
                                                      hoist=hoist, seed=seed))
            t0 = time.perf_counter()
            trainer.train_epoch(corpus)
            best[hoist][0] = min(best[hoist][0], time.perf_counter() - t0)
            g = compile_graph(cfg, ExecMode.DECODE, dims, hoist=hoist)
            t0 = time.perf_counter()
            translate(g, trainer.state.params, sources, beam)
            best[hoist][1] = min(best[hoist][1], time.perf_counter() - t0)
    return [(h, *best[h]) for h in variants]


def cmd_bench(args):
    variants = (False,) if args.no_hoist else (True, False)
    rows = bench(_network(args), n=args.n, word_budget=args.word_budget, seed=args.seed,
                 variants=variants, repeats=args.repeats)
    print(f"{'hoisting':<10}{'epoch_s':>10}{'decode_s':>10}")
    for hoist, t_train, t_dec in rows:
        print(f"{'on' if hoist else 'off':<10}{t_train:>10.2f}{t_dec:>10.2f}")
    return 0


_MODES = {"train": "TRAIN", "ss": "SCHEDULED_SAMPLING", "decode": "DECODE"}


def cmd_dump_schedule(args):
    from .compiler import DataDims, ExecMode, compile_graph

    g = compile_graph(_network(args), ExecMode[_MODES[args.mode]],
                      DataDims(args.src_vocab, args.trg_vocab), hoist=not args.no_hoist)
    print(g.schedule_text())
    return 0


def cmd_gen_toy(args):
    from .data import generate_toy_task

    corpus = generate_toy_task(args.kind, args.vocab_size, (args.min_len, args.max_len), args.n,
                               args.seed)
    prefix = args.prefix or f"toy_{args.kind}"
    corpus.write(f"{prefix}.src", f"{prefix}.trg")
    print(f"wrote {len(corpus)} pairs to {prefix}.src / {prefix}.trg")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqnet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network on a parallel corpus")
    _add_network_args(p)
    p.add_argument("--train-src", required=True)
    p.add_argument("--train-trg", required=True)
    p.add_argument("--dev-src")
    p.add_argument("--dev-trg")
    p.add_argument("--output", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--word-budget", type=int, default=1000)
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--max-len", type=int, default=60)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-lr-schedule", dest="lr_schedule", action="store_false")
    p.add_argument("--pretrain", type=_on_off, default=True, metavar="on|off")
    p.add_argument("--start-depth", type=int, default=2)
    p.add_argument("--epochs-per-stage", type=int, default=2)
    p.add_argument("--objective", choices=("ce", "risk"), default="ce")
    p.add_argument("--risk-beam", type=int, default=4)
    p.add_argument("--scheduled-sampling", type=float, default=0.0, metavar="P")
    p.add_argument("--label-smoothing", type=float, default=None, metavar="E")
    p.add_argument("--no-hoist", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="copy parameters from this checkpoint before training")
    p.add_argument("--resume", action="store_true", help="continue the run saved in --output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="beam-search translate a file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", type=int, default=12)
    p.add_argument("--len-norm-alpha", type=float, default=0.6)
    p.add_argument("--batch-seqs", type=int, default=50)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval-bleu", help="corpus BLEU of a hypothesis file")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.set_defaults(func=cmd_eval_bleu)

    p = sub.add_parser("bench", help="time training and decoding with hoisting on and off")
    _add_network_args(p, hidden=128)
    p.add_argument("--n", type=int, default=1000, help="synthetic sentence pairs")
    p.add_argument("--word-budget", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3, help="runs per setting; the fastest counts")
    p.add_argument("--no-hoist", action="store_true", help="only time the unhoisted schedule")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-schedule", help="print the pre_loop / loop_body / post_loop split")
    _add_network_args(p)
    p.add_argument("--mode", choices=tuple(_MODES), default="train")
    p.add_argument("--src-vocab", type=int, default=20000)
    p.add_argument("--trg-vocab", type=int, default=20000)
    p.add_argument("--no-hoist", action="store_true")
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser("gen-toy", help="write a synthetic copy/reverse/sort corpus")
    p.add_argument("--kind", choices=("copy", "reverse", "sort"), required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--prefix", help="output path prefix (default toy_<kind>)")
    p.set_defaults(func=cmd_gen_toy)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "dev_src", None) and not getattr(args, "dev_trg", None):
        parser.print_usage(sys.stderr)
        print("seqnet: error: --dev-src needs --dev-trg", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"seqnet: error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, FloatingPointError, KeyError) as e:
        print(f"seqnet: error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()

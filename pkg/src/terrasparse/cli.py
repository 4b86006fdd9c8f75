"""``terrasparse`` command line: bench, train, eval, decode."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .errors import ConfigError, CorruptionError, TrainingDiverged

log = logging.getLogger("terrasparse")


def _bench(args) -> int:
    from .bench import cmd_bench

    report = cmd_bench(args.config, seq_len=args.seq_len, samples=args.samples, warmup=args.warmup,
                       dec_layers=args.layers, enc_layers=args.enc_layers, vocab=args.vocab,
                       seed=args.seed, batch=args.batch, csv_path=args.csv)
    print(report.table())
    return 0


def _train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_config
    from .model import Terraformer
    from .train import TrainConfig, train_loop

    cfg = load_config(args.config).check()
    tcfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, warmup=args.warmup,
                       task=args.task, min_len=args.min_len, max_len=args.max_len, seed=args.seed,
                       checkpoint_every=args.checkpoint_every, checkpoint_path=args.out)
    model = Terraformer(cfg, seed=args.seed)
    result = train_loop(model, tcfg, np.random.default_rng(args.seed))
    save_checkpoint(model, args.out)
    if args.trace:
        result.write_csv(args.trace)
    last = result.trace[-1]
    print(f"step={last.step} loss={last.loss:.6f} token_acc={last.token_acc:.4f} checkpoint={args.out}")
    return 0


def _eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import eval_generalization

    model = load_checkpoint(args.ckpt)
    res = eval_generalization(model, args.task, args.min_len - 1, (args.min_len, args.max_len),
                              n_samples=args.samples, rng=np.random.default_rng(args.seed))
    print(f"token_acc={res['token_acc']:.4f} seq_acc={res['seq_acc']:.4f} n={res['n']}")
    return 0


def _decode(args) -> int:
    from .checkpoint import load_checkpoint
    from .train import predict_targets

    model = load_checkpoint(args.ckpt)
    if not args.input:
        raise ConfigError("--input must be a non-empty string")
    print(predict_targets(model, [args.input], max_len=args.max_len)[0])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="terrasparse", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="per-token decoding benchmark")
    b.add_argument("--config", action="append", required=True, help="preset name or config file; repeatable")
    b.add_argument("--seq-len", type=int, default=32, help="source prefix length before timed steps")
    b.add_argument("--samples", type=int, default=30)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--layers", type=int, default=8, help="decoder layers (desk-scale override)")
    b.add_argument("--enc-layers", type=int, default=1)
    b.add_argument("--vocab", type=int, default=None)
    b.add_argument("--batch", type=int, default=1, help="sequences per step (throughput only)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--csv", default=None)
    b.set_defaults(func=_bench)

    t = sub.add_parser("train", help="train on a synthetic task and write a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--task", choices=("copy", "add"), default="copy")
    t.add_argument("--min-len", type=int, default=1)
    t.add_argument("--max-len", type=int, default=8)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--warmup", type=int, default=200)
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--trace", default=None, help="write step,loss,token_acc CSV here")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="greedy-decode accuracy on fresh samples")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", choices=("copy", "add"), required=True)
    e.add_argument("--min-len", type=int, required=True)
    e.add_argument("--max-len", type=int, required=True)
    e.add_argument("--samples", type=int, default=500)
    e.add_argument("--seed", type=int, default=12345)
    e.set_defaults(func=_eval)

    d = sub.add_parser("decode", help="greedy-decode one input string")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--max-len", type=int, default=None)
    d.set_defaults(func=_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in getattr(exc, "violations", None) or []:
            print(f"  - {v}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

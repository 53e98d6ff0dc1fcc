"""Command line entry point: ``mlkv {convert,train,generate,eval,bench}``.

Failures print one line to stderr, ``error <code> <kind>: <message>``, and
exit with that code: 2 validation, 3 capacity, 4 numeric, 5 I/O.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import bench, trainer
from .convert import Checkpoint, merge_kv, parse_scheme
from .errors import CapacityError, CheckpointError, ConfigError, MLKVError, ValidationError
from .model import Model, ModelConfig, generate, param_count

DEFAULT_SEED = 1234


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser():
    p = _Parser(prog="mlkv", allow_abbrev=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=DEFAULT_SEED)
        sp.add_argument("--config")
        sp.add_argument("--ckpt-in")
        sp.add_argument("--ckpt-out")
        sp.add_argument("--out")
        sp.add_argument("--m", type=int)
        sp.add_argument("--g", type=int)
        return sp

    c = common(sub.add_parser("convert", allow_abbrev=False))
    c.add_argument("--max-param-gap", type=float, default=None,
                   help="fail when MLP compensation misses the parameter count by more than this relative gap")

    t = common(sub.add_parser("train", allow_abbrev=False))
    t.add_argument("--corpus", required=True)
    t.add_argument("--jsonl", action="store_true")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--lr", type=float, default=6e-4)
    t.add_argument("--fraction", type=float)

    gsp = common(sub.add_parser("generate", allow_abbrev=False))
    gsp.add_argument("--tokens", type=int, default=32)
    gsp.add_argument("--prompt", default="")

    e = common(sub.add_parser("eval", allow_abbrev=False))
    e.add_argument("--corpus", required=True)
    e.add_argument("--jsonl", action="store_true")

    b = common(sub.add_parser("bench", allow_abbrev=False))
    b.add_argument("--batches", default="1,2,4,8")
    b.add_argument("--budget-bytes", type=int, required=True)
    b.add_argument("--seq", type=int, default=bench.PREFILL + bench.GENERATE)
    b.add_argument("--tokens", type=int, default=bench.GENERATE)
    b.add_argument("--strict-timing", action="store_true")
    b.add_argument("--dat")
    return p


def _require(args, *names):
    for name in names:
        if getattr(args, name.replace("-", "_")) is None:
            raise ValidationError(f"--{name} is required for {args.command}")


def _load_ckpt(path):
    return Checkpoint.load(path)


def cmd_convert(args):
    _require(args, "ckpt-in", "ckpt-out")
    src = _load_ckpt(args.ckpt_in)
    target = parse_scheme(src.config, args.m, args.g)
    out = merge_kv(src, target, seed=args.seed, tol=args.max_param_gap)
    out.save(args.ckpt_out)
    base, new = param_count(src.config), param_count(out.config)
    print(f"converted m={target.m} g={target.g} params={new} gap={(new - base) / base:+.3e}")


def _dataset(args, cfg):
    docs = trainer.read_corpus(args.corpus, jsonl=args.jsonl)
    return trainer.pack_documents(docs, cfg.max_seq, seed=args.seed)


def cmd_train(args):
    _require(args, "ckpt-out")
    if args.ckpt_in:
        model = _load_ckpt(args.ckpt_in).to_model()
        fraction = 0.05 if args.fraction is None else args.fraction
    elif args.config:
        cfg = ModelConfig.load(args.config)
        if args.m or args.g:
            cfg = cfg.with_share(parse_scheme(cfg, args.m, args.g))
        model = Model.random(cfg, args.seed)
        fraction = 1.0 if args.fraction is None else args.fraction
    else:
        raise ValidationError("train needs --config or --ckpt-in")
    if model.cfg.vocab < trainer.VOCAB:
        raise ConfigError("vocab", f"byte-level corpus needs vocab >= {trainer.VOCAB}")
    if not 0 < fraction <= 1:
        raise ValidationError(f"--fraction must be in (0, 1], got {fraction}")
    data = _dataset(args, model.cfg).subset(fraction)
    plan = trainer.TrainPlan(total_steps=args.steps, batch=args.batch_size, base_lr=args.lr, seed=args.seed)
    history = trainer.uptrain(model, data, plan)
    Checkpoint.from_model(model).save(args.ckpt_out)
    if args.out:
        trainer.write_loss_csv(args.out, history, plan)
    print(f"trained steps={len(history)} rows={data.row_count} final_loss={history[-1]:.6f}")


def cmd_generate(args):
    _require(args, "ckpt-in")
    model = _load_ckpt(args.ckpt_in).to_model()
    prompt = [trainer.BOS] + trainer.encode(args.prompt)
    if args.tokens < 0:
        raise ValidationError(f"--tokens must be >= 0, got {args.tokens}")
    if len(prompt) + args.tokens - 1 > model.cfg.max_seq:
        raise CapacityError(
            f"prompt of {len(prompt)} plus {args.tokens} tokens overflows the {model.cfg.max_seq}-position cache"
        )
    new = generate(model, np.array([prompt]), args.tokens)
    print(args.prompt + trainer.decode(new[0].tolist()))


def cmd_eval(args):
    _require(args, "ckpt-in")
    model = _load_ckpt(args.ckpt_in).to_model()
    print(f"{trainer.eval_loss(model, _dataset(args, model.cfg)):.6f}")


def _bench_configs(args):
    _require(args, "config")
    try:
        with open(args.config) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"invalid JSON: {e}") from None
    if isinstance(data, dict) and "vocab" in data:
        cfg = ModelConfig.from_dict(data)
        cfg = cfg.with_share(parse_scheme(cfg, args.m, args.g))
        return {os.path.splitext(os.path.basename(args.config))[0]: cfg}
    if not isinstance(data, dict) or not data:
        raise ConfigError("config", "expected a config object or a non-empty {id: config} mapping")
    return {cid: ModelConfig.from_dict(c) for cid, c in data.items()}


def cmd_bench(args):
    _require(args, "out")
    configs = _bench_configs(args)
    try:
        batches = [int(x) for x in args.batches.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"--batches must be comma-separated integers, got {args.batches!r}") from None
    if not batches or min(batches) < 1:
        raise ValidationError("--batches needs positive integers")
    reports = bench.sweep(configs, batches, args.budget_bytes, s=args.seq, gen=args.tokens,
                          seed=args.seed, strict_timing=args.strict_timing)
    bench.write_csv(args.out, reports)
    if args.dat:
        bench.write_dat(args.dat, reports)
    for rep in reports:
        print(f"{rep.config_id} max_batch={rep.max_batch}")


COMMANDS = {
    "convert": cmd_convert,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except MLKVError as e:
        kind = type(e).__name__
        print(f"error {e.exit_code} {kind}: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        err = CheckpointError(f"{e.filename or ''}: {e.strerror}")
        print(f"error {err.exit_code} CheckpointError: {err}", file=sys.stderr)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``moa {train,eval,inspect,gradcheck}``.

Exit codes: 0 success, 1 verification failure, 2 user/config error,
3 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, GeometryError, NumericalAbort

EXIT_OK, EXIT_VERIFY, EXIT_USER, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("moa")


def _threads(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return contextlib.nullcontext()
    return threadpool_limits(limits=n)


def _error(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USER


def _run_config(args):
    from .config import build_run_config, load_run_config

    if args.config:
        run = load_run_config(args.config, args.preset)
    elif args.preset:
        run = build_run_config({}, args.preset)
    else:
        raise ConfigError("give --config PATH or --preset NAME")
    if args.seed is not None:
        run.recipe.seed = args.seed
    if getattr(args, "out", None):
        run.out_dir = args.out
    run.model.validate()
    return run


def _dataset(run, split: str):
    from .config import resolve_data_dir
    from .data import load_cifar, synth_dataset

    spec, cfg = run.data, run.model
    if spec.dataset == "synthetic":
        seed = spec.seed if split == "train" else spec.seed + 1000
        return synth_dataset(cfg.num_classes, spec.n_per_class, cfg.input_size, cfg.input_size,
                             seed=seed, noise=spec.noise, channels=cfg.in_channels)
    root = resolve_data_dir(spec)
    if root is None:
        raise FileNotFoundError("no dataset directory: set data.dir or MOA_DATA_DIR")
    return load_cifar(root, spec.dataset, split)


def cmd_train(args) -> int:
    from .training import train

    run = _run_config(args)
    train_set = _dataset(run, "train")
    if train_set.image_size != run.model.input_size or train_set.num_classes != run.model.num_classes:
        raise ConfigError(
            f"dataset has {train_set.image_size}px images and {train_set.num_classes} classes but the "
            f"model expects {run.model.input_size}px and {run.model.num_classes}"
        )
    out = Path(run.out_dir or "runs/latest")
    result = train(run.model, train_set, run.recipe, out_dir=out)
    last = result.metrics[-1]
    print(f"trained {result.steps} steps; final train_loss {last['train_loss']:.6f}, "
          f"eval_acc {last['eval_acc']:.4f}; wrote {out / 'metrics.log'} and {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import evaluate

    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint PATH")
    model, _ = load_checkpoint(args.checkpoint)
    run = _run_config(args) if (args.config or args.preset) else None
    if run is None:
        from .config import RunConfig

        run = RunConfig(model=model.config)
    run.model = model.config
    split = args.split or run.data.split
    data = _dataset(run, split)
    c = model.config
    if data.image_size != c.input_size or data.num_classes != c.num_classes or \
            data.images.shape[-1] != c.in_channels:
        raise ConfigError(
            f"checkpoint expects {c.input_size}px x {c.in_channels}ch images with {c.num_classes} classes; "
            f"dataset has {data.image_size}px x {data.images.shape[-1]}ch with {data.num_classes}"
        )
    acc = evaluate(model, data)
    print(f"top-1 accuracy: {acc:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .cost import cost_report

    run = _run_config(args)
    report = cost_report(run.model)
    print(report.to_csv() if args.csv else report.format_table(), end="" if args.csv else "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import GRADCHECK_CASES, gradcheck_suite

    scope = args.scope
    if scope != "all" and scope not in GRADCHECK_CASES:
        return _error(f"unknown scope {scope!r}; choose all or one of {', '.join(GRADCHECK_CASES)}")
    reports = gradcheck_suite(scope, seed=args.seed if args.seed is not None else 0)
    failed = []
    for name, rep in reports.items():
        worst = rep.worst
        status = "ok" if rep.passed else "FAIL"
        where = f" ({worst.name}{list(worst.worst_index)})" if worst else ""
        print(f"{name:<12} max_rel_error={rep.max_rel_error:.3e}{where} {status}")
        if not rep.passed:
            failed.append(f"{name}: {', '.join(rep.failing())}")
    if failed:
        print("gradcheck failed for " + "; ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value run configuration")
    common.add_argument("--preset", metavar="NAME", help="model preset (overrides model.preset)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides output.dir)")
    common.add_argument("--seed", type=int, default=None, metavar="N", help="random seed (default 42)")
    common.add_argument("--threads", type=int, default=1, metavar="N", help="BLAS thread limit (default 1)")

    parser = argparse.ArgumentParser(prog="moa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="top-1 accuracy of a checkpoint")
    p.add_argument("--checkpoint", metavar="PATH", help="checkpoint written by train")
    p.add_argument("--split", choices=("train", "test"), help="dataset split (default data.split)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="per-layer parameter and FLOP counts")
    p.add_argument("--csv", action="store_true", help="machine-readable CSV output")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    p.add_argument("scope", nargs="?", default="all", help="'all' or one layer type")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads):
            return args.func(args)
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, GeometryError, FormatError, KeyError) as exc:
        return _error(str(exc.args[0]) if exc.args else str(exc))
    except (FileNotFoundError, OSError) as exc:
        return _error(f"I/O: {exc}")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

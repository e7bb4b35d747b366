"""Command-line entry point: ``epose generate | train | eval``.

Options may also come from a plain-text config file (``--config PATH``), one
``key = value`` per line, where ``key`` is a long flag name without the
leading dashes (``batch = 64``, ``alpha-lr = 0.001``). Blank lines and lines
starting with ``#`` are ignored. Precedence: defaults < config file < flags.

Exit codes: 0 success, 1 I/O error, 2 usage or validation error, 3 numeric
failure (non-finite loss).

``EPOSE_NUM_THREADS`` sets the torch intra-op thread count.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .evaluation import evaluate
from .nets import CheckpointError, NetConfig, load_checkpoint
from .routing import InstanceFileError, Kind, generate_dataset, read_instances, write_instances
from .trainer import Mode, TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "EPOSE_NUM_THREADS"

log = logging.getLogger("epose")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _node_count(text: str) -> int:
    value = int(text)
    if value < 2:
        raise argparse.ArgumentTypeError(f"n must be >= 2, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="epose", description=__doc__.split("\n")[0])
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", type=Path, help="key = value file (flags override it)")
        p.add_argument("--seed", type=int, default=0)

    gen = sub.add_parser("generate", help="write a file of random instances")
    common(gen)
    gen.add_argument("--kind", choices=[k.value for k in Kind], default="tsp")
    gen.add_argument("--n", type=_node_count, default=20)
    gen.add_argument("--count", type=_positive_int, default=1000)
    gen.add_argument("--out", type=Path, default=Path("instances.jsonl"))

    tr = sub.add_parser("train", help="train a policy and write checkpoint + metrics")
    common(tr)
    tr.add_argument("--kind", choices=[k.value for k in Kind], default="tsp")
    tr.add_argument("--n", type=_node_count, default=20)
    tr.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.EPOSE.value)
    tr.add_argument("--epochs", type=_positive_int, default=1)
    tr.add_argument("--steps", type=_positive_int, default=2500, help="iterations per epoch")
    tr.add_argument("--batch", type=_positive_int, default=None, help="default 512 (256 for CVRP n >= 100)")
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--alpha-lr", type=float, default=None, help="default: --lr")
    tr.add_argument("--eta", type=float, default=0.005)
    tr.add_argument("--entropy-coef", type=float, default=0.98)
    tr.add_argument("--fixed-alpha", type=float, default=0.03)
    tr.add_argument("--init-log-alpha", type=float, default=None, help="default: log(--fixed-alpha)")
    tr.add_argument("--val-size", type=int, default=1000)
    tr.add_argument("--val-seed", type=int, default=1_000_003)
    tr.add_argument("--replay-capacity", type=_positive_int, default=1_000_000)
    defaults = NetConfig()
    tr.add_argument("--embed-dim", type=_positive_int, default=defaults.embed_dim)
    tr.add_argument("--encoder-layers", type=_positive_int, default=defaults.encoder_layers)
    tr.add_argument("--heads", type=_positive_int, default=defaults.heads)
    tr.add_argument("--ff-dim", type=_positive_int, default=defaults.ff_dim)
    tr.add_argument("--clip-c", type=float, default=defaults.clip_c)
    tr.add_argument("--critic-layers", type=_positive_int, default=defaults.critic_layers)
    tr.add_argument("--critic-hidden", type=_positive_int, default=defaults.critic_hidden)
    tr.add_argument("--ckpt", type=Path, default=Path("checkpoint.bin"))
    tr.add_argument("--metrics", type=Path, default=Path("metrics.csv"))

    ev = sub.add_parser("eval", help="evaluate a checkpoint on an instance file")
    common(ev)
    ev.add_argument("--ckpt", type=Path, required=True)
    ev.add_argument("--instances", type=Path, required=True)
    ev.add_argument("--decode", choices=["greedy", "sample", "both"], default="greedy")
    ev.add_argument("--k", type=_positive_int, default=1280, help="samples per instance")
    ev.add_argument("--report", type=Path, default=Path("report.csv"), help="CSV path; with --decode both a suffix is added")
    return parser


def _config_defaults(parser: argparse.ArgumentParser, path: Path) -> dict:
    actions = {a.option_strings[0][2:]: a for a in parser._actions if a.option_strings and a.option_strings[0].startswith("--")}
    values = {}
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise UsageError(f"{path}:{line_no}: expected key = value")
        action = actions.get(key)
        if action is None or key in ("config", "help"):
            raise UsageError(f"{path}:{line_no}: unknown key {key!r}")
        try:
            converted = action.type(value) if action.type else value
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"{path}:{line_no}: bad value for {key}: {exc}")
        if action.choices and converted not in action.choices:
            raise UsageError(f"{path}:{line_no}: {key} must be one of {', '.join(action.choices)}")
        values[action.dest] = converted
    return values


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**_config_defaults(subparser, args.config))
        args = parser.parse_args(argv)
    return args


# --- commands -----------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    instances = generate_dataset(args.kind, args.n, args.count, args.seed)
    try:
        write_instances(args.out, instances)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    print(f"wrote {len(instances)} {args.kind} instances (n={args.n}) to {args.out}")
    return EXIT_OK


def _train_configs(args: argparse.Namespace) -> tuple[TrainConfig, NetConfig]:
    extra = {} if args.batch is None else {"batch_size": args.batch}
    config = TrainConfig.for_problem(
        args.kind,
        args.n,
        epochs=args.epochs,
        steps_per_epoch=args.steps,
        lr=args.lr,
        alpha_lr=args.alpha_lr,
        eta=args.eta,
        entropy_target_coef=args.entropy_coef,
        fixed_alpha=args.fixed_alpha,
        init_log_alpha=args.init_log_alpha,
        mode=args.mode,
        seed=args.seed,
        val_size=args.val_size,
        val_seed=args.val_seed,
        replay_capacity=args.replay_capacity,
        **extra,
    )
    net = NetConfig(
        embed_dim=args.embed_dim,
        encoder_layers=args.encoder_layers,
        heads=args.heads,
        ff_dim=args.ff_dim,
        clip_c=args.clip_c,
        critic_layers=args.critic_layers,
        critic_hidden=args.critic_hidden,
    )
    return config, net


def cmd_train(args: argparse.Namespace) -> int:
    if args.ckpt.resolve() == args.metrics.resolve():
        raise UsageError("--ckpt and --metrics must be different paths")
    try:
        config, net = _train_configs(args)
    except ValueError as exc:
        raise UsageError(f"bad configuration: {exc}")
    try:
        result = train(config, net, metrics_path=args.metrics, checkpoint_path=args.ckpt)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    last = result.history[-1]
    print(
        f"trained {len(result.history)} steps ({last.trajectories} trajectories); "
        f"alpha={last.alpha:.4g} val_greedy_len={last.val_greedy_len}; "
        f"checkpoint {args.ckpt}, metrics {args.metrics}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.ckpt.is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if not args.instances.is_file():
        raise UsageError(f"instance file not found: {args.instances}")
    try:
        agent, header = load_checkpoint(args.ckpt)
        instances = read_instances(args.instances)
    except (CheckpointError, InstanceFileError) as exc:
        raise UsageError(str(exc))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    if not instances:
        raise UsageError(f"{args.instances} contains no instances")
    kinds = {inst.kind for inst in instances}
    if kinds != {agent.kind} or len({inst.n for inst in instances}) != 1:
        found = ", ".join(sorted(k.value for k in kinds))
        raise UsageError(f"checkpoint is for {agent.kind.value} but instances are {found} (one kind and size per file)")
    modes = ["greedy", "sample"] if args.decode == "both" else [args.decode]
    references, label = None, None
    for mode in modes:
        report = evaluate(agent, instances, decode=mode, k=args.k, seed=args.seed, references=references)
        # the reference is solved once and reused for the second decode mode
        references = [r.ref_len for r in report.rows]
        label = report.reference = label or report.reference
        path = args.report if len(modes) == 1 else args.report.with_name(f"{args.report.stem}_{mode}{args.report.suffix}")
        try:
            report.write_csv(path)
        except OSError as exc:
            print(f"error: cannot write {path}: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"{report.summary()} report={path}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval}


def main(argv: Optional[Sequence[str]] = None) -> int:
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads:
            try:
                torch.set_num_threads(int(threads))
            except ValueError:
                raise UsageError(f"{THREADS_ENV} must be a positive integer, got {threads!r}")
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("interrupted; the last completed epoch checkpoint is intact", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())

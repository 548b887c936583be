"""Command-line entry point: ``hybridnet {run,bench,plan}``.

Every ``run`` flag can also be set from the environment as
``HYBRIDNET_<FLAG>``, upper-cased with dashes turned into underscores
(``HYBRIDNET_BATCH_SIZE=64``). Flags given on the command line win.

Exit codes: 0 success, 2 invalid configuration or input, 3 transport
failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Optional, Sequence

from .comm import CommError
from .data import DataError, fit_to_model, load_dataset
from .graph import ModelSpecError
from .metrics import FORMATS, MetricsLog, make_header
from .partition import PartitionError, dump, partition
from .trainer import STRATEGIES, ConfigError, TrainConfig, fit, iter_steps, make_plan, run_rank
from .zoo import compute_heavy_spec, load_config

ENV_PREFIX = "HYBRIDNET_"
log = logging.getLogger("hybridnet")


def parse_lr_schedule(text: str) -> list[tuple[int, float]]:
    """``"0:0.1,5:0.01"`` -> ``[(0, 0.1), (5, 0.01)]``."""
    out = []
    for item in text.split(","):
        epoch, sep, lr = item.partition(":")
        if not sep:
            raise argparse.ArgumentTypeError(f"lr schedule entry {item!r} is not EPOCH:LR")
        try:
            out.append((int(epoch), float(lr)))
        except ValueError:
            raise argparse.ArgumentTypeError(f"lr schedule entry {item!r} is not EPOCH:LR") from None
    return out


def parse_hostport(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"rendezvous {text!r} is not HOST:PORT")
    return host or "127.0.0.1", int(port)


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _stage_list(text: str) -> list:
    return [v if v == "batch" else int(v) for v in text.split(",") if v]


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="bundled config name or path to a model JSON")
    p.add_argument("--data", default=None,
                   help="data source, e.g. 'spiral:n=1200' or 'idx:images=...,labels=...'; "
                        "default: blobs sized to the model")
    p.add_argument("--strategy", choices=STRATEGIES, default="model")
    p.add_argument("--num-partitions", type=int, default=1)
    p.add_argument("--num-replicas", type=int, default=1)
    p.add_argument("--pipeline-stages", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr-schedule", type=parse_lr_schedule, default=[(0, 0.1)])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--async-allreduce", action="store_true")
    p.add_argument("--transport", choices=("sim", "socket"), default="sim")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--world", type=int, default=None)
    p.add_argument("--rendezvous", type=parse_hostport, default=None)
    p.add_argument("--bound", type=int, default=64, help="per-peer in-flight message limit")
    p.add_argument("--timeout", type=float, default=None, help="seconds before a blocked rank fails")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=FORMATS, default="csv")


def _apply_env(p: argparse.ArgumentParser, environ) -> None:
    overrides = {}
    for action in p._actions:
        if not action.option_strings or action.dest == "help":
            continue
        raw = environ.get(ENV_PREFIX + action.dest.upper())
        if raw is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            overrides[action.dest] = raw.lower() in ("1", "true", "yes", "on")
        else:
            try:
                value = action.type(raw) if action.type else raw
            except (ValueError, argparse.ArgumentTypeError) as e:
                p.error(f"{ENV_PREFIX}{action.dest.upper()}: {e}")
            if action.choices is not None and value not in action.choices:
                p.error(f"{ENV_PREFIX}{action.dest.upper()}: {value!r} not in {list(action.choices)}")
            overrides[action.dest] = value
    if overrides:
        p.set_defaults(**overrides)
        for action in p._actions:
            if action.dest in overrides:
                action.required = False


def build_parser(environ=None) -> argparse.ArgumentParser:
    environ = os.environ if environ is None else environ
    parser = argparse.ArgumentParser(prog="hybridnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train a model")
    _add_run_args(run)
    _apply_env(run, environ)

    bench = sub.add_parser("bench", help="throughput sweep")
    bench.add_argument("--model", default="compute_heavy")
    bench.add_argument("--strategies", type=lambda s: s.split(","), default=["model"])
    bench.add_argument("--partitions", type=_int_list, default=[1, 2, 4])
    bench.add_argument("--replicas", type=_int_list, default=[1])
    bench.add_argument("--stages", type=_stage_list, default=[1, "batch"])
    bench.add_argument("--batch-sizes", type=_int_list, default=[16])
    bench.add_argument("--steps", type=int, default=3)
    bench.add_argument("--warmup", type=int, default=1)
    bench.add_argument("--repeats", type=int, default=3)
    bench.add_argument("--out", default="bench_sweep.csv")

    plan = sub.add_parser("plan", help="print the partition plan and cross-partition edges")
    plan.add_argument("--model", required=True)
    plan.add_argument("--num-partitions", type=int, default=1)
    plan.add_argument("--num-replicas", type=int, default=1)
    plan.add_argument("--cost-model", default="params+activations")
    return parser


def config_from_args(args) -> TrainConfig:
    return TrainConfig(strategy=args.strategy, num_partitions=args.num_partitions,
                       num_replicas=args.num_replicas, pipeline_stages=args.pipeline_stages,
                       batch_size=args.batch_size, epochs=args.epochs,
                       lr_schedule=args.lr_schedule, seed=args.seed,
                       async_allreduce=args.async_allreduce, max_steps=args.max_steps).validate()


def _check_world(args, config: TrainConfig) -> None:
    need = config.world_size
    if args.world is not None and args.world != need:
        raise ConfigError(f"world: {args.world} ranks given but strategy {config.strategy} with "
                          f"{config.num_partitions} partitions x {config.num_replicas} replicas "
                          f"needs {need}")
    if args.transport == "socket":
        missing = [f for f in ("rank", "world", "rendezvous") if getattr(args, f) is None]
        if missing:
            raise ConfigError(f"socket transport needs --{', --'.join(missing)}")
        if not 0 <= args.rank < args.world:
            raise ConfigError(f"rank: {args.rank} outside world of {args.world}")


def _load_model(name: str, seed: Optional[int] = None):
    if name == "compute_heavy":
        from .graph import build_model_from_spec
        return build_model_from_spec(compute_heavy_spec(), seed)
    return load_config(name, seed)


def cmd_run(args) -> int:
    config = config_from_args(args)
    _check_world(args, config)
    model = _load_model(args.model, args.seed)
    dim = 1
    for d in model.input_shape:
        dim *= d
    source = args.data or f"blobs:dim={dim},classes={model.num_classes},n=1000"
    data = fit_to_model(load_dataset(source, args.seed), model.input_shape,
                        model.num_classes)
    next(iter_steps(len(data.x_train), config))  # enough rows for one step
    plan = make_plan(model, config)

    writer = None
    is_head = args.transport == "sim" or args.rank == 0
    if args.out and is_head:
        writer = MetricsLog(args.out, make_header(config, model=args.model, data=source,
                                                  transport=args.transport), args.format)
    on_step = writer.append if writer else None
    try:
        if args.transport == "sim":
            res = fit(model, data, config, bound=args.bound, timeout=args.timeout, on_step=on_step)
            metrics, acc = res.metrics, res.test_accuracy
        else:
            from .comm.sockets import SocketEndpoint
            ep = SocketEndpoint(args.rank, args.world, args.rendezvous, bound=args.bound,
                                timeout=args.timeout)
            try:
                res = run_rank(model, data, config, ep, plan=plan, on_step=on_step)
            finally:
                ep.close()
            metrics, acc = res.metrics, res.test_accuracy
    finally:
        if writer:
            writer.close()
    if is_head and metrics:
        print(f"steps {len(metrics)} final loss {metrics[-1].loss:.6f} "
              f"test accuracy {acc if acc is None else f'{acc:.4f}'}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_sweep, expand_grid
    model = _load_model(args.model)
    cells = expand_grid(args.strategies, args.partitions, args.replicas, args.stages,
                        args.batch_sizes)
    rows = bench_sweep(model, cells, steps=args.steps, warmup=args.warmup,
                       repeats=args.repeats, out=args.out)
    for r in rows:
        ips = r["images_per_sec"]
        print(f"{r['strategy']:6s} P={r['num_partitions']} R={r['num_replicas']} "
              f"S={r['pipeline_stages']:<3d} BS={r['batch_size']:<4d} "
              + (f"{ips:10.1f} img/s" if r["status"] == "ok" else f"error: {r['error']}"))
    return 0


def cmd_plan(args) -> int:
    model = _load_model(args.model)
    print(dump(model, partition(model, args.num_partitions, args.num_replicas, args.cost_model)))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handler = {"run": cmd_run, "bench": cmd_bench, "plan": cmd_plan}[args.command]
    try:
        return handler(args)
    except (ConfigError, ModelSpecError, DataError, PartitionError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except CommError as e:
        print(f"transport error: {e}", file=sys.stderr)
        return 3
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

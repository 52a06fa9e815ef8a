"""``gsconv`` command line.

Subcommands: gen, train, eval, profile, bench, verify-gs.

Configuration precedence is: command-line flag > --spec file > built-in
default. Every error exits with status 1 and prints a single line
``gsconv: <kind>: <message>`` on stderr.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import statistics
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, GSConvError
from .group_shift import (
    GroupShiftConfig,
    PermutationTable,
    apply_group_shift_naive,
    apply_permutation,
    build_permutation,
    check_suite,
    factorizations,
)
from .network import (
    DEFAULT_CHANNELS,
    Insert,
    NetworkSpec,
    Placement,
    StageSpec,
    build_network,
    load_checkpoint,
    make_spec,
    preset_spatial_groups,
    save_checkpoint,
)
from .profiler import compare_report, count_flops, rows_to_csv
from .synth import TaskSpec, generate, read_dataset, write_dataset
from .training import TrainConfig, evaluate, normalize_volume, train, write_metrics_csv

log = logging.getLogger("gsconv")


def _ints(text: str, n: int | None = None, what: str = "value") -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be comma-separated integers, got {text!r}")
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} needs {n} integers, got {len(vals)}")
    return vals


def _dims3(text):
    return _ints(text, 3, "--dims")


def _dims5(text):
    return _ints(text, 5, "dims")


def _groups(text):
    return _ints(text, 3, "--groups")


def _fraction(text):
    try:
        f = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"bad fraction {text!r}")
    return f


# shared option groups ----------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness (default 0)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_net(p):
    g = p.add_argument_group("network (flags override --spec)")
    g.add_argument("--spec", type=Path, help="NetworkSpec JSON file")
    g.add_argument("--preset", choices=["prosgv1", "prosgv2", "prosgv3", "prosgv4", "brats", "bratsv1"])
    g.add_argument("--insert", choices=[i.value for i in Insert])
    g.add_argument("--placement", choices=[p.value for p in Placement])
    g.add_argument("--shift-fraction", type=_fraction)


def _add_task(p, count_default):
    g = p.add_argument_group("synthetic data")
    g.add_argument("--task", choices=["longrange", "local"], default="longrange")
    g.add_argument("--dims", type=_dims3, default=(32, 32, 16), help="D,H,W (default 32,32,16)")
    g.add_argument("--count", type=int, default=count_default, help="number of samples")
    g.add_argument("--data", type=Path, help="dataset directory written by 'gsconv gen' (overrides --task)")


def _resolve_spec(args, in_channels=1, num_classes=3) -> NetworkSpec:
    if args.spec is not None:
        spec = NetworkSpec.load(args.spec)
    else:
        spec = make_spec(in_channels, num_classes, channels=DEFAULT_CHANNELS)
    changes = {}
    if args.preset:
        groups = preset_spatial_groups(args.preset)
        if len(groups) != spec.depth:
            raise ConfigError(f"preset has {len(groups)} stages, spec has {spec.depth}")
        changes["stages"] = [StageSpec(s.channels, g, s.conv) for s, g in zip(spec.stages, groups)]
    if args.insert:
        changes["insert"] = args.insert
    if args.placement:
        changes["placement"] = args.placement
    if args.shift_fraction is not None:
        changes["shift_fraction"] = args.shift_fraction
    return spec.with_(**changes) if changes else spec


def _load_data(args, seed_offset=0):
    if args.data is not None:
        pairs, manifest = read_dataset(args.data)
        return pairs, manifest["task"]
    task = TaskSpec(args.task, args.dims, 3, args.seed + seed_offset, args.count)
    return [(s.volume, s.label) for s in generate(task)], {"kind": task.kind.value, "dims": list(task.dims),
                                                          "seed": task.seed, "count": task.count}


def prepare(pairs):
    """Per-volume standardisation over the nonzero (body) region."""
    return [(normalize_volume(v, v != 0), lab) for v, lab in pairs]


# subcommands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    task = TaskSpec(args.task, args.dims, 3, args.seed, args.count)
    path = write_dataset(generate(task), args.out, task)
    print(f"wrote {task.count} samples and {path}")
    return 0


def cmd_train(args) -> int:
    pairs, task = _load_data(args)
    pairs = prepare(pairs)
    dims = pairs[0][0].shape[:3]
    spec = _resolve_spec(args, in_channels=pairs[0][0].shape[-1])
    cfg = TrainConfig(
        max_iters=args.iters, base_lr=args.lr, power=args.power, batch_size=args.batch,
        momentum=args.momentum, seed=args.seed, log_every=args.log_every,
    )
    net = build_network(spec, dims, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = train(net, pairs, cfg)
    write_metrics_csv(rows, out / "metrics.csv", spec.num_classes - 1)
    save_checkpoint(net, out / "checkpoint.gsck")
    spec.save(out / "spec.json")
    manifest = {
        "spec_path": str(args.spec) if args.spec else None,
        "task": task,
        "train_config": cfg.__dict__,
        "output_dir": str(out),
        "seed": args.seed,
        "tool_version": __version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    last = rows[-1]
    print(f"iters={last.iteration} loss={last.loss:.6f} mDice={last.mdice:.4f} out={out}")
    return 0


def cmd_eval(args) -> int:
    spec = NetworkSpec.load(args.spec) if args.spec else None
    net = load_checkpoint(args.checkpoint, spec)
    pairs, _ = _load_data(args, seed_offset=args.eval_seed_offset)
    pairs = prepare(pairs)
    if pairs[0][0].shape[:3] != net.input_dims:
        raise ConfigError(f"data dims {pairs[0][0].shape[:3]} do not match checkpoint dims {net.input_dims}")
    per_class, mdice = evaluate(net, pairs, batch_size=args.batch)
    for k, d in enumerate(per_class, start=1):
        print(f"dice_class{k}={d:.6f}")
    print(f"mDice={mdice:.6f}")
    return 0


def cmd_profile(args) -> int:
    spec = _resolve_spec(args, in_channels=args.input[4])
    if spec.in_channels != args.input[4]:
        spec = spec.with_(in_channels=args.input[4])
    if args.baseline == "conv3":
        report = compare_report(spec, args.input)
        text = report.to_text() if args.format == "text" else report.to_csv()
    else:
        net = build_network(spec, args.input[1:4], tables=False)
        rows, _ = count_flops(net, args.input)
        text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _bench_cfg(args, C):
    if args.cg is not None:
        return GroupShiftConfig(*args.groups, args.cg, args.cs)
    return GroupShiftConfig.from_fraction(args.groups, C, args.shift_fraction or Fraction(1, 2))


def cmd_bench(args) -> int:
    N, D, H, W, C = args.dims
    cfg = _bench_cfg(args, C)
    rng = np.random.default_rng(args.seed)
    F = rng.standard_normal((N, D, H, W, C))
    elements = F.size
    table = build_permutation(cfg, (D, H, W, C))

    def timed(fn, reps):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            out = fn()
            times.append(time.perf_counter_ns() - t0)
        return out, statistics.median(times) / elements

    fast, fast_ns = timed(lambda: apply_permutation(F, table), args.reps)
    slow, slow_ns = timed(lambda: apply_group_shift_naive(F, cfg), args.naive_reps)
    result = {
        "dims": [N, D, H, W, C],
        "groups": list(cfg.groups),
        "c_g": cfg.c_g,
        "c_s": cfg.c_s,
        "elements": elements,
        "table_ns_per_element": round(fast_ns, 3),
        "naive_ns_per_element": round(slow_ns, 3),
        "speedup": round(slow_ns / fast_ns, 2) if fast_ns else None,
        "equal": bool(np.array_equal(fast, slow)),
    }
    print(json.dumps(result))
    return 0 if result["equal"] else 1


def _corrupt(table: PermutationTable) -> PermutationTable:
    m = table.map.copy()
    if m.size > 1:
        m[0] = m[1]
    return PermutationTable(table.dims, m)


def _builtin_grid():
    for N, D, H, W, C in [(2, 2, 2, 2, 4), (2, 4, 2, 2, 4), (1, 4, 4, 2, 8), (2, 2, 4, 4, 8), (1, 4, 4, 4, 8), (1, 6, 4, 2, 8)]:
        for G in (1, 2, 4, 8):
            for groups in factorizations(G, (D, H, W)):
                for frac in (Fraction(0), Fraction(1, 2), Fraction(1)):
                    c_s = frac * C
                    if c_s.denominator != 1 or int(c_s) % G:
                        continue
                    yield (N, D, H, W, C), GroupShiftConfig(*groups, int(c_s) // G)


def cmd_verify_gs(args) -> int:
    cases = [] if args.no_grid else list(_builtin_grid())
    if args.dims is not None:
        if args.groups is None or args.cg is None:
            raise ConfigError("a user case needs --dims, --groups and --cg")
        cfg = GroupShiftConfig(*args.groups, args.cg, args.cs)
        cfg.bind(*args.dims[1:])
        cases.append((args.dims, cfg))
    corrupt = _corrupt if args.inject_fault else None
    failures = 0
    for dims, cfg in cases:
        res = check_suite(cfg, dims, seed=args.seed, corrupt=corrupt)
        ok = all(res.values())
        failures += not ok
        if args.verbose or not ok:
            status = "ok  " if ok else "FAIL"
            bad = ",".join(k for k, v in res.items() if not v)
            print(f"{status} dims={','.join(map(str, dims))} groups={cfg.groups} c_g={cfg.c_g} c_s={cfg.c_s} {bad}")
    print(f"verify-gs: {len(cases) - failures}/{len(cases)} cases passed")
    return 1 if failures else 0


# entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Usage errors as one ``gsconv: usage-error: ...`` line, exit status 2."""

    def error(self, message):
        self.exit(2, f"gsconv: usage-error: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="gsconv",
        description="Group Shift pointwise-convolution networks: data, training, profiling, verification.",
        epilog="Precedence: command-line flag > --spec file > default.",
    )
    parser.add_argument("--version", action="version", version=f"gsconv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset (GSV1 volumes + manifest.json)")
    _add_common(p)
    _add_task(p, 8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a network; writes metrics.csv, checkpoint, spec and manifest")
    _add_common(p)
    _add_net(p)
    _add_task(p, 400)
    p.add_argument("--iters", type=int, default=1000)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--power", type=float, default=0.9)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class Dice and mDice of a checkpoint")
    _add_common(p)
    _add_task(p, 100)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--spec", type=Path, help="optional spec that must match the checkpoint")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--eval-seed-offset", type=int, default=1, help="seed offset for generated eval data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="parameter / FLOP table as CSV")
    _add_common(p)
    _add_net(p)
    p.add_argument("--input", type=_dims5, required=True, help="N,D,H,W,C")
    p.add_argument("--baseline", choices=["conv3"], help="add a side-by-side 3x3x3 comparison")
    p.add_argument("--format", choices=["csv", "text"], default="csv")
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("bench", help="time naive vs table group shift")
    _add_common(p)
    p.add_argument("--dims", type=_dims5, default=(1, 64, 64, 64, 32), help="N,D,H,W,C")
    p.add_argument("--groups", type=_groups, default=(2, 2, 2))
    p.add_argument("--cg", type=int)
    p.add_argument("--cs", type=int)
    p.add_argument("--shift-fraction", type=_fraction)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--naive-reps", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify-gs", help="group shift property suite (nonzero exit on failure)")
    _add_common(p)
    p.add_argument("--dims", type=_dims5, help="N,D,H,W,C of an extra user case")
    p.add_argument("--groups", type=_groups)
    p.add_argument("--cg", type=int)
    p.add_argument("--cs", type=int)
    p.add_argument("--no-grid", action="store_true", help="skip the built-in grid")
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify_gs)
    return parser


def _thread_limit(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except GSConvError as exc:
        print(f"gsconv: {exc.prefix}: {str(exc).splitlines()[0]}", file=sys.stderr)
    except OSError as exc:
        print(f"gsconv: io-error: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())

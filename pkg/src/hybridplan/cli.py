"""Command-line entry points: gen | train | eval-open | eval-closed | plan | dump.

Exit codes: 0 success, 1 usage/configuration error, 2 data error,
3 numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import TrainConfig, config_hash, load_config, serialize_config
from .errors import ConfigurationError, DataError, NumericError, ParseError
from .model import HppModel


def _load_cfg(args) -> TrainConfig:
    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _load_model(cfg: TrainConfig, checkpoint: str | None) -> HppModel:
    model = HppModel(cfg)
    if checkpoint:
        model.load(checkpoint)
    return model


def cmd_gen(args) -> int:
    from .harness import build_dataset
    cfg = _load_cfg(args)
    names = build_dataset(cfg.seed, args.n, cfg, args.out)
    print(f"wrote {len(names)} scenarios to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .harness import train
    cfg = _load_cfg(args)
    result = train(cfg, args.data, args.out)
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"epochs: {len(result.curve)}  first={result.curve[0][1]:.3f} "
          f"last={result.curve[-1][1]:.3f}  wall={result.wall_seconds:.1f}s")
    return 0


def cmd_eval_open(args) -> int:
    from .harness import eval_open_loop, load_dataset
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    scenarios, labels, tags = load_dataset(args.data)
    if args.split != "all":
        keep = [i for i, t in enumerate(tags) if t == args.split]
        scenarios = [scenarios[i] for i in keep]
        labels = [labels[i] for i in keep]
    report = eval_open_loop(model, scenarios, labels, mode=args.mode)
    os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
    with open(args.out, "w") as f:
        f.write(report.to_text())
    with open(args.out + ".csv", "w") as f:
        f.write(report.to_csv())
    print(f"report: {args.out}")
    return 0


def cmd_eval_closed(args) -> int:
    from .harness import expert_trace, load_dataset, run_closed_loop
    from .metrics import closed_loop_metrics, MetricReport, aggregate
    from .refinement import route_from_polyline
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    scenarios, _, _ = load_dataset(args.data)
    rows = []
    for scenario in scenarios[: args.n or len(scenarios)]:
        trace = run_closed_loop(model, scenario, mode=args.mode)
        expert = expert_trace(scenario, plan_dt=model.spec.step_seconds)
        route = route_from_polyline(scenario.route, corridor=200.0)
        row = closed_loop_metrics(trace.tick_states, expert, route, trace.collided,
                                  trace.tick_dt)
        row["min_clearance"] = trace.min_clearance if np.isfinite(trace.min_clearance) else -1.0
        rows.append(row)
    report = MetricReport(aggregate(rows), {"scenarios": len(rows)},
                          serialize_config(cfg), config_hash(cfg),
                          notes=[f"closed-loop mode: {args.mode}"])
    with open(args.out, "w") as f:
        f.write(report.to_text())
    print(f"report: {args.out}")
    return 0


def cmd_plan(args) -> int:
    from .harness import refine_plan
    from .occformer import save_grid_dump
    from .scene import load_scenario
    cfg = _load_cfg(args)
    model = _load_model(cfg, args.checkpoint)
    scenario = load_scenario(args.scenario)
    batch = model.make_batch([scenario], with_labels=False)
    out = model.forward(batch)
    tau = out.plan.tau.data[0]
    if args.mode == "refined":
        result = refine_plan(model, scenario, tau, out.occupancy.joint.data[0],
                             out.policies[-1])
        tau = result.tau
    with open(args.out, "w") as f:
        f.write("# plan x y\n")
        for x, y in tau:
            f.write(f"{x!r} {y!r}\n")
    if args.dump_grids:
        save_grid_dump(args.out + ".grid", out.occupancy.probs.data[0])
    print(f"plan: {args.out}")
    return 0


def cmd_dump(args) -> int:
    from .occformer import load_grid_dump
    grid = load_grid_dump(args.grid)
    print(f"grid extents: {grid.shape}")
    print(f"occupied fraction (>0.5): {(grid > 0.5).mean():.6f}")
    print(f"value range: [{grid.min():.6f}, {grid.max():.6f}]")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridplan",
                                     description="hybrid-prediction integrated planning")
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--seed", type=int, help="override config seed")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen", help="generate a scenario dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-open", help="open-loop evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("raw", "refined"), default="raw")
    p.add_argument("--split", choices=("train", "val", "all"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_open)

    p = sub.add_parser("eval-closed", help="closed-loop log-replay evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("raw", "refined", "expert"), default="raw")
    p.add_argument("--n", type=int, default=0, help="limit scenario count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_closed)

    p = sub.add_parser("plan", help="plan for a single scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=("raw", "refined"), default="raw")
    p.add_argument("--dump-grids", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("dump", help="inspect a grid dump file")
    p.add_argument("--grid", required=True)
    p.set_defaults(func=cmd_dump)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigurationError, argparse.ArgumentError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (ParseError, DataError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``circuit-sizer {train,deploy,fom,compare,inspect}``.

Config values can be overridden with ``--set section.key=value`` or with the
shorthand ``--section.key value``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import ConfigError, load_config, resolve_netlist
from .netlist import NetlistError, build_graph, load_netlist, to_dot

log = logging.getLogger("circuit_sizer")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI-style run configuration")
    p.add_argument("--circuit", choices=("opamp", "rfpa"), help="shorthand for --set run.circuit=...")
    p.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
    p.add_argument("--episodes", type=int, help="override ppo.episodes_total")
    p.add_argument("--out", help="output directory (default $CIRCUIT_SIZER_OUT/<circuit>)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuit-sizer", description="RL-based analog/RF circuit sizing")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="PPO training in P2S mode, one run per seed")
    _common(p)

    p = sub.add_parser("deploy", help="run a trained policy on one goal or a sample of goals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--goal", nargs="+", metavar="NAME=VALUE", help="target specifications, e.g. G=350 PM=55")
    p.add_argument("--sample", type=int, metavar="N", help="report deployment accuracy over N sampled goals")
    p.add_argument("--max-steps", type=int, help="step cap (default: the training episode length)")
    p.add_argument("--seed", type=int, default=0, help="goal-sampling seed for --sample")
    p.add_argument("--out", help="output directory (default: next to the checkpoint)")

    p = sub.add_parser("fom", help="FoM optimization: PPO vs GA vs random search at equal budgets")
    _common(p)

    p = sub.add_parser("compare", help="trained policy vs GA vs random search on sampled goals")
    _common(p)
    p.add_argument("--checkpoint", help="policy checkpoint (default: <out>/seed_<first seed>/checkpoint.json)")
    p.add_argument("--n-goals", type=int, help="number of sampled goals (default compare.n_goals)")

    p = sub.add_parser("inspect", help="print the circuit graph and parameter table of a netlist")
    p.add_argument("netlist", help="netlist file or builtin name (opamp, rfpa)")
    p.add_argument("--dot", metavar="PATH", help="also write a Graphviz description")
    return parser


def _split_extra(extra: list[str]) -> list[tuple[str, str]]:
    """Turn ``--section.key value`` (or ``--section.key=value``) pairs into overrides."""
    out, i = [], 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or "." not in tok:
            raise ConfigError(f"unrecognized argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override {tok!r} needs a value")
            value = extra[i + 1]
            i += 2
        out.append((key, value))
    return out


def _config(args, extra):
    overrides = []
    if args.circuit:
        overrides.append(("run.circuit", args.circuit))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set {item!r} must look like section.key=value")
        overrides.append((key.strip(), value))
    overrides += _split_extra(extra)
    if args.episodes is not None:
        overrides.append(("ppo.episodes_total", str(args.episodes)))
    if args.seed is not None:
        overrides.append(("run.seeds", str(args.seed)))
    if args.out:
        overrides.append(("run.output_dir", args.out))
    return load_config(args.config, overrides)


def cmd_train(args, extra) -> int:
    cfg = _config(args, extra)
    results = experiments.run_train(cfg)
    for r in results:
        print(f"seed {r.seed}: final deployment accuracy {r.final_accuracy:.3f}, "
              f"mean steps {r.final_mean_steps:.2f}  ({r.checkpoint})")
    print(f"wrote {cfg.output_dir}")
    return 0


def _parse_goal(items: list[str]) -> dict[str, float]:
    goal = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"goal entry {item!r} must look like NAME=VALUE")
        try:
            goal[name.strip()] = float(value)
        except ValueError:
            raise ValueError(f"goal entry {item!r}: {value!r} is not a number") from None
    return goal


def cmd_deploy(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    if (args.goal is None) == (args.sample is None):
        raise ValueError("give exactly one of --goal or --sample")
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "deploy"
    if args.sample is not None:
        if args.sample < 1:
            raise ValueError("--sample needs at least one goal")
        acc, steps = experiments.run_deploy_sample(args.checkpoint, args.sample, out, args.seed, args.max_steps)
        print(f"deployment accuracy {acc:.3f} over {args.sample} goals, mean steps {steps:.2f}")
        return 0
    rep = experiments.run_deploy_goal(args.checkpoint, _parse_goal(args.goal), out, args.max_steps)
    if rep.unseen:
        print(f"warning: unseen specification ({', '.join(rep.unseen)} outside the sampling space); "
              f"step cap raised to {rep.max_steps}")
    print(f"success={rep.success} steps={rep.steps}")
    print(f"wrote {out / 'trace.csv'}")
    return 0


def cmd_fom(args, extra) -> int:
    cfg = _config(args, extra)
    table = experiments.run_fom(cfg)
    for row in table:
        print(f"{row['method']:<18} seed {row['seed']}: FoM {row['final_fom']:.4f} ({row['evals_used']} evals)")
    print(f"wrote {cfg.output_dir / 'fom'}")
    return 0


def cmd_compare(args, extra) -> int:
    cfg = _config(args, extra)
    ckpt = args.checkpoint or cfg.output_dir / f"seed_{cfg.run.seeds[0]}" / "checkpoint.json"
    summary = experiments.run_compare(cfg, ckpt, n_goals=args.n_goals)
    print(f"{'method':<18} {'design_accuracy':>15} {'mean_steps':>10}")
    for row in summary:
        print(f"{row['method']:<18} {row['design_accuracy']:>15.3f} {row['mean_steps']:>10.1f}")
    return 0


def cmd_inspect(args, extra) -> int:
    if extra:
        raise ConfigError(f"unrecognized arguments {extra}")
    netlist = load_netlist(resolve_netlist(args.netlist))
    print(experiments.describe_netlist(netlist))
    if args.dot:
        Path(args.dot).write_text(to_dot(build_graph(netlist)), encoding="utf-8")
        print(f"wrote {args.dot}")
    return 0


COMMANDS = {"train": cmd_train, "deploy": cmd_deploy, "fom": cmd_fom, "compare": cmd_compare,
            "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except (ConfigError, NetlistError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

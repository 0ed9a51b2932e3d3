"""Experiment orchestration behind the command-line interface.

Every run writes deterministic CSVs (metrics, results, summaries) and keeps
wall-clock measurements in separate ``timing.csv`` files so reruns with the
same config and seed produce byte-identical metrics.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plots
from .baselines import SearchSpace, fom_fitness, genetic_search, p2s_fitness, random_search
from .config import RunConfig
from .env import CircuitEnv, Direction, SpecDef, make_evaluator, raw_reward, sample_goal
from .netlist import Netlist, build_graph, parse_netlist
from .policy import ActorCritic, Architecture, budget_matched, config_hash
from .ppo import (FOM_COLUMNS, METRICS_COLUMNS, PolicyAgent, deploy, greedy_fom, named_rng,
                  out_of_range_specs, policy_fom_search, rollout, train, train_fom, write_csv)

log = logging.getLogger(__name__)


@dataclass
class Setup:
    """Everything needed to build environments for one circuit."""
    circuit: str
    netlist: Netlist
    netlist_text: str
    spec_defs: tuple[SpecDef, ...]
    train_fidelity: str
    deploy_fidelity: str
    max_episode_len: int
    bonus: float
    fom_refs: tuple[float, ...]

    @classmethod
    def from_config(cls, cfg: RunConfig) -> Setup:
        text = cfg.netlist_path.read_text(encoding="utf-8")
        return cls(cfg.run.circuit, parse_netlist(text), text, cfg.spec_defs(), cfg.env.train_fidelity,
                   cfg.env.deploy_fidelity, cfg.env.max_episode_len, cfg.env.bonus, tuple(cfg.env.fom_refs))

    @classmethod
    def from_meta(cls, meta: dict) -> Setup:
        defs = tuple(SpecDef(d["name"], Direction(d["direction"]), d["unit"], d["sample_lo"], d["sample_hi"],
                             d["log_sampled"]) for d in meta["spec_defs"])
        return cls(meta["circuit"], parse_netlist(meta["netlist_text"]), meta["netlist_text"], defs,
                   meta["train_fidelity"], meta["deploy_fidelity"], meta["max_episode_len"], meta["bonus"],
                   tuple(meta["fom_refs"]))

    def to_meta(self) -> dict:
        return {
            "circuit": self.circuit,
            "netlist_text": self.netlist_text,
            "spec_defs": [{**dataclasses.asdict(d), "direction": d.direction.value} for d in self.spec_defs],
            "train_fidelity": self.train_fidelity,
            "deploy_fidelity": self.deploy_fidelity,
            "max_episode_len": self.max_episode_len,
            "bonus": self.bonus,
            "fom_refs": list(self.fom_refs),
        }

    def evaluator(self, fidelity: str):
        return make_evaluator(self.circuit, self.netlist, fidelity)

    def env_factory(self, fidelity: str, mode: str = "p2s", max_episode_len: int | None = None):
        ev = self.evaluator(fidelity)
        cap = max_episode_len or self.max_episode_len
        return lambda: CircuitEnv(self.netlist, ev, cap, self.bonus, mode, self.fom_refs, self.spec_defs)


def make_architecture(cfg: RunConfig, setup: Setup, variant: str | None = None) -> Architecture:
    p = cfg.policy
    kwargs = dict(num_params=setup.netlist.num_params, num_specs=len(setup.spec_defs),
                  gnn_layers=p.gnn_layers, gnn_hidden=p.gnn_hidden, gat_heads=p.gat_heads,
                  gat_head_dim=p.gat_head_dim, fcnn_hidden=tuple(p.fcnn_hidden),
                  shared_hidden=tuple(p.shared_hidden), spec_input=p.spec_input, share_trunk=p.share_trunk)
    variant = variant or cfg.run.policy_variant
    arch = Architecture(variant=variant, **kwargs)
    if variant == "mlp_baseline":
        arch = budget_matched(arch, Architecture(variant="gcn_fc", **kwargs))
    return arch


def new_policy(cfg: RunConfig, setup: Setup, seed: int, variant: str | None = None) -> ActorCritic:
    graph = build_graph(setup.netlist)
    return ActorCritic(make_architecture(cfg, setup, variant), graph.adjacency,
                       rng=named_rng(seed, "policy-init"))


def _seed_config(cfg: RunConfig, seed: int):
    return dataclasses.replace(cfg.ppo, seed=seed, max_episode_len=cfg.env.max_episode_len)


def _write_timing(path: Path, label: str, values: Sequence[tuple]):
    write_csv(path, [label, "wall_secs"], [{label: k, "wall_secs": v} for k, v in values])


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    metrics: list[dict]
    final_accuracy: float | None
    final_mean_steps: float | None
    checkpoint: Path


def run_train(cfg: RunConfig, out_dir: Path | None = None, seeds: Sequence[int] | None = None) -> list[SeedResult]:
    out_dir = Path(out_dir or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup = Setup.from_config(cfg)
    chash = config_hash(cfg.source_text)
    results = []
    for seed in seeds or cfg.run.seeds:
        sdir = out_dir / f"seed_{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        net = new_policy(cfg, setup, seed)
        ckpt = sdir / "checkpoint.json"
        meta = {**setup.to_meta(), "seed": seed, "config": cfg.source_text}
        res = train(net, setup.env_factory(setup.train_fidelity), _seed_config(cfg, seed),
                    deploy_env_factory=setup.env_factory(setup.deploy_fidelity),
                    checkpoint=lambda n: n.save(ckpt, chash, meta))
        write_csv(sdir / "metrics.csv", METRICS_COLUMNS, res.metrics)
        _write_timing(sdir / "timing.csv", "batch", [(m["batch"], t) for m, t in zip(res.metrics, res.timings)])
        log.info("seed %d: final deployment accuracy %s, mean steps %s", seed, res.final_accuracy,
                 res.final_mean_steps)
        results.append(SeedResult(seed, res.metrics, res.final_accuracy, res.final_mean_steps, ckpt))

    write_csv(out_dir / "summary.csv", ["seed", "final_accuracy", "final_mean_steps"],
              [{"seed": r.seed, "final_accuracy": r.final_accuracy, "final_mean_steps": r.final_mean_steps}
               for r in results])
    x = [m["episodes_cum"] for m in results[0].metrics]

    def col(name):
        return [[np.nan if m[name] is None else m[name] for m in r.metrics] for r in results]

    plots.training_curves(out_dir / "train_curves.svg", x, {
        "mean episode reward": col("mean_ep_reward"),
        "mean episode length": col("mean_ep_len"),
        "deployment accuracy": col("deploy_acc"),
    })
    return results


# ---------------------------------------------------------------------------
# deploy
# ---------------------------------------------------------------------------

def load_checkpoint(path: str | Path) -> tuple[ActorCritic, Setup, dict]:
    net, doc = ActorCritic.load(path)
    meta = doc.get("meta") or {}
    if "circuit" not in meta:
        raise ValueError(f"checkpoint {path} carries no environment description")
    setup = Setup.from_meta(meta)
    if net.arch.num_params != setup.netlist.num_params or net.adjacency.shape[0] != build_graph(setup.netlist).num_nodes:
        raise ValueError("checkpoint architecture does not match its netlist")
    return net, setup, doc


@dataclass
class DeployReport:
    success: bool
    steps: int
    unseen: list[str]
    max_steps: int


def run_deploy_goal(checkpoint: str | Path, goal: dict[str, float], out_dir: Path,
                    max_steps: int | None = None, generalization_max_steps: int = 100) -> DeployReport:
    net, setup, _ = load_checkpoint(checkpoint)
    names = [d.name for d in setup.spec_defs]
    missing = [n for n in names if n not in goal]
    if missing or set(goal) - set(names):
        raise ValueError(f"goal must give exactly the specs {names}")
    g = np.array([goal[n] for n in names], dtype=float)
    if np.any(g <= 0):
        raise ValueError("goal values must be positive")
    env = setup.env_factory(setup.deploy_fidelity)()
    unseen = out_of_range_specs(env, g)
    cap = max_steps or setup.max_episode_len
    if unseen:
        log.warning("unseen specification (outside the sampling space): %s", ", ".join(unseen))
        cap = max(cap, generalization_max_steps)
    result = deploy(PolicyAgent(net), env, g, max_steps=cap)
    out_dir.mkdir(parents=True, exist_ok=True)
    pnames = setup.netlist.param_names
    rows = []
    for k, rec in enumerate(result.trace, start=1):
        row = {"step": k, "reward": rec.reward}
        row.update({p: float(v) for p, v in zip(pnames, rec.params)})
        row.update({n: float(v) for n, v in zip(names, rec.specs)})
        rows.append(row)
    write_csv(out_dir / "trace.csv", ["step"] + pnames + names + ["reward"], rows)
    if result.trace:
        plots.deployment_trace(out_dir / "trace.svg", np.array([r.specs for r in result.trace]), g, names,
                               [d.log_sampled for d in setup.spec_defs])
    return DeployReport(result.success, result.steps_used, unseen, cap)


def run_deploy_sample(checkpoint: str | Path, n_goals: int, out_dir: Path, seed: int = 0,
                      max_steps: int | None = None) -> tuple[float, float]:
    net, setup, _ = load_checkpoint(checkpoint)
    rng = named_rng(seed, "deploy-sample")
    goals = [sample_goal(rng, setup.spec_defs) for _ in range(n_goals)]
    cap = max_steps or setup.max_episode_len
    factory = setup.env_factory(setup.deploy_fidelity, max_episode_len=cap)
    agent = PolicyAgent(net)
    trajs = rollout(agent, [factory() for _ in goals], goals, None, greedy=True, record_obs=False)
    names = [d.name for d in setup.spec_defs]
    rows = [{**{f"goal_{n}": float(v) for n, v in zip(names, t.goal)}, "success": int(t.terminal),
             "steps": t.length} for t in trajs]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "deploy_sample.csv", [f"goal_{n}" for n in names] + ["success", "steps"], rows)
    wins = [t.length for t in trajs if t.terminal]
    return len(wins) / n_goals, (float(np.mean(wins)) if wins else float("nan"))


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def run_compare(cfg: RunConfig, checkpoint: str | Path, out_dir: Path | None = None,
                n_goals: int | None = None) -> list[dict]:
    """Trained policy vs GA vs random search on the same sampled goals."""
    checkpoint = Path(checkpoint)
    if not checkpoint.exists():
        raise FileNotFoundError(f"missing checkpoint {checkpoint}; run 'train' first")
    out_dir = Path(out_dir or cfg.output_dir / "compare")
    out_dir.mkdir(parents=True, exist_ok=True)
    net, setup, _ = load_checkpoint(checkpoint)
    n_goals = n_goals or cfg.compare.n_goals
    rng = named_rng(cfg.compare.seed, "compare-goals")
    goals = [sample_goal(rng, setup.spec_defs) for _ in range(n_goals)]
    names = [d.name for d in setup.spec_defs]
    fine = setup.evaluator(setup.deploy_fidelity)
    space = SearchSpace.from_netlist(setup.netlist)
    rows, timing = [], []

    def record(method, goal, success, used, best_r):
        rows.append({"method": method, **{f"goal_{n}": float(v) for n, v in zip(names, goal)},
                     "success": int(success), "evals_used": used, "best_r": best_r})

    t0 = time.perf_counter()
    factory = setup.env_factory(setup.deploy_fidelity, max_episode_len=cfg.compare.max_steps)
    trajs = rollout(PolicyAgent(net), [factory() for _ in goals], goals, None, greedy=True, record_obs=False)
    for g, t in zip(goals, trajs):
        best = max((float(raw_reward(s, g, setup.spec_defs)) for s in t.specs), default=-math.inf)
        record("policy", g, t.terminal, t.length, best)
    timing.append(("policy", time.perf_counter() - t0))

    t0 = time.perf_counter()
    for i, g in enumerate(goals):
        res = genetic_search(p2s_fitness(fine, g), space, dataclasses.replace(cfg.ga, seed=cfg.ga.seed + i))
        record("genetic_algorithm", g, res.success, res.evals_to_target or res.evals_used, res.best_r)
    timing.append(("genetic_algorithm", time.perf_counter() - t0))

    t0 = time.perf_counter()
    for i, g in enumerate(goals):
        res = random_search(p2s_fitness(fine, g), space, cfg.ga.eval_budget_cap,
                            named_rng(cfg.compare.seed + i, "random-search"), target=0.0)
        record("random_search", g, res.success, res.evals_to_target or res.evals_used, res.best_r)
    timing.append(("random_search", time.perf_counter() - t0))

    write_csv(out_dir / "results.csv", ["method"] + [f"goal_{n}" for n in names] +
              ["success", "evals_used", "best_r"], rows)
    summary = []
    for method in ("policy", "genetic_algorithm", "random_search"):
        mine = [r for r in rows if r["method"] == method]
        wins = [r["evals_used"] for r in mine if r["success"]]
        summary.append({"method": method, "design_accuracy": len(wins) / len(mine),
                        "mean_steps": float(np.mean(wins)) if wins else float("nan")})
    write_csv(out_dir / "summary.csv", ["method", "design_accuracy", "mean_steps"], summary)
    _write_timing(out_dir / "timing.csv", "method", timing)
    return summary


# ---------------------------------------------------------------------------
# FoM
# ---------------------------------------------------------------------------

def run_fom(cfg: RunConfig, out_dir: Path | None = None, seeds: Sequence[int] | None = None) -> list[dict]:
    """PPO FoM training per variant and seed, against GA and random search with equal evaluation caps."""
    if cfg.run.circuit != "rfpa":
        raise ValueError("FoM optimization is defined for the RF PA")
    out_dir = Path(out_dir or cfg.output_dir / "fom")
    out_dir.mkdir(parents=True, exist_ok=True)
    setup = Setup.from_config(cfg)
    chash = config_hash(cfg.source_text)
    fine = setup.evaluator(setup.deploy_fidelity)
    space = SearchSpace.from_netlist(setup.netlist)
    budget = cfg.fom.eval_budget
    seeds = list(seeds or cfg.run.seeds)
    table, timing = [], []
    rl_curves: dict[str, list] = {}
    search_curves: dict[str, list] = {}

    for variant in cfg.fom.variants:
        for seed in seeds:
            t0 = time.perf_counter()
            sdir = out_dir / variant / f"seed_{seed}"
            sdir.mkdir(parents=True, exist_ok=True)
            net = new_policy(cfg, setup, seed, variant)
            ckpt = sdir / "checkpoint.json"
            meta = {**setup.to_meta(), "seed": seed, "mode": "fom", "config": cfg.source_text}
            pcfg = _seed_config(cfg, seed)
            res = train_fom(net, setup.env_factory(setup.train_fidelity, mode="fom"), pcfg,
                            checkpoint=lambda n: n.save(ckpt, chash, meta))
            write_csv(sdir / "metrics.csv", FOM_COLUMNS, res.metrics)
            # training only touches the training-fidelity evaluator; the trained policy then
            # gets the same deployment-fidelity budget as the search baselines
            deploy_env = setup.env_factory(setup.deploy_fidelity, mode="fom")()
            greedy_final, _ = greedy_fom(PolicyAgent(net), deploy_env)
            best, curve = policy_fom_search(PolicyAgent(net), deploy_env, budget, named_rng(seed, "fom-deploy"))
            table.append({"method": variant, "seed": seed, "final_fom": best, "greedy_final_fom": greedy_final,
                          "evals_used": len(curve), "train_evals": pcfg.episodes_total * cfg.env.max_episode_len})
            rl_curves.setdefault(variant, []).append([m["best_fom"] for m in res.metrics])
            search_curves.setdefault(variant, []).append(curve)
            timing.append((f"{variant}/seed_{seed}", time.perf_counter() - t0))

    for seed in seeds:
        t0 = time.perf_counter()
        ga_cfg = dataclasses.replace(cfg.ga, seed=seed, eval_budget_cap=budget,
                                     generations=max(cfg.ga.generations, budget))
        ga = genetic_search(fom_fitness(fine), space, ga_cfg, target=None)
        table.append({"method": "genetic_algorithm", "seed": seed, "final_fom": ga.best_r,
                      "evals_used": ga.evals_used, "train_evals": 0})
        search_curves.setdefault("genetic_algorithm", []).append(ga.per_eval)
        timing.append((f"genetic_algorithm/seed_{seed}", time.perf_counter() - t0))
        t0 = time.perf_counter()
        rs = random_search(fom_fitness(fine), space, budget, named_rng(seed, "random-search"))
        table.append({"method": "random_search", "seed": seed, "final_fom": rs.best_r,
                      "evals_used": rs.evals_used, "train_evals": 0})
        search_curves.setdefault("random_search", []).append(rs.history)
        timing.append((f"random_search/seed_{seed}", time.perf_counter() - t0))

    write_csv(out_dir / "fom_results.csv", ["method", "seed", "final_fom", "greedy_final_fom", "evals_used",
                                              "train_evals"],
              table)
    summary = []
    for method in list(cfg.fom.variants) + ["genetic_algorithm", "random_search"]:
        vals = [r["final_fom"] for r in table if r["method"] == method]
        summary.append({"method": method, "median_fom": float(np.median(vals)), "mean_fom": float(np.mean(vals))})
    write_csv(out_dir / "fom_table.csv", ["method", "median_fom", "mean_fom"], summary)
    _write_timing(out_dir / "timing.csv", "run", timing)
    if rl_curves:
        plots.method_curves(out_dir / "fom_training.svg", rl_curves, "batch", "best FoM (P + 3E)")
    plots.method_curves(out_dir / "fom_search.svg", search_curves, "evaluations", "best FoM (P + 3E)")
    return table


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------

def describe_netlist(netlist: Netlist) -> str:
    graph = build_graph(netlist)
    names = [n.name for n in graph.nodes]
    width = max(len(n) for n in names)
    lines = [f"nodes ({graph.num_nodes}):"]
    for i, node in enumerate(graph.nodes):
        lines.append(f"  {i:2d} {node.name:<{width}} {node.kind}")
    lines.append("adjacency:")
    lines.append("  " + " " * width + " " + " ".join(f"{n[:3]:>3}" for n in names))
    for i, n in enumerate(names):
        lines.append(f"  {n:<{width}} " + " ".join(f"{v:>3d}" for v in graph.adjacency[i]))
    lines.append(f"M = {netlist.num_params} tunable parameters")
    lines.append(f"  {'index':>5}  {'name':<10} {'init':>8} {'min':>8} {'max':>8} {'step':>6}  kind")
    for k, p in enumerate(netlist.params):
        kind = "int" if p.integer else ("log" if p.log_scale else "lin")
        lines.append(f"  {k:>5}  {p.full_name:<10} {p.init:>8g} {p.lo:>8g} {p.hi:>8g} {p.step:>6g}  {kind}")
    return "\n".join(lines)

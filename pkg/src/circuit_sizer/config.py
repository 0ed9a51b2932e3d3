"""Run configuration: INI-style sections parsed into typed dataclasses.

Unknown sections or keys are rejected with their ``section.key`` path so a
typo never silently falls back to a default.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .baselines import GaConfig
from .env import OPAMP_SPECS, RFPA_SPECS, SpecDef
from .ppo import PPOConfig

BUILTIN_NETLISTS = ("opamp", "rfpa")


class ConfigError(ValueError):
    pass


@dataclass
class RunSettings:
    circuit: str = "opamp"
    netlist: str = ""
    policy_variant: str = "gcn_fc"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    output_dir: str = ""


@dataclass
class EnvSettings:
    train_fidelity: str = "fine"
    deploy_fidelity: str = "fine"
    max_episode_len: int = 50
    bonus: float = 10.0
    fom_refs: tuple[float, ...] = (2.0, 0.5)
    generalization_max_steps: int = 100


@dataclass
class PolicySettings:
    gnn_layers: int = 2
    gnn_hidden: int = 32
    gat_heads: int = 4
    gat_head_dim: int = 8
    fcnn_hidden: tuple[int, ...] = (32, 32)
    shared_hidden: tuple[int, ...] = (64, 64)
    spec_input: str = "goal+intermediate"
    share_trunk: bool = False


@dataclass
class CompareSettings:
    n_goals: int = 30
    max_steps: int = 50
    seed: int = 0


@dataclass
class FomSettings:
    eval_budget: int = 1000
    variants: tuple[str, ...] = ("gcn_fc", "gat_fc")


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    env: EnvSettings = field(default_factory=EnvSettings)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    policy: PolicySettings = field(default_factory=PolicySettings)
    ga: GaConfig = field(default_factory=GaConfig)
    compare: CompareSettings = field(default_factory=CompareSettings)
    fom: FomSettings = field(default_factory=FomSettings)
    specs: dict[str, tuple[float, float]] = field(default_factory=dict)
    source_text: str = ""

    @property
    def netlist_path(self) -> Path:
        return resolve_netlist(self.run.netlist or self.run.circuit)

    @property
    def output_dir(self) -> Path:
        if self.run.output_dir:
            return Path(self.run.output_dir)
        return Path(os.environ.get("CIRCUIT_SIZER_OUT", "runs")) / self.run.circuit

    def spec_defs(self) -> tuple[SpecDef, ...]:
        base = OPAMP_SPECS if self.run.circuit == "opamp" else RFPA_SPECS
        out = []
        for d in base:
            if d.name in self.specs:
                lo, hi = self.specs[d.name]
                d = dataclasses.replace(d, sample_lo=lo, sample_hi=hi)
            out.append(d)
        return tuple(out)

    def to_text(self) -> str:
        """Canonical rendering of the effective configuration (used for hashing)."""
        lines = []
        for name in ("run", "env", "ppo", "policy", "ga", "compare", "fom"):
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_render(getattr(getattr(self, name), f.name))}")
        if self.specs:
            lines.append("[specs]")
            for k, (lo, hi) in sorted(self.specs.items()):
                lines.append(f"{k} = {lo!r}, {hi!r}")
        return "\n".join(lines) + "\n"


SECTIONS = ("run", "env", "ppo", "policy", "ga", "compare", "fom")


def resolve_netlist(name: str) -> Path:
    if name in BUILTIN_NETLISTS:
        return Path(str(resources.files("circuit_sizer") / "data" / f"{name}.net"))
    return Path(name)


def _render(v: Any) -> str:
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(raw: str, current: Any, where: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "yes", "no", "1", "0"):
                raise ValueError(raw)
            return low in ("true", "yes", "1")
        if isinstance(current, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(x) for x in items)
            if current and isinstance(current[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(current).__name__}") from None


def apply_setting(cfg: RunConfig, section: str, key: str, raw: str):
    where = f"{section}.{key}"
    if section == "specs":
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"{where}: expected '<lo>, <hi>'")
        try:
            cfg.specs[key] = (float(parts[0]), float(parts[1]))
        except ValueError:
            raise ConfigError(f"{where}: bounds must be numbers") from None
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    target = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigError(f"unknown config key {where!r}")
    setattr(target, key, _convert(raw, getattr(target, key), where))


def validate(cfg: RunConfig) -> RunConfig:
    run = cfg.run
    if run.circuit not in BUILTIN_NETLISTS:
        raise ConfigError(f"run.circuit: expected one of {BUILTIN_NETLISTS}, got {run.circuit!r}")
    if run.policy_variant not in ("gcn_fc", "gat_fc", "mlp_baseline"):
        raise ConfigError(f"run.policy_variant: unknown variant {run.policy_variant!r}")
    if not run.seeds:
        raise ConfigError("run.seeds: at least one seed is required")
    if not cfg.netlist_path.exists():
        raise ConfigError(f"run.netlist: file {str(cfg.netlist_path)!r} does not exist")
    for key in ("train_fidelity", "deploy_fidelity"):
        if getattr(cfg.env, key) not in ("fine", "coarse"):
            raise ConfigError(f"env.{key}: expected 'fine' or 'coarse'")
    if run.circuit == "opamp" and "coarse" in (cfg.env.train_fidelity, cfg.env.deploy_fidelity):
        raise ConfigError("env: the op-amp evaluator has a single fidelity")
    if len(cfg.env.fom_refs) != 2:
        raise ConfigError("env.fom_refs: expected two values (P_ref, E_ref)")
    for name in cfg.specs:
        if name not in {d.name for d in (OPAMP_SPECS if run.circuit == "opamp" else RFPA_SPECS)}:
            raise ConfigError(f"specs.{name}: unknown specification for {run.circuit}")
    try:
        PPOConfig(**dataclasses.asdict(cfg.ppo))
        GaConfig(**dataclasses.asdict(cfg.ga))
        cfg.spec_defs()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def defaults_for(circuit: str) -> RunConfig:
    cfg = RunConfig()
    cfg.run.circuit = circuit
    if circuit == "rfpa":
        cfg.env.train_fidelity = "coarse"
        cfg.env.max_episode_len = 30
        cfg.ppo.episodes_total = 3_500
        cfg.ppo.max_episode_len = 30
    return cfg


def load_config(path: str | Path | None = None, overrides: list[tuple[str, str]] | None = None,
                text: str | None = None) -> RunConfig:
    """Read a config file (or text), apply ``section.key`` overrides and validate."""
    if text is None:
        text = Path(path).read_text(encoding="utf-8") if path else ""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    circuit = parser.get("run", "circuit", fallback="opamp").strip()
    for dotted, raw in overrides or []:
        if dotted == "run.circuit":
            circuit = raw.strip()
    cfg = defaults_for(circuit)
    for section in parser.sections():
        for key, raw in parser.items(section):
            apply_setting(cfg, section, key, raw)
    for dotted, raw in overrides or []:
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        apply_setting(cfg, section, key, raw)
    # the environment's episode cap drives PPO's as well
    cfg.ppo.max_episode_len = cfg.env.max_episode_len
    cfg.source_text = cfg.to_text()
    return validate(cfg)

"""Circuit design environment: actions, analytical evaluators and rewards.

Evaluators stand in for a circuit simulator. They take a vector of device
parameters in netlist order and return the circuit specifications. The op-amp
model is a first-order two-stage Miller approximation; the RF power amplifier
model is behavioural, with a fine evaluator and a coarse one whose outputs stay
within +/-10% of the fine values.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum, IntEnum

import numpy as np

from .netlist import CircuitGraph, Netlist, build_graph, node_features

DEFAULT_BONUS = 10.0


class Direction(str, Enum):
    MAXIMIZE = "max"
    MINIMIZE = "min"


class Action(IntEnum):
    DEC = 0
    KEEP = 1
    INC = 2


class DomainError(ValueError):
    """Evaluator or reward called outside its valid domain."""


@dataclass(frozen=True)
class SpecDef:
    name: str
    direction: Direction
    unit: str
    sample_lo: float
    sample_hi: float
    log_sampled: bool = False

    def __post_init__(self):
        if not 0 < self.sample_lo < self.sample_hi:
            raise ValueError(f"spec {self.name}: need 0 < sample_lo < sample_hi")

    def in_range(self, value: float) -> bool:
        return self.sample_lo <= value <= self.sample_hi


OPAMP_SPECS = (
    SpecDef("G", Direction.MAXIMIZE, "V/V", 300.0, 500.0),
    SpecDef("B", Direction.MAXIMIZE, "Hz", 1e6, 2.5e7, log_sampled=True),
    SpecDef("PM", Direction.MAXIMIZE, "deg", 55.0, 60.0),
    SpecDef("P", Direction.MINIMIZE, "W", 1e-4, 1e-2, log_sampled=True),
)

RFPA_SPECS = (
    SpecDef("P", Direction.MAXIMIZE, "W", 2.0, 3.0),
    SpecDef("E", Direction.MAXIMIZE, "", 0.5, 0.6),
)


# ---------------------------------------------------------------------------
# reward
# ---------------------------------------------------------------------------

def reward_terms(g_i, g_star, defs) -> np.ndarray:
    """Per-spec normalized differences, clipped at 0. Each term lies in (-1, 0]."""
    g_i = np.asarray(g_i, dtype=float)
    g_star = np.asarray(g_star, dtype=float)
    if g_i.shape[-1] != len(defs) or g_star.shape[-1] != len(defs):
        raise ValueError(f"expected {len(defs)} specification values")
    if np.any(~(g_i > 0)) or np.any(~(g_star > 0)):
        raise DomainError("specification values must be strictly positive")
    sign = np.array([1.0 if d.direction is Direction.MAXIMIZE else -1.0 for d in defs])
    return np.minimum(sign * (g_i - g_star) / (g_i + g_star), 0.0)


def raw_reward(g_i, g_star, defs):
    """Sum of clipped terms; 0 exactly when every target is met."""
    return reward_terms(g_i, g_star, defs).sum(axis=-1)


def reward(g_i, g_star, defs, bonus: float = DEFAULT_BONUS) -> float:
    r = float(raw_reward(g_i, g_star, defs))
    return r if r < 0 else bonus


def fom_value(specs) -> float:
    """Unnormalized figure of merit P + 3 E."""
    p, e = specs[0], specs[1]
    return float(p + 3.0 * e)


def fom_reward(specs, refs) -> float:
    p, e = float(specs[0]), float(specs[1])
    pr, er = float(refs[0]), float(refs[1])
    if min(p, e, pr, er) <= 0:
        raise DomainError("FoM inputs must be strictly positive")
    return (p - pr) / (p + pr) + 3.0 * (e - er) / (e + er)


def sample_goal(rng: np.random.Generator, defs) -> np.ndarray:
    goal = np.empty(len(defs))
    for k, d in enumerate(defs):
        if d.log_sampled:
            goal[k] = math.exp(rng.uniform(math.log(d.sample_lo), math.log(d.sample_hi)))
        else:
            goal[k] = rng.uniform(d.sample_lo, d.sample_hi)
    return goal


def normalize_specs(values, defs, clip: float = 5.0) -> np.ndarray:
    """Min-max scale spec values against their sampling range (log scale where sampled so)."""
    values = np.asarray(values, dtype=float)
    out = np.empty_like(values)
    for k, d in enumerate(defs):
        v = values[..., k]
        if d.log_sampled:
            lo, hi = math.log(d.sample_lo), math.log(d.sample_hi)
            out[..., k] = (np.log(v) - lo) / (hi - lo)
        else:
            out[..., k] = (v - d.sample_lo) / (d.sample_hi - d.sample_lo)
    return np.clip(out, -clip, clip)


# ---------------------------------------------------------------------------
# actions
# ---------------------------------------------------------------------------

def apply_action(params, action, netlist: Netlist) -> np.ndarray:
    """Move each parameter by -step/0/+step and clamp it to its bounds."""
    params = np.asarray(params, dtype=float)
    action = np.asarray(action)
    if action.shape != params.shape:
        raise ValueError(f"action shape {action.shape} does not match params {params.shape}")
    moved = params + (action.astype(float) - 1.0) * netlist.steps
    moved = np.clip(moved, netlist.lower, netlist.upper)
    ints = netlist.integer_mask
    moved[ints] = np.round(moved[ints])
    return moved


def sample_params(rng: np.random.Generator, netlist: Netlist, n: int) -> np.ndarray:
    """Uniform samples inside the bounds; integer parameters drawn from their integer range."""
    lo, hi = netlist.lower, netlist.upper
    out = rng.uniform(lo, hi, size=(n, len(lo)))
    ints = netlist.integer_mask
    if ints.any():
        out[:, ints] = rng.integers(lo[ints].astype(int), hi[ints].astype(int) + 1, size=(n, int(ints.sum())))
    return out


def _check_bounds(params: np.ndarray, netlist: Netlist):
    tol = 1e-9 * np.maximum(1.0, np.abs(netlist.upper))
    if np.any(params < netlist.lower - tol) or np.any(params > netlist.upper + tol):
        raise DomainError("parameter vector outside its bounds")


# ---------------------------------------------------------------------------
# evaluators
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpAmpConstants:
    k_i: float = 0.5e-6      # A per (um * finger), bias current density
    k_n: float = 2e-6        # A/V^2 per (um * finger)
    lambda_p: float = 0.1    # 1/V
    lambda_n: float = 0.1    # 1/V
    vdd: float = 1.0         # V
    c_load: float = 5e-12    # F
    pm_floor: float = 0.01   # deg; keeps PM strictly positive for unstable designs


def phase_margin_deg(bw, p2, z):
    """Unfloored phase margin of the Miller-compensated two-stage amplifier."""
    return 90.0 - np.degrees(np.arctan(bw / p2)) - np.degrees(np.arctan(bw / z))


class OpAmpEvaluator:
    """Two-stage Miller op-amp: returns [G, B, PM, P] for each parameter vector.

    Expects transistors M1..M7 with parameters W (um) and F (fingers) and a
    compensation capacitor CC with parameter C (pF).
    """

    spec_defs = OPAMP_SPECS
    fidelity = "fine"

    def __init__(self, netlist: Netlist, constants: OpAmpConstants | None = None):
        self.netlist = netlist
        self.constants = constants or OpAmpConstants()
        try:
            self._wf = {
                m: (netlist.index_of(f"{m}.W"), netlist.index_of(f"{m}.F"))
                for m in ("M1", "M5", "M6", "M7")
            }
            self._cc = netlist.index_of("CC.C")
        except KeyError as exc:
            raise ValueError(f"netlist is not a two-stage op-amp: {exc}") from None

    def _size(self, x, dev):
        w, f = self._wf[dev]
        return x[..., w] * x[..., f]

    def __call__(self, params) -> np.ndarray:
        x = np.asarray(params, dtype=float)
        _check_bounds(x, self.netlist)
        c = self.constants
        lam = c.lambda_p + c.lambda_n
        i_tail = c.k_i * self._size(x, "M5")
        i1 = i_tail / 2.0
        i6 = c.k_i * self._size(x, "M7")
        gm1 = np.sqrt(2.0 * c.k_n * self._size(x, "M1") * i1)
        gm6 = np.sqrt(2.0 * c.k_n * self._size(x, "M6") * i6)
        cc = x[..., self._cc] * 1e-12
        gain = (gm1 / (lam * i1)) * (gm6 / (lam * i6))
        bw = gm1 / (2.0 * math.pi * cc)
        p2 = gm6 / (2.0 * math.pi * c.c_load)
        z = gm6 / (2.0 * math.pi * cc)
        pm = np.maximum(phase_margin_deg(bw, p2, z), c.pm_floor)
        power = c.vdd * (i_tail + i6)
        return np.stack([gain, bw, pm, power], axis=-1)


@dataclass(frozen=True)
class RFPAConstants:
    p_max: float = 4.0       # W
    e_max: float = 0.75
    a: float = 2e-3          # 1 / (um * finger), output-stage saturation rate
    b: float = 1.0           # width of the efficiency peak in log drive ratio
    rho: float = 0.5         # drive ratio of peak efficiency
    drive_scale: float = 0.25  # drive ratio at which the drive factor reaches tanh(1)
    coarse_error: float = 0.1


class RFPAEvaluator:
    """Behavioural GaN power amplifier returning [P_out (W), efficiency].

    Output-stage size S_o = W*F of M1, driver size S_d = sum of W*F over
    D1..D5 and DF. The coarse fidelity multiplies the fine values by a smooth
    deterministic factor in [1 - err, 1 + err].
    """

    spec_defs = RFPA_SPECS
    DRIVERS = ("D1", "D2", "D3", "D4", "D5", "DF")

    def __init__(self, netlist: Netlist, fidelity: str = "fine", constants: RFPAConstants | None = None):
        if fidelity not in ("fine", "coarse"):
            raise ValueError(f"fidelity must be 'fine' or 'coarse', got {fidelity!r}")
        self.netlist = netlist
        self.fidelity = fidelity
        self.constants = constants or RFPAConstants()
        try:
            self._out = (netlist.index_of("M1.W"), netlist.index_of("M1.F"))
            self._drv = [(netlist.index_of(f"{d}.W"), netlist.index_of(f"{d}.F")) for d in self.DRIVERS]
        except KeyError as exc:
            raise ValueError(f"netlist is not the RF PA: {exc}") from None
        self._perturb = _SmoothPerturbation(len(netlist.params), [d.name for d in self.spec_defs])

    def with_fidelity(self, fidelity: str) -> RFPAEvaluator:
        return RFPAEvaluator(self.netlist, fidelity, self.constants)

    def fine(self, x: np.ndarray) -> np.ndarray:
        c = self.constants
        s_o = x[..., self._out[0]] * x[..., self._out[1]]
        s_d = sum(x[..., w] * x[..., f] for w, f in self._drv)
        ratio = s_d / s_o
        p_out = c.p_max * (1.0 - np.exp(-c.a * s_o)) * np.tanh(ratio / c.drive_scale)
        eff = c.e_max * np.exp(-c.b * np.log(ratio / c.rho) ** 2)
        return np.stack([p_out, eff], axis=-1)

    def __call__(self, params) -> np.ndarray:
        x = np.asarray(params, dtype=float)
        _check_bounds(x, self.netlist)
        out = self.fine(x)
        if self.fidelity == "coarse":
            xn = (x - self.netlist.lower) / (self.netlist.upper - self.netlist.lower)
            out = out * (1.0 + self.constants.coarse_error * self._perturb(xn))
        return out


class _SmoothPerturbation:
    """Low-frequency sinusoids of the normalized parameters, one pattern per spec, in [-1, 1]."""

    def __init__(self, dim: int, names: list[str], n_waves: int = 3):
        self.waves = []
        for name in names:
            rng = np.random.default_rng(zlib.crc32(name.encode()))
            dirs = rng.normal(size=(n_waves, dim))
            dirs /= np.abs(dirs).sum(axis=1, keepdims=True)
            freq = rng.uniform(0.5, 1.5, size=n_waves)
            phase = rng.uniform(0, 2 * math.pi, size=n_waves)
            amp = rng.uniform(0.5, 1.0, size=n_waves)
            amp /= amp.sum()
            self.waves.append((dirs, freq, phase, amp))

    def __call__(self, xn: np.ndarray) -> np.ndarray:
        cols = []
        for dirs, freq, phase, amp in self.waves:
            arg = 2 * math.pi * freq * (xn @ dirs.T) + phase
            cols.append(np.sin(arg) @ amp)
        return np.stack(cols, axis=-1)


def make_evaluator(circuit: str, netlist: Netlist, fidelity: str = "fine"):
    if circuit == "opamp":
        return OpAmpEvaluator(netlist)
    if circuit == "rfpa":
        return RFPAEvaluator(netlist, fidelity)
    raise ValueError(f"unknown circuit {circuit!r}")


def feasibility_fraction(evaluator, rng: np.random.Generator, n_designs: int = 10_000,
                         n_goals: int = 1_000, designs: np.ndarray | None = None) -> float:
    """Fraction of sampled goals met by at least one uniformly sampled design (brute-force scan)."""
    defs = evaluator.spec_defs
    if designs is None:
        designs = sample_params(rng, evaluator.netlist, n_designs)
    specs = evaluator(designs)
    goals = np.array([sample_goal(rng, defs) for _ in range(n_goals)])
    sign = np.array([1.0 if d.direction is Direction.MAXIMIZE else -1.0 for d in defs])
    s = specs * sign
    g = goals * sign
    hit = 0
    for gk in g:
        if np.any(np.all(s >= gk, axis=1)):
            hit += 1
    return hit / n_goals


# ---------------------------------------------------------------------------
# episodic environment
# ---------------------------------------------------------------------------

@dataclass
class EnvState:
    params: np.ndarray
    intermediate: np.ndarray
    goal: np.ndarray
    step_count: int = 0


@dataclass
class StepRecord:
    params: np.ndarray
    specs: np.ndarray
    reward: float


@dataclass
class EpisodeResult:
    return_value: float
    steps_used: int
    success: bool
    trace: list[StepRecord] = field(default_factory=list)
    goal: np.ndarray | None = None


class CircuitEnv:
    """Goal-conditioned sizing environment around one netlist and one evaluator.

    ``mode='p2s'`` uses the clipped normalized-difference reward with a terminal
    bonus; ``mode='fom'`` uses the normalized FoM reward with fixed-length episodes.
    """

    def __init__(self, netlist: Netlist, evaluator, max_episode_len: int = 50,
                 bonus: float = DEFAULT_BONUS, mode: str = "p2s", fom_refs=(2.0, 0.5), spec_defs=None):
        if mode not in ("p2s", "fom"):
            raise ValueError(f"unknown reward mode {mode!r}")
        self.netlist = netlist
        self.graph: CircuitGraph = build_graph(netlist)
        self.evaluator = evaluator
        self.spec_defs = tuple(spec_defs) if spec_defs is not None else evaluator.spec_defs
        if [d.name for d in self.spec_defs] != [d.name for d in evaluator.spec_defs]:
            raise ValueError("spec definitions do not match the evaluator outputs")
        self.max_episode_len = max_episode_len
        self.bonus = bonus
        self.mode = mode
        self.fom_refs = np.asarray(fom_refs, dtype=float)
        self.state: EnvState | None = None

    @property
    def num_params(self) -> int:
        return self.netlist.num_params

    @property
    def num_specs(self) -> int:
        return len(self.spec_defs)

    def initial_params(self) -> np.ndarray:
        return self.netlist.midpoint()

    def reset(self, goal=None, params=None) -> EnvState:
        params = self.initial_params() if params is None else np.asarray(params, dtype=float)
        if goal is None:
            goal = self.fom_refs if self.mode == "fom" else None
        if goal is None:
            raise ValueError("a goal is required in p2s mode")
        self.state = EnvState(params, self.evaluator(params), np.asarray(goal, dtype=float), 0)
        return self.state

    def reward_of(self, specs, goal) -> float:
        if self.mode == "fom":
            return fom_reward(specs, self.fom_refs)
        return reward(specs, goal, self.spec_defs, self.bonus)

    def step(self, action) -> tuple[EnvState, float, bool]:
        s = self.state
        if s is None:
            raise RuntimeError("reset() must be called before step()")
        if s.step_count >= self.max_episode_len:
            raise RuntimeError("episode already reached its maximum length")
        params = apply_action(s.params, action, self.netlist)
        specs = self.evaluator(params)
        r = self.reward_of(specs, s.goal)
        count = s.step_count + 1
        reached = self.mode == "p2s" and r == self.bonus
        done = reached or count >= self.max_episode_len
        self.state = EnvState(params, specs, s.goal, count)
        return self.state, r, done

    def goal_met(self, specs, goal) -> bool:
        return float(raw_reward(specs, goal, self.spec_defs)) == 0.0

    def observation(self, state: EnvState | None = None):
        """(node feature matrix, spec input vector) for the policy."""
        s = state or self.state
        x = node_features(self.graph, s.params)
        return x, self.spec_input(s.intermediate, s.goal)

    def spec_input(self, intermediate, goal) -> np.ndarray:
        return np.concatenate([normalize_specs(goal, self.spec_defs),
                               normalize_specs(intermediate, self.spec_defs)], axis=-1)

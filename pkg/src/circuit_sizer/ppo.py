"""PPO training and deployment of sizing policies.

Rollouts run a batch of environments in lockstep so the network is evaluated
once per step for all live episodes. Truncated episodes bootstrap with a zero
value, the same as terminal ones.
"""
from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from . import tensor as T
from .env import CircuitEnv, EpisodeResult, StepRecord, fom_value, sample_goal
from .netlist import node_features
from .policy import ActorCritic, sample_action
from .tensor import Adam, Tape, Tensor

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["batch", "episodes_cum", "mean_ep_reward", "mean_ep_len",
                   "policy_loss", "value_loss", "clip_frac", "deploy_acc"]
FOM_COLUMNS = ["batch", "episodes_cum", "mean_ep_reward", "policy_loss", "value_loss",
               "clip_frac", "batch_best_fom", "best_fom", "policy_fom"]


@dataclass
class PPOConfig:
    episodes_total: int = 35_000
    episodes_per_batch: int = 20
    epochs_per_batch: int = 4
    minibatch_size: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    lr: float = 3e-4
    value_coeff: float = 0.5
    entropy_coeff: float = 0.01
    max_grad_norm: float = 0.0
    seed: int = 0
    max_episode_len: int = 50
    eval_interval: int = 50
    eval_goals: int = 20
    final_eval_goals: int = 200

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.episodes_per_batch < 1 or self.minibatch_size < 1 or self.epochs_per_batch < 1:
            raise ValueError("batch sizes and epochs must be at least 1")


@dataclass
class Trajectory:
    goal: np.ndarray
    params: list[np.ndarray] = field(default_factory=list)
    spec_inputs: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    specs: list[np.ndarray] = field(default_factory=list)
    terminal: bool = False
    error: str | None = None

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))


# ---------------------------------------------------------------------------
# agents
# ---------------------------------------------------------------------------

class Agent(Protocol):
    def act(self, envs: Sequence[CircuitEnv], rng: np.random.Generator | None,
            greedy: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Actions (B x M), joint log-probs (B,) and value estimates (B,) for the current states."""


class PolicyAgent:
    """Adapter running an :class:`ActorCritic` on a batch of environments."""

    def __init__(self, net: ActorCritic):
        self.net = net

    def observe(self, envs: Sequence[CircuitEnv]) -> tuple[np.ndarray, np.ndarray]:
        graph = envs[0].graph
        params = np.stack([e.state.params for e in envs])
        x = node_features(graph, params)
        spec = np.stack([e.spec_input(e.state.intermediate, e.state.goal) for e in envs])
        return x, spec

    def act(self, envs, rng, greedy):
        x, spec = self.observe(envs)
        out = self.net(x, spec)
        actions, logp = sample_action(out.log_probs, rng, greedy=greedy)
        return actions, np.atleast_1d(logp), out.value


class WalkToDesignAgent:
    """Steps every parameter toward a fixed target design, one increment at a time."""

    def __init__(self, targets: Callable[[CircuitEnv], np.ndarray]):
        self.targets = targets

    def act(self, envs, rng, greedy):
        actions = []
        for env in envs:
            diff = self.targets(env) - env.state.params
            half = env.netlist.steps / 2
            actions.append(np.where(diff > half, 2, np.where(diff < -half, 0, 1)))
        n = len(envs)
        return np.array(actions), np.zeros(n), np.zeros(n)


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

def rollout(agent: Agent, envs: Sequence[CircuitEnv], goals: Sequence, rng: np.random.Generator | None,
            greedy: bool = False, record_obs: bool = True) -> list[Trajectory]:
    """Run one episode per environment, all in lockstep, from each env's initial state."""
    trajs = []
    for env, goal in zip(envs, goals):
        env.reset(goal)
        trajs.append(Trajectory(goal=np.asarray(env.state.goal)))
    live = list(range(len(envs)))
    while live:
        batch_envs = [envs[i] for i in live]
        actions, logps, values = agent.act(batch_envs, rng, greedy)
        still = []
        for k, i in enumerate(live):
            env, tr = envs[i], trajs[i]
            if record_obs:
                tr.params.append(env.state.params.copy())
                tr.spec_inputs.append(env.spec_input(env.state.intermediate, env.state.goal))
            try:
                state, r, done = env.step(actions[k])
            except Exception as exc:  # evaluator failure aborts only this episode
                log.warning("episode aborted at step %d: %s", tr.length, exc)
                tr.error = str(exc)
                if record_obs:
                    tr.params.pop()
                    tr.spec_inputs.pop()
                continue
            tr.actions.append(np.asarray(actions[k]))
            tr.log_probs.append(float(logps[k]))
            tr.values.append(float(values[k]))
            tr.rewards.append(float(r))
            tr.specs.append(state.intermediate.copy())
            if done:
                tr.terminal = env.mode == "p2s" and r == env.bonus
            else:
                still.append(i)
        live = still
    return trajs


def collect_trajectories(agent: Agent, env_factory: Callable[[], CircuitEnv],
                         goal_sampler: Callable[[np.random.Generator], np.ndarray],
                         n_episodes: int, rng: np.random.Generator, greedy: bool = False) -> list[Trajectory]:
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    envs = [env_factory() for _ in range(n_episodes)]
    goals = [goal_sampler(rng) for _ in range(n_episodes)]
    return rollout(agent, envs, goals, rng, greedy=greedy)


# ---------------------------------------------------------------------------
# advantages and loss
# ---------------------------------------------------------------------------

def compute_gae(rewards, values, gamma: float, lam: float, bootstrap: float = 0.0):
    """Generalized advantage estimates and value targets for one episode."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    adv = np.zeros_like(rewards)
    next_value, running = bootstrap, 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Batch:
    params: np.ndarray
    spec_inputs: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self):
        return len(self.actions)

    def subset(self, idx) -> Batch:
        return Batch(self.params[idx], self.spec_inputs[idx], self.actions[idx],
                     self.old_log_probs[idx], self.advantages[idx], self.returns[idx])


def build_batch(trajs: Sequence[Trajectory], gamma: float, lam: float, normalize: bool = True) -> Batch:
    usable = [t for t in trajs if t.error is None and t.length > 0]
    if not usable:
        raise RuntimeError("no usable trajectories in batch")
    advs, rets = [], []
    for t in usable:
        a, r = compute_gae(t.rewards, t.values, gamma, lam)
        advs.append(a)
        rets.append(r)
    adv = np.concatenate(advs)
    if normalize and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return Batch(
        params=np.concatenate([np.stack(t.params) for t in usable]),
        spec_inputs=np.concatenate([np.stack(t.spec_inputs) for t in usable]),
        actions=np.concatenate([np.stack(t.actions) for t in usable]).astype(int),
        old_log_probs=np.concatenate([t.log_probs for t in usable]),
        advantages=adv,
        returns=np.concatenate(rets),
    )


def ppo_loss(net: ActorCritic, x, spec, actions, old_log_probs, advantages, returns,
             clip_eps: float, value_coeff: float, entropy_coeff: float) -> tuple[Tensor, dict]:
    """Clipped surrogate + value regression - entropy bonus, as a scalar tensor (to minimize)."""
    logp, value = net.forward(x, spec)
    b, m = actions.shape
    onehot = np.zeros((b, m, 3))
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    new_lp = T.tsum(T.mul(logp, onehot), axis=(1, 2))
    ratio = T.exp(T.sub(new_lp, old_log_probs))
    surr = T.min_elementwise(T.mul(ratio, advantages), T.mul(T.clip(ratio, 1 - clip_eps, 1 + clip_eps), advantages))
    policy_loss = T.mul_scalar(T.mean(surr), -1.0)
    entropy = T.mul_scalar(T.mean(T.tsum(T.mul(T.exp(logp), logp), axis=(1, 2))), -1.0)
    value_loss = T.mean(T.square(T.sub(T.reshape(value, (b,)), returns)))
    total = T.add(T.add(policy_loss, T.mul_scalar(entropy, -entropy_coeff)), T.mul_scalar(value_loss, value_coeff))
    r = ratio.data
    stats = {
        "policy_loss": float(policy_loss.data.sum()),
        "value_loss": float(value_loss.data.sum()),
        "entropy": float(entropy.data.sum()),
        "mean_ratio": float(r.mean()),
        "clip_frac": float(np.mean(np.abs(r - 1.0) > clip_eps)),
    }
    return total, stats


@dataclass
class UpdateStats:
    policy_loss: float
    value_loss: float
    entropy: float
    mean_ratio: float
    clip_frac: float


def ppo_update(net: ActorCritic, optimizer: Adam, batch: Batch, config: PPOConfig,
               rng: np.random.Generator, graph) -> UpdateStats:
    x_all = node_features(graph, batch.params)
    n = len(batch)
    acc: dict[str, list[float]] = {}
    for _ in range(config.epochs_per_batch):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            mb = batch.subset(idx)
            optimizer.zero_grad()
            with Tape() as tape:
                loss, stats = ppo_loss(net, x_all[idx], mb.spec_inputs, mb.actions, mb.old_log_probs,
                                       mb.advantages, mb.returns, config.clip_eps, config.value_coeff,
                                       config.entropy_coeff)
            if not np.isfinite(loss.data).all():
                raise FloatingPointError(f"non-finite PPO loss; stats={stats}")
            tape.backward(loss)
            if config.max_grad_norm > 0:
                _clip_grad_norm(optimizer.params, config.max_grad_norm)
            optimizer.step()
            for k, v in stats.items():
                acc.setdefault(k, []).append(v)
    return UpdateStats(**{k: float(np.mean(v)) for k, v in acc.items()})


def _clip_grad_norm(params, max_norm: float):
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)


# ---------------------------------------------------------------------------
# deployment
# ---------------------------------------------------------------------------

def out_of_range_specs(env: CircuitEnv, goal) -> list[str]:
    return [d.name for d, g in zip(env.spec_defs, goal) if not d.in_range(g)]


def _with_cap(env: CircuitEnv, max_steps: int) -> CircuitEnv:
    capped = copy.copy(env)
    capped.max_episode_len = max_steps
    return capped


def deploy(agent: Agent, env: CircuitEnv, goal, max_steps: int | None = None,
           greedy: bool = True, rng: np.random.Generator | None = None) -> EpisodeResult:
    """Roll the agent out on one goal; success means the terminal bonus was reached."""
    env = _with_cap(env, max_steps or env.max_episode_len)
    (tr,) = rollout(agent, [env], [goal], rng, greedy=greedy, record_obs=False)
    trace = [StepRecord(a, s, r) for a, s, r in zip(_param_trace(env, tr), tr.specs, tr.rewards)]
    return EpisodeResult(tr.episode_return, tr.length, tr.terminal, trace, np.asarray(goal, dtype=float))


def _param_trace(env: CircuitEnv, tr: Trajectory) -> list[np.ndarray]:
    from .env import apply_action
    params = env.initial_params()
    out = []
    for a in tr.actions:
        params = apply_action(params, a, env.netlist)
        out.append(params)
    return out


def deployment_accuracy(agent: Agent, env_factory: Callable[[], CircuitEnv], n_goals: int,
                        max_steps: int, rng: np.random.Generator, goals: Sequence | None = None,
                        greedy: bool = True) -> tuple[float, float]:
    """Fraction of sampled goals reached within ``max_steps`` and mean steps over the successes."""
    if n_goals < 1:
        raise ValueError("n_goals must be at least 1")
    envs = [_with_cap(env_factory(), max_steps) for _ in range(n_goals)]
    if goals is None:
        goals = [sample_goal(rng, envs[0].spec_defs) for _ in range(n_goals)]
    trajs = rollout(agent, envs, goals, rng, greedy=greedy, record_obs=False)
    wins = [t.length for t in trajs if t.terminal]
    return len(wins) / n_goals, (float(np.mean(wins)) if wins else float("nan"))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def named_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for one named purpose (env, policy-init, sampler, ...)."""
    import zlib
    return np.random.default_rng([seed, zlib.crc32(stream.encode())])


@dataclass
class TrainResult:
    net: ActorCritic
    metrics: list[dict]
    final_accuracy: float | None = None
    final_mean_steps: float | None = None
    final_fom: float | None = None
    timings: list[float] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str | Path, columns: Sequence[str], rows: Sequence[dict]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in columns])


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def train(net: ActorCritic, env_factory: Callable[[], CircuitEnv], config: PPOConfig,
          deploy_env_factory: Callable[[], CircuitEnv] | None = None,
          on_batch: Callable[[dict], None] | None = None,
          checkpoint: Callable[[ActorCritic], None] | None = None) -> TrainResult:
    """PPO loop in P2S mode: collect a batch, update, log; evaluates deployment accuracy periodically.

    ``deploy_env_factory`` lets training and deployment use different
    evaluators (coarse training, fine deployment).
    """
    deploy_env_factory = deploy_env_factory or env_factory
    env_rng = named_rng(config.seed, "env")
    upd_rng = named_rng(config.seed, "update")
    eval_rng = named_rng(config.seed, "eval")
    probe = env_factory()
    defs = probe.spec_defs
    agent = PolicyAgent(net)
    optimizer = Adam(net.parameters(), lr=config.lr)
    metrics: list[dict] = []
    timings: list[float] = []
    episodes = 0
    batch_no = 0
    t0 = time.perf_counter()
    try:
        while episodes < config.episodes_total:
            n = min(config.episodes_per_batch, config.episodes_total - episodes)
            trajs = collect_trajectories(agent, env_factory, lambda r: sample_goal(r, defs), n, env_rng)
            episodes += n
            batch = build_batch(trajs, config.gamma, config.gae_lambda)
            stats = ppo_update(net, optimizer, batch, config, upd_rng, probe.graph)
            if not (1 - 3 * config.clip_eps <= stats.mean_ratio <= 1 + 3 * config.clip_eps):
                log.warning("batch %d: mean ratio %.3f outside the expected band", batch_no, stats.mean_ratio)
            batch_no += 1
            row = {
                "batch": batch_no,
                "episodes_cum": episodes,
                "mean_ep_reward": float(np.mean([t.episode_return for t in trajs])),
                "mean_ep_len": float(np.mean([t.length for t in trajs])),
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "clip_frac": stats.clip_frac,
                "deploy_acc": None,
            }
            if config.eval_interval > 0 and batch_no % config.eval_interval == 0:
                row["deploy_acc"], _ = deployment_accuracy(agent, deploy_env_factory, config.eval_goals,
                                                           config.max_episode_len, eval_rng)
            metrics.append(row)
            timings.append(time.perf_counter() - t0)
            if on_batch:
                on_batch(row)
    finally:
        if checkpoint:
            checkpoint(net)
    result = TrainResult(net, metrics, timings=timings)
    if config.final_eval_goals > 0:
        final_rng = named_rng(config.seed, "final-eval")
        result.final_accuracy, result.final_mean_steps = deployment_accuracy(
            agent, deploy_env_factory, config.final_eval_goals, config.max_episode_len, final_rng)
    return result


def greedy_fom(agent: Agent, env: CircuitEnv) -> tuple[float, float]:
    """(final-step FoM, best FoM along the path) of one greedy rollout from the initial state."""
    (tr,) = rollout(agent, [env], [env.fom_refs], None, greedy=True, record_obs=False)
    foms = [fom_value(s) for s in tr.specs]
    return foms[-1], max(foms)


def policy_fom_search(agent: Agent, env: CircuitEnv, budget: int,
                      rng: np.random.Generator) -> tuple[float, list[float]]:
    """Best FoM the trained policy finds within ``budget`` evaluations of ``env``'s evaluator.

    The first rollout is greedy; the remaining budget goes to sampled rollouts
    from the initial state (the last one truncated to fit). Returns the best
    value and the best-so-far curve, one entry per evaluation.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    history: list[float] = []
    best = -math.inf
    greedy = True
    while len(history) < budget:
        run = _with_cap(env, min(env.max_episode_len, budget - len(history)))
        (tr,) = rollout(agent, [run], [env.fom_refs], rng, greedy=greedy, record_obs=False)
        greedy = False
        if not tr.specs:
            break
        for s in tr.specs:
            best = max(best, fom_value(s))
            history.append(best)
    return best, history


def train_fom(net: ActorCritic, env_factory: Callable[[], CircuitEnv], config: PPOConfig,
              on_batch: Callable[[dict], None] | None = None,
              checkpoint: Callable[[ActorCritic], None] | None = None) -> TrainResult:
    """PPO on the normalized FoM reward with fixed-length episodes; logs best FoM seen so far."""
    env_rng = named_rng(config.seed, "env")
    upd_rng = named_rng(config.seed, "update")
    probe = env_factory()
    if probe.mode != "fom":
        raise ValueError("train_fom needs an environment in 'fom' mode")
    agent = PolicyAgent(net)
    optimizer = Adam(net.parameters(), lr=config.lr)
    metrics: list[dict] = []
    timings: list[float] = []
    best = -math.inf
    episodes = batch_no = 0
    t0 = time.perf_counter()
    try:
        while episodes < config.episodes_total:
            n = min(config.episodes_per_batch, config.episodes_total - episodes)
            trajs = collect_trajectories(agent, env_factory, lambda r: probe.fom_refs, n, env_rng)
            episodes += n
            batch_best = max(fom_value(s) for t in trajs for s in t.specs)
            best = max(best, batch_best)
            stats = ppo_update(net, optimizer, build_batch(trajs, config.gamma, config.gae_lambda),
                               config, upd_rng, probe.graph)
            batch_no += 1
            row = {
                "batch": batch_no,
                "episodes_cum": episodes,
                "mean_ep_reward": float(np.mean([t.episode_return for t in trajs])),
                "policy_loss": stats.policy_loss,
                "value_loss": stats.value_loss,
                "clip_frac": stats.clip_frac,
                "batch_best_fom": batch_best,
                "best_fom": best,
                "policy_fom": None,
            }
            if config.eval_interval > 0 and batch_no % config.eval_interval == 0:
                row["policy_fom"] = greedy_fom(agent, env_factory())[0]
            metrics.append(row)
            timings.append(time.perf_counter() - t0)
            if on_batch:
                on_batch(row)
    finally:
        if checkpoint:
            checkpoint(net)
    final, _ = greedy_fom(agent, env_factory())
    return TrainResult(net, metrics, final_fom=final, timings=timings)

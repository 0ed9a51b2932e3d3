"""Search baselines on the same evaluators: a genetic algorithm and random search.

Both maximize a fitness over bounded parameter vectors. In P2S mode the
fitness is the clipped normalized-difference sum (0 once every target is met);
in FoM mode it is the figure of merit P + 3E.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .env import fom_value, raw_reward
from .netlist import Netlist

Fitness = Callable[[np.ndarray], float]


@dataclass(frozen=True)
class SearchSpace:
    lower: np.ndarray
    upper: np.ndarray
    steps: np.ndarray
    integer: np.ndarray

    @classmethod
    def from_netlist(cls, netlist: Netlist) -> SearchSpace:
        return cls(netlist.lower, netlist.upper, netlist.steps, netlist.integer_mask)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        x = rng.uniform(self.lower, self.upper)
        if self.integer.any():
            x[self.integer] = rng.integers(self.lower[self.integer].astype(int),
                                           self.upper[self.integer].astype(int) + 1)
        return x

    def clamp(self, x: np.ndarray) -> np.ndarray:
        x = np.clip(x, self.lower, self.upper)
        x[self.integer] = np.round(x[self.integer])
        return x


@dataclass
class GaConfig:
    population_size: int = 20
    generations: int = 100
    tournament_k: int = 3
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    mutation_step: int = 3
    seed: int = 0
    eval_budget_cap: int = 500

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be at least 2")
        if not (0 <= self.crossover_rate <= 1 and 0 <= self.mutation_rate <= 1):
            raise ValueError("crossover and mutation rates must lie in [0, 1]")
        if self.tournament_k < 1 or self.mutation_step < 1:
            raise ValueError("tournament_k and mutation_step must be at least 1")


@dataclass
class SearchResult:
    best_params: np.ndarray
    best_r: float
    evals_used: int
    history: list[float] = field(default_factory=list)
    evals_to_target: int | None = None
    per_eval: list[float] = field(default_factory=list)  # best-so-far after each evaluation

    @property
    def success(self) -> bool:
        return self.evals_to_target is not None


def p2s_fitness(evaluator, goal) -> Fitness:
    defs = evaluator.spec_defs
    return lambda x: float(raw_reward(evaluator(x), goal, defs))


def fom_fitness(evaluator) -> Fitness:
    return lambda x: fom_value(evaluator(x))


def genetic_search(fitness: Fitness, space: SearchSpace, config: GaConfig,
                   target: float | None = 0.0) -> SearchResult:
    """Tournament selection, uniform crossover and +/-k step mutation with one elite.

    Stops once the best fitness reaches ``target`` (``None`` disables early
    stopping), the evaluation budget runs out, or after ``generations``.
    """
    rng = np.random.default_rng(config.seed)
    evals = 0
    hit_at = None
    pop, fit = [], []
    best_x, best_f = None, -np.inf
    per_eval: list[float] = []

    def evaluate(x):
        nonlocal evals, best_x, best_f, hit_at
        f = fitness(x)
        evals += 1
        if f > best_f:
            best_x, best_f = x.copy(), f
        per_eval.append(best_f)
        if hit_at is None and target is not None and f >= target:
            hit_at = evals
        return f

    def out_of_budget():
        return evals >= config.eval_budget_cap or hit_at is not None

    while len(pop) < config.population_size and not out_of_budget():
        x = space.sample(rng)
        pop.append(x)
        fit.append(evaluate(x))
    history = [best_f]

    for _ in range(config.generations):
        if out_of_budget() or len(pop) < config.population_size:
            break
        fit_arr = np.array(fit)
        elite = int(np.argmax(fit_arr))
        new_pop, new_fit = [pop[elite]], [fit[elite]]
        while len(new_pop) < config.population_size and not out_of_budget():
            a = pop[_tournament(rng, fit_arr, config.tournament_k)]
            b = pop[_tournament(rng, fit_arr, config.tournament_k)]
            child = a.copy()
            changed = False
            if rng.random() < config.crossover_rate:
                take_b = rng.random(space.dim) < 0.5
                child[take_b] = b[take_b]
                changed = bool(np.any(a[take_b] != b[take_b]))
            mutate = rng.random(space.dim) < config.mutation_rate
            if mutate.any():
                k = rng.integers(1, config.mutation_step + 1, size=space.dim)
                sign = rng.choice([-1.0, 1.0], size=space.dim)
                child = space.clamp(np.where(mutate, child + sign * k * space.steps, child))
                changed = True
            new_pop.append(child)
            new_fit.append(evaluate(child) if changed else fit[_index_of(pop, a)])
        pop, fit = new_pop, new_fit
        history.append(best_f)

    return SearchResult(best_x, best_f, evals, history, hit_at, per_eval)


def _tournament(rng: np.random.Generator, fit: np.ndarray, k: int) -> int:
    idx = rng.integers(0, len(fit), size=k)
    return int(idx[np.argmax(fit[idx])])


def _index_of(pop, x) -> int:
    for i, p in enumerate(pop):
        if p is x:
            return i
    raise ValueError("parent not in population")


def random_search(fitness: Fitness, space: SearchSpace, budget: int, rng: np.random.Generator,
                  target: float | None = None) -> SearchResult:
    """Uniform sampling within the bounds, keeping the best sample."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    best_x, best_f = None, -np.inf
    history = []
    hit_at = None
    evals = 0
    for _ in range(budget):
        x = space.sample(rng)
        f = fitness(x)
        evals += 1
        if f > best_f:
            best_x, best_f = x, f
        history.append(best_f)
        if target is not None and f >= target:
            hit_at = evals
            break
    return SearchResult(best_x, best_f, evals, history, hit_at, list(history))

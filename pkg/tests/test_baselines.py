import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuit_sizer.baselines import (GaConfig, SearchSpace, fom_fitness, genetic_search, p2s_fitness,
                                     random_search)
from circuit_sizer.env import OPAMP_SPECS, OpAmpEvaluator, RFPAEvaluator, reward, sample_goal

TOY = SearchSpace(np.full(4, -2.0), np.full(4, 2.0), np.full(4, 0.05), np.zeros(4, dtype=bool))


def quadratic(target):
    return lambda x: -float(((x - target) ** 2).sum())


def test_ga_solves_convex_toy_for_every_seed():
    for seed in range(10):
        target = np.random.default_rng(100 + seed).uniform(-2, 2, 4)
        res = genetic_search(quadratic(target), TOY, GaConfig(seed=seed, generations=1000, eval_budget_cap=500),
                             target=-1e-2)
        assert res.best_r >= -1e-2 and res.evals_used <= 500


def test_ga_beats_random_search_on_average_at_equal_budget():
    ga, rs = [], []
    for seed in range(10):
        target = np.random.default_rng(200 + seed).uniform(-2, 2, 4)
        f = quadratic(target)
        ga.append(genetic_search(f, TOY, GaConfig(seed=seed, generations=1000, eval_budget_cap=300), None).best_r)
        rs.append(random_search(f, TOY, 300, np.random.default_rng(seed)).best_r)
    assert np.mean(ga) >= np.mean(rs)


def test_early_stop_when_initial_member_meets_goal():
    res = genetic_search(lambda x: 0.0, TOY, GaConfig(population_size=20))
    assert res.success and res.evals_used == 1 <= 20


def test_static_population_without_operators():
    cfg = GaConfig(seed=1, crossover_rate=0.0, mutation_rate=0.0, generations=20)
    res = genetic_search(quadratic(np.zeros(4)), TOY, cfg, target=None)
    assert len(set(res.history)) == 1
    assert res.evals_used == cfg.population_size


def test_ga_respects_budget_and_bounds(opamp):
    seen = []
    ev = OpAmpEvaluator(opamp)
    goal = np.array([500.0, 2.5e7, 60.0, 1e-4])

    def fitness(x):
        seen.append(x.copy())
        return p2s_fitness(ev, goal)(x)

    space = SearchSpace.from_netlist(opamp)
    res = genetic_search(fitness, space, GaConfig(seed=0, eval_budget_cap=137))
    assert res.evals_used == len(seen) <= 137
    xs = np.array(seen)
    assert np.all(xs >= opamp.lower) and np.all(xs <= opamp.upper)
    ints = opamp.integer_mask
    assert np.all(xs[:, ints] == np.round(xs[:, ints]))


def test_ga_history_monotone_and_reproducible(opamp):
    ev = OpAmpEvaluator(opamp)
    goal = sample_goal(np.random.default_rng(4), OPAMP_SPECS)
    space = SearchSpace.from_netlist(opamp)
    a = genetic_search(p2s_fitness(ev, goal), space, GaConfig(seed=5))
    b = genetic_search(p2s_fitness(ev, goal), space, GaConfig(seed=5))
    assert a.history == b.history and a.evals_used == b.evals_used
    np.testing.assert_array_equal(a.best_params, b.best_params)
    assert all(y >= x for x, y in zip(a.history, a.history[1:]))


def test_early_stop_implies_terminal_branch(opamp):
    ev = OpAmpEvaluator(opamp)
    space = SearchSpace.from_netlist(opamp)
    rng = np.random.default_rng(8)
    hits = 0
    for k in range(10):
        goal = sample_goal(rng, OPAMP_SPECS)
        res = genetic_search(p2s_fitness(ev, goal), space, GaConfig(seed=k))
        if res.best_r == 0:
            hits += 1
            assert res.success
            assert reward(ev(res.best_params), goal, OPAMP_SPECS) == 10.0
    assert hits > 0


def test_random_search_single_sample():
    rng = np.random.default_rng(0)
    res = random_search(quadratic(np.zeros(4)), TOY, 1, rng)
    x = TOY.sample(np.random.default_rng(0))
    np.testing.assert_array_equal(res.best_params, x)
    assert res.evals_used == 1
    with pytest.raises(ValueError):
        random_search(quadratic(np.zeros(4)), TOY, 0, rng)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(1, 60), st.integers(0, 1000))
def test_random_search_prefix_property(b1, b2, seed):
    lo, hi = sorted((b1, b2))
    f = quadratic(np.ones(4) * 0.3)
    small = random_search(f, TOY, lo, np.random.default_rng(seed))
    large = random_search(f, TOY, hi, np.random.default_rng(seed))
    assert large.best_r >= small.best_r
    assert large.history[:lo] == small.history


def test_fom_fitness_matches_evaluator(rfpa):
    ev = RFPAEvaluator(rfpa)
    x = rfpa.midpoint()
    p, e = ev(x)
    assert fom_fitness(ev)(x) == pytest.approx(p + 3 * e)


@pytest.mark.parametrize("kw", [dict(population_size=1), dict(crossover_rate=1.5), dict(mutation_rate=-0.1),
                                dict(tournament_k=0), dict(mutation_step=0)])
def test_ga_config_validation(kw):
    with pytest.raises(ValueError):
        GaConfig(**kw)


def test_per_eval_trace_matches_history():
    res = genetic_search(quadratic(np.ones(4)), TOY, GaConfig(seed=2, eval_budget_cap=150), target=None)
    assert len(res.per_eval) == res.evals_used
    assert res.per_eval[-1] == res.best_r == res.history[-1]
    assert all(b >= a for a, b in zip(res.per_eval, res.per_eval[1:]))

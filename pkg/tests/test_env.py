import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from circuit_sizer.env import (OPAMP_SPECS, RFPA_SPECS, Action, CircuitEnv, DomainError, OpAmpConstants,
                               OpAmpEvaluator, RFPAEvaluator, apply_action, feasibility_fraction, fom_reward,
                               fom_value, normalize_specs, phase_margin_deg, raw_reward, reward, reward_terms,
                               sample_goal, sample_params)
from circuit_sizer.netlist import parse_netlist

pos = st.floats(min_value=1e-6, max_value=1e6, allow_nan=False, allow_infinity=False)
spec_vec = st.lists(pos, min_size=4, max_size=4)

MET = np.array([400.0, 2e7, 58.0, 1e-3])


# --- reward ----------------------------------------------------------------

def test_all_targets_met_returns_bonus():
    assert reward(MET, MET, OPAMP_SPECS) == 10.0
    better = MET * np.array([1.1, 1.1, 1.1, 0.9])
    assert reward(better, MET, OPAMP_SPECS) == 10.0


def test_gain_shortfall_example():
    goal = np.array([350.0, 1e7, 55.0, 2e-3])
    g = np.array([300.0, 2e7, 58.0, 1e-3])
    assert reward(g, goal, OPAMP_SPECS) == pytest.approx(-1 / 13, abs=1e-12)


def test_gain_surplus_clipped():
    goal = np.array([350.0, 1e7, 55.0, 2e-3])
    terms = reward_terms(np.array([400.0, 1e7, 55.0, 2e-3]), goal, OPAMP_SPECS)
    assert terms[0] == 0.0


def test_minimize_direction_penalizes_excess_power():
    goal = np.array([350.0, 1e7, 55.0, 1e-3])
    g = np.array([350.0, 1e7, 55.0, 3e-3])
    assert raw_reward(g, goal, OPAMP_SPECS) == pytest.approx((1e-3 - 3e-3) / (4e-3))


def test_reward_rejects_nonpositive():
    with pytest.raises(DomainError):
        reward(np.array([0.0, 1, 1, 1]), MET, OPAMP_SPECS)
    with pytest.raises(DomainError):
        reward(MET, np.array([1.0, -1, 1, 1]), OPAMP_SPECS)


@settings(max_examples=300, deadline=None)
@given(spec_vec, spec_vec)
def test_terms_in_half_open_interval(g, gs):
    terms = reward_terms(g, gs, OPAMP_SPECS)
    assert np.all(terms <= 0) and np.all(terms > -1)
    r = reward(g, gs, OPAMP_SPECS)
    assert r == 10.0 or -4 < r < 0


@settings(max_examples=200, deadline=None)
@given(spec_vec)
def test_exact_goal_triggers_bonus(g):
    assert reward(g, g, OPAMP_SPECS) == 10.0


@settings(max_examples=300, deadline=None)
@given(pos, pos, pos, st.integers(0, 3))
def test_direction_monotonicity(a, b, target, k):
    lo, hi = min(a, b), max(a, b)
    base = MET.copy()
    goal = MET.copy()
    goal[k] = target
    g_lo, g_hi = base.copy(), base.copy()
    g_lo[k], g_hi[k] = lo, hi
    t_lo = reward_terms(g_lo, goal, OPAMP_SPECS)[k]
    t_hi = reward_terms(g_hi, goal, OPAMP_SPECS)[k]
    if OPAMP_SPECS[k].direction.value == "max":
        assert t_hi >= t_lo
    else:
        assert t_hi <= t_lo


# --- FoM -------------------------------------------------------------------

def test_fom_examples():
    assert fom_reward([2.0, 0.5], [2.0, 0.5]) == 0.0
    assert fom_reward([3.0, 0.5], [2.0, 0.5]) == pytest.approx(0.2)
    assert fom_value([2.5, 0.25]) == pytest.approx(3.25)
    with pytest.raises(DomainError):
        fom_reward([0.0, 0.5], [2.0, 0.5])


# --- actions ---------------------------------------------------------------

STEP1 = parse_netlist("""
PORT a b
DEVICE M1 NMOS a b PARAM W=50 BOUNDS 1 100 STEP 1 PARAM F=4 BOUNDS 1 8 STEP 1
""")


def test_apply_action_examples():
    x = np.array([50.0, 4.0])
    np.testing.assert_array_equal(apply_action(x, [Action.INC, Action.KEEP], STEP1), [51.0, 4.0])
    np.testing.assert_array_equal(apply_action(np.array([100.0, 8.0]), [2, 2], STEP1), [100.0, 8.0])
    np.testing.assert_array_equal(apply_action(np.array([1.0, 1.0]), [0, 0], STEP1), [1.0, 1.0])
    np.testing.assert_array_equal(apply_action(x, [1, 1], STEP1), x)
    with pytest.raises(ValueError):
        apply_action(x, [1, 1, 1], STEP1)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=15, max_size=15), st.integers(0, 2**31))
def test_apply_action_stays_in_bounds(action, seed):
    from circuit_sizer.config import resolve_netlist
    from circuit_sizer.netlist import load_netlist
    net = _opamp_cache.setdefault("n", load_netlist(resolve_netlist("opamp")))
    x = sample_params(np.random.default_rng(seed), net, 1)[0]
    y = apply_action(x, np.array(action), net)
    assert np.all(y >= net.lower) and np.all(y <= net.upper)
    ints = net.integer_mask
    assert np.all(y[ints] == np.round(y[ints]))


_opamp_cache: dict = {}


# --- goals -----------------------------------------------------------------

def test_sample_goal_ranges_and_determinism():
    rng = np.random.default_rng(5)
    goals = np.array([sample_goal(rng, OPAMP_SPECS) for _ in range(500)])
    for k, d in enumerate(OPAMP_SPECS):
        assert goals[:, k].min() >= d.sample_lo and goals[:, k].max() <= d.sample_hi
    pa = np.array([sample_goal(rng, RFPA_SPECS) for _ in range(200)])
    assert pa[:, 0].min() >= 2 and pa[:, 0].max() <= 3
    assert pa[:, 1].min() >= 0.5 and pa[:, 1].max() <= 0.6
    a = sample_goal(np.random.default_rng(9), OPAMP_SPECS)
    b = sample_goal(np.random.default_rng(9), OPAMP_SPECS)
    np.testing.assert_array_equal(a, b)


def test_normalize_specs_clipped():
    z = normalize_specs(np.array([1e9, 1e6, 57.5, 1e-3]), OPAMP_SPECS)
    assert z[0] == 5.0 and z[1] == 0.0 and z[2] == pytest.approx(0.5) and z[3] == pytest.approx(0.5)


# --- op-amp evaluator ------------------------------------------------------

def _opamp_vec(net, **values):
    x = net.midpoint()
    for name, v in values.items():
        x[net.index_of(name.replace("_", "."))] = v
    return x


def test_opamp_bandwidth_hand_example(opamp):
    # W1=W5=50, F1=F5=2: S=100, I1 = K_I * 100 / 2; pick K_n so gm1 = 2*pi*1e-5
    k_i = 0.5e-6
    i1 = k_i * 100 / 2
    k_n = (2 * math.pi * 1e-5) ** 2 / (2 * 100 * i1)
    ev = OpAmpEvaluator(opamp, OpAmpConstants(k_i=k_i, k_n=k_n))
    x = _opamp_vec(opamp, M1_W=50, M1_F=2, M5_W=50, M5_F=2, CC_C=1.0)
    assert ev(x)[1] == pytest.approx(1e7, rel=1e-12)


def test_phase_margin_zero_when_bandwidth_equals_pole_and_zero():
    assert phase_margin_deg(3.0, 3.0, 3.0) == pytest.approx(0.0, abs=1e-12)


def test_power_linear_in_tail_size(opamp):
    ev = OpAmpEvaluator(opamp)
    c = ev.constants
    a = _opamp_vec(opamp, M5_W=20, M5_F=4)
    b = _opamp_vec(opamp, M5_W=40, M5_F=8)
    i6 = c.k_i * a[opamp.index_of("M7.W")] * a[opamp.index_of("M7.F")]
    tail_a = ev(a)[3] / c.vdd - i6
    tail_b = ev(b)[3] / c.vdd - i6
    assert tail_b == pytest.approx(4 * tail_a, rel=1e-12)


def test_opamp_outputs_positive_finite_and_deterministic(opamp, rng):
    ev = OpAmpEvaluator(opamp)
    xs = sample_params(rng, opamp, 2000)
    out = ev(xs)
    assert out.shape == (2000, 4)
    assert np.all(np.isfinite(out)) and np.all(out > 0)
    np.testing.assert_array_equal(out, ev(xs))


def test_opamp_matches_direct_formulas(opamp, rng):
    ev = OpAmpEvaluator(opamp)
    c = ev.constants
    x = sample_params(rng, opamp, 1)[0]
    s = {m: x[opamp.index_of(f"{m}.W")] * x[opamp.index_of(f"{m}.F")] for m in ("M1", "M5", "M6", "M7")}
    cc = x[opamp.index_of("CC.C")] * 1e-12
    i_tail, i6 = c.k_i * s["M5"], c.k_i * s["M7"]
    gm1 = math.sqrt(2 * c.k_n * s["M1"] * i_tail / 2)
    gm6 = math.sqrt(2 * c.k_n * s["M6"] * i6)
    lam = c.lambda_n + c.lambda_p
    g = gm1 / (lam * i_tail / 2) * gm6 / (lam * i6)
    b = gm1 / (2 * math.pi * cc)
    pm = 90 - math.degrees(math.atan(b / (gm6 / (2 * math.pi * c.c_load)))) \
        - math.degrees(math.atan(b / (gm6 / (2 * math.pi * cc))))
    expected = [g, b, max(pm, c.pm_floor), c.vdd * (i_tail + i6)]
    np.testing.assert_allclose(ev(x), expected, rtol=1e-12)


def test_opamp_rejects_out_of_bounds(opamp):
    x = opamp.midpoint()
    x[0] = 1000
    with pytest.raises(DomainError):
        OpAmpEvaluator(opamp)(x)


def test_opamp_feasibility_calibration(opamp):
    frac = feasibility_fraction(OpAmpEvaluator(opamp), np.random.default_rng(0), 10_000, 1_000)
    assert frac >= 0.2


# --- RF PA evaluator -------------------------------------------------------

def test_coarse_fine_ratio_bounded(rfpa, rng):
    fine, coarse = RFPAEvaluator(rfpa, "fine"), RFPAEvaluator(rfpa, "coarse")
    xs = sample_params(rng, rfpa, 5000)
    ratio = coarse(xs) / fine(xs)
    assert np.all(ratio >= 0.9 - 1e-12) and np.all(ratio <= 1.1 + 1e-12)
    # the perturbation is not trivially zero
    assert np.std(ratio) > 0.01
    np.testing.assert_array_equal(coarse(xs), coarse(xs))


def test_rfpa_peak_efficiency_at_design_ratio(rfpa):
    ev = RFPAEvaluator(rfpa)
    x = rfpa.midpoint()
    x[rfpa.index_of("M1.W")], x[rfpa.index_of("M1.F")] = 100, 16
    for d in ("D1", "D2", "D3", "D4", "D5"):
        x[rfpa.index_of(f"{d}.W")], x[rfpa.index_of(f"{d}.F")] = 16, 8
    x[rfpa.index_of("DF.W")], x[rfpa.index_of("DF.F")] = 20, 8
    assert ev(x)[1] == pytest.approx(ev.constants.e_max, rel=1e-12)


def test_rfpa_power_vanishes_with_output_size(rfpa):
    ev = RFPAEvaluator(rfpa)
    x = rfpa.midpoint()[None].repeat(2, axis=0)
    # the analytic form: P / (1 - exp(-a S_o)) is finite, so P -> 0 as S_o -> 0
    c = ev.constants
    s_o = x[:, rfpa.index_of("M1.W")] * x[:, rfpa.index_of("M1.F")]
    p = ev(x)[:, 0]
    assert np.all(p <= c.p_max * (1 - np.exp(-c.a * s_o)) + 1e-12)
    assert c.p_max * (1 - math.exp(-c.a * 1e-12)) < 1e-11


def test_rfpa_feasibility(rfpa):
    assert feasibility_fraction(RFPAEvaluator(rfpa), np.random.default_rng(0), 10_000, 1_000) >= 0.2


def test_transfer_reward_within_propagated_interval(rfpa, rng):
    fine, coarse = RFPAEvaluator(rfpa, "fine"), RFPAEvaluator(rfpa, "coarse")
    xs = sample_params(rng, rfpa, 100)
    goal = sample_goal(rng, RFPA_SPECS)
    for x in xs:
        gf = fine(x)
        lo = reward_terms(0.9 * gf, goal, RFPA_SPECS).sum()
        hi = reward_terms(1.1 * gf, goal, RFPA_SPECS).sum()
        rc = raw_reward(coarse(x), goal, RFPA_SPECS)
        assert lo - 1e-12 <= rc <= hi + 1e-12


# --- environment -----------------------------------------------------------

def test_env_reaches_goal_and_stops(opamp):
    env = CircuitEnv(opamp, OpAmpEvaluator(opamp))
    env.reset(goal=np.array([1.0, 1.0, 0.01, 1.0]))  # trivially met by any design
    state, r, done = env.step(np.ones(15, dtype=int))
    assert r == 10.0 and done and state.step_count == 1


def test_env_truncates_and_keep_preserves_reward(opamp):
    env = CircuitEnv(opamp, OpAmpEvaluator(opamp), max_episode_len=3)
    env.reset(goal=np.array([1e9, 1e12, 89.0, 1e-9]))  # unreachable
    rewards = []
    for k in range(3):
        state, r, done = env.step(np.ones(15, dtype=int))
        rewards.append(r)
        assert done == (k == 2)
    assert rewards[0] == rewards[1] == rewards[2] < 0
    np.testing.assert_array_equal(state.intermediate, env.evaluator(state.params))
    with pytest.raises(RuntimeError):
        env.step(np.ones(15, dtype=int))


def test_env_requires_reset(opamp):
    with pytest.raises(RuntimeError):
        CircuitEnv(opamp, OpAmpEvaluator(opamp)).step(np.ones(15, dtype=int))


def test_fom_mode_has_no_bonus(rfpa):
    env = CircuitEnv(rfpa, RFPAEvaluator(rfpa), max_episode_len=30, mode="fom")
    env.reset()
    total = 0.0
    for k in range(30):
        s, r, done = env.step(np.full(14, 2))
        total += r
        assert r == pytest.approx(fom_reward(s.intermediate, (2.0, 0.5)))
        assert done == (k == 29)

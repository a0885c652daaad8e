import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from switchqvi.errors import CoupledGeneratorUnsupported, MaxSwitchesExceeded
from switchqvi.grid import build_grid, discretize_generator
from switchqvi.model import DiffusionSpec, SwitchingProblem
from switchqvi.qvi import field_from_values, picard_iterate
from switchqvi.strategy import (STAY, MCSettings, SwitchingPolicy, evaluate_policies, evaluate_strategy,
                                extract_policy, feynman_kac_check, greedy_policy, never_switch_policy,
                                tail_cap, write_switch_log)

FROZEN = DiffusionSpec.constant(0.0, 0.0)
GRID = build_grid([[-1, 1]], 16)
ZERO_OP = discretize_generator(FROZEN, GRID)
DET = MCSettings(dt=0.01, T=20.0, n_paths=4, seed=0)


def constants(g):
    return SwitchingProblem.from_strings(["1", "3"], [[0, g], [g, 0]], 1.0)


def field(values, problem, op=ZERO_OP):
    V = np.array([[v] * op.n_nodes for v in values], dtype=float)
    return field_from_values(V, problem, op)


def fixed_policy(rows):
    return SwitchingPolicy(np.array([[r] * GRID.n_nodes for r in rows]), GRID, 0.0, "", "fixed")


# --- extraction -----------------------------------------------------------------
def test_extract_binding_case():
    p = constants(1)
    pol = extract_policy(field([2, 3], p), p, GRID)
    assert np.all(pol.decision[0] == 1) and np.all(pol.decision[1] == STAY)
    assert pol.labels()[0, 0] == "switch_to(2)" and pol.labels()[1, 0] == "stay"


def test_extract_slack_case():
    p = constants(5)
    assert np.all(extract_policy(field([1, 3], p), p, GRID).decision == STAY)


def test_extract_tie_break_lowest_index():
    p = SwitchingProblem.from_strings(["1", "1", "1"], [[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]], 1.0)
    pol = extract_policy(field([0.5, 1, 1], p), p, GRID)
    assert np.all(pol.decision[0] == 1)


def test_policy_rejects_self_switch():
    with pytest.raises(ValueError):
        SwitchingPolicy(np.array([[0, STAY], [STAY, STAY]]), GRID, 0.0, "")
    with pytest.raises(ValueError):
        SwitchingPolicy(np.array([[2, STAY], [STAY, STAY]]), GRID, 0.0, "")


def test_greedy_and_never():
    p = constants(1)
    f = field([2, 3], p)
    assert np.all(greedy_policy(f, GRID).decision[0] == 1)
    assert np.all(never_switch_policy(GRID, 2).decision == STAY)


OU = DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5)
OU_GRID = build_grid([[-4, 4]], 160)
OU_OP = discretize_generator(OU, OU_GRID)
OU_PROBLEM = SwitchingProblem.from_strings(["1 + x1", "1 - x1"], [[0, 0.2], [0.2, 0]], 0.5)
OU_FIELD, _ = picard_iterate(OU_PROBLEM, OU_OP)


@given(c=st.floats(-50, 50))
def test_extraction_shift_invariant(c):
    a = extract_policy(OU_FIELD, OU_PROBLEM, OU_GRID)
    b = extract_policy(OU_FIELD.with_values(OU_FIELD.values + c), OU_PROBLEM, OU_GRID)
    assert np.array_equal(a.decision, b.decision)


def test_extracted_policy_has_both_regions():
    d = extract_policy(OU_FIELD, OU_PROBLEM, OU_GRID).decision
    x = OU_GRID.nodes[:, 0]
    assert np.all(d[0][x < -1] == 1) and np.all(d[0][x > 1] == STAY)
    assert np.all(d[1][x > 1] == 0) and np.all(d[1][x < -1] == STAY)


# --- evaluation -----------------------------------------------------------------
def test_stay_in_mode_two():
    est = evaluate_strategy(fixed_policy([STAY, STAY]), constants(1), FROZEN, 0.3, 1, DET)
    assert abs(est.estimate - 3 * (1 - math.exp(-20))) <= 1e-4
    assert est.std_error == 0.0 and est.T == pytest.approx(20.0)


def test_switch_then_stay():
    est = evaluate_strategy(fixed_policy([1, STAY]), constants(1), FROZEN, 0.0, 0, DET)
    assert abs(est.estimate - (3 * (1 - math.exp(-20)) - 1)) <= 1e-4
    assert est.mean_switches == 1.0


def test_never_switch_from_mode_one():
    est = evaluate_strategy(never_switch_policy(GRID, 2), constants(1), FROZEN, 0.0, 0, DET)
    assert abs(est.estimate - 1.0) <= 1e-4


def test_tail_bound_recorded():
    p = constants(1)
    est = evaluate_strategy(never_switch_policy(GRID, 2), p, FROZEN, 0.0, 0, DET)
    assert est.tail_bound == pytest.approx(math.exp(-20) * tail_cap(p, np.array([0.0])))
    assert est.tail_bound >= 3 - 3 * (1 - math.exp(-20))


def test_coupled_generators_refused():
    p = SwitchingProblem.from_strings(["1 + 0.1 * y1", "3"], [[0, 1], [1, 0]], 1.0)
    with pytest.raises(CoupledGeneratorUnsupported):
        evaluate_strategy(never_switch_policy(GRID, 2), p, FROZEN, 0.0, 0, DET)


def test_ping_pong_hits_switch_cap():
    mc = MCSettings(dt=0.1, T=2.0, n_paths=3, seed=0, max_switches=5)
    with pytest.raises(MaxSwitchesExceeded):
        evaluate_strategy(fixed_policy([1, 0]), constants(1), FROZEN, 0.0, 0, mc)


def test_chained_switches_within_a_step():
    p = SwitchingProblem.from_strings(["0", "0", "5"], [[0, 1, 3], [1, 0, 1], [1, 1, 0]], 1.0)
    est = evaluate_strategy(fixed_policy([1, 2, STAY]), p, FROZEN, 0.0, 0, DET)
    # 0 -> 1 -> 2 at t = 0, costs 1 + 1
    assert est.mean_switches == 2.0
    assert abs(est.estimate - (5 - 2)) <= 1e-4


def test_evaluation_is_deterministic():
    mc = MCSettings(dt=0.05, T=5.0, n_paths=500, seed=3)
    pol = extract_policy(OU_FIELD, OU_PROBLEM, OU_GRID)
    a = evaluate_strategy(pol, OU_PROBLEM, OU, 0.0, 0, mc)
    b = evaluate_strategy(pol, OU_PROBLEM, OU, 0.0, 0, mc)
    assert (a.estimate, a.std_error) == (b.estimate, b.std_error)
    c = evaluate_strategy(pol, OU_PROBLEM, OU, 0.0, 0, MCSettings(dt=0.05, T=5.0, n_paths=500, seed=4))
    assert c.estimate != a.estimate


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("x0, mode", [(0.0, 0), (0.7, 1), (-1.2, 0)])
def test_extracted_policy_dominates(seed, x0, mode):
    mc = MCSettings(dt=0.05, T=12.0, n_paths=2000, seed=seed)
    pols = [extract_policy(OU_FIELD, OU_PROBLEM, OU_GRID), never_switch_policy(OU_GRID, 2),
            greedy_policy(OU_FIELD, OU_GRID)]
    star, *subs = evaluate_policies(pols, OU_PROBLEM, OU, x0, mode, mc)
    for s in subs:
        assert s.estimate <= star.estimate + 2 * math.hypot(star.std_error, s.std_error)
    assert star.mean_switches < 100


# --- Feynman-Kac ------------------------------------------------------------------
def test_fk_constants_exact():
    p = constants(1)
    rep = feynman_kac_check(field([2, 3], p), p, FROZEN, GRID, [([0.0], 0), ([0.5], 1)], DET)
    assert rep["passed"]
    e = rep["entries"][0]
    assert e["v"] == 2.0 and abs(e["J_hat"] - 2.0) <= 1e-4 and e["mode"] == 1
    never = next(s for s in e["J_sub"] if s["policy"] == "never_switch")
    assert abs(never["J"] - 1.0) <= 1e-4 and never["ok"]


def test_fk_single_mode():
    p = SwitchingProblem.from_strings(["2"], [[0]], 0.5)
    f, _ = picard_iterate(p, ZERO_OP)
    rep = feynman_kac_check(f, p, FROZEN, GRID, [([0.0], 0)], MCSettings(dt=0.01, T=40.0, n_paths=2))
    assert rep["passed"]
    assert abs(rep["entries"][0]["J_hat"] - 4.0) <= 1e-4


def test_fk_detects_wrong_field():
    p = constants(1)
    rep = feynman_kac_check(field([2.5, 3], p), p, FROZEN, GRID, [([0.0], 0)], DET)
    assert not rep["passed"]


def test_switch_log_csv(tmp_path):
    p = constants(1)
    mc = MCSettings(dt=0.01, T=20.0, n_paths=4, seed=0, log_paths=2)
    rep = feynman_kac_check(field([2, 3], p), p, FROZEN, GRID, [([0.0], 0)], mc)
    out = tmp_path / "log.csv"
    write_switch_log(rep["entries"], out)
    lines = out.read_text().splitlines()
    assert lines[0] == "path,t,from,to,cost"
    assert lines[1:] == ["0,0.0,1,2,1.0", "1,0.0,1,2,1.0"]

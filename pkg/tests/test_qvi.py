import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import single_obstacle_desk
from switchqvi.grid import build_grid, discretize_generator
from switchqvi.model import DiffusionSpec, SwitchingProblem
from switchqvi.qvi import (SolverConfig, field_from_values, obstacles, picard_iterate, residual,
                           solve_envelopes, solve_single_obstacle)

ZERO_OP = discretize_generator(DiffusionSpec.constant(0.0, 0.0), build_grid([[-1, 1]], 16))
PENALIZED = SolverConfig(inner_method="penalized")


def scalar_fixed_point(f, g, r):
    """Brute-force v_i = max(f_i / r, max_j v_j - g_ij) for the zero operator."""
    m = len(f)
    v = [fi / r for fi in f]
    for _ in range(1000):
        new = [max(f[i] / r, max(v[j] - g[i][j] for j in range(m) if j != i)) for i in range(m)]
        if new == v:
            break
        v = new
    return v


def constants(g, f=("1", "3"), r=1.0):
    return SwitchingProblem.from_strings(list(f), [[0, g], [g, 0]], r)


# --- envelopes -------------------------------------------------------------
def test_envelopes_constants():
    up, lo = solve_envelopes(constants(5), ZERO_OP)
    assert np.allclose(up, 3.0, atol=1e-12) and np.allclose(lo, 1.0, atol=1e-12)


def test_envelopes_single_mode():
    p = SwitchingProblem.from_strings(["2 + x1"], [[0]], 0.5)
    op = discretize_generator(DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.3), build_grid([[-3, 3]], 60))
    up, lo = solve_envelopes(p, op)
    assert np.array_equal(up, lo)


def test_envelope_geometric_closed_form():
    p = SwitchingProblem.from_strings(["x1"], [[0]], 0.1)
    g = build_grid([[0.5, 2.0]], 256, "dirichlet_envelope")
    op = discretize_generator(DiffusionSpec.geometric(0.05, 0.0), g)
    up, _ = solve_envelopes(p, op)
    x = g.nodes[:, 0]
    mid = (x >= 0.875) & (x <= 1.625)
    assert np.max(np.abs(up[mid] - 20 * x[mid]) / (20 * x[mid])) <= 0.01


# --- single obstacle ---------------------------------------------------------
@pytest.mark.parametrize("config", [SolverConfig(), PENALIZED], ids=["howard", "penalized"])
@pytest.mark.parametrize("phi, f, expected", [(0.0, "-1", 0.0), (0.0, "1", 1.0), (3.0, "0", 3.0)])
def test_single_obstacle_zero_operator(config, phi, f, expected):
    v = solve_single_obstacle(np.full(ZERO_OP.n_nodes, phi), f, ZERO_OP, 1.0, config)
    # penalization leaves an O(1/n_pen) undershoot where the obstacle binds
    assert np.allclose(v, expected, atol=1e-12 if config is not PENALIZED else (1 + phi) / 1e4)


def test_single_obstacle_rejects_bad_obstacle():
    with pytest.raises(ValueError):
        solve_single_obstacle(np.full(ZERO_OP.n_nodes, np.nan), "1", ZERO_OP, 1.0)


def test_penalty_agreement_and_rate():
    phi, f, op, r = single_obstacle_desk()
    vh = solve_single_obstacle(phi, f, op, r)
    res = solve_single_obstacle(phi, f, op, r, PENALIZED, full=True)
    assert res.penalties[-1] >= 1e4
    assert np.max(np.abs(res.values - vh)) <= 1e-4
    neg = res.negative_parts
    assert all(b <= a for a, b in zip(neg, neg[1:]))
    slope = np.polyfit(np.log(res.penalties), np.log(neg), 1)[0]
    assert 0.8 <= -slope <= 1.2


def test_howard_solution_is_complementary():
    phi, f, op, r = single_obstacle_desk()
    v = solve_single_obstacle(phi, f, op, r)
    eq = r * v - op.apply(v) - f(op.grid.nodes, v[:, None], np.zeros((op.n_nodes, 1)))
    assert np.all(v >= phi - 1e-12)
    assert np.max(np.abs(np.minimum(v - phi, eq))[op.interior]) <= 1e-8


# --- Picard ------------------------------------------------------------------
@pytest.mark.parametrize("g", [5.0, 1.0, 0.5, 2.5])
def test_constants_against_scalar_fixed_point(g):
    field, trace = picard_iterate(constants(g), ZERO_OP)
    v = scalar_fixed_point([1.0, 3.0], [[0, g], [g, 0]], 1.0)
    assert np.max(np.abs(field.values - np.array(v)[:, None])) <= 1e-8
    assert trace.min_increment >= -10 * SolverConfig().eps_in


def test_known_constants_values():
    assert scalar_fixed_point([1, 3], [[0, 5], [5, 0]], 1) == [1, 3]
    assert scalar_fixed_point([1, 3], [[0, 1], [1, 0]], 1) == [2, 3]


@given(f1=st.floats(0, 5), f2=st.floats(0, 5), f3=st.floats(0, 5), g=st.floats(0.1, 4), r=st.floats(0.2, 2))
def test_three_mode_zero_operator(f1, f2, f3, g, r):
    costs = [[0, g, 2 * g], [g, 0, g], [2 * g, g, 0]]
    p = SwitchingProblem.from_strings([repr(f1), repr(f2), repr(f3)], costs, r)
    field, trace = picard_iterate(p, ZERO_OP)
    v = scalar_fixed_point([f1, f2, f3], costs, r)
    assert np.max(np.abs(field.values - np.array(v)[:, None])) <= 1e-8 * (1 + max(v))
    assert trace.min_increment >= -10 * SolverConfig().eps_in


def test_shift_invariance_zero_operator():
    base, _ = picard_iterate(constants(1), ZERO_OP)
    up, _ = picard_iterate(constants(1, ("2", "4")), ZERO_OP)
    assert np.max(np.abs(up.values - base.values - 1.0)) <= 1e-8


def _ou_problem(shift=0.0):
    f = [f"{1 + shift!r} + x1", f"{1 + shift!r} - x1"]
    return SwitchingProblem.from_strings(f, [[0, 0.2], [0.2, 0]], 0.5)


OU_OP = discretize_generator(DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5), build_grid([[-5, 5]], 200))


def test_ou_invariants():
    p = _ou_problem()
    cfg = SolverConfig()
    up, lo = solve_envelopes(p, OU_OP, cfg)
    field, trace = picard_iterate(p, OU_OP, cfg, envelopes=(up, lo))
    V = field.values
    assert trace.min_increment >= -10 * cfg.eps_in
    assert np.all(V >= obstacles(V, p.cost_matrix(OU_OP.grid.nodes)) - 1e-8 * (1 + np.abs(V)))
    assert np.all(V >= lo - 10 * cfg.eps_out) and np.all(V <= up + 10 * cfg.eps_out)
    assert residual(field, p, OU_OP)["sup"] <= 10 * cfg.eps_out


def test_ou_shift_keeps_binding_sets():
    cfg = SolverConfig()
    a, _ = picard_iterate(_ou_problem(), OU_OP, cfg)
    b, _ = picard_iterate(_ou_problem(1.0), OU_OP, cfg)
    assert np.all(b.values >= a.values)
    costs = _ou_problem().cost_matrix(OU_OP.grid.nodes)

    def binding(V):
        return V - obstacles(V, costs) <= 1e-7
    assert np.array_equal(binding(a.values), binding(b.values))


def test_trace_entries():
    _, trace = picard_iterate(_ou_problem(), OU_OP)
    assert len(trace) >= 1
    e = trace.to_list()[0]
    assert len(e["min_increment"]) == 2


def test_penalized_picard_matches_howard():
    a, _ = picard_iterate(_ou_problem(), OU_OP)
    b, _ = picard_iterate(_ou_problem(), OU_OP, PENALIZED)
    assert np.max(np.abs(a.values - b.values)) <= 1e-3


# --- residual ----------------------------------------------------------------
def test_residual_of_hand_solution():
    p = constants(1)
    f = field_from_values(np.array([[2.0] * ZERO_OP.n_nodes, [3.0] * ZERO_OP.n_nodes]), p, ZERO_OP)
    assert residual(f, p, ZERO_OP)["sup"] <= 1e-8


def test_residual_of_zero_field():
    p = constants(1)
    f = field_from_values(np.zeros((2, ZERO_OP.n_nodes)), p, ZERO_OP)
    assert residual(f, p, ZERO_OP)["sup"] >= 1.0


def test_residual_flags_obstacle_violation():
    p = constants(1)
    V = np.array([[2.0] * ZERO_OP.n_nodes, [3.0] * ZERO_OP.n_nodes])
    V[0, 7] = 1.5
    rep = residual(field_from_values(V, p, ZERO_OP), p, ZERO_OP)
    w = rep["worst"]
    assert (w["mode"], w["node"]) == (1, 7)
    assert w["value"] < 0 and w["binding"] == "obstacle"


def test_residual_shape_mismatch():
    p = constants(1)
    f = field_from_values(np.zeros((2, 5)), p, discretize_generator(DiffusionSpec.constant(0.0, 0.0),
                                                                 build_grid([[0, 1]], 4)))
    with pytest.raises(ValueError):
        residual(f, p, ZERO_OP)

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from switchqvi.errors import (ConfigError, DiscountTooSmall, ExpressionError, MonotonicityViolation, NegativeCost,
                              NonFreeLoopViolation, TooManyModes)
from switchqvi.model import (DiffusionSpec, SwitchingProblem, ValidationReport, Verdict, estimate_growth_exponent,
                             probe_monotonicity, sample_cloud, simple_cycles, validate_discount,
                             validate_problem, validate_switching_costs)

PTS = np.linspace(-2, 2, 9)[:, None]


def costs_problem(costs, gens=None):
    m = len(costs)
    return SwitchingProblem.from_strings(gens or ["1"] * m, costs, 1.0)


# --- problems ------------------------------------------------------------
def test_coupling_inferred():
    p = SwitchingProblem.from_strings(["x1", "1 + y2", "y1 + z1"], [[0, 1, 1]] * 3, 1.0)
    assert p.coupling == ("state_only", "own_component", "fully_coupled")


def test_declared_coupling_enforced():
    with pytest.raises(ConfigError, match="state_only"):
        SwitchingProblem.from_strings(["y1", "1"], [[0, 1], [1, 0]], 1.0, coupling=["state_only", "state_only"])


def test_costs_must_be_state_only():
    with pytest.raises(ExpressionError, match="not available"):
        SwitchingProblem.from_strings(["1", "1"], [[0, "y1"], [1, 0]], 1.0)


def test_bad_discount():
    with pytest.raises(ConfigError):
        SwitchingProblem.from_strings(["1"], [[0]], 0.0)


def test_shift_scale_discount_rebuild():
    p = SwitchingProblem.from_strings(["x1", "2"], [[0, 1], [2, 0]], 0.5)
    x = np.array([[3.0]])
    assert p.shifted(1.5).generator(0, x)[0] == 4.5
    assert p.with_cost_scale(3).cost_matrix(x)[0, 1, 0] == 6.0
    assert p.with_discount(2.0).discount == 2.0


# --- switching costs -----------------------------------------------------
def test_positive_costs_pass():
    r = validate_switching_costs(costs_problem([[0, 1], [1, 0]]), PTS)
    assert r.verdicts["non_free_loop"].status == "pass"


def test_zero_loop_fails_with_cycle_witness():
    with pytest.raises(NonFreeLoopViolation) as info:
        validate_switching_costs(costs_problem([[0, 0], [0, 0]]), PTS)
    w = info.value.report.verdicts["non_free_loop"].witnesses[0]
    assert w["cycle"] == [1, 2, 1]


def test_three_modes_one_cheap_cycle_passes():
    # g12=1, g23=0, g31=0; reverse directions cost 1
    r = validate_switching_costs(costs_problem([[0, 1, 1], [1, 0, 0], [0, 1, 0]]), PTS)
    assert r.verdicts["non_free_loop"].status == "pass"


def test_negative_cost():
    with pytest.raises(NegativeCost):
        validate_switching_costs(costs_problem([[0, -1], [2, 0]]), PTS)


def test_too_many_modes():
    m = 9
    c = [[0 if i == j else 1 for j in range(m)] for i in range(m)]
    with pytest.raises(TooManyModes):
        validate_switching_costs(costs_problem(c), PTS)
    with pytest.warns(UserWarning, match="sampled cycles"):
        r = validate_switching_costs(costs_problem(c), PTS, allow_sampled_cycles=True)
    assert r.verdicts["non_free_loop"].status == "pass"


def _brute_cycles(m):
    out = set()
    for k in range(2, m + 1):
        for perm in itertools.permutations(range(m), k):
            if perm[0] == min(perm):
                out.add(perm)
    return out


@pytest.mark.parametrize("m", [2, 3, 4, 5])
def test_simple_cycle_enumeration(m):
    got = {tuple(c[:-1]) if c[0] == c[-1] and len(c) > 1 else tuple(c) for c in simple_cycles(m)}
    assert got == _brute_cycles(m)


@given(st.permutations(range(3)), st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=6, max_size=6))
def test_cost_check_is_permutation_equivariant(perm, vals):
    it = iter(vals)
    C = [[0.0 if i == j else next(it) for j in range(3)] for i in range(3)]
    P = [[C[perm[i]][perm[j]] for j in range(3)] for i in range(3)]
    a = validate_switching_costs(costs_problem(C), PTS, strict=False).verdicts["non_free_loop"].status
    b = validate_switching_costs(costs_problem(P), PTS, strict=False).verdicts["non_free_loop"].status
    assert a == b


# --- monotonicity --------------------------------------------------------
def test_monotone_in_other_mode_passes():
    p = SwitchingProblem.from_strings(["y2", "1"], [[0, 1], [1, 0]], 1.0)
    assert probe_monotonicity(p, PTS).verdicts["generator_monotone"].status == "pass"


def test_decreasing_in_other_mode_fails():
    p = SwitchingProblem.from_strings(["-y2", "1"], [[0, 1], [1, 0]], 1.0)
    with pytest.raises(MonotonicityViolation) as info:
        probe_monotonicity(p, PTS)
    assert info.value.report.verdicts["generator_monotone"].witnesses


def test_own_component_unconstrained():
    p = SwitchingProblem.from_strings(["-5 * y1 + 0 * y2", "1"], [[0, 1], [1, 0]], 1.0)
    assert probe_monotonicity(p, PTS).verdicts["generator_monotone"].status == "pass"


@given(st.floats(0.0, 3.0), st.floats(1e-6, 0.999))
def test_nonnegative_cross_partials_never_fail(a, step):
    p = SwitchingProblem.from_strings([f"{a!r} * y2 + max(y2, 0)", f"exp(min(y1, 3))"],
                                      [[0, 1], [1, 0]], 1.0)
    assert probe_monotonicity(p, PTS, step, strict=False).verdicts["generator_monotone"].status == "pass"


# --- discount ------------------------------------------------------------
def test_geometric_slow_growth_passes():
    p = SwitchingProblem.from_strings(["x1"], [[0]], 0.2)
    r = validate_discount(p, DiffusionSpec.geometric(0.05, 0.0), 40.0, 200, 0)
    assert r.verdicts["discount"].status == "pass"


def test_geometric_fast_growth_fails():
    p = SwitchingProblem.from_strings(["x1"], [[0]], 0.1)
    with pytest.raises(DiscountTooSmall) as info:
        validate_discount(p, DiffusionSpec.geometric(0.3, 0.0), 80.0, 200, 0)
    assert info.value.report.verdicts["discount"].witnesses


def test_frozen_state_bounded_payoff_passes():
    p = SwitchingProblem.from_strings(["1"], [[0]], 0.01)
    r = validate_discount(p, DiffusionSpec.constant(0.0, 0.0), 800.0, 100, 0)
    assert r.verdicts["discount"].status == "pass"


def test_moment_growth_rate_closed_forms():
    g = DiffusionSpec.geometric(0.05, 0.2)
    assert g.moment_growth_rate(2) == pytest.approx(2 * 0.05 + 0.2 ** 2)
    assert DiffusionSpec.constant(1.0, 1.0).moment_growth_rate(2) == 0.0
    ou = DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5)
    assert ou.moment_growth_rate(2) == 0.0


def test_growth_exponent_of_polynomials():
    for src, gamma in [("1", 0), ("x1", 1), ("x1 ** 2 + 3", 2)]:
        p = SwitchingProblem.from_strings([src], [[0]], 1.0)
        assert estimate_growth_exponent(p)[0] == gamma


# --- reports -------------------------------------------------------------
def test_fail_verdict_needs_witness():
    with pytest.raises(ValueError):
        Verdict("fail")


def test_validation_is_pure():
    p = SwitchingProblem.from_strings(["1 + x1", "1 - x1"], [[0, 0.2], [0.2, 0]], 0.5)
    d = DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5)
    pts = sample_cloud([(-5, 5)], PTS, seed=3)
    a = validate_problem(p, d, pts, n_paths=200, seed=3).to_dict()
    b = validate_problem(p, d, pts, n_paths=200, seed=3).to_dict()
    assert a == b
    assert a["verdicts"]["cost_subharmonic"]["status"] == "indeterminate"


def test_report_merge_and_failures():
    r = ValidationReport()
    r.verdicts["dynamics_regular"] = Verdict("pass")
    s = ValidationReport()
    s.verdicts["discount"] = Verdict("fail", [{"x0": [0.0]}], error="DiscountTooSmall")
    merged = r.merge(s)
    assert not merged.passed and set(merged.failures) == {"discount"}
    with pytest.raises(DiscountTooSmall):
        merged.raise_for_failures()


def test_flow_lipschitz_constant():
    d = DiffusionSpec.affine(0.0, [[-0.5]], 0.3)
    assert d.flow_lipschitz(2.0) == pytest.approx(math.exp(0.5 * 2.0 + 1.0))

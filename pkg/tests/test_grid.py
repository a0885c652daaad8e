import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from switchqvi.errors import BadBounds, DimensionUnsupported
from switchqvi.grid import (build_grid, check_cost_subharmonicity, check_m_matrix, default_bounds,
                            discretize_generator, discretize_stretched, stretched_padding)
from switchqvi.model import DiffusionSpec, SwitchingProblem


def test_1d_nodes():
    g = build_grid([[0, 1]], 4)
    assert g.n_nodes == 5
    assert np.allclose(g.nodes[:, 0], [0, .25, .5, .75, 1])


def test_2d_nodes():
    g = build_grid([[0, 1], [0, 2]], [2, 4])
    assert g.n_nodes == 15
    assert np.allclose(g.h, [0.5, 0.5])
    # last axis fastest
    assert np.allclose(g.nodes[:3], [[0, 0], [0, 0.5], [0, 1.0]])


@pytest.mark.parametrize("bounds", [[[1, 1]], [[2, 1]], [[0, math.inf]]])
def test_bad_bounds(bounds):
    with pytest.raises(BadBounds):
        build_grid(bounds, 8)


def test_too_few_cells_and_dims():
    with pytest.raises(BadBounds):
        build_grid([[0, 1]], 3)
    with pytest.raises(DimensionUnsupported):
        build_grid([[0, 1]] * 3, 4)


@given(lo=st.floats(-10, 10), w=st.floats(0.1, 10), n=st.integers(4, 60))
def test_grid_invariants(lo, w, n):
    g = build_grid([[lo, lo + w]], n)
    assert g.h[0] == pytest.approx(w / n) and g.h[0] > 0
    assert g.n_nodes == n + 1
    idx = np.arange(g.n_nodes)
    assert np.array_equal(g.flat_index(g.multi_index), idx)
    near, out = g.nearest(g.nodes)
    assert np.array_equal(near, idx) and not out.any()


def test_default_box():
    assert default_bounds([0.0]) == [(-5.0, 5.0)]
    assert default_bounds([1.0]) == [(-9.0, 11.0)]


def test_upwind_positive_drift():
    op = discretize_generator(DiffusionSpec.constant(1.0, 0.0), build_grid([[0, 2]], 4))
    v = np.array([0.0, 1.0, 5.0, 2.0, 7.0])
    Lv = op.apply(v)
    assert np.allclose(Lv[1:-1], (v[2:] - v[1:-1]) / 0.5)


def test_upwind_negative_drift():
    op = discretize_generator(DiffusionSpec.constant(-1.0, 0.0), build_grid([[0, 2]], 4))
    v = np.array([0.0, 1.0, 5.0, 2.0, 7.0])
    assert np.allclose(op.apply(v)[1:-1], -(v[1:-1] - v[:-2]) / 0.5)


def test_second_difference():
    op = discretize_generator(DiffusionSpec.constant(0.0, math.sqrt(2)), build_grid([[0, 4]], 4))
    L = op.L.toarray()
    for i in (1, 2, 3):
        assert np.allclose(L[i, i - 1:i + 2], [1, -2, 1])


def test_neumann_mirror_rows():
    op = discretize_generator(DiffusionSpec.constant(0.0, math.sqrt(2)), build_grid([[0, 4]], 4))
    L = op.L.toarray()
    assert np.allclose(L[0, :2], [-2, 2]) and np.allclose(L[4, 3:], [2, -2])


def test_geometric_m_matrix():
    op = discretize_generator(DiffusionSpec.geometric(0.05, 0.2), build_grid([[0.5, 2.0]], 64))
    rep = check_m_matrix(op, r=0.1)
    assert rep["monotone"] and rep["m_matrix"]
    A = op.system(0.1).toarray()
    off = A - np.diag(np.diag(A))
    assert np.all(off <= 0)
    assert np.all(np.diag(A) > np.abs(off).sum(axis=1))


def test_interior_rows_sum_to_zero():
    op = discretize_generator(DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5), build_grid([[-3, 3]], 60))
    rows = np.asarray(op.L.sum(axis=1)).ravel()
    assert np.all(np.abs(rows[op.interior]) <= 1e-12)
    assert np.all(rows <= 0)


def test_dirichlet_rows_flagged():
    op = discretize_generator(DiffusionSpec.geometric(0.05, 0.2),
                              build_grid([[0.5, 2.0]], 16, "dirichlet_envelope"))
    assert op.dirichlet[0] and op.dirichlet[-1] and not op.dirichlet[1:-1].any()
    A = op.system(0.1).toarray()
    assert A[0, 0] == 1.0 and np.count_nonzero(A[0]) == 1


DIFFS_2D = [
    DiffusionSpec.ornstein_uhlenbeck([1.0, 2.0], [0.0, 0.0], [[0.5, 0.0], [0.3, 0.4]]),
    DiffusionSpec.constant([0.3, -0.2], [[1.0, 0.0], [0.3, math.sqrt(0.01)]]),   # |a12| > min(a11, a22)
    DiffusionSpec.constant([0.0, 0.0], [[0.6, 0.0], [-0.6, 0.3]]),               # negative correlation
]


@pytest.mark.parametrize("diff", DIFFS_2D)
def test_2d_monotone(diff):
    op = discretize_generator(diff, build_grid([[-2, 2], [-2, 2]], [24, 24]))
    assert check_m_matrix(op, r=0.5)["monotone"]


@pytest.mark.parametrize("diff", DIFFS_2D)
def test_2d_cross_term_consistency(diff):
    g = build_grid([[-2, 2], [-2, 2]], [24, 24])
    op = discretize_generator(diff, g)
    x = g.nodes
    a = diff.covariance(x)
    b = diff.drift(x)
    v = x[:, 0] * x[:, 1]
    exact = a[:, 0, 1] + b[:, 0] * x[:, 1] + b[:, 1] * x[:, 0]
    far = np.all(np.abs(g.multi_index - 12) <= 8, axis=1)
    err = np.abs(op.apply(v) - exact)[far]
    # upwinded drift contributes at most |b| h per axis; cross term itself is exact
    assert err.max() <= np.abs(b[far]).sum(axis=1).max() * g.h[0] + 1e-10


def test_affine_gradient_exact():
    g = build_grid([[-1, 1], [0, 2]], [8, 6])
    diff = DiffusionSpec.constant([0.0, 0.0], [[0.5, 0.1], [0.2, 0.4]])
    op = discretize_generator(diff, g)
    v = 3.0 + 2.0 * g.nodes[:, 0] - 0.7 * g.nodes[:, 1]
    assert np.allclose(op.derivatives[0] @ v, 2.0) and np.allclose(op.derivatives[1] @ v, -0.7)
    sg = op.sigma_grad(v)
    sigma = np.array([[0.5, 0.1], [0.2, 0.4]])
    assert np.allclose(sg, sigma.T @ [2.0, -0.7])


def test_quadratic_consistency_order():
    diff = DiffusionSpec.affine(0.3, [[-0.8]], 0.6)
    errs = []
    for n in (40, 80):
        g = build_grid([[-2, 2]], n)
        op = discretize_generator(diff, g)
        x = g.nodes[:, 0]
        exact = diff.drift(g.nodes)[:, 0] * 2 * x + 0.36
        errs.append(np.abs(op.apply(x * x) - exact)[op.interior].max())
    assert math.log2(errs[0] / errs[1]) >= 0.9


def _cost_problem(g12):
    return SwitchingProblem.from_strings(["1", "1"], [[0, g12], [1, 0]], 1.0)


def test_subharmonicity_constant_costs():
    op = discretize_generator(DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5), build_grid([[-3, 3]], 30))
    assert check_cost_subharmonicity(_cost_problem("1"), op)["status"] == "pass"


def test_subharmonicity_convex_cost_fails():
    op = discretize_generator(DiffusionSpec.constant(0.0, 1.0), build_grid([[-2, 2]], 16))
    rep = check_cost_subharmonicity(_cost_problem("x1 ** 2"), op)
    assert rep["status"] == "fail"
    assert rep["witnesses"][0]["Lg"] == pytest.approx(1.0)
    assert rep["witnesses"][0]["pair"] == [1, 2]


def test_subharmonicity_concave_cost_passes():
    op = discretize_generator(DiffusionSpec.constant(0.0, 1.0), build_grid([[-2, 2]], 16))
    assert check_cost_subharmonicity(_cost_problem("-x1 ** 2"), op)["status"] == "pass"


def test_coo_dump(tmp_path):
    op = discretize_generator(DiffusionSpec.constant(0.0, math.sqrt(2)), build_grid([[0, 4]], 4))
    p = tmp_path / "L.coo"
    op.to_coo_text(p)
    lines = p.read_text().splitlines()
    head = json.loads(lines[0])
    assert head["grid"]["n_cells"] == [4] and head["nnz"] == len(lines) - 1
    r, c, v = lines[1].split()
    assert (int(r), int(c)) == (0, 0) and float(v) == pytest.approx(-2.0)


def test_restriction_and_refine():
    g = build_grid([[0, 1]], 4)
    fine = g.refined(2)
    assert np.array_equal(g.restriction_from(fine), [0, 2, 4, 6, 8])
    with pytest.raises(ValueError):
        fine.restriction_from(build_grid([[0, 1]], 5))


def test_stretched_padding_geometry():
    g = build_grid([[0.5, 2.0]], 64)
    ax = stretched_padding(g, 1e6, DiffusionSpec.geometric(0.05, 0.2).support)
    x = ax.coords
    assert x[0] == 0.0 and x[-1] == pytest.approx(2.0 + 1.5e6)
    assert np.all(np.diff(x) > 0)
    assert 0.5 in x and 2.0 in x
    assert ax.n_nodes < 1000
    # same axis for every box resolution
    assert np.array_equal(x, stretched_padding(build_grid([[0.5, 2.0]], 256), 1e6, [(0.0, math.inf)]).coords)


@pytest.mark.parametrize("diff", [DiffusionSpec.geometric(0.05, 0.2), DiffusionSpec.ornstein_uhlenbeck(1.0, 0.0, 0.5),
                                  DiffusionSpec.constant(-0.3, 0.0)])
def test_stretched_operator_monotone(diff):
    ax = stretched_padding(build_grid([[0.5, 2.0]], 16), 1e4, diff.support)
    op = discretize_stretched(diff, ax)
    assert check_m_matrix(op, r=0.1)["monotone"]
    v = 1.5 - 2.0 * ax.coords
    assert np.allclose(op.derivatives[0] @ v, -2.0)

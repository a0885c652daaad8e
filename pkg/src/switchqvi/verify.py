"""Executable ordering and consistency checks on solver output."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NonConvergentRefinement, PrerequisiteOrderViolated, SolverError
from .grid import DiscreteOperator, build_grid, discretize_generator
from .model import DiffusionSpec, SwitchingProblem, estimate_lipschitz
from .qvi import SolverConfig, ValueField, obstacles, picard_iterate, solve_envelopes

EXIT_OK, EXIT_FAILED, EXIT_PREREQUISITE = 0, 3, 4
REGIONS = ("full", "interior_half")


@dataclass(frozen=True)
class CheckResult:
    """``margin`` is the smallest measured slack; negative means violated."""

    name: str
    status: str                    # pass | fail | prerequisite
    margin: float | None
    tolerance: float
    witness: dict | None = None
    detail: str = ""
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.status not in ("pass", "fail", "prerequisite"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status != "pass" and self.witness is None:
            raise ValueError("a failing check must carry a witness")

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def to_dict(self) -> dict:
        return asdict(self)


def _witness(node: int, mode: int, value: float, grid=None, **extra) -> dict:
    w = {"node": int(node), "mode": int(mode) + 1, "value": float(value)}
    if grid is not None:
        w["x"] = grid.nodes[node].tolist()
    w.update({k: float(v) for k, v in extra.items()})
    return w


def obstacle_consistency(field: ValueField, problem: SwitchingProblem) -> CheckResult:
    """``v_i >= max_j (v_j - g_ij) - 1e-8 (1 + |v|)`` at every node and mode."""
    V = field.values
    if V.shape[0] != problem.num_modes:
        raise ValueError("field and problem disagree on the number of modes")
    if problem.num_modes == 1:
        return CheckResult("obstacle_consistency", "pass", None, 1e-8, detail="single mode: no obstacle")
    grid = field.grid
    phi = obstacles(V, problem.cost_matrix(grid.nodes))
    gap = V - phi
    allowed = 1e-8 * (1.0 + np.abs(V))
    i, n = np.unravel_index(int(np.argmin(gap + allowed)), gap.shape)
    margin = float(gap.min())
    if np.all(gap >= -allowed):
        return CheckResult("obstacle_consistency", "pass", margin, 1e-8)
    return CheckResult("obstacle_consistency", "fail", margin, 1e-8,
                       _witness(n, i, V[i, n], grid, obstacle=phi[i, n]),
                       f"v{i + 1} = {V[i, n]:.10g} below its obstacle {phi[i, n]:.10g}")


def envelope_check(field: ValueField, upper: np.ndarray, lower: np.ndarray, eps_out: float = 1e-6) -> CheckResult:
    V = field.values
    tol = 10 * eps_out
    below = V - lower[None, :]
    above = upper[None, :] - V
    margin = float(min(below.min(), above.min()))
    if margin >= -tol:
        return CheckResult("envelope_check", "pass", margin, tol)
    side, arr = ("lower", below) if below.min() <= above.min() else ("upper", above)
    i, n = np.unravel_index(int(np.argmin(arr)), arr.shape)
    bound = lower[n] if side == "lower" else upper[n]
    return CheckResult("envelope_check", "fail", margin, tol,
                       _witness(n, i, V[i, n], field.grid, envelope=bound),
                       f"v{i + 1} crosses the {side} envelope")


def solve(problem: SwitchingProblem, op: DiscreteOperator, config: SolverConfig | None = None):
    """Envelopes then Picard; returns ``(field, trace, (upper, lower))``."""
    config = config or SolverConfig()
    envs = solve_envelopes(problem, op, config)
    fld, trace = picard_iterate(problem, op, config, envelopes=envs)
    return fld, trace, envs


def _generator_samples(problem: SwitchingProblem, x: np.ndarray, seed: int, draws: int = 4):
    """(x, y, z) batches: y, z are zero for state-only sets, plus random draws otherwise."""
    n, m, d = x.shape[0], problem.num_modes, problem.dim_noise
    yield x, np.zeros((n, m)), np.zeros((n, d))
    if problem.state_only:
        return
    rng = np.random.default_rng(seed)
    for _ in range(draws):
        yield x, rng.normal(scale=5.0, size=(n, m)), rng.normal(scale=5.0, size=(n, d))


def comparison_test(problem_lo: SwitchingProblem, problem_hi: SwitchingProblem, op: DiscreteOperator,
                    config: SolverConfig | None = None, *, seed: int = 0) -> CheckResult:
    """Ordered generators with shared costs must give ordered value fields."""
    config = config or SolverConfig()
    x = op.grid.nodes
    if problem_lo.num_modes != problem_hi.num_modes:
        raise PrerequisiteOrderViolated("the two problems have different numbers of modes")
    c_lo, c_hi = problem_lo.cost_matrix(x), problem_hi.cost_matrix(x)
    if not np.array_equal(c_lo, c_hi):
        n, i, j = np.argwhere(c_lo != c_hi)[0]
        raise PrerequisiteOrderViolated("switching costs differ between the two problems",
                                        node=int(n), source=int(i) + 1, target=int(j) + 1)
    if problem_lo.discount != problem_hi.discount:
        raise PrerequisiteOrderViolated("discount rates differ between the two problems")
    for xs, y, z in _generator_samples(problem_hi, x, seed):
        for i in range(problem_lo.num_modes):
            lo = problem_lo.generator(i, xs, y, z)
            hi = problem_hi.generator(i, xs, y, z)
            bad = lo > hi
            if np.any(bad):
                n = int(np.flatnonzero(bad)[0])
                raise PrerequisiteOrderViolated(
                    f"f{i + 1}_lo > f{i + 1}_hi at node {n}", node=n, mode=i + 1, x=xs[n].tolist(),
                    lo=float(lo[n]), hi=float(hi[n]))
    f_lo, _, _ = solve(problem_lo, op, config)
    f_hi, _, _ = solve(problem_hi, op, config)
    diff = f_hi.values - f_lo.values
    tol = 10 * config.eps_out
    i, n = np.unravel_index(int(np.argmin(diff)), diff.shape)
    margin = float(diff.min())
    extras = {"max_gap": float(diff.max())}
    C, _ = estimate_lipschitz(problem_hi, x, seed=seed)
    if C is not None and problem_hi.discount <= problem_hi.num_modes * C:
        extras["note"] = (f"r = {problem_hi.discount:g} <= m * C_hat = {problem_hi.num_modes * C:.4g}: "
                          "ordering is observed, not guaranteed")
    if margin >= -tol:
        return CheckResult("comparison_test", "pass", margin, tol, extras=extras)
    return CheckResult("comparison_test", "fail", margin, tol,
                       _witness(n, i, f_lo.values[i, n], op.grid, upper_value=f_hi.values[i, n]),
                       "lower-generator solution exceeds the upper one", extras)


def grid_refinement_check(problem: SwitchingProblem, diffusion: DiffusionSpec, resolutions: Sequence[int],
                          config: SolverConfig | None = None, *,
                          bounds: Sequence[Sequence[float]] = ((-1.0, 1.0),),
                          boundary: str = "neumann_zero",
                          operator_hook: Callable[[DiscreteOperator], DiscreteOperator] | None = None,
                          min_order: float = 0.8, region: str = "full") -> CheckResult:
    """Solve at doubling resolutions and estimate the convergence order on the coarsest nodes.

    ``region="interior_half"`` compares only nodes in the middle half of
    every axis, keeping wall layers of the truncated problem out of the
    estimate.  Raises ``NonConvergentRefinement`` when differences do not
    shrink, the fitted order is below ``min_order``, or a solve fails.
    """
    if region not in REGIONS:
        raise ValueError(f"region must be one of {REGIONS}")
    config = config or SolverConfig()
    res = [int(n) for n in resolutions]
    if len(res) < 3:
        raise ValueError("need at least three resolutions")
    if any(b != 2 * a for a, b in zip(res, res[1:])):
        raise ValueError(f"each resolution must double the previous one, got {res}")
    grids, fields = [], []
    for n in res:
        g = build_grid(bounds, n, boundary)
        op = discretize_generator(diffusion, g)
        if operator_hook is not None:
            op = operator_hook(op)
        try:
            fld, _, _ = solve(problem, op, config)
        except SolverError as exc:
            raise NonConvergentRefinement(f"solve failed at resolution {n}: {exc}", resolution=n) from exc
        if not np.all(np.isfinite(fld.values)):
            raise NonConvergentRefinement(f"non-finite values at resolution {n}", resolution=n)
        grids.append(g)
        fields.append(fld.values)
    coarse = grids[0]
    keep = _region_mask(coarse, region)
    restricted = [V[:, coarse.restriction_from(g)][:, keep] for V, g in zip(fields, grids)]
    diffs = [float(np.max(np.abs(b - a))) for a, b in zip(restricted, restricted[1:])]
    scale = 1.0 + max(float(np.max(np.abs(V))) for V in restricted)
    extras = {"resolutions": res, "differences": diffs, "region": region}
    if max(diffs) <= 1e-10 * scale:
        return CheckResult("grid_refinement_check", "pass", None, min_order,
                           detail="solutions agree across resolutions; order not estimated", extras=extras)
    if any(b >= a for a, b in zip(diffs, diffs[1:])) or min(diffs) == 0.0:
        raise NonConvergentRefinement(f"successive differences do not decrease: {diffs}", differences=diffs)
    order = float(-np.polyfit(np.arange(len(diffs)), np.log2(diffs), 1)[0])
    extras["order"] = order
    if order < min_order:
        raise NonConvergentRefinement(f"estimated order {order:.3f} below {min_order}", differences=diffs,
                                      order=order)
    return CheckResult("grid_refinement_check", "pass", order - min_order, min_order, extras=extras)


def _region_mask(grid, region: str) -> np.ndarray:
    if region == "full":
        return np.ones(grid.n_nodes, dtype=bool)
    lo = np.array([b[0] for b in grid.bounds])
    hi = np.array([b[1] for b in grid.bounds])
    mid, quarter = 0.5 * (lo + hi), 0.25 * (hi - lo)
    return np.all(np.abs(grid.nodes - mid) <= quarter * (1 + 1e-12), axis=1)


def anti_diffusion_hook(strength: float = 1.0) -> Callable[[DiscreteOperator], DiscreteOperator]:
    """Negative control: subtract a resolution-independent multiple of the discrete Laplacian."""
    def hook(op: DiscreteOperator) -> DiscreteOperator:
        eye = np.eye(op.grid.dim)
        lap = discretize_generator(DiffusionSpec.constant(np.zeros(op.grid.dim), np.sqrt(2.0) * eye), op.grid)
        return op.with_matrix(op.L - strength * lap.L)
    return hook


def hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()[:16]


@dataclass
class VerificationSuiteReport:
    checks: dict[str, CheckResult] = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    input_hashes: dict = field(default_factory=dict)

    def add(self, result: CheckResult) -> None:
        self.checks[result.name] = result

    def add_prerequisite(self, name: str, exc: Exception) -> None:
        w = {k: v for k, v in getattr(exc, "payload", {}).items()}
        self.checks[name] = CheckResult(name, "prerequisite", None, 0.0, w or {"error": str(exc)}, str(exc))

    def add_failure(self, name: str, exc: Exception, tolerance: float = 0.0) -> None:
        w = {k: v for k, v in getattr(exc, "payload", {}).items()}
        self.checks[name] = CheckResult(name, "fail", None, tolerance, w or {"error": str(exc)}, str(exc))

    @property
    def exit_code(self) -> int:
        statuses = {c.status for c in self.checks.values()}
        if "prerequisite" in statuses:
            return EXIT_PREREQUISITE
        if "fail" in statuses:
            return EXIT_FAILED
        return EXIT_OK

    def to_dict(self) -> dict:
        return {"exit_code": self.exit_code,
                "checks": {k: self.checks[k].to_dict() for k in sorted(self.checks)},
                "tolerances": self.tolerances, "input_hashes": self.input_hashes}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def run_suite(problem: SwitchingProblem, diffusion: DiffusionSpec, *, bounds, n_cells, boundary: str,
              resolutions: Sequence[int], config: SolverConfig | None = None, delta: float = 1.0,
              region: str = "full",
              field_override: Callable[[ValueField], ValueField] | None = None,
              seed: int = 0) -> VerificationSuiteReport:
    """Obstacle, envelope, refinement and +delta comparison checks on one problem."""
    config = config or SolverConfig()
    report = VerificationSuiteReport(tolerances={"obstacle": 1e-8, "envelope": 10 * config.eps_out,
                                                 "comparison": 10 * config.eps_out, "refinement_order": 0.8,
                                                 "delta": delta})
    grid = build_grid(bounds, n_cells, boundary)
    op = discretize_generator(diffusion, grid)
    fld, _, (up, lo) = solve(problem, op, config)
    if field_override is not None:
        fld = field_override(fld)
    report.input_hashes = {"field": hash_array(fld.values), "upper": hash_array(up), "lower": hash_array(lo),
                           "config": config.hash()}
    report.add(obstacle_consistency(fld, problem))
    report.add(envelope_check(fld, up, lo, config.eps_out))
    try:
        report.add(grid_refinement_check(problem, diffusion, resolutions, config, bounds=bounds,
                                         boundary=boundary, region=region))
    except NonConvergentRefinement as exc:
        report.add_failure("grid_refinement_check", exc, 0.8)
    try:
        report.add(comparison_test(problem, problem.shifted(delta), op, config, seed=seed))
    except PrerequisiteOrderViolated as exc:
        report.add_prerequisite("comparison_test", exc)
    return report

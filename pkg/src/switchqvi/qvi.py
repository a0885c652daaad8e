"""Discrete solver for the coupled switching system.

For each mode i the discrete problem is

    min( v_i - max_{j != i}(v_j - g_ij),  r v_i - L_h v_i - f_i(x, v, sigma^T D_h v_i) ) = 0

and it is solved by the monotone outer iteration: start every mode at the
lower envelope, then repeatedly solve one single-obstacle problem per mode
with the obstacle and the other modes' values frozen at the previous
iterate.  Inner obstacle problems are solved exactly by Howard policy
iteration or approximately by penalization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    EnvelopeOrderViolated,
    InnerDiverged,
    MaxOuterIterations,
    MonotonicityBroken,
    PenaltyStalled,
)
from .expr import Expression, parse
from .grid import DiscreteOperator, discretize_generator, discretize_stretched, stretched_padding
from .model import SwitchingProblem

logger = logging.getLogger(__name__)

INNER_METHODS = ("policy_iteration", "penalized")
OBSTACLE_TOL = 1e-9

# generator callables take (x (N,k), y (N,), z (N,d)) and return (N,)
Generator = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    inner_method: str = "policy_iteration"
    penalty_schedule: tuple[float, ...] = (1e1, 1e2, 1e3, 1e4)
    eps_out: float = 1e-6
    eps_in: float = 1e-10
    max_outer: int = 5000
    max_inner: int = 500
    damping: float = 0.0
    linear_tol: float = 1e-12
    pad_factor: float | None = None
    pad_max_nodes: int = 200_000
    threads: int = 1

    def __post_init__(self):
        if self.inner_method not in INNER_METHODS:
            raise ValueError(f"inner_method must be one of {INNER_METHODS}")
        if not (self.eps_out > 0 and self.eps_in > 0 and self.linear_tol > 0):
            raise ValueError("tolerances must be positive")
        if not 0.0 <= self.damping < 1.0:
            raise ValueError("damping must lie in [0, 1)")
        if not self.penalty_schedule or any(n <= 0 for n in self.penalty_schedule):
            raise ValueError("penalty schedule must be nonempty and positive")
        object.__setattr__(self, "penalty_schedule", tuple(float(n) for n in self.penalty_schedule))

    def pad(self, dim: int) -> float:
        if self.pad_factor is not None:
            return self.pad_factor
        return 1e6 if dim == 1 else 4.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["penalty_schedule"] = list(self.penalty_schedule)
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class IterationTrace:
    entries: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def min_increment(self) -> float:
        return min((min(e["min_increment"]) for e in self.entries), default=0.0)

    def to_list(self) -> list[dict]:
        return self.entries


@dataclass(frozen=True)
class ValueField:
    values: np.ndarray       # (m, N)
    gradient: np.ndarray     # (m, N, d)
    slack: np.ndarray        # (m, N)
    provenance: dict
    grid: object = field(repr=False, default=None)

    @property
    def num_modes(self) -> int:
        return self.values.shape[0]

    def at(self, x: np.ndarray) -> np.ndarray:
        """Values of every mode interpolated at points ``x``: (m, n)."""
        return np.stack([self.grid.interpolate(v, x) for v in self.values])

    def with_values(self, values: np.ndarray) -> "ValueField":
        return ValueField(np.asarray(values, dtype=float), self.gradient, self.slack,
                          {**self.provenance, "modified": True}, self.grid)


@dataclass
class ObstacleResult:
    values: np.ndarray
    iterations: int
    negative_parts: list[float] = field(default_factory=list)
    penalties: list[float] = field(default_factory=list)
    stages: list[np.ndarray] = field(default_factory=list)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------
class _Factor:
    """Cached sparse LU of ``r I - L_h``."""

    def __init__(self, op: DiscreteOperator, r: float):
        self.A = op.system(r)
        self.lu = splu(self.A)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return self.lu.solve(np.asarray(rhs, dtype=float))


def _sup(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def _as_generator(gen, dim_noise: int) -> tuple[Generator, bool]:
    """Normalise a single-component generator; returns (callable, reads_value_or_gradient)."""
    if isinstance(gen, (str, int, float)) and not isinstance(gen, bool):
        gen = parse(gen, {"x": 2, "y": 1, "z": dim_noise})
    if isinstance(gen, Expression):
        live = bool(gen.reads("y") or gen.reads("z"))

        def call(x, y, z, gen=gen):
            return gen(x, y[:, None], z)
        return call, live
    return gen, getattr(gen, "live", True)


def boundary_datum(problem: SwitchingProblem, op: DiscreteOperator, config: SolverConfig) -> np.ndarray | None:
    """Dirichlet data ``(v_up + v_lo) / 2`` from envelopes solved on a padded Neumann grid."""
    if not np.any(op.dirichlet):
        return None
    grid = op.grid
    if grid.dim == 1:
        padded = stretched_padding(grid, config.pad(1), op.diffusion.support)
        pad_op = discretize_stretched(op.diffusion, padded)
    else:
        padded = grid.padded(config.pad(grid.dim), op.diffusion.support, config.pad_max_nodes)
        pad_op = discretize_generator(op.diffusion, padded)
    up, lo = solve_envelopes(problem, pad_op, config)
    mid = 0.5 * (up + lo)
    datum = np.zeros(grid.n_nodes)
    datum[op.dirichlet] = padded.interpolate(mid, grid.nodes[op.dirichlet])
    return datum


# ---------------------------------------------------------------------------
# envelopes
# ---------------------------------------------------------------------------
def solve_envelopes(problem: SwitchingProblem, op: DiscreteOperator, config: SolverConfig | None = None,
                    *, boundary: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Obstacle-free solves with ``max_i f_i`` (upper) and ``min_i f_i`` (lower)."""
    config = config or SolverConfig()
    if boundary is None and np.any(op.dirichlet):
        boundary = boundary_datum(problem, op, config)
    factor = _Factor(op, problem.discount)
    x = op.grid.nodes
    m = problem.num_modes
    live = not problem.state_only

    def F(v, pick):
        y = np.repeat(v[:, None], m, axis=1)
        z = op.sigma_grad(v)
        vals = np.stack([problem.generators[i](x, y, z) for i in range(m)])
        return pick(vals, axis=0)

    out = []
    for pick in (np.max, np.min):
        v = _fixed_point(lambda v: F(v, pick), factor, op, boundary, config, live,
                         np.zeros(op.n_nodes), what="envelope")
        out.append(v)
    up, lo = out
    tol = 10 * config.eps_in * max(1.0, _sup(up), _sup(lo))
    if np.any(lo > up + tol):
        n = int(np.argmax(lo - up))
        raise EnvelopeOrderViolated(f"lower envelope exceeds upper at node {n}", node=n,
                                    lower=float(lo[n]), upper=float(up[n]))
    return up, lo


def _fixed_point(rhs_fn, factor: _Factor, op: DiscreteOperator, boundary, config: SolverConfig,
                 live: bool, v0: np.ndarray, what: str) -> np.ndarray:
    """Iterate ``v <- (r I - L_h)^{-1} F(v)`` until the sup change is below eps_in."""
    v = v0
    prev_change, grew = math.inf, 0
    for it in range(config.max_inner):
        rhs = rhs_fn(v)
        if boundary is not None:
            rhs = np.where(op.dirichlet, boundary, rhs)
        new = factor.solve(rhs)
        if config.damping and it > 0:
            new = (1 - config.damping) * new + config.damping * v
        if not np.all(np.isfinite(new)):
            raise InnerDiverged(f"{what}: non-finite iterate at sweep {it + 1}", sweep=it + 1)
        change = _sup(new - v)
        v = new
        if not live:
            return v
        if change <= config.eps_in * max(1.0, _sup(v)):
            return v
        grew = grew + 1 if change > prev_change else 0
        if grew >= 5:
            raise InnerDiverged(f"{what}: sup change grew for 5 consecutive sweeps", sweep=it + 1,
                                change=change)
        prev_change = change
    raise InnerDiverged(f"{what}: no convergence in {config.max_inner} sweeps", change=prev_change)


# ---------------------------------------------------------------------------
# single obstacle
# ---------------------------------------------------------------------------
def _howard(A: sp.csc_matrix, c: np.ndarray, phi: np.ndarray, free: np.ndarray,
            stop0: np.ndarray | None, max_iter: int) -> tuple[np.ndarray, int]:
    """Exact solve of ``min(A v - c, v - phi) = 0`` by policy iteration.

    ``free`` marks rows that never take the stopping action (Dirichlet rows,
    modes without an obstacle).
    """
    N = A.shape[0]
    A = A.tocsr()
    if stop0 is None:
        u = splu(A.tocsc()).solve(c)
        stop = (u < phi) & ~free
    else:
        stop = stop0 & ~free
    eye = sp.identity(N, format="csr")
    for it in range(1, max_iter + 1):
        keep = sp.diags((~stop).astype(float))
        M = (keep @ A + sp.diags(stop.astype(float)) @ eye).tocsc()
        v = splu(M).solve(np.where(stop, phi, c))
        cont_res = A @ v - c
        stop_res = v - phi
        tol = 1e-13 * (1.0 + np.abs(v))
        new = np.where(stop_res < cont_res - tol, True,
                       np.where(cont_res < stop_res - tol, False, stop)) & ~free
        if np.array_equal(new, stop):
            return v, it
        stop = new
    raise InnerDiverged(f"policy iteration did not settle in {max_iter} steps")


def _penalized_linear(A: sp.csc_matrix, c: np.ndarray, phi: np.ndarray, free: np.ndarray, n_pen: float,
                      v0: np.ndarray, max_iter: int) -> tuple[np.ndarray, int]:
    """Semismooth Newton for ``A v - c - n (phi - v)^+ = 0``."""
    A = A.tocsr()
    active = (v0 < phi) & ~free
    for it in range(1, max_iter + 1):
        D = sp.diags(n_pen * active.astype(float))
        v = splu((A + D).tocsc()).solve(c + n_pen * np.where(active, phi, 0.0))
        new = (v < phi) & ~free
        if np.array_equal(new, active):
            return v, it
        active = new
    raise InnerDiverged(f"penalized Newton did not settle in {max_iter} steps (n = {n_pen:g})")


def _obstacle(obstacle: np.ndarray, gen: Generator, live: bool, op: DiscreteOperator, r: float,
              config: SolverConfig, boundary: np.ndarray | None, v0: np.ndarray | None,
              A: sp.csc_matrix | None = None) -> ObstacleResult:
    x = op.grid.nodes
    phi = np.asarray(obstacle, dtype=float)
    free = op.dirichlet | ~np.isfinite(phi)
    phi_safe = np.where(np.isfinite(phi), phi, -np.inf)
    A = op.system(r) if A is None else A
    v = np.zeros(op.n_nodes) if v0 is None else np.asarray(v0, dtype=float).copy()

    def rhs(v):
        c = gen(x, v, op.sigma_grad(v))
        if boundary is not None:
            c = np.where(op.dirichlet, boundary, c)
        return c

    def lag(linear_solve, v):
        prev_change, grew, total = math.inf, 0, 0
        for sweep in range(config.max_inner):
            new, its = linear_solve(rhs(v), v)
            total += its
            if not np.all(np.isfinite(new)):
                raise InnerDiverged("single-obstacle iterate became non-finite", sweep=sweep + 1)
            change = _sup(new - v)
            v = new
            if not live or change <= config.eps_in * max(1.0, _sup(v)):
                return v, total
            grew = grew + 1 if change > prev_change else 0
            if grew >= 5:
                raise InnerDiverged("single-obstacle lag iteration diverging", sweep=sweep + 1, change=change)
            prev_change = change
        raise InnerDiverged(f"single-obstacle lag iteration: no convergence in {config.max_inner} sweeps")

    if config.inner_method == "policy_iteration":
        state = {"stop": None}

        def linear(c, v):
            stop0 = state["stop"]
            if stop0 is None and v0 is not None:
                stop0 = (v0 <= phi_safe) & ~free
            sol, its = _howard(A, c, phi_safe, free, stop0, config.max_inner)
            state["stop"] = (sol <= phi_safe) & ~free
            return sol, its
        v, its = lag(linear, v)
        return ObstacleResult(v, its)

    result = ObstacleResult(v, 0)
    prev_neg = math.inf
    for n_pen in config.penalty_schedule:
        def linear(c, v, n_pen=n_pen):
            return _penalized_linear(A, c, phi_safe, free, n_pen, v, config.max_inner)
        v, its = lag(linear, v)
        neg = _sup(np.where(free, 0.0, np.maximum(phi_safe - v, 0.0)))
        if neg > prev_neg * (1 + 1e-9) and prev_neg > 1e-14:
            raise PenaltyStalled(f"negative part rose from {prev_neg:.3g} to {neg:.3g} at n = {n_pen:g}",
                                 history=result.negative_parts + [neg])
        prev_neg = neg
        result.iterations += its
        result.negative_parts.append(neg)
        result.penalties.append(n_pen)
        result.stages.append(v.copy())
    result.values = v
    return result


def solve_single_obstacle(obstacle: np.ndarray, generator, op: DiscreteOperator, r: float,
                          config: SolverConfig | None = None, *, boundary: np.ndarray | None = None,
                          initial: np.ndarray | None = None, full: bool = False):
    """Solve ``min(v - obstacle, r v - L_h v - f(x, v, sigma^T D_h v)) = 0``.

    ``generator`` is an :class:`~switchqvi.expr.Expression` over ``x``, ``y1``
    and ``z`` or a callable ``(x, y, z) -> array``.  Entries of ``obstacle``
    equal to ``-inf`` impose no constraint.  On a Dirichlet grid the wall
    values must be passed as ``boundary``.  With ``full=True`` the
    :class:`ObstacleResult` (penalty history included) is returned.
    """
    config = config or SolverConfig()
    if np.any(op.dirichlet) and boundary is None:
        raise ValueError("a Dirichlet grid needs boundary values")
    phi = np.asarray(obstacle, dtype=float)
    if phi.shape != (op.n_nodes,) or np.any(np.isnan(phi)) or np.any(phi == np.inf):
        raise ValueError("obstacle must be a finite (or -inf) array with one entry per node")
    gen, live = _as_generator(generator, op.diffusion.dim_noise)
    res = _obstacle(phi, gen, live, op, r, config, boundary, initial)
    return res if full else res.values


# ---------------------------------------------------------------------------
# outer iteration
# ---------------------------------------------------------------------------
def obstacles(values: np.ndarray, costs: np.ndarray) -> np.ndarray:
    """``max_{j != i}(v_j - g_ij)`` per mode and node; ``-inf`` when m = 1.

    ``costs`` is the (N, m, m) cost array.  Ties go to the lowest index,
    which only matters for the argmax.
    """
    m = values.shape[0]
    out = np.full(values.shape, -np.inf)
    for i in range(m):
        for j in range(m):
            if j != i:
                np.maximum(out[i], values[j] - costs[:, i, j], out=out[i])
    return out


def _mode_generator(problem: SwitchingProblem, i: int, frozen: np.ndarray) -> tuple[Generator, bool]:
    f = problem.generators[i]
    live = problem.coupling[i] != "state_only"
    ys = frozen.T.copy()

    def gen(x, y, z):
        yy = ys.copy()
        yy[:, i] = y
        return f(x, yy, z)
    return gen, live


def picard_iterate(problem: SwitchingProblem, op: DiscreteOperator, config: SolverConfig | None = None, *,
                   envelopes: tuple[np.ndarray, np.ndarray] | None = None,
                   boundary: np.ndarray | None = None,
                   config_hash: str | None = None) -> tuple[ValueField, IterationTrace]:
    """Monotone outer iteration started from the lower envelope."""
    config = config or SolverConfig()
    if boundary is None and np.any(op.dirichlet):
        boundary = boundary_datum(problem, op, config)
    if envelopes is None:
        envelopes = solve_envelopes(problem, op, config, boundary=boundary)
    up, lo = envelopes
    m = problem.num_modes
    r = problem.discount
    x = op.grid.nodes
    costs = problem.cost_matrix(x)
    A = op.system(r)
    V = np.tile(lo, (m, 1))
    trace = IterationTrace()
    interior = op.interior

    def solve_mode(i, V_prev, phi):
        gen, live = _mode_generator(problem, i, V_prev)
        return _obstacle(phi[i], gen, live, op, r, config, boundary, V_prev[i], A)

    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 and m > 1 else None
    try:
        for n in range(1, config.max_outer + 1):
            V_prev = V
            phi = obstacles(V_prev, costs)
            if pool is not None:
                results = list(pool.map(lambda i: solve_mode(i, V_prev, phi), range(m)))
            else:
                results = [solve_mode(i, V_prev, phi) for i in range(m)]
            V_new = np.stack([res.values for res in results])
            if config.damping:
                V_new = (1 - config.damping) * V_new + config.damping * V_prev
            inc = V_new - V_prev
            change = np.max(np.abs(inc), axis=1)
            min_inc = np.min(inc, axis=1)
            V = V_new
            live_gap = V - obstacles(V, costs)
            frozen_gap = V - phi
            entry = {
                "iteration": n,
                "sup_change": change.tolist(),
                "min_increment": min_inc.tolist(),
                "inner_iterations": [res.iterations for res in results],
                "obstacle_gap": [float(np.min(g)) for g in live_gap],
            }
            if not problem.state_only:
                res = _equation_residual(V, problem, op, x)
                entry["residual_sup"] = [float(np.max(np.abs(np.where(interior, rr, 0.0)))) for rr in res]
            trace.entries.append(entry)
            worst = float(min_inc.min())
            if worst < -100 * config.eps_in * max(1.0, _sup(V)):
                i = int(np.argmin(min_inc))
                node = int(np.argmin(inc[i]))
                raise MonotonicityBroken(f"iterate decreased by {-worst:.3g} at mode {i + 1}, node {node}",
                                         mode=i + 1, node=node, increment=worst, iteration=n, trace=trace)
            if worst < -10 * config.eps_in * max(1.0, _sup(V)):
                warnings.warn(f"outer step {n}: iterate decreased by {-worst:.3g}", RuntimeWarning, stacklevel=2)
            own_gap = min(float(np.min(frozen_gap)), 0.0)
            if float(change.max()) < config.eps_out and float(live_gap.min()) >= own_gap - OBSTACLE_TOL:
                break
        else:
            raise MaxOuterIterations(f"no convergence in {config.max_outer} outer steps",
                                     change=float(change.max()), trace=trace)
    finally:
        if pool is not None:
            pool.shutdown()

    field_ = _finish(V, problem, op, {
        "solver": f"picard/{config.inner_method}",
        "iterations": len(trace),
        "config_hash": config_hash or config.hash(),
    })
    return field_, trace


def _equation_residual(V: np.ndarray, problem: SwitchingProblem, op: DiscreteOperator,
                       x: np.ndarray) -> np.ndarray:
    r = problem.discount
    y = V.T
    out = np.empty_like(V)
    for i in range(problem.num_modes):
        z = op.sigma_grad(V[i])
        out[i] = r * V[i] - op.apply(V[i]) - problem.generators[i](x, y, z)
    return out


def _finish(V: np.ndarray, problem: SwitchingProblem, op: DiscreteOperator, provenance: dict) -> ValueField:
    x = op.grid.nodes
    grad = np.stack([op.sigma_grad(v) for v in V])
    slack = np.minimum(V - obstacles(V, problem.cost_matrix(x)), _equation_residual(V, problem, op, x))
    return ValueField(V, grad, slack, provenance, op.grid)


def field_from_values(values: np.ndarray, problem: SwitchingProblem, op: DiscreteOperator,
                      provenance: dict | None = None) -> ValueField:
    """Wrap raw node values (e.g. read back from CSV) into a :class:`ValueField`."""
    return _finish(np.atleast_2d(np.asarray(values, dtype=float)), problem, op, provenance or {})


# ---------------------------------------------------------------------------
# residuals
# ---------------------------------------------------------------------------
def residual(field: ValueField, problem: SwitchingProblem, op: DiscreteOperator) -> dict:
    """Complementarity residual with every coupling evaluated live."""
    V = field.values
    if V.shape != (problem.num_modes, op.n_nodes):
        raise ValueError(f"field shape {V.shape} does not match ({problem.num_modes}, {op.n_nodes})")
    x = op.grid.nodes
    gap = V - obstacles(V, problem.cost_matrix(x))
    eq = _equation_residual(V, problem, op, x)
    res = np.minimum(gap, eq)
    interior = op.interior if np.any(op.interior) else np.ones(op.n_nodes, dtype=bool)
    cell = float(np.prod(op.grid.h))
    per_mode = []
    for i in range(problem.num_modes):
        ri = res[i, interior]
        per_mode.append({"mode": i + 1, "label": problem.labels[i],
                         "sup": float(np.max(np.abs(ri))),
                         "l2": float(math.sqrt(float(np.sum(ri ** 2)) * cell))})
    masked = np.where(interior[None, :], np.abs(res), -1.0)
    i, n = np.unravel_index(int(np.argmax(masked)), masked.shape)
    worst = {"mode": int(i) + 1, "node": int(n), "x": x[n].tolist(), "value": float(res[i, n]),
             "obstacle_term": float(gap[i, n]) if np.isfinite(gap[i, n]) else None,
             "equation_term": float(eq[i, n]),
             "binding": "obstacle" if gap[i, n] <= eq[i, n] else "equation"}
    return {"sup": max(p["sup"] for p in per_mode),
            "l2": float(math.sqrt(sum(p["l2"] ** 2 for p in per_mode))),
            "per_mode": per_mode, "worst": worst}

"""Problem data: state diffusions, switching problems, hypothesis checks.

A :class:`SwitchingProblem` carries the m running-profit generators
``f_i(x, y1..ym, z)``, the switching-cost matrix ``g_ij(x)`` and the discount
rate.  A :class:`DiffusionSpec` carries drift and volatility of the state.
The ``validate_*`` functions falsify the structural hypotheses on sampled
point clouds; they never prove anything.
"""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from . import expr as expr_mod
from .errors import (
    ConfigError,
    DiscountTooSmall,
    MonotonicityViolation,
    NegativeCost,
    NonFreeLoopViolation,
    TooManyModes,
    ValidationFailed,
)
from .expr import Expression

logger = logging.getLogger(__name__)

FAMILIES = ("constant", "affine", "geometric", "custom")
COUPLINGS = ("state_only", "own_component", "fully_coupled")
MAX_EXACT_MODES = 8
MONO_TOL = 1e-8


# ---------------------------------------------------------------------------
# Diffusions
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of ``dX = b(X) dt + sigma(X) dB``.

    ``drift`` maps an (n, k) array to (n, k); ``diffusion`` maps it to
    (n, k, d).  For the parametric families the Lipschitz constants of ``b``
    and ``sigma`` and the linear-growth constant are computed at construction;
    for ``custom`` they are ``None``.
    """

    dim_state: int
    dim_noise: int
    family: str
    params: dict
    drift: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    diffusion: Callable[[np.ndarray], np.ndarray] = field(repr=False, compare=False)
    lipschitz_drift: float | None = None
    lipschitz_diffusion: float | None = None
    growth_constant: float | None = None
    support: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown diffusion family {self.family!r}")
        if self.dim_state < 1 or self.dim_noise < 1:
            raise ConfigError("dim_state and dim_noise must be positive")
        if self.support is None:
            object.__setattr__(self, "support", tuple((-math.inf, math.inf) for _ in range(self.dim_state)))

    # constructors ---------------------------------------------------------
    @classmethod
    def constant(cls, b: Sequence[float] | float, sigma) -> "DiffusionSpec":
        b = np.atleast_1d(np.asarray(b, dtype=float))
        k = b.size
        sigma = np.asarray(sigma, dtype=float).reshape(k, -1)
        d = sigma.shape[1]

        def drift(x):
            return np.broadcast_to(b, (np.shape(x)[0], k)).copy()

        def diffusion(x):
            return np.broadcast_to(sigma, (np.shape(x)[0], k, d)).copy()

        growth = float(np.linalg.norm(b) + np.linalg.norm(sigma))
        return cls(k, d, "constant", {"b": b.tolist(), "sigma": sigma.tolist()}, drift, diffusion,
                   0.0, 0.0, growth)

    @classmethod
    def affine(cls, a, B, sigma) -> "DiffusionSpec":
        """``b(x) = a + B x`` with constant ``sigma``."""
        a = np.atleast_1d(np.asarray(a, dtype=float))
        k = a.size
        B = np.asarray(B, dtype=float).reshape(k, k)
        sigma = np.asarray(sigma, dtype=float).reshape(k, -1)
        d = sigma.shape[1]

        def drift(x):
            return a + np.asarray(x, dtype=float) @ B.T

        def diffusion(x):
            return np.broadcast_to(sigma, (np.shape(x)[0], k, d)).copy()

        lb = float(np.linalg.norm(B, 2))
        growth = max(float(np.linalg.norm(a) + np.linalg.norm(sigma)), lb)
        return cls(k, d, "affine", {"a": a.tolist(), "B": B.tolist(), "sigma": sigma.tolist()},
                   drift, diffusion, lb, 0.0, growth)

    @classmethod
    def ornstein_uhlenbeck(cls, kappa, theta, sigma) -> "DiffusionSpec":
        """Diagonal mean reversion ``b(x) = kappa * (theta - x)``."""
        kappa = np.atleast_1d(np.asarray(kappa, dtype=float))
        theta = np.broadcast_to(np.asarray(theta, dtype=float), kappa.shape)
        k = kappa.size
        sig = np.asarray(sigma, dtype=float)
        if sig.ndim < 2:
            sig = np.diag(np.broadcast_to(sig, (k,)))
        spec = cls.affine(kappa * theta, -np.diag(kappa), sig)
        object.__setattr__(spec, "params", {**spec.params, "kappa": kappa.tolist(),
                                            "theta": theta.tolist()})
        return spec

    @classmethod
    def geometric(cls, mu, s) -> "DiffusionSpec":
        """Componentwise ``b_a(x) = mu_a x_a``, ``sigma(x) = diag(s_a x_a)``."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        s = np.broadcast_to(np.asarray(s, dtype=float), mu.shape).copy()
        k = mu.size

        def drift(x):
            return np.asarray(x, dtype=float) * mu

        def diffusion(x):
            x = np.asarray(x, dtype=float)
            out = np.zeros((x.shape[0], k, k))
            idx = np.arange(k)
            out[:, idx, idx] = x * s
            return out

        lb = float(np.max(np.abs(mu)))
        ls = float(np.max(np.abs(s)))
        return cls(k, k, "geometric", {"mu": mu.tolist(), "s": s.tolist()}, drift, diffusion,
                   lb, ls, lb + ls, tuple((0.0, math.inf) for _ in range(k)))

    @classmethod
    def custom(cls, drift_exprs: Sequence[str], diffusion_exprs: Sequence[Sequence[str]]) -> "DiffusionSpec":
        k = len(drift_exprs)
        rows = [list(r) for r in diffusion_exprs]
        if len(rows) != k or not rows or any(len(r) != len(rows[0]) for r in rows):
            raise ConfigError("diffusion expressions must form a k x d matrix")
        d = len(rows[0])
        limits = {"x": k}
        bx = [expr_mod.parse(e, limits) for e in drift_exprs]
        sx = [[expr_mod.parse(e, limits) for e in r] for r in rows]

        def drift(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.stack([f(x) for f in bx], axis=1)

        def diffusion(x):
            x = np.atleast_2d(np.asarray(x, dtype=float))
            return np.stack([np.stack([f(x) for f in r], axis=1) for r in sx], axis=1)

        return cls(k, d, "custom", {"drift": list(drift_exprs), "diffusion": rows}, drift, diffusion)

    # derived quantities ----------------------------------------------------
    def covariance(self, x: np.ndarray) -> np.ndarray:
        """``sigma sigma^T`` at each point, shape (n, k, k)."""
        s = self.diffusion(np.atleast_2d(x))
        return np.einsum("nad,nbd->nab", s, s)

    def moment_growth_rate(self, q: float) -> float | None:
        """Exponential growth rate of ``E|X_t|^q`` where a closed form exists."""
        if self.family == "constant":
            return 0.0
        if self.family == "affine":
            B = np.asarray(self.params["B"])
            lam = float(np.max(np.linalg.eigvalsh(0.5 * (B + B.T))))
            return max(q * lam, 0.0)
        if self.family == "geometric":
            mu = np.asarray(self.params["mu"])
            s = np.asarray(self.params["s"])
            return float(np.max(q * mu + 0.5 * q * (q - 1.0) * s ** 2))
        return None

    def flow_lipschitz(self, T: float) -> float | None:
        """Constant ``exp((L_b + L_sigma^2) T + 1)`` bounding pathwise sensitivity to x0."""
        if self.lipschitz_drift is None:
            return None
        return math.exp((self.lipschitz_drift + self.lipschitz_diffusion ** 2) * T + 1.0)

    def describe(self) -> dict:
        return {"family": self.family, "dim_state": self.dim_state, "dim_noise": self.dim_noise,
                "params": self.params}


# ---------------------------------------------------------------------------
# Switching problems
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SwitchingProblem:
    generators: tuple[Expression, ...]
    costs: tuple[tuple[Expression, ...], ...]
    discount: float
    coupling: tuple[str, ...]
    labels: tuple[str, ...]
    dim_state: int = 1
    dim_noise: int = 1

    def __post_init__(self):
        m = len(self.generators)
        if m < 1:
            raise ConfigError("at least one mode is required")
        if len(self.costs) != m or any(len(row) != m for row in self.costs):
            raise ConfigError(f"cost matrix must be {m} x {m}")
        if len(self.coupling) != m or len(self.labels) != m:
            raise ConfigError("coupling and labels need one entry per mode")
        if not (self.discount > 0 and math.isfinite(self.discount)):
            raise ConfigError(f"discount must be positive, got {self.discount}")
        for i, (f, c) in enumerate(zip(self.generators, self.coupling)):
            if c not in COUPLINGS:
                raise ConfigError(f"mode {i + 1}: unknown coupling {c!r}")
            ys, zs = f.reads("y"), f.reads("z")
            if c == "state_only" and (ys or zs):
                raise ConfigError(f"mode {i + 1}: declared state_only but reads "
                                  f"{sorted('y%d' % j for j in ys) + sorted('z%d' % j for j in zs)}")
            if c == "own_component" and ys - {i + 1}:
                raise ConfigError(f"mode {i + 1}: declared own_component but reads "
                                  f"{sorted('y%d' % j for j in ys - {i + 1})}")
        for row in self.costs:
            for g in row:
                if g.reads("y") or g.reads("z"):
                    raise ConfigError(f"cost {g.source!r} may only depend on x")

    @classmethod
    def from_strings(cls, generators: Sequence[str], costs: Sequence[Sequence[str | float]],
                     discount: float, coupling: Sequence[str] | None = None,
                     labels: Sequence[str] | None = None, dim_state: int = 1,
                     dim_noise: int = 1) -> "SwitchingProblem":
        m = len(generators)
        limits = {"x": dim_state, "y": m, "z": dim_noise}
        gens = tuple(expr_mod.parse(g, limits) for g in generators)
        cst = tuple(tuple(expr_mod.parse(c, {"x": dim_state}) for c in row) for row in costs)
        if coupling is None:
            coupling = [_infer_coupling(f, i) for i, f in enumerate(gens)]
        if labels is None:
            labels = [f"mode{i + 1}" for i in range(m)]
        return cls(gens, cst, float(discount), tuple(coupling), tuple(labels), dim_state, dim_noise)

    @property
    def num_modes(self) -> int:
        return len(self.generators)

    @property
    def state_only(self) -> bool:
        return all(c == "state_only" for c in self.coupling)

    def generator(self, i: int, x: np.ndarray, y: np.ndarray | None = None,
                  z: np.ndarray | None = None) -> np.ndarray:
        x = np.atleast_2d(x)
        n = x.shape[0]
        if y is None:
            y = np.zeros((n, self.num_modes))
        if z is None:
            z = np.zeros((n, self.dim_noise))
        return self.generators[i](x, y, z)

    def cost_matrix(self, x: np.ndarray) -> np.ndarray:
        """``g_ij(x)`` stacked as (n, m, m)."""
        x = np.atleast_2d(x)
        m = self.num_modes
        out = np.empty((x.shape[0], m, m))
        for i in range(m):
            for j in range(m):
                out[:, i, j] = self.costs[i][j](x)
        return out

    def shifted(self, delta: float) -> "SwitchingProblem":
        """Same problem with every generator raised by ``delta``."""
        if delta == 0:
            return self
        gens = [f"({f.source}) + ({float(delta)!r})" for f in self.generators]
        return self._rebuild(generators=gens)

    def with_discount(self, r: float) -> "SwitchingProblem":
        return self._rebuild(discount=r)

    def with_cost_scale(self, scale: float) -> "SwitchingProblem":
        costs = [[f"({float(scale)!r}) * ({g.source})" for g in row] for row in self.costs]
        return self._rebuild(costs=costs)

    def _rebuild(self, generators=None, costs=None, discount=None) -> "SwitchingProblem":
        return SwitchingProblem.from_strings(
            generators if generators is not None else [f.source for f in self.generators],
            costs if costs is not None else [[g.source for g in row] for row in self.costs],
            self.discount if discount is None else discount,
            self.coupling, self.labels, self.dim_state, self.dim_noise)

    def describe(self) -> dict:
        return {"labels": list(self.labels), "generators": [f.source for f in self.generators],
                "coupling": list(self.coupling),
                "costs": [[g.source for g in row] for row in self.costs],
                "discount": self.discount}


def _infer_coupling(f: Expression, i: int) -> str:
    ys = f.reads("y")
    if not ys and not f.reads("z"):
        return "state_only"
    if ys <= {i + 1}:
        return "own_component"
    return "fully_coupled"


# ---------------------------------------------------------------------------
# Validation reports
# ---------------------------------------------------------------------------
HYPOTHESES = ("dynamics_regular", "generator_growth", "generator_lipschitz", "generator_monotone", "cost_sign", "non_free_loop", "cost_subharmonic", "discount")


@dataclass
class Verdict:
    status: str  # "pass" | "fail" | "indeterminate"
    witnesses: list[dict] = field(default_factory=list)
    detail: str = ""
    error: str | None = None

    def __post_init__(self):
        if self.status == "fail" and not self.witnesses:
            raise ValueError("a failed verdict needs at least one witness")

    def to_dict(self) -> dict:
        return {"status": self.status, "witnesses": self.witnesses, "detail": self.detail,
                "error": self.error}


@dataclass
class ValidationReport:
    verdicts: dict[str, Verdict] = field(default_factory=dict)
    lipschitz_C: float | None = None
    growth_gamma: float | None = None
    discount: float | None = None
    num_modes: int | None = None
    extras: dict = field(default_factory=dict)

    def merge(self, other: "ValidationReport") -> "ValidationReport":
        out = ValidationReport(dict(self.verdicts), self.lipschitz_C, self.growth_gamma,
                               self.discount, self.num_modes, dict(self.extras))
        out.verdicts.update(other.verdicts)
        for name in ("lipschitz_C", "growth_gamma", "discount", "num_modes"):
            if getattr(other, name) is not None:
                setattr(out, name, getattr(other, name))
        out.extras.update(other.extras)
        return out

    @property
    def passed(self) -> bool:
        return all(v.status != "fail" for v in self.verdicts.values())

    @property
    def failures(self) -> dict[str, Verdict]:
        return {k: v for k, v in self.verdicts.items() if v.status == "fail"}

    def raise_for_failures(self) -> None:
        for name, v in self.failures.items():
            cls = _ERRORS.get(v.error, ValidationFailed)
            raise cls(f"{name} failed: {v.detail}", report=self, hypothesis=name,
                      witnesses=v.witnesses)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "verdicts": {k: self.verdicts[k].to_dict() for k in sorted(self.verdicts)},
            "lipschitz_C": self.lipschitz_C,
            "growth_gamma": self.growth_gamma,
            "discount": self.discount,
            "num_modes": self.num_modes,
            **({"extras": self.extras} if self.extras else {}),
        }


_ERRORS = {cls.__name__: cls for cls in (NonFreeLoopViolation, NegativeCost, MonotonicityViolation,
                                          DiscountTooSmall)}


def _pt(x: np.ndarray) -> list[float]:
    return [float(v) for v in np.atleast_1d(x)]


def sample_cloud(bounds: Sequence[tuple[float, float]], points: np.ndarray | None = None,
                 oversample: int = 10, seed: int = 0) -> np.ndarray:
    """Base points plus a Latin-hypercube oversample of the box.

    The oversample has ``oversample * max(len(points), 10)`` members.
    """
    bounds = np.asarray(bounds, dtype=float).reshape(-1, 2)
    k = bounds.shape[0]
    base = np.empty((0, k)) if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    n = oversample * max(base.shape[0], 10)
    lhs = qmc.LatinHypercube(d=k, seed=seed).random(n)
    cloud = qmc.scale(lhs, bounds[:, 0], bounds[:, 1]) if k > 0 else lhs
    return np.vstack([base, cloud])


# ---------------------------------------------------------------------------
# switching costs
# ---------------------------------------------------------------------------
def simple_cycles(m: int) -> list[tuple[int, ...]]:
    """All simple directed cycles of the complete graph on ``m`` modes.

    Each cycle is returned once, rotated to start at its smallest mode and
    closed, e.g. ``(0, 2, 1, 0)``.
    """
    cycles = []
    for size in range(2, m + 1):
        for subset in itertools.combinations(range(m), size):
            head, rest = subset[0], subset[1:]
            for perm in itertools.permutations(rest):
                cycles.append((head, *perm, head))
    return cycles


def _random_cycles(m: int, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    out = set()
    while len(out) < count:
        size = int(rng.integers(2, m + 1))
        nodes = rng.choice(m, size=size, replace=False)
        k = int(np.argmin(nodes))
        nodes = np.roll(nodes, -k)
        out.add((*map(int, nodes), int(nodes[0])))
    return sorted(out)


def validate_switching_costs(problem: SwitchingProblem, sample_points: np.ndarray, *,
                             strict: bool = True, allow_sampled_cycles: bool = False,
                             seed: int = 0, max_witnesses: int = 10) -> ValidationReport:
    """Check ``g_ii = 0``, ``g_ij >= 0`` and the non-free-loop condition.

    Every simple cycle is enumerated for ``m <= 8``.  Beyond that the call
    raises :class:`TooManyModes` unless ``allow_sampled_cycles`` is set, in
    which case a random subset of cycles is checked and a warning issued.
    """
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if pts.size == 0 or not np.all(np.isfinite(pts)):
        raise ValueError("sample_points must be nonempty and finite")
    m = problem.num_modes
    G = problem.cost_matrix(pts)
    report = ValidationReport(num_modes=m, discount=problem.discount)

    # sign and zero diagonal
    witnesses = []
    for i in range(m):
        bad = np.flatnonzero(G[:, i, i] != 0.0)
        for p in bad[:max_witnesses]:
            witnesses.append({"pair": [i + 1, i + 1], "x": _pt(pts[p]), "cost": float(G[p, i, i])})
    neg = np.argwhere(G < 0)
    for p, i, j in neg[:max_witnesses]:
        witnesses.append({"pair": [int(i) + 1, int(j) + 1], "x": _pt(pts[p]), "cost": float(G[p, i, j])})
    nonfinite = np.argwhere(~np.isfinite(G))
    for p, i, j in nonfinite[:max_witnesses]:
        witnesses.append({"pair": [int(i) + 1, int(j) + 1], "x": _pt(pts[p]), "cost": float(G[p, i, j])})
    if witnesses:
        report.verdicts["cost_sign"] = Verdict("fail", witnesses[:max_witnesses],
                                           "switching costs must be finite, nonnegative, zero on the diagonal",
                                           "NegativeCost")
    else:
        report.verdicts["cost_sign"] = Verdict("pass", detail=f"{pts.shape[0]} points")

    # non-free loop
    if m == 1:
        report.verdicts["non_free_loop"] = Verdict("pass", detail="single mode: no cycles")
    else:
        if m > MAX_EXACT_MODES:
            if not allow_sampled_cycles:
                raise TooManyModes(f"exact cycle enumeration supports at most {MAX_EXACT_MODES} modes, got {m}")
            warnings.warn(f"{m} modes: non-free-loop condition checked on sampled cycles only", stacklevel=2)
            cycles = _random_cycles(m, 20000, np.random.default_rng(seed))
        else:
            cycles = simple_cycles(m)
        loop_w = []
        worst = math.inf
        for cyc in cycles:
            total = np.zeros(pts.shape[0])
            for a, b in zip(cyc[:-1], cyc[1:]):
                total += G[:, a, b]
            lo = float(total.min())
            worst = min(worst, lo)
            if not lo > 0:
                p = int(np.argmin(total))
                if len(loop_w) < max_witnesses:
                    loop_w.append({"cycle": [c + 1 for c in cyc], "x": _pt(pts[p]), "cycle_cost": lo})
        report.extras["min_cycle_cost"] = worst
        report.extras["cycles_checked"] = len(cycles)
        if loop_w:
            report.verdicts["non_free_loop"] = Verdict("fail", loop_w, "a switching cycle has zero total cost",
                                                "NonFreeLoopViolation")
        else:
            report.verdicts["non_free_loop"] = Verdict("pass", detail=f"{len(cycles)} cycles, min cost {worst:.6g}")
    if strict:
        report.raise_for_failures()
    return report


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------
def _yz_samples(problem: SwitchingProblem, n: int, rng: np.random.Generator, scale: float = 10.0):
    y = rng.normal(0.0, scale, size=(n, problem.num_modes))
    z = rng.normal(0.0, scale, size=(n, problem.dim_noise))
    y[: max(1, n // 10)] = 0.0
    z[: max(1, n // 10)] = 0.0
    return y, z


def probe_monotonicity(problem: SwitchingProblem, sample_points: np.ndarray, probe_step: float = 1e-3,
                       *, seed: int = 0, strict: bool = True, max_witnesses: int = 10) -> ValidationReport:
    """Finite-difference probe that ``f_i`` is nondecreasing in each ``y_j``, j != i."""
    if not probe_step > 0:
        raise ValueError("probe_step must be positive")
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    rng = np.random.default_rng(seed)
    y, z = _yz_samples(problem, pts.shape[0], rng)
    witnesses = []
    skipped = []
    for i, f in enumerate(problem.generators):
        if problem.coupling[i] == "state_only":
            skipped.append(i + 1)
            continue
        base = f(pts, y, z)
        for j in range(problem.num_modes):
            if j == i or (j + 1) not in f.reads("y"):
                continue
            yp = y.copy()
            yp[:, j] += probe_step
            slope = (f(pts, yp, z) - base) / probe_step
            tol = -MONO_TOL * (1.0 + np.abs(base))
            bad = np.flatnonzero(~(slope >= tol))
            for p in bad[: max(0, max_witnesses - len(witnesses))]:
                witnesses.append({"mode": i + 1, "wrt": f"y{j + 1}", "x": _pt(pts[p]),
                                  "y": _pt(y[p]), "z": _pt(z[p]), "slope": float(slope[p])})
    report = ValidationReport(num_modes=problem.num_modes)
    if witnesses:
        report.verdicts["generator_monotone"] = Verdict("fail", witnesses,
                                             "generator decreasing in another mode's value",
                                             "MonotonicityViolation")
    else:
        note = f"state_only modes skipped: {skipped}" if skipped else "all probes nonnegative"
        report.verdicts["generator_monotone"] = Verdict("pass", detail=note)
    if strict:
        report.raise_for_failures()
    return report


def estimate_lipschitz(problem: SwitchingProblem, sample_points: np.ndarray, seed: int = 0) -> tuple[float, dict | None]:
    """Largest sampled ratio ``|f(x,y,z) - f(x,y',z')| / (|y-y'| + |z-z'|)``."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    rng = np.random.default_rng(seed)
    n = pts.shape[0]
    best, where = 0.0, None
    for i, f in enumerate(problem.generators):
        if problem.coupling[i] == "state_only":
            continue
        y, z = _yz_samples(problem, n, rng)
        for step in (1e-3, 1.0, 10.0):
            dy = rng.normal(0.0, step, size=y.shape)
            dz = rng.normal(0.0, step, size=z.shape)
            dist = np.abs(dy).sum(axis=1) + np.abs(dz).sum(axis=1)
            with np.errstate(all="ignore"):
                ratio = np.abs(f(pts, y + dy, z + dz) - f(pts, y, z)) / dist
            ratio = np.where(np.isnan(ratio), np.inf, ratio)
            p = int(np.argmax(ratio))
            if ratio[p] > best:
                best = float(ratio[p])
                where = {"mode": i + 1, "x": _pt(pts[p]), "y": _pt(y[p]), "z": _pt(z[p])}
    return best, where


def estimate_growth_exponent(problem: SwitchingProblem, n_directions: int = 64,
                             seed: int = 0) -> tuple[float, dict | None]:
    """Polynomial growth exponent of ``x -> max_i |f_i(x, 0, ..., 0)|``.

    Measured as the log-slope between radii 1e3 and 1e6 along random
    directions; values within 0.05 of an integer snap to it.
    """
    k = problem.dim_state
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_directions, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    if k == 1:
        dirs = np.array([[1.0], [-1.0]])
    r1, r2 = 1e3, 1e6
    worst, where = 0.0, None
    for i in range(problem.num_modes):
        with np.errstate(all="ignore"):
            a = np.abs(problem.generator(i, r1 * dirs))
            b = np.abs(problem.generator(i, r2 * dirs))
            slope = np.log((1.0 + b) / (1.0 + a)) / math.log(r2 / r1)
        slope = np.where(np.isfinite(slope), slope, np.inf)
        p = int(np.argmax(slope))
        if slope[p] > worst:
            worst = float(slope[p])
            where = {"mode": i + 1, "x": _pt(r2 * dirs[p])}
    if math.isfinite(worst):
        worst = max(worst, 0.0)
        if abs(worst - round(worst)) < 0.05:
            worst = float(round(worst))
        else:
            worst = round(worst, 2)
    return worst, where


def validate_generators(problem: SwitchingProblem, sample_points: np.ndarray, *, seed: int = 0,
                        max_lipschitz: float = 1e6, max_gamma: float = 20.0) -> ValidationReport:
    """Verdicts for polynomial growth and Lipschitz continuity of the generators."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    report = ValidationReport(num_modes=problem.num_modes)
    gamma, gw = estimate_growth_exponent(problem, seed=seed)
    vals = np.stack([problem.generator(i, pts) for i in range(problem.num_modes)])
    bad = np.argwhere(~np.isfinite(vals))
    if bad.size:
        i, p = bad[0]
        report.verdicts["generator_growth"] = Verdict("fail", [{"mode": int(i) + 1, "x": _pt(pts[p])}],
                                           "f_i(x, 0, ..., 0) not finite")
    elif not gamma <= max_gamma:
        report.verdicts["generator_growth"] = Verdict("fail", [gw], f"growth exponent {gamma} is not polynomial")
    else:
        report.verdicts["generator_growth"] = Verdict("pass", detail=f"gamma = {gamma}")
    report.growth_gamma = gamma if math.isfinite(gamma) else None

    C, cw = estimate_lipschitz(problem, pts, seed=seed)
    if C <= max_lipschitz:
        report.verdicts["generator_lipschitz"] = Verdict("pass", detail=f"C = {C:.6g}")
        report.lipschitz_C = C
    else:
        report.verdicts["generator_lipschitz"] = Verdict("fail", [cw], f"sampled Lipschitz ratio {C:.3g} unbounded")
    return report


def validate_diffusion(diffusion: DiffusionSpec, sample_points: np.ndarray,
                       seed: int = 0) -> ValidationReport:
    """Lipschitz and linear growth of ``b`` and ``sigma``.

    Parametric families pass by construction (their constants are stored on the DiffusionSpec);
    custom coefficients are probed on nearby point pairs and at large radii.
    """
    report = ValidationReport()
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    b, s = diffusion.drift(pts), diffusion.diffusion(pts)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
        p = int(np.flatnonzero(~(np.isfinite(b).all(axis=1) & np.isfinite(s).all(axis=(1, 2))))[0])
        report.verdicts["dynamics_regular"] = Verdict("fail", [{"x": _pt(pts[p])}], "coefficients not finite")
        return report
    if diffusion.family != "custom":
        report.verdicts["dynamics_regular"] = Verdict(
            "pass", detail=f"L_b={diffusion.lipschitz_drift:.6g}, L_sigma={diffusion.lipschitz_diffusion:.6g}, "
                           f"growth={diffusion.growth_constant:.6g}")
        return report
    rng = np.random.default_rng(seed)
    k = diffusion.dim_state
    dx = rng.normal(0.0, 1e-4, size=pts.shape)
    num = (np.linalg.norm(diffusion.drift(pts + dx) - b, axis=1)
           + np.linalg.norm((diffusion.diffusion(pts + dx) - s).reshape(len(pts), -1), axis=1))
    lip = num / np.linalg.norm(dx, axis=1)
    dirs = rng.normal(size=(32, k))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)

    def growth(R):
        x = R * dirs
        with np.errstate(all="ignore"):
            g = (np.linalg.norm(diffusion.drift(x), axis=1)
                 + np.linalg.norm(diffusion.diffusion(x).reshape(len(x), -1), axis=1)) / (1.0 + R)
        return np.where(np.isfinite(g), g, np.inf)

    g_small, g_big = growth(1e2), growth(1e5)
    excess = g_big > 10.0 * (g_small + 1.0)
    if np.any(excess):
        p = int(np.argmax(excess))
        report.verdicts["dynamics_regular"] = Verdict("fail", [{"x": _pt(1e5 * dirs[p]), "growth_ratio": float(g_big[p])}],
                                        "coefficients grow faster than linearly")
    else:
        report.verdicts["dynamics_regular"] = Verdict("pass", detail=f"sampled L ~ {float(np.max(lip)):.6g}")
    report.extras["sampled_lipschitz_diffusion"] = float(np.max(lip))
    return report


# ---------------------------------------------------------------------------
# discounting
# ---------------------------------------------------------------------------
def validate_discount(problem: SwitchingProblem, diffusion: DiffusionSpec, T: float, n_paths: int,
                      seed: int, *, x0: Sequence[float] | None = None, n_steps: int = 400,
                      gamma: float | None = None, strict: bool = True) -> ValidationReport:
    """Empirical integrability of discounted payoffs along simulated paths.

    For each mode the profile ``t -> exp(-r t) mean |f_i(X_t, 0, ..., 0)|`` is
    measured at ``T/4, T/2, 3T/4, T``; it passes when the tail decreases and
    the last value is at most half the first.  Parametric families also need
    the closed-form moment growth rate at the generators' growth exponent to
    be below ``r``.
    """
    from .sde import simulate_paths

    if not T > 0:
        raise ValueError("T must be positive")
    if n_paths < 100:
        raise ValueError("validate_discount needs at least 100 paths")
    k = diffusion.dim_state
    if x0 is None:
        x0 = np.ones(k) if diffusion.family == "geometric" else np.zeros(k)
    r = problem.discount
    dt = T / n_steps
    batch = simulate_paths(diffusion, x0, dt, T, n_paths, seed)
    checkpoints = [n_steps // 4, n_steps // 2, (3 * n_steps) // 4, n_steps]
    witnesses = []
    profiles = {}
    for i in range(problem.num_modes):
        prof = []
        for j in checkpoints:
            vals = np.abs(problem.generator(i, batch.states[:, j, :]))
            prof.append(math.exp(-r * batch.times[j]) * float(np.mean(vals)))
        profiles[problem.labels[i]] = prof
        scale = max(abs(p) for p in prof)
        if scale == 0.0:
            continue
        ok = prof[-1] <= prof[-2] and prof[-1] <= 0.5 * prof[0]
        if not (ok and all(math.isfinite(p) for p in prof)):
            witnesses.append({"mode": i + 1, "x0": _pt(x0), "times": [float(batch.times[j]) for j in checkpoints],
                              "profile": prof})
    report = ValidationReport(discount=r)
    report.extras["decay_profiles"] = profiles
    if gamma is None:
        gamma, _ = estimate_growth_exponent(problem, seed=seed)
    rate = diffusion.moment_growth_rate(max(gamma, 0.0)) if math.isfinite(gamma) else None
    if rate is not None:
        report.extras["moment_growth_rate"] = rate
        if not rate < r:
            witnesses.append({"x0": _pt(x0), "moment_growth_rate": rate, "discount": r, "q": gamma})
    if witnesses:
        report.verdicts["discount"] = Verdict("fail", witnesses, "discounted payoffs do not decay", "DiscountTooSmall")
    else:
        report.verdicts["discount"] = Verdict("pass", detail="discounted payoff profile decays")
    if strict:
        report.raise_for_failures()
    return report


def validate_problem(problem: SwitchingProblem, diffusion: DiffusionSpec, sample_points: np.ndarray, *,
                     bounds: Sequence[tuple[float, float]] | None = None, probe_step: float = 1e-3,
                     T: float | None = None, n_paths: int = 1000, seed: int = 0,
                     x0: Sequence[float] | None = None) -> ValidationReport:
    """Run every hypothesis check and return the merged (non-raising) report."""
    pts = np.atleast_2d(np.asarray(sample_points, dtype=float))
    if bounds is not None:
        pts = sample_cloud(bounds, pts, seed=seed)
    report = validate_diffusion(diffusion, pts, seed=seed)
    report = report.merge(validate_generators(problem, pts, seed=seed))
    report = report.merge(validate_switching_costs(problem, pts, strict=False, seed=seed))
    report = report.merge(probe_monotonicity(problem, pts, probe_step, seed=seed, strict=False))
    if T is None:
        T = 8.0 / problem.discount
    report = report.merge(validate_discount(problem, diffusion, T, n_paths, seed, x0=x0,
                                            gamma=report.growth_gamma, strict=False))
    report.verdicts.setdefault("cost_subharmonic", Verdict("indeterminate",
                                                  detail="needs a discrete operator; see grid.check_cost_subharmonicity"))
    report.discount = problem.discount
    report.num_modes = problem.num_modes
    if report.lipschitz_C is not None and problem.discount <= problem.num_modes * report.lipschitz_C:
        report.extras["note"] = (f"r = {problem.discount} <= m * C = {problem.num_modes * report.lipschitz_C:.4g}; "
                                 "sufficient condition for the comparison argument not met")
    return report

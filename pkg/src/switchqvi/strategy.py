"""Switching policies read off a value field, and their Monte Carlo values.

The state process is not affected by the operating mode, so several
policies started from the same point are evaluated on one shared set of
paths (common random numbers).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CoupledGeneratorUnsupported, MaxSwitchesExceeded
from .grid import Grid
from .model import DiffusionSpec, SwitchingProblem
from .qvi import ValueField
from .sde import EXPLOSION, gaussian_increments

STAY = -1


@dataclass(frozen=True)
class SwitchingPolicy:
    """``decision[i, node]`` is ``STAY`` or the 0-based target mode."""

    decision: np.ndarray
    grid: Grid
    eps_bind: float
    source_hash: str
    name: str = "extracted"

    def __post_init__(self):
        m = self.decision.shape[0]
        rows = np.arange(m)[:, None]
        if np.any(self.decision == rows):
            raise ValueError("a mode cannot switch to itself")
        if np.any((self.decision < STAY) | (self.decision >= m)):
            raise ValueError("decision entries must be STAY or a valid mode")

    @property
    def num_modes(self) -> int:
        return self.decision.shape[0]

    def labels(self) -> np.ndarray:
        """Human-readable decisions with 1-based targets."""
        return np.where(self.decision == STAY, "stay",
                        np.char.add("switch_to(", np.char.add((self.decision + 1).astype(str), ")")))


def _field_hash(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype="<f8").tobytes()).hexdigest()[:16]


def _best_target(values: np.ndarray, costs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per (mode, node): best ``v_j - g_ij`` over j != i and its lowest-index argmax."""
    m, N = values.shape
    best = np.full((m, N), -np.inf)
    arg = np.full((m, N), STAY, dtype=np.int64)
    for i in range(m):
        for j in range(m):
            if j == i:
                continue
            cand = values[j] - costs[:, i, j]
            better = cand > best[i]
            best[i] = np.where(better, cand, best[i])
            arg[i] = np.where(better, j, arg[i])
    return best, arg


def extract_policy(field: ValueField, problem: SwitchingProblem, grid: Grid,
                   eps_bind: float = 1e-7) -> SwitchingPolicy:
    """Switch where the obstacle binds (within ``eps_bind``), otherwise stay."""
    V = field.values
    best, arg = _best_target(V, problem.cost_matrix(grid.nodes))
    switch = V <= best + eps_bind
    decision = np.where(switch, arg, STAY)
    return SwitchingPolicy(decision, grid, float(eps_bind), _field_hash(V))


def never_switch_policy(grid: Grid, m: int) -> SwitchingPolicy:
    return SwitchingPolicy(np.full((m, grid.n_nodes), STAY, dtype=np.int64), grid, 0.0, "", "never_switch")


def greedy_policy(field: ValueField, grid: Grid) -> SwitchingPolicy:
    """Jump to the highest-value mode whenever it is not the current one, ignoring costs."""
    V = field.values
    m = V.shape[0]
    top = np.argmax(V, axis=0)
    decision = np.where(np.arange(m)[:, None] == top[None, :], STAY, np.broadcast_to(top, V.shape))
    return SwitchingPolicy(decision.astype(np.int64), grid, 0.0, _field_hash(V), "greedy_ignore_costs")


@dataclass(frozen=True)
class MCSettings:
    dt: float = 0.01
    T: float | None = None
    n_paths: int = 10_000
    seed: int = 0
    max_switches: int = 1000
    tail_target: float = 1e-4
    log_paths: int = 0

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class StrategyValueEstimate:
    estimate: float
    std_error: float
    n_paths: int
    T: float
    tail_bound: float
    settings_hash: str
    policy: str = ""
    mean_switches: float = 0.0
    clamped_fraction: float = 0.0
    boundary_contaminated: bool = False
    switch_log: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("switch_log")
        return d


def tail_cap(problem: SwitchingProblem, x0: np.ndarray, gamma: float = 1.0) -> float:
    """``(1 + |x0|^gamma) * scale`` with ``scale = (1 + max_i |f_i(x0)|) / r``."""
    x0 = np.atleast_2d(x0)
    fmax = max(float(np.abs(problem.generator(i, x0))[0]) for i in range(problem.num_modes))
    scale = (1.0 + fmax) / problem.discount
    return (1.0 + float(np.linalg.norm(x0)) ** gamma) * scale


def default_horizon(problem: SwitchingProblem, x0, gamma: float = 1.0, target: float = 1e-4) -> float:
    return max(math.log(tail_cap(problem, x0, gamma) / target) / problem.discount, 1.0)


def evaluate_policies(policies: Sequence[SwitchingPolicy], problem: SwitchingProblem,
                      diffusion: DiffusionSpec, x0, mode0: int, mc: MCSettings,
                      gamma: float = 1.0) -> list[StrategyValueEstimate]:
    """Value every policy on one shared set of Euler paths started at ``(x0, mode0)``.

    Profits are accumulated with the state frozen over each step and the
    discount integrated exactly; switches are paid at the start of the step
    at the grid node nearest to the current state.
    """
    if not problem.state_only:
        bad = [problem.labels[i] for i, c in enumerate(problem.coupling) if c != "state_only"]
        raise CoupledGeneratorUnsupported(
            f"strategy values are path functionals only for state_only generators; coupled modes: {bad}")
    m = problem.num_modes
    if not 0 <= mode0 < m:
        raise ValueError(f"mode0 must be in 0..{m - 1}")
    k, d = diffusion.dim_state, diffusion.dim_noise
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (k,)).copy()
    r = problem.discount
    T = mc.T if mc.T is not None else default_horizon(problem, x0, gamma, mc.tail_target)
    n_steps = max(1, int(math.ceil(T / mc.dt - 1e-9)))
    dt = mc.dt
    n = mc.n_paths
    P = len(policies)
    grid = policies[0].grid

    X = np.tile(x0, (n, 1))
    mode = np.full((P, n), mode0, dtype=np.int64)
    J = np.zeros((P, n))
    switches = np.zeros((P, n), dtype=np.int64)
    clamped = 0
    logs: list[list] = [[] for _ in range(P)]
    N = grid.n_nodes
    flat = [np.ascontiguousarray(p.decision).ravel() for p in policies]
    rows = np.arange(n)
    scalar = k == 1 and d == 1

    for j in range(n_steps):
        t = j * dt
        disc = math.exp(-r * t)
        weight = (math.exp(-r * t) - math.exp(-r * (t + dt))) / r
        node, outside = grid.nearest(X)
        clamped += int(outside.sum())
        f_all = np.stack([problem.generator(i, X) for i in range(m)])
        for pi in range(P):
            md = mode[pi]
            for _ in range(m - 1):
                target = flat[pi].take(md * N + node)
                sw = np.flatnonzero(target != STAY)
                if sw.size == 0:
                    break
                src, dst = md[sw], target[sw]
                cost = np.empty(sw.size)
                for a in range(m):
                    for b in range(m):
                        sel = (src == a) & (dst == b)
                        if np.any(sel):
                            cost[sel] = problem.costs[a][b](X[sw[sel]])
                J[pi, sw] -= disc * cost
                if len(logs[pi]) < 100_000:
                    for p_, a, b, c in zip(sw, src, dst, cost):
                        if p_ < mc.log_paths:
                            logs[pi].append((int(p_), t, int(a) + 1, int(b) + 1, float(c)))
                md[sw] = dst
                switches[pi, sw] += 1
            if switches[pi].max() > mc.max_switches:
                p_ = int(np.argmax(switches[pi]))
                raise MaxSwitchesExceeded(
                    f"path {p_} exceeded {mc.max_switches} switches under policy '{policies[pi].name}'",
                    path=p_, t=t)
            if m == 2:
                J[pi] += weight * np.where(md == 1, f_all[1], f_all[0])
            else:
                J[pi] += weight * f_all[md, rows]
        dB = gaussian_increments(mc.seed, j, n, d, dt)
        if scalar:
            X = X + diffusion.drift(X) * dt + diffusion.diffusion(X)[:, :, 0] * dB
        else:
            X = X + diffusion.drift(X) * dt + np.einsum("nkd,nd->nk", diffusion.diffusion(X), dB)
        if not np.all(np.abs(X) <= EXPLOSION):
            raise FloatingPointError("state exploded during strategy evaluation")

    cap = tail_cap(problem, x0, gamma)
    tail = math.exp(-r * n_steps * dt) * cap
    frac = clamped / float(n * n_steps)
    out = []
    for pi, pol in enumerate(policies):
        est = float(J[pi].mean())
        se = float(J[pi].std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        out.append(StrategyValueEstimate(est, se, n, n_steps * dt, tail, mc.hash(), pol.name,
                                         float(switches[pi].mean()), frac, frac > 0.01, logs[pi]))
    return out


def evaluate_strategy(policy: SwitchingPolicy, problem: SwitchingProblem, diffusion: DiffusionSpec,
                      x0, mode0: int, mc: MCSettings, gamma: float = 1.0) -> StrategyValueEstimate:
    return evaluate_policies([policy], problem, diffusion, x0, mode0, mc, gamma)[0]


def feynman_kac_check(field: ValueField, problem: SwitchingProblem, diffusion: DiffusionSpec, grid: Grid,
                      test_points: Sequence[tuple[Sequence[float], int]], mc: MCSettings, *,
                      eps_disc: float = 0.0, eps_bind: float = 1e-7, gamma: float = 1.0) -> dict:
    """Compare PDE values with simulated strategy values at ``(x0, mode)`` test points.

    A point passes when ``|v - J*| <= 3 SE + eps_disc + tail`` and each perturbed
    policy (never switch; greedy ignoring costs) satisfies
    ``J_sub <= J* + 2 SE_combined``.  ``tail`` is the discarded-horizon
    bound of the estimate.  Modes in ``test_points`` are 0-based.
    """
    policy = extract_policy(field, problem, grid, eps_bind)
    perturbed = [never_switch_policy(grid, problem.num_modes), greedy_policy(field, grid)]
    entries = []
    for x0, mode in test_points:
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        v = float(field.at(x0[None, :])[mode, 0])
        star, *subs = evaluate_policies([policy, *perturbed], problem, diffusion, x0, mode, mc, gamma)
        gap = abs(v - star.estimate)
        allowance = 3 * star.std_error + eps_disc + star.tail_bound
        ok_value = gap <= allowance
        sub_entries, ok_sub = [], True
        for s in subs:
            se_c = math.sqrt(star.std_error ** 2 + s.std_error ** 2)
            ok = s.estimate <= star.estimate + 2 * se_c
            ok_sub &= ok
            sub_entries.append({"policy": s.policy, "J": s.estimate, "se": s.std_error, "ok": ok})
        entries.append({
            "x0": x0.tolist(), "mode": mode + 1, "v": v, "J_hat": star.estimate, "se": star.std_error,
            "abs_gap": gap, "allowance": allowance,
            "J_sub": sub_entries, "mean_switches": star.mean_switches,
            "boundary_contaminated": star.boundary_contaminated, "T": star.T,
            "tail_bound": star.tail_bound,
            "verdict": "pass" if (ok_value and ok_sub) else "fail",
            "switch_log": star.switch_log,
        })
    return {"passed": all(e["verdict"] == "pass" for e in entries), "eps_disc": eps_disc,
            "eps_bind": eps_bind, "settings_hash": mc.hash(), "policy_source": policy.source_hash,
            "entries": entries}


def write_switch_log(entries: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t", "from", "to", "cost"])
        for e in entries:
            for p, t, a, b, c in e.get("switch_log", []):
                w.writerow([p, repr(float(t)), a, b, repr(float(c))])

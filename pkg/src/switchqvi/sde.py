"""Euler-Maruyama simulation of the state diffusion.

Noise is counter-based: the Gaussian increment of path ``p``, component
``l`` at step ``j`` is normal number ``p*d + l`` of a Philox stream keyed by
``(seed, j)``.  Streams are consumed in order, so a path never depends on
how many other paths are simulated alongside it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import CheckpointOffGrid, NonFiniteState
from .model import DiffusionSpec

EXPLOSION = 1e12


def gaussian_increments(seed: int, step: int, n_paths: int, dim: int, dt: float) -> np.ndarray:
    """``N(0, dt I)`` increments for one time step, shape (n_paths, dim)."""
    key = ((int(seed) & 0xFFFFFFFFFFFFFFFF) << 64) | (int(step) & 0xFFFFFFFFFFFFFFFF)
    gen = np.random.Generator(np.random.Philox(key=key))
    return (math.sqrt(dt) * gen.standard_normal(n_paths * dim)).reshape(n_paths, dim)


def euler_step(diffusion: DiffusionSpec, x: np.ndarray, dt: float, dB: np.ndarray) -> np.ndarray:
    return x + diffusion.drift(x) * dt + np.einsum("nkd,nd->nk", diffusion.diffusion(x), dB)


@dataclass(frozen=True)
class PathBatch:
    n_paths: int
    n_steps: int
    dt: float
    times: np.ndarray
    states: np.ndarray  # (n_paths, n_steps + 1, k)
    seed: int
    x0: tuple[float, ...]

    def step_index(self, t: float) -> int:
        j = int(round(t / self.dt))
        if j < 0 or j > self.n_steps or not math.isclose(j * self.dt, t, rel_tol=1e-9, abs_tol=1e-12):
            raise CheckpointOffGrid(f"t = {t} is not on the step grid (dt = {self.dt})", t=t)
        return j

    def at(self, t: float) -> np.ndarray:
        return self.states[:, self.step_index(t), :]

    def to_csv(self, path: str | Path) -> None:
        k = self.states.shape[2]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "step", "t"] + [f"x{a + 1}" for a in range(k)])
            for p in range(self.n_paths):
                for j in range(self.n_steps + 1):
                    w.writerow([p, j, repr(float(self.times[j]))]
                               + [repr(float(v)) for v in self.states[p, j]])


def simulate_paths(diffusion: DiffusionSpec, x0: Sequence[float] | float, dt: float, T: float,
                   n_paths: int, seed: int) -> PathBatch:
    """Simulate ``n_paths`` Euler-Maruyama paths on ``[0, T]`` with step ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T >= dt:
        raise ValueError("T must be at least dt")
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    k, d = diffusion.dim_state, diffusion.dim_noise
    x0 = np.broadcast_to(np.asarray(x0, dtype=float), (k,)).copy()
    n_steps = int(math.ceil(T / dt - 1e-9))
    states = np.empty((n_paths, n_steps + 1, k))
    x = np.tile(x0, (n_paths, 1))
    states[:, 0] = x
    for j in range(n_steps):
        dB = gaussian_increments(seed, j, n_paths, d, dt)
        with np.errstate(all="ignore"):
            x = euler_step(diffusion, x, dt, dB)
        bad = ~np.all(np.abs(x) <= EXPLOSION, axis=1)
        if np.any(bad):
            p = int(np.flatnonzero(bad)[0])
            raise NonFiniteState(f"path {p} left |x| <= {EXPLOSION:g} at step {j + 1}", path=p, step=j + 1)
        states[:, j + 1] = x
    times = np.arange(n_steps + 1) * dt
    return PathBatch(n_paths, n_steps, dt, times, states, int(seed), tuple(float(v) for v in x0))


@dataclass(frozen=True)
class MomentReport:
    q: int
    t: float
    mean: float
    ci_low: float
    ci_high: float
    reference: float | None
    passed: bool | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def moment_check(batch: PathBatch, q: int, t: float, reference: float | None = None, *,
                 confidence: float = 0.99, bias_allowance: float = 0.05, n_resamples: int = 2000,
                 seed: int = 0) -> MomentReport:
    """Empirical ``E|X_t|^q`` with a percentile-bootstrap interval.

    With a ``reference`` the check passes iff it lies in the interval widened
    on both sides by ``bias_allowance * |reference|`` (Euler bias budget).
    """
    if q not in (2, 4):
        raise ValueError("q must be 2 or 4")
    xt = batch.at(t)
    vals = np.linalg.norm(xt, axis=1) ** q
    mean = float(vals.mean())
    if np.ptp(vals) == 0.0:
        lo = hi = mean
    else:
        res = stats.bootstrap((vals,), np.mean, confidence_level=confidence, n_resamples=n_resamples,
                              method="percentile", random_state=np.random.default_rng(seed))
        lo, hi = float(res.confidence_interval.low), float(res.confidence_interval.high)
    passed = None
    if reference is not None:
        slack = bias_allowance * abs(reference)
        passed = bool(lo - slack <= reference <= hi + slack)
    return MomentReport(q, float(t), mean, lo, hi, reference, passed)

"""Truncated meshes and the monotone finite-difference generator.

The generator ``L = 1/2 tr(sigma sigma^T D^2) + b . D`` is assembled as a
sum of nonnegative-weight differences ``c * (v[nb] - v[center])``:

* axis second differences with the diagonal diffusion left over after the
  cross term is carved out,
* one directional second difference along ``(p, +-q)`` carrying the whole
  cross term (``(1, 1)`` is the classical 7-point arrangement; wider
  directions are tried when the diffusion is not diagonally dominant),
* upwind first differences on the sign of each drift component.

Because every weight is nonnegative the assembled matrix has nonnegative
off-diagonals and zero row sums, so ``r I - L_h`` is an M-matrix for r > 0.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BadBounds, DimensionUnsupported, MonotonicityUnachievable
from .model import DiffusionSpec, SwitchingProblem

BOUNDARY_POLICIES = ("neumann_zero", "dirichlet_envelope")
CROSS_CATALOG = ((1, 1), (2, 1), (1, 2), (3, 1), (1, 3), (3, 2), (2, 3))


@dataclass(frozen=True)
class Grid:
    bounds: tuple[tuple[float, float], ...]
    n_cells: tuple[int, ...]
    boundary: str = "neumann_zero"

    @property
    def dim(self) -> int:
        return len(self.n_cells)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(n + 1 for n in self.n_cells)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def h(self) -> np.ndarray:
        return np.array([(hi - lo) / n for (lo, hi), n in zip(self.bounds, self.n_cells)])

    @property
    def axes(self) -> list[np.ndarray]:
        out = []
        for (lo, hi), n in zip(self.bounds, self.n_cells):
            ax = lo + (hi - lo) * np.arange(n + 1) / n
            ax[-1] = hi   # rounding can push the last node past the wall
            out.append(ax)
        return out

    @property
    def nodes(self) -> np.ndarray:
        """Node coordinates, (n_nodes, k), lexicographic with the last axis fastest."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def multi_index(self) -> np.ndarray:
        mesh = np.meshgrid(*[np.arange(s) for s in self.shape], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def flat_index(self, multi: np.ndarray) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.asarray(multi).T), self.shape)

    @property
    def boundary_mask(self) -> np.ndarray:
        mi = self.multi_index
        return np.any((mi == 0) | (mi == np.array(self.n_cells)), axis=1)

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def contains(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        return np.all((x >= lo) & (x <= hi), axis=1)

    def nearest(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest node index for each point, plus a flag for points outside the box."""
        x = np.atleast_2d(x)
        lo = np.array([b[0] for b in self.bounds])
        idx = np.rint((x - lo) / self.h).astype(np.int64)
        clamped = np.clip(idx, 0, np.array(self.n_cells))
        outside = ~self.contains(x)
        return self.flat_index(clamped), outside

    def interpolate(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node values at points ``x`` (clamped to the box)."""
        from scipy.interpolate import RegularGridInterpolator

        x = np.atleast_2d(np.asarray(x, dtype=float))
        lo = np.array([b[0] for b in self.bounds])
        hi = np.array([b[1] for b in self.bounds])
        interp = RegularGridInterpolator(self.axes, np.asarray(values).reshape(self.shape))
        return interp(np.clip(x, lo, hi))

    def restriction_from(self, fine: "Grid") -> np.ndarray:
        """Indices into ``fine`` nodes that coincide with this grid's nodes."""
        ratios = []
        for nc, nf in zip(self.n_cells, fine.n_cells):
            if nf % nc:
                raise ValueError("fine grid is not a refinement of this grid")
            ratios.append(nf // nc)
        if fine.bounds != self.bounds:
            raise ValueError("grids cover different boxes")
        return fine.flat_index(self.multi_index * np.array(ratios))

    def refined(self, factor: int) -> "Grid":
        return Grid(self.bounds, tuple(n * factor for n in self.n_cells), self.boundary)

    def padded(self, factor: float, support: Sequence[tuple[float, float]] | None = None,
               max_nodes: int = 200_000) -> "Grid":
        """Larger box used for boundary data; Neumann walls, same spacing when affordable.

        Each side is pushed out by ``factor`` box widths (clipped to the
        diffusion's support).  The spacing is kept when the node budget allows
        so original nodes coincide with padded ones; otherwise the padded grid
        is coarsened uniformly.
        """
        h = self.h
        bounds, cells = [], []
        for a, ((lo, hi), n) in enumerate(zip(self.bounds, self.n_cells)):
            w = hi - lo
            s_lo, s_hi = (-math.inf, math.inf) if support is None else support[a]
            left = int(math.floor(min(factor * w, lo - s_lo) / h[a] + 1e-9))
            right = int(math.floor(min(factor * w, s_hi - hi) / h[a] + 1e-9))
            bounds.append((lo - left * h[a], hi + right * h[a]))
            cells.append(n + left + right)
        total = float(np.prod([c + 1 for c in cells]))
        if total > max_nodes:
            shrink = (max_nodes / total) ** (1.0 / self.dim)
            cells = [max(4, int(c * shrink)) for c in cells]
        return Grid(tuple(bounds), tuple(cells), "neumann_zero")

    def describe(self) -> dict:
        return {"bounds": [list(b) for b in self.bounds], "n_cells": list(self.n_cells),
                "boundary": self.boundary, "h": self.h.tolist(), "n_nodes": self.n_nodes}


def build_grid(bounds: Sequence[Sequence[float]], n_cells: Sequence[int] | int,
               boundary_policy: str = "neumann_zero") -> Grid:
    bounds = [tuple(float(v) for v in b) for b in np.asarray(bounds, dtype=float).reshape(-1, 2)]
    k = len(bounds)
    if k not in (1, 2):
        raise DimensionUnsupported(f"grids support k in {{1, 2}}, got k = {k}")
    n_cells = tuple(int(n) for n in np.broadcast_to(np.asarray(n_cells), (k,)))
    for lo, hi in bounds:
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise BadBounds(f"need lo < hi on every axis, got [{lo}, {hi}]")
    if any(n < 2 for n in n_cells) or int(np.prod(n_cells)) < 4:
        raise BadBounds(f"need at least 2 cells per axis and 4 in total, got {n_cells}")
    if boundary_policy not in BOUNDARY_POLICIES:
        raise ValueError(f"unknown boundary policy {boundary_policy!r}")
    return Grid(tuple(bounds), n_cells, boundary_policy)


def default_bounds(x0: Sequence[float]) -> list[tuple[float, float]]:
    """Box centred at ``x0`` with half-width ``5 (1 + |x0|)``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    half = 5.0 * (1.0 + float(np.linalg.norm(x0)))
    return [(float(c - half), float(c + half)) for c in x0]


@dataclass(frozen=True)
class DiscreteOperator:
    grid: Grid
    diffusion: DiffusionSpec
    L: sp.csr_matrix
    derivatives: tuple[sp.csr_matrix, ...]   # D_a, one per state axis
    gradient: tuple[sp.csr_matrix, ...]      # rows of sigma^T D, one per noise component
    dirichlet: np.ndarray                    # nodes whose rows are replaced by identity
    scheme: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self) -> int:
        return self.grid.n_nodes

    @property
    def interior(self) -> np.ndarray:
        return self.grid.interior_mask

    def apply(self, v: np.ndarray) -> np.ndarray:
        return self.L @ v

    def sigma_grad(self, v: np.ndarray) -> np.ndarray:
        """``sigma(x)^T D_h v`` at every node, shape (n_nodes, d)."""
        return np.stack([G @ v for G in self.gradient], axis=1)

    def system(self, r: float) -> sp.csc_matrix:
        """``r I - L_h`` with identity rows on Dirichlet nodes."""
        A = (r * sp.identity(self.n_nodes, format="csr") - self.L).tolil()
        for i in np.flatnonzero(self.dirichlet):
            A.rows[i] = [int(i)]
            A.data[i] = [1.0]
        return A.tocsc()

    def with_matrix(self, L: sp.spmatrix) -> "DiscreteOperator":
        """Same operator with ``L_h`` replaced (test hook for negative controls)."""
        return DiscreteOperator(self.grid, self.diffusion, sp.csr_matrix(L), self.derivatives,
                                self.gradient, self.dirichlet, {**self.scheme, "injected": True})

    def to_coo_text(self, path: str | Path) -> None:
        """Debug dump: one JSON header line, then ``row col value`` triplets."""
        coo = self.L.tocoo()
        order = np.lexsort((coo.col, coo.row))
        header = {"grid": self.grid.describe(), "diffusion": self.diffusion.describe(),
                  "nnz": int(coo.nnz), "dirichlet_nodes": np.flatnonzero(self.dirichlet).tolist()}
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for k in order:
                fh.write(f"{int(coo.row[k])} {int(coo.col[k])} {float(coo.data[k])!r}\n")


def _reflect(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.where(idx < 0, -idx, idx)
    idx = np.where(idx > n, 2 * n - idx, idx)
    return np.clip(idx, 0, n)


def _split_cross(a11: float, a22: float, a12: float, h1: float, h2: float):
    """Pick a catalog direction for the cross term; returns (p, q, w_dir, a11', a22') or None."""
    if a12 == 0.0:
        return 1, 1, 0.0, a11, a22
    for p, q in CROSS_CATALOG:
        w = abs(a12) / (p * q * h1 * h2)
        r11 = a11 - w * (p * h1) ** 2
        r22 = a22 - w * (q * h2) ** 2
        # rounding when the split is exactly tight
        if -1e-13 * max(a11, 1e-300) <= r11 < 0.0:
            r11 = 0.0
        if -1e-13 * max(a22, 1e-300) <= r22 < 0.0:
            r22 = 0.0
        if r11 >= 0.0 and r22 >= 0.0:
            return p, q, w, r11, r22
    return None


def discretize_generator(diffusion: DiffusionSpec, grid: Grid) -> DiscreteOperator:
    """Assemble the monotone discretization of ``L`` on ``grid``."""
    if diffusion.dim_state != grid.dim:
        raise DimensionUnsupported(f"diffusion has k = {diffusion.dim_state}, grid has k = {grid.dim}")
    x = grid.nodes
    N, k = x.shape
    h = grid.h
    ncells = np.array(grid.n_cells)
    mi = grid.multi_index
    b = diffusion.drift(x)
    sig = diffusion.diffusion(x)
    a = 0.5 * np.einsum("nad,nbd->nab", sig, sig)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        bad = int(np.flatnonzero(~(np.isfinite(b).all(1) & np.isfinite(a).all((1, 2))))[0])
        raise MonotonicityUnachievable(f"non-finite coefficients at node {bad}", node=bad,
                                       x=x[bad].tolist())

    dirichlet = grid.boundary_mask if grid.boundary == "dirichlet_envelope" else np.zeros(N, dtype=bool)
    active = ~dirichlet

    rows, cols, vals = [], [], []

    def add(weight: np.ndarray, offset: np.ndarray):
        sel = active & (weight != 0.0)
        if not np.any(sel):
            return
        nb = mi[sel] + offset
        for ax in range(k):
            nb[:, ax] = _reflect(nb[:, ax], ncells[ax])
        rows.append(np.flatnonzero(sel))
        cols.append(grid.flat_index(nb))
        vals.append(weight[sel])

    diag_a = np.array([a[:, ax, ax] for ax in range(k)]).T.copy()   # (N, k)
    scheme: dict = {}
    if k == 2:
        a12 = a[:, 0, 1]
        p = np.ones(N, dtype=np.int64)
        q = np.ones(N, dtype=np.int64)
        wdir = np.zeros(N)
        for n in range(N):
            if not active[n] or a12[n] == 0.0:
                continue
            split = _split_cross(diag_a[n, 0], diag_a[n, 1], a12[n], h[0], h[1])
            if split is None:
                raise MonotonicityUnachievable(
                    f"no catalog stencil keeps the cross term monotone at node {n}",
                    node=n, x=x[n].tolist(), coefficient=float(a12[n]))
            p[n], q[n], wdir[n], diag_a[n, 0], diag_a[n, 1] = split
        sgn = np.where(a12 >= 0.0, 1, -1)
        for pp, qq in CROSS_CATALOG:
            for s in (1, -1):
                sel = (p == pp) & (q == qq) & (sgn == s) & (wdir > 0)
                if np.any(sel):
                    w = np.where(sel, wdir, 0.0)
                    add(w, np.array([pp, s * qq]))
                    add(w, np.array([-pp, -s * qq]))
        scheme["cross_stencil"] = np.stack([p, q * sgn], axis=1)

    upwind = np.empty((N, k), dtype="<U3")
    for ax in range(k):
        e = np.zeros(k, dtype=np.int64)
        e[ax] = 1
        second = diag_a[:, ax] / h[ax] ** 2
        fwd = np.maximum(b[:, ax], 0.0) / h[ax]
        bwd = np.maximum(-b[:, ax], 0.0) / h[ax]
        add(second + fwd, e)
        add(second + bwd, -e)
        upwind[:, ax] = np.where(b[:, ax] >= 0.0, "fwd", "bwd")
    scheme["upwind"] = upwind

    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        w = np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        w = np.zeros(0)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        bad = int(r[np.flatnonzero(~(w >= 0))[0]])
        raise MonotonicityUnachievable(f"negative weight at node {bad}", node=bad, x=x[bad].tolist())
    # self-references created by reflection cancel against the diagonal
    keep = r != c
    off = sp.csr_matrix((w[keep], (r[keep], c[keep])), shape=(N, N))
    off.sum_duplicates()
    off.eliminate_zeros()
    diag = _exact_negative_rowsum(off)
    L = (off + sp.diags(diag)).tocsr()
    L.sort_indices()

    derivs = tuple(_derivative_matrix(grid, ax) for ax in range(k))
    grads = []
    for l in range(diffusion.dim_noise):
        G = sp.csr_matrix((N, N))
        for ax in range(k):
            G = G + sp.diags(sig[:, ax, l]) @ derivs[ax]
        grads.append(G.tocsr())
    return DiscreteOperator(grid, diffusion, L, derivs, tuple(grads), dirichlet, scheme)


@dataclass(frozen=True)
class StretchedAxis:
    """Non-uniform 1D node set with Neumann walls, used only for far-field boundary data."""

    coords: np.ndarray
    boundary: str = "neumann_zero"

    dim = 1

    @property
    def n_nodes(self) -> int:
        return int(self.coords.size)

    @property
    def nodes(self) -> np.ndarray:
        return self.coords[:, None]

    @property
    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_nodes, dtype=bool)
        mask[[0, -1]] = True
        return mask

    @property
    def interior_mask(self) -> np.ndarray:
        return ~self.boundary_mask

    def interpolate(self, values: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.interp(np.atleast_2d(x)[:, 0], self.coords, values)

    def describe(self) -> dict:
        return {"bounds": [[float(self.coords[0]), float(self.coords[-1])]], "n_nodes": self.n_nodes,
                "boundary": self.boundary, "stretched": True}


def stretched_padding(grid: Grid, reach: float, support: Sequence[tuple[float, float]] | None = None,
                      ratio: float = 1.05, inner_cells: int = 512) -> StretchedAxis:
    """Extend a 1D box by ``reach`` box widths per side with geometrically growing cells.

    Inside the box the spacing is ``width / inner_cells`` whatever the
    resolution of ``grid``, so boundary data built on it are the same at
    every refinement level; the box walls are always nodes.  Each outer
    cell is ``ratio`` times the previous one, which reaches far walls with
    a few hundred nodes.  Walls stop at the diffusion's support.
    """
    if grid.dim != 1:
        raise DimensionUnsupported("stretched padding is one-dimensional")
    (lo, hi), = grid.bounds
    w = hi - lo
    h = w / inner_cells
    s_lo, s_hi = (-math.inf, math.inf) if support is None else support[0]

    def side(start: float, limit: float, sign: float) -> list[float]:
        out, x, step = [], start, h
        while abs(limit - x) > 1e-12 * max(1.0, abs(x)):
            step *= ratio
            if abs(limit - x) < 1.5 * step:
                out.append(limit)
                break
            x = x + sign * step
            out.append(x)
        return out

    left = side(lo, max(lo - reach * w, s_lo), -1.0)
    right = side(hi, min(hi + reach * w, s_hi), 1.0)
    inner = lo + w * np.arange(inner_cells + 1) / inner_cells
    inner[-1] = hi
    coords = np.concatenate([np.array(left[::-1]), inner, np.array(right)])
    return StretchedAxis(coords)


def discretize_stretched(diffusion: DiffusionSpec, axis: StretchedAxis) -> DiscreteOperator:
    """Monotone three-point scheme on a non-uniform axis (upwind drift, mirrored walls)."""
    if diffusion.dim_state != 1:
        raise DimensionUnsupported("stretched operators are one-dimensional")
    x = axis.coords
    N = x.size
    b = diffusion.drift(axis.nodes)[:, 0]
    sig = diffusion.diffusion(axis.nodes)
    a = 0.5 * np.einsum("nd,nd->n", sig[:, 0, :], sig[:, 0, :])
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        bad = int(np.flatnonzero(~(np.isfinite(b) & np.isfinite(a)))[0])
        raise MonotonicityUnachievable(f"non-finite coefficients at node {bad}", node=bad, x=[float(x[bad])])
    dx = np.diff(x)
    hl = np.concatenate([[dx[0]], dx])     # mirrored at the left wall
    hr = np.concatenate([dx, [dx[-1]]])
    up = 2 * a / (hr * (hl + hr)) + np.maximum(b, 0.0) / hr
    down = 2 * a / (hl * (hl + hr)) + np.maximum(-b, 0.0) / hl
    idx = np.arange(N)
    plus = np.minimum(idx + 1, N - 1)
    minus = np.maximum(idx - 1, 0)
    plus[-1] = N - 2
    minus[0] = 1
    off = sp.csr_matrix((np.concatenate([up, down]), (np.concatenate([idx, idx]), np.concatenate([plus, minus]))),
                        shape=(N, N))
    off.sum_duplicates()
    off.eliminate_zeros()
    L = (off + sp.diags(_exact_negative_rowsum(off))).tocsr()
    L.sort_indices()
    # central differences inside (exact for affine functions), one-sided on the walls
    D = sp.lil_matrix((N, N))
    for i in range(1, N - 1):
        D[i, i + 1], D[i, i - 1] = 1.0 / (x[i + 1] - x[i - 1]), -1.0 / (x[i + 1] - x[i - 1])
    D[0, 1], D[0, 0] = 1.0 / dx[0], -1.0 / dx[0]
    D[N - 1, N - 1], D[N - 1, N - 2] = 1.0 / dx[-1], -1.0 / dx[-1]
    D = D.tocsr()
    grads = tuple((sp.diags(sig[:, 0, l]) @ D).tocsr() for l in range(diffusion.dim_noise))
    return DiscreteOperator(axis, diffusion, L, (D,), grads, np.zeros(N, dtype=bool), {"stretched": True})


def _exact_negative_rowsum(off: sp.csr_matrix) -> np.ndarray:
    """Diagonal with ``diag + sum(off-diagonals) <= 0`` in exact arithmetic."""
    N = off.shape[0]
    diag = np.zeros(N)
    data, ptr = off.data, off.indptr
    for i in range(N):
        row = data[ptr[i]:ptr[i + 1]].tolist()
        if not row:
            continue
        d = -math.fsum(row)
        while math.fsum([d, *row]) > 0.0:
            d = math.nextafter(d, -math.inf)
        diag[i] = d
    return diag


def _derivative_matrix(grid: Grid, ax: int) -> sp.csr_matrix:
    """Central differences inside, one-sided on the walls of axis ``ax``."""
    mi = grid.multi_index
    n = grid.n_cells[ax]
    h = grid.h[ax]
    i = mi[:, ax]
    rows, cols, vals = [], [], []
    e = np.zeros(grid.dim, dtype=np.int64)
    e[ax] = 1
    idx = np.arange(grid.n_nodes)
    plus = grid.flat_index(np.where((i < n)[:, None], mi + e, mi))
    minus = grid.flat_index(np.where((i > 0)[:, None], mi - e, mi))
    central = (i > 0) & (i < n)
    rows += [idx[central], idx[central]]
    cols += [plus[central], minus[central]]
    vals += [np.full(central.sum(), 0.5 / h), np.full(central.sum(), -0.5 / h)]
    lo, hi = i == 0, i == n
    rows += [idx[lo], idx[lo], idx[hi], idx[hi]]
    cols += [plus[lo], idx[lo], idx[hi], minus[hi]]
    vals += [np.full(lo.sum(), 1 / h), np.full(lo.sum(), -1 / h),
             np.full(hi.sum(), 1 / h), np.full(hi.sum(), -1 / h)]
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(grid.n_nodes, grid.n_nodes))


def check_m_matrix(op: DiscreteOperator, r: float | None = None) -> dict:
    """Exact sign checks on ``L_h`` (and on ``r I - L_h`` when ``r`` is given).

    No tolerances: off-diagonals must be >= 0 and row sums, summed with
    ``math.fsum``, must be <= 0.
    """
    L = op.L.tocsr()
    N = L.shape[0]
    worst_off, bad_rows = 0.0, []
    for i in range(N):
        lo, hi = L.indptr[i], L.indptr[i + 1]
        cols = L.indices[lo:hi]
        data = L.data[lo:hi]
        offd = data[cols != i]
        if offd.size and offd.min() < 0:
            worst_off = min(worst_off, float(offd.min()))
            bad_rows.append(i)
            continue
        if math.fsum(data.tolist()) > 0.0:
            bad_rows.append(i)
    ok = not bad_rows
    out = {"monotone": ok, "violations": bad_rows[:20], "min_offdiag": worst_off}
    if r is not None:
        out["m_matrix"] = ok and r > 0
    return out


def check_cost_subharmonicity(problem: SwitchingProblem, op: DiscreteOperator,
                              max_witnesses: int = 20) -> dict:
    """Advisory check that ``L_h g_ij <= 0`` at interior nodes."""
    x = op.grid.nodes
    G = problem.cost_matrix(x)
    interior = op.interior
    witnesses = []
    m = problem.num_modes
    for i in range(m):
        for j in range(m):
            if i == j:
                continue
            g = G[:, i, j]
            Lg = op.apply(g)
            bad = np.flatnonzero(interior & (Lg > 1e-8 * (1.0 + np.abs(g))))
            for n in bad[: max(0, max_witnesses - len(witnesses))]:
                witnesses.append({"pair": [i + 1, j + 1], "node": int(n), "x": x[n].tolist(),
                                  "Lg": float(Lg[n])})
    return {"status": "fail" if witnesses else "pass", "witnesses": witnesses,
            "detail": "advisory: L g_ij > 0 somewhere" if witnesses else "L g_ij <= 0 at interior nodes"}

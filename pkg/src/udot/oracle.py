"""Exact discrete Kantorovich problems used as ground truth.

A transport problem is discretised into weighted atoms, the transportation LP

    max  sum_ij pi_ij S_ij   s.t.  row sums a, column sums b, pi >= 0

is solved by a transportation network simplex, and candidate potentials are
scored by their duality gap against the optimum.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix

from udot.errors import EmptyDiscretization, Unbalanced
from udot.geometry import _region_constraints, clipped_cell_areas
from udot.operators import density_values

logger = logging.getLogger(__name__)

MAX_ROWS = 10_000
MAX_COLS = 256
BALANCE_TOL = 1e-10
DEGENERATE_SWITCH = 50


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    """Weighted atoms ``x_points``/``a`` and ``y_points``/``b`` with surplus matrix ``S``."""

    x_points: np.ndarray
    a: np.ndarray
    y_points: np.ndarray
    b: np.ndarray
    surplus_matrix: np.ndarray

    def __post_init__(self):
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise ValueError("weights must be nonnegative")
        if self.surplus_matrix.shape != (self.a.size, self.b.size):
            raise ValueError("surplus matrix shape does not match the weights")

    @classmethod
    def from_arrays(cls, S, a, b, x_points=None, y_points=None) -> "DiscreteProblem":
        S = np.asarray(S, dtype=float)
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        xp = np.zeros((a.size, 2)) if x_points is None else np.asarray(x_points, dtype=float)
        yp = np.arange(b.size, dtype=float) if y_points is None else np.asarray(y_points, dtype=float)
        return cls(xp, a, yp, b, S)

    def to_json(self) -> str:
        return json.dumps({
            "x_points": self.x_points.tolist(), "a": self.a.tolist(),
            "y_points": self.y_points.tolist(), "b": self.b.tolist(),
            "surplus_matrix": self.surplus_matrix.tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DiscreteProblem":
        d = json.loads(text)
        return cls(np.asarray(d["x_points"], float).reshape(-1, 2), np.asarray(d["a"], float),
                   np.asarray(d["y_points"], float), np.asarray(d["b"], float),
                   np.asarray(d["surplus_matrix"], float).reshape(len(d["a"]), len(d["b"])))


@dataclass(frozen=True, eq=False)
class CouplingSolution:
    """Optimal coupling (sparse), its value and optimal duals with ``v[0] = 0``."""

    coupling: coo_matrix
    value: float
    u: np.ndarray
    v: np.ndarray
    pivots: int = 0

    def dual_value(self, dp: DiscreteProblem) -> float:
        return float(np.dot(dp.a, self.u) + np.dot(dp.b, self.v))

    def to_json(self) -> str:
        c = self.coupling.tocoo()
        return json.dumps({
            "shape": list(c.shape), "row": c.row.tolist(), "col": c.col.tolist(),
            "data": c.data.tolist(), "value": self.value, "u": self.u.tolist(),
            "v": self.v.tolist(), "pivots": self.pivots,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CouplingSolution":
        d = json.loads(text)
        c = coo_matrix((d["data"], (d["row"], d["col"])), shape=tuple(d["shape"]))
        return cls(c, float(d["value"]), np.asarray(d["u"], float), np.asarray(d["v"], float),
                   int(d["pivots"]))


# ---------------------------------------------------------------------------
# discretisation


def discretize(problem, nx: int, ny: int, refine: int = 8) -> DiscreteProblem:
    """Cell-centre atoms of an ``nx x nx`` grid over the region and ``ny`` target midpoints.

    Source weights are ``f(centre)`` times the area of the cell inside the
    region (measured on a ``refine``-times finer sub-grid); only cells whose
    centre lies in the region are kept.  Both weight vectors are normalised.
    """
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive")
    region = problem.region
    (x0, x1), (y0, y1) = region.bbox
    xs = np.linspace(x0, x1, nx * refine + 1)
    ys = np.linspace(y0, y1, nx * refine + 1)
    fine = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    areas, _ = clipped_cell_areas(fine, np.stack(_region_constraints(region, fine), axis=-1))
    coarse_area = areas.reshape(nx, refine, nx, refine).sum(axis=(1, 3))
    cx = x0 + (np.arange(nx) + 0.5) * (x1 - x0) / nx
    cy = y0 + (np.arange(nx) + 0.5) * (y1 - y0) / nx
    centres = np.stack(np.meshgrid(cx, cy, indexing="ij"), axis=-1)
    keep = (region.implicit(centres) <= 0) & (coarse_area > 0)
    if not keep.any():
        raise EmptyDiscretization("no cell centre lies in the region", {"nx": nx})
    pts = centres[keep]
    a = density_values(problem.f, pts) * coarse_area[keep]
    a = a / a.sum()

    t0, t1 = problem.y_interval
    yp = t0 + (np.arange(ny) + 0.5) * (t1 - t0) / ny
    b = np.asarray(problem.g(yp), dtype=float) * np.ones(ny)
    b = b / b.sum()
    S = problem.model.eval(pts[:, None, :], yp[None, :])
    return DiscreteProblem(pts, a, yp, b, S)


# ---------------------------------------------------------------------------
# transportation simplex


class _Tree:
    """Spanning tree of the bipartite basis with parent pointers and potentials.

    Nodes ``0..m-1`` are rows, ``m..m+n-1`` columns.  The root is column 0 whose
    potential is pinned to zero.
    """

    def __init__(self, S: np.ndarray, arcs: list[tuple[int, int]]):
        self.S = S
        self.m, self.n = S.shape
        N = self.m + self.n
        self.adj: list[set[int]] = [set() for _ in range(N)]
        for i, j in arcs:
            self.adj[i].add(self.m + j)
            self.adj[self.m + j].add(i)
        self.parent = np.full(N, -1, dtype=int)
        self.depth = np.zeros(N, dtype=int)
        self.pot = np.zeros(N)
        self.root = self.m
        self._orient(self.root, -1, 0)

    def _arc_s(self, a: int, b: int) -> float:
        return self.S[a, b - self.m] if a < self.m else self.S[b, a - self.m]

    def _orient(self, start: int, parent: int, depth: int) -> list[int]:
        """BFS from ``start`` (coming from ``parent``): sets parent, depth and potentials."""
        self.parent[start] = parent
        self.depth[start] = depth
        if parent < 0:
            self.pot[start] = 0.0
        else:
            self.pot[start] = self._arc_s(start, parent) - self.pot[parent]
        seen = [start]
        dq = deque([start])
        while dq:
            node = dq.popleft()
            for nb in self.adj[node]:
                if nb == self.parent[node]:
                    continue
                self.parent[nb] = node
                self.depth[nb] = self.depth[node] + 1
                self.pot[nb] = self._arc_s(nb, node) - self.pot[node]
                seen.append(nb)
                dq.append(nb)
        return seen

    def path(self, a: int, b: int) -> list[int]:
        """Node path from ``a`` to ``b`` through the tree."""
        left, right = [a], [b]
        x, y = a, b
        while self.depth[x] > self.depth[y]:
            x = self.parent[x]
            left.append(x)
        while self.depth[y] > self.depth[x]:
            y = self.parent[y]
            right.append(y)
        while x != y:
            x = self.parent[x]
            y = self.parent[y]
            left.append(x)
            right.append(y)
        right.pop()
        return left + right[::-1]

    def swap(self, enter: tuple[int, int], leave: tuple[int, int]) -> None:
        i, j = enter
        li, lj = leave
        ra, rb = li, self.m + lj
        child = rb if self.parent[rb] == ra else ra
        self.adj[ra].discard(rb)
        self.adj[rb].discard(ra)
        # the side cut off from the root; the entering arc reconnects it
        cut = set(self._subtree(child))
        e_row, e_col = i, self.m + j
        self.adj[e_row].add(e_col)
        self.adj[e_col].add(e_row)
        inside, outside = (e_row, e_col) if e_row in cut else (e_col, e_row)
        self._orient(inside, outside, self.depth[outside] + 1)

    def _subtree(self, top: int) -> list[int]:
        out = [top]
        dq = deque([top])
        while dq:
            node = dq.popleft()
            for nb in self.adj[node]:
                if nb != self.parent[node] and self.parent[nb] == node:
                    out.append(nb)
                    dq.append(nb)
        return out


def _initial_basis(S, a, b):
    """Largest-surplus-first allocation, completed to a spanning tree with zero arcs."""
    m, n = S.shape
    order = np.argsort(-S, axis=None, kind="stable")
    ar = a.astype(float).copy()
    bc = b.astype(float).copy()
    flow: dict[tuple[int, int], float] = {}
    row_done = ar <= 0
    col_done = bc <= 0
    parent = list(range(m + n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(x, y) -> bool:
        rx, ry = find(x), find(y)
        if rx == ry:
            return False
        parent[rx] = ry
        return True

    for idx in order:
        i, j = divmod(int(idx), n)
        if row_done[i] or col_done[j]:
            continue
        x = min(ar[i], bc[j])
        if not union(i, m + j):
            continue
        flow[(i, j)] = x
        ar[i] -= x
        bc[j] -= x
        if ar[i] <= 0:
            row_done[i] = True
        if bc[j] <= 0:
            col_done[j] = True
        if row_done.all() and col_done.all():
            break
    # leftovers from rounding go on arcs that keep the basis a tree
    for idx in order:
        if len(flow) == m + n - 1:
            break
        i, j = divmod(int(idx), n)
        if (i, j) in flow:
            continue
        if union(i, m + j):
            flow[(i, j)] = 0.0
    return flow


def solve_lp(dp: DiscreteProblem, tol: float = 1e-12, max_pivots: int | None = None) -> CouplingSolution:
    """Exact optimum of the transportation LP by network simplex.

    Dantzig pricing, switching to Bland's smallest-index rule after a run of
    degenerate pivots.  Duals come from the final basis tree with ``v[0] = 0``.
    Raises :class:`~udot.errors.Unbalanced` if the marginals differ by more
    than ``1e-10``.
    """
    S, a, b = dp.surplus_matrix, dp.a, dp.b
    m, n = S.shape
    if m > MAX_ROWS or n > MAX_COLS:
        raise ValueError(f"instance larger than {MAX_ROWS} x {MAX_COLS}")
    if abs(a.sum() - b.sum()) > BALANCE_TOL:
        raise Unbalanced("row and column masses differ", {"sum_a": float(a.sum()), "sum_b": float(b.sum())})
    scale = max(1.0, float(np.abs(S).max()))
    flow = _initial_basis(S, a, b)
    tree = _Tree(S, list(flow))
    max_pivots = max_pivots or 50 * (m + n) * max(1, int(math.log2(m + n + 1)))
    degenerate = 0
    pivots = 0
    while True:
        u = tree.pot[:m]
        v = tree.pot[m:]
        d = S - u[:, None] - v[None, :]
        if degenerate >= DEGENERATE_SWITCH:
            cand = np.flatnonzero(d > tol * scale)
            if cand.size == 0:
                break
            ei, ej = divmod(int(cand[0]), n)
        else:
            k = int(np.argmax(d))
            ei, ej = divmod(k, n)
            if d[ei, ej] <= tol * scale:
                break
        # cycle: entering arc then the tree path from column ej back to row ei
        path = tree.path(m + ej, ei)
        minus = []
        plus = []
        for t in range(len(path) - 1):
            x, y = path[t], path[t + 1]
            arc = (x, y - m) if x < m else (y, x - m)
            (minus if t % 2 == 0 else plus).append(arc)
        theta = min(flow[arc] for arc in minus)
        leave = min((arc for arc in minus if flow[arc] == theta), key=lambda arc: arc[0] * n + arc[1])
        for arc in minus:
            flow[arc] -= theta
        for arc in plus:
            flow[arc] += theta
        del flow[leave]
        flow[(ei, ej)] = theta
        tree.swap((ei, ej), leave)
        degenerate = degenerate + 1 if theta == 0 else 0
        pivots += 1
        if pivots > max_pivots:
            raise RuntimeError("network simplex exceeded its pivot budget")
    # fresh potentials from the final tree
    tree._orient(tree.root, -1, 0)
    u = tree.pot[:m].copy()
    v = tree.pot[m:].copy()
    arcs = [(i, j, x) for (i, j), x in flow.items() if x > 0]
    rows = np.array([t[0] for t in arcs], dtype=int)
    cols = np.array([t[1] for t in arcs], dtype=int)
    vals = np.array([t[2] for t in arcs], dtype=float)
    coupling = coo_matrix((vals, (rows, cols)), shape=(m, n))
    value = float(np.dot(vals, S[rows, cols])) if arcs else 0.0
    logger.debug("network simplex: %d pivots on %dx%d", pivots, m, n)
    return CouplingSolution(coupling, value, u, v, pivots)


# ---------------------------------------------------------------------------
# duality gap


def conjugate_u(dp: DiscreteProblem, v) -> np.ndarray:
    """``u_i = max_j S_ij - v_j``."""
    return np.max(dp.surplus_matrix - np.asarray(v, dtype=float)[None, :], axis=1)


def duality_gap(dp: DiscreteProblem, u_values, v_values, lp: CouplingSolution | None = None,
                feas_tol: float = 1e-8) -> float:
    """Dual objective of ``(u, v)`` minus the LP optimum.

    Rows violating ``u_i + v_j >= S_ij - feas_tol`` are first repaired by
    ``u_i = max_j S_ij - v_j``, so the result is never below ``-1e-9``
    (beyond rounding).
    """
    u = np.asarray(u_values, dtype=float).copy()
    v = np.asarray(v_values, dtype=float)
    need = conjugate_u(dp, v)
    bad = u < need - feas_tol
    if bad.any():
        logger.info("repairing %d infeasible rows by conjugation", int(bad.sum()))
        u[bad] = need[bad]
    lp = lp or solve_lp(dp)
    return float(np.dot(dp.a, u) + np.dot(dp.b, v) - lp.value)

"""Source regions and the potential indifference curves

    X1(y, p)    = {x in X : s_y(x, y) = p}
    X2(y, p, q) = {x in X1(y, p) : s_yy(x, y) <= q}

as quadrature-ready polylines.

Curves are extracted by marching squares over a padded grid covering the
region's bounding box, polished by one Newton step, and clipped against the
region by bisection on its implicit function.  Nodes created on the same grid
edge (or at the same grid vertex, when the level value is hit exactly there)
are shared between cells, so connectivity is exact and component counting is a
plain graph problem.

Quadrature uses two Gauss-Legendre points per segment.  Weights sum to the
segment length.
"""

from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from udot.errors import DegenerateCell

logger = logging.getLogger(__name__)

GRAD_FLOOR = 1e-10
TANGENCY_TOL = 1e-6
_GAUSS = 0.5 / math.sqrt(3.0)


# ---------------------------------------------------------------------------
# regions


@dataclass(frozen=True)
class Region:
    """Implicit region ``{implicit <= 0}`` inside an axis-aligned bounding box.

    ``bbox`` is ``((x_lo, x_hi), (y_lo, y_hi))``.  ``gradient`` is optional; when
    missing, normals come from central differences of ``implicit``.  ``pieces``
    optionally returns the individual constraints ``(..., C)`` whose maximum is
    ``implicit``; area clipping then treats each one separately.
    """

    implicit: Callable
    bbox: tuple
    gradient: Callable | None = None
    label: str = "region"
    pieces: Callable | None = None

    def contains(self, x) -> np.ndarray:
        return self.implicit(np.asarray(x, dtype=float)) <= 0

    def grad(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.gradient is not None:
            return self.gradient(x)
        h = 1e-7 * self.diameter
        e = np.array([h, 0.0])
        f = np.array([0.0, h])
        return np.stack(
            [(self.implicit(x + e) - self.implicit(x - e)) / (2 * h),
             (self.implicit(x + f) - self.implicit(x - f)) / (2 * h)],
            axis=-1,
        )

    def boundary_normal(self, x) -> np.ndarray:
        """Outward unit normal (normalised gradient of the implicit function)."""
        g = self.grad(x)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return g / np.where(n > GRAD_FLOOR, n, 1.0)

    @property
    def diameter(self) -> float:
        (x0, x1), (y0, y1) = self.bbox
        return math.hypot(x1 - x0, y1 - y0)


def annulus_region(r_in: float = 0.5, r_out: float = 1.0) -> Region:
    """``r_in <= |x| <= r_out`` via ``(|x| - r_in)(|x| - r_out)``."""

    def implicit(x):
        r = np.hypot(x[..., 0], x[..., 1])
        return (r - r_in) * (r - r_out)

    def gradient(x):
        r = np.hypot(x[..., 0], x[..., 1])
        scale = (2.0 * r - r_in - r_out) / np.where(r > 0, r, 1.0)
        return x * scale[..., None]

    return Region(implicit, ((-r_out, r_out), (-r_out, r_out)), gradient, "annulus")


_SQUARE_NORMALS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]])


def unit_square_region() -> Region:
    def pieces(x):
        return np.stack([-x[..., 0], x[..., 0] - 1.0, -x[..., 1], x[..., 1] - 1.0], axis=-1)

    def implicit(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.maximum(np.maximum(-x1, x1 - 1.0), np.maximum(-x2, x2 - 1.0))

    def gradient(x):
        return _SQUARE_NORMALS[pieces(x).argmax(axis=-1)]

    return Region(implicit, ((0.0, 1.0), (0.0, 1.0)), gradient, "unit_square", pieces)


@functools.lru_cache(maxsize=16)
def _padded_grid(bbox: tuple, cells: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half a cell of padding keeps the region boundary strictly inside the grid
    (x0, x1), (y0, y1) = bbox
    px = 0.5 * (x1 - x0) / cells
    py = 0.5 * (y1 - y0) / cells
    xs = np.linspace(x0 - px, x1 + px, cells + 1)
    ys = np.linspace(y0 - py, y1 + py, cells + 1)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1)
    pts.flags.writeable = False
    return xs, ys, pts


# ---------------------------------------------------------------------------
# meshes


@dataclass(frozen=True, eq=False)
class LevelSetMesh:
    """Polyline discretisation of X1(y, p), or of X2(y, p, q) when ``q`` is set.

    ``boundary_hits`` and ``cut_points`` index into ``nodes``: the first are
    points where the curve meets the region boundary, the second the points
    where ``s_yy = q`` splits a segment.  ``speed`` is ``w = 1/|grad_x s_y|`` at
    each quadrature point and ``normals`` the unit vector ``w * grad_x s_y``.
    """

    y: float
    p: float
    q: float | None
    nodes: np.ndarray
    segments: np.ndarray
    component_id: np.ndarray
    boundary_hits: np.ndarray
    cut_points: np.ndarray
    node_syy: np.ndarray
    lengths: np.ndarray
    quad_points: np.ndarray
    quad_weights: np.ndarray
    quad_segment: np.ndarray
    normals: np.ndarray
    speed: np.ndarray
    warnings: tuple = field(default_factory=tuple)

    @property
    def total_length(self) -> float:
        return float(self.lengths.sum())

    @property
    def n_components(self) -> int:
        return int(np.unique(self.component_id).size)

    @property
    def is_empty(self) -> bool:
        return self.segments.shape[0] == 0

    def component_lengths(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros(0)
        return np.bincount(self.component_id, weights=self.lengths)

    def polylines(self) -> list[np.ndarray]:
        """Ordered node coordinates of each component (chains, or closed loops)."""
        out = []
        adj: dict[int, list[int]] = {}
        for a, b in self.segments:
            adj.setdefault(int(a), []).append(int(b))
            adj.setdefault(int(b), []).append(int(a))
        seen_edges: set[tuple[int, int]] = set()
        for comp in range(self.n_components):
            segs = self.segments[self.component_id == comp]
            comp_nodes = np.unique(segs)
            ends = [n for n in comp_nodes if len(adj[int(n)]) == 1]
            start = int(ends[0]) if ends else int(comp_nodes[0])
            chain = [start]
            cur = start
            while True:
                nxt = None
                for nb in adj[cur]:
                    key = (min(cur, nb), max(cur, nb))
                    if key not in seen_edges:
                        seen_edges.add(key)
                        nxt = nb
                        break
                if nxt is None:
                    break
                chain.append(nxt)
                cur = nxt
            out.append(self.nodes[chain])
        return out


def _components(n_nodes: int, segments: np.ndarray) -> np.ndarray:
    if segments.shape[0] == 0:
        return np.zeros(0, dtype=int)
    m = segments.shape[0]
    graph = coo_matrix((np.ones(m), (segments[:, 0], segments[:, 1])), shape=(n_nodes, n_nodes))
    _, labels = connected_components(graph, directed=False)
    seg_label = labels[segments[:, 0]]
    # renumber in order of first appearance so ids are deterministic
    _, first = np.unique(seg_label, return_index=True)
    order = np.argsort(first)
    remap = np.empty(order.size, dtype=int)
    remap[order] = np.arange(order.size)
    return remap[np.searchsorted(np.unique(seg_label), seg_label)]


def _make_mesh(model, y, p, q, nodes, segments, hits, cuts, warnings=()) -> LevelSetMesh:
    nodes = np.asarray(nodes, dtype=float).reshape(-1, 2)
    segments = np.asarray(segments, dtype=int).reshape(-1, 2)
    hits = np.asarray(hits, dtype=int)
    cuts = np.asarray(cuts, dtype=int)
    # drop unused nodes
    used = np.unique(np.concatenate([segments.ravel(), hits, cuts]))
    remap = -np.ones(nodes.shape[0], dtype=int)
    remap[used] = np.arange(used.size)
    nodes = nodes[used]
    segments = remap[segments]
    hits = np.unique(remap[hits])
    cuts = np.unique(remap[cuts])

    a = nodes[segments[:, 0]]
    b = nodes[segments[:, 1]]
    lengths = np.linalg.norm(b - a, axis=-1)
    qp = np.concatenate([a + (0.5 - _GAUSS) * (b - a), a + (0.5 + _GAUSS) * (b - a)])
    qw = np.concatenate([0.5 * lengths, 0.5 * lengths])
    qs = np.concatenate([np.arange(segments.shape[0])] * 2)
    if qp.shape[0]:
        g = model.grad_x_dy(qp, y)
        gn = np.linalg.norm(g, axis=-1)
        normals = g / gn[:, None]
        speed = 1.0 / gn
    else:
        normals = np.zeros((0, 2))
        speed = np.zeros(0)
    node_syy = model.d_yy(nodes, y) if nodes.shape[0] else np.zeros(0)
    mesh = LevelSetMesh(
        y=float(y), p=float(p), q=None if q is None else float(q),
        nodes=nodes, segments=segments, component_id=_components(nodes.shape[0], segments),
        boundary_hits=hits, cut_points=cuts, node_syy=np.asarray(node_syy, dtype=float),
        lengths=lengths, quad_points=qp, quad_weights=qw, quad_segment=qs,
        normals=normals, speed=speed, warnings=tuple(warnings),
    )
    for arr in (mesh.nodes, mesh.segments, mesh.lengths, mesh.quad_points, mesh.quad_weights,
                mesh.normals, mesh.speed, mesh.node_syy, mesh.component_id):
        arr.flags.writeable = False
    return mesh


# ---------------------------------------------------------------------------
# marching squares


def _march(phi: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero contour of grid values ``phi`` as (node points, node-index segments).

    Values ``>= 0`` count as positive.  Saddle cells are resolved by the
    asymptotic decider (sign of the bilinear interpolant at its saddle point).
    """
    n = phi.shape[0] - 1
    pos = phi >= 0
    n_h = n * (n + 1)
    n_v = (n + 1) * n
    vert_base = n_h + n_v

    # horizontal edges (i,j)-(i+1,j) and vertical edges (i,j)-(i,j+1)
    hcross = pos[:-1, :] != pos[1:, :]
    vcross = pos[:, :-1] != pos[:, 1:]
    edge_pts = np.zeros((n_h + n_v, 2))
    edge_key = np.arange(n_h + n_v)

    vid = np.arange((n + 1) * (n + 1)).reshape(n + 1, n + 1)
    for cross, a_val, b_val, a_pt, b_pt, a_id, b_id, base, shape in (
        (hcross, phi[:-1, :], phi[1:, :], pts[:-1, :], pts[1:, :], vid[:-1, :], vid[1:, :], 0, (n, n + 1)),
        (vcross, phi[:, :-1], phi[:, 1:], pts[:, :-1], pts[:, 1:], vid[:, :-1], vid[:, 1:], n_h, (n + 1, n)),
    ):
        ii, jj = np.nonzero(cross)
        if ii.size == 0:
            continue
        fa = a_val[ii, jj]
        fb = b_val[ii, jj]
        t = fa / (fa - fb)
        eid = base + ii * shape[1] + jj
        edge_pts[eid] = a_pt[ii, jj] + t[:, None] * (b_pt[ii, jj] - a_pt[ii, jj])
        # exact zero at the positive endpoint: share the node through the vertex
        za = (fa == 0.0)
        zb = (fb == 0.0)
        key = eid.copy()
        key[za] = vert_base + a_id[ii, jj][za]
        key[zb] = vert_base + b_id[ii, jj][zb]
        edge_key[eid] = key

    ci, cj = np.nonzero(hcross[:, :-1] | hcross[:, 1:] | vcross[1:, :] | vcross[:-1, :])
    cell_cross = np.stack([hcross[ci, cj], vcross[ci + 1, cj], hcross[ci, cj + 1], vcross[ci, cj]], axis=-1)
    cell_edges = np.stack([
        ci * (n + 1) + cj,              # e0: bottom
        n_h + (ci + 1) * n + cj,        # e1: right
        ci * (n + 1) + cj + 1,          # e2: top
        n_h + ci * n + cj,              # e3: left
    ], axis=-1)
    ncross = cell_cross.sum(axis=-1)

    segs = []
    two = ncross == 2
    if two.any():
        ce = cell_edges[two]
        cc = cell_cross[two]
        pick = np.argsort(~cc, axis=1, kind="stable")[:, :2]
        segs.append(np.take_along_axis(ce, pick, axis=1))
    four = ncross == 4
    if four.any():
        fi, fj = ci[four], cj[four]
        a = phi[fi, fj]
        b = phi[fi + 1, fj]
        c = phi[fi + 1, fj + 1]
        d = phi[fi, fj + 1]
        centre = (a * c - b * d) / (a + c - b - d)
        e = cell_edges[four]
        c0_pos = pos[fi, fj]
        # isolate the negative corners when the positive ones join through the centre
        isolate_13 = np.where(c0_pos, centre >= 0, centre < 0)
        first = np.where(isolate_13[:, None], e[:, [0, 1]], e[:, [3, 0]])
        second = np.where(isolate_13[:, None], e[:, [2, 3]], e[:, [1, 2]])
        segs.extend([first, second])
    if not segs:
        return np.zeros((0, 2)), np.zeros((0, 2), dtype=int)
    seg_edges = np.concatenate(segs)
    seg_keys = edge_key[seg_edges]
    flat_keys = seg_keys.ravel()
    flat_pts = edge_pts[seg_edges.ravel()]
    uniq, first_idx, inv = np.unique(flat_keys, return_index=True, return_inverse=True)
    nodes = flat_pts[first_idx]
    seg_nodes = inv.reshape(-1, 2)
    seg_nodes = seg_nodes[seg_nodes[:, 0] != seg_nodes[:, 1]]
    if seg_nodes.size:
        seg_nodes = np.unique(np.sort(seg_nodes, axis=1), axis=0)
    return nodes, seg_nodes


def _bisect_chord(region, a, b, t_lo, t_hi, tol: float = 0.0, iters: int = 48):
    """Boundary parameter on chords a->b; inside status differs at t_lo and t_hi."""
    inside_lo = region.implicit(a + t_lo[:, None] * (b - a)) <= tol
    for _ in range(iters):
        t_mid = 0.5 * (t_lo + t_hi)
        inside_mid = region.implicit(a + t_mid[:, None] * (b - a)) <= tol
        same = inside_mid == inside_lo
        t_lo = np.where(same, t_mid, t_lo)
        t_hi = np.where(same, t_hi, t_mid)
    # report the endpoint on the inside of the region
    return np.where(inside_lo, t_lo, t_hi)


def _polish_hits(model, region, y, p, x):
    """Newton on (s_y - p, implicit) = 0; keeps a step only if it lowers the residual."""
    for _ in range(3):
        r = np.stack([model.d_y(x, y) - p, region.implicit(x)], axis=-1)
        g1 = model.grad_x_dy(x, y)
        g2 = region.grad(x)
        det = g1[:, 0] * g2[:, 1] - g1[:, 1] * g2[:, 0]
        scale = np.linalg.norm(g1, axis=-1) * np.linalg.norm(g2, axis=-1)
        ok = np.abs(det) > 1e-8 * np.maximum(scale, 1e-300)
        safe = np.where(ok, det, 1.0)
        dx0 = (r[:, 0] * g2[:, 1] - r[:, 1] * g1[:, 1]) / safe
        dx1 = (g1[:, 0] * r[:, 1] - g2[:, 0] * r[:, 0]) / safe
        cand = x - np.stack([dx0, dx1], axis=-1)
        r_new = np.stack([model.d_y(cand, y) - p, region.implicit(cand)], axis=-1)
        better = ok & (np.linalg.norm(r_new, axis=-1) < np.linalg.norm(r, axis=-1))
        x = np.where(better[:, None], cand, x)
    return x


@functools.lru_cache(maxsize=256)
def _trace_cached(model, region, y: float, p: float, cells: int, edge_tol: float) -> LevelSetMesh:
    _, _, pts = _padded_grid(region.bbox, cells)
    phi = model.d_y(pts, y) - p
    nodes, segs = _march(phi, pts)
    if segs.shape[0] == 0:
        return _make_mesh(model, y, p, None, np.zeros((0, 2)), np.zeros((0, 2), dtype=int), [], [])

    # one Newton step towards the level set along grad_x s_y
    g = model.grad_x_dy(nodes, y)
    gg = np.einsum("ij,ij->i", g, g)
    bad = gg < GRAD_FLOOR ** 2
    if bad.any():
        k = int(np.argmax(bad))
        raise DegenerateCell(f"|grad_x s_y| vanishes near x={nodes[k].tolist()}",
                             {"x": nodes[k].tolist(), "y": float(y), "p": float(p)})
    nodes = nodes - ((model.d_y(nodes, y) - p) / gg)[:, None] * g

    # clip against the region
    a_idx, b_idx = segs[:, 0], segs[:, 1]
    a, b = nodes[a_idx], nodes[b_idx]
    in_a = region.implicit(a) <= edge_tol
    in_b = region.implicit(b) <= edge_tol
    in_m = region.implicit(0.5 * (a + b)) <= edge_tol

    new_pts: list[np.ndarray] = []
    new_segs: list[np.ndarray] = []
    n0 = nodes.shape[0]
    counter = [n0]

    def hits_on(mask, t_lo, t_hi):
        t = _bisect_chord(region, a[mask], b[mask], np.full(mask.sum(), t_lo),
                          np.full(mask.sum(), t_hi), edge_tol)
        x = a[mask] + t[:, None] * (b[mask] - a[mask])
        x = _polish_hits(model, region, y, p, x)
        ids = np.arange(counter[0], counter[0] + x.shape[0])
        counter[0] += x.shape[0]
        new_pts.append(x)
        return ids

    keep = in_a & in_b & in_m
    new_segs.append(np.stack([a_idx[keep], b_idx[keep]], axis=-1))
    m = in_a & in_b & ~in_m
    if m.any():
        h1 = hits_on(m, 0.0, 0.5)
        h2 = hits_on(m, 0.5, 1.0)
        new_segs.append(np.stack([a_idx[m], h1], axis=-1))
        new_segs.append(np.stack([h2, b_idx[m]], axis=-1))
    m = ~in_a & ~in_b & in_m
    if m.any():
        h1 = hits_on(m, 0.0, 0.5)
        h2 = hits_on(m, 0.5, 1.0)
        new_segs.append(np.stack([h1, h2], axis=-1))
    m = in_a & ~in_b
    if m.any():
        h = hits_on(m, 0.0, 1.0)
        new_segs.append(np.stack([a_idx[m], h], axis=-1))
    m = ~in_a & in_b
    if m.any():
        h = hits_on(m, 0.0, 1.0)
        new_segs.append(np.stack([h, b_idx[m]], axis=-1))

    all_nodes = np.concatenate([nodes] + new_pts) if new_pts else nodes
    all_segs = np.concatenate(new_segs).astype(int)
    hit_ids = np.arange(n0, all_nodes.shape[0])

    warnings = []
    if hit_ids.size:
        hp = all_nodes[hit_ids]
        nw = model.grad_x_dy(hp, y)
        nw = nw / np.linalg.norm(nw, axis=-1, keepdims=True)
        cos = np.abs(np.einsum("ij,ij->i", nw, region.boundary_normal(hp)))
        for k in np.nonzero(cos > 1.0 - TANGENCY_TOL)[0]:
            msg = {"kind": "tangency", "x": hp[k].tolist(), "y": float(y), "p": float(p),
                   "cos": float(cos[k])}
            logger.info("level curve tangent to boundary at %s", msg)
            warnings.append(msg)
    return _make_mesh(model, y, p, None, all_nodes, all_segs, hit_ids, [], warnings)


def trace_level_set(model, region: Region, y: float, p: float, cells: int = 256,
                    edge_tol: float | None = None) -> LevelSetMesh:
    """X1(y, p) as a polyline mesh on a ``cells x cells`` grid.

    Empty mesh when the level value is not attained inside the region.  Nodes
    with ``implicit <= edge_tol`` count as inside (default ``1e-12`` times the
    region diameter), so a level curve lying on a straight edge is kept.
    Raises :class:`~udot.errors.DegenerateCell` if ``grad_x s_y`` vanishes at a
    contour node.
    """
    if cells < 8:
        raise ValueError("cells must be >= 8")
    if edge_tol is None:
        edge_tol = 1e-12 * region.diameter
    return _trace_cached(model, region, float(y), float(p), int(cells), float(edge_tol))


def sublevel_pieces(mesh: LevelSetMesh, model, q: float):
    """Sub-segments of ``mesh`` where ``s_yy <= q``.

    Returns ``(a, b, seg_index, a_is_cut, b_is_cut)``.  Cut points come from
    linear interpolation of the nodal ``s_yy`` plus one Newton step along the
    segment.
    """
    seg = mesh.segments
    if seg.shape[0] == 0:
        z = np.zeros((0, 2))
        zb = np.zeros(0, dtype=bool)
        return z, z, np.zeros(0, dtype=int), zb, zb
    h0 = mesh.node_syy[seg[:, 0]]
    h1 = mesh.node_syy[seg[:, 1]]
    in0 = h0 <= q
    in1 = h1 <= q
    take = in0 | in1
    a = mesh.nodes[seg[take, 0]]
    b = mesh.nodes[seg[take, 1]]
    in0, in1, h0, h1 = in0[take], in1[take], h0[take], h1[take]
    mixed = in0 != in1
    if mixed.any():
        am, bm = a[mixed], b[mixed]
        t = (q - h0[mixed]) / (h1[mixed] - h0[mixed])
        xt = am + t[:, None] * (bm - am)
        r = model.d_yy(xt, mesh.y) - q
        dr = np.einsum("ij,ij->i", model.grad_x_dyy(xt, mesh.y), bm - am)
        step = np.where(np.abs(dr) > 1e-300, r / np.where(dr == 0, 1.0, dr), 0.0)
        t = np.clip(t - step, 0.0, 1.0)
        cut = am + t[:, None] * (bm - am)
        a = a.copy()
        b = b.copy()
        idx = np.nonzero(mixed)[0]
        a[idx[~in0[mixed]]] = cut[~in0[mixed]]
        b[idx[~in1[mixed]]] = cut[~in1[mixed]]
    return a, b, np.nonzero(take)[0], ~in0, ~in1


def restrict_sublevel(mesh: LevelSetMesh, model, y: float, q: float) -> LevelSetMesh:
    """X2(y, p, q): the part of an X1 mesh where ``s_yy <= q``."""
    if mesh.q is not None:
        raise ValueError("mesh is already restricted")
    if float(y) != mesh.y:
        raise ValueError("mesh was traced at a different y")
    seg = mesh.segments
    if seg.shape[0] == 0:
        return _make_mesh(model, y, mesh.p, q, np.zeros((0, 2)), np.zeros((0, 2), dtype=int), [], [])
    a, b, idx, a_cut, b_cut = sublevel_pieces(mesh, model, q)
    nodes = [mesh.nodes]
    new_segs = seg[idx].copy()
    n = mesh.nodes.shape[0]
    cuts = []
    for is_cut, pts, col in ((a_cut, a, 0), (b_cut, b, 1)):
        k = np.nonzero(is_cut)[0]
        if k.size:
            ids = np.arange(n, n + k.size)
            n += k.size
            nodes.append(pts[k])
            new_segs[k, col] = ids
            cuts.append(ids)
    all_nodes = np.concatenate(nodes)
    hits = mesh.boundary_hits[mesh.node_syy[mesh.boundary_hits] <= q]
    hits = hits[np.isin(hits, new_segs)]
    cut_ids = np.concatenate(cuts) if cuts else np.zeros(0, dtype=int)
    return _make_mesh(model, y, mesh.p, q, all_nodes, new_segs, hits, cut_ids, mesh.warnings)


def integrate_over_mesh(mesh: LevelSetMesh, integrand: Callable) -> float:
    """Quadrature of a vectorised ``integrand(points)`` over the mesh."""
    if mesh.is_empty:
        return 0.0
    return float(np.dot(mesh.quad_weights, integrand(mesh.quad_points)))


def count_components(mesh: LevelSetMesh) -> int:
    return mesh.n_components if not mesh.is_empty else 0


def write_mesh_csv(path, meshes, extra: dict | None = None) -> None:
    """Write polylines as ``component, x1, x2`` rows (prefixed by ``extra`` columns)."""
    if isinstance(meshes, LevelSetMesh):
        meshes = [(extra or {}, meshes)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header_extra = list(meshes[0][0].keys()) if meshes else []
        w.writerow(header_extra + ["component", "x1", "x2"])
        for cols, mesh in meshes:
            for comp, line in enumerate(mesh.polylines()):
                for x1, x2 in line:
                    w.writerow([f"{v:.17g}" for v in cols.values()] + [comp, f"{x1:.17g}", f"{x2:.17g}"])


# ---------------------------------------------------------------------------
# clipped cell areas


def _clip_polys(P, V, counts, c):
    """Sutherland-Hodgman clip of a batch of polygons against ``V[..., c] <= 0``."""
    T, K = P.shape[:2]
    k = np.arange(K)
    valid = k[None, :] < counts[:, None]
    nxt = (k[None, :] + 1) % np.maximum(counts[:, None], 1)
    Pn = np.take_along_axis(P, nxt[..., None], axis=1)
    Vn = np.take_along_axis(V, nxt[..., None], axis=1)
    vc = V[..., c]
    vn = Vn[..., c]
    inc = vc <= 0
    inn = vn <= 0
    keep = valid & inc
    cross = valid & (inc != inn)
    t = vc / np.where(cross, vc - vn, 1.0)
    Pi = P + t[..., None] * (Pn - P)
    Vi = V + t[..., None] * (Vn - V)
    outP = np.empty((T, 2 * K, 2))
    outV = np.empty((T, 2 * K, V.shape[-1]))
    mask = np.empty((T, 2 * K), dtype=bool)
    outP[:, 0::2], outP[:, 1::2] = P, Pi
    outV[:, 0::2], outV[:, 1::2] = V, Vi
    mask[:, 0::2], mask[:, 1::2] = keep, cross
    order = np.argsort(~mask, axis=1, kind="stable")
    outP = np.take_along_axis(outP, order[..., None], axis=1)
    outV = np.take_along_axis(outV, order[..., None], axis=1)
    counts = mask.sum(axis=1)
    kmax = max(int(counts.max()) if counts.size else 1, 1)
    return outP[:, :kmax], outV[:, :kmax], counts


def _poly_area_centroid(P, counts):
    K = P.shape[1]
    k = np.arange(K)
    valid = k[None, :] < counts[:, None]
    nxt = (k[None, :] + 1) % np.maximum(counts[:, None], 1)
    Pn = np.take_along_axis(P, nxt[..., None], axis=1)
    cr = np.where(valid, P[..., 0] * Pn[..., 1] - Pn[..., 0] * P[..., 1], 0.0)
    area2 = cr.sum(axis=1)
    cx = ((P[..., 0] + Pn[..., 0]) * cr).sum(axis=1)
    cy = ((P[..., 1] + Pn[..., 1]) * cr).sum(axis=1)
    area = 0.5 * area2
    safe = np.where(np.abs(area2) > 0, 3.0 * area2, 1.0)
    cen = np.stack([cx / safe, cy / safe], axis=-1)
    area = np.where(counts >= 3, np.abs(area), 0.0)
    return area, cen


def clipped_cell_areas(pts: np.ndarray, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Area and centroid of ``{all constraints <= 0}`` inside every grid cell.

    ``pts`` is ``(N+1, N+1, 2)`` and ``values`` ``(N+1, N+1, C)``.  Each cell is
    split into two triangles on which the constraints are linearly
    interpolated, so linear constraints are handled exactly.
    """
    n = pts.shape[0] - 1
    corners_v = np.stack([values[:-1, :-1], values[1:, :-1], values[1:, 1:], values[:-1, 1:]], axis=2)
    corners_p = np.stack([pts[:-1, :-1], pts[1:, :-1], pts[1:, 1:], pts[:-1, 1:]], axis=2)
    all_in = (corners_v <= 0).all(axis=(2, 3))
    any_out = (corners_v > 0).all(axis=2).any(axis=-1)
    cell_area = np.abs((pts[1, 0, 0] - pts[0, 0, 0]) * (pts[0, 1, 1] - pts[0, 0, 1]))
    areas = np.where(all_in, cell_area, 0.0)
    cents = corners_p.mean(axis=2)
    mixed = ~all_in & ~any_out
    if mixed.any():
        cp = corners_p[mixed]
        cv = corners_v[mixed]
        tri_p = np.concatenate([cp[:, [0, 1, 2]], cp[:, [0, 2, 3]]])
        tri_v = np.concatenate([cv[:, [0, 1, 2]], cv[:, [0, 2, 3]]])
        counts = np.full(tri_p.shape[0], 3)
        for c in range(values.shape[-1]):
            tri_p, tri_v, counts = _clip_polys(tri_p, tri_v, counts, c)
        a, cen = _poly_area_centroid(tri_p, counts)
        m = cp.shape[0]
        a1, a2 = a[:m], a[m:]
        tot = a1 + a2
        safe = np.where(tot > 0, tot, 1.0)
        c_mix = (cen[:m] * a1[:, None] + cen[m:] * a2[:, None]) / safe[:, None]
        areas[mixed] = tot
        cents[mixed] = np.where(tot[:, None] > 0, c_mix, cp.mean(axis=1))
    return areas, cents


def _region_constraints(region, pts) -> list[np.ndarray]:
    if region.pieces is not None:
        c = region.pieces(pts)
        return [c[..., k] for k in range(c.shape[-1])]
    return [region.implicit(pts)]


def _sublevel_cells(model, region, y, p, q, cells):
    _, _, pts = _padded_grid(region.bbox, cells)
    cons = [model.d_y(pts, y) - p] + _region_constraints(region, pts)
    if q is not None:
        cons.append(model.d_yy(pts, y) - q)
    return clipped_cell_areas(pts, np.stack(cons, axis=-1))


def sublevel_area(model, region: Region, y: float, p: float, q: float | None = None,
                  cells: int = 256, density: Callable | None = None) -> float:
    """Area (or ``density`` mass) of ``{s_y <= p} ∩ {s_yy <= q} ∩ X``."""
    if cells < 16:
        raise ValueError("cells must be >= 16")
    areas, cents = _sublevel_cells(model, region, y, p, q, cells)
    if density is None:
        return float(areas.sum())
    m = areas > 0
    return float(np.dot(areas[m], density(cents[m])))


def region_mass(region: Region, density: Callable | None = None, cells: int = 256) -> float:
    """Area (or ``density`` mass) of the region itself."""
    _, _, pts = _padded_grid(region.bbox, cells)
    areas, cents = clipped_cell_areas(pts, np.stack(_region_constraints(region, pts), axis=-1))
    if density is None:
        return float(areas.sum())
    m = areas > 0
    return float(np.dot(areas[m], density(cents[m])))


def p_range(model, region: Region, y: float, cells: int = 256) -> tuple[float, float]:
    """Approximate ``(min, max)`` of ``s_y(., y)`` over the region (grid nodes inside it)."""
    _, _, pts = _padded_grid(region.bbox, cells)
    inside = region.implicit(pts) <= 0
    vals = model.d_y(pts[inside], y)
    return float(vals.min()), float(vals.max())

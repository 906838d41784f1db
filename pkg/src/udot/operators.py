"""Level-set integral operators for the one-dimensional target case.

For a source density ``f`` the two operators are

    G1(y, p, q) = ∫_{X1(y,p)}    (q - s_yy) f w dH¹
    G2(y, p, q) = ∫_{X2(y,p,q)}  (q - s_yy) f w dH¹,      w = 1/|grad_x s_y|

G2 is nondecreasing in ``q`` and its inversion ``q = invert_G2(y, p, beta)`` is
the right-hand side of the ODE marched by :mod:`udot.solver`.

First derivatives of G2 are computed from moving-curve formulas: as ``p``
(or ``y``) changes, X1 slides along its normal with speed ``w`` (or
``-s_yy w``), which gives a normal-divergence integral plus endpoint terms
where the curve meets the region boundary.  The endpoints where ``s_yy = q``
contribute nothing because the integrand vanishes there.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from udot.errors import EmptyLevelSet, NonPositiveMass, NotElliptic, TransversalityLoss
from udot.geometry import LevelSetMesh, Region, sublevel_pieces, trace_level_set

logger = logging.getLogger(__name__)

_GAUSS = 0.5 / math.sqrt(3.0)
TRANSVERSALITY_FLOOR = 1e-4
SLOPE_FLOOR = 1e-12
LENGTH_FLOOR = 1e-12


@dataclass(frozen=True)
class OperatorPoint:
    y: float
    p: float
    q: float


def density_values(f, x: np.ndarray) -> np.ndarray:
    """Evaluate a density given as a callable or a constant at points ``x``."""
    shape = np.shape(x)[:-1]
    if callable(f):
        return np.broadcast_to(np.asarray(f(x), dtype=float), shape)
    return np.full(shape, float(f))


def _x1(model, region, y, p, cells) -> LevelSetMesh:
    return trace_level_set(model, region, y, p, cells)


def _pieces_quadrature(mesh: LevelSetMesh, model, q: float | None):
    """Gauss points/weights of X2 (or of X1 when ``q`` is None), plus endpoints."""
    if q is None:
        a = mesh.nodes[mesh.segments[:, 0]]
        b = mesh.nodes[mesh.segments[:, 1]]
    else:
        a, b, _, _, _ = sublevel_pieces(mesh, model, q)
    ln = np.linalg.norm(b - a, axis=-1)
    pts = np.concatenate([a + (0.5 - _GAUSS) * (b - a), a + (0.5 + _GAUSS) * (b - a)])
    wts = np.concatenate([0.5 * ln, 0.5 * ln])
    return pts, wts, a, b


@dataclass(frozen=True)
class _Parts:
    value: float
    slope: float
    theta: float
    length: float


def _parts(mesh: LevelSetMesh, model, f, q: float, restrict: bool = True) -> _Parts:
    pts, wts, a, b = _pieces_quadrature(mesh, model, q if restrict else None)
    if pts.shape[0] == 0:
        return _Parts(0.0, 0.0, -math.inf, 0.0)
    y = mesh.y
    syy = model.d_yy(pts, y)
    w = 1.0 / np.linalg.norm(model.grad_x_dy(pts, y), axis=-1)
    fw = density_values(f, pts) * w
    ends = np.concatenate([a, b])
    theta = float(max(np.max(q - syy), np.max(q - model.d_yy(ends, y))))
    return _Parts(float(np.dot(wts, (q - syy) * fw)), float(np.dot(wts, fw)), theta,
                  float(wts.sum()))


# ---------------------------------------------------------------------------
# values


def eval_G2(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    """Integral of ``(q - s_yy) f w`` over X2; zero when X2 is empty."""
    mesh = _x1(model, region, pt.y, pt.p, cells)
    return _parts(mesh, model, f, pt.q).value


def eval_G1(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    """Same integrand over all of X1; may be negative."""
    mesh = _x1(model, region, pt.y, pt.p, cells)
    return _parts(mesh, model, f, pt.q, restrict=False).value


def dG2_dq(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    mesh = _x1(model, region, pt.y, pt.p, cells)
    return _parts(mesh, model, f, pt.q).slope


def dG1_dq(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    mesh = _x1(model, region, pt.y, pt.p, cells)
    return _parts(mesh, model, f, pt.q, restrict=False).slope


# ---------------------------------------------------------------------------
# moving-curve derivatives


def _unit_normal(model, x, y):
    g = model.grad_x_dy(x, y)
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def _integrand(model, f, x, y, q):
    g = model.grad_x_dy(x, y)
    return (q - model.d_yy(x, y)) * density_values(f, x) / np.linalg.norm(g, axis=-1)


def _div_a_normal(model, f, x, y, q, h):
    """``div(a n)`` for ``a = (q - s_yy) f w`` and the unit normal field ``n``.

    Normal derivative of ``a`` plus ``a`` times the curvature (tangential
    derivative of ``n`` projected on the tangent), both by central differences.
    """
    n = _unit_normal(model, x, y)
    tau = np.stack([-n[:, 1], n[:, 0]], axis=-1)
    da = (_integrand(model, f, x + h * n, y, q) - _integrand(model, f, x - h * n, y, q)) / (2 * h)
    n_plus = _unit_normal(model, x + h * tau, y)
    n_minus = _unit_normal(model, x - h * tau, y)
    curv = np.einsum("ij,ij->i", n_plus - n_minus, tau) / (2 * h)
    return da + _integrand(model, f, x, y, q) * curv


def _boundary_terms(mesh: LevelSetMesh, model, region: Region, f, q: float):
    """Per-hit ``a w c / sqrt(1 - c^2)`` and ``s_yy`` for hits inside X2."""
    hits = mesh.boundary_hits
    hits = hits[mesh.node_syy[hits] <= q]
    if hits.size == 0:
        return np.zeros(0), np.zeros(0)
    x = mesh.nodes[hits]
    y = mesh.y
    n_w = _unit_normal(model, x, y)
    c = np.einsum("ij,ij->i", n_w, region.boundary_normal(x))
    s = np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    if np.any(s < TRANSVERSALITY_FLOOR):
        k = int(np.argmin(s))
        raise TransversalityLoss(
            "level curve meets the region boundary tangentially",
            {"x": x[k].tolist(), "y": y, "p": mesh.p, "q": float(q), "sin": float(s[k])},
        )
    w = 1.0 / np.linalg.norm(model.grad_x_dy(x, y), axis=-1)
    a = _integrand(model, f, x, y, q)
    return a * w * c / s, model.d_yy(x, y)


def _h_geo(region: Region) -> float:
    return 1e-5 * region.diameter


def dG2_dp(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    """Derivative of G2 in ``p``.

    Raises :class:`~udot.errors.TransversalityLoss` when X1 meets the boundary
    at a nearly tangential angle.
    """
    mesh = _x1(model, region, pt.y, pt.p, cells)
    pts, wts, _, _ = _pieces_quadrature(mesh, model, pt.q)
    if pts.shape[0] == 0:
        return 0.0
    y, q = pt.y, pt.q
    w = 1.0 / np.linalg.norm(model.grad_x_dy(pts, y), axis=-1)
    interior = float(np.dot(wts, _div_a_normal(model, f, pts, y, q, _h_geo(region)) * w))
    bterm, _ = _boundary_terms(mesh, model, region, f, q)
    return interior - float(bterm.sum())


def dG2_dy(model, region: Region, f, pt: OperatorPoint, cells: int = 256) -> float:
    """Derivative of G2 in ``y``: explicit dependence plus the curve moving with speed ``-s_yy w``."""
    mesh = _x1(model, region, pt.y, pt.p, cells)
    pts, wts, _, _ = _pieces_quadrature(mesh, model, pt.q)
    if pts.shape[0] == 0:
        return 0.0
    y, q = pt.y, pt.q
    g = model.grad_x_dy(pts, y)
    gn = np.linalg.norm(g, axis=-1)
    w = 1.0 / gn
    n = g / gn[:, None]
    syy = model.d_yy(pts, y)
    fv = density_values(f, pts)
    w_y = -w * w * np.einsum("ij,ij->i", n, model.grad_x_dyy(pts, y))
    a_y = -model.d_yyy(pts, y) * fv * w + (q - syy) * fv * w_y
    div = _div_a_normal(model, f, pts, y, q, _h_geo(region))
    interior = float(np.dot(wts, a_y - div * w * syy))
    bterm, b_syy = _boundary_terms(mesh, model, region, f, q)
    return interior + float(np.dot(bterm, b_syy))


# ---------------------------------------------------------------------------
# inversion and ellipticity


def invert_G2(model, region: Region, f, y: float, p: float, beta: float, cells: int = 256,
              q0: float | None = None, rtol: float = 1e-8, max_iter: int = 200) -> float:
    """The unique ``q`` with ``G2(y, p, q) = beta`` (safeguarded Newton).

    ``q0`` is an optional warm start.  Raises :class:`~udot.errors.NonPositiveMass`
    for ``beta <= 0`` and :class:`~udot.errors.EmptyLevelSet` when X1 has
    (numerically) zero length.
    """
    loc = {"y": float(y), "p": float(p), "beta": float(beta)}
    if not beta > 0:
        raise NonPositiveMass("target mass must be positive", loc)
    mesh = _x1(model, region, y, p, cells)
    if mesh.total_length < LENGTH_FLOOR:
        raise EmptyLevelSet("level set is empty at this (y, p)", loc)

    def parts(q):
        return _parts(mesh, model, f, q)

    lo = float(mesh.node_syy.min()) - 1e-9
    span = max(1.0, float(np.ptp(mesh.node_syy)))
    hi = lo + span
    if q0 is not None and q0 > hi:
        hi = float(q0)
    for _ in range(200):
        if parts(hi).value >= beta:
            break
        lo, hi = hi, lo + 2.0 * (hi - lo)
    else:
        raise EmptyLevelSet("could not bracket the target mass", loc)

    q = float(q0) if q0 is not None and lo < q0 < hi else 0.5 * (lo + hi)
    for _ in range(max_iter):
        pr = parts(q)
        r = pr.value - beta
        if abs(r) <= rtol * beta:
            return q
        if r < 0:
            lo = q
        else:
            hi = q
        q_new = q - r / pr.slope if pr.slope > SLOPE_FLOOR else None
        if q_new is None or not lo < q_new < hi:
            q_new = 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * max(1.0, abs(q)):
            return q_new
        q = q_new
    logger.warning("invert_G2 hit the iteration cap at %s", loc)
    return q


def ellipticity_constant(model, region: Region, f, pt: OperatorPoint,
                         cells: int = 256) -> tuple[float, float]:
    """``(lambda, theta)``: ``theta`` is the largest ``q - s_yy`` on X2, ``lambda = G2/theta``."""
    mesh = _x1(model, region, pt.y, pt.p, cells)
    pr = _parts(mesh, model, f, pt.q)
    if not pr.value > 0 or not pr.theta > 0:
        raise NotElliptic("G2 vanishes at this point", {"y": pt.y, "p": pt.p, "q": pt.q})
    return pr.value / pr.theta, pr.theta


# ---------------------------------------------------------------------------
# batch evaluation


def _row(model, region, f, pt, cells) -> dict:
    mesh = _x1(model, region, pt.y, pt.p, cells)
    pr = _parts(mesh, model, f, pt.q)
    g1 = _parts(mesh, model, f, pt.q, restrict=False).value
    lam = pr.value / pr.theta if pr.value > 0 and pr.theta > 0 else 0.0
    return {"y": pt.y, "p": pt.p, "q": pt.q, "G1": g1, "G2": pr.value, "dG2dq": pr.slope,
            "lambda": lam}


def evaluate_batch(model, region: Region, f, points: Iterable[OperatorPoint], cells: int = 256,
                   workers: int | None = None) -> list[dict]:
    """Operator values at many points; results keep the input order."""
    points = list(points)
    if not workers or workers <= 1:
        return [_row(model, region, f, pt, cells) for pt in points]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda pt: _row(model, region, f, pt, cells), points))


BATCH_COLUMNS = ("y", "p", "q", "G1", "G2", "dG2dq", "lambda")


def write_batch_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BATCH_COLUMNS)
        for r in rows:
            w.writerow([f"{float(r[c]):.17g}" for c in BATCH_COLUMNS])

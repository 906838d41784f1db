"""Surplus functions s(x, y) on X x Y with X in R^2 and Y an interval or a circle.

A :class:`SurplusModel` is a bundle of vectorised callables.  Every callable takes
``x`` of shape ``(..., 2)`` and ``y`` broadcastable against ``x[..., 0]``; scalar
derivatives return shape ``(...)`` and x-gradients shape ``(..., 2)``.

Presets ship with hand-written derivatives.  :func:`finite_difference_errors`
is the guard that keeps them honest.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import brentq

from udot._sampling import halton, points_in_region
from udot.errors import NoPreimage, NotConvex, ZeroMargin

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
DEFAULT_FLOOR = 1e-8


class DerivativeBundle(NamedTuple):
    s: np.ndarray
    s_y: np.ndarray
    s_yy: np.ndarray
    s_yyy: np.ndarray
    grad_x: np.ndarray
    grad_x_dy: np.ndarray
    grad_x_dyy: np.ndarray


@dataclass(frozen=True)
class SurplusModel:
    """Surplus and its analytic derivatives.

    ``period`` is ``None`` for interval targets and ``2*pi`` for targets on the
    circle, in which case y is an angle and all y arithmetic is taken mod 2*pi.
    ``convexify_coefficient`` records the ``c * y**2 / 2`` term added by
    :meth:`convexified` (zero for the raw model).
    """

    eval: Callable
    d_y: Callable
    d_yy: Callable
    d_yyy: Callable
    grad_x: Callable
    grad_x_dy: Callable
    grad_x_dyy: Callable
    label: str
    period: float | None = None
    convexify_coefficient: float = 0.0

    @property
    def periodic(self) -> bool:
        return self.period is not None

    def wrap(self, y):
        """Reduce y to ``[0, period)`` on periodic models; identity otherwise."""
        if self.period is None:
            return y
        return np.mod(y, self.period)

    def difference(self, y, ybar):
        """``y - ybar``, taken in ``(-period/2, period/2]`` on periodic models."""
        d = np.asarray(y, dtype=float) - ybar
        if self.period is None:
            return d
        half = 0.5 * self.period
        return half - np.mod(half - d, self.period)

    def convexified(self, c: float) -> "SurplusModel":
        """Return ``s + c*y**2/2``.

        Adding a function of y alone leaves the optimal coupling unchanged and
        shifts the target potential by the same function.  Not available on
        periodic models since ``y**2`` is not periodic.
        """
        if c == 0.0:
            return self
        if self.periodic:
            raise ValueError("cannot convexify a periodic surplus with y**2/2")
        s, s_y, s_yy = self.eval, self.d_y, self.d_yy
        return dataclasses.replace(
            self,
            eval=lambda x, y: s(x, y) + 0.5 * c * np.asarray(y) ** 2 + 0.0 * x[..., 0],
            d_y=lambda x, y: s_y(x, y) + c * np.asarray(y) + 0.0 * x[..., 0],
            d_yy=lambda x, y: s_yy(x, y) + c + 0.0 * x[..., 0],
            label=f"{self.label}+{c:g}y^2/2",
            convexify_coefficient=self.convexify_coefficient + c,
        )


@dataclass(frozen=True)
class MarginReport:
    """Minimum of a sampled margin, where it happened, and how many samples were used."""

    min_value: float
    argmin_location: tuple
    samples_used: int

    def to_dict(self) -> dict:
        x, y = self.argmin_location
        return {
            "min_value": float(self.min_value),
            "argmin_x": [float(v) for v in np.ravel(x)],
            "argmin_y": [float(v) for v in np.ravel(y)],
            "samples_used": int(self.samples_used),
        }


def _pair(a, b):
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    return np.stack([a, b], axis=-1)


# ---------------------------------------------------------------------------
# plug-in registry

_REGISTRY: dict[str, Callable[[], SurplusModel]] = {}


def register_surplus(name: str):
    """Decorator registering a zero-argument factory under ``name``."""

    def deco(factory: Callable[[], SurplusModel]):
        _REGISTRY[name] = factory
        return factory

    return deco


def available_surpluses() -> list[str]:
    return sorted(_REGISTRY)


def get_surplus(name: str, convexify_coefficient: float = 0.0) -> SurplusModel:
    try:
        model = _REGISTRY[name]()
    except KeyError:
        raise KeyError(f"unknown surplus {name!r}; known: {available_surpluses()}") from None
    return model.convexified(convexify_coefficient)


@register_surplus("annulus")
def annulus_surplus() -> SurplusModel:
    """s(x, theta) = x . (cos theta, sin theta)."""

    def s(x, y):
        return x[..., 0] * np.cos(y) + x[..., 1] * np.sin(y)

    def s_y(x, y):
        return -x[..., 0] * np.sin(y) + x[..., 1] * np.cos(y)

    return SurplusModel(
        eval=s,
        d_y=s_y,
        d_yy=lambda x, y: -s(x, y),
        d_yyy=lambda x, y: -s_y(x, y),
        grad_x=lambda x, y: _pair(np.cos(y) + 0.0 * x[..., 0], np.sin(y) + 0.0 * x[..., 0]),
        grad_x_dy=lambda x, y: _pair(-np.sin(y) + 0.0 * x[..., 0], np.cos(y) + 0.0 * x[..., 0]),
        grad_x_dyy=lambda x, y: _pair(-np.cos(y) + 0.0 * x[..., 0], -np.sin(y) + 0.0 * x[..., 0]),
        label="annulus",
        period=TWO_PI,
    )


@register_surplus("strip")
def strip_surplus() -> SurplusModel:
    """s(x, y) = x1 * y."""
    return SurplusModel(
        eval=lambda x, y: x[..., 0] * y,
        d_y=lambda x, y: x[..., 0] + 0.0 * np.asarray(y),
        d_yy=lambda x, y: 0.0 * x[..., 0] + 0.0 * np.asarray(y),
        d_yyy=lambda x, y: 0.0 * x[..., 0] + 0.0 * np.asarray(y),
        grad_x=lambda x, y: _pair(np.asarray(y) + 0.0 * x[..., 0], 0.0 * x[..., 0]),
        grad_x_dy=lambda x, y: _pair(1.0 + 0.0 * x[..., 0] + 0.0 * np.asarray(y), 0.0 * x[..., 0]),
        grad_x_dyy=lambda x, y: _pair(0.0 * x[..., 0] + 0.0 * np.asarray(y), 0.0 * x[..., 0]),
        label="strip",
    )


@register_surplus("tilted")
def tilted_surplus() -> SurplusModel:
    """s(x, y) = x1 * y + x2 * y**2 / 2."""
    return SurplusModel(
        eval=lambda x, y: x[..., 0] * y + 0.5 * x[..., 1] * np.asarray(y) ** 2,
        d_y=lambda x, y: x[..., 0] + x[..., 1] * y,
        d_yy=lambda x, y: x[..., 1] + 0.0 * np.asarray(y),
        d_yyy=lambda x, y: 0.0 * x[..., 0] + 0.0 * np.asarray(y),
        grad_x=lambda x, y: _pair(np.asarray(y) + 0.0 * x[..., 0], 0.5 * np.asarray(y) ** 2 + 0.0 * x[..., 0]),
        grad_x_dy=lambda x, y: _pair(1.0 + 0.0 * x[..., 0], np.asarray(y) + 0.0 * x[..., 0]),
        grad_x_dyy=lambda x, y: _pair(0.0 * x[..., 0] + 0.0 * np.asarray(y), 1.0 + 0.0 * x[..., 0]),
        label="tilted",
    )


# ---------------------------------------------------------------------------
# evaluation and checks


def eval_bundle(model: SurplusModel, x, y) -> DerivativeBundle:
    x = np.asarray(x, dtype=float)
    return DerivativeBundle(
        model.eval(x, y),
        model.d_y(x, y),
        model.d_yy(x, y),
        model.d_yyy(x, y),
        model.grad_x(x, y),
        model.grad_x_dy(x, y),
        model.grad_x_dyy(x, y),
    )


def finite_difference_errors(model: SurplusModel, x, y, h: float = 1e-4) -> dict[str, float]:
    """Worst error of each analytic derivative against central differences.

    Each derivative is differenced from the next-lower analytic one, so the
    chain ``s -> s_y -> s_yy -> s_yyy`` and the x-gradients are all tied back
    to ``eval``.  Errors are relative with a unit floor: ``|fd - an| / max(1, |an|)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    e = np.array([1.0, 0.0])
    f = np.array([0.0, 1.0])

    def dy(fn):
        return (fn(x, y + h) - fn(x, y - h)) / (2 * h)

    def dx(fn):
        return np.stack(
            [(fn(x + h * e, y) - fn(x - h * e, y)) / (2 * h), (fn(x + h * f, y) - fn(x - h * f, y)) / (2 * h)],
            axis=-1,
        )

    def rel(fd, an):
        return float(np.max(np.abs(fd - an) / np.maximum(1.0, np.abs(an))))

    return {
        "d_y": rel(dy(model.eval), model.d_y(x, y)),
        "d_yy": rel(dy(model.d_y), model.d_yy(x, y)),
        "d_yyy": rel(dy(model.d_yy), model.d_yyy(x, y)),
        "grad_x": rel(dx(model.eval), model.grad_x(x, y)),
        "grad_x_dy": rel(dx(model.d_y), model.grad_x_dy(x, y)),
        "grad_x_dyy": rel(dx(model.d_yy), model.grad_x_dyy(x, y)),
    }


def _sample_y(y_interval, n, seed, dim=1):
    lo, hi = y_interval
    return lo + (hi - lo) * halton(n, dim, seed=seed)


def check_nondegeneracy(model: SurplusModel, region, y_interval, n_samples: int = 512,
                        seed: int = 0, floor: float = DEFAULT_FLOOR) -> MarginReport:
    """Minimum of ``|grad_x s_y|`` over quasi-random samples of X x Y."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    xs = points_in_region(region, n_samples, seed=seed)
    ys = _sample_y(y_interval, n_samples, seed + 1)[:, 0]
    vals = np.linalg.norm(model.grad_x_dy(xs, ys), axis=-1)
    i = int(np.argmin(vals))
    report = MarginReport(float(vals[i]), (xs[i].copy(), float(ys[i])), n_samples)
    if report.min_value < floor:
        raise ZeroMargin(f"non-degeneracy margin {report.min_value:.3g} below {floor:g}", report,
                         {"x": xs[i].tolist(), "y": float(ys[i])})
    return report


def check_twist(model: SurplusModel, region, y_interval, n_samples: int = 512,
                seed: int = 0, floor: float = DEFAULT_FLOOR) -> MarginReport:
    """Minimum of ``|D_x s(x,y) - D_x s(x,ybar)| / |y - ybar|`` over sampled triples."""
    xs = points_in_region(region, n_samples, seed=seed)
    yy = _sample_y(y_interval, n_samples, seed + 1, dim=2)
    d = np.abs(model.difference(yy[:, 0], yy[:, 1]))
    keep = d > 1e-12
    xs, yy, d = xs[keep], yy[keep], d[keep]
    diff = model.grad_x(xs, yy[:, 0]) - model.grad_x(xs, yy[:, 1])
    vals = np.linalg.norm(diff, axis=-1) / d
    i = int(np.argmin(vals))
    report = MarginReport(float(vals[i]), (xs[i].copy(), (float(yy[i, 0]), float(yy[i, 1]))), int(keep.sum()))
    if report.min_value < floor:
        raise ZeroMargin(f"twist margin {report.min_value:.3g} below {floor:g}", report,
                         {"x": xs[i].tolist(), "y": float(yy[i, 0]), "ybar": float(yy[i, 1])})
    return report


def check_enhanced_twist(model: SurplusModel, region, y_interval, n_samples: int = 512,
                         seed: int = 0, floor: float = DEFAULT_FLOOR) -> MarginReport:
    """Minimum over sampled (x, y, ybar) of the part of ``D_x s(x,y) - D_x s(x,ybar)``
    orthogonal to ``grad_x s_y(x, ybar)``, divided by ``|y - ybar|``.

    A zero minimum means the potential-difference gradient can be parallel to
    the level-set normal, so continuity of v' is not expected.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    xs = points_in_region(region, n_samples, seed=seed)
    yy = _sample_y(y_interval, n_samples, seed + 1, dim=2)
    d = np.abs(model.difference(yy[:, 0], yy[:, 1]))
    keep = d > 1e-12
    xs, yy, d = xs[keep], yy[keep], d[keep]
    diff = model.grad_x(xs, yy[:, 0]) - model.grad_x(xs, yy[:, 1])
    nrm = model.grad_x_dy(xs, yy[:, 1])
    nlen = np.linalg.norm(nrm, axis=-1)
    safe = np.where(nlen > 0, nlen, 1.0)
    # 2-d cross product = component orthogonal to the normal direction
    orth = np.where(nlen > 0, np.abs(diff[:, 0] * nrm[:, 1] - diff[:, 1] * nrm[:, 0]) / safe,
                    np.linalg.norm(diff, axis=-1))
    vals = orth / d
    i = int(np.argmin(vals))
    report = MarginReport(float(vals[i]), (xs[i].copy(), (float(yy[i, 0]), float(yy[i, 1]))), int(keep.sum()))
    if report.min_value < floor:
        raise ZeroMargin(f"enhanced twist margin {report.min_value:.3g} below {floor:g}", report,
                         {"x": xs[i].tolist(), "y": float(yy[i, 0]), "ybar": float(yy[i, 1])})
    return report


def s_exp(model: SurplusModel, x, p, y_interval=(0.0, TWO_PI), tol: float = 1e-8, n_scan: int = 1025) -> float:
    """The y with ``D_x s(x, y) = p`` (the s-exponential of p at x).

    Scans the target interval for the best starting point, then runs
    Gauss-Newton on ``|D_x s(x, y) - p|^2``.  Raises :class:`NoPreimage` when
    the residual at the minimiser exceeds ``tol``.
    """
    x = np.asarray(x, dtype=float)
    p = np.asarray(p, dtype=float)
    lo, hi = y_interval
    grid = np.linspace(lo, hi, n_scan)
    xb = np.broadcast_to(x, (n_scan, 2))
    res = np.linalg.norm(model.grad_x(xb, grid) - p, axis=-1)
    y = float(grid[int(np.argmin(res))])
    for _ in range(60):
        r = model.grad_x(x, y) - p
        jac = model.grad_x_dy(x, y)
        jj = float(jac @ jac)
        if jj == 0.0:
            break
        step = float(jac @ r) / jj
        y_new = y - step
        if not model.periodic:
            y_new = min(max(y_new, lo), hi)
        if abs(y_new - y) < 1e-15 * max(1.0, abs(y)):
            y = y_new
            break
        y = y_new
    resid = float(np.linalg.norm(model.grad_x(x, y) - p))
    if resid > tol:
        raise NoPreimage(f"p={p.tolist()} not in the range of D_x s(x, .) (residual {resid:.3g})",
                         {"x": x.tolist(), "p": p.tolist()})
    return float(model.wrap(y))


def legendre_dual(model: SurplusModel, x, p: float, y_interval, n_check: int = 257) -> tuple[float, float]:
    """``(sup_y [y p - s(x, y)], argmax)`` over the target interval.

    Requires ``s_yy(x, .) > 0`` on the interval (checked on ``n_check`` points).
    """
    x = np.asarray(x, dtype=float)
    lo, hi = y_interval
    grid = np.linspace(lo, hi, n_check)
    syy = model.d_yy(np.broadcast_to(x, (n_check, 2)), grid)
    if np.any(syy <= 0):
        j = int(np.argmin(syy))
        raise NotConvex(f"s_yy = {syy[j]:.3g} <= 0; add a convex function of y first",
                        {"x": x.tolist(), "y": float(grid[j])})

    def slope(y):
        return p - float(model.d_y(x, y))

    if slope(lo) <= 0:
        y_star = lo
    elif slope(hi) >= 0:
        y_star = hi
    else:
        y_star = brentq(slope, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps)
    return float(y_star * p - model.eval(x, y_star)), float(y_star)

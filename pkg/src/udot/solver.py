"""Solve the one-dimensional-target transport problem as an ODE for ``k = v'``.

Along the target, the local equation ``G2(y, k, k') = g(y)`` is solved for
``k'`` by :func:`~udot.operators.invert_G2` and marched with classical RK4.
The target potential ``v`` is the trapezoidal antiderivative of ``k``, the source
potential its conjugate ``u(x) = max_y s(x, y) - v(y)``, and the transport map
the maximiser.  The ``verify_*`` helpers and :func:`jacobian_check` test the
computed solution against identities it must satisfy.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from udot.errors import (BracketFailure, EllipticityLoss, EmptyLevelSet, NonPositiveMass,
                         RejectionStall, ShootingDivergence, SolverAbort)
from udot.geometry import (Region, annulus_region, p_range, region_mass, sublevel_area,
                           sublevel_pieces, trace_level_set, unit_square_region)
from udot.operators import OperatorPoint, _parts, density_values, invert_G2
from udot.surplus import SurplusModel, get_surplus

logger = logging.getLogger(__name__)

BC_MODES = ("initial", "nested", "periodic-shooting")
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_GAUSS = 0.5 / math.sqrt(3.0)


# ---------------------------------------------------------------------------
# problem description


@dataclass(frozen=True)
class Density:
    """A density with known bounds.  Callable on points; vectorised."""

    func: Callable
    lower: float
    upper: float

    def __call__(self, z):
        return self.func(z)

    @classmethod
    def constant(cls, c: float, point_dim: int = 2) -> "Density":
        c = float(c)
        if point_dim == 2:
            return cls(lambda x: np.full(np.shape(x)[:-1], c), c, c)
        return cls(lambda y: np.full(np.shape(y), c), c, c)


@dataclass(frozen=True)
class TransportProblem:
    """Surplus, source region and densities, target interval and grid sizes.

    Construction checks that ``g > 0`` on the ODE grid and that both densities
    carry unit mass within ``1e-3``.
    """

    model: SurplusModel
    region: Region
    f: Density
    g: Density
    y_interval: tuple[float, float]
    cells: int = 256
    ode_steps: int = 256
    exact_k: Callable | None = None
    label: str = "custom"

    def __post_init__(self):
        y0, y1 = self.y_interval
        if not y1 > y0:
            raise ValueError("empty target interval")
        if self.cells < 8 or self.ode_steps < 2:
            raise ValueError("grid sizes too small")
        if self.periodic and not math.isclose(y1 - y0, self.model.period, rel_tol=1e-12):
            raise ValueError("periodic target interval must span one period")
        gv = np.asarray(self.g(self.y_grid), dtype=float)
        if np.any(gv <= 0):
            k = int(np.argmin(gv))
            raise NonPositiveMass("target density must be positive", {"y": float(self.y_grid[k])})
        g_mass = quad(lambda t: float(self.g(np.array(t))), y0, y1, limit=200)[0]
        f_mass = region_mass(self.region, self.f, cells=max(self.cells, 128))
        for name, m in (("source", f_mass), ("target", g_mass)):
            if abs(m - 1.0) > 1e-3:
                raise NonPositiveMass(f"{name} density has mass {m:.6g}, expected 1", {"mass": m})

    @property
    def periodic(self) -> bool:
        return self.model.periodic

    @property
    def y_grid(self) -> np.ndarray:
        return np.linspace(self.y_interval[0], self.y_interval[1], self.ode_steps + 1)

    def g_cdf(self, y: float) -> float:
        return quad(lambda t: float(self.g(np.array(t))), self.y_interval[0], y, limit=200)[0]


def make_problem(name: str, cells: int = 256, ode_steps: int = 256,
                 convexify_coefficient: float = 0.0) -> TransportProblem:
    """Preset problems: ``annulus`` (periodic), ``strip`` and ``tilted`` (unit square)."""
    model = get_surplus(name, convexify_coefficient)
    c = convexify_coefficient
    if name == "annulus":
        f = Density.constant(4.0 / (3.0 * math.pi))
        g = Density.constant(1.0 / (2.0 * math.pi), point_dim=1)
        return TransportProblem(model, annulus_region(), f, g, (0.0, 2.0 * math.pi), cells,
                                ode_steps, exact_k=lambda y: np.zeros_like(np.asarray(y, float)),
                                label=name)
    if name == "strip":
        return TransportProblem(model, unit_square_region(), Density.constant(1.0),
                                Density.constant(1.0, point_dim=1), (0.0, 1.0), cells, ode_steps,
                                exact_k=lambda y: (1.0 + c) * np.asarray(y, float), label=name)
    if name == "tilted":
        return TransportProblem(model, unit_square_region(), Density.constant(1.0),
                                Density.constant(1.0, point_dim=1), (0.0, 1.0), cells, ode_steps,
                                label=name)
    raise KeyError(f"no preset problem {name!r}")


# ---------------------------------------------------------------------------
# solution container


@dataclass(frozen=True)
class PotentialSolution:
    y_grid: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q_used: np.ndarray
    residual: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    COLUMNS = ("y", "k", "v", "q_used", "residual")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in zip(self.y_grid, self.k, self.v, self.q_used, self.residual):
                w.writerow([f"{float(t):.17g}" for t in row])

    @classmethod
    def from_csv(cls, path) -> "PotentialSolution":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(cls.COLUMNS)}")
        data = np.array([[float(t) for t in r] for r in rows[1:]])
        if data.ndim != 2 or data.shape[0] < 2:
            raise ValueError(f"{path}: need at least two rows")
        return cls(*(data[:, i] for i in range(5)))


def trapezoid_antiderivative(y: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = np.zeros_like(k)
    out[1:] = np.cumsum(0.5 * (k[1:] + k[:-1]) * np.diff(y))
    return out


# ---------------------------------------------------------------------------
# marching


def _rhs(problem: TransportProblem, y: float, k: float, q0: float | None) -> float:
    beta = float(problem.g(np.array(y)))
    return invert_G2(problem.model, problem.region, problem.f, y, k, beta, problem.cells, q0=q0)


def _rk4_step(problem, y, k, h, q_prev):
    q1 = _rhs(problem, y, k, q_prev)
    q2 = _rhs(problem, y + 0.5 * h, k + 0.5 * h * q1, q1)
    q3 = _rhs(problem, y + 0.5 * h, k + 0.5 * h * q2, q2)
    q4 = _rhs(problem, y + h, k + h * q3, q3)
    return k + h * (q1 + 2.0 * q2 + 2.0 * q3 + q4) / 6.0, q1


def _step_with_retry(problem, y, k, h, q_prev):
    try:
        return _rk4_step(problem, y, k, h, q_prev)
    except EmptyLevelSet:
        logger.info("empty level set during step at y=%.6g; retrying with two half steps", y)
        k_half, q1 = _rk4_step(problem, y, k, 0.5 * h, q_prev)
        k_new, _ = _rk4_step(problem, y + 0.5 * h, k_half, 0.5 * h, q1)
        return k_new, q1


def _partial(y_grid, k, q, n_done) -> PotentialSolution:
    yy = y_grid[:n_done]
    kk = np.asarray(k[:n_done])
    return PotentialSolution(yy, kk, trapezoid_antiderivative(yy, kk), np.asarray(q[:n_done]),
                             np.full(n_done, np.nan), {"aborted": True})


def _march(problem: TransportProblem, k_start: float, y_grid: np.ndarray | None = None):
    """RK4 from ``y_grid[0]`` with ``k = k_start``; returns ``(k, q_used)``."""
    y_grid = problem.y_grid if y_grid is None else y_grid
    n = y_grid.size
    k = np.empty(n)
    q = np.empty(n)
    k[0] = k_start
    q_prev = None
    for i in range(n - 1):
        h = y_grid[i + 1] - y_grid[i]
        try:
            k[i + 1], q[i] = _step_with_retry(problem, y_grid[i], k[i], h, q_prev)
        except EmptyLevelSet as exc:
            raise SolverAbort(f"march left the attainable range near y={y_grid[i]:.6g}",
                              _partial(y_grid, k, q, i + 1),
                              {"y": float(y_grid[i]), "p": float(k[i]), **exc.location}) from exc
        q_prev = q[i]
    try:
        q[-1] = _rhs(problem, y_grid[-1], k[-1], q_prev)
    except EmptyLevelSet as exc:
        raise SolverAbort("final point left the attainable range", _partial(y_grid, k, q, n - 1),
                          {"y": float(y_grid[-1]), "p": float(k[-1])}) from exc
    return k, q


def nested_initializer(problem: TransportProblem, y: float, tol: float = 1e-12) -> float:
    """``k`` such that the source mass of ``{s_y(., y) <= k}`` equals the target mass below ``y``.

    Bisection in ``k``; raises :class:`~udot.errors.BracketFailure` when the mass
    function does not straddle the target.  Unreliable for periodic targets,
    where the cut does not encode the right boundary condition.
    """
    if problem.periodic:
        logger.warning("nested initialisation is unreliable for periodic targets")
    y0, y1 = problem.y_interval
    if not y0 <= y <= y1:
        raise ValueError("y outside the target interval")
    target = problem.g_cdf(y)
    lo, hi = p_range(problem.model, problem.region, y, problem.cells)
    span = max(hi - lo, 1e-12)

    def mass(k):
        return sublevel_area(problem.model, problem.region, y, k, None, problem.cells, problem.f)

    # grid nodes miss the extremes of s_y by up to a cell; widen until the masses straddle
    m_lo, m_hi = mass(lo), mass(hi)
    for _ in range(8):
        if m_lo <= target <= m_hi:
            break
        if m_lo > target:
            lo -= 0.01 * span
            m_lo = mass(lo)
        if m_hi < target:
            hi += 0.01 * span
            m_hi = mass(hi)
    if not (m_lo <= target <= m_hi):
        raise BracketFailure("sublevel mass does not straddle the target",
                             {"y": float(y), "target": target, "mass_lo": m_lo, "mass_hi": m_hi})
    # largest k whose sublevel mass does not exceed the target
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) <= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, abs(mid)):
            break
    return 0.5 * (lo + hi)


def _finish(problem, y_grid, k, q, diagnostics) -> PotentialSolution:
    model, region, f = problem.model, problem.region, problem.f
    g2 = np.empty(y_grid.size)
    for i, (y, kk, qq) in enumerate(zip(y_grid, k, q)):
        mesh = trace_level_set(model, region, y, kk, problem.cells)
        g2[i] = _parts(mesh, model, f, qq).value
    gv = np.asarray(problem.g(y_grid), dtype=float)
    residual = np.abs(g2 - gv)
    v = trapezoid_antiderivative(y_grid, k)
    mass = float(np.sum(0.5 * (g2[1:] + g2[:-1]) * np.diff(y_grid)))
    diagnostics = dict(diagnostics)
    diagnostics.update({
        "mass": mass,
        "mass_residual": abs(mass - 1.0),
        "max_residual": float(residual.max()),
        "min_dk": float(np.min(np.diff(k))) if k.size > 1 else 0.0,
    })
    if problem.exact_k is not None:
        diagnostics["max_k_error_vs_exact"] = float(np.max(np.abs(k - problem.exact_k(y_grid))))
    return PotentialSolution(y_grid, k, v, q, residual, diagnostics)


def solve_ode(problem: TransportProblem, bc: str | None = None, k0: float | None = None,
              shooting_tol: float = 1e-6, max_shooting: int = 50) -> PotentialSolution:
    """March ``k' = q(y, k, g(y))`` over the target grid.

    ``bc`` is one of ``initial`` (needs ``k0``), ``nested`` (default on intervals)
    or ``periodic-shooting`` (default on circles).  Raises
    :class:`~udot.errors.SolverAbort` carrying the partial solution if the
    march leaves the attainable range, and
    :class:`~udot.errors.ShootingDivergence` when shooting fails to converge.
    """
    if bc is None:
        bc = "periodic-shooting" if problem.periodic else "nested"
    if bc not in BC_MODES:
        raise ValueError(f"bc must be one of {BC_MODES}")
    y_grid = problem.y_grid
    h = y_grid[1] - y_grid[0]

    if bc == "initial":
        if k0 is None:
            raise ValueError("bc='initial' needs k0")
        k, q = _march(problem, float(k0))
        return _finish(problem, y_grid, k, q, {"bc": bc})

    if bc == "nested":
        if problem.periodic:
            logger.warning("nested boundary condition on a periodic target")
        k1 = nested_initializer(problem, y_grid[1])
        # one step back to the left endpoint, then the full march
        k_back, _ = _step_with_retry(problem, y_grid[1], k1, -h, None)
        k, q = _march(problem, k_back)
        return _finish(problem, y_grid, k, q, {"bc": bc, "k_nested": k1})

    return _shoot(problem, y_grid, 0.0 if k0 is None else float(k0), shooting_tol, max_shooting)


def _shoot(problem, y_grid, k0, tol, max_iter) -> PotentialSolution:
    """Secant shooting on ``k(y_min)``.

    The primary residual is ``k(end) - k(start)``.  When it is flat in the
    initial value (a whole family of periodic ``k`` exists), periodicity of
    ``v``, i.e. ``integral of k = 0``, selects the member instead.
    """
    cache: dict[float, tuple] = {}

    def run(k_init):
        if k_init not in cache:
            k, q = _march(problem, k_init, y_grid)
            v = trapezoid_antiderivative(y_grid, k)
            cache[k_init] = (k, q, k[-1] - k[0], v[-1])
        return cache[k_init]

    def done(r1, r2):
        return abs(r1) <= tol and abs(r2) <= tol

    k_a = k0
    _, _, r1a, r2a = run(k_a)
    if done(r1a, r2a):
        k, q, r1, r2 = run(k_a)
        return _finish(problem, y_grid, k, q, {"bc": "periodic-shooting", "shooting_iterations": 0,
                                               "shooting_residual": abs(r1), "v_period_residual": abs(r2)})
    delta = 1e-3
    k_b = k_a + delta
    _, _, r1b, r2b = run(k_b)
    use_v = abs(r1b - r1a) < 1e-8 * delta
    ra, rb = (r2a, r2b) if use_v else (r1a, r1b)
    for it in range(1, max_iter + 1):
        if rb == ra:
            raise ShootingDivergence("secant slope vanished", {"k0": k_b})
        k_c = k_b - rb * (k_b - k_a) / (rb - ra)
        try:
            _, _, r1c, r2c = run(k_c)
        except SolverAbort as exc:
            raise ShootingDivergence("shooting left the attainable range", exc.location) from exc
        if done(r1c, r2c):
            k, q, _, _ = run(k_c)
            return _finish(problem, y_grid, k, q, {
                "bc": "periodic-shooting", "shooting_iterations": it, "shooting_residual": abs(r1c),
                "v_period_residual": abs(r2c), "shooting_objective": "v" if use_v else "k"})
        k_a, ra = k_b, rb
        k_b, rb = k_c, (r2c if use_v else r1c)
    raise ShootingDivergence(f"no periodic solution after {max_iter} secant steps", {"k0": k_b})


# ---------------------------------------------------------------------------
# potentials and map


class _Interpolants:
    """Hermite interpolants of ``v`` (slopes ``k``) and ``k`` (slopes ``q``)."""

    def __init__(self, problem: TransportProblem, sol: PotentialSolution):
        self.period = problem.model.period
        y, k, v, q = sol.y_grid, sol.k, sol.v, sol.q_used
        self.y0, self.y1 = float(y[0]), float(y[-1])
        self.v = CubicHermiteSpline(y, v, k)
        self.k = CubicHermiteSpline(y, k, q)

    def _arg(self, y):
        y = np.asarray(y, dtype=float)
        if self.period is not None:
            return self.y0 + np.mod(y - self.y0, self.period)
        return np.clip(y, self.y0, self.y1)

    def v_at(self, y):
        return self.v(self._arg(y))

    def k_at(self, y):
        return self.k(self._arg(y))

    def dk_at(self, y):
        return self.k(self._arg(y), 1)


class ConjugateResult(NamedTuple):
    u: np.ndarray
    y: np.ndarray
    boundary: np.ndarray


def conjugate_batch(problem: TransportProblem, sol: PotentialSolution, x,
                    interp: _Interpolants | None = None, chunk: int = 2048) -> ConjugateResult:
    """``u(x) = max_y s(x, y) - v(y)`` and its maximiser for many points.

    Grid argmax, golden-section refinement inside the neighbouring cells, then
    Newton on the first-order condition ``s_y(x, y) = k(y)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    model = problem.model
    interp = interp or _Interpolants(problem, sol)
    yg = sol.y_grid
    periodic = model.periodic
    n = yg.size
    u_out = np.empty(x.shape[0])
    y_out = np.empty(x.shape[0])
    b_out = np.zeros(x.shape[0], dtype=bool)

    def obj(xx, yy):
        return model.eval(xx, yy) - interp.v_at(yy)

    for s0 in range(0, x.shape[0], chunk):
        xx = x[s0:s0 + chunk]
        vals = model.eval(xx[:, None, :], yg[None, :]) - sol.v[None, :]
        j = np.argmax(vals, axis=1)
        grid_best = vals[np.arange(xx.shape[0]), j]
        if periodic:
            lo = yg[j] - (yg[1] - yg[0])
            hi = yg[j] + (yg[1] - yg[0])
        else:
            lo = yg[np.maximum(j - 1, 0)]
            hi = yg[np.minimum(j + 1, n - 1)]
        a, b = lo.copy(), hi.copy()
        c = b - _GOLDEN * (b - a)
        d = a + _GOLDEN * (b - a)
        fc, fd = obj(xx, c), obj(xx, d)
        for _ in range(60):
            left = fc > fd
            a = np.where(left, a, c)
            b = np.where(left, d, b)
            c_new = np.where(left, b - _GOLDEN * (b - a), d)
            d_new = np.where(left, c, a + _GOLDEN * (b - a))
            fp = obj(xx, np.where(left, c_new, d_new))
            fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
            c, d = c_new, d_new
        ys = 0.5 * (a + b)
        # Newton polish on s_y(x, y) - k(y) = 0, kept inside the bracket
        for _ in range(4):
            r = model.d_y(xx, ys) - interp.k_at(ys)
            dr = model.d_yy(xx, ys) - interp.dk_at(ys)
            ok = dr < -1e-12
            step = np.where(ok, r / np.where(ok, dr, -1.0), 0.0)
            cand = np.clip(ys - step, lo, hi)
            r_c = model.d_y(xx, cand) - interp.k_at(cand)
            better = np.abs(r_c) < np.abs(r)
            ys = np.where(better, cand, ys)
        best = obj(xx, ys)
        use_grid = grid_best > best
        ys = np.where(use_grid, yg[j], ys)
        best = np.maximum(best, grid_best)
        if not periodic:
            # endpoints are candidates too
            for yend in (yg[0], yg[-1]):
                ve = obj(xx, np.full(xx.shape[0], yend))
                take = ve >= best
                ys = np.where(take, yend, ys)
                best = np.where(take, ve, best)
            span = yg[-1] - yg[0]
            b_out[s0:s0 + chunk] = (np.abs(ys - yg[0]) <= 1e-9 * span) | (np.abs(ys - yg[-1]) <= 1e-9 * span)
        else:
            ys = model.wrap(ys)
        u_out[s0:s0 + chunk] = best
        y_out[s0:s0 + chunk] = ys
    return ConjugateResult(u_out, y_out, b_out)


def assemble_conjugate(problem: TransportProblem, solution: PotentialSolution, x):
    """``(u(x), y*(x), boundary_argmax)`` for a single point ``x``."""
    r = conjugate_batch(problem, solution, np.asarray(x, dtype=float)[None, :])
    return float(r.u[0]), float(r.y[0]), bool(r.boundary[0])


class ReconstructedMap:
    """The transport map ``x -> argmax_y s(x, y) - v(y)`` of a computed solution."""

    def __init__(self, problem: TransportProblem, solution: PotentialSolution):
        self.problem = problem
        self.solution = solution
        self._interp = _Interpolants(problem, solution)

    def evaluate(self, x) -> ConjugateResult:
        return conjugate_batch(self.problem, self.solution, x, self._interp)

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(x).y

    def foc_residual(self, x) -> float:
        """Max ``|s_y(x, F(x)) - k(F(x))|`` over interior-argmax samples."""
        r = self.evaluate(x)
        m = ~r.boundary
        if not m.any():
            return 0.0
        xx = np.atleast_2d(x)[m]
        res = self.problem.model.d_y(xx, r.y[m]) - self._interp.k_at(r.y[m])
        return float(np.max(np.abs(res)))


def reconstruct_map(problem: TransportProblem, solution: PotentialSolution) -> ReconstructedMap:
    return ReconstructedMap(problem, solution)


# ---------------------------------------------------------------------------
# verification


def sample_source(problem: TransportProblem, n: int, seed: int = 0) -> np.ndarray:
    """``n`` samples of the source density by seeded rejection from the bounding box."""
    rng = np.random.default_rng(seed)
    (x0, x1), (y0, y1) = problem.region.bbox
    out = []
    got = 0
    tried = 0
    batch = max(4 * n, 1024)
    while got < n:
        pts = np.column_stack([rng.uniform(x0, x1, batch), rng.uniform(y0, y1, batch)])
        inside = problem.region.implicit(pts) <= 0
        accept = inside & (rng.uniform(0, 1, batch) * problem.f.upper <= density_values(problem.f, pts))
        tried += batch
        out.append(pts[accept])
        got += int(accept.sum())
        if tried >= 20 * batch and got / tried < 1e-3:
            raise RejectionStall("rejection sampler acceptance below 1e-3", {"accepted": got, "tried": tried})
    return np.concatenate(out)[:n]


def verify_pushforward(problem: TransportProblem, F: Callable, n_samples: int = 100_000,
                       bins: int = 50, seed: int = 0) -> tuple[float, dict]:
    """Total-variation distance between the histogram of ``F(x)``, ``x ~ f``, and ``g``."""
    if n_samples < 10_000:
        raise ValueError("n_samples must be at least 1e4")
    x = sample_source(problem, n_samples, seed)
    ys = np.asarray(F(x), dtype=float)
    y0, y1 = problem.y_interval
    edges = np.linspace(y0, y1, bins + 1)
    counts, _ = np.histogram(np.clip(ys, y0, y1), bins=edges)
    emp = counts / n_samples
    expected = np.array([quad(lambda t: float(problem.g(np.array(t))), a, b)[0]
                         for a, b in zip(edges[:-1], edges[1:])])
    tv = 0.5 * float(np.abs(emp - expected).sum())
    return tv, {"edges": edges.tolist(), "empirical": emp.tolist(), "expected": expected.tolist()}


def verify_nonlocal(problem: TransportProblem, solution: PotentialSolution, y: float,
                    member_tol: float = 1e-6) -> float:
    """Residual of the equation integrated over the computed preimage of ``y``.

    The preimage is approximated by the points of X1(y, k(y)) at which ``y``
    attains the global maximum of ``s(x, .) - v`` (up to ``member_tol``).
    """
    model = problem.model
    interp = _Interpolants(problem, solution)
    k = float(interp.k_at(y))
    dk = float(interp.dk_at(y))
    gy = float(problem.g(np.array(y)))
    mesh = trace_level_set(model, problem.region, y, k, problem.cells)
    if mesh.is_empty:
        return gy
    pts, wts = mesh.quad_points, mesh.quad_weights
    here = model.eval(pts, y) - float(interp.v_at(y))
    vals = model.eval(pts[:, None, :], solution.y_grid[None, :]) - solution.v[None, :]
    member = here >= vals.max(axis=1) - member_tol
    integrand = (dk - model.d_yy(pts, y)) * density_values(problem.f, pts) * mesh.speed
    return abs(float(np.dot(wts[member], integrand[member])) - gy)


@dataclass(frozen=True)
class JacobianReport:
    max_rel_error: float
    n_used: int
    n_excluded: int


def jacobian_check(problem: TransportProblem, solution: PotentialSolution, x_samples,
                   eps: float = 1e-4) -> JacobianReport:
    """Compare ``|grad_x s_y| / (k'(F) - s_yy)`` with a difference quotient of ``F``.

    The quotient is taken along the unit normal of the level curve through
    each sample.  Samples mapped to an endpoint of the target are excluded.
    Raises :class:`~udot.errors.EllipticityLoss` where the denominator is
    below ``1e-8``.
    """
    model = problem.model
    Fm = ReconstructedMap(problem, solution)
    x = np.atleast_2d(np.asarray(x_samples, dtype=float))
    r0 = Fm.evaluate(x)
    y = r0.y
    g = model.grad_x_dy(x, y)
    gn = np.linalg.norm(g, axis=-1)
    n = g / gn[:, None]
    rp = Fm.evaluate(x + eps * n)
    rm = Fm.evaluate(x - eps * n)
    excl = r0.boundary | rp.boundary | rm.boundary
    denom = Fm._interp.dk_at(y) - model.d_yy(x, y)
    use = ~excl
    if np.any(denom[use] < 1e-8):
        k = int(np.argmin(np.where(use, denom, np.inf)))
        raise EllipticityLoss("k' - s_yy vanishes at the sample", {"x": x[k].tolist(), "y": float(y[k])})
    formula = gn / np.where(use, denom, 1.0)
    fd = model.difference(rp.y, rm.y) / (2 * eps)
    rel = np.abs(fd - formula) / np.abs(formula)
    err = float(rel[use].max()) if use.any() else 0.0
    return JacobianReport(err, int(use.sum()), int(excl.sum()))


def _x2_points(problem, y, k, q):
    mesh = trace_level_set(problem.model, problem.region, y, k, problem.cells)
    a, b, _, _, _ = sublevel_pieces(mesh, problem.model, q)
    pts = np.concatenate([a, b, a + (0.5 - _GAUSS) * (b - a), a + (0.5 + _GAUSS) * (b - a)])
    ln = np.linalg.norm(b - a, axis=-1)
    return mesh, pts, a, b, ln


def uniform_ellipticity_margin(problem: TransportProblem, solution: PotentialSolution) -> float:
    """Min of ``k'(y) - s_yy(x, y)`` over the grid and the points of X2."""
    best = math.inf
    for y, k, q in zip(solution.y_grid, solution.k, solution.q_used):
        _, pts, _, _, _ = _x2_points(problem, y, k, q)
        if pts.shape[0]:
            best = min(best, float(np.min(q - problem.model.d_yy(pts, y))))
    return best


def ellipticity_profile(problem: TransportProblem, solution: PotentialSolution) -> list[dict]:
    """Per grid point: G2, theta, lambda and component counts of X1 and X2."""
    from udot.geometry import restrict_sublevel

    rows = []
    for y, k, q in zip(solution.y_grid, solution.k, solution.q_used):
        mesh = trace_level_set(problem.model, problem.region, y, k, problem.cells)
        pr = _parts(mesh, problem.model, problem.f, q)
        x2 = restrict_sublevel(mesh, problem.model, y, q)
        lam = pr.value / pr.theta if pr.value > 0 and pr.theta > 0 else 0.0
        rows.append({"y": float(y), "G2": pr.value, "theta": pr.theta if pr.theta > -math.inf else 0.0,
                     "lambda": lam, "X1_components": mesh.n_components if not mesh.is_empty else 0,
                     "X2_components": x2.n_components if not x2.is_empty else 0})
    return rows


def swept_volume_diagnostic(problem: TransportProblem, solution: PotentialSolution) -> dict:
    """Empirical constants for ``vol >= C1 |dk| - C2 |dy|`` between adjacent grid points.

    The swept area between X2 at neighbouring grid points is estimated from the
    normal displacement ``|dk - s_yy dy| w`` of the curve.  Reported, not asserted.
    """
    y, k, q = solution.y_grid, solution.k, solution.q_used
    vols, dks, dys = [], [], []
    for i in range(y.size - 1):
        mesh = trace_level_set(problem.model, problem.region, y[i], k[i], problem.cells)
        a, b, _, _, _ = sublevel_pieces(mesh, problem.model, q[i])
        pts = np.concatenate([a + (0.5 - _GAUSS) * (b - a), a + (0.5 + _GAUSS) * (b - a)])
        ln = np.linalg.norm(b - a, axis=-1)
        wts = np.concatenate([0.5 * ln, 0.5 * ln])
        dk, dy = k[i + 1] - k[i], y[i + 1] - y[i]
        if pts.shape[0]:
            w = 1.0 / np.linalg.norm(problem.model.grad_x_dy(pts, y[i]), axis=-1)
            vols.append(float(np.dot(wts, np.abs(dk - problem.model.d_yy(pts, y[i]) * dy) * w)))
        else:
            vols.append(0.0)
        dks.append(abs(dk))
        dys.append(abs(dy))
    vols, dks, dys = map(np.asarray, (vols, dks, dys))
    ratio = vols / np.maximum(dks, 1e-300)
    m = dks > 1e-14
    c1 = float(np.median(ratio[m])) if m.any() else 0.0
    c2 = float(np.max(np.maximum(c1 * dks - vols, 0.0) / dys))
    out = {"C1": c1, "C2": c2, "min_volume_ratio": float(ratio[m].min()) if m.any() else 0.0}
    logger.info("swept-volume constants: %s", out)
    return out

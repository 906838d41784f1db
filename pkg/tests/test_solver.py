from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udot.errors import BracketFailure, NonPositiveMass, SolverAbort
from udot.solver import (Density, PotentialSolution, TransportProblem, assemble_conjugate,
                         conjugate_batch, jacobian_check, make_problem, nested_initializer,
                         reconstruct_map, sample_source, solve_ode, swept_volume_diagnostic,
                         trapezoid_antiderivative, uniform_ellipticity_margin, verify_nonlocal,
                         verify_pushforward)


# --- problem construction --------------------------------------------------


def test_nonpositive_target_density_is_rejected(strip, square):
    bad = Density(lambda y: 1.0 - 2.0 * (np.asarray(y) > 0.5) + 0 * np.asarray(y), -1.0, 1.0)
    with pytest.raises(NonPositiveMass) as exc:
        TransportProblem(strip, square, Density.constant(1.0), bad, (0.0, 1.0), 64, 16)
    assert exc.value.location["y"] > 0.5


def test_unnormalised_density_is_rejected(strip, square):
    with pytest.raises(NonPositiveMass):
        TransportProblem(strip, square, Density.constant(2.0), Density.constant(1.0, 1),
                         (0.0, 1.0), 64, 16)


def test_trapezoid_antiderivative():
    y = np.linspace(0, 1, 11)
    assert np.allclose(trapezoid_antiderivative(y, y), y ** 2 / 2)


# --- boundary conditions ---------------------------------------------------


def test_nested_initializer_strip(strip_problem):
    assert nested_initializer(strip_problem, 0.4) == pytest.approx(0.4, abs=1e-4)
    assert nested_initializer(strip_problem, 0.0) == pytest.approx(0.0, abs=1e-4)


def test_nested_initializer_on_circle_cuts_half_plane(annulus_problem):
    # a half-plane cut holding a quarter of the mass, not the k = 0 of the true solution
    k = nested_initializer(annulus_problem, math.pi / 2)
    assert abs(k) > 0.1


def test_nested_initializer_bracket_failure(monkeypatch):
    import udot.solver as solver

    problem = make_problem("strip", cells=64, ode_steps=16)
    with pytest.raises(ValueError):
        nested_initializer(problem, 1.5)
    # a mass function that never reaches the target cannot be bracketed
    monkeypatch.setattr(solver, "sublevel_area", lambda *a, **k: 0.0)
    with pytest.raises(BracketFailure) as exc:
        nested_initializer(problem, 0.5)
    assert exc.value.location["y"] == 0.5


# --- solves ----------------------------------------------------------------


def test_strip_solution(strip_solution):
    y = strip_solution.y_grid
    assert np.max(np.abs(strip_solution.k - y)) <= 1e-4
    assert np.allclose(strip_solution.v, y ** 2 / 2 - y[0] ** 2 / 2, atol=1e-4)
    assert np.allclose(strip_solution.q_used, 1.0, atol=1e-6)
    assert abs(strip_solution.diagnostics["mass"] - 1) <= 5e-3


def test_annulus_solution(annulus_solution):
    assert np.max(np.abs(annulus_solution.k)) <= 1e-3
    assert np.max(np.abs(annulus_solution.v)) <= 1e-3
    assert annulus_solution.diagnostics["bc"] == "periodic-shooting"
    assert abs(annulus_solution.diagnostics["mass"] - 1) <= 5e-3


def test_tilted_solution(tilted_solution):
    d = tilted_solution.diagnostics
    assert abs(d["mass"] - 1) <= 5e-3
    assert d["min_dk"] >= -1e-10
    assert np.max(tilted_solution.residual) <= 1e-6


def test_initial_bc_requires_k0(strip_problem):
    with pytest.raises(ValueError):
        solve_ode(strip_problem, bc="initial")


def test_abort_carries_partial_solution():
    problem = make_problem("strip", cells=64, ode_steps=32)
    # starting too far right makes k leave [0, 1] before the end
    with pytest.raises(SolverAbort) as exc:
        solve_ode(problem, bc="initial", k0=0.5)
    partial = exc.value.partial
    assert 1 <= partial.k.size < problem.y_grid.size
    assert "y" in exc.value.location


def test_convexified_strip_is_monotone():
    problem = make_problem("strip", cells=64, ode_steps=32, convexify_coefficient=1.0)
    sol = solve_ode(problem)
    assert np.min(np.diff(sol.k)) >= -1e-10
    assert np.max(np.abs(sol.k - 2 * sol.y_grid)) <= 1e-4


def test_csv_round_trip(tmp_path, tilted_solution):
    path = tmp_path / "solution.csv"
    tilted_solution.to_csv(path)
    back = PotentialSolution.from_csv(path)
    for name in PotentialSolution.COLUMNS[1:]:
        assert np.array_equal(getattr(back, name), getattr(tilted_solution, name))
    assert np.array_equal(back.y_grid, tilted_solution.y_grid)
    assert open(path).readline().strip() == "y,k,v,q_used,residual"


def test_csv_rejects_wrong_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError):
        PotentialSolution.from_csv(path)


# --- conjugate and map -----------------------------------------------------


def test_assemble_conjugate_examples(annulus_problem, annulus_solution, strip_problem, strip_solution):
    u, ys, boundary = assemble_conjugate(annulus_problem, annulus_solution, [0.75, 0.0])
    assert u == pytest.approx(0.75, abs=1e-3)
    assert min(ys, 2 * math.pi - ys) <= 1e-4
    assert not boundary
    u, ys, _ = assemble_conjugate(strip_problem, strip_solution, [0.3, 0.9])
    assert ys == pytest.approx(0.3, abs=1e-4)
    assert u == pytest.approx(0.3 ** 2 / 2, abs=1e-4)


def test_endpoint_argmax_is_flagged(strip_problem, strip_solution):
    flat = PotentialSolution(strip_solution.y_grid, 0 * strip_solution.k, 0 * strip_solution.v,
                             0 * strip_solution.q_used, strip_solution.residual)
    res = conjugate_batch(strip_problem, flat, np.array([[0.6, 0.2], [0.1, 0.9]]))
    assert np.allclose(res.y, 1.0) and res.boundary.all()


@pytest.mark.parametrize("which", ["strip", "annulus", "tilted"])
def test_conjugacy_inequality(request, which):
    problem = request.getfixturevalue(f"{which}_problem")
    sol = request.getfixturevalue(f"{which}_solution")
    (a0, a1), (b0, b1) = problem.region.bbox
    g = np.stack(np.meshgrid(np.linspace(a0, a1, 64), np.linspace(b0, b1, 64)), -1).reshape(-1, 2)
    x = g[problem.region.implicit(g) <= 0]
    u = conjugate_batch(problem, sol, x).u
    S = problem.model.eval(x[:, None, :], sol.y_grid[None, :])
    assert np.min(u[:, None] + sol.v[None, :] - S) >= -1e-8


def test_reconstructed_maps(annulus_problem, annulus_solution, strip_problem, strip_solution):
    x = sample_source(annulus_problem, 2000, seed=1)
    F = reconstruct_map(annulus_problem, annulus_solution)
    ang = np.mod(np.arctan2(x[:, 1], x[:, 0]), 2 * math.pi)
    d = np.abs(F(x) - ang)
    assert np.max(np.minimum(d, 2 * math.pi - d)) <= 1e-4
    assert F.foc_residual(x) <= 1e-4
    x = sample_source(strip_problem, 2000, seed=2)
    F = reconstruct_map(strip_problem, strip_solution)
    assert np.max(np.abs(F(x) - x[:, 0])) <= 1e-4
    assert F.foc_residual(x) <= 1e-4


def test_tilted_map_first_order_condition(tilted_problem, tilted_solution):
    F = reconstruct_map(tilted_problem, tilted_solution)
    x = sample_source(tilted_problem, 2000, seed=3)
    # the level sets shrink into the corner (1, 1) as y -> 1; stay away from it
    x = x[F(x) < 0.9]
    assert F.foc_residual(x) <= 1e-4


# --- verification ----------------------------------------------------------


def test_pushforward(strip_problem, strip_solution, annulus_problem, annulus_solution):
    tv, hist = verify_pushforward(strip_problem, reconstruct_map(strip_problem, strip_solution))
    assert tv <= 0.02 and len(hist["empirical"]) == 50
    tv, _ = verify_pushforward(annulus_problem, reconstruct_map(annulus_problem, annulus_solution))
    assert tv <= 0.02


def test_pushforward_of_constant_map(strip_problem):
    tv, _ = verify_pushforward(strip_problem, lambda x: np.full(len(x), 0.5), 10_000)
    assert tv == pytest.approx(1 - 1 / 50, abs=1e-12)
    with pytest.raises(ValueError):
        verify_pushforward(strip_problem, lambda x: x[:, 0], 100)


def test_sampling_is_seeded(annulus_problem):
    a = sample_source(annulus_problem, 500, seed=4)
    assert np.array_equal(a, sample_source(annulus_problem, 500, seed=4))
    r = np.hypot(a[:, 0], a[:, 1])
    assert np.all((r >= 0.5) & (r <= 1.0))


def test_nonlocal_residuals(annulus_problem, annulus_solution, strip_problem, strip_solution):
    assert verify_nonlocal(annulus_problem, annulus_solution, 0.0) <= 2e-3
    assert verify_nonlocal(annulus_problem, annulus_solution, 2.0) <= 2e-3
    for y in (0.2, 0.5, 0.8):
        assert verify_nonlocal(strip_problem, strip_solution, y) <= 1e-3


def test_nonlocal_outside_attained_range(strip_problem, strip_solution):
    # k far outside [0, 1]: the level set is empty so the residual is g itself
    shifted = PotentialSolution(strip_solution.y_grid, strip_solution.k + 5.0, strip_solution.v,
                                strip_solution.q_used, strip_solution.residual)
    assert verify_nonlocal(strip_problem, shifted, 0.5) == pytest.approx(1.0)


def test_jacobian_checks(strip_problem, strip_solution, annulus_problem, annulus_solution):
    x = sample_source(strip_problem, 500, seed=5)
    rep = jacobian_check(strip_problem, strip_solution, x)
    assert rep.max_rel_error <= 1e-3 and rep.n_used + rep.n_excluded == 500
    x = sample_source(annulus_problem, 500, seed=6)
    assert jacobian_check(annulus_problem, annulus_solution, x).max_rel_error <= 1e-2


def test_jacobian_excludes_endpoint_samples(strip_problem, strip_solution):
    rep = jacobian_check(strip_problem, strip_solution, np.array([[0.5, 0.5], [1.0, 0.5], [0.0, 0.2]]))
    assert rep.n_excluded == 2 and rep.n_used == 1


def test_ellipticity_margins(strip_problem, strip_solution, annulus_problem, annulus_solution):
    assert uniform_ellipticity_margin(strip_problem, strip_solution) == pytest.approx(1.0, abs=1e-6)
    assert uniform_ellipticity_margin(annulus_problem, annulus_solution) == pytest.approx(0.5, abs=1e-3)
    forced = PotentialSolution(strip_solution.y_grid, strip_solution.k, strip_solution.v,
                               0 * strip_solution.q_used, strip_solution.residual)
    assert uniform_ellipticity_margin(strip_problem, forced) == pytest.approx(0.0, abs=1e-12)


def test_swept_volume_is_reported(strip_problem, strip_solution):
    d = swept_volume_diagnostic(strip_problem, strip_solution)
    assert d["C1"] == pytest.approx(1.0, abs=1e-6)
    assert d["C2"] >= 0


COARSE_STRIP = make_problem("strip", cells=64, ode_steps=16)


@settings(max_examples=10)
@given(y=st.floats(0.01, 0.99))
def test_nested_initializer_is_monotone(y):
    a = nested_initializer(COARSE_STRIP, y, tol=1e-9)
    b = nested_initializer(COARSE_STRIP, min(y + 0.01, 1.0), tol=1e-9)
    assert a <= b + 1e-9

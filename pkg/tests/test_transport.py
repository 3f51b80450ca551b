import math
import warnings

import numpy as np
import pytest

from ftlab import flow
from ftlab.errors import GridMismatchError
from ftlab.fbm import TimeGrid, sample_fbm
from ftlab.fields import (
    InitialDatum,
    TestFunction,
    arctan_shift_datum,
    bump_datum,
    constant_reaction,
    cubic_datum,
    identity_datum,
    linear_drift,
    linear_reaction,
    sin_drift,
    zero_datum,
    zero_drift,
    zero_reaction,
)
from ftlab.transport import (
    SupportTruncationWarning,
    eps_integral,
    evaluate_solution,
    solve_Z,
    symmetric_integral,
    weak_form_residual,
    weak_residual_study,
)


@pytest.fixture(scope="module")
def path():
    return sample_fbm(TimeGrid(1.0, 1024), 0.75, (201,))


# ---------------------------------------------------------------------------
# reaction ODE

def test_solve_Z_examples():
    r = np.array([-1.0, 0.5, 3.0])
    np.testing.assert_array_equal(solve_Z(zero_reaction(), r, 1.3), r)
    np.testing.assert_allclose(solve_Z(linear_reaction(1.0), r, 1.0), r * math.e, rtol=1e-8)
    np.testing.assert_allclose(solve_Z(constant_reaction(1.0), r, 0.7), r + 0.7,
                               rtol=0, atol=1e-13)
    np.testing.assert_array_equal(solve_Z(linear_reaction(2.0), r, 0.0), r)


def test_solve_Z_inverse_and_jacobian():
    r = np.array([0.2, -1.5])
    z = solve_Z(linear_reaction(0.8), r, 1.2)
    back, jac = solve_Z(linear_reaction(0.8), z, 1.2, backward=True, jacobian=True)
    np.testing.assert_allclose(back, r, rtol=1e-10)
    np.testing.assert_allclose(jac, math.exp(-0.8 * 1.2), rtol=1e-9)


# ---------------------------------------------------------------------------
# representation formula

def test_evaluate_zero_drift(path):
    x = np.array([-1.0, 0.0, 2.0])
    B_t = path.values[-1]
    s = evaluate_solution(identity_datum(), None, zero_drift(), path, 1024, x)
    np.testing.assert_allclose(s.value, x - B_t, atol=1e-15)
    assert s.t == 1.0 and s.flags == []
    c = evaluate_solution(cubic_datum(), zero_reaction(), zero_drift(), path, 1024, x)
    np.testing.assert_allclose(c.value, (x - B_t) ** 3, rtol=1e-14)


def test_evaluate_two_inversion_algorithms(path):
    x = np.linspace(-2, 2, 9)
    s = evaluate_solution(arctan_shift_datum(), None, sin_drift(), path, 1024, x)
    y = flow.invert_pointwise(sin_drift(), path, 1024, x, tol=1e-12)[:, 0]
    u0 = arctan_shift_datum()
    assert np.max(np.abs(s.value - u0(y))) < 1e-8


def test_identity_datum_gives_inverse_flow(path):
    x = np.array([0.4])
    s = evaluate_solution(identity_datum(), None, sin_drift(), path, 700, x)
    Y = flow.inverse_flow(sin_drift(), path, 700, x).endpoint
    np.testing.assert_array_equal(np.ravel(s.value), np.ravel(Y))


def test_reaction_flag(path):
    s = evaluate_solution(identity_datum(), linear_reaction(0.5), zero_drift(), path, 1024, 0.0)
    assert "extrapolated: reaction with fractional noise" in s.flags
    np.testing.assert_allclose(s.value, -path.values[-1] * math.exp(0.5), rtol=1e-9)


def test_constancy_along_characteristics(path):
    rng = np.random.default_rng(5)
    x = rng.uniform(-2, 2, size=12)
    X = flow.forward_flow(sin_drift(), path, 0, 1024, x[:, None]).end[:, 0]
    u0 = arctan_shift_datum()
    s = evaluate_solution(u0, None, sin_drift(), path, 1024, X)
    np.testing.assert_allclose(s.value, u0(x), atol=1e-10)


def test_range_preservation(path):
    x = np.linspace(-4, 4, 200)
    s = evaluate_solution(bump_datum(), None, sin_drift(), path, 1024, x)
    assert s.value.min() >= 0.0 and s.value.max() <= 1.0


# ---------------------------------------------------------------------------
# symmetric integral

def test_symmetric_integral_smooth_telescoping():
    grid = TimeGrid(1.0, 4096)
    X = np.sin(3 * grid.nodes) + grid.nodes ** 2
    r = symmetric_integral(np.ones_like(X), X, grid.dt, 16 * grid.dt)
    assert float(r) == pytest.approx(X[-1] - X[0], abs=1e-7)
    assert len(r.raw) == 3 and r.eps[0] == pytest.approx(16 * grid.dt)


def test_symmetric_integral_telescoping_fbm(path):
    X = path.values
    r = symmetric_integral(np.ones_like(X), X, path.grid.dt, 4 * path.grid.dt)
    # boundary term is O(eps^H) for a rough path
    assert abs(float(r) - (X[-1] - X[0])) < 0.02


def test_symmetric_integral_grid_alignment():
    grid = TimeGrid(1.0, 64)
    X = np.zeros(65)
    with pytest.raises(GridMismatchError):
        symmetric_integral(X, X, grid.dt, 1.5 * grid.dt)
    with pytest.raises(GridMismatchError):
        symmetric_integral(X, X, grid.dt, 2 * grid.dt)
    assert float(symmetric_integral(X, X, grid.dt, 2 * grid.dt, extrapolate=False)) == 0.0
    with pytest.raises(GridMismatchError):
        eps_integral(X, X, 0, grid.dt)


def test_eps_integral_batches(path):
    X = np.stack([path.values, 2 * path.values])
    v = eps_integral(X, X, 4, path.grid.dt)
    assert v.shape == (2,)
    assert v[1] == pytest.approx(4 * v[0], rel=1e-12)


def test_stratonovich_identity_brownian():
    grid = TimeGrid(1.0, 4096)
    errs = []
    for k in range(10):
        X = sample_fbm(grid, 0.5, (202, k)).values
        errs.append(float(symmetric_integral(X, X, grid.dt, 4 * grid.dt)) - 0.5 * X[-1] ** 2)
    # Monte Carlo + extrapolation tolerance for H = 1/2
    assert np.max(np.abs(errs)) < 0.02


def test_stratonovich_identity_fbm():
    grid = TimeGrid(1.0, 4096)
    X = sample_fbm(grid, 0.75, (203,)).values
    r = float(symmetric_integral(X, X, grid.dt, 4 * grid.dt))
    assert abs(r - 0.5 * X[-1] ** 2) < 1e-3


# ---------------------------------------------------------------------------
# weak formulation

def test_weak_residual_zero_datum(path):
    r = weak_form_residual(zero_datum(), sin_drift(), path, TestFunction(), 1024, n_x=101)
    assert r.residual == 0.0
    assert r.dt == path.grid.dt and r.eps == 4 * path.grid.dt and r.dx > 0


def test_weak_residual_reports_terms(path):
    r = weak_form_residual(bump_datum(), sin_drift(), path, TestFunction(), 1024, n_x=201)
    assert set(r.terms) == {"lhs", "initial", "drift", "divergence", "noise"}
    assert r.scale == max(abs(v) for v in r.terms.values())
    assert r.relative < 1e-2
    d = r.to_dict()
    assert d["n_steps"] == 1024 and "term_noise" in d


def test_weak_residual_self_convergence_zero_drift():
    levels = [7, 8, 9, 10, 11]
    R = []
    for k in range(6):
        fine = sample_fbm(TimeGrid(1.0, 1 << levels[-1]), 0.75, (204, k))
        R.append([abs(r.residual) for r in weak_residual_study(
            bump_datum(), zero_drift(), fine, TestFunction(), levels, n_x=201)])
    mean = np.mean(R, axis=0)
    slope = -np.polyfit(np.array(levels, dtype=float), np.log2(mean), 1)[0]
    assert slope >= 0.5


def test_support_truncation_warning():
    p = sample_fbm(TimeGrid(1.0, 128), 0.75, (205,))
    u0 = InitialDatum("ident", lambda y: y, lambda y: np.ones_like(y))
    with pytest.warns(SupportTruncationWarning):
        weak_form_residual(u0, linear_drift(-5.0), p, TestFunction(), 128, n_x=51)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        weak_form_residual(bump_datum(), sin_drift(), p, TestFunction(), 128, n_x=51)

import math
import warnings

import numpy as np
import pytest
import sympy as sp

from ftlab.density import (
    DensityConfig,
    EnvelopeParams,
    ExplicitConfig,
    InsufficientSamplesWarning,
    Diffeomorphism,
    bootstrap_band,
    exact_zero_drift_density,
    explicit_density_divfree,
    gamma_bounds,
    gaussian_envelope,
    identity_map,
    kde_2d,
    linear_char_density,
    linear_map,
    run_density_experiment,
    run_explicit_density,
    sample_solution,
    silverman_kde,
    verify_gf_bounds,
)
from ftlab.errors import DomainError, InversionError
from ftlab.fbm import TimeGrid
from ftlab.fields import (
    arctan_shift_datum,
    bump_datum,
    identity_datum,
    linear_reaction,
    sin_drift,
    zero_drift,
)


# ---------------------------------------------------------------------------
# envelope

def test_envelope_prefactor_identity_symbolic():
    # with gamma_low = gamma_high = sigma and E|Z - m| of a Gaussian the
    # envelope collapses onto the Gaussian density
    s = sp.symbols("sigma", positive=True)
    abs_dev = s * sp.sqrt(2 / sp.pi)
    assert sp.simplify(abs_dev / (2 * s ** 2) - 1 / (s * sp.sqrt(2 * sp.pi))) == 0


@pytest.mark.parametrize("sigma", [0.3, 1.0, 2.5])
def test_envelope_collapse(sigma):
    env = EnvelopeParams(0.7, sigma * math.sqrt(2 / math.pi), sigma ** 2, sigma ** 2)
    z = np.linspace(-5, 5, 101)
    lo, up = gaussian_envelope(env, z)
    ref = np.exp(-(z - 0.7) ** 2 / (2 * sigma ** 2)) / (sigma * math.sqrt(2 * math.pi))
    np.testing.assert_allclose(lo, ref, rtol=1e-14)
    np.testing.assert_array_equal(lo, up)


def test_envelope_at_mean_and_order():
    env = EnvelopeParams(1.0, 0.4, 0.5, 2.0)
    lo, up = gaussian_envelope(env, 1.0)
    assert lo == pytest.approx(0.4 / 4.0) and up == pytest.approx(0.4 / 1.0)
    z = np.linspace(-10, 10, 401)
    lo, up = gaussian_envelope(env, z)
    assert np.all(lo <= up) and np.all(lo > 0)


def test_envelope_validation():
    with pytest.raises(DomainError):
        EnvelopeParams(0.0, 1.0, 2.0, 1.0)
    with pytest.raises(DomainError):
        EnvelopeParams(0.0, 1.0, 0.0, 1.0)
    with pytest.raises(DomainError):
        EnvelopeParams(0.0, -1.0, 1.0, 1.0)


def test_gamma_bounds():
    lo, hi = gamma_bounds(sin_drift(), arctan_shift_datum(), 1.0, 0.75)
    assert lo == pytest.approx(math.exp(-2.0))
    assert hi == pytest.approx(1.5 ** 2 * math.exp(2.0))
    assert gamma_bounds(zero_drift(), identity_datum(), 4.0, 0.5) == (4.0, 4.0)
    with pytest.raises(DomainError):
        gamma_bounds(sin_drift(), bump_datum(), 1.0, 0.5)


# ---------------------------------------------------------------------------
# kernel density estimate and band

def test_kde_normalized_and_accurate():
    x = np.random.default_rng(0).normal(1.0, 2.0, 20_000)
    k = silverman_kde(x)
    assert k.integral() == pytest.approx(1.0, abs=1e-3)
    assert k.bandwidth == pytest.approx(1.06 * np.std(x, ddof=1) * 20_000 ** -0.2)
    ref = np.exp(-(k.z - 1) ** 2 / 8) / math.sqrt(8 * math.pi)
    assert np.max(np.abs(k.density - ref)) < 0.01
    assert k.z.size == 512


def test_kde_degenerate():
    with pytest.raises(DomainError):
        silverman_kde(np.ones(100))


def test_bootstrap_band_covers_truth():
    rng = np.random.default_rng(1)
    x = rng.normal(size=20_000)
    k = silverman_kde(x)
    band = bootstrap_band(x, k, np.random.default_rng(2), n_boot=100)
    assert band.shape == k.z.shape and np.all(band >= 0)
    # band is a few times the sampling sd of the KDE
    sd = np.sqrt(k.density / (2 * math.sqrt(math.pi) * k.bandwidth * x.size))
    mid = np.abs(k.z) < 2
    ratio = band[mid] / sd[mid]
    assert 1.5 < np.median(ratio) < 4.0


def test_bootstrap_band_deterministic():
    x = np.random.default_rng(3).normal(size=5000)
    k = silverman_kde(x)
    a = bootstrap_band(x, k, np.random.default_rng(9), n_boot=20)
    b = bootstrap_band(x, k, np.random.default_rng(9), n_boot=20)
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# sampling and bound verification

def test_sample_solution_zero_drift_law():
    g = TimeGrid(1.0, 64)
    s = sample_solution(zero_drift(), identity_datum(), g, 0.75, 0.5, (401,), 4000)
    assert s.shape == (4000,)
    assert abs(s.mean() - 0.5) < 4 / math.sqrt(4000)
    assert s.var() == pytest.approx(1.0, abs=0.1)


def test_sample_solution_chunking_invariant():
    from concurrent.futures import ThreadPoolExecutor
    g = TimeGrid(1.0, 32)
    a = sample_solution(sin_drift(), arctan_shift_datum(), g, 0.5, 0.0, (402,), 300, chunk=300)
    with ThreadPoolExecutor(2) as pool:
        b = sample_solution(sin_drift(), arctan_shift_datum(), g, 0.5, 0.0, (402,), 300,
                            chunk=64, executor=pool)
    np.testing.assert_array_equal(a, b)


def test_sample_solution_reaction():
    g = TimeGrid(1.0, 32)
    a = sample_solution(zero_drift(), identity_datum(), g, 0.5, 0.0, (403,), 200)
    b = sample_solution(zero_drift(), identity_datum(), g, 0.5, 0.0, (403,), 200,
                        F=linear_reaction(1.0))
    np.testing.assert_allclose(b, a * math.e, rtol=1e-9)


@pytest.mark.parametrize("H", [0.5, 0.75])
def test_gf_bounds_zero_drift_identity(H):
    cfg = DensityConfig(drift="zero", u0="identity", H=H, n_steps=64, n_coupled=50)
    r = verify_gf_bounds(cfg)
    assert r.fraction == 1.0
    np.testing.assert_allclose(r.values, 1.0, atol=1e-12)
    assert r.gamma_low_sq == r.gamma_high_sq == 1.0


def test_gf_bounds_sin():
    cfg = DensityConfig(H=0.75, n_steps=128, n_coupled=100)
    r = verify_gf_bounds(cfg)
    assert r.fraction == 1.0
    assert r.gamma_low_sq <= r.observed_min <= r.observed_max <= r.gamma_high_sq
    assert "values" not in r.to_dict()


def test_density_experiment_small_sample_warning():
    cfg = DensityConfig(drift="zero", u0="identity", n_steps=16, n_samples=500,
                        n_coupled=10, n_bootstrap=10)
    with pytest.warns(InsufficientSamplesWarning):
        rep = run_density_experiment(cfg)
    assert rep.reference is not None
    summary = rep.summary()
    assert summary["n_samples"] == 500


def test_density_experiment_report(tmp_path):
    cfg = DensityConfig(n_steps=32, n_samples=4000, n_coupled=20, n_bootstrap=20)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        rep = run_density_experiment(cfg)
    assert rep.reference is None and rep.reference_sup_distance is None
    assert rep.central.any()
    rep.write_csv(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert len(lines) == 513
    assert '"envelope"' in rep.to_json()


def test_exact_zero_drift_density():
    z = np.linspace(-15, 15, 6001)
    d = exact_zero_drift_density(z, 0.5, 2.0, 0.75)
    assert np.trapezoid(d, z) == pytest.approx(1.0, abs=1e-6)
    assert z[np.argmax(d)] == pytest.approx(0.5, abs=0.01)


# ---------------------------------------------------------------------------
# explicit density, divergence-free drift

def rotation_closed_form(t, x, y):
    c, s = math.cos(t), math.sin(t)
    m = np.array([c * x[0] + s * x[1], -s * x[0] + c * x[1]])
    r = np.asarray(y) - m
    return np.exp(-np.sum(r * r, axis=-1) / (2 * t)) / (2 * math.pi * t)


def test_linear_char_density_zero_generator():
    rho = linear_char_density(np.zeros((2, 2)), 2.0, [0.3, -1.0])
    y = np.array([[0.0, 0.0], [0.3, -1.0], [1.0, 2.0]])
    r = np.array([0.3, -1.0]) - y
    ref = np.exp(-np.sum(r * r, axis=1) / 4.0) / (4 * math.pi)
    np.testing.assert_allclose(rho(y), ref, rtol=1e-13)


def test_explicit_identity_returns_characteristic_density():
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    rho = linear_char_density(A, 1.0, [1.0, 0.5])
    y = np.random.default_rng(0).normal(size=(20, 2))
    np.testing.assert_allclose(explicit_density_divfree(identity_map(), None, rho, y, 1.0),
                               rho(y), rtol=1e-15)


@pytest.mark.parametrize("t", [0.5, 1.0, 2.0])
def test_explicit_rotation_closed_form(t):
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    x = (1.0, 0.5)
    rho = linear_char_density(A, t, x)
    y = np.random.default_rng(1).normal(scale=2.0, size=(50, 2))
    f = explicit_density_divfree(identity_map(), None, rho, y, t)
    np.testing.assert_allclose(f, rotation_closed_form(t, x, y), rtol=0, atol=1e-8)


def test_explicit_linear_datum_and_reaction():
    L = np.array([[2.0, 0.5], [0.0, 1.0]])
    A = np.array([[0.0, -1.0], [1.0, 0.0]])
    rho = linear_char_density(A, 1.0, [0.2, 0.1])
    y = np.array([[0.4, -0.3], [1.0, 1.0]])
    f = explicit_density_divfree(linear_map(L), None, rho, y, 1.0)
    v = np.linalg.solve(L, y.T).T
    np.testing.assert_allclose(f, rho(v) / 2.0, rtol=1e-13)
    # F(z) = z scales each coordinate by e^t
    g = explicit_density_divfree(identity_map(), linear_reaction(1.0), rho, y, 1.0)
    np.testing.assert_allclose(g, math.exp(-2.0) * rho(y / math.e), rtol=1e-8)


def test_explicit_inversion_errors():
    with pytest.raises(InversionError):
        linear_map([[1.0, 2.0], [2.0, 4.0]])
    bad = Diffeomorphism(lambda y: y ** 2, lambda w: w, lambda y: np.ones(y.shape[:-1]))
    rho = linear_char_density(np.zeros((2, 2)), 1.0, [0.0, 0.0])
    with pytest.raises(InversionError):
        explicit_density_divfree(bad, None, rho, np.array([[2.0, 3.0]]), 1.0)
    flat = Diffeomorphism(lambda y: y, lambda w: w, lambda y: np.zeros(y.shape[:-1]))
    with pytest.raises(InversionError):
        explicit_density_divfree(flat, None, rho, np.array([[2.0, 3.0]]), 1.0)


def test_kde_2d_gaussian():
    s = np.random.default_rng(4).normal(size=(20_000, 2))
    p = np.array([[0.0, 0.0], [1.0, -1.0]])
    ref = np.exp(-np.sum(p * p, axis=1) / 2) / (2 * math.pi)
    np.testing.assert_allclose(kde_2d(s, p), ref, atol=0.01)


def test_run_explicit_small():
    rep = run_explicit_density(ExplicitConfig(n_samples=5000, n_steps=32, grid_points=9))
    assert rep.analytic_error < 1e-8
    assert rep.kde_error < 0.05
    assert rep.mass == pytest.approx(1.0, abs=1e-3)
    assert set(rep.summary()) == {"analytic_sup_error", "kde_sup_error", "formula_mass"}

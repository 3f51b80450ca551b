import math

import numpy as np
import pytest

from ftlab import flow
from ftlab.errors import FlowSolverError, GridMismatchError
from ftlab.fbm import TimeGrid, sample_fbm, sample_fbm_vector
from ftlab.fields import (
    get_drift,
    linear_drift,
    list_presets,
    rotation_drift,
    sin_damped_drift,
    sin_drift,
    zero_drift,
)


@pytest.fixture(scope="module")
def path05():
    return sample_fbm(TimeGrid(1.0, 1024), 0.5, (101,))


@pytest.fixture(scope="module")
def path075():
    return sample_fbm(TimeGrid(1.0, 1024), 0.75, (102,))


def exp_integration(lam, B, dt, x0, backward=False):
    """Exact solution of X' = lam X + dB/dt for piecewise-linear B."""
    g = math.exp(lam * dt)
    phi = (g - 1.0) / lam
    dB = np.diff(B)
    if backward:
        # R(u) = Y_{t-u,t}: R' = -lam R + d/du B_{t-u}
        g = math.exp(-lam * dt)
        phi = (g - 1.0) / (-lam)
        dB = np.diff(B[::-1])
    X = [x0]
    for d in dB:
        X.append(g * X[-1] + phi * d / dt)
    return np.array(X)


# ---------------------------------------------------------------------------
# drift presets

@pytest.mark.parametrize("drift", [sin_drift(), sin_damped_drift(), linear_drift(-0.7),
                                   rotation_drift()])
def test_jacobian_matches_finite_differences(drift):
    rng = np.random.default_rng(0)
    x = rng.uniform(-5, 5, size=(50, drift.dim))
    J = drift.b_prime(0.3, x)
    Jfd = drift.jacobian_fd(0.3, x)
    assert np.max(np.abs(J - Jfd)) <= 1e-6 * max(1.0, np.max(np.abs(J)))


@pytest.mark.parametrize("name", ["zero", "linear", "sin", "sin-damped", "rotation-2d"])
def test_certified_derivative_bound(name):
    drift = get_drift(name)
    rng = np.random.default_rng(1)
    x = rng.uniform(-20, 20, size=(20_000, drift.dim))
    J = drift.b_prime(0.0, x)
    norms = np.linalg.norm(J, ord=2, axis=(-2, -1))
    assert norms.max() <= drift.sup_norm_b_prime


def test_preset_catalog():
    cat = list_presets()
    assert cat["drifts"]["zero"]["sup_norm_b_prime"] == 0.0
    assert cat["drifts"]["sin"]["sup_norm_b_prime"] == 1.0
    assert cat["drifts"]["rotation-2d"]["divergence_free"] is True
    assert set(cat["initial_data"]) >= {"identity", "cubic", "arctan-shift", "bump"}
    assert set(cat["reactions"]) == {"zero", "linear", "constant"}
    assert cat["initial_data"]["arctan-shift"]["c_low"] == 1.0


# ---------------------------------------------------------------------------
# forward flow

def test_zero_drift_exact(path075):
    B = path075.values
    x = np.array([[-1.0], [0.0], [2.5]])
    fp = flow.forward_flow(zero_drift(), path075, 0, 1024, x)
    np.testing.assert_array_equal(fp.values[..., 0], x + B[None, :])
    ip = flow.inverse_flow(zero_drift(), path075, 1024, x)
    np.testing.assert_array_equal(ip.endpoint, x - B[-1])
    J = flow.flow_jacobian(zero_drift(), path075, 1024, x)
    assert np.all(J.values == 1.0)
    y = flow.invert_pointwise(zero_drift(), path075, 1024, x)
    np.testing.assert_allclose(y, x - B[-1], atol=1e-12)


def test_start_values(path05):
    fp = flow.forward_flow(sin_drift(), path05, 100, 600, 0.4)
    assert fp.values[0, 0] == 0.4
    assert fp.at(100)[0] == 0.4
    ip = flow.inverse_flow(sin_drift(), path05, 600, 0.4)
    assert ip.values[0, 0] == 0.4
    vp = flow.flow_jacobian(sin_drift(), path05, 600, 0.4)
    assert vp.values[0, 0, 0] == 1.0


def test_degenerate_horizon(path05):
    x = np.array([[0.3]])
    assert flow.inverse_flow(sin_drift(), path05, 0, x).endpoint[0, 0] == 0.3
    assert flow.invert_pointwise(sin_drift(), path05, 0, 0.3)[0] == 0.3
    assert flow.forward_flow(sin_drift(), path05, 5, 5, x).end[0, 0] == 0.3


@pytest.mark.parametrize("lam", [1.0, -0.8])
def test_linear_forward_oracle(path05, lam):
    B = path05.values
    x0 = 0.7
    fp = flow.forward_flow(linear_drift(lam), path05, 0, 1024, x0)
    ref = exp_integration(lam, B, path05.grid.dt, x0)
    np.testing.assert_allclose(fp.values[:, 0], ref, rtol=0, atol=1e-11)


@pytest.mark.parametrize("lam", [1.0, -0.8])
def test_linear_inverse_oracle(path05, lam):
    B = path05.values
    ip = flow.inverse_flow(linear_drift(lam), path05, 1024, 0.7)
    ref = exp_integration(lam, B, path05.grid.dt, 0.7, backward=True)
    np.testing.assert_allclose(ip.values[:, 0], ref, rtol=0, atol=1e-11)


def test_linear_jacobian(path075):
    vp = flow.flow_jacobian(linear_drift(0.6), path075, 1024, 0.2)
    np.testing.assert_allclose(vp.scalar, np.exp(0.6 * path075.grid.nodes), rtol=1e-12)


def test_jacobian_exponential_formula(path075):
    vp = flow.flow_jacobian(sin_drift(), path075, 1024, 0.2)
    X = vp.flow.values[:, 0]
    integral = np.concatenate([[0.0], np.cumsum(0.5 * path075.grid.dt
                                                * (np.cos(X[1:]) + np.cos(X[:-1])))])
    # the trapezoid oracle itself errs by O(dt^(1+H)) on this rough path
    np.testing.assert_allclose(vp.scalar, np.exp(integral), rtol=2e-5)


def test_rotation_volume_preserving():
    drv = sample_fbm_vector(TimeGrid(1.0, 512), (0.5, 0.5), (7,))
    x = np.array([[1.0, 0.5], [-2.0, 3.0]])
    vp = flow.flow_jacobian(rotation_drift(), drv, 512, x)
    det = np.linalg.det(vp.values)
    assert np.max(np.abs(det - 1.0)) < 1e-6


def test_composition_property(path075):
    rng = np.random.default_rng(3)
    drift = sin_drift()
    for _ in range(5):
        s, u, t = sorted(rng.choice(1025, size=3, replace=False))
        x = rng.uniform(-2, 2, size=(4, 1))
        first = flow.forward_flow(drift, path075, s, u, x).end
        two = flow.forward_flow(drift, path075, u, t, first).end
        direct = flow.forward_flow(drift, path075, s, t, x).end
        assert np.max(np.abs(two - direct)) < 1e-12


def test_integral_equation_residual(path05):
    # X_t - x - int b(X) dr - B_t, drift term by trapezoid on the fine grid
    drift = sin_drift()
    fp = flow.forward_flow(drift, path05, 0, 1024, 0.5)
    X = fp.values[:, 0]
    drift_int = np.concatenate([[0.0], np.cumsum(0.5 * path05.grid.dt
                                                 * (np.sin(X[1:]) + np.sin(X[:-1])))])
    res = X - 0.5 - drift_int - path05.values
    assert np.max(np.abs(res)) < 1e-4


@pytest.mark.parametrize("H", [0.5, 0.75])
def test_self_convergence_order(H):
    # fixed driving path; only the stepper is refined
    p = sample_fbm(TimeGrid(1.0, 64), H, (55,))
    drift = sin_drift()
    ends = [flow.forward_flow(drift, p, 0, 64, 0.3, flow.SolverOptions(substeps=q)).end[0]
            for q in (1, 2, 4, 8)]
    d = np.abs(np.diff(ends))
    orders = np.log2(d[:-1] / d[1:])
    assert np.min(orders) >= 2.0


# ---------------------------------------------------------------------------
# inverse flow and pointwise inversion

def test_roundtrip(path075):
    x = np.linspace(-2, 2, 16)[:, None]
    Y = flow.inverse_flow(sin_drift(), path075, 1024, x).endpoint
    XY = flow.flow_endpoint(sin_drift(), path075, 1024, Y)
    assert np.max(np.abs(XY - x)) < 1e-10


def test_inverse_path_accessors(path075):
    ip = flow.inverse_flow(sin_drift(), path075, 800, 0.1)
    np.testing.assert_array_equal(ip.Y(0), ip.endpoint)
    np.testing.assert_array_equal(ip.Y(800), [0.1])
    np.testing.assert_array_equal(ip.at(ip.grid.nodes[10]), ip.values[10])
    assert ip.backward_values()[0, 0] == ip.endpoint[0]
    with pytest.raises(GridMismatchError):
        ip.Y(900)


@pytest.mark.parametrize("drift", [sin_drift(), sin_damped_drift(), linear_drift(1.5)])
def test_invert_pointwise_agrees_with_inverse_flow(path05, drift):
    y = np.linspace(-3, 3, 7)[:, None]
    a = flow.invert_pointwise(drift, path05, 1024, y)
    b = flow.inverse_flow(drift, path05, 1024, y).endpoint
    np.testing.assert_allclose(a, b, atol=1e-8)
    X = flow.flow_endpoint(drift, path05, 1024, a)
    assert np.all(np.abs(X - y) < 1e-8 * (1 + np.abs(y)))


def test_invert_pointwise_monotone(path05):
    y = np.sort(np.random.default_rng(4).uniform(-4, 4, size=20))[:, None]
    x = flow.invert_pointwise(sin_drift(), path05, 1024, y)[:, 0]
    assert np.all(np.diff(x) > 0)


def test_invert_pointwise_newton_2d():
    drv = sample_fbm_vector(TimeGrid(1.0, 256), (0.5, 0.7), (8,))
    y = np.array([0.3, -1.2])
    x = flow.invert_pointwise(rotation_drift(), drv, 256, y)
    np.testing.assert_allclose(flow.flow_endpoint(rotation_drift(), drv, 256, x), y,
                               atol=1e-8 * (1 + np.abs(y).max()))
    np.testing.assert_allclose(x, flow.inverse_flow(rotation_drift(), drv, 256, y).endpoint,
                               atol=1e-8)


# ---------------------------------------------------------------------------
# options, errors, export

def test_step_doubling_refines(path075):
    opts = flow.SolverOptions(rtol=1e-14, max_substeps=64)
    a = flow.forward_flow(sin_drift(), path075, 0, 1024, 0.3, opts).end
    b = flow.forward_flow(sin_drift(), path075, 0, 1024, 0.3).end
    assert abs(a - b)[0] < 1e-10


def test_step_rejection_error(path075):
    with pytest.raises(FlowSolverError):
        flow.forward_flow(linear_drift(50.0), path075, 0, 1024, 1.0,
                          flow.SolverOptions(rtol=1e-300, max_substeps=2))


def test_dimension_and_index_errors(path075):
    with pytest.raises(GridMismatchError):
        flow.forward_flow(rotation_drift(), path075, 0, 10, [0.0, 0.0])
    with pytest.raises(GridMismatchError):
        flow.forward_flow(sin_drift(), path075, 10, 5, 0.0)
    with pytest.raises(GridMismatchError):
        flow.inverse_flow(sin_drift(), path075, 5000, 0.0)


def test_trajectory_csv(tmp_path, path075):
    fp = flow.forward_flow(sin_drift(), path075, 0, 8, 0.3)
    f = tmp_path / "traj.csv"
    fp.to_csv(f)
    lines = f.read_text().splitlines()
    assert lines[0] == "u,value_1"
    assert len(lines) == 10
    assert float(lines[-1].split(",")[1]) == fp.end[0]

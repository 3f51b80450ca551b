"""Characteristic flows driven by additive fractional noise.

The forward flow solves ``X_{s,t}(x) = x + int_s^t b(r, X_{s,r}) dr + B_t - B_s``.
Subtracting the noise increment turns it into the random ODE
``Z' = b(r, Z + B_r - B_s)``, which is integrated with classical RK4; ``B``
is linearly interpolated inside a grid interval, so the noise itself never
passes through the stepper.  The inverse flow ``Y_{s,t} = X_{s,t}^{-1}`` is
obtained from the time-reversed process ``R_{t,x}(u) = Y_{t-u,t}(x)``, which
solves a forward equation in ``u`` with drift ``-b(t - u, .)``; both
directions therefore share one integrator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import FlowSolverError, GridMismatchError, InversionError
from .fbm import FbmVectorPath, TimeGrid, as_vector_path, fmt
from .fields import DriftField

log = logging.getLogger(__name__)

DEFAULT_RTOL = 1e-6
MAX_SUBSTEPS = 64


@dataclass
class SolverOptions:
    """``substeps`` RK4 steps per grid interval; ``rtol`` enables step doubling.

    With ``rtol`` set, each interval is also integrated with twice as many
    substeps; when the difference (scaled by ``1 + |state|``) exceeds
    ``rtol`` anywhere, the whole solve is repeated with doubled substeps, up
    to ``max_substeps``.
    """

    substeps: int = 1
    rtol: Optional[float] = None
    max_substeps: int = MAX_SUBSTEPS


def _points(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dim:
        raise GridMismatchError(f"points have dimension {x.shape[-1]}, drift has {dim}")
    return x


def integrate(drift: DriftField, taus: np.ndarray, sign: float, noise: np.ndarray,
              x0: np.ndarray, options: SolverOptions | None = None, *,
              jacobian: bool = False, store: bool = True):
    """Solve ``S(a) = x0 + int_0^a sign * b(tau(a'), S) da' + noise(a) - noise(0)``.

    ``taus`` holds the physical times at the ``m + 1`` nodes (increasing or
    decreasing, uniformly spaced); ``noise`` has shape ``(..., m + 1, d)``
    and broadcasts against ``x0`` of shape ``(..., d)``.  Returns ``S`` with
    shape ``(..., m + 1, d)`` (or ``(..., d)`` when ``store`` is false) and,
    with ``jacobian``, the matching ``dS/dx0`` matrices.
    """
    options = options or SolverOptions()
    q = options.substeps
    while True:
        try:
            return _integrate(drift, taus, sign, noise, x0, q, jacobian, store,
                              options.rtol)
        except _Reject as rej:
            if 2 * q > options.max_substeps:
                raise FlowSolverError(
                    f"local error {rej.err:.3g} exceeds rtol={options.rtol} "
                    f"with {q} substeps per interval") from None
            log.debug("refining to %d substeps (local error %.3g)", 2 * q, rej.err)
            q *= 2


class _Reject(Exception):
    def __init__(self, err):
        self.err = err


def _integrate(drift, taus, sign, noise, x0, q, jacobian, store, rtol):
    taus = np.asarray(taus, dtype=float)
    noise = np.asarray(noise, dtype=float)
    m = taus.size - 1
    d = drift.dim
    offsets = noise - noise[..., :1, :]
    batch = np.broadcast_shapes(x0.shape[:-1], offsets.shape[:-2])
    Z = np.broadcast_to(x0, batch + (d,)).astype(float, copy=True)
    J = np.broadcast_to(np.eye(d), batch + (d, d)).copy() if jacobian else None

    if store:
        S_out = np.empty(batch + (m + 1, d))
        S_out[..., 0, :] = Z
        J_out = np.empty(batch + (m + 1, d, d)) if jacobian else None
        if jacobian:
            J_out[..., 0, :, :] = J

    if m == 0 or (drift.is_zero and not store):
        S_end = Z + offsets[..., -1, :]
        if store:
            return (S_out, J_out) if jacobian else S_out
        return (S_end, J) if jacobian else S_end

    for k in range(m):
        t0, t1 = taus[k], taus[k + 1]
        o0, o1 = offsets[..., k, :], offsets[..., k + 1, :]
        if drift.is_zero:
            pass
        elif rtol is None:
            Z, J = _advance(drift, sign, t0, t1, o0, o1, Z, J, q)
        else:
            Zc, Jc = _advance(drift, sign, t0, t1, o0, o1, Z, J, q)
            Z, J = _advance(drift, sign, t0, t1, o0, o1, Z, J, 2 * q)
            err = np.max(np.abs(Zc - Z) / (1.0 + np.abs(Z + o1)))
            if err > rtol:
                raise _Reject(err)
        if store:
            S_out[..., k + 1, :] = Z + o1
            if jacobian:
                J_out[..., k + 1, :, :] = J
    if store:
        return (S_out, J_out) if jacobian else S_out
    S_end = Z + offsets[..., -1, :]
    return (S_end, J) if jacobian else S_end


def _advance(drift, sign, t0, t1, o0, o1, Z, J, q):
    """``q`` RK4 substeps across one grid interval."""
    h = abs(t1 - t0) / q
    dt_phys = (t1 - t0) / q
    do = (o1 - o0) / q
    b, bp = drift.b, drift.b_prime

    def f(i, frac, Zs, Js):
        tau = t0 + (i + frac) * dt_phys
        S = Zs + o0 + (i + frac) * do
        dz = sign * b(tau, S)
        dj = sign * (bp(tau, S) @ Js) if Js is not None else None
        return dz, dj

    for i in range(q):
        k1, l1 = f(i, 0.0, Z, J)
        k2, l2 = f(i, 0.5, Z + 0.5 * h * k1, None if J is None else J + 0.5 * h * l1)
        k3, l3 = f(i, 0.5, Z + 0.5 * h * k2, None if J is None else J + 0.5 * h * l2)
        k4, l4 = f(i, 1.0, Z + h * k3, None if J is None else J + h * l3)
        Z = Z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if J is not None:
            J = J + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
    return Z, J


# ---------------------------------------------------------------------------
# path containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FlowPath:
    """``values[..., k, :] = X_{s, t_{s+k}}(x0)`` for ``k = 0..t_index - s_index``."""

    grid: TimeGrid
    s_index: int
    t_index: int
    x0: np.ndarray
    values: np.ndarray
    driving: FbmVectorPath

    @property
    def end(self) -> np.ndarray:
        return self.values[..., -1, :]

    def at(self, index: int) -> np.ndarray:
        """Value at absolute grid index ``index``."""
        if not self.s_index <= index <= self.t_index:
            raise GridMismatchError(f"index {index} outside [{self.s_index}, {self.t_index}]")
        return self.values[..., index - self.s_index, :]

    def to_csv(self, path) -> None:
        times = self.grid.nodes[self.s_index:self.t_index + 1]
        _write_traj(path, "u", times, self.values)


@dataclass(frozen=True, eq=False)
class InverseFlowPath:
    """``values[..., k, :] = R_{t,x}(u_k) = Y_{t - u_k, t}(x)`` with ``u_k = k dt``."""

    grid: TimeGrid
    t_index: int
    x: np.ndarray
    values: np.ndarray
    driving: FbmVectorPath

    @property
    def endpoint(self) -> np.ndarray:
        """``Y_{0,t}(x)``."""
        return self.values[..., -1, :]

    def at(self, u: float) -> np.ndarray:
        """``R_{t,x}(u)`` for ``u`` on the grid."""
        return self.values[..., self.grid.index_of(u), :]

    def Y(self, s_index: int) -> np.ndarray:
        """``Y_{s,t}(x)`` for grid index ``s_index <= t_index``."""
        if not 0 <= s_index <= self.t_index:
            raise GridMismatchError(f"s_index {s_index} outside [0, {self.t_index}]")
        return self.values[..., self.t_index - s_index, :]

    def backward_values(self) -> np.ndarray:
        """``Y_{r_k, t}(x)`` ordered by ``r_k = k dt``, ``k = 0..t_index``."""
        return self.values[..., ::-1, :]

    def to_csv(self, path) -> None:
        _write_traj(path, "u", self.grid.nodes[:self.t_index + 1], self.values)


@dataclass(frozen=True, eq=False)
class VariationPath:
    """First variation ``dX_{0,t_k}/dx`` as ``d x d`` matrices."""

    grid: TimeGrid
    values: np.ndarray
    flow: FlowPath

    @property
    def end(self) -> np.ndarray:
        return self.values[..., -1, :, :]

    @property
    def scalar(self) -> np.ndarray:
        """``d = 1`` convenience: ``X'_{t_k}(x)`` as plain numbers."""
        return self.values[..., 0, 0]


def _write_traj(path, tname, times, values):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("only single trajectories can be exported")
    d = values.shape[-1]
    with open(path, "w", newline="") as fh:
        fh.write(",".join([tname] + [f"value_{i + 1}" for i in range(d)]) + "\n")
        for t, row in zip(times, values):
            fh.write(",".join([fmt(t)] + [fmt(v) for v in row]) + "\n")


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def _check(drift: DriftField, driving: FbmVectorPath, *indices):
    if driving.dim != drift.dim:
        raise GridMismatchError(f"driving path has {driving.dim} components, drift has {drift.dim}")
    n = driving.grid.n_steps
    for i in indices:
        if not 0 <= i <= n:
            raise GridMismatchError(f"index {i} outside grid [0, {n}]")


def forward_noise(B: np.ndarray, s_index: int, t_index: int) -> np.ndarray:
    return B[..., s_index:t_index + 1, :]


def reversed_noise(B: np.ndarray, t_index: int) -> np.ndarray:
    """Noise for the ``R`` process: ``B_{t - u_k}`` for ``k = 0..t_index``."""
    return B[..., t_index::-1, :]


def forward_flow(drift: DriftField, driving, s_index: int, t_index: int, x0,
                 options: SolverOptions | None = None) -> FlowPath:
    """Forward characteristic ``X_{s,t}(x0)`` on the grid nodes from s to t."""
    driving = as_vector_path(driving)
    _check(drift, driving, s_index, t_index)
    if s_index > t_index:
        raise GridMismatchError("forward_flow requires s_index <= t_index")
    x0 = _points(x0, drift.dim)
    taus = driving.grid.nodes[s_index:t_index + 1]
    B = driving.values
    vals = integrate(drift, taus, 1.0, forward_noise(B, s_index, t_index), x0, options)
    return FlowPath(driving.grid, s_index, t_index, x0, vals, driving)


def inverse_flow(drift: DriftField, driving, t_index: int, x,
                 options: SolverOptions | None = None) -> InverseFlowPath:
    """Backward flow via the time reversal ``R_{t,x}(u) = Y_{t-u,t}(x)``."""
    driving = as_vector_path(driving)
    _check(drift, driving, t_index)
    x = _points(x, drift.dim)
    taus = driving.grid.nodes[t_index::-1]
    vals = integrate(drift, taus, -1.0, reversed_noise(driving.values, t_index), x, options)
    return InverseFlowPath(driving.grid, t_index, x, vals, driving)


def flow_jacobian(drift: DriftField, driving, t_index: int, x,
                  options: SolverOptions | None = None) -> VariationPath:
    """Solve the variational equation ``J' = b'(r, X_r) J`` alongside the flow."""
    driving = as_vector_path(driving)
    _check(drift, driving, t_index)
    x = _points(x, drift.dim)
    taus = driving.grid.nodes[:t_index + 1]
    S, J = integrate(drift, taus, 1.0, forward_noise(driving.values, 0, t_index), x,
                     options, jacobian=True)
    flow = FlowPath(driving.grid, 0, t_index, x, S, driving)
    return VariationPath(driving.grid, J, flow)


def flow_endpoint(drift: DriftField, driving, t_index: int, x,
                  options: SolverOptions | None = None, jacobian: bool = False):
    """``X_{0,t}(x)`` only (and optionally its Jacobian), without storing the path."""
    driving = as_vector_path(driving)
    x = _points(x, drift.dim)
    taus = driving.grid.nodes[:t_index + 1]
    return integrate(drift, taus, 1.0, forward_noise(driving.values, 0, t_index), x,
                     options, jacobian=jacobian, store=False)


def invert_pointwise(drift: DriftField, driving, t_index: int, y,
                     options: SolverOptions | None = None, tol: float = 1e-8) -> np.ndarray:
    """Find ``x`` with ``X_{0,t}(x) = y`` to ``|X(x) - y| < tol (1 + |y|)``.

    In one dimension the flow map is strictly increasing, so the root is
    bracketed and found with Brent's method.  In higher dimensions a damped
    Newton iteration uses the variational Jacobian.
    """
    driving = as_vector_path(driving)
    _check(drift, driving, t_index)
    y = _points(y, drift.dim)
    if y.ndim > 1:
        return np.stack([invert_pointwise(drift, driving, t_index, yi, options, tol) for yi in y])
    B_t = driving.values[t_index]
    if t_index == 0:
        return y.copy()
    if drift.dim == 1:
        return _invert_1d(drift, driving, t_index, y, B_t, options, tol)
    return _invert_newton(drift, driving, t_index, y, B_t, options, tol)


def _invert_1d(drift, driving, t_index, y, B_t, options, tol):
    t = driving.grid.nodes[t_index]

    def g(x):
        return float(flow_endpoint(drift, driving, t_index, np.array([x]), options)[0]) - y[0]

    guess = y[0] - B_t[0]
    if drift.is_zero:
        return np.array([guess])
    width = drift.sup_norm_b * t + 1.0 if np.isfinite(drift.sup_norm_b) else 1.0
    lo, hi = guess - width, guess + width
    glo, ghi = g(lo), g(hi)
    for _ in range(60):
        if glo <= 0.0 <= ghi:
            break
        width *= 2.0
        if glo > 0.0:
            lo = guess - width
            glo = g(lo)
        if ghi < 0.0:
            hi = guess + width
            ghi = g(hi)
    else:
        raise InversionError(f"no bracket found for y={y[0]} (last [{lo}, {hi}] -> [{glo}, {ghi}])")
    if glo == 0.0:
        return np.array([lo])
    if ghi == 0.0:
        return np.array([hi])
    x = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    res = abs(g(x))
    if res >= tol * (1 + abs(y[0])):
        raise InversionError(f"bracketing converged to residual {res:.3g} for y={y[0]}")
    return np.array([x])


def _invert_newton(drift, driving, t_index, y, B_t, options, tol, max_iter=50):
    x = y - B_t
    X, J = flow_endpoint(drift, driving, t_index, x, options, jacobian=True)
    r = X - y
    res = np.linalg.norm(r)
    for it in range(max_iter):
        if res < tol * (1 + np.linalg.norm(y)):
            return x
        step = np.linalg.solve(J, r)
        lam = 1.0
        while lam > 1e-6:
            xn = x - lam * step
            Xn, Jn = flow_endpoint(drift, driving, t_index, xn, options, jacobian=True)
            rn = Xn - y
            if np.linalg.norm(rn) < res:
                break
            lam *= 0.5
        else:
            raise InversionError(f"Newton stalled at residual {res:.3g} after {it} iterations")
        x, J, r, res = xn, Jn, rn, np.linalg.norm(rn)
    if res < tol * (1 + np.linalg.norm(y)):
        return x
    raise InversionError(f"Newton did not converge: residual {res:.3g} after {max_iter} iterations")

"""Solution of the stochastic transport equation by characteristics.

``u(t, x) = Z_t(u0(Y_{0,t}(x)))`` where ``Y`` is the inverse characteristic
flow and ``Z`` solves the deterministic reaction ODE.  The weak formulation
is checked numerically: spatial pairings against a test function are
computed in Lagrangian coordinates (``y = X_s(x)``), and the stochastic
term uses the epsilon-regularized symmetric integral.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sp_integrate

from . import flow as flow_mod
from .errors import DomainError, FlowSolverError, GridMismatchError
from .fbm import FbmPath, FbmVectorPath, as_vector_path
from .fields import DriftField, InitialDatum, ReactionField, TestFunction, zero_reaction


class SupportTruncationWarning(UserWarning):
    """The Lagrangian grid does not cover the test function's support."""


# ---------------------------------------------------------------------------
# reaction ODE
# ---------------------------------------------------------------------------

def _rk4_reaction(F: ReactionField, z, t, n, backward, jacobian):
    h = t / n
    z = np.array(z, dtype=float, copy=True)
    J = np.ones_like(z) if jacobian else None
    sgn = -1.0 if backward else 1.0
    for i in range(n):
        s0 = t - i * h if backward else i * h

        def f(s, zz):
            return sgn * F(s, zz)

        def fj(s, zz, jj):
            return sgn * F.F_prime(s, zz) * jj

        sm, s1 = s0 + sgn * 0.5 * h, s0 + sgn * h
        k1 = f(s0, z)
        k2 = f(sm, z + 0.5 * h * k1)
        k3 = f(sm, z + 0.5 * h * k2)
        k4 = f(s1, z + h * k3)
        if jacobian:
            l1 = fj(s0, z, J)
            l2 = fj(sm, z + 0.5 * h * k1, J + 0.5 * h * l1)
            l3 = fj(sm, z + 0.5 * h * k2, J + 0.5 * h * l2)
            l4 = fj(s1, z + h * k3, J + h * l3)
            J = J + (h / 6.0) * (l1 + 2 * l2 + 2 * l3 + l4)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return z, J


def solve_Z(F: ReactionField, r, t: float, n_steps: int = 64, rtol: float = 1e-12,
            max_steps: int = 1 << 16, backward: bool = False, jacobian: bool = False):
    """Solve ``Z_t(r) = r + int_0^t F(s, Z_s(r)) ds`` with RK4 and step doubling.

    ``backward=True`` integrates from ``t`` down to ``0`` starting at ``r``,
    which evaluates the inverse map ``Z_t^{-1}``.  Reactions act
    componentwise on vector arguments, so the Jacobian is diagonal and
    ``jacobian=True`` returns its diagonal alongside the value.
    """
    if t < 0:
        raise DomainError("solve_Z needs t >= 0")
    r = np.asarray(r, dtype=float)
    if t == 0 or F.is_zero:
        out = (r.copy(), np.ones_like(r)) if jacobian else r.copy()
        return out
    n = n_steps
    z, J = _rk4_reaction(F, r, t, n, backward, jacobian)
    while True:
        z2, J2 = _rk4_reaction(F, r, t, 2 * n, backward, jacobian)
        err = np.max(np.abs(z2 - z) / (1.0 + np.abs(z2))) / 15.0
        if err <= rtol:
            return (z2, J2) if jacobian else z2
        n *= 2
        if n > max_steps:
            raise FlowSolverError(f"reaction ODE error {err:.3g} above rtol={rtol} at {n} steps")
        z, J = z2, J2


# ---------------------------------------------------------------------------
# representation formula
# ---------------------------------------------------------------------------

@dataclass
class SolutionSample:
    t: float
    x: np.ndarray
    value: np.ndarray
    seed: tuple
    flags: list = field(default_factory=list)


def solution_from_inverse(u0, F: ReactionField, Y: np.ndarray, t: float) -> np.ndarray:
    """Assemble ``Z_t(u0(Y))`` from inverse-flow endpoints of shape ``(..., d)``."""
    arg = Y[..., 0] if Y.shape[-1] == 1 else Y
    return solve_Z(F, u0(arg), t)


def evaluate_solution(u0: InitialDatum, F: ReactionField | None, drift: DriftField, driving,
                      t_index: int, x, options=None) -> SolutionSample:
    """``u(t, x) = Z_t(u0(Y_{0,t}(x)))`` for one driving path."""
    driving = as_vector_path(driving)
    F = F or zero_reaction()
    t = float(driving.grid.nodes[t_index])
    Y = flow_mod.inverse_flow(drift, driving, t_index, x, options).endpoint
    flags = []
    if not F.is_zero and any(h != 0.5 for h in driving.hurst.components):
        flags.append("extrapolated: reaction with fractional noise")
    value = solution_from_inverse(u0, F, Y, t)
    return SolutionSample(t, np.asarray(x), value, driving.components[0].seed, flags)


# ---------------------------------------------------------------------------
# symmetric integral
# ---------------------------------------------------------------------------

@dataclass
class SymmetricIntegral:
    """Regularized values ``I(eps)`` and their Richardson limit."""

    value: float
    eps: tuple
    raw: tuple

    def __float__(self):
        return float(self.value)


def eps_integral(Y: np.ndarray, X: np.ndarray, k: int, dt: float) -> np.ndarray:
    """``int_0^t Y_s (X_{s+eps} - X_{s-eps}) / (2 eps) ds`` with ``eps = k dt``.

    Trapezoid rule on the grid; ``X`` is extended by ``X_0`` to the left and
    by ``X_t`` to the right.  Leading axes broadcast.
    """
    if k < 1:
        raise GridMismatchError("epsilon must be a positive multiple of the grid step")
    Y = np.asarray(Y, dtype=float)
    X = np.asarray(X, dtype=float)
    n = X.shape[-1] - 1
    right = np.repeat(X[..., -1:], k, axis=-1)
    left = np.repeat(X[..., :1], k, axis=-1)
    ahead = np.concatenate([X[..., k:], right], axis=-1)
    behind = np.concatenate([left, X[..., :n + 1 - k]], axis=-1)
    q = Y * (ahead - behind) / (2.0 * k * dt)
    return dt * (q.sum(axis=-1) - 0.5 * (q[..., 0] + q[..., -1]))


def symmetric_integral(integrand, driver, dt: float, epsilon: float,
                       extrapolate: bool = True) -> SymmetricIntegral:
    """Symmetric (Stratonovich-type) integral ``int_0^t Y d°X``.

    Evaluates the regularized integral at ``epsilon``, ``epsilon / 2`` and
    ``epsilon / 4`` and combines them by two-level Richardson extrapolation
    (orders 1 and 2).  All three must be multiples of ``dt``.
    """
    ratio = epsilon / dt
    k0 = int(round(ratio))
    if k0 < 1 or abs(k0 - ratio) > 1e-9 * max(1.0, ratio):
        raise GridMismatchError(f"epsilon={epsilon} is not a multiple of dt={dt}")
    if not extrapolate:
        v = eps_integral(integrand, driver, k0, dt)
        return SymmetricIntegral(v, (epsilon,), (v,))
    if k0 % 4:
        raise GridMismatchError(f"epsilon/4 = {epsilon / 4} is not a multiple of dt={dt}")
    I1, I2, I4 = (eps_integral(integrand, driver, k, dt) for k in (k0, k0 // 2, k0 // 4))
    r_a = 2.0 * I2 - I1
    r_b = 2.0 * I4 - I2
    value = (4.0 * r_b - r_a) / 3.0
    return SymmetricIntegral(value, (epsilon, epsilon / 2, epsilon / 4), (I1, I2, I4))


# ---------------------------------------------------------------------------
# weak formulation
# ---------------------------------------------------------------------------

@dataclass
class WeakResidual:
    residual: float
    terms: dict
    scale: float
    dt: float
    dx: float
    eps: float
    n_steps: int

    @property
    def relative(self) -> float:
        return abs(self.residual) / self.scale if self.scale > 0 else abs(self.residual)

    def to_dict(self) -> dict:
        return {"residual": self.residual, "relative": self.relative, "scale": self.scale,
                "dt": self.dt, "dx": self.dx, "eps": self.eps, "n_steps": self.n_steps,
                **{f"term_{k}": v for k, v in self.terms.items()}}


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def weak_form_residual(u0: InitialDatum, drift: DriftField, driving, test_fn: TestFunction,
                       t_index: int, n_x: int = 801, eps_multiple: int = 4,
                       options=None) -> WeakResidual:
    """Left side minus the four right-hand terms of the weak formulation.

    ``int u(t,x) phi(x) dx`` is evaluated directly from the inverse flow on
    an Eulerian grid covering the support of ``phi``.  The time integrals
    use the push-forward ``int u(s,y) psi(y) dy = int u0(x) X_s'(x) psi(X_s(x)) dx``
    on a Lagrangian grid, and the stochastic term uses
    :func:`symmetric_integral` with ``epsilon = eps_multiple * dt``.
    """
    driving = as_vector_path(driving)
    if drift.dim != 1 or driving.dim != 1:
        raise DomainError("weak_form_residual is one-dimensional")
    grid = driving.grid
    dt = grid.dt
    t = float(grid.nodes[t_index])
    B = driving.values[:t_index + 1, 0]
    a, b = test_fn.support

    # Eulerian pairings at time t
    xe = np.linspace(a, b, _odd(n_x))
    Y = flow_mod.inverse_flow(drift, driving, t_index, xe[:, None], options).endpoint[:, 0]
    phi_e = test_fn.phi(xe)
    lhs = sp_integrate.simpson(u0(Y) * phi_e, x=xe)
    initial = sp_integrate.simpson(u0(xe) * phi_e, x=xe)

    # Lagrangian grid of starting points
    if math.isfinite(drift.sup_norm_b):
        pad = 4.0 * (drift.sup_norm_b * t + np.max(np.abs(B)))
    else:
        pad = 4.0 * (1.0 + np.max(np.abs(B)))
    lo, hi = a - pad, b + pad
    covered = True
    if u0.support is not None:
        lo, hi = max(lo, u0.support[0]), min(hi, u0.support[1])
    xl = np.linspace(lo, hi, _odd(2 * n_x))
    vf = flow_mod.flow_jacobian(drift, driving, t_index, xl[:, None], options)
    X = vf.flow.values[..., 0]            # (n_x, n_t)
    Jx = vf.values[..., 0, 0]
    if u0.support is None or lo > u0.support[0] or hi < u0.support[1]:
        covered = bool(np.all(X[0] <= a) and np.all(X[-1] >= b))
    if not covered:
        warnings.warn("Lagrangian grid does not cover the test function support at all times",
                      SupportTruncationWarning, stacklevel=2)

    w = u0(xl)[:, None] * Jx
    times = grid.nodes[:t_index + 1]
    bx = drift.b(times[None, :, None], X[..., None])[..., 0]
    bpx = drift.b_prime(times[None, :, None], X[..., None])[..., 0, 0]
    phi_x, dphi_x = test_fn.phi(X), test_fn.dphi(X)
    A = sp_integrate.simpson(w * bx * dphi_x, x=xl, axis=0)
    Bp = sp_integrate.simpson(w * bpx * phi_x, x=xl, axis=0)
    C = sp_integrate.simpson(w * dphi_x, x=xl, axis=0)

    drift_term = sp_integrate.trapezoid(A, dx=dt)
    div_term = sp_integrate.trapezoid(Bp, dx=dt)
    eps = eps_multiple * dt
    noise_term = float(symmetric_integral(C, B, dt, eps))

    terms = {"lhs": float(lhs), "initial": float(initial), "drift": float(drift_term),
             "divergence": float(div_term), "noise": noise_term}
    residual = terms["lhs"] - (terms["initial"] + terms["drift"] + terms["divergence"]
                               + terms["noise"])
    scale = max(abs(v) for v in terms.values())
    return WeakResidual(residual, terms, scale, dt, float(xl[1] - xl[0]), eps, grid.n_steps)


def weak_residual_study(u0: InitialDatum, drift: DriftField, fine_path, test_fn: TestFunction,
                        levels, eps_multiple: int = 4, n_x: int = 801, options=None):
    """Residuals along a refinement sequence, all from one fine driving path.

    ``levels`` are exponents ``j`` with ``n = 2^j``; the fine path must live
    on a grid whose step count is divisible by every ``2^j``.
    """
    fine = as_vector_path(fine_path)
    out = []
    for j in levels:
        factor = fine.grid.n_steps // (1 << j)
        coarse = fine.subsample(factor) if factor > 1 else fine
        out.append(weak_form_residual(u0, drift, coarse, test_fn, coarse.grid.n_steps,
                                      n_x=n_x, eps_multiple=eps_multiple, options=options))
    return out

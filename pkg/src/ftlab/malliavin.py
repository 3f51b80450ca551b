"""Malliavin derivatives of the inverse flow and canonical Hilbert-space pairings.

In one dimension the derivative of the inverse flow has the closed form
``D_a Y_{s,t}(x) = -1_{[s,t]}(a) exp(-int_s^a b'(r, Y_{r,t}(x)) dr)``, so a
whole trace costs one cumulative trapezoid along a stored inverse path.

Pairings in the fBm Hilbert space are taken between piecewise-constant
functions on the grid cells.  For ``H > 1/2`` the weight
``H (2H - 1) |u - v|^{2H-2}`` integrates in closed form over a pair of
cells, giving ``dt^{2H} rho_H(j - k)`` with ``rho_H`` the fractional
Gaussian noise autocovariance.  The pairing is therefore exact for step
functions, including the singular diagonal cells.  At ``H = 1/2`` it
reduces to the ``L^2`` product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import flow as flow_mod
from .errors import DomainError, GridMismatchError, UnsupportedError
from .fbm import TimeGrid, as_vector_path, fgn_autocovariance
from .fields import DriftField, InitialDatum

# floating-point slack when asserting pathwise bounds; covers summation
# roundoff only, never sampling error
ROUNDOFF_RTOL = 1e-12


# ---------------------------------------------------------------------------
# derivative traces
# ---------------------------------------------------------------------------

def trace_from_inverse(drift: DriftField, grid: TimeGrid, backward: np.ndarray,
                       s_index: int, t_index: int) -> np.ndarray:
    """Node values of ``a -> D_a Y_{s,t}(x)`` on the full grid.

    ``backward[..., k, :]`` must hold ``Y_{r_k, t}(x)`` for ``k = 0..t_index``.
    Leading axes broadcast; the result has shape ``(..., n + 1)`` and is zero
    at nodes outside ``[s, t]``.
    """
    if drift.dim != 1:
        raise UnsupportedError("closed-form Malliavin traces are one-dimensional")
    if not 0 <= s_index <= t_index <= grid.n_steps:
        raise GridMismatchError(f"need 0 <= s_index <= t_index <= {grid.n_steps}")
    Yb = backward[..., s_index:t_index + 1, 0]
    r = grid.nodes[s_index:t_index + 1]
    bp = drift.b_prime(r, Yb[..., None])[..., 0, 0]
    expo = np.zeros_like(Yb)
    if t_index > s_index:
        expo[..., 1:] = np.cumsum(0.5 * grid.dt * (bp[..., 1:] + bp[..., :-1]), axis=-1)
    out = np.zeros(Yb.shape[:-1] + (grid.n_steps + 1,))
    out[..., s_index:t_index + 1] = -np.exp(-expo)
    return out


@dataclass(frozen=True, eq=False)
class MalliavinTrace:
    """``values[..., k] = D_{a_k} Y_{s,t}(x)`` at every grid node ``a_k``."""

    grid: TimeGrid
    s_index: int
    t_index: int
    x: np.ndarray
    values: np.ndarray

    def cells(self) -> np.ndarray:
        """Cell averages, the step function used in Hilbert-space pairings."""
        v = 0.5 * (self.values[..., 1:] + self.values[..., :-1])
        mask = np.zeros(self.grid.n_steps, dtype=bool)
        mask[self.s_index:self.t_index] = True
        return np.where(mask, v, 0.0)


def malliavin_trace(drift: DriftField, inverse_path: flow_mod.InverseFlowPath,
                    s_index: int = 0) -> MalliavinTrace:
    p = inverse_path
    vals = trace_from_inverse(drift, p.grid, p.backward_values(), s_index, p.t_index)
    return MalliavinTrace(p.grid, s_index, p.t_index, p.x, vals)


def derivative_Y(drift: DriftField, inverse_path: flow_mod.InverseFlowPath, s_index: int,
                 t_index: int, alpha: float):
    """``D_alpha Y_{s,t}(x)`` for ``alpha`` on the grid (zero outside ``[s, t]``)."""
    if t_index != inverse_path.t_index:
        raise GridMismatchError(f"inverse path was computed for t_index={inverse_path.t_index}")
    k = inverse_path.grid.index_of(alpha)
    return malliavin_trace(drift, inverse_path, s_index).values[..., k]


def derivative_u(u0: InitialDatum, drift: DriftField, inverse_path: flow_mod.InverseFlowPath,
                 t_index: int, alpha: float):
    """Chain rule ``D_alpha u(t, x) = u0'(Y_{0,t}(x)) D_alpha Y_{0,t}(x)``."""
    dY = derivative_Y(drift, inverse_path, 0, t_index, alpha)
    return u0.prime(inverse_path.endpoint[..., 0]) * dY


def derivative_bound_constants(drift: DriftField, T: float) -> tuple[float, float]:
    """``(exp(-T |b'|_inf), exp(T |b'|_inf))``."""
    k = T * drift.sup_norm_b_prime
    return math.exp(-k), math.exp(k)


# ---------------------------------------------------------------------------
# Hilbert-space pairing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InnerProductResult:
    value: float
    H: float
    quadrature_error_estimate: float


def cell_weights(n: int, H: float, dt: float) -> np.ndarray:
    """First column ``dt^{2H} rho_H(k)`` of the Toeplitz weight matrix."""
    if H < 0.5:
        raise UnsupportedError(f"Hilbert-space pairing is implemented for H >= 1/2, got H={H}")
    if not H < 1.0:
        raise DomainError(f"H must be < 1, got {H}")
    return dt ** (2.0 * H) * fgn_autocovariance(np.arange(n), H)


def _toeplitz_apply(col: np.ndarray, g: np.ndarray) -> np.ndarray:
    if col.size == 1 or not np.any(col[1:]):
        return col[0] * g
    flat = g.reshape(-1, g.shape[-1])
    return linalg.matmul_toeplitz(col, flat.T).T.reshape(g.shape)


def pairing(f: np.ndarray, g: np.ndarray, H: float, dt: float) -> np.ndarray:
    """Batched ``<f, g>`` over the last axis of cell values; exactly symmetric."""
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.shape[-1] != g.shape[-1]:
        raise GridMismatchError("cell arrays have different lengths")
    col = cell_weights(f.shape[-1], H, dt)
    Tf, Tg = _toeplitz_apply(col, f), _toeplitz_apply(col, g)
    return 0.5 * (np.sum(f * Tg, axis=-1) + np.sum(g * Tf, axis=-1))


def _coarsen(c: np.ndarray) -> np.ndarray:
    return 0.5 * (c[..., 0::2] + c[..., 1::2])


def h_inner_product(f, g, H: float, dt: float) -> InnerProductResult:
    """Pairing of two step functions given by their values on the grid cells.

    The error estimate is the change against the same pairing on the grid
    coarsened by two (``nan`` when the cell count is odd).
    """
    value = float(pairing(f, g, H, dt))
    f = np.asarray(f, dtype=float)
    if f.shape[-1] % 2 == 0 and f.shape[-1] >= 2:
        coarse = float(pairing(_coarsen(f), _coarsen(np.asarray(g, dtype=float)), H, 2 * dt))
        err = abs(value - coarse)
    else:
        err = math.nan
    return InnerProductResult(value, H, err)


def indicator(grid: TimeGrid, a: float, b: float) -> np.ndarray:
    """Cell values of ``1_[a, b]``; partially covered cells get the covered fraction."""
    left = grid.nodes[:-1]
    right = grid.nodes[1:]
    cover = np.clip(np.minimum(right, b) - np.maximum(left, a), 0.0, None)
    return cover / grid.dt


# ---------------------------------------------------------------------------
# coupled pairings
# ---------------------------------------------------------------------------

def traces_for_paths(drift: DriftField, grid: TimeGrid, B: np.ndarray, t_index: int, x,
                     options=None) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-flow endpoints ``(N,)`` and trace cell values ``(N, n)``.

    ``B`` holds ``N`` one-dimensional driving paths with shape ``(N, n + 1, 1)``.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    noise = flow_mod.reversed_noise(B, t_index)
    vals = flow_mod.integrate(drift, grid.nodes[t_index::-1], -1.0, noise, x, options)
    nodes = trace_from_inverse(drift, grid, vals[..., ::-1, :], 0, t_index)
    cells = 0.5 * (nodes[..., 1:] + nodes[..., :-1])
    cells[..., t_index:] = 0.0
    return vals[..., -1, 0], cells


def cross_inner_product(drift: DriftField, driving, coupled_driving, t_index: int, x,
                        H: float, options=None) -> float:
    """``<D Y_{0,t}(x), D~Y_{0,t}(x)>`` with the second trace driven by the coupled path."""
    p, q = as_vector_path(driving), as_vector_path(coupled_driving)
    if p.grid != q.grid:
        raise GridMismatchError("driving and coupled paths live on different grids")
    for path in (p, q):
        if any(h != H for h in path.hurst.components):
            raise GridMismatchError(f"driving path has H={path.hurst.components}, "
                                    f"pairing uses H={H}")
    B = np.stack([p.values, q.values])
    _, cells = traces_for_paths(drift, p.grid, B, t_index, x, options)
    return float(pairing(cells[0], cells[1], H, p.grid.dt))


def cross_inner_products(drift: DriftField, grid: TimeGrid, B: np.ndarray, Bc: np.ndarray,
                         t_index: int, x, H: float, options=None):
    """Batched pairings for ``N`` (path, coupled path) couples.

    Returns ``(pairings, Y, Yc)`` where ``Y``, ``Yc`` are the inverse-flow
    endpoints under each driving path.
    """
    Y, f = traces_for_paths(drift, grid, B, t_index, x, options)
    Yc, g = traces_for_paths(drift, grid, Bc, t_index, x, options)
    return pairing(f, g, H, grid.dt), Y, Yc

"""Exact sampling of fractional Brownian motion on uniform grids.

Three generators share one interface:

* ``cholesky`` factorizes the Gram matrix of the path values (exact).
* ``circulant`` embeds the stationary increment sequence in a circulant
  matrix and diagonalizes it with the FFT (exact, O(n log n)).
* ``volterra`` discretizes the Wiener-integral representation with the
  kernel :func:`kernel_K`.  It exists to cross-check the other two and is
  only available for ``H >= 1/2``.
"""

from __future__ import annotations

import csv
import functools
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .errors import DomainError, FactorizationError, GridMismatchError, UnsupportedError
from .rng import SeedLike, child, seed_key, stream

log = logging.getLogger(__name__)

METHODS = ("cholesky", "circulant", "volterra")
CHOLESKY_MAX_N = 1024
# eigenvalues below -NEG_EIG_TOL * max are a genuine embedding failure
NEG_EIG_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k * t_end / n_steps`` for ``k = 0..n_steps``."""

    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_end) and self.t_end > 0):
            raise DomainError(f"t_end must be positive, got {self.t_end}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise DomainError(f"n_steps must be a positive integer, got {self.n_steps}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "t_end", float(self.t_end))

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; raises if ``t`` is not a node."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_steps or abs(k * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise GridMismatchError(f"t={t} is not a node of {self}")
        return k

    def coarsen(self, factor: int) -> "TimeGrid":
        if self.n_steps % factor:
            raise GridMismatchError(f"{self.n_steps} steps not divisible by {factor}")
        return TimeGrid(self.t_end, self.n_steps // factor)

    def to_dict(self) -> dict:
        return {"t_end": self.t_end, "n_steps": self.n_steps}


def _check_hurst(H: float) -> float:
    H = float(H)
    if not (0.0 < H < 1.0):
        raise DomainError(f"Hurst index must lie in (0, 1), got {H}")
    return H


@dataclass(frozen=True)
class HurstVector:
    components: tuple[float, ...]

    def __post_init__(self):
        comps = tuple(_check_hurst(h) for h in np.atleast_1d(self.components))
        if not comps:
            raise DomainError("HurstVector needs at least one component")
        object.__setattr__(self, "components", comps)

    @property
    def dim(self) -> int:
        return len(self.components)

    @classmethod
    def coerce(cls, hurst) -> "HurstVector":
        return hurst if isinstance(hurst, cls) else cls(tuple(np.atleast_1d(hurst)))


@dataclass(frozen=True, eq=False)
class FbmPath:
    """One sampled path ``B^H(t_k)`` with ``values[0] == 0``."""

    grid: TimeGrid
    hurst: float
    values: np.ndarray
    seed: tuple[int, ...]
    method: str
    info: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.nodes

    def subsample(self, factor: int) -> "FbmPath":
        """The same path seen on a grid ``factor`` times coarser."""
        return FbmPath(self.grid.coarsen(factor), self.hurst, self.values[::factor],
                       self.seed, self.method, dict(self.info, subsampled=factor))

    def to_csv(self, path) -> None:
        write_path_csv(path, self.times, self.values)


@dataclass(frozen=True, eq=False)
class FbmVectorPath:
    components: tuple[FbmPath, ...]
    hurst: HurstVector

    def __post_init__(self):
        grids = {c.grid for c in self.components}
        if len(grids) != 1:
            raise GridMismatchError("components of a vector path must share one grid")

    @property
    def grid(self) -> TimeGrid:
        return self.components[0].grid

    @property
    def dim(self) -> int:
        return len(self.components)

    @property
    def values(self) -> np.ndarray:
        """Array of shape ``(n_steps + 1, d)``."""
        return np.stack([c.values for c in self.components], axis=-1)

    def subsample(self, factor: int) -> "FbmVectorPath":
        return FbmVectorPath(tuple(c.subsample(factor) for c in self.components), self.hurst)

    def to_csv(self, stem) -> list[str]:
        """Write one ``t,value`` file per component; returns the file names."""
        names = []
        for i, comp in enumerate(self.components):
            name = f"{stem}_{i}.csv"
            comp.to_csv(name)
            names.append(name)
        return names


def as_vector_path(path) -> FbmVectorPath:
    if isinstance(path, FbmVectorPath):
        return path
    if isinstance(path, FbmPath):
        return FbmVectorPath((path,), HurstVector((path.hurst,)))
    raise TypeError(f"expected FbmPath or FbmVectorPath, got {type(path).__name__}")


# ---------------------------------------------------------------------------
# covariance
# ---------------------------------------------------------------------------

def covariance(t, s, H: float):
    """Covariance ``E[B_t B_s] = (t^2H + s^2H - |t - s|^2H) / 2``."""
    H = _check_hurst(H)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t < 0) or np.any(s < 0):
        raise DomainError("covariance is defined for non-negative times only")
    h2 = 2.0 * H
    out = 0.5 * (t**h2 + s**h2 - np.abs(t - s) ** h2)
    return float(out) if out.ndim == 0 else out


def gram_matrix(grid: TimeGrid, H: float) -> np.ndarray:
    """Gram matrix over the nodes ``t_1..t_n`` (``t_0 = 0`` is omitted)."""
    t = grid.nodes[1:]
    return covariance(t[:, None], t[None, :], H)


@functools.lru_cache(maxsize=32)
def _cholesky(t_end: float, n_steps: int, H: float) -> np.ndarray:
    G = gram_matrix(TimeGrid(t_end, n_steps), H)
    try:
        L = np.linalg.cholesky(G)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(
            f"Gram matrix not positive definite (n={n_steps}, H={H})") from exc
    L.setflags(write=False)
    return L


def cholesky_factor(grid: TimeGrid, H: float) -> np.ndarray:
    """Lower Cholesky factor of :func:`gram_matrix` (cached, read-only)."""
    return _cholesky(grid.t_end, grid.n_steps, _check_hurst(H))


def fgn_autocovariance(k, H: float) -> np.ndarray:
    """Autocovariance of unit-spaced fractional Gaussian noise at lags ``k``."""
    k = np.abs(np.asarray(k, dtype=float))
    h2 = 2.0 * H
    return 0.5 * ((k + 1) ** h2 - 2 * k**h2 + np.abs(k - 1) ** h2)


@functools.lru_cache(maxsize=32)
def _circulant_eigs(n: int, H: float):
    r = fgn_autocovariance(np.arange(n + 1), H)
    row = np.concatenate([r, r[-2:0:-1]])
    lam = np.fft.fft(row).real
    lam_max = lam.max()
    lam_min = lam.min()
    if lam_min < -NEG_EIG_TOL * lam_max:
        return None, {"min_eigenvalue": float(lam_min)}
    clipped = int(np.count_nonzero(lam < 0))
    lam = np.where(lam < 0, 0.0, lam)
    sqrt_lam = np.sqrt(lam / row.size)
    sqrt_lam.setflags(write=False)
    return sqrt_lam, {"clipped_eigenvalues": clipped, "min_eigenvalue": float(lam_min)}


# ---------------------------------------------------------------------------
# Volterra kernel
# ---------------------------------------------------------------------------

def kernel_constant(H: float) -> float:
    """Normalizing constant of :func:`kernel_K` for ``H > 1/2``."""
    return float(np.sqrt(H * (2 * H - 1) / special.beta(2 - 2 * H, H - 0.5)))


_N_TAYLOR = 64
_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def kernel_K(t, s, H: float):
    """Square-integrable kernel with ``B^H_t = int_0^t K(t, s) dW_s``.

    For ``H > 1/2``::

        K(t, s) = c_H s^(1/2 - H) int_s^t (u - s)^(H - 3/2) u^(H - 1/2) du

    The integrable singularity at ``u = s`` is handled analytically on
    ``[s, s + delta]`` (binomial series of ``u^(H-1/2)`` around ``s``,
    integrated term by term); the rest is Gauss-Legendre in ``log(u - s)``.
    ``H = 1/2`` gives the constant 1.  Other ``H < 1/2`` are unsupported.
    """
    H = _check_hurst(H)
    t, s = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(s, dtype=float))
    if np.any(s <= 0) or np.any(s >= t):
        raise DomainError("kernel_K requires 0 < s < t")
    if H == 0.5:
        out = np.ones_like(t)
        return float(out) if out.ndim == 0 else out
    if H < 0.5:
        raise UnsupportedError("kernel_K is only provided for H >= 1/2")

    a = H - 0.5
    span = t - s
    delta = np.minimum(span, 0.5 * s)
    r = delta / s
    k = np.arange(_N_TAYLOR)
    binom = special.binom(a, k)
    series = np.sum(binom * r[..., None] ** k / (a + k), axis=-1)
    near = s**a * delta**a * series

    lo = np.log(delta)
    hi = np.log(span)
    half = 0.5 * (hi - lo)
    v = (0.5 * (hi + lo))[..., None] + half[..., None] * _GL_X
    ev = np.exp(v)
    far = half * np.sum(_GL_W * ev**a * (s[..., None] + ev) ** a, axis=-1)

    out = kernel_constant(H) * s**(-a) * (near + far)
    return float(out) if out.ndim == 0 else out


@functools.lru_cache(maxsize=8)
def _volterra_matrix(t_end: float, n_steps: int, H: float, refine: int = 8, levels: int = 40):
    """Cell-averaged kernel on a refined, geometrically graded ``s`` grid.

    Returns ``(M, widths)`` with ``B(t_j) ~= sum_c M[j, c] sqrt(widths[c]) xi_c``.
    """
    grid = TimeGrid(t_end, n_steps)
    fine = np.linspace(0.0, t_end, n_steps * refine + 1)
    graded = fine[1] * 2.0 ** -np.arange(levels, 0, -1)
    edges = np.concatenate([[0.0], graded, fine[1:]])
    widths = np.diff(edges)
    # Gauss-Legendre nodes inside every cell
    gx, gw = np.polynomial.legendre.leggauss(8)
    mid = 0.5 * (edges[1:] + edges[:-1])
    pts = mid[:, None] + 0.5 * widths[:, None] * gx
    t = grid.nodes[1:]
    M = np.zeros((n_steps, widths.size))
    for j, tj in enumerate(t):
        inside = edges[1:] <= tj * (1 + 1e-12)
        vals = kernel_K(tj, pts[inside], H)
        M[j, inside] = 0.5 * vals @ gw
    M.setflags(write=False)
    widths.setflags(write=False)
    return M, widths


def volterra_gram(grid: TimeGrid, H: float) -> np.ndarray:
    """Gram matrix actually realized by the discretized Volterra sampler."""
    M, w = _volterra_matrix(grid.t_end, grid.n_steps, _check_hurst(H))
    return (M * w) @ M.T


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def default_method(grid: TimeGrid) -> str:
    return "cholesky" if grid.n_steps <= CHOLESKY_MAX_N else "circulant"


def _draw(grid: TimeGrid, H: float, rng: np.random.Generator, method: str, info: dict):
    n = grid.n_steps
    if method == "circulant":
        sqrt_lam, meta = _circulant_eigs(n, H)
        info.update(meta)
        if sqrt_lam is None:
            log.warning("circulant embedding not nonnegative definite (n=%d, H=%g); "
                        "falling back to cholesky", n, H)
            info["fallback"] = "cholesky"
            method = "cholesky"
        else:
            m = sqrt_lam.size
            z = rng.standard_normal(m) + 1j * rng.standard_normal(m)
            inc = np.fft.fft(sqrt_lam * z)[:n].real * grid.dt**H
            return np.concatenate([[0.0], np.cumsum(inc)]), method
    if method == "cholesky":
        L = cholesky_factor(grid, H)
        return np.concatenate([[0.0], L @ rng.standard_normal(n)]), method
    if method == "volterra":
        if H < 0.5:
            raise UnsupportedError("volterra sampling requires H >= 1/2")
        M, w = _volterra_matrix(grid.t_end, n, H)
        xi = rng.standard_normal(w.size) * np.sqrt(w)
        return np.concatenate([[0.0], M @ xi]), method
    raise DomainError(f"unknown method {method!r}; expected one of {METHODS}")


def sample_fbm(grid: TimeGrid, H: float, seed: SeedLike, method: str | None = None) -> FbmPath:
    """Draw one fBm path on ``grid`` from the random stream ``seed``.

    Identical ``(grid, H, seed, method)`` give bit-identical paths.  The
    circulant method falls back to Cholesky when the embedding is not
    nonnegative definite; ``info["fallback"]`` records it.
    """
    H = _check_hurst(H)
    method = method or default_method(grid)
    info: dict = {"requested_method": method}
    values, used = _draw(grid, H, stream(seed), method, info)
    return FbmPath(grid, H, values, seed_key(seed), used, info)


def sample_fbm_vector(grid: TimeGrid, hurst, seed: SeedLike,
                      method: str | None = None) -> FbmVectorPath:
    """Independent components; component ``i`` uses the stream ``(*seed, i)``."""
    hurst = HurstVector.coerce(hurst)
    comps = tuple(sample_fbm(grid, h, child(seed, i), method)
                  for i, h in enumerate(hurst.components))
    return FbmVectorPath(comps, hurst)


def sample_ensemble(grid: TimeGrid, hurst, seed: SeedLike, n_paths: int,
                    method: str | None = None, start: int = 0) -> np.ndarray:
    """Array ``(n_paths, n_steps + 1, d)`` of vector paths.

    Row ``p`` equals ``sample_fbm_vector(grid, hurst, (*seed, start + p))``.
    """
    hurst = HurstVector.coerce(hurst)
    method = method or default_method(grid)
    n = grid.n_steps
    out = np.zeros((n_paths, n + 1, hurst.dim))
    for c, H in enumerate(hurst.components):
        used = method
        if method == "circulant" and _circulant_eigs(n, H)[0] is None:
            used = "cholesky"
        if used == "cholesky":
            L = cholesky_factor(grid, H)
            z = np.empty((n_paths, n))
            for p in range(n_paths):
                z[p] = stream(seed, start + p, c).standard_normal(n)
            out[:, 1:, c] = z @ L.T
        elif used == "circulant":
            sqrt_lam = _circulant_eigs(n, H)[0]
            m = sqrt_lam.size
            z = np.empty((n_paths, m), dtype=complex)
            for p in range(n_paths):
                g = stream(seed, start + p, c)
                z[p] = g.standard_normal(m) + 1j * g.standard_normal(m)
            inc = np.fft.fft(sqrt_lam * z, axis=-1)[:, :n].real * grid.dt**H
            out[:, 1:, c] = np.cumsum(inc, axis=-1)
        else:
            for p in range(n_paths):
                out[p, :, c] = sample_fbm(grid, H, child(seed, start + p, c), used).values
    return out


def ou_couple(path: FbmPath, fresh: FbmPath, theta: float) -> FbmPath:
    """Ornstein-Uhlenbeck interpolation ``e^-theta path + sqrt(1 - e^-2theta) fresh``."""
    if path.grid != fresh.grid:
        raise GridMismatchError("ou_couple: paths live on different grids")
    if path.hurst != fresh.hurst:
        raise GridMismatchError("ou_couple: paths have different Hurst indices")
    values = ou_mix(path.values, fresh.values, theta)
    return FbmPath(path.grid, path.hurst, values, path.seed, path.method,
                   {"ou_theta": float(theta), "fresh_seed": fresh.seed})


def ou_mix(a: np.ndarray, b: np.ndarray, theta) -> np.ndarray:
    """Array form of :func:`ou_couple`; ``theta`` broadcasts over leading axes."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < 0) or np.any(np.isnan(theta)):
        raise DomainError("theta must be nonnegative")
    w_old = np.exp(-theta)
    # -expm1(-2 theta) keeps the weight accurate for small theta
    w_new = np.sqrt(-np.expm1(-2.0 * theta))
    shape = w_old.shape + (1,) * (np.ndim(a) - w_old.ndim)
    return w_old.reshape(shape) * a + w_new.reshape(shape) * b


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def fmt(x: float) -> str:
    """17 significant digits, enough to round-trip a double."""
    return format(float(x), ".17g")


def write_path_csv(path, times: Sequence[float], values: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "value"])
        for t, v in zip(times, values):
            w.writerow([fmt(t), fmt(v)])


def ensemble_manifest(grid: TimeGrid, H, seed: SeedLike, method: str, build: str) -> dict:
    return {"seed": list(seed_key(seed)), "method": method,
            "H": list(HurstVector.coerce(H).components),
            "grid": grid.to_dict(), "build": build}

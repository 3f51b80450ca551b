"""Drift fields, initial data and reaction terms, plus the named presets.

Every preset carries the constants the numerical modules rely on: the
certified bound on the spatial derivative of the drift, the bounds on the
derivative of a monotone initial datum, and the divergence-free flag.
Spatial arguments always have a trailing axis of length ``d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError

Vector = np.ndarray


@dataclass(frozen=True)
class DriftField:
    """Drift ``b(t, x)`` with its Jacobian ``b'(t, x)[..., i, j] = d b_i / d x_j``.

    ``sup_norm_b_prime`` bounds the operator norm of the Jacobian over
    ``[0, T] x R^d`` (in ``d = 1``, ``sup |b'|``).  ``sup_norm_b`` may be
    ``inf`` for unbounded (but Lipschitz) drifts.
    """

    name: str
    dim: int
    b: Callable[[float, Vector], Vector]
    b_prime: Callable[[float, Vector], np.ndarray]
    sup_norm_b_prime: float
    sup_norm_b: float = math.inf
    divergence_free: bool = False
    is_zero: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, t, x):
        return self.b(t, x)

    def jacobian_fd(self, t, x, h=1e-5):
        """Central finite-difference Jacobian, for self-consistency checks."""
        x = np.asarray(x, dtype=float)
        cols = []
        for j in range(self.dim):
            e = np.zeros(self.dim)
            e[j] = h
            cols.append((self.b(t, x + e) - self.b(t, x - e)) / (2 * h))
        return np.stack(cols, axis=-1)

    def describe(self) -> dict:
        return {"name": self.name, "dim": self.dim, "sup_norm_b_prime": self.sup_norm_b_prime,
                "sup_norm_b": self.sup_norm_b, "divergence_free": self.divergence_free,
                **self.params}


@dataclass(frozen=True)
class InitialDatum:
    """Scalar initial condition ``u0`` on ``R`` (or a map ``R^d -> R``).

    When ``monotone`` is set, ``c_low <= u0' <= c_high`` holds everywhere.
    """

    name: str
    u0: Callable[[np.ndarray], np.ndarray]
    u0_prime: Optional[Callable[[np.ndarray], np.ndarray]] = None
    monotone: bool = False
    c_low: float = math.nan
    c_high: float = math.nan
    lower: float = -math.inf
    upper: float = math.inf
    support: Optional[tuple[float, float]] = None

    def __post_init__(self):
        if self.monotone and not (0 < self.c_low <= self.c_high < math.inf):
            raise DomainError(f"{self.name}: monotone datum needs 0 < c_low <= c_high")

    def __call__(self, y):
        return self.u0(np.asarray(y, dtype=float))

    def prime(self, y):
        if self.u0_prime is None:
            raise DomainError(f"initial datum {self.name!r} has no derivative")
        return self.u0_prime(np.asarray(y, dtype=float))

    def describe(self) -> dict:
        return {"name": self.name, "monotone": self.monotone, "c_low": self.c_low,
                "c_high": self.c_high}


@dataclass(frozen=True)
class ReactionField:
    """Reaction term ``F(t, z)`` and its derivative in ``z``."""

    name: str
    F: Callable[[float, np.ndarray], np.ndarray]
    F_prime: Callable[[float, np.ndarray], np.ndarray]
    lipschitz: float
    is_zero: bool = False

    def __call__(self, t, z):
        return self.F(t, z)


# ---------------------------------------------------------------------------
# drifts
# ---------------------------------------------------------------------------

def zero_drift(dim: int = 1) -> DriftField:
    return DriftField(
        "zero", dim,
        b=lambda t, x: np.zeros_like(np.asarray(x, dtype=float)),
        b_prime=lambda t, x: np.zeros(np.shape(x) + (dim,)),
        sup_norm_b_prime=0.0, sup_norm_b=0.0, divergence_free=True, is_zero=True)


def linear_drift(lam: float = 1.0) -> DriftField:
    """``b(x) = lam * x`` in one dimension."""
    lam = float(lam)
    return DriftField(
        "linear", 1,
        b=lambda t, x: lam * np.asarray(x, dtype=float),
        b_prime=lambda t, x: np.full(np.shape(x) + (1,), lam),
        sup_norm_b_prime=abs(lam), divergence_free=lam == 0.0,
        is_zero=lam == 0.0, params={"lambda": lam})


def sin_drift() -> DriftField:
    """``b(x) = sin x``; ``sup |cos| = 1``."""
    return DriftField(
        "sin", 1,
        b=lambda t, x: np.sin(x),
        b_prime=lambda t, x: np.cos(x)[..., None],
        sup_norm_b_prime=1.0, sup_norm_b=1.0)


def _damped_prime(x):
    c = np.cos(x)
    return c * (3.0 - c * c) / (1.0 + c * c) ** 2


# max over c in [0, 1] of c (3 - c^2) / (1 + c^2)^2, rounded up
_DAMPED_BOUND = 0.8802


def sin_damped_drift() -> DriftField:
    """``b(x) = sin x / (1 + cos^2 x)``."""
    return DriftField(
        "sin-damped", 1,
        b=lambda t, x: np.sin(x) / (1.0 + np.cos(x) ** 2),
        b_prime=lambda t, x: _damped_prime(x)[..., None],
        sup_norm_b_prime=_DAMPED_BOUND, sup_norm_b=1.0)


ROTATION = np.array([[0.0, -1.0], [1.0, 0.0]])


def rotation_drift() -> DriftField:
    """``b(p) = A p`` with ``A`` the generator of planar rotations (trace 0)."""
    A = ROTATION
    return DriftField(
        "rotation-2d", 2,
        b=lambda t, x: np.asarray(x, dtype=float) @ A.T,
        b_prime=lambda t, x: np.broadcast_to(A, np.shape(x)[:-1] + (2, 2)),
        sup_norm_b_prime=1.0, divergence_free=True, params={"generator": A.tolist()})


DRIFTS: dict[str, Callable[..., DriftField]] = {
    "zero": zero_drift,
    "linear": linear_drift,
    "sin": sin_drift,
    "sin-damped": sin_damped_drift,
    "rotation-2d": rotation_drift,
}


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------

def identity_datum() -> InitialDatum:
    return InitialDatum("identity", lambda y: y, lambda y: np.ones_like(y),
                        monotone=True, c_low=1.0, c_high=1.0)


def cubic_datum() -> InitialDatum:
    return InitialDatum("cubic", lambda y: y**3, lambda y: 3.0 * y**2)


def arctan_shift_datum() -> InitialDatum:
    """``u0(y) = y + arctan(y) / 2`` with ``1 < u0' <= 3/2``."""
    return InitialDatum("arctan-shift", lambda y: y + 0.5 * np.arctan(y),
                        lambda y: 1.0 + 0.5 / (1.0 + y * y),
                        monotone=True, c_low=1.0, c_high=1.5)


def _bump(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - yi * yi))
    return out


def _bump_prime(y):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    inside = np.abs(y) < 1.0
    yi = y[inside]
    q = 1.0 - yi * yi
    out[inside] = np.exp(1.0 - 1.0 / q) * (-2.0 * yi / (q * q))
    return out


def bump_datum() -> InitialDatum:
    """Smooth bump ``exp(1 - 1/(1 - y^2))`` on ``(-1, 1)``, peak value 1."""
    return InitialDatum("bump", _bump, _bump_prime, lower=0.0, upper=1.0, support=(-1.0, 1.0))


def zero_datum() -> InitialDatum:
    return InitialDatum("zero", lambda y: np.zeros_like(y), lambda y: np.zeros_like(y),
                        lower=0.0, upper=0.0)


INITIAL_DATA: dict[str, Callable[[], InitialDatum]] = {
    "identity": identity_datum,
    "cubic": cubic_datum,
    "arctan-shift": arctan_shift_datum,
    "bump": bump_datum,
    "zero": zero_datum,
}


# ---------------------------------------------------------------------------
# test functions and reactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestFunction:
    """Compactly supported smooth ``phi`` with derivative, on ``(center +- radius)``."""

    __test__ = False  # not a pytest class

    center: float = 0.0
    radius: float = 1.0

    @property
    def support(self) -> tuple[float, float]:
        return (self.center - self.radius, self.center + self.radius)

    def phi(self, x):
        return _bump((np.asarray(x, dtype=float) - self.center) / self.radius)

    def dphi(self, x):
        return _bump_prime((np.asarray(x, dtype=float) - self.center) / self.radius) / self.radius


def zero_reaction() -> ReactionField:
    return ReactionField("zero", lambda t, z: np.zeros_like(np.asarray(z, dtype=float)),
                         lambda t, z: np.zeros_like(np.asarray(z, dtype=float)), 0.0, True)


def linear_reaction(lam: float = 1.0) -> ReactionField:
    lam = float(lam)
    return ReactionField("linear", lambda t, z: lam * np.asarray(z, dtype=float),
                         lambda t, z: np.full(np.shape(z), lam), abs(lam), lam == 0.0)


def constant_reaction(c: float = 1.0) -> ReactionField:
    c = float(c)
    return ReactionField("constant", lambda t, z: np.full(np.shape(z), c),
                         lambda t, z: np.zeros(np.shape(z)), 0.0, c == 0.0)


REACTIONS: dict[str, Callable[..., ReactionField]] = {
    "zero": zero_reaction,
    "linear": linear_reaction,
    "constant": constant_reaction,
}


def get_drift(name: str, **kw) -> DriftField:
    try:
        return DRIFTS[name](**kw)
    except KeyError:
        raise DomainError(f"unknown drift preset {name!r}") from None


def get_datum(name: str) -> InitialDatum:
    try:
        return INITIAL_DATA[name]()
    except KeyError:
        raise DomainError(f"unknown initial datum preset {name!r}") from None


def get_reaction(name: str, **kw) -> ReactionField:
    try:
        return REACTIONS[name](**kw)
    except KeyError:
        raise DomainError(f"unknown reaction preset {name!r}") from None


def list_presets() -> dict:
    """Catalog of named presets with their certified constants."""
    drifts = {}
    for name in DRIFTS:
        d = DRIFTS[name]()
        drifts[name] = {"dim": d.dim, "sup_norm_b_prime": d.sup_norm_b_prime,
                        "sup_norm_b": d.sup_norm_b, "divergence_free": d.divergence_free}
    data = {name: {k: v for k, v in f().describe().items() if k != "name"}
            for name, f in INITIAL_DATA.items()}
    reactions = {name: {"lipschitz": f().lipschitz} for name, f in REACTIONS.items()}
    return {"drifts": drifts, "initial_data": data, "reactions": reactions}

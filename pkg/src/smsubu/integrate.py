"""One-step splitting maps for kinetic Langevin dynamics.

Every map is parameterized by a duration ``t`` with velocity decay ``exp(-gamma t)``.
UBU uses two OU segments of length ``h/2`` around a full kick; BAOAB uses one
O refresh of length ``h``.

Noise is always built from independent standard normals ``xi`` so coupled
chains can substitute their own draws. Anything with a ``standard_normal``
method works as a noise source; :data:`NO_NOISE` switches noise off.
"""
from dataclasses import dataclass
from functools import lru_cache
import math

import numpy as np

__all__ = [
    "PhaseState",
    "OUCoeffs",
    "ou_coeffs",
    "ZeroNoise",
    "NO_NOISE",
    "ou_apply",
    "ou_step",
    "b_kick",
    "a_drift",
    "o_refresh",
    "ubu_step",
    "baoab_step",
    "euler_step",
    "leapfrog_kick_drift",
    "reflect_hypercube",
    "reflect_inplace",
]

# below this value of u = gamma t / 2 the cancelling differences use series
_SERIES_U = 1e-2


@dataclass(frozen=True)
class PhaseState:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if np.shape(self.x) != np.shape(self.v):
            raise ValueError("x and v must have the same shape")

    @classmethod
    def of(cls, x, v):
        return cls(np.array(x, dtype=float, ndmin=1), np.array(v, dtype=float, ndmin=1))


@dataclass(frozen=True)
class OUCoeffs:
    """Exact OU solution over duration ``t`` and its noise construction.

    ``x' = x + F v + sx1 xi1 + sx2 xi2`` and ``v' = eta v + sv1 xi1 + sv2 xi2``,
    where the xi-coefficients expand ``Zx = sqrt(2/gamma)(Z1 - Z2)``,
    ``Zv = sqrt(2 gamma) Z2`` with ``Z1 = sqrt(t) xi1`` and
    ``Z2 = z2_scale (c xi1 + sqrt(1 - c^2) xi2)``.
    """

    t: float
    gamma: float
    eta: float
    F: float
    c: float
    s: float  # sqrt(1 - c^2)
    z2_scale: float
    sx1: float
    sx2: float
    sv1: float
    sv2: float

    def as_array(self):
        return np.array([self.F, self.eta, self.sx1, self.sx2, self.sv1, self.sv2])


@lru_cache(maxsize=256)
def ou_coeffs(t, gamma):
    if not t > 0:
        raise ValueError("duration t must be positive")
    if not gamma > 0:
        raise ValueError("friction gamma must be positive")
    gt = gamma * t
    u = 0.5 * gt
    eta = math.exp(-gt)
    F = -math.expm1(-gt) / gamma
    z2_scale = math.sqrt(-math.expm1(-2.0 * gt) / (2.0 * gamma))
    c2 = math.tanh(u) / u  # (1 - eta) / (1 + eta) * 2 / (gamma t)
    if u < _SERIES_U:
        u2 = u * u
        one_minus_c2 = u2 * (1 / 3 + u2 * (-2 / 15 + u2 * (17 / 315 + u2 * (-62 / 2835 + u2 * 1382 / 155925))))
        one_minus_p = u * (2 + u * (-7 / 3 + u * (2 + u * (-62 / 45 + u * (4 / 5 + u * (-127 / 315 + u * 34 / 189))))))
    else:
        one_minus_c2 = 1.0 - c2
        one_minus_p = 1.0 - (-math.expm1(-4.0 * u) / (4.0 * u)) * c2
    c = math.sqrt(c2)
    s = math.sqrt(max(one_minus_c2, 0.0))
    # sqrt(t) - z2_scale c = sqrt(t) (1 - sqrt(P)), P = z2_scale^2 c^2 / t
    p = 1.0 - one_minus_p
    sx1 = math.sqrt(2.0 / gamma) * math.sqrt(t) * one_minus_p / (1.0 + math.sqrt(p))
    sx2 = -math.sqrt(2.0 / gamma) * z2_scale * s
    sv1 = math.sqrt(2.0 * gamma) * z2_scale * c
    sv2 = math.sqrt(2.0 * gamma) * z2_scale * s
    return OUCoeffs(t, gamma, eta, F, c, s, z2_scale, sx1, sx2, sv1, sv2)


class ZeroNoise:
    """Noise source returning zeros; turns every map into its deterministic part."""

    def standard_normal(self, size=None):
        return np.zeros(size)


NO_NOISE = ZeroNoise()


def ou_apply(x, v, co, xi1, xi2):
    return (x + co.F * v + co.sx1 * xi1 + co.sx2 * xi2,
            co.eta * v + co.sv1 * xi1 + co.sv2 * xi2)


def ou_step(state, t, gamma, rng, noise=None):
    """Exact OU flow over ``t``; ``noise`` is an optional (2, d) array ``(xi1, xi2)``."""
    co = ou_coeffs(float(t), float(gamma))
    xi = rng.standard_normal((2, state.x.size)) if noise is None else noise
    return PhaseState(*ou_apply(state.x, state.v, co, xi[0], xi[1]))


def b_kick(state, h, grad_value):
    grad_value = np.asarray(grad_value, dtype=float)
    if grad_value.shape != state.v.shape:
        raise ValueError("gradient and velocity dimensions differ")
    return PhaseState(state.x, state.v - h * grad_value)


def a_drift(state, t):
    return PhaseState(state.x + t * state.v, state.v)


def o_refresh(v, t, gamma, rng, noise=None):
    eta = math.exp(-gamma * t)
    xi = rng.standard_normal(np.shape(v)) if noise is None else noise
    return eta * v + math.sqrt(-math.expm1(-2.0 * gamma * t)) * xi


def ubu_step(state, h, gamma, grad_at, rng, noise=None):
    """U(h/2) B(h) U(h/2); ``noise`` is an optional (4, d) array, two rows per U."""
    co = ou_coeffs(0.5 * h, float(gamma))
    xi = rng.standard_normal((4, state.x.size)) if noise is None else noise
    x, v = ou_apply(state.x, state.v, co, xi[0], xi[1])
    v = v - h * grad_at(x)
    x, v = ou_apply(x, v, co, xi[2], xi[3])
    return PhaseState(x, v)


def baoab_step(state, h, gamma, cached_grad, grad_at, rng, noise=None):
    """B(h/2) A(h/2) O(h) A(h/2) B(h/2) reusing the gradient at the incoming point.

    Returns the new state and the fresh gradient at the new position.
    """
    v = state.v - 0.5 * h * cached_grad
    x = state.x + 0.5 * h * v
    v = o_refresh(v, h, gamma, rng, noise)
    x = x + 0.5 * h * v
    g = grad_at(x)
    v = v - 0.5 * h * g
    return PhaseState(x, v), g


def euler_step(state, h, gamma, grad_at, rng, noise=None):
    xi = rng.standard_normal(state.x.size) if noise is None else noise
    g = grad_at(state.x)
    x = state.x + h * state.v
    v = state.v - h * g - h * gamma * state.v + math.sqrt(2.0 * gamma * h) * xi
    return PhaseState(x, v)


def leapfrog_kick_drift(state, h, grad_at):
    """Position half drift, full kick, position half drift. Deterministic."""
    x = state.x + 0.5 * h * state.v
    v = state.v - h * grad_at(x)
    x = x + 0.5 * h * v
    return PhaseState(x, v)


def reflect_inplace(x, v, center, rho_max):
    """Elastic bounces off the faces of ``|x - center|_inf <= rho_max``; mutates ``x`` and ``v``."""
    lo = center - rho_max
    hi = center + rho_max
    while True:
        above = x > hi
        below = x < lo
        if not (above.any() or below.any()):
            return x, v
        x[above] = 2.0 * hi[above] - x[above]
        x[below] = 2.0 * lo[below] - x[below]
        v[above | below] *= -1.0


def reflect_hypercube(state, center, rho_max):
    if rho_max <= 0:
        raise ValueError("rho_max must be positive")
    center = np.broadcast_to(np.asarray(center, dtype=float), state.x.shape)
    x, v = reflect_inplace(state.x.copy(), state.v.copy(), center, rho_max)
    return PhaseState(x, v)

"""Diagnostics: Gelman-Rubin, Hessian norm, weighted norms, contraction, and Lyapunov oracles."""
from dataclasses import dataclass, field
import math
import warnings

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

from .errors import InstabilityError, UndefinedDiagnosticError
from .integrate import PhaseState, ubu_step

__all__ = [
    "WeightedNormParams",
    "weighted_norm",
    "gelman_rubin",
    "PowerIterationResult",
    "hessian_norm_power_iteration",
    "ou_covariance",
    "affine_step_map",
    "LyapunovOracle",
    "lyapunov_oracle",
    "lyapunov_invariant_covariance",
    "ContractionResult",
    "contraction_check",
    "contraction_bound",
]


@dataclass(frozen=True)
class WeightedNormParams:
    a: float
    b: float

    def __post_init__(self):
        if not self.a > 0 or self.b < 0:
            raise ValueError("need a > 0 and b >= 0")
        if self.b * self.b > self.a / 4.0 * (1 + 1e-12):
            raise ValueError(f"b^2 = {self.b * self.b} exceeds a/4 = {self.a / 4}")

    @classmethod
    def for_langevin(cls, M, gamma):
        return cls(1.0 / M, 1.0 / gamma)


def weighted_norm(x, v, params):
    """``sqrt(|x|^2 + 2 b <x, v> + a |v|^2)``; ``params`` is a WeightedNormParams or an (a, b) pair."""
    if not isinstance(params, WeightedNormParams):
        params = WeightedNormParams(*params)
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    q = x @ x + 2.0 * params.b * (x @ v) + params.a * (v @ v)
    return math.sqrt(max(q, 0.0))


def gelman_rubin(chains):
    """Classic potential scale reduction of scalar chains, array (n_chains, n_samples)."""
    c = np.asarray(chains, dtype=float)
    if c.ndim != 2 or c.shape[0] < 2 or c.shape[1] < 2:
        raise ValueError("need at least two chains of at least two samples")
    n = c.shape[1]
    W = c.var(axis=1, ddof=1).mean()
    if not W > 0:
        raise UndefinedDiagnosticError("within-chain variance is zero")
    B_over_n = c.mean(axis=1).var(ddof=1)
    return math.sqrt(((n - 1) / n * W + B_over_n) / W)


@dataclass
class PowerIterationResult:
    value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)

    def __float__(self):
        return self.value

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iterate,rayleigh\n")
            for k, r in enumerate(self.history):
                fh.write(f"{k},{r:.17g}\n")


def hessian_norm_power_iteration(model, x, max_iters=100, tol=1e-8, rng=None):
    """Dominant absolute eigenvalue of the Hessian at ``x`` from Hessian-vector products."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    rng = np.random.default_rng(rng)
    v = rng.standard_normal(model.dim)
    v /= np.linalg.norm(v)
    history = []
    prev = None
    for k in range(max_iters):
        w = np.asarray(model.hessian_vector_product(x, v), dtype=float)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            history.append(0.0)
            return PowerIterationResult(0.0, k, True, history)
        rq = float(v @ w)
        history.append(rq)
        if prev is not None and abs(rq - prev) < tol * abs(rq):
            return PowerIterationResult(abs(rq), k, True, history)
        prev = rq
        v = w / nw
    return PowerIterationResult(abs(history[-1]), max_iters, False, history)


# -- Lyapunov oracle -------------------------------------------------------------------------


def ou_covariance(t, gamma):
    """Analytic covariance of ``(Zx, Zv)`` for one OU segment of length ``t`` (per coordinate)."""
    eta = math.exp(-gamma * t)
    F = -math.expm1(-gamma * t) / gamma
    one_m_eta2 = -math.expm1(-2.0 * gamma * t)
    vxx = (2.0 / gamma) * (t - 2.0 * F + one_m_eta2 / (2.0 * gamma))
    vxv = (1.0 - eta) ** 2 / gamma
    return np.array([[vxx, vxv], [vxv, one_m_eta2]])


def _blocks(a, b, c, d, n):
    I = np.eye(n)
    return np.block([[a * I if np.isscalar(a) else a, b * I if np.isscalar(b) else b],
                     [c * I if np.isscalar(c) else c, d * I if np.isscalar(d) else d]])


def affine_step_map(A, integrator, h, gamma):
    """One-step ``(T, Q)`` with ``z' = T z + noise``, ``Cov(noise) = Q`` for the force ``A x``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    I = np.eye(d)
    if integrator == "ubu":
        t = 0.5 * h
        eta = math.exp(-gamma * t)
        F = -math.expm1(-gamma * t) / gamma
        U = _blocks(1.0, F, 0.0, eta, d)
        Qu = np.kron(ou_covariance(t, gamma), I)
        B = _blocks(1.0, 0.0, -h * A, 1.0, d)
        UB = U @ B
        return UB @ U, UB @ Qu @ UB.T + Qu
    if integrator == "baoab":
        eta = math.exp(-gamma * h)
        Bh = _blocks(1.0, 0.0, -0.5 * h * A, 1.0, d)
        Ah = _blocks(1.0, 0.5 * h, 0.0, 1.0, d)
        O = _blocks(1.0, 0.0, 0.0, eta, d)
        Qo = _blocks(0.0, 0.0, 0.0, -math.expm1(-2.0 * gamma * h), d)
        BA = Bh @ Ah
        return BA @ O @ Ah @ Bh, BA @ Qo @ BA.T
    if integrator == "euler":
        T = _blocks(1.0, h, -h * A, 1.0 - h * gamma, d)
        Q = _blocks(0.0, 0.0, 0.0, 2.0 * gamma * h, d)
        return T, Q
    raise ValueError(f"unknown integrator {integrator!r}")


@dataclass
class LyapunovOracle:
    integrator: str
    T: np.ndarray
    Q: np.ndarray
    sigma: np.ndarray
    spectral_radius: float
    residual: float

    @property
    def position_cov(self):
        d = self.T.shape[0] // 2
        return self.sigma[:d, :d]

    @property
    def velocity_cov(self):
        d = self.T.shape[0] // 2
        return self.sigma[d:, d:]


def _solve(T, Q):
    S = solve_discrete_lyapunov(T, Q)
    return 0.5 * (S + S.T)


def lyapunov_oracle(A, integrator, h, gamma):
    """Invariant covariance of the affine chain, with the fixed point refined to tight residual."""
    T, Q = affine_step_map(A, integrator, h, gamma)
    rho = float(np.max(np.abs(np.linalg.eigvals(T))))
    if not rho < 1.0:
        raise InstabilityError(rho)
    S = _solve(T, Q)
    # residual correction: the error E = Sigma* - S solves the same equation with source R
    for _ in range(4):
        R = T @ S @ T.T + Q - S
        if np.linalg.norm(R) < 1e-13 * np.linalg.norm(S):
            break
        S = S + _solve(T, R)
    R = T @ S @ T.T + Q - S
    return LyapunovOracle(integrator, T, Q, S, rho, float(np.linalg.norm(R) / np.linalg.norm(S)))


def lyapunov_invariant_covariance(quadratic, integrator, h, gamma):
    """Stationary (2d x 2d) covariance of ``integrator`` with full gradients on a quadratic model."""
    A = quadratic.precision if hasattr(quadratic, "precision") else quadratic
    return lyapunov_oracle(A, integrator, h, gamma).sigma


# -- contraction ---------------------------------------------------------------------------


def contraction_bound(m, h, gamma):
    """``1 - m h / (8 gamma)``."""
    return 1.0 - m * h / (8.0 * gamma)


@dataclass
class ContractionResult:
    measured_rate: float  # max over pairs of the per-step geometric-mean ratio
    max_step_ratio: float  # worst single-step ratio over all pairs and steps
    bound: float
    hypotheses_ok: bool
    ratios: np.ndarray = field(repr=False)  # (n_pairs, n_steps)

    @property
    def holds(self):
        return self.max_step_ratio <= self.bound

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("pair,step,ratio\n")
            for p, row in enumerate(self.ratios):
                for k, r in enumerate(row):
                    fh.write(f"{p},{k + 1},{r:.17g}\n")


def contraction_check(quadratic, h, gamma, n_steps=100, n_pairs=64, rng=None, starts=None):
    """Synchronously coupled full-gradient UBU pairs measured in the (1/M, 1/gamma) norm.

    Under synchronous coupling on a quadratic the noise cancels in the difference,
    so the pair difference follows the deterministic map ``T``. ``starts`` may give
    explicit (n_pairs, 2, 2d) initial pairs; zero initial distance is rejected.
    """
    m, M = quadratic.m, quadratic.M
    ok = gamma >= math.sqrt(8.0 * M) and h < 1.0 / (2.0 * gamma)
    if not ok:
        warnings.warn("contraction hypotheses (gamma >= sqrt(8M), h < 1/(2 gamma)) are violated",
                      stacklevel=2)
    params = WeightedNormParams.for_langevin(M, gamma)
    d = quadratic.dim
    rng = np.random.default_rng(rng)
    if starts is None:
        starts = rng.standard_normal((n_pairs, 2, 2 * d))
    starts = np.asarray(starts, dtype=float)
    ratios = np.empty((starts.shape[0], n_steps))
    for p, (z1, z2) in enumerate(starts):
        s1 = PhaseState(z1[:d].copy(), z1[d:].copy())
        s2 = PhaseState(z2[:d].copy(), z2[d:].copy())
        dist = weighted_norm(s1.x - s2.x, s1.v - s2.v, params)
        if dist == 0.0:
            raise ValueError(f"pair {p} starts at zero distance; the ratio is undefined")
        for k in range(n_steps):
            xi = rng.standard_normal((4, d))
            s1 = ubu_step(s1, h, gamma, quadratic.gradient, None, xi)
            s2 = ubu_step(s2, h, gamma, quadratic.gradient, None, xi)
            nd = weighted_norm(s1.x - s2.x, s1.v - s2.v, params)
            ratios[p, k] = nd / dist
            if nd == 0.0:
                ratios[p, k + 1:] = 0.0
                break
            dist = nd
    with np.errstate(divide="ignore"):
        geo = np.exp(np.mean(np.log(ratios), axis=1))
    return ContractionResult(float(geo.max()), float(ratios.max()), contraction_bound(m, h, gamma), ok, ratios)

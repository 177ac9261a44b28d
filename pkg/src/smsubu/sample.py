"""Chain drivers: SG-UBU, SMS-UBU, SG/SMS-BAOAB, SG-HMC (Euler-Maruyama) and Metropolised SMS-GHMC.

Each driver is a pure function of ``(model, estimator, config, seed)``. The seed
spawns two independent streams, one for Gaussian noise and one for minibatch
draws, so swapping the gradient estimator never perturbs the noise path.
"""
from dataclasses import dataclass, field
import math
from typing import Callable, Optional

import numpy as np

from .errors import DivergedError
from .integrate import PhaseState, baoab_step, euler_step, leapfrog_kick_drift, reflect_inplace, ubu_step
from .sgrad import FullGradient, SweepKick

__all__ = [
    "SamplerConfig",
    "GhmcConfig",
    "Trace",
    "detect_divergence",
    "spawn_streams",
    "Stepper",
    "make_stepper",
    "run_chain",
    "run_sg_ubu",
    "run_sms_ubu",
    "run_sg_baoab",
    "run_sms_baoab",
    "run_sg_hmc",
    "run_sms_ghmc",
    "hamiltonian",
]

DIVERGENCE_THRESHOLD = 1e100


@dataclass
class SamplerConfig:
    h: float
    gamma: float
    n_steps: int
    burn_in: float = 0.2
    seed: Optional[int] = None
    thin: int = 1
    reflect: Optional[tuple] = None  # (center, rho_max)
    record_potential: bool = False
    summary: Optional[Callable] = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("stepsize h must be positive")
        if not self.gamma > 0:
            raise ValueError("friction gamma must be positive")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not 0 <= self.burn_in < 1:
            raise ValueError("burn_in must lie in [0, 1)")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


@dataclass
class GhmcConfig:
    h: float
    n_batches: int
    n_iter: int
    n_sweeps: int = 10
    alpha: float = 0.7
    burn_in: float = 0.2
    seed: Optional[int] = None
    record_potential: bool = False
    summary: Optional[Callable] = None

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("stepsize h must be positive")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.n_iter < 1 or self.n_sweeps < 1:
            raise ValueError("n_iter and n_sweeps must be >= 1")


@dataclass
class Trace:
    """Recorded samples after burn-in (rows), with bookkeeping."""

    samples: np.ndarray
    steps: np.ndarray
    potentials: Optional[np.ndarray] = None
    velocities_final: Optional[np.ndarray] = None
    n_grad_evals: int = 0
    acceptance_count: Optional[int] = None
    n_proposals: Optional[int] = None
    seed: Optional[int] = None
    kind: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self):
        if not self.n_proposals:
            return None
        return self.acceptance_count / self.n_proposals

    @property
    def final(self):
        return self.samples[-1]

    def to_csv(self, path, column_prefix="x"):
        """One row per sample: step, optional potential, then coordinates or summaries."""
        cols = ["step"]
        blocks = [self.steps[:, None].astype(float)]
        if self.potentials is not None:
            cols.append("potential")
            blocks.append(self.potentials[:, None])
        S = self.samples.reshape(len(self.samples), -1)
        cols += [f"{column_prefix}{j}" for j in range(S.shape[1])]
        blocks.append(S)
        data = np.hstack(blocks)
        with open(path, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for row in data:
                fh.write(",".join([str(int(row[0]))] + [format(val, ".17g") for val in row[1:]]) + "\n")


def detect_divergence(x, v):
    """True if any coordinate is NaN or exceeds the divergence threshold in magnitude."""
    # builtin max would drop a NaN in its second argument
    m = np.max(np.abs(np.concatenate([np.ravel(x), np.ravel(v)])))
    return not m <= DIVERGENCE_THRESHOLD


def spawn_streams(rng, seed=None):
    """(noise, batch) generators derived deterministically from a seed or generator."""
    if rng is None:
        rng = seed
    base = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise, batch = base.spawn(2)
    return noise, batch


def _seed_echo(rng, seed):
    return rng if isinstance(rng, (int, np.integer)) else seed


class Stepper:
    """Integrator state machine taking explicit noise and batches.

    ``kind`` is ``"ubu"``, ``"baoab"`` or ``"euler"``. BAOAB keeps the gradient at
    the current point, so it needs :meth:`prime` before the first step.
    """

    def __init__(self, kind, h, gamma, estimator, x, v):
        if kind not in ("ubu", "baoab", "euler"):
            raise ValueError(f"unknown integrator {kind!r}")
        self.kind = kind
        self.h = float(h)
        self.gamma = float(gamma)
        self.estimator = estimator
        self.state = PhaseState(np.array(x, dtype=float), np.array(v, dtype=float))
        self.cached_grad = None
        d = self.state.x.size
        self.noise_shape = {"ubu": (4, d), "baoab": (d,), "euler": (d,)}[kind]

    def prime(self, batch):
        self.cached_grad = self.estimator.evaluate(self.state.x, batch)

    def step(self, noise, batch):
        est = self.estimator

        def grad_at(x):
            return est.evaluate(x, batch)

        if self.kind == "ubu":
            self.state = ubu_step(self.state, self.h, self.gamma, grad_at, None, noise)
        elif self.kind == "baoab":
            self.state, self.cached_grad = baoab_step(
                self.state, self.h, self.gamma, self.cached_grad, grad_at, None, noise)
        else:
            self.state = euler_step(self.state, self.h, self.gamma, grad_at, None, noise)
        return self.state


def make_stepper(kind, h, gamma, estimator, x, v):
    return Stepper(kind, h, gamma, estimator, x, v)


def _initial_state(model, x0, v0, noise_rng):
    x = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float)
    v = noise_rng.standard_normal(model.dim) if v0 is None else np.array(v0, dtype=float)
    if x.shape != (model.dim,) or v.shape != (model.dim,):
        raise ValueError("initial x and v must have the model dimension")
    return x, v


def _finish(cfg, rec, steps, pots, kind, n_evals, seed, v_final):
    n = len(rec)
    burn = int(math.floor(cfg.burn_in * n))
    if n - burn < 1:
        raise ValueError("no samples left after burn-in")
    return Trace(
        samples=np.asarray(rec[burn:]),
        steps=np.asarray(steps[burn:], dtype=np.int64),
        potentials=None if pots is None else np.asarray(pots[burn:]),
        velocities_final=v_final,
        n_grad_evals=n_evals,
        seed=seed,
        kind=kind,
    )


def run_chain(kind, model, estimator, cfg, rng=None, x0=None, v0=None, noise_rng=None):
    """Generic driver used by the named ``run_*`` functions.

    ``noise_rng`` overrides the noise stream (e.g. :data:`~smsubu.integrate.NO_NOISE`).
    """
    seed_noise, batch_rng = spawn_streams(rng, cfg.seed)
    noise_rng = seed_noise if noise_rng is None else noise_rng
    x, v = _initial_state(model, x0, v0, seed_noise)
    estimator.reset()
    start_evals = estimator.n_evals
    st = Stepper(kind, cfg.h, cfg.gamma, estimator, x, v)
    if kind == "baoab":
        st.prime(estimator.draw_initial(batch_rng))
    reflect = cfg.reflect
    if reflect is not None:
        center = np.broadcast_to(np.asarray(reflect[0], dtype=float), (model.dim,))
        rho_max = float(reflect[1])
    summary = cfg.summary
    rec, steps = [], []
    pots = [] if cfg.record_potential else None
    for n in range(1, cfg.n_steps + 1):
        noise = noise_rng.standard_normal(st.noise_shape)
        batch = estimator.draw(batch_rng)
        s = st.step(noise, batch)
        if detect_divergence(s.x, s.v):
            raise DivergedError(n)
        if reflect is not None:
            reflect_inplace(s.x, s.v, center, rho_max)
            if not np.max(np.abs(s.x - center)) <= rho_max:
                raise RuntimeError(f"state left the box at step {n}")
        if (n - 1) % cfg.thin == 0:
            rec.append(s.x.copy() if summary is None else np.asarray(summary(s.x), dtype=float))
            steps.append(n)
            if pots is not None:
                pots.append(model.potential(s.x))
    tr = _finish(cfg, rec, steps, pots, kind, estimator.n_evals - start_evals,
                 _seed_echo(rng, cfg.seed), st.state.v.copy())
    tr.extra["final_x"] = st.state.x.copy()
    return tr


def _require(estimator, allowed, name):
    if estimator.kind not in allowed:
        raise ValueError(f"{name} does not accept a {estimator.kind!r} estimator")


def run_sg_ubu(model, estimator, cfg, rng=None, x0=None, v0=None, noise_rng=None):
    """UBU with one (possibly stochastic) gradient per step, batch redrawn every step."""
    _require(estimator, ("full", "iid", "vr"), "run_sg_ubu")
    return run_chain("ubu", model, estimator, cfg, rng, x0, v0, noise_rng)


def run_sms_ubu(model, cfg, n_batches, rng=None, anchor=None, x0=None, v0=None, noise_rng=None):
    """UBU with symmetric minibatch sweeps; one fresh partition per 2 * n_batches steps."""
    est = SweepKick(model, n_batches, anchor=anchor)
    tr = run_chain("ubu", model, est, cfg, rng, x0, v0, noise_rng)
    tr.extra["batch_log"] = list(est.batch_log)
    return tr


def run_sg_baoab(model, estimator, cfg, rng=None, x0=None, v0=None, noise_rng=None):
    _require(estimator, ("full", "iid", "vr"), "run_sg_baoab")
    return run_chain("baoab", model, estimator, cfg, rng, x0, v0, noise_rng)


def run_sms_baoab(model, cfg, n_batches, rng=None, anchor=None, x0=None, v0=None, noise_rng=None):
    """BAOAB with symmetric sweeps; the last gradient of a period opens the next one."""
    est = SweepKick(model, n_batches, anchor=anchor, order="cached")
    tr = run_chain("baoab", model, est, cfg, rng, x0, v0, noise_rng)
    tr.extra["batch_log"] = list(est.batch_log)
    return tr


def run_sg_hmc(model, estimator, cfg, rng=None, x0=None, v0=None, noise_rng=None):
    """Euler-Maruyama discretization of kinetic Langevin with stochastic gradients."""
    _require(estimator, ("full", "iid", "vr"), "run_sg_hmc")
    return run_chain("euler", model, estimator, cfg, rng, x0, v0, noise_rng)


def hamiltonian(model, x, v):
    return model.potential(x) + 0.5 * float(v @ v)


def run_sms_ghmc(model, cfg, rng=None, anchor=None, x0=None, v0=None):
    """Generalized HMC whose proposals are ``n_sweeps`` symmetric forward/backward leapfrog sweeps.

    The accept/reject test uses the exact potential. On rejection the velocity is
    negated; a partial refresh ``v <- alpha v + sqrt(1 - alpha^2) Z`` follows every
    iteration. Non-finite proposals are rejected and counted in
    ``trace.extra["nonfinite_proposals"]``.
    """
    noise_rng, batch_rng = spawn_streams(rng, cfg.seed)
    x, v = _initial_state(model, x0, v0, noise_rng)
    est = SweepKick(model, cfg.n_batches, anchor=anchor)
    n_evals0 = est.n_evals
    h, a = float(cfg.h), float(cfg.alpha)
    refresh = math.sqrt(1.0 - a * a)
    period = 2 * cfg.n_batches
    accepted = 0
    nonfinite = 0
    rec, steps = [], []
    pots = [] if cfg.record_potential else None
    for k in range(1, cfg.n_iter + 1):
        schedule = est.new_schedule(batch_rng)
        s = PhaseState(x, v)
        for _ in range(cfg.n_sweeps):
            for p in range(period):
                batch = schedule.batch_at(p)
                s = leapfrog_kick_drift(s, h, lambda y: est.evaluate(y, batch))
        H_new = hamiltonian(model, s.x, s.v) if not detect_divergence(s.x, s.v) else math.inf
        H_prev = hamiltonian(model, x, v)
        log_u = math.log(noise_rng.uniform())
        if math.isfinite(H_new) and log_u < H_prev - H_new:
            x, v = s.x, s.v
            accepted += 1
        else:
            nonfinite += not math.isfinite(H_new)
            v = -v
        v = a * v + refresh * noise_rng.standard_normal(model.dim)
        rec.append(x.copy() if cfg.summary is None else np.asarray(cfg.summary(x), dtype=float))
        steps.append(k)
        if pots is not None:
            pots.append(model.potential(x))
    tr = _finish(cfg, rec, steps, pots, "ghmc", est.n_evals - n_evals0, _seed_echo(rng, cfg.seed), v.copy())
    tr.acceptance_count = accepted
    tr.n_proposals = cfg.n_iter
    tr.extra["nonfinite_proposals"] = nonfinite
    tr.extra["final_x"] = x.copy()
    return tr

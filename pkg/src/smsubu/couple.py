"""Synchronously coupled (h, h/2) chains and multilevel bias estimation.

The fine chain (stepsize h/2) takes two steps per coarse step and owns all the
randomness; the coarse chain reuses it:

* Gaussian noise: the coarse draw for a time interval is assembled from the
  fine draws covering the same interval (see :class:`CoupledNoise`);
* minibatches: SMS partitions are borrowed from the fine chain at coarse period
  boundaries, IID draws are reused at matching physical times.
"""
from dataclasses import dataclass, field
import math

import numpy as np

from .errors import DivergedError, UnusableDataError
from . import kernels
from .kernels import _softmax_rows
from .integrate import ou_coeffs
from .sample import Stepper, detect_divergence, spawn_streams
from .sgrad import IIDMinibatch, SweepKick, make_estimator

__all__ = [
    "CoupledNoise",
    "TrueClassProbability",
    "LogPredictive",
    "LevelEstimate",
    "BiasCurve",
    "run_coupled_level",
    "telescope",
    "fit_slope",
    "chunked_std",
    "level_epochs",
    "write_levels_csv",
    "write_curve_csv",
]

SQRT_HALF = math.sqrt(0.5)


def chunked_std(series, n_chunks=4):
    """Standard error of the overall mean estimated from ``n_chunks`` equal chunks.

    Leftover samples that do not fill a chunk are dropped. Works column-wise on 2-d input.
    """
    a = np.asarray(series, dtype=float)
    if n_chunks < 2:
        raise ValueError("need at least two chunks")
    if a.shape[0] < n_chunks:
        raise ValueError(f"series of length {a.shape[0]} is shorter than {n_chunks} chunks")
    size = a.shape[0] // n_chunks
    means = a[: size * n_chunks].reshape((n_chunks, size) + a.shape[1:]).mean(axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(n_chunks)


class CoupledNoise:
    """Builds coarse-step noise from the two fine steps covering the same time.

    ``mode="slot"`` averages matching slots, ``(xi_a + xi_b) / sqrt 2``.
    ``mode="brownian"`` (UBU only) recomposes both OU integrals of the coarse
    U-step from those of the two fine U-steps, so the coarse chain sees exactly
    the same Brownian path. Both preserve standard-normal marginals.
    """

    def __init__(self, kind, h, gamma, mode="slot"):
        if mode not in ("slot", "brownian"):
            raise ValueError(f"unknown noise coupling {mode!r}")
        if mode == "brownian" and kind != "ubu":
            mode = "slot"  # BAOAB/Euler have a single Gaussian per slot; both modes coincide
        self.kind = kind
        self.mode = mode
        if kind == "ubu" and mode == "brownian":
            self.fine = ou_coeffs(0.25 * h, float(gamma))
            self.coarse = ou_coeffs(0.5 * h, float(gamma))

    def _u_pair(self, a1, a2, b1, b2):
        """Coarse (xi1, xi2) of one U over [0, 2tau] from the fine ones on both halves."""
        if self.mode == "slot":
            return SQRT_HALF * (a1 + b1), SQRT_HALF * (a2 + b2)
        f, c = self.fine, self.coarse
        xi1 = SQRT_HALF * (a1 + b1)
        z2 = f.eta * f.z2_scale * (f.c * a1 + f.s * a2) + f.z2_scale * (f.c * b1 + f.s * b2)
        xi2 = (z2 / c.z2_scale - c.c * xi1) / c.s
        return xi1, xi2

    def combine(self, first, second):
        """Coarse noise for one step from the fine noises of its two half steps.

        Inputs have shape (..., 4, d) for UBU and (..., d) or (..., 1, d) otherwise.
        """
        first = np.asarray(first, dtype=float)
        second = np.asarray(second, dtype=float)
        if self.kind != "ubu":
            return SQRT_HALF * (first + second)
        # fine U-substeps in time order: first[0:2], first[2:4], second[0:2], second[2:4]
        out = np.empty_like(first)
        f, s = first, second
        out[..., 0, :], out[..., 1, :] = self._u_pair(f[..., 0, :], f[..., 1, :], f[..., 2, :], f[..., 3, :])
        out[..., 2, :], out[..., 3, :] = self._u_pair(s[..., 0, :], s[..., 1, :], s[..., 2, :], s[..., 3, :])
        return out


@dataclass
class LevelEstimate:
    h_coarse: float
    delta: float  # mean over test functions of pi_h(g) - pi_{h/2}(g)
    chunk_std: float
    delta_per_fn: np.ndarray = field(repr=False)
    std_per_fn: np.ndarray = field(repr=False)
    epochs: float = 0.0
    n_steps: int = 0
    n_chunks: int = 4
    max_distance: float = 0.0

    @property
    def h_fine(self):
        return 0.5 * self.h_coarse

    @property
    def delta_rms(self):
        """Root mean square of the per-function deltas with the chunk noise subtracted.

        Signed per-function biases can cancel in the mean at some stepsizes,
        so this is the statistic that carries a clean power law.
        """
        d = np.asarray(self.delta_per_fn, dtype=float)
        s = np.asarray(self.std_per_fn, dtype=float)
        return float(np.sqrt(max(np.mean(d ** 2 - s ** 2), 0.0)))


@dataclass
class BiasCurve:
    stepsizes: np.ndarray
    bias: np.ndarray
    std: np.ndarray
    levels: list = field(default_factory=list, repr=False)


def level_epochs(level, base=400, scale=1.0):
    """Run length for level ``level`` (0-based): ``base * 2**level`` epochs times ``scale``."""
    return base * 2 ** level * scale


def _coupled_estimators(model, estimator_kind, batch_size, n_batches, anchor, order):
    fine = make_estimator(estimator_kind, model, batch_size, n_batches, anchor)
    if isinstance(fine, SweepKick):
        fine = SweepKick(model, fine.n_batches, anchor=fine.anchor, order=order)
        coarse = SweepKick(model, fine.n_batches, anchor=fine.anchor, order=order,
                           schedule_source=lambda rng: fine.schedule)
    else:
        coarse = make_estimator(estimator_kind, model, batch_size, n_batches, anchor)
    return fine, coarse


class TrueClassProbability:
    """Test functions ``x -> p(y_j | u_j, x)`` for held-out pairs ``(u_j, y_j)``.

    Accepts a single parameter vector or a stack of them (rows).
    """

    vectorized = True

    def __init__(self, model, inputs, labels):
        self.model = model
        self.inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        self.labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")
        self._rows = np.arange(self.labels.shape[0])

    def __len__(self):
        return self.labels.shape[0]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self.model.predict_probs(x, self.inputs)[self._rows, self.labels]
        from .model import LogRegModel

        if isinstance(getattr(self.model, "inner", self.model), LogRegModel):
            return self._batch(x)
        return np.stack([self(row) for row in x])

    def _batch(self, xs):
        C, q = self.model.shape
        W = xs.reshape(-1, C, q)
        Z = np.einsum("nj,kcj->knc", self.inputs, W[:, :, :-1]) + W[:, None, :, -1]
        Z -= Z.max(axis=2, keepdims=True)
        P = np.exp(Z)
        P /= P.sum(axis=2, keepdims=True)
        return P[:, self._rows, self.labels]


class LogPredictive(TrueClassProbability):
    """``x -> log p(y_j | u_j, x)``; concave in ``x`` for softmax regression."""

    def __call__(self, x):
        return np.log(super().__call__(x))


def _eval_fns(test_fns, xs):
    if getattr(test_fns, "vectorized", False):
        return np.asarray(test_fns(xs), dtype=float).reshape(xs.shape[0], -1)
    return np.stack([np.atleast_1d(np.asarray(test_fns(x), dtype=float)) for x in xs])


def _uses_kernel(model, est):
    from .model import LogRegModel

    return type(model) is LogRegModel and est.kind in ("full", "iid", "vr", "sms")


_KIND_CODE = {"ubu": kernels.KIND_UBU, "baoab": kernels.KIND_BAOAB, "euler": kernels.KIND_EULER}


def run_coupled_level(model, sampler_kind, estimator_kind, h, gamma, epochs, test_fns, rng=None,
                      x0=None, v0=None, batch_size=None, n_batches=None, anchor=None,
                      burn_in=0.2, n_chunks=4, noise_coupling="brownian", h_fine=None,
                      chunk_size=2048, use_kernel=None):
    """Run a coupled (h, h/2) pair and estimate ``pi_h(g) - pi_{h/2}(g)``.

    ``test_fns`` maps a position to a vector of test-function values (set a
    ``vectorized`` attribute to receive stacks of positions). One epoch is
    ``n_batches`` coarse steps. ``h_fine=h`` gives the degenerate identical-chain
    coupling. Logistic-regression models run through a compiled kernel unless
    ``use_kernel=False``; both paths consume the same random draws.
    """
    if sampler_kind not in _KIND_CODE:
        raise ValueError(f"unknown integrator {sampler_kind!r}")
    h = float(h)
    gamma = float(gamma)
    hf = 0.5 * h if h_fine is None else float(h_fine)
    degenerate = hf == h
    if not degenerate and not math.isclose(hf, 0.5 * h):
        raise ValueError("fine stepsize must be h/2 (or h for the degenerate check)")
    noise_rng, batch_rng = spawn_streams(rng)
    x0 = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float)
    v0 = noise_rng.standard_normal(model.dim) if v0 is None else np.array(v0, dtype=float)
    order = "cached" if sampler_kind == "baoab" else "palindrome"
    fine_est, coarse_est = _coupled_estimators(model, estimator_kind, batch_size, n_batches, anchor, order)
    nb = getattr(fine_est, "n_batches", None) or model.n_terms // getattr(fine_est, "batch_size", model.n_terms)
    n_steps = int(round(epochs * nb))
    burn = int(math.floor(burn_in * n_steps))
    if n_steps - burn < n_chunks:
        raise ValueError("run too short for the requested number of chunks")
    fine = Stepper(sampler_kind, hf, gamma, fine_est, x0, v0)
    coarse = Stepper(sampler_kind, h, gamma, coarse_est, x0, v0)
    noise = CoupledNoise(sampler_kind, h, gamma, noise_coupling)
    iid = isinstance(fine_est, IIDMinibatch)
    if sampler_kind == "baoab":
        b0 = fine_est.draw_initial(batch_rng)
        fine.prime(b0)
        coarse.prime(b0 if iid else coarse_est.draw_initial(batch_rng))
    if use_kernel is None:
        use_kernel = _uses_kernel(model, fine_est)
    elif use_kernel and not _uses_kernel(model, fine_est):
        raise ValueError("the compiled coupled kernel supports logistic regression only")
    S = 4 if sampler_kind == "ubu" else 1
    d = model.dim
    n_fine = 1 if degenerate else 2
    if use_kernel:
        kstate = np.zeros((6, d))
        kstate[0], kstate[1], kstate[2], kstate[3] = fine.state.x, fine.state.v, coarse.state.x, coarse.state.v
        if sampler_kind == "baoab":
            kstate[4], kstate[5] = fine.cached_grad, coarse.cached_grad
        kargs = _kernel_args(model, fine_est, sampler_kind, hf, h, gamma)
    n_fns = _eval_fns(test_fns, x0[None, :]).shape[1]
    diffs = np.empty((n_steps - burn, n_fns))
    max_dist = 0.0
    done = 0
    while done < n_steps:
        n = min(chunk_size, n_steps - done)
        xi_f = noise_rng.standard_normal((n, n_fine, S, d))
        xi_c = xi_f[:, 0] if degenerate else noise.combine(xi_f[:, 0], xi_f[:, 1])
        b_f, b_c = [], []
        for _ in range(n):
            ba = fine_est.draw(batch_rng)
            if degenerate:
                b_f.append((ba,))
                b_c.append(ba if iid else coarse_est.draw(batch_rng))
                continue
            bb = fine_est.draw(batch_rng)
            b_f.append((ba, bb))
            if iid:
                # BAOAB evaluates at the end of the step, UBU/Euler near its start
                b_c.append(bb if sampler_kind == "baoab" else ba)
            else:
                b_c.append(coarse_est.draw(batch_rng))
        xs_f = np.empty((n, d))
        xs_c = np.empty((n, d))
        if use_kernel:
            full = fine_est.kind == "full"
            idx_f = np.zeros((n, n_fine, 0), dtype=np.int64) if full else np.asarray(b_f, dtype=np.int64)
            idx_c = np.zeros((n, 0), dtype=np.int64) if full else np.asarray(b_c, dtype=np.int64)
            bad = kernels.coupled_logreg_chunk(*kargs, np.ascontiguousarray(xi_f), np.ascontiguousarray(xi_c),
                                              idx_f, idx_c, degenerate, kstate, xs_f, xs_c)
            if bad:
                raise DivergedError(done + bad, "coupled chain diverged")
        else:
            for k in range(n):
                for j in range(n_fine):
                    fine.step(xi_f[k, j] if S == 4 else xi_f[k, j, 0], b_f[k][j])
                coarse.step(xi_c[k] if S == 4 else xi_c[k, 0], b_c[k])
                sf, sc = fine.state, coarse.state
                if detect_divergence(sf.x, sf.v) or detect_divergence(sc.x, sc.v):
                    raise DivergedError(done + k + 1, "coupled chain diverged")
                xs_f[k], xs_c[k] = sf.x, sc.x
        dist = np.sqrt(np.sum((xs_c - xs_f) ** 2, axis=1))
        max_dist = max(max_dist, float(dist.max()))
        lo = max(burn - done, 0)
        if lo < n:
            diffs[done + lo - burn: done + n - burn] = _eval_fns(test_fns, xs_c[lo:]) - _eval_fns(test_fns, xs_f[lo:])
        done += n
    per_fn = diffs.mean(axis=0)
    std_fn = chunked_std(diffs, n_chunks)
    agg = diffs.mean(axis=1)
    return LevelEstimate(
        h_coarse=h,
        delta=float(agg.mean()),
        chunk_std=float(chunked_std(agg, n_chunks)),
        delta_per_fn=per_fn,
        std_per_fn=std_fn,
        epochs=float(epochs),
        n_steps=n_steps,
        n_chunks=n_chunks,
        max_distance=max_dist,
    )


def _kernel_args(model, est, sampler_kind, hf, hc, gamma):
    C, q = model.shape
    vr = getattr(est, "anchor", None) is not None
    # softmax at the anchor, per datum; fixed for the whole run
    anchor = _softmax_rows(model.Xa @ est.anchor.reshape(C, q).T) if vr else np.zeros((1, C))
    anchor_sum = est.anchor_sum if vr else np.zeros(model.dim)
    if est.kind == "full":
        scale = 1.0
    elif est.kind == "sms":
        scale = float(est.n_batches)
    else:
        scale = float(est.scale)

    def coef(hh):
        if sampler_kind == "ubu":
            return ou_coeffs(0.5 * hh, gamma).as_array()
        return np.array([0.0, math.exp(-gamma * hh), 0.0, 0.0, 0.0, 0.0])

    return (_KIND_CODE[sampler_kind], C, q, model.Xa, model.labels, 1.0 / model.prior_variance,
            est.kind == "full", scale, vr, np.ascontiguousarray(anchor, dtype=float),
            np.ascontiguousarray(anchor_sum, dtype=float), float(hf), float(hc), coef(hf), coef(hc), gamma)


def telescope(levels):
    """Cumulative bias ``bias(h_l) = sum_{j >= l} delta_j`` with root-sum-square errors."""
    if not levels:
        raise ValueError("need at least one level")
    hs = np.array([lv.h_coarse for lv in levels], dtype=float)
    for a, b in zip(hs[:-1], hs[1:]):
        if not math.isclose(b, 0.5 * a, rel_tol=1e-9):
            raise ValueError(f"stepsize ladder must halve at each level; got {a} then {b}")
    d = np.array([lv.delta for lv in levels], dtype=float)
    s = np.array([lv.chunk_std for lv in levels], dtype=float)
    bias = np.cumsum(d[::-1])[::-1]
    std = np.sqrt(np.cumsum((s ** 2)[::-1])[::-1])
    return BiasCurve(hs, bias, std, list(levels))


def fit_slope(stepsizes, biases):
    """Least-squares slope of ``log|bias|`` against ``log h``."""
    h = np.asarray(stepsizes, dtype=float)
    b = np.asarray(biases, dtype=float)
    if h.shape != b.shape or h.size < 3:
        raise ValueError("need at least three (h, bias) pairs of equal length")
    bad = [(float(hh), float(bb)) for hh, bb in zip(h, b) if not (np.isfinite(bb) and bb != 0)]
    if bad:
        raise UnusableDataError("zero or non-finite bias values", bad)
    if not (np.all(b > 0) or np.all(b < 0)):
        minority = b > 0 if np.sum(b > 0) <= np.sum(b < 0) else b < 0
        raise UnusableDataError("bias changes sign", list(zip(h[minority].tolist(), b[minority].tolist())))
    slope, _ = np.polyfit(np.log(h), np.log(np.abs(b)), 1)
    return float(slope)


def write_levels_csv(path, levels):
    with open(path, "w") as fh:
        fh.write("h,delta,std,delta_rms,fn_q10,fn_q50,fn_q90,epochs\n")
        for lv in levels:
            q = np.quantile(lv.delta_per_fn, [0.1, 0.5, 0.9])
            fh.write(f"{lv.h_coarse:.17g},{lv.delta:.17g},{lv.chunk_std:.17g},{lv.delta_rms:.17g},"
                     f"{q[0]:.17g},{q[1]:.17g},{q[2]:.17g},{lv.epochs:.17g}\n")


def write_curve_csv(path, curve, label=""):
    with open(path, "w") as fh:
        fh.write("series,h,log2_h,bias,std\n")
        for h, b, s in zip(curve.stepsizes, curve.bias, curve.std):
            fh.write(f"{label},{h:.17g},{math.log2(h):.17g},{b:.17g},{s:.17g}\n")

"""ADAM with power-one learning-rate decay and stochastic weight averaging."""
from dataclasses import dataclass
import math

import numpy as np

from ..errors import DivergedError

__all__ = ["RunningAverage", "AdamState", "adam_optimize", "swa", "minibatch_gradient"]


class RunningAverage:
    """Incremental mean of parameter vectors."""

    def __init__(self):
        self.count = 0
        self.mean = None

    def update(self, w):
        w = np.asarray(w, dtype=float)
        self.count += 1
        if self.mean is None:
            self.mean = w.copy()
        else:
            self.mean += (w - self.mean) / self.count
        return self.mean


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(d), 0)


def minibatch_gradient(model, x, idx):
    """Unbiased potential gradient from the indices ``idx`` (without replacement)."""
    return model.prior_grad(x) + (model.n_terms / len(idx)) * model.term_gradient_sum(x, idx)


def _adam_update(x, g, state, lr, beta1, beta2, eps):
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    return x - lr * mhat / (np.sqrt(vhat) + eps)


def _epochs(model, batch_size, rng):
    n = model.n_terms
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in 1..{n}")
    per_epoch = n // batch_size  # the remainder of each shuffled epoch is dropped
    while True:
        perm = rng.permutation(n)
        for j in range(per_epoch):
            yield perm[j * batch_size:(j + 1) * batch_size]


def adam_optimize(model, epochs, lr=1e-2, batch_size=200, rng=None, x0=None, decay_steps=None,
                  beta1=0.9, beta2=0.999, eps=1e-8, tol=None, max_full_iters=200000, state=None,
                  return_state=False):
    """Minibatch ADAM with ``lr(t) = lr / (1 + t / T)``; ``T`` defaults to the total step count.

    With ``tol`` set, full-batch ADAM continues (same decay law, restarted clock)
    until ``|grad f| < tol``; failing to get there raises ``RuntimeError``.
    """
    rng = np.random.default_rng(rng)
    x = np.zeros(model.dim) if x0 is None else np.array(x0, dtype=float)
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    state = AdamState.zeros(model.dim) if state is None else state
    n_steps = epochs * (model.n_terms // batch_size)
    T = float(decay_steps) if decay_steps else max(n_steps, 1)
    batches = _epochs(model, batch_size, rng)
    for k in range(n_steps):
        g = minibatch_gradient(model, x, next(batches))
        x = _adam_update(x, g, state, lr / (1.0 + k / T), beta1, beta2, eps)
        if not np.all(np.isfinite(x)):
            raise DivergedError(k + 1, f"ADAM diverged at step {k + 1}")
    if tol is not None:
        x = _full_batch_polish(model, x, lr, tol, max_full_iters, beta1, beta2, eps)
    return (x, state) if return_state else x


def _full_batch_polish(model, x, lr, tol, max_iters, beta1, beta2, eps):
    # restarts with a halved rate whenever the gradient norm stops improving
    best_x, best = x, np.linalg.norm(model.gradient(x))
    rate = lr
    it = 0
    while best >= tol and it < max_iters:
        st = AdamState.zeros(model.dim)
        x = best_x
        stall = 0
        for k in range(2000):
            g = model.gradient(x)
            gn = float(np.linalg.norm(g))
            it += 1
            if gn < best:
                best, best_x, stall = gn, x, 0
                if gn < tol:
                    break
            else:
                stall += 1
                if stall > 200:
                    break
            x = _adam_update(x, g, st, rate / (1.0 + k / 500.0), beta1, beta2, eps)
        rate *= 0.5
        if rate < 1e-14:
            break
    if best >= tol:
        raise RuntimeError(f"full-batch ADAM stopped at |grad| = {best:.3g} >= tol {tol:.3g}")
    return best_x


def swa(model, start, epochs, lr=1e-3, batch_size=200, rng=None, beta1=0.9, beta2=0.999, eps=1e-8,
        state=None):
    """Constant-rate ADAM from ``start``; returns the mean of the iterates over every SWA step."""
    if epochs < 1:
        raise ValueError("SWA needs at least one epoch")
    rng = np.random.default_rng(rng)
    x = np.array(start, dtype=float)
    state = AdamState.zeros(model.dim) if state is None else state
    avg = RunningAverage()
    batches = _epochs(model, batch_size, rng)
    n_steps = epochs * (model.n_terms // batch_size)
    for k in range(n_steps):
        if lr == 0:
            avg.update(x)
            continue
        g = minibatch_gradient(model, x, next(batches))
        x = _adam_update(x, g, state, lr, beta1, beta2, eps)
        if not np.all(np.isfinite(x)):
            raise DivergedError(k + 1, f"SWA diverged at step {k + 1}")
        avg.update(x)
    return avg.mean

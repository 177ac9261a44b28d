"""Gradient estimators: full, i.i.d. minibatch, anchored variance reduction, and symmetric sweeps.

Every estimator exposes two layers:

* ``evaluate(x, indices)`` -- a pure function of the point and an explicit batch;
* ``__call__(x, rng)`` -- draws the next batch from ``rng`` and evaluates it.

Coupled-chain code drives the first layer directly so that two chains can share
batches; the drivers use the second. ``n_evals`` counts minibatch evaluations.
"""
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SweepSchedule",
    "sample_iid_minibatch",
    "sample_partition",
    "palindrome",
    "cached_kick_order",
    "anchor_precompute",
    "FullGradient",
    "IIDMinibatch",
    "VarianceReduced",
    "SweepKick",
    "make_estimator",
]


def sample_iid_minibatch(rng, n_data, batch_size):
    """``batch_size`` indices drawn uniformly with replacement from ``0 .. n_data - 1``."""
    if n_data < 1 or batch_size < 1:
        raise ValueError("n_data and batch_size must be >= 1")
    return rng.integers(0, n_data, size=batch_size)


def palindrome(n_batches):
    """Visit order ``0, 1, .., n-1, n-1, .., 1, 0`` of one symmetric period."""
    fwd = np.arange(n_batches)
    return np.concatenate([fwd, fwd[::-1]])


def cached_kick_order(n_batches):
    """Blocks for the end-of-step gradients of a cached-kick (BAOAB) sweep.

    Forward step ``k`` evaluates block ``k + 1`` (wrapping to block 0 at the
    last forward step), the backward sweep evaluates ``n-1, .., 0``. Together
    with the initial block-0 gradient each block carries total kick weight two.
    """
    fwd = np.concatenate([np.arange(1, n_batches), [0]])
    return np.concatenate([fwd, np.arange(n_batches)[::-1]])


@dataclass(frozen=True)
class SweepSchedule:
    """A random partition into equal blocks plus its palindromic visit order."""

    blocks: tuple
    visit_order: np.ndarray

    @property
    def n_batches(self):
        return len(self.blocks)

    def batch_at(self, position):
        """Indices used at ``position`` (0-based) within the period."""
        return self.blocks[self.visit_order[position]]


def sample_partition(rng, n_data, batch_size, visit_order=None):
    if batch_size < 1 or n_data < 1:
        raise ValueError("n_data and batch_size must be >= 1")
    if n_data % batch_size:
        raise ValueError(f"batch size {batch_size} does not divide the dataset size {n_data}")
    perm = rng.permutation(n_data)
    n_batches = n_data // batch_size
    blocks = tuple(np.sort(perm[j * batch_size:(j + 1) * batch_size]) for j in range(n_batches))
    order = palindrome(n_batches) if visit_order is None else visit_order
    return SweepSchedule(blocks, order)


def anchor_precompute(model, anchor):
    """``sum_i grad f_i(anchor)`` over the whole dataset (one full pass)."""
    return model.term_gradient_sum(anchor, model.all_terms)


class _Estimator:
    def __init__(self, model):
        self.model = model
        self.n_evals = 0

    def draw(self, rng):
        return None

    def draw_initial(self, rng):
        return self.draw(rng)

    def evaluate(self, x, indices):
        raise NotImplementedError

    def __call__(self, x, rng):
        return self.evaluate(x, self.draw(rng))

    def reset(self):
        """Forget cursor state; counters are kept."""


class FullGradient(_Estimator):
    kind = "full"

    def evaluate(self, x, indices=None):
        self.n_evals += 1
        return self.model.gradient(x)


class IIDMinibatch(_Estimator):
    """``grad f0(x) + (N_D / N_b) sum_{i in batch} grad f_i(x)`` with replacement."""

    kind = "iid"

    def __init__(self, model, batch_size):
        super().__init__(model)
        if not 1 <= batch_size <= model.n_terms:
            raise ValueError("batch_size must lie in 1..n_terms")
        self.batch_size = int(batch_size)
        self.scale = model.n_terms / self.batch_size

    def draw(self, rng):
        return sample_iid_minibatch(rng, self.model.n_terms, self.batch_size)

    def _batch_sum(self, x, indices):
        # term sums count repeated indices with multiplicity
        return self.model.term_gradient_sum(x, indices)

    def evaluate(self, x, indices):
        self.n_evals += 1
        return self.model.prior_grad(x) + self.scale * self._batch_sum(x, indices)


class VarianceReduced(IIDMinibatch):
    """Anchored control variate: exact at the anchor, noise shrinking near it."""

    kind = "vr"

    def __init__(self, model, batch_size, anchor):
        super().__init__(model, batch_size)
        if anchor is None:
            raise RuntimeError("variance reduction needs an anchor point")
        self.anchor = np.asarray(anchor, dtype=float).copy()
        self.anchor_sum = anchor_precompute(model, self.anchor)

    def evaluate(self, x, indices):
        self.n_evals += 1
        diff = self._batch_sum(x, indices) - self._batch_sum(self.anchor, indices)
        return (self.model.prior_grad(x) + self.anchor_sum) + self.scale * diff


class SweepKick(_Estimator):
    """Symmetric minibatch splitting: forward then backward over a fresh partition each period.

    Each kick is ``grad f0(x) + N_m sum_{i in block} grad f_i(x)``; with an anchor the
    block sum is replaced by the anchored difference plus the full anchor sum.
    The partition is redrawn every ``2 * n_batches`` calls.
    """

    kind = "sms"

    def __init__(self, model, n_batches, anchor=None, order="palindrome", schedule_source=None):
        super().__init__(model)
        if n_batches < 1 or model.n_terms % n_batches:
            raise ValueError(f"n_batches={n_batches} must divide the dataset size {model.n_terms}")
        self.n_batches = int(n_batches)
        self.batch_size = model.n_terms // self.n_batches
        self.anchor = None if anchor is None else np.asarray(anchor, dtype=float).copy()
        self.anchor_sum = None if anchor is None else anchor_precompute(model, self.anchor)
        if order == "palindrome":
            self.visit_order = palindrome(self.n_batches)
        elif order == "cached":
            self.visit_order = cached_kick_order(self.n_batches)
        else:
            raise ValueError(f"unknown visit order {order!r}")
        # callable(rng) -> SweepSchedule; lets a coupled chain borrow another chain's partitions
        self.schedule_source = schedule_source
        self.reset()

    @property
    def period(self):
        return 2 * self.n_batches

    def reset(self):
        self.schedule = None
        self.position = 0
        self.batch_log = []
        self._primed = False

    def new_schedule(self, rng):
        if self.schedule_source is not None:
            return self.schedule_source(rng)
        return sample_partition(rng, self.model.n_terms, self.batch_size, self.visit_order)

    def draw_initial(self, rng):
        """Draw the first partition and return its block 0 without advancing the cursor."""
        self.schedule = self.new_schedule(rng)
        self._primed = True
        return self.schedule.blocks[0]

    def draw(self, rng, step_index=None):
        """Indices for the next kick; ``step_index`` (0-based, global) overrides the cursor."""
        if step_index is not None:
            self.position = step_index % self.period
        if self.schedule is None or (self.position == 0 and not self._primed):
            self.schedule = self.new_schedule(rng)
        self._primed = False
        block = int(self.visit_order[self.position])
        self.batch_log.append(block)
        self.position = (self.position + 1) % self.period
        return self.schedule.blocks[block]

    def evaluate(self, x, indices):
        self.n_evals += 1
        m = self.model
        if self.anchor is None:
            return m.prior_grad(x) + self.n_batches * m.term_gradient_sum(x, indices)
        diff = m.term_gradient_sum(x, indices) - m.term_gradient_sum(self.anchor, indices)
        return (m.prior_grad(x) + self.anchor_sum) + self.n_batches * diff

    def __call__(self, x, rng, step_index=None):
        return self.evaluate(x, self.draw(rng, step_index))


def make_estimator(kind, model, batch_size=None, n_batches=None, anchor=None):
    """Build an estimator by name: ``full``, ``iid``, ``vr``, ``sms`` or ``sms-vr``."""
    if n_batches is None and batch_size is not None:
        n_batches = model.n_terms // batch_size
    if batch_size is None and n_batches is not None:
        batch_size = model.n_terms // n_batches
    if kind == "full":
        return FullGradient(model)
    if kind == "iid":
        return IIDMinibatch(model, batch_size)
    if kind == "vr":
        return VarianceReduced(model, batch_size, anchor)
    if kind == "sms":
        return SweepKick(model, n_batches)
    if kind == "sms-vr":
        if anchor is None:
            raise RuntimeError("sms-vr needs an anchor point")
        return SweepKick(model, n_batches, anchor=anchor)
    raise ValueError(f"unknown estimator kind {kind!r}")

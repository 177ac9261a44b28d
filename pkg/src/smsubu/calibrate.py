"""Classification calibration metrics and ensemble averaging.

Labels are 0-based class indices ``0 .. C-1``; class order is the ranking used by RPS.
"""
from dataclasses import dataclass
import math

import numpy as np

__all__ = [
    "NLL_FLOOR",
    "PredictionSet",
    "accuracy",
    "nll",
    "ace",
    "rps",
    "ensemble_average",
    "metrics_report",
    "write_report_csv",
]

NLL_FLOOR = 1e-12


@dataclass(frozen=True)
class PredictionSet:
    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        p = np.array(self.probs, dtype=float, ndmin=2)
        y = np.asarray(self.labels)
        if p.ndim != 2:
            raise ValueError("probs must be a 2-d table (rows x classes)")
        n, C = p.shape
        if n < 1:
            raise ValueError("empty prediction set")
        if C < 2:
            raise ValueError("need at least two classes")
        if y.shape != (n,):
            raise ValueError(f"labels shape {y.shape} does not match {n} rows")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.mod(y, 1) == 0):
                raise ValueError("labels must be integers")
            y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= C:
            raise ValueError(f"labels must lie in 0..{C - 1}")
        if not np.all(np.isfinite(p)) or p.min() < 0:
            raise ValueError("probabilities must be finite and non-negative")
        bad = np.flatnonzero(np.abs(p.sum(axis=1) - 1.0) > 1e-6)
        if bad.size:
            raise ValueError(f"rows {bad[:10].tolist()} do not sum to 1")
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self):
        return self.probs.shape[0]

    @property
    def n_classes(self):
        return self.probs.shape[1]


def _as_set(preds, labels=None):
    if isinstance(preds, PredictionSet):
        return preds
    return PredictionSet(preds, labels)


def accuracy(preds, labels=None):
    """Fraction of rows whose argmax (ties to the lowest index) is the label."""
    ps = _as_set(preds, labels)
    return float(np.mean(np.argmax(ps.probs, axis=1) == ps.labels))


def nll(preds, labels=None, floor=NLL_FLOOR):
    ps = _as_set(preds, labels)
    pt = ps.probs[np.arange(ps.n), ps.labels]
    return float(-np.mean(np.log(np.maximum(pt, floor))))


def _tie_safe_cuts(sorted_vals, n_ranges):
    """Equal-mass cut positions, each moved to the nearer end of any run of equal values it splits."""
    n = sorted_vals.shape[0]
    cuts = [0]
    for k in range(1, n_ranges):
        pos = (k * n) // n_ranges
        if 0 < pos < n and sorted_vals[pos] == sorted_vals[pos - 1]:
            lo = int(np.searchsorted(sorted_vals, sorted_vals[pos], side="left"))
            hi = int(np.searchsorted(sorted_vals, sorted_vals[pos], side="right"))
            pos = lo if pos - lo < hi - pos else hi
        cuts.append(max(pos, cuts[-1]))
    cuts.append(n)
    return cuts


def ace(preds, labels=None, n_ranges=15):
    """Adaptive calibration error with per-class equal-mass bins.

    For each class the confidences are sorted and cut into ``n_ranges`` bins of
    near-equal size; a cut never separates equal confidences (it moves to the
    nearer end of the tied run), so tied rows share
    a bin and some bins may end up empty. The result averages
    ``|frequency(label == c) - mean confidence|`` over the non-empty (class, bin) pairs.
    """
    ps = _as_set(preds, labels)
    n_ranges = int(n_ranges)
    if n_ranges < 1:
        raise ValueError("n_ranges must be >= 1")
    if ps.n < n_ranges:
        raise ValueError(f"need at least n_ranges={n_ranges} rows, got {ps.n}")
    total, count = 0.0, 0
    for c in range(ps.n_classes):
        conf = ps.probs[:, c]
        order = np.argsort(conf, kind="stable")
        sc = conf[order]
        hit = (ps.labels[order] == c).astype(float)
        cuts = _tie_safe_cuts(sc, n_ranges)
        for lo, hi in zip(cuts[:-1], cuts[1:]):
            if hi > lo:
                total += abs(hit[lo:hi].mean() - sc[lo:hi].mean())
                count += 1
    return float(total / count)


def rps(preds, labels=None, normalized=False):
    """Ranked probability score ``mean sum_{k<C} (CDF_p(k) - CDF_y(k))^2``.

    ``normalized`` divides by ``C - 1``.
    """
    ps = _as_set(preds, labels)
    C = ps.n_classes
    cp = np.cumsum(ps.probs, axis=1)[:, :-1]
    cy = (ps.labels[:, None] <= np.arange(C - 1)[None, :]).astype(float)
    score = float(np.mean(np.sum((cp - cy) ** 2, axis=1)))
    return score / (C - 1) if normalized else score


def ensemble_average(prob_sets):
    """Mean of ``S`` probability tables of identical shape ``(n, C)``."""
    if isinstance(prob_sets, np.ndarray):
        if prob_sets.ndim != 3:
            raise ValueError("expected an (S, n, C) array")
        tables = list(prob_sets)
    else:
        tables = [np.asarray(t, dtype=float) for t in prob_sets]
    if not tables:
        raise ValueError("need at least one member")
    shape = tables[0].shape
    for k, t in enumerate(tables):
        if t.shape != shape or t.ndim != 2:
            raise ValueError(f"member {k} has shape {t.shape}, expected {shape}")
    return np.mean(np.stack(tables), axis=0)


def metrics_report(preds, labels=None, n_ranges=15, members=None):
    """Dict ``metric -> (value, std)``; std spans the individual members when given."""
    ps = _as_set(preds, labels)
    fns = {
        "accuracy": accuracy,
        "nll": nll,
        "ace": lambda q: ace(q, n_ranges=n_ranges),
        "rps": rps,
    }
    out = {}
    for name, fn in fns.items():
        std = math.nan
        if members is not None and len(members) > 1:
            std = float(np.std([fn(PredictionSet(m, ps.labels)) for m in members], ddof=1))
        out[name] = (fn(ps), std)
    return out


def write_report_csv(path, report):
    with open(path, "w") as fh:
        fh.write("metric,value,std\n")
        for name, (value, std) in report.items():
            fh.write(f"{name},{value:.17g},{std:.17g}\n")

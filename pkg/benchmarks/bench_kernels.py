"""Time the numba kernels against their numpy forms.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--epochs 2000]

Reports the best of ``--repeat`` runs after one warm-up call (which also
triggers compilation). With ``SMSUBU_DISABLE_NUMBA=1`` both columns run numpy.
"""
import argparse
import timeit

import numpy as np

from smsubu import kernels
from smsubu._accel import HAS_NUMBA
from smsubu.couple import LogPredictive, run_coupled_level
from smsubu.model import LogRegModel
from smsubu.runner.data import synthetic_logreg


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_softmax(repeat):
    rows = []
    for n, p, c, batch in ((1000, 3, 3, 200), (10000, 784, 10, 200)):
        ds, _ = synthetic_logreg(n, n_features=p, n_classes=c, rng=0)
        m = LogRegModel(ds.features, ds.labels)
        W = np.random.default_rng(1).standard_normal(m.shape) * 0.01
        idx = np.random.default_rng(2).choice(n, batch, replace=False)
        for name, loop, ref in (("grad_sum", kernels._softmax_xent_grad_sum_loop, kernels.softmax_xent_grad_sum_numpy),
                                ("loss_sum", kernels._softmax_xent_sum_loop, kernels.softmax_xent_sum_numpy)):
            t_loop = best_of(lambda: loop(W, m.Xa, m.labels, idx), repeat)
            t_np = best_of(lambda: ref(W, m.Xa, m.labels, idx), repeat)
            rows.append((f"softmax {name} p={p} C={c} batch={batch}", t_loop, t_np))
    return rows


def bench_coupled(repeat, epochs):
    ds, _ = synthetic_logreg(1000, n_features=3, n_classes=3, feature_scale=1.0, rng=0)
    m = LogRegModel(ds.features, ds.labels, prior_variance=0.02)
    fns = LogPredictive(m, ds.features[:20], ds.labels[:20])
    anchor = np.zeros(m.dim)
    rows = []
    for est in ("sms-vr", "iid"):
        def run():
            return run_coupled_level(m, "ubu", est, 0.02, 2.0, epochs, fns, rng=0, x0=anchor, n_batches=5,
                                     anchor=anchor if "vr" in est else None)
        chosen = kernels.coupled_logreg_chunk
        try:
            kernels.coupled_logreg_chunk = kernels._coupled_logreg_chunk_loop
            t_loop = best_of(run, repeat)
            a = run().delta
            kernels.coupled_logreg_chunk = kernels._coupled_logreg_chunk_numpy
            t_np = best_of(run, repeat)
            b = run().delta
        finally:
            kernels.coupled_logreg_chunk = chosen
        if not np.isclose(a, b, rtol=1e-9, atol=1e-15):
            raise SystemExit(f"kernel paths disagree for {est}: {a!r} vs {b!r}")
        rows.append((f"coupled UBU level, {est}, {epochs} epochs", t_loop, t_np))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=2000)
    args = ap.parse_args(argv)
    print(f"numba active: {HAS_NUMBA}")
    print(f"{'case':<48} {'numba (s)':>11} {'numpy (s)':>11} {'speedup':>8}")
    for name, t_loop, t_np in bench_softmax(args.repeat) + bench_coupled(args.repeat, args.epochs):
        print(f"{name:<48} {t_loop:>11.5f} {t_np:>11.5f} {t_np / t_loop:>7.1f}x")


if __name__ == "__main__":
    main()

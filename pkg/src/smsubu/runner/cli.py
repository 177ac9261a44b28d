"""Command line entry point: ``smsubu <subcommand> [--config FILE] [--seed N] [--out DIR] [--scale S]``."""
import argparse
import json
import math
import os
import sys

import numpy as np

from .config import KINDS, dump_config, load_config

__all__ = ["main", "build_parser"]


def build_parser():
    p = argparse.ArgumentParser(prog="smsubu", description="Kinetic Langevin samplers with symmetric minibatch sweeps.")
    sub = p.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        sp = sub.add_parser(kind)
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--scale", type=float, help="multiplier for run lengths")
        if kind == "calibrate":
            sp.add_argument("--probs", help="CSV of predictive probabilities (one row per item)")
            sp.add_argument("--labels", help="CSV or text file of 0-based labels")
            sp.add_argument("--n-ranges", type=int, default=15)
        if kind == "diagnose":
            sp.add_argument("--chains", help="CSV with one column per chain of a scalar summary")
    return p


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def _cmd_bias_study(cfg):
    from .pipeline import run_bias_study

    res = run_bias_study(cfg, log=_log)
    for s in res.curves:
        print(f"{s}: h0={res.h0[s]:g} slope={res.slopes[s]:.3f} bias@{res.common_h:g}={res.bias_at_common[s]:+.3e}")
    print("ordering by |bias| at common h: " + " < ".join(res.ordering()))
    return {"slopes": res.slopes, "h0": res.h0, "common_h": res.common_h, "bias_at_common": res.bias_at_common}


def _cmd_contraction(cfg):
    from ..diagnose import contraction_check
    from ..model import QuadraticModel

    ev = [float(v) for v in cfg.model.eigenvalues.split(",")]
    q = QuadraticModel(np.diag(ev))
    gamma = math.sqrt(8.0 * max(ev))
    rows = []
    for h in (0.01, 0.1 / gamma):
        r = contraction_check(q, h, gamma, n_steps=100, n_pairs=64, rng=cfg.seed)
        rows.append((h, r.max_step_ratio, r.bound, r.holds))
        r.to_csv(os.path.join(cfg.out, f"contraction_h{h:.6g}.csv"))
        print(f"h={h:.6g} max ratio={r.max_step_ratio:.12f} bound={r.bound:.12f} holds={r.holds}")
    return {"rows": rows}


def _cmd_sample(cfg):
    from .pipeline import SAMPLERS, build_data, build_model, find_anchor, _estimator
    from ..sample import GhmcConfig, SamplerConfig, run_chain, run_sms_ghmc

    train, _ = build_data(cfg.model, cfg.seed) if cfg.model.kind != "quadratic" else (None, None)
    model = build_model(cfg.model, train)
    smp = cfg.sampler
    n_steps = max(1, int(round(smp.n_steps * cfg.scale)))
    # quadratic targets have no optimizer anchor; their estimators drop variance reduction
    anchor = None if cfg.model.kind == "quadratic" else find_anchor(model, cfg.optimizer, rng=cfg.seed)
    if smp.kind == "sms-ghmc":
        gcfg = GhmcConfig(h=smp.h, n_batches=smp.n_batches, n_iter=n_steps, burn_in=smp.burn_in, seed=cfg.seed)
        tr = run_sms_ghmc(model, gcfg, anchor=anchor, x0=anchor)
    else:
        if smp.kind not in SAMPLERS:
            raise SystemExit(f"unknown sampler {smp.kind!r}; choose from {sorted(SAMPLERS) + ['sms-ghmc']}")
        integrator, est_kind = SAMPLERS[smp.kind]
        if anchor is None:
            est_kind = {"sms-vr": "sms", "vr": "iid"}.get(est_kind, est_kind)
        est = _estimator(model, est_kind, integrator, smp.n_batches, anchor)
        scfg = SamplerConfig(h=smp.h, gamma=smp.gamma, n_steps=n_steps, burn_in=smp.burn_in, seed=cfg.seed,
                             thin=smp.thin, record_potential=True)
        tr = run_chain(integrator, model, est, scfg, x0=anchor)
    path = os.path.join(cfg.out, "trace.csv")
    tr.to_csv(path)
    print(f"{len(tr.samples)} samples written to {path}")
    if tr.acceptance_rate is not None:
        print(f"acceptance rate {tr.acceptance_rate:.4f}")
    return {"n_samples": len(tr.samples), "acceptance_rate": tr.acceptance_rate}


def _cmd_ensemble(cfg):
    from ..calibrate import metrics_report, write_report_csv
    from .pipeline import build_data, build_model, ensemble_sms_ubu, emit_plot_data

    train, test = build_data(cfg.model, cfg.seed)
    model = build_model(cfg.model, train)
    res = ensemble_sms_ubu(model, cfg.ensemble.n_members, cfg)
    summary = {"rhat_train_loss": res.rhat()}
    print(f"R-hat of the training loss across members: {summary['rhat_train_loss']:.4f}")
    emit_plot_data([(f"member{n}", np.arange(len(l)), l) for n, l in enumerate(res.train_loss)],
                   os.path.join(cfg.out, "train_loss.csv"))
    if test is not None:
        members = [res.predictive(test.features, member=n) for n in range(len(res.samples))]
        ens = np.mean(members, axis=0)
        rep = metrics_report(ens, test.labels, members=members)
        write_report_csv(os.path.join(cfg.out, "ensemble_metrics.csv"), rep)
        swa_probs = res.models[0].predict_probs(res.anchors[0], test.features)
        write_report_csv(os.path.join(cfg.out, "swa_metrics.csv"), metrics_report(swa_probs, test.labels))
        for k, (v, s) in rep.items():
            print(f"{k}: {v:.4f}" + ("" if math.isnan(s) else f" (member std {s:.4f})"))
        summary["metrics"] = {k: v for k, (v, _) in rep.items()}
    return summary


def _read_matrix(path):
    return np.atleast_2d(np.loadtxt(path, delimiter=",", ndmin=2))


def _cmd_calibrate(cfg, args):
    from ..calibrate import metrics_report, write_report_csv

    if not args.probs or not args.labels:
        raise SystemExit("calibrate needs --probs and --labels")
    P = _read_matrix(args.probs)
    y = np.loadtxt(args.labels, delimiter=",", ndmin=1).astype(np.int64).reshape(-1)
    rep = metrics_report(P, y, n_ranges=args.n_ranges)
    write_report_csv(os.path.join(cfg.out, "metrics.csv"), rep)
    for k, (v, _) in rep.items():
        print(f"{k}: {v:.6f}")
    return {k: v for k, (v, _) in rep.items()}


def _cmd_diagnose(cfg, args):
    from ..diagnose import gelman_rubin, hessian_norm_power_iteration
    from .pipeline import build_data, build_model, find_anchor

    out = {}
    if args.chains:
        C = _read_matrix(args.chains).T
        out["rhat"] = gelman_rubin(C)
        print(f"R-hat: {out['rhat']:.6f}")
        return out
    train, _ = build_data(cfg.model, cfg.seed) if cfg.model.kind != "quadratic" else (None, None)
    model = build_model(cfg.model, train)
    x = np.zeros(model.dim) if cfg.model.kind == "quadratic" else find_anchor(model, cfg.optimizer, rng=cfg.seed)
    r = hessian_norm_power_iteration(model, x, rng=cfg.seed)
    r.to_csv(os.path.join(cfg.out, "hessian_norm.csv"))
    out["hessian_norm"] = r.value
    print(f"Hessian norm at the optimizer output: {r.value:.6g} ({r.iterations} iterations)")
    return out


def main(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config, kind=args.command, seed=args.seed, out=args.out, scale=args.scale)
    os.makedirs(cfg.out, exist_ok=True)
    dump_config(cfg, os.path.join(cfg.out, "resolved_config.ini"))
    handlers = {
        "bias-study": lambda: _cmd_bias_study(cfg),
        "contraction": lambda: _cmd_contraction(cfg),
        "sample": lambda: _cmd_sample(cfg),
        "ensemble": lambda: _cmd_ensemble(cfg),
        "calibrate": lambda: _cmd_calibrate(cfg, args),
        "diagnose": lambda: _cmd_diagnose(cfg, args),
    }
    result = handlers[args.command]()
    from .pipeline import write_manifest

    inputs = [args.config] if args.config else []
    for src in (cfg.model.data, cfg.model.test_data):
        if src.startswith(("csv:", "idx:")):
            inputs += src[4:].split(",")
    for attr in ("probs", "labels", "chains"):
        if getattr(args, attr, None):
            inputs.append(getattr(args, attr))
    write_manifest(cfg.out, cfg, inputs, extra={"result": json.loads(json.dumps(result, default=float))})
    return 0


if __name__ == "__main__":
    sys.exit(main())

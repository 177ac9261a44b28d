"""Experiment orchestration: bias study, ensemble pipeline, plot data and manifests."""
from dataclasses import dataclass, field
import csv
import json
import math
import os
import time

import numpy as np

from ..calibrate import NLL_FLOOR, ensemble_average, nll, rps, accuracy, ace
from ..couple import LogPredictive, fit_slope, run_coupled_level, telescope, write_curve_csv, write_levels_csv
from ..diagnose import gelman_rubin
from ..errors import DivergedError
from ..model import LogRegModel, MlpModel, QuadraticModel, localize
from ..sample import SamplerConfig, run_chain, run_sms_ubu
from ..sgrad import SweepKick, make_estimator
from .config import flatten
from .data import Dataset, file_digest, load_csv, load_idx, synthetic_logreg
from .optim import adam_optimize, swa

__all__ = [
    "SAMPLERS",
    "build_data",
    "build_model",
    "find_anchor",
    "find_stability_edge",
    "anchor_chains",
    "BiasStudyResult",
    "run_bias_study",
    "EnsembleResult",
    "ensemble_sms_ubu",
    "emit_plot_data",
    "read_plot_data",
    "write_manifest",
]

# sampler name -> (integrator, estimator kind); plain SG names draw i.i.d. batches,
# the "-vr" variants add the anchored control variate
SAMPLERS = {
    "sms-ubu": ("ubu", "sms-vr"),
    "sg-ubu": ("ubu", "iid"),
    "sg-ubu-vr": ("ubu", "vr"),
    "sms-baoab": ("baoab", "sms-vr"),
    "sg-baoab": ("baoab", "iid"),
    "sg-baoab-vr": ("baoab", "vr"),
    "sg-hmc": ("euler", "iid"),
    "sg-hmc-vr": ("euler", "vr"),
}


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# -- data and models ---------------------------------------------------------------------------


def build_data(spec, seed=0):
    """``(train, test)`` datasets described by a ``ModelSpec``."""
    src = spec.data
    if src == "synthetic":
        train, W = synthetic_logreg(spec.n_train, spec.n_features, spec.n_classes, spec.feature_scale,
                                    spec.weight_scale, rng=seed)
        test, _ = synthetic_logreg(spec.n_test, spec.n_features, spec.n_classes, spec.feature_scale,
                                   rng=np.random.default_rng([seed, 1]), weights=W)
        test.split = "test"
        return train, test
    if src.startswith("csv:"):
        train = load_csv(src[4:], spec.label_column)
        test = load_csv(spec.test_data[4:], spec.label_column, "test") if spec.test_data else None
        return train, test
    if src.startswith("idx:"):
        imgs, labs = src[4:].split(",")
        train = load_idx(imgs, labs)
        test = None
        if spec.test_data:
            ti, tl = spec.test_data[4:].split(",")
            test = load_idx(ti, tl, split="test")
        return train, test
    raise ValueError(f"unknown data source {src!r}")


def build_model(spec, data=None):
    if spec.kind == "quadratic":
        ev = [float(v) for v in spec.eigenvalues.split(",")]
        return QuadraticModel(np.diag(ev), n_terms=spec.n_train)
    if data is None:
        raise ValueError(f"model kind {spec.kind!r} needs data")
    if spec.kind == "logreg":
        return LogRegModel(data.features, data.labels, prior_variance=spec.prior_variance,
                           n_classes=data.n_classes)
    if spec.kind == "mlp":
        return MlpModel(data.features, data.labels, hidden=spec.hidden, prior_variance=spec.prior_variance,
                        n_classes=data.n_classes)
    raise ValueError(f"unknown model kind {spec.kind!r}")


def find_anchor(model, opt, rng=None, x0=None):
    """Optimizer output used as the variance-reduction anchor (tight tolerance for convex models)."""
    tol = opt.tol if opt.tol is not None else 1e-5 * math.sqrt(model.dim)
    return adam_optimize(model, opt.epochs, opt.lr, min(opt.batch_size, model.n_terms), rng=rng, x0=x0,
                         decay_steps=opt.decay_steps, beta1=opt.beta1, beta2=opt.beta2, tol=tol)


# -- bias study --------------------------------------------------------------------------------


def _estimator(model, est_kind, integrator, n_batches, anchor):
    if est_kind.startswith("sms"):
        return SweepKick(model, n_batches, anchor=anchor if est_kind == "sms-vr" else None,
                         order="cached" if integrator == "baoab" else "palindrome")
    return make_estimator(est_kind, model, n_batches=n_batches, anchor=anchor)


def find_stability_edge(model, sampler, gamma, anchor, top=0.16, n_grid=10, n_batches=5, seed=0,
                        time_span=20.0, min_steps=2000):
    """Largest ``h = top / 2^k`` whose chain from the anchor keeps a mean excess potential below ``dim``.

    Exact sampling gives an excess of about ``dim / 2`` near a well-conditioned mode;
    a chain past the edge either diverges or heats up far beyond it.
    """
    integrator, est_kind = SAMPLERS[sampler]
    f_star = model.potential(anchor)
    for k in range(n_grid):
        h = top / 2 ** k
        cfg = SamplerConfig(h=h, gamma=gamma, n_steps=max(int(time_span / h), min_steps), seed=seed,
                            record_potential=True)
        est = _estimator(model, est_kind, integrator, n_batches, anchor)
        try:
            tr = run_chain(integrator, model, est, cfg, x0=anchor)
        except DivergedError:
            continue
        excess = float(np.mean(tr.potentials)) - f_star
        if np.isfinite(excess) and excess < model.dim:
            return h
    raise RuntimeError(f"{sampler}: no stable stepsize down to {top / 2 ** (n_grid - 1):g}")


@dataclass
class BiasStudyResult:
    curves: dict  # sampler -> BiasCurve over the full ladder
    slopes: dict  # sampler -> slope of the debiased RMS level differences over the first n_levels
    bias_slopes: dict  # sampler -> slope of the telescoped bias (same levels)
    h0: dict
    common_h: float
    bias_at_common: dict
    runtime: float = 0.0
    files: list = field(default_factory=list)

    def ordering(self):
        """Samplers sorted by |bias| at the largest common stepsize."""
        return sorted(self.bias_at_common, key=lambda s: abs(self.bias_at_common[s]))


def _slope_or_nan(h, b):
    try:
        return fit_slope(h, b)
    except ValueError:
        return math.nan


def run_bias_study(cfg, model=None, test=None, anchor=None, log=None):
    """Coupled multilevel bias for each sampler, on ladders that start at each sampler's edge.

    Ladders live on the grid ``edge_grid_top / 2^k`` and are extended downwards
    until they reach the smallest start, so every sampler has a telescoped
    estimate at the largest stepsize that all of them can use.
    """
    t0 = time.time()
    bs = cfg.bias_study
    say = log or (lambda msg: None)
    if model is None:
        train, test_ds = build_data(cfg.model, cfg.seed)
        model = build_model(cfg.model, train)
        if test is None:
            test = test_ds
    if anchor is None:
        anchor = find_anchor(model, cfg.optimizer, rng=cfg.seed)
    n_fn = bs.n_test_functions
    fns = LogPredictive(model, test.features[:n_fn], test.labels[:n_fn])
    names = [s.strip() for s in bs.samplers.split(",") if s.strip()]
    for s in names:
        if s not in SAMPLERS:
            raise ValueError(f"unknown sampler {s!r}; choose from {sorted(SAMPLERS)}")
    n_batches = cfg.sampler.n_batches
    h0 = {}
    for s in names:
        if bs.h0 == "edge":
            h0[s] = find_stability_edge(model, s, bs.gamma, anchor, top=bs.edge_grid_top, n_batches=n_batches,
                                        seed=cfg.seed)
        else:
            h0[s] = float(bs.h0)
        say(f"{s}: h0 = {h0[s]:g}")
    common = min(h0.values())
    curves, slopes, bslopes, at_common = {}, {}, {}, {}
    seeds = _child_seeds(cfg.seed, len(names))
    for s, sd in zip(names, seeds):
        integrator, est_kind = SAMPLERS[s]
        n_levels = bs.n_levels
        while h0[s] / 2 ** (n_levels - 1) > common * (1 + 1e-9):
            n_levels += 1
        level_seeds = _child_seeds(sd, n_levels)
        levels = []
        for lvl in range(n_levels):
            h = h0[s] / 2 ** lvl
            # levels past the slope window only extend the ladder; they keep the last window length
            epochs = bs.base_epochs * 2 ** min(lvl, bs.n_levels - 1) * cfg.scale
            levels.append(run_coupled_level(model, integrator, est_kind, h, bs.gamma, epochs, fns,
                                            rng=level_seeds[lvl], x0=anchor, n_batches=n_batches, anchor=anchor,
                                            noise_coupling=bs.noise_coupling))
            say(f"{s}: h = {h:g} delta = {levels[-1].delta:+.3e} +- {levels[-1].chunk_std:.1e}"
                f" rms = {levels[-1].delta_rms:.3e}")
        curve = telescope(levels)
        curves[s] = curve
        k = bs.n_levels
        slopes[s] = _slope_or_nan(curve.stepsizes[:k], [lv.delta_rms for lv in levels[:k]])
        bslopes[s] = _slope_or_nan(curve.stepsizes[:k], curve.bias[:k])
        j = int(np.argmin(np.abs(curve.stepsizes - common)))
        at_common[s] = float(curve.bias[j])
    res = BiasStudyResult(curves, slopes, bslopes, h0, common, at_common, time.time() - t0)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        rows = []
        for s, curve in curves.items():
            p = os.path.join(cfg.out, f"bias_{s}.csv")
            write_curve_csv(p, curve, s)
            q = os.path.join(cfg.out, f"levels_{s}.csv")
            write_levels_csv(q, curve.levels)
            res.files += [p, q]
            rows.append((s, curve.stepsizes, np.abs(curve.bias), curve.std))
        p = os.path.join(cfg.out, "bias_plot.csv")
        emit_plot_data(rows, p)
        q = os.path.join(cfg.out, "bias_summary.csv")
        with open(q, "w") as fh:
            fh.write("sampler,h0,slope_delta,slope_bias,bias_at_common_h,common_h\n")
            for s in names:
                fh.write(f"{s},{h0[s]:.17g},{slopes[s]:.17g},{bslopes[s]:.17g},{at_common[s]:.17g},{common:.17g}\n")
        res.files += [p, q]
    return res


# -- ensemble pipeline -------------------------------------------------------------------------


@dataclass
class EnsembleResult:
    samples: list  # per member: (K, d) kept samples
    anchors: list  # per member SWA points
    train_loss: np.ndarray  # (N, K) mean training NLL per kept sample
    models: list  # per member localized model
    seeds: list

    def predictive(self, inputs, member=None, thin=1):
        """Posterior-predictive probabilities averaged over kept samples."""
        idx = range(len(self.samples)) if member is None else [member]
        tables = [self.models[n].predict_probs(x, inputs) for n in idx for x in self.samples[n][::thin]]
        return ensemble_average(tables)

    def rhat(self):
        return gelman_rubin(self.train_loss)


def _initial_point(model, rng):
    if hasattr(model, "init_params"):
        return model.init_params(rng)
    return 0.1 * rng.standard_normal(model.dim)


def ensemble_sms_ubu(model, n_members, cfg, rng=None):
    """Independent members: random init, ADAM, SWA, localization, then SMS-UBU with bounces.

    One epoch is ``n_batches`` SMS steps; ``ensemble.sample_epochs`` epochs are run,
    the first ``ensemble.burn_in_epochs`` discarded.
    """
    if n_members < 1:
        raise ValueError("need at least one member")
    seed = cfg.seed if rng is None else rng
    member_seeds = _child_seeds(seed, n_members)
    opt, sw, loc, smp, ens = cfg.optimizer, cfg.swa, cfg.localization, cfg.sampler, cfg.ensemble
    n_batches = smp.n_batches
    if model.n_terms % n_batches:
        raise ValueError(f"n_batches={n_batches} must divide the dataset size {model.n_terms}")
    n_steps = int(round(ens.sample_epochs * n_batches * cfg.scale))
    burn = ens.burn_in_epochs / ens.sample_epochs
    out = EnsembleResult([], [], None, [], member_seeds)
    losses = []
    for n, ms in enumerate(member_seeds):
        try:
            r_init, r_adam, r_swa, r_chain = np.random.default_rng(ms).spawn(4)
            x = _initial_point(model, r_init)
            bsz = min(opt.batch_size, model.n_terms)
            x, state = adam_optimize(model, opt.epochs, opt.lr, bsz, rng=r_adam, x0=x, decay_steps=opt.decay_steps,
                                     beta1=opt.beta1, beta2=opt.beta2, return_state=True)
            x_star = swa(model, x, sw.epochs, sw.lr, bsz, rng=r_swa, beta1=opt.beta1, beta2=opt.beta2, state=state)
            local = localize(model, x_star, loc.rho, loc.rho_max_value)
            scfg = SamplerConfig(h=smp.h, gamma=smp.gamma, n_steps=n_steps, burn_in=burn, thin=smp.thin,
                                 reflect=(x_star, local.rho_max))
            tr = run_sms_ubu(local, scfg, n_batches, rng=r_chain, x0=x_star)
        except Exception as exc:
            raise RuntimeError(f"ensemble member {n} failed: {exc}") from exc
        if not all(local.contains(s) for s in tr.samples):
            raise RuntimeError(f"ensemble member {n} left the localization box")
        out.samples.append(tr.samples)
        out.anchors.append(x_star)
        out.models.append(local)
        losses.append([model.term_potential_sum(s, model.all_terms) / model.n_terms for s in tr.samples])
    m = min(len(l) for l in losses)
    out.train_loss = np.array([l[:m] for l in losses])
    return out


def anchor_chains(model, x_star, n_chains, cfg, rng=None):
    """Independent SMS-UBU chains on the posterior localized at one point ``x_star``.

    Returns the ``(n_chains, K)`` mean training NLL per kept sample, whose
    cross-chain R-hat checks mixing within a single local mode.
    """
    if n_chains < 2:
        raise ValueError("R-hat needs at least two chains")
    loc, smp, ens = cfg.localization, cfg.sampler, cfg.ensemble
    local = localize(model, x_star, loc.rho, loc.rho_max_value)
    n_steps = int(round(ens.sample_epochs * smp.n_batches * cfg.scale))
    scfg = SamplerConfig(h=smp.h, gamma=smp.gamma, n_steps=n_steps, burn_in=ens.burn_in_epochs / ens.sample_epochs,
                         thin=smp.thin, reflect=(x_star, local.rho_max))
    rows = []
    for r in np.random.default_rng(cfg.seed if rng is None else rng).spawn(n_chains):
        tr = run_sms_ubu(local, scfg, smp.n_batches, rng=r, x0=x_star)
        rows.append([model.term_potential_sum(x, model.all_terms) / model.n_terms for x in tr.samples])
    return np.array(rows)


def calibration_table(probs, labels, n_ranges=15):
    return {"accuracy": accuracy(probs, labels), "nll": nll(probs, labels), "ace": ace(probs, labels, n_ranges),
            "rps": rps(probs, labels)}


# -- outputs -----------------------------------------------------------------------------------


def emit_plot_data(curves, path):
    """Tidy CSV ``series,x,y[,err]``; each curve is ``(series, xs, ys)`` or ``(series, xs, ys, errs)``.

    The ``err`` column is written iff at least one curve supplies errors.
    """
    with_err = any(len(c) > 3 and c[3] is not None for c in curves)
    try:
        with open(path, "w") as fh:
            fh.write("series,x,y,err\n" if with_err else "series,x,y\n")
            for c in curves:
                name, xs, ys = c[0], c[1], c[2]
                errs = c[3] if len(c) > 3 and c[3] is not None else [math.nan] * len(xs)
                if len(xs) != len(ys) or len(errs) != len(xs):
                    raise ValueError(f"series {name!r} has mismatched lengths")
                for x, y, e in zip(xs, ys, errs):
                    row = f"{name},{float(x):.17g},{float(y):.17g}"
                    fh.write(row + (f",{float(e):.17g}\n" if with_err else "\n"))
    except OSError as exc:
        raise OSError(f"cannot write plot data to {path}: {exc}") from exc


def read_plot_data(path):
    """Inverse of :func:`emit_plot_data`: list of ``(series, xs, ys[, errs])`` in file order."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        has_err = "err" in reader.fieldnames
        for row in reader:
            entry = out.setdefault(row["series"], ([], [], []))
            entry[0].append(float(row["x"]))
            entry[1].append(float(row["y"]))
            if has_err:
                entry[2].append(float(row["err"]))
    return [(k, v[0], v[1], v[2]) if has_err else (k, v[0], v[1]) for k, v in out.items()]


def write_manifest(out_dir, cfg, inputs=(), extra=None):
    """``manifest.json``: resolved config, overrides vs defaults, and input content hashes."""
    os.makedirs(out_dir, exist_ok=True)
    hashes = {}
    for p in inputs:
        blob, sha = file_digest(p)
        hashes[str(p)] = {"git_blob": blob, "sha256": sha}
    doc = {
        "config": flatten(cfg),
        "overrides": cfg.overrides(),
        "inputs": hashes,
        "nll_floor": NLL_FLOOR,
    }
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
    return path

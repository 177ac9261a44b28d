import json
import math
import struct

import numpy as np
import pytest

from smsubu.couple import fit_slope, run_coupled_level
from smsubu.diagnose import hessian_norm_power_iteration, lyapunov_invariant_covariance
from smsubu.errors import FormatError
from smsubu.model import LogRegModel, QuadraticModel
from smsubu.runner.cli import main
from smsubu.runner.config import ExperimentConfig, load_config
from smsubu.runner.data import load_csv, load_idx, synthetic_logreg
from smsubu.runner.optim import RunningAverage, adam_optimize, swa
from smsubu.runner.pipeline import emit_plot_data, ensemble_sms_ubu, read_plot_data


# -- configuration -----------------------------------------------------------------------------

def test_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.optimizer.lr == 1e-2
    assert cfg.swa.lr == 1e-3
    assert cfg.sampler.h == 2.5e-4
    assert cfg.localization.rho == pytest.approx(50 ** -0.5, rel=1e-15)
    assert cfg.sampler.gamma == pytest.approx(1 / cfg.localization.rho, rel=1e-15)
    assert cfg.optimizer.batch_size == 200


def test_config_parsing_and_overrides():
    cfg = load_config(text="[experiment]\nseed = 4\n[sampler]\nh = 0.01\n[swa]\nepochs = 7\n")
    assert (cfg.seed, cfg.sampler.h, cfg.swa.epochs) == (4, 0.01, 7)
    assert cfg.overrides() == {"seed": 4, "sampler.h": 0.01, "swa.epochs": 7}
    for bad in ("[sampler]\nstep = 1\n", "[nowhere]\nx = 1\n", "[sampler]\nh = fast\n"):
        with pytest.raises(ValueError):
            load_config(text=bad)
    with pytest.raises(ValueError):
        load_config(text="", kind="train")


# -- data --------------------------------------------------------------------------------------

def _write_idx(tmp_path, n=2, labels=None, trim=0):
    images = struct.pack(">IIII", 0x803, n, 28, 28) + bytes(n * 28 * 28)
    labels = [1] * n if labels is None else labels
    lab = struct.pack(">II", 0x801, n) + bytes(labels)
    pi, pl = tmp_path / "img.idx", tmp_path / "lab.idx"
    pi.write_bytes(images[:len(images) - trim])
    pl.write_bytes(lab)
    return pi, pl


def test_idx_fixture(tmp_path):
    ds = load_idx(*_write_idx(tmp_path))
    assert ds.n == 2
    assert ds.features.shape == (2, 784)
    assert not ds.features.any()


def test_idx_truncated(tmp_path):
    with pytest.raises(FormatError):
        load_idx(*_write_idx(tmp_path, trim=5))


def test_idx_label_out_of_range(tmp_path):
    with pytest.raises(FormatError):
        load_idx(*_write_idx(tmp_path, labels=[3, 12]))


def test_csv_loading(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n0.5,1,7\n1.5,2,3\n2.5,3,7\n")
    ds = load_csv(p)
    assert ds.features.shape == (3, 2)
    # labels are 0-based and follow sorted order
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.n_classes == 2
    p.write_text("a,label\n1,4\n2,4\n")
    with pytest.raises(FormatError):
        load_csv(p)


def test_csv_format_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,label\n1,0\n2\n")
    with pytest.raises(FormatError):
        load_csv(p)
    p.write_text("a,b\n1,0\n")
    with pytest.raises(FormatError):
        load_csv(p)


# -- optimizers --------------------------------------------------------------------------------

def _quad():
    return QuadraticModel(np.diag([1.0, 3.0]), n_terms=10)


def test_adam_converges_on_quadratic():
    q = _quad()
    x0 = np.array([1.0, -1.0])
    x = adam_optimize(q, 100, 1e-2, 2, rng=0, x0=x0)
    assert np.linalg.norm(q.gradient(x)) < 1e-3 * np.linalg.norm(q.gradient(x0))


def test_adam_zero_epochs_and_seed():
    q = _quad()
    x0 = np.array([1.0, -1.0])
    np.testing.assert_array_equal(adam_optimize(q, 0, x0=x0, batch_size=2), x0)
    a = adam_optimize(q, 5, 1e-2, 3, rng=9, x0=x0)
    np.testing.assert_array_equal(a, adam_optimize(q, 5, 1e-2, 3, rng=9, x0=x0))


def test_adam_tolerance_polish(small_logreg):
    tol = 1e-5 * math.sqrt(small_logreg.dim)
    x = adam_optimize(small_logreg, 5, 1e-2, 20, rng=0, tol=tol)
    assert np.linalg.norm(small_logreg.gradient(x)) < tol


def test_swa_constant_and_average():
    q = _quad()
    start = np.array([0.3, 0.7])
    np.testing.assert_array_equal(swa(q, start, 3, lr=0.0, batch_size=2, rng=0), start)
    avg = RunningAverage()
    avg.update([1.0, 2.0])
    np.testing.assert_allclose(avg.update([3.0, -2.0]), [2.0, 0.0])


def test_swa_hessian_norm_on_quadratic():
    # constant Hessian: the SWA point is no sharper than any other point
    q = _quad()
    x = swa(q, np.array([1.0, -1.0]), 3, lr=1e-3, batch_size=2, rng=1)
    at_swa = hessian_norm_power_iteration(q, x, rng=0).value
    assert at_swa <= hessian_norm_power_iteration(q, np.array([5.0, 5.0]), rng=0).value + 1e-9


# -- ensemble pipeline -------------------------------------------------------------------------

def _ensemble_setup():
    ds, _ = synthetic_logreg(60, n_features=2, n_classes=3, feature_scale=1.0, rng=5)
    model = LogRegModel(ds.features, ds.labels, prior_variance=1.0)
    cfg = load_config(text="[optimizer]\nepochs = 5\nbatch_size = 12\n[swa]\nepochs = 2\n"
                           "[sampler]\nh = 0.01\nn_batches = 5\n[ensemble]\nsample_epochs = 20\nburn_in_epochs = 4\n")
    return model, cfg


def test_ensemble_single_member_in_box():
    model, cfg = _ensemble_setup()
    res = ensemble_sms_ubu(model, 1, cfg)
    loc = res.models[0]
    assert len(res.samples[0]) > 0
    assert all(loc.contains(x) for x in res.samples[0])


def test_ensemble_members_distinct():
    model, cfg = _ensemble_setup()
    res = ensemble_sms_ubu(model, 2, cfg)
    assert not np.allclose(res.anchors[0], res.anchors[1])
    assert res.train_loss.shape[0] == 2


def test_ensemble_rejects_ragged_partition():
    model, cfg = _ensemble_setup()
    cfg.sampler.n_batches = 7
    with pytest.raises(ValueError):
        ensemble_sms_ubu(model, 1, cfg)


# -- bias order on a quadratic -------------------------------------------------------------------

@pytest.mark.parametrize("kind, ladder, epochs, lo, hi", [
    ("ubu", [0.4, 0.2, 0.1], 10_000, 1.8, 2.2),
    ("euler", [0.1, 0.05, 0.025], 5_000, 0.8, 1.2),
])
def test_quadratic_bias_slope(kind, ladder, epochs, lo, hi):
    q = QuadraticModel(np.eye(1))
    gamma = math.sqrt(8)
    deltas = [run_coupled_level(q, kind, "full", h, gamma, epochs * 2 ** k, lambda x: x ** 2, rng=k).delta
              for k, h in enumerate(ladder)]
    oracle = [lyapunov_invariant_covariance(q, kind, h, gamma)[0, 0]
              - lyapunov_invariant_covariance(q, kind, h / 2, gamma)[0, 0] for h in ladder]
    assert lo <= fit_slope(ladder, oracle) <= hi
    assert lo <= fit_slope(ladder, deltas) <= hi


# -- plot data ---------------------------------------------------------------------------------

def test_plot_data_empty(tmp_path):
    p = tmp_path / "p.csv"
    emit_plot_data([], p)
    assert p.read_text() == "series,x,y\n"


def test_plot_data_round_trip(tmp_path):
    p = tmp_path / "p.csv"
    curves = [("a", [0.1, 0.2], [1 / 3, 2.5e-17]), ("b", [1.0], [-4.0])]
    emit_plot_data(curves, p)
    back = read_plot_data(p)
    assert [(n, list(x), list(y)) for n, x, y in back] == curves
    emit_plot_data([("a", [1.0], [2.0], [0.5]), ("b", [1.0], [3.0])], p)
    assert p.read_text().splitlines()[0] == "series,x,y,err"
    assert read_plot_data(p)[0][3] == [0.5]
    with pytest.raises(ValueError):
        emit_plot_data([("a", [1.0, 2.0], [1.0])], p)


# -- command line ------------------------------------------------------------------------------

def test_cli_contraction_and_manifest(tmp_path, capsys):
    assert main(["contraction", "--out", str(tmp_path), "--seed", "3"]) == 0
    assert "holds=True" in capsys.readouterr().out
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["overrides"]["seed"] == 3
    assert (tmp_path / "resolved_config.ini").exists()


def test_cli_sample_quadratic(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nkind = quadratic\neigenvalues = 1,2\n[sampler]\nkind = sms-ubu\nh = 0.1\n"
                   "gamma = 2.0\nn_steps = 50\nn_batches = 1\nburn_in = 0\n")
    assert main(["sample", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert len((tmp_path / "trace.csv").read_text().splitlines()) == 51


def test_cli_calibrate_and_diagnose(tmp_path, capsys):
    probs, labels = tmp_path / "p.csv", tmp_path / "y.csv"
    np.savetxt(probs, [[0.1, 0.9], [0.2, 0.8], [0.8, 0.2], [0.9, 0.1]], delimiter=",")
    np.savetxt(labels, [1, 1, 0, 0], fmt="%d")
    cfg = tmp_path / "c.ini"
    cfg.write_text("")
    assert main(["calibrate", "--probs", str(probs), "--labels", str(labels), "--n-ranges", "2",
                 "--out", str(tmp_path)]) == 0
    assert "ace: 0.150000" in capsys.readouterr().out
    chains = tmp_path / "ch.csv"
    np.savetxt(chains, np.array([[1, 1], [2, 2], [3, 3]]), delimiter=",")
    assert main(["diagnose", "--chains", str(chains), "--out", str(tmp_path)]) == 0
    assert f"R-hat: {math.sqrt(2 / 3):.6f}" in capsys.readouterr().out


def test_cli_same_seed_same_bytes(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[model]\nkind = quadratic\neigenvalues = 1,3\n[sampler]\nkind = sg-ubu\nh = 0.05\n"
                   "gamma = 2.0\nn_steps = 40\nburn_in = 0\n")
    outs = []
    for name in ("a", "b"):
        main(["sample", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "2"])
        outs.append((tmp_path / name / "trace.csv").read_bytes())
    assert outs[0] == outs[1]

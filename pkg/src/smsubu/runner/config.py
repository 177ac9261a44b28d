"""INI experiment configuration with defaults for the ensemble pipeline."""
from dataclasses import dataclass, field, fields, asdict
import configparser
import math
from typing import Optional

__all__ = ["ExperimentConfig", "load_config", "dump_config", "KINDS"]

KINDS = ("bias-study", "contraction", "sample", "ensemble", "calibrate", "diagnose")

_RHO = 50.0 ** -0.5


@dataclass
class ModelSpec:
    kind: str = "logreg"  # logreg | mlp | quadratic
    data: str = "synthetic"  # synthetic | csv:<path> | idx:<images>,<labels>
    test_data: str = ""
    label_column: str = "label"
    n_train: int = 1000
    n_test: int = 1000
    n_features: int = 3
    n_classes: int = 3
    feature_scale: float = 2.0
    weight_scale: float = 1.0
    prior_variance: float = 1.0
    hidden: int = 16
    eigenvalues: str = "1,1"


@dataclass
class SamplerSpec:
    kind: str = "sms-ubu"
    h: float = 2.5e-4
    gamma: float = 1.0 / _RHO
    n_steps: int = 1000
    n_batches: int = 5
    burn_in: float = 0.2
    thin: int = 1


@dataclass
class OptimizerSpec:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 15
    batch_size: int = 200
    decay_steps: Optional[float] = None  # T in lr0 / (1 + t / T); None means total steps
    tol: Optional[float] = None  # full-batch gradient tolerance for convex anchors


@dataclass
class SwaSpec:
    epochs: int = 5
    lr: float = 1e-3


@dataclass
class LocalizationSpec:
    rho: float = _RHO
    rho_max: Optional[float] = None  # defaults to 6 rho

    @property
    def rho_max_value(self):
        return 6.0 * self.rho if self.rho_max is None else self.rho_max


@dataclass
class EnsembleSpec:
    n_members: int = 4
    sample_epochs: int = 40
    burn_in_epochs: int = 10


@dataclass
class BiasStudySpec:
    samplers: str = "sms-ubu,sg-ubu,sms-baoab,sg-hmc"
    gamma: float = 2.0
    h0: str = "edge"  # a number, or "edge" for the empirical stability edge
    edge_grid_top: float = 0.16
    n_levels: int = 4
    base_epochs: int = 400
    n_test_functions: int = 20
    noise_coupling: str = "brownian"


@dataclass
class ExperimentConfig:
    kind: str = "sample"
    seed: int = 0
    out: str = "out"
    scale: float = 1.0
    model: ModelSpec = field(default_factory=ModelSpec)
    sampler: SamplerSpec = field(default_factory=SamplerSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    swa: SwaSpec = field(default_factory=SwaSpec)
    localization: LocalizationSpec = field(default_factory=LocalizationSpec)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    bias_study: BiasStudySpec = field(default_factory=BiasStudySpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def overrides(self):
        """Fields differing from the defaults, as ``section.key -> value``."""
        base = flatten(ExperimentConfig(kind=self.kind))
        return {k: v for k, v in flatten(self).items() if base.get(k) != v}


_SECTIONS = ("model", "sampler", "optimizer", "swa", "localization", "ensemble", "bias_study")


def _coerce(text, default, name):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if default is None:
        t = text.strip()
        if t.lower() in ("", "none"):
            return None
        try:
            return float(t)
        except ValueError:
            raise ValueError(f"{name}: expected a number or 'none', got {text!r}") from None
    try:
        return type(default)(text.strip())
    except ValueError:
        raise ValueError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None


def flatten(cfg):
    d = asdict(cfg)
    out = {k: d[k] for k in ("kind", "seed", "out", "scale")}
    for s in _SECTIONS:
        for k, v in d[s].items():
            out[f"{s}.{k}"] = v
    return out


def load_config(path=None, text=None, **top):
    """Parse an INI file (or string). Unknown sections and keys are errors."""
    cp = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            cp.read_file(fh, source=str(path))
    elif text is not None:
        cp.read_string(text)
    cfg = ExperimentConfig()
    if cp.has_section("experiment"):
        for k, v in cp.items("experiment"):
            if k not in ("kind", "seed", "out", "scale"):
                raise ValueError(f"unknown key experiment.{k}")
            setattr(cfg, k, _coerce(v, getattr(cfg, k), f"experiment.{k}"))
    for sec in cp.sections():
        if sec == "experiment":
            continue
        attr = sec.replace("-", "_")
        if attr not in _SECTIONS:
            raise ValueError(f"unknown section [{sec}]")
        obj = getattr(cfg, attr)
        names = {f.name for f in fields(obj)}
        for k, v in cp.items(sec):
            if k not in names:
                raise ValueError(f"unknown key {sec}.{k}")
            setattr(obj, k, _coerce(v, getattr(obj, k), f"{sec}.{k}"))
    for k, v in top.items():
        if v is not None:
            setattr(cfg, k, v)
    cfg.__post_init__()
    return cfg


def dump_config(cfg, path):
    cp = configparser.ConfigParser()
    cp["experiment"] = {k: str(getattr(cfg, k)) for k in ("kind", "seed", "out", "scale")}
    for s in _SECTIONS:
        cp[s] = {k: ("none" if v is None else repr(v) if isinstance(v, float) else str(v))
                 for k, v in asdict(getattr(cfg, s)).items()}
    with open(path, "w") as fh:
        cp.write(fh)


def is_default_gamma(cfg):
    return math.isclose(cfg.sampler.gamma, 1.0 / cfg.localization.rho)

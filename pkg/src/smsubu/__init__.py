"""Kinetic Langevin splitting samplers with symmetric minibatch sweeps."""
from . import calibrate, couple, diagnose, integrate, model, sample, sgrad
from .errors import DivergedError, FormatError, InstabilityError, UndefinedDiagnosticError, UnusableDataError

__version__ = "0.1.0"

__all__ = [
    "calibrate",
    "couple",
    "diagnose",
    "integrate",
    "model",
    "sample",
    "sgrad",
    "DivergedError",
    "FormatError",
    "InstabilityError",
    "UndefinedDiagnosticError",
    "UnusableDataError",
]

"""Exception types raised across the toolkit."""


class DivergedError(RuntimeError):
    """A chain produced a non-finite or exploding state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"chain diverged at step {step}")


class InstabilityError(ValueError):
    """An affine one-step map is not contractive (spectral radius >= 1)."""

    def __init__(self, spectral_radius):
        self.spectral_radius = spectral_radius
        super().__init__(f"one-step map is unstable: spectral radius {spectral_radius:.6g} >= 1")


class UnusableDataError(ValueError):
    """Input data cannot be used for the requested fit."""

    def __init__(self, message, offending=()):
        self.offending = list(offending)
        super().__init__(f"{message}: {self.offending}" if self.offending else message)


class UndefinedDiagnosticError(ValueError):
    """A diagnostic is mathematically undefined for the given input."""


class FormatError(ValueError):
    """A data file does not follow its declared format."""

    def __init__(self, message, path=None, offset=None, line=None):
        self.path = path
        self.offset = offset
        self.line = line
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)

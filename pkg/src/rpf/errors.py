"""Exception hierarchy shared across the package."""


class RpfError(Exception):
    """Base class for all errors raised by this package."""


class CaseSyntaxError(RpfError):
    """Malformed case file text. Carries the offending line/column."""

    def __init__(self, message, line=None, col=None):
        self.line = line
        self.col = col
        loc = ""
        if line is not None:
            loc = f" (line {line}" + (f", col {col})" if col is not None else ")")
        super().__init__(message + loc)


class MissingSection(RpfError):
    """A required table (bus or branch) is absent from the case."""


class ValidationError(RpfError):
    """Structurally invalid network or data (duplicate ids, bad values, ...)."""


class DegenerateCycle(RpfError):
    """A cycle whose total series impedance is zero; no susceptance scale exists."""


class DegenerateVoltage(RpfError):
    """A voltage magnitude at or below the modelling floor."""


class AngleInconsistency(RpfError):
    """Branch angles violate the cycle (loop) consistency required to
    reconstruct bus angles."""


class NotConverged(RpfError):
    """Iteration budget exhausted. Carries the best iterate found."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class InfeasibleRegion(RpfError):
    """The residual norm plateaued above tolerance with a vanishing gradient:
    no feasible point in the basin."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class GenerationError(RpfError):
    """Too many operating-condition samples had to be dropped."""


class FingerprintMismatch(RpfError):
    """Dataset or checkpoint was produced for a different network."""


class FormatError(RpfError):
    """Malformed or inconsistent serialized data."""


class LineSearchFailure(RpfError):
    """No acceptable step found along the search direction."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class NonFiniteLoss(RpfError):
    """Training objective became NaN or infinite."""


class NonDescent(RpfError):
    """A descent step could not be found. Carries the evaluation history."""

    def __init__(self, message, history=None):
        self.history = history
        super().__init__(message)


class InfeasibleStart(RpfError):
    """Optimization started outside the decision-variable bounds."""

"""Exception types raised across the package."""


class TubeDaggerError(Exception):
    """Base class for all package errors."""


class IntegrationDiverged(TubeDaggerError):
    def __init__(self, step_index, message=None):
        self.step_index = step_index
        super().__init__(message or f"non-finite state after integration step {step_index}")


class ShapeError(TubeDaggerError, ValueError):
    pass


class EmptyBatch(TubeDaggerError, ValueError):
    pass


class AlignmentError(TubeDaggerError, ValueError):
    pass


class InsufficientSamples(TubeDaggerError, ValueError):
    pass


class CapUnderflow(TubeDaggerError, ArithmeticError):
    pass


class DegenerateCap(TubeDaggerError, ArithmeticError):
    pass


class CoverageNotReached(TubeDaggerError):
    """Sampling budget exhausted before the coverage target was met.

    The partially converged tube is attached so callers can still use it.
    """

    def __init__(self, tube, coverage, n_traces):
        self.tube = tube
        self.coverage = coverage
        self.n_traces = n_traces
        super().__init__(
            f"surface coverage {coverage:.4f} below target after {n_traces} traces"
        )


class ParseError(TubeDaggerError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class ValidationError(TubeDaggerError, ValueError):
    pass


class InsufficientEnsemble(TubeDaggerError, ValueError):
    pass


class ConfigError(TubeDaggerError, ValueError):
    pass

"""Exception hierarchy. CLI exit codes hang off these classes."""


class SrecError(Exception):
    exit_code = 1


class ConfigError(SrecError, ValueError):
    """Invalid configuration. ``problems`` lists every violated constraint."""

    exit_code = 2

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DomainError(SrecError, ValueError):
    """Non-finite or out-of-domain numeric input."""


class DimensionError(SrecError, ValueError):
    """Arrays that should share a grid do not."""


class GridError(SrecError, ValueError):
    """Malformed interpolation grid."""


class InvariantError(SrecError, AssertionError):
    """A model invariant was violated beyond tolerance."""


class SolverError(SrecError, RuntimeError):
    exit_code = 3


class NonConvergenceError(SolverError):
    """Fixed-point iteration hit its iteration cap.

    Carries the full residual history; ``suggested_omega`` is set when the
    residual was seen to rise three iterations in a row.
    """

    def __init__(self, message, residuals, suggested_omega=None):
        super().__init__(message)
        self.residuals = list(residuals)
        self.suggested_omega = suggested_omega


class ArtifactError(SrecError, OSError):
    exit_code = 4


class RefusalError(SrecError):
    """Downstream command refused to run on an unusable solution."""

    exit_code = 3

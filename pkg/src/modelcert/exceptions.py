"""Exception and warning types shared across the package."""


class ModelcertError(Exception):
    """Base class for all errors raised by this package."""


class InvalidModelError(ModelcertError, ValueError):
    """A model violates a structural invariant (symmetry, definiteness, shape)."""


class DocumentError(ModelcertError, ValueError):
    """A model document (LPM network, DPM manifest, matrix file) is malformed."""


class SingularSolveError(ModelcertError, ArithmeticError):
    """A linear solve hit a (numerically) singular matrix, e.g. a resolvent at a pole."""

    def __init__(self, message, s=None):
        super().__init__(message)
        self.s = s


class UnstableSystemError(ModelcertError, ArithmeticError):
    """An operation requiring asymptotic stability was given an unstable system."""

    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class IncomparableSourcesError(ModelcertError, ValueError):
    """Source signals of the two models differ in kind and cannot be compared numerically."""


class InfiniteEnergyError(ModelcertError, ValueError):
    """An input signal has unbounded L2 energy, violating the time-domain bound's precondition."""


class ReductionFailureError(ModelcertError, ArithmeticError):
    """A model reduction step could not certify its contract; no uncertified model is returned."""


class OracleFailureError(ModelcertError, ArithmeticError):
    """A cross-validation oracle (e.g. frequency quadrature) failed to converge."""


class IllConditionedWarning(UserWarning):
    """A solve succeeded but with a residual above the trusted threshold."""


class RankDeficiencyWarning(UserWarning):
    """A requested basis was rank deficient and has been truncated."""

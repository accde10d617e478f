"""Exception hierarchy shared by every dlcert module."""


class DlcertError(Exception):
    """Base class for all errors raised by dlcert."""


class InvalidInput(DlcertError, ValueError):
    """Malformed input: wrong shapes, non-finite entries, bad parameters."""


class AssumptionViolated(DlcertError):
    """The data does not satisfy the full-rank assumptions on (X, Y)."""


class DegenerateSpectrum(AssumptionViolated):
    """Singular values needed to define the optimal subspace are not distinct."""


class NotInV1(DlcertError):
    """The end-to-end product does not have rank k."""


class UseHessianPath(DlcertError):
    """The degenerate ascent construction was asked for at a nonzero product."""


class UseDegeneratePath(DlcertError):
    """The Hessian ascent construction was asked for at a zero product."""


class WitnessSearchFailed(DlcertError):
    """No strict ascent was found by the Hessian line search."""


class WrongRegime(DlcertError):
    """Dimensions do not match the regime required by the operation."""


class NoDeclaredInverse(DlcertError):
    """A layer has no caller-supplied inverse, so invertibility cannot be checked."""


class GenerationFailed(DlcertError):
    """Repeated sampling never produced an instance satisfying the assumptions."""


class DivergenceDetected(DlcertError):
    """Gradient descent produced a non-finite loss.

    The last finite iterate is kept on ``last_state``.
    """

    def __init__(self, message, last_state=None, iteration=None):
        super().__init__(message)
        self.last_state = last_state
        self.iteration = iteration


class ConsistencyError(DlcertError):
    """An identity that must hold exactly was violated beyond tolerance."""

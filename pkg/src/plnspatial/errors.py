"""Exception hierarchy.

``NumericalError`` subclasses signal failures the CLI reports with exit
code 2; everything else derived from ``PlnSpatialError`` is an input or
usage problem.
"""


class PlnSpatialError(Exception):
    pass


class NumericalError(PlnSpatialError):
    pass


class InputError(PlnSpatialError, ValueError):
    pass


# geometry
class DegenerateConfiguration(InputError):
    pass


class ZeroNorm(InputError):
    pass


class NotOnCircle(InputError):
    pass


class CoincidentPoints(InputError):
    pass


# covariance
class MissingCovariate(InputError):
    pass


class EmptyShore(InputError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


# model / sampler
class NonFiniteLinearPredictor(NumericalError):
    pass


class SingularCovariance(NumericalError):
    pass


class NonFiniteProposal(NumericalError):
    pass


class InsufficientChains(InputError):
    pass


class SamplerFailure(NumericalError):
    """Raised by ``run_chains`` with the iteration where a chain broke."""

    def __init__(self, message, iteration=None, chain=None):
        super().__init__(message)
        self.iteration = iteration
        self.chain = chain


# evaluation
class DegenerateVariance(InputError):
    pass


# confounding
class RankDeficientDesign(InputError):
    pass


# harness
class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(InputError):
    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)

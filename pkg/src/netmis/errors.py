"""Exception hierarchy shared across the package."""


class NetmisError(Exception):
    """Base class for all estimation and data errors."""


class BadArgs(NetmisError, ValueError):
    pass


class EmptySample(NetmisError):
    pass


class EmptyCell(NetmisError):
    """No kernel mass at the requested evaluation cell."""


class SingularInput(NetmisError):
    pass


class ComplexSpectrum(NetmisError):
    pass


class AmbiguousOrdering(NetmisError):
    pass


class NonIdentified(NetmisError):
    """Eigenvalues too close to separate latent degree classes."""


class ThinCell(NetmisError):
    pass


class DimMismatch(NetmisError, ValueError):
    pass


class RankDeficient(NetmisError):
    pass


class NoConvergence(NetmisError):
    pass


class SingularHessian(NetmisError):
    pass


class SchemaError(NetmisError):
    def __init__(self, message, row=None, column=None):
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.row = row
        self.column = column


class IntegrityError(SchemaError):
    pass

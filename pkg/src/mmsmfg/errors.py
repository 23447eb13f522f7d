"""Exception hierarchy shared by all solver modules."""


class MmfgError(Exception):
    pass


class InvalidArgument(MmfgError, ValueError):
    pass


class UnsupportedDimension(InvalidArgument):
    pass


class NumericalBlowup(MmfgError, FloatingPointError):
    """Raised when an integrator produces non-finite values."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class ResourceLimit(MmfgError):
    pass


class IterationLimit(MmfgError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class StepSizeError(MmfgError):
    pass


class SchemeError(MmfgError):
    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class InternalConsistencyError(MmfgError):
    pass


class StructuralError(MmfgError):
    pass

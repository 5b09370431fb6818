"""Exception types raised across the package."""


class UnsupportedKernelError(ValueError):
    """Raised for kernel algebra that has no exact state-space form here."""


class NumericalError(RuntimeError):
    """A recursion or quadrature produced a non-finite or invalid quantity.

    ``index`` is the offending step / datapoint when one can be named.
    """

    def __init__(self, message, index=None):
        if index is not None:
            message = f"{message} (index {index})"
        super().__init__(message)
        self.index = index


class QuadratureError(NumericalError):
    pass


class DataError(ValueError):
    """Malformed input data (bad rows, unsorted times, out-of-support y)."""


class ConfigError(ValueError):
    pass

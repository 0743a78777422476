"""Exception taxonomy shared across the package."""


class VidConvError(Exception):
    """Base class for all library errors."""


class ShapeError(VidConvError, ValueError):
    """Tensor/kernel geometry violates an operation's contract."""


class ConfigError(VidConvError, ValueError):
    """Invalid model, data, or run configuration (user error)."""


class NumericsError(VidConvError, RuntimeError):
    """A numerical invariant broke (non-finite values, etc.)."""


class DivergenceError(NumericsError):
    """Training produced a non-finite loss or gradient."""

"""Exception and warning types shared across the package."""


class M2MError(Exception):
    """Base class for all package errors."""


class ConfigError(M2MError):
    """Invalid or inconsistent experiment configuration."""


class DataError(M2MError):
    """Missing or malformed input data (files, datasets, bursts)."""


class ShapeError(M2MError, ValueError):
    """Array dimensions, channel counts or parities do not match a contract."""


class NumericError(M2MError):
    """A numeric procedure failed (solver breakdown, degenerate reduction)."""


class RegistrationError(NumericError):
    """Alignment between two frames could not be estimated."""


class ConvergenceError(RegistrationError):
    """Normal equations are singular or the solve broke down."""


class OverlapError(RegistrationError):
    """Too little common area between the two frames."""


class DegenerateMapError(RegistrationError):
    """Estimated transform failed the determinant sanity bound."""


class DegenerateLossError(NumericError):
    """Loss reduction has no valid samples (empty mask)."""


class ConvergenceWarning(UserWarning):
    """Iteration budget exhausted before the update norm dropped below eps."""

"""Exception hierarchy shared across the package."""


class CloudCamError(Exception):
    pass


class ShapeError(CloudCamError, ValueError):
    pass


class ConfigError(CloudCamError, ValueError):
    pass


class ContractError(CloudCamError, RuntimeError):
    """A caller broke a precondition that is not about shapes (e.g. non-scalar loss)."""


class DomainError(CloudCamError, ValueError):
    pass


class UndefinedCorrelationError(CloudCamError, ArithmeticError):
    pass


class NumericalError(CloudCamError, ArithmeticError):
    pass


class LutBuildError(CloudCamError, ValueError):
    pass


class FormatError(CloudCamError, ValueError):
    """Malformed on-disk file (profile or checkpoint)."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CheckpointShapeError(FormatError):
    pass
